use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Discrete noise schedule over `T` training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` (inclusive).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(contract_err!(
                "invalid schedule: T={steps}, beta {beta_start}..{beta_end}"
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(1 - ᾱ_t) / sqrt(ᾱ_t)`, the signal-relative noise level.
    pub fn sigma_level(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (1.0 - ab).sqrt() / ab.sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(contract_err!("timestep {t} outside 0..{}", self.len()));
        }
        Ok(())
    }

    /// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 - ᾱ_t)·eps`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        diffuse_with(z0, eps, self.alpha_bar[t])
    }

    /// `steps` uniformly spaced timesteps, highest first, ending at `T/steps - 1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(contract_err!("cannot take {steps} DDIM steps over T={}", self.len()));
        }
        let ratio = self.len() / steps;
        Ok((0..steps).rev().map(|i| i * ratio + ratio - 1).collect())
    }

    /// One DDIM update from `t` to `t_prev` (`None` is the clean endpoint,
    /// where `ᾱ = 1`). `noise` is required when `eta > 0`.
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        eps_hat: &Tensor,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if let Some(tp) = t_prev {
            if tp >= t {
                return Err(contract_err!("DDIM step needs t_prev < t, got {tp} ≥ {t}"));
            }
        }
        let ab_prev = t_prev.map_or(1.0, |tp| self.alpha_bar[tp]);
        ddim_update(z_t, eps_hat, self.alpha_bar[t], ab_prev, eta, noise)
    }
}

pub fn diffuse_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    z0.zip_map(eps, |x, e| (a * x as f64 + s * e as f64) as f32)
}

/// DDIM update between two cumulative-alpha levels.
pub fn ddim_update(
    z_t: &Tensor,
    eps_hat: &Tensor,
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(contract_err!("eta must lie in [0, 1], got {eta}"));
    }
    z_t.expect_same_shape(eps_hat)?;
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let noise = match (sigma > 0.0, noise) {
        (true, Some(n)) => {
            z_t.expect_same_shape(n)?;
            Some(n)
        }
        (true, None) => return Err(contract_err!("stochastic DDIM step needs noise")),
        (false, _) => None,
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa_t, sb_t, sa_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    let mut out = Tensor::zeros(z_t.shape());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let z = z_t.data()[i] as f64;
        let e = eps_hat.data()[i] as f64;
        let x0 = (z - sb_t * e) / sa_t;
        let mut v = sa_prev * x0 + dir * e;
        if let Some(n) = noise {
            v += sigma * n.data()[i] as f64;
        }
        *o = v as f32;
    }
    Ok(out)
}

/// `eps_uncond + scale·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}
