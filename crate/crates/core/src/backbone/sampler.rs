//! DDIM sampling with classifier-free guidance, optional control and
//! optional attention editing.

use super::attention::{AttentionState, AttnCtl, Origin};
use super::latent;
use super::schedule::{cfg_combine, NoiseSchedule};
use super::text::TextPrompt;
use super::unet::UNetConfig;
use crate::autodiff::Graph;
use crate::error::{contract_err, Result};
use crate::gcontrolnet::{model_forward, ForwardCtl, GControlConfig, ModalityBundle};
use crate::guidance::{GuidanceConfig, SpatialGuidance};
use crate::nn::Fwd;
use crate::params::{Binder, ParamStore, CONTROL_PREFIX};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 9.0,
            eta: 0.0,
        }
    }
}

/// Everything needed to evaluate `ε̂`: configuration, schedule and the
/// (backbone + optional branch) parameters.
pub struct Model {
    pub unet: UNetConfig,
    pub control: GControlConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
}

impl Model {
    pub fn new(unet: UNetConfig, control: GControlConfig, schedule: NoiseSchedule, params: ParamStore) -> Self {
        Self {
            unet,
            control,
            schedule,
            params,
        }
    }

    pub fn has_control(&self) -> bool {
        self.params.names().any(|n| n.starts_with(CONTROL_PREFIX))
    }

    /// One inference forward pass.
    pub fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        prompt: &TextPrompt,
        bundle: Option<&ModalityBundle>,
        ctl: &mut ForwardCtl,
    ) -> Result<Tensor> {
        if bundle.is_some() && !self.has_control() {
            return Err(contract_err!("a modality bundle needs control-branch parameters"));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let mut f = Fwd::new(&mut g, &mut b);
        let z = f.g.constant(z_t.clone());
        let eps = model_forward(&mut f, &self.unet, &self.control, z, t, prompt, bundle, ctl)?;
        let out = f.value(eps).clone();
        out.check_finite("noise prediction")?;
        Ok(out)
    }
}

/// Attention maps of the conditional pass at one sampling step.
#[derive(Clone, Debug)]
pub struct StepAttention {
    pub step: usize,
    pub t: usize,
    pub backbone: AttentionState,
    pub branch: Option<AttentionState>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub image: Tensor,
    pub attention: Vec<StepAttention>,
}

/// Runs the full reverse loop from seeded Gaussian noise and decodes the
/// result. `capture` records the conditional pass's maps at every step.
pub fn sample(
    model: &Model,
    prompt: &TextPrompt,
    bundle: Option<&ModalityBundle>,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
    cfg: &SamplerConfig,
    capture: bool,
) -> Result<SampleOutput> {
    if let Some(b) = bundle {
        b.validate()?;
    }
    let mut hook = match guidance {
        Some(gc) => {
            let h = SpatialGuidance::new(gc.clone(), model.unet.n_tokens)?;
            if h.needs_branch_maps() && bundle.is_none() {
                return Err(contract_err!("attention substitution needs a modality bundle"));
            }
            Some(h)
        }
        None => None,
    };
    let uncond = TextPrompt::empty(model.unet.n_tokens);
    let timesteps = model.schedule.ddim_timesteps(cfg.steps)?;
    let mut z = rng::normal(&mut rng::stream(seed, 0), &model.unet.latent_shape());
    let mut attention = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let mut ctl = ForwardCtl::default();
        let eps_u = model.predict(&z, t, &uncond, bundle, &mut ctl)?;
        let wants_branch = bundle.is_some() && (capture || hook.as_ref().is_some_and(|h| h.needs_branch_maps()));
        let mut ctl = ForwardCtl {
            backbone: if capture { AttnCtl::capturing(Origin::Backbone) } else { AttnCtl::none() },
            branch: if wants_branch { AttnCtl::capturing(Origin::Branch) } else { AttnCtl::none() },
        };
        if let Some(h) = hook.as_mut() {
            h.set_sigma(model.schedule.sigma_level(t));
            ctl.backbone.hook = Some(h);
        }
        let eps_c = model.predict(&z, t, prompt, bundle, &mut ctl)?;
        if capture {
            attention.push(StepAttention {
                step: i,
                t,
                backbone: ctl.backbone.capture.take().expect("capturing"),
                branch: ctl.branch.capture.take(),
            });
        }
        let eps = cfg_combine(&eps_u, &eps_c, cfg.cfg_scale)?;
        let noise = (cfg.eta > 0.0).then(|| rng::normal(&mut rng::stream(seed, 1 + i as u64), z.shape()));
        z = model.schedule.ddim_step(&z, t, t_prev, &eps, cfg.eta, noise.as_ref())?;
        z.check_finite("latent")?;
    }
    let image = latent::decode(&z)?;
    Ok(SampleOutput {
        latent: z,
        image,
        attention,
    })
}
