//! Controllable normalization: channel-normalize a carrier feature, then
//! scale and shift it with maps generated from a condition.
//!
//! `out = (1 + γ(c)) ⊙ (x − μ_c) / σ_c + β(c)`
//!
//! The γ and β heads start at zero, so a fresh layer returns the
//! normalized carrier exactly.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{contract_err, Result};
use crate::nn::Fwd;
use crate::params::{init, ParamStore, CONTROL_PREFIX};

/// Axis over which the carrier statistics are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StatsAxis {
    /// Per channel, over spatial positions.
    #[default]
    ChannelSpatial,
    /// Per spatial position, across channels.
    SpatialOnly,
}

/// Where the condition comes from and how it is wired into γ and β.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConditionSource {
    /// A C'×H'×W' map, resampled to the carrier resolution; γ and β vary
    /// per position.
    #[default]
    ExternalMap,
    /// A length-D vector; γ and β are constant over positions.
    ExternalVector,
    /// A feature map from another network; wired like `ExternalMap`.
    IntermediateFeature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct NormMode {
    stats: StatsAxis,
    source: ConditionSource,
}

impl NormMode {
    pub fn new(stats: StatsAxis, source: ConditionSource) -> Result<Self> {
        if stats == StatsAxis::SpatialOnly && source == ConditionSource::IntermediateFeature {
            return Err(contract_err!(
                "spatial-only statistics with an intermediate-feature condition is not a supported combination"
            ));
        }
        Ok(Self { stats, source })
    }

    pub fn stats(&self) -> StatsAxis {
        self.stats
    }

    pub fn source(&self) -> ConditionSource {
        self.source
    }

    fn is_vector(&self) -> bool {
        self.source == ConditionSource::ExternalVector
    }
}

/// How a ControlNorm layer is wired into the feature it modulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InjectionMode {
    /// `x + n ⊙ γ(h) + β(h)` with `n` the normalized carrier, i.e. `x` plus
    /// the layer's departure from plain normalization. Identity while the
    /// heads are zero.
    #[default]
    Residual,
    /// `apply(x, h)` as is.
    Strict,
}

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::Residual => "residual",
            InjectionMode::Strict => "strict",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(InjectionMode::Residual),
            "strict" => Ok(InjectionMode::Strict),
            _ => Err(contract_err!("unknown injection mode {s:?}")),
        }
    }
}

/// Parameter name of the injection site for encoder level `site` (4 = middle).
pub fn site_name(site: usize) -> String {
    format!("{CONTROL_PREFIX}cnorm.site{site}")
}

pub fn input_name() -> String {
    format!("{CONTROL_PREFIX}cnorm.input")
}

/// Creates `name.trunk`, `name.gamma`, `name.beta` for a carrier with
/// `carrier_c` channels and a condition with `cond_c` channels (or length,
/// for vector conditions).
pub fn init_layer(
    s: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    carrier_c: usize,
    cond_c: usize,
    hidden: usize,
    mode: NormMode,
) {
    if mode.is_vector() {
        init::linear(s, rng, &format!("{name}.trunk"), cond_c, hidden);
        init::zero_linear(s, &format!("{name}.gamma"), hidden, carrier_c);
        init::zero_linear(s, &format!("{name}.beta"), hidden, carrier_c);
    } else {
        init::conv(s, rng, &format!("{name}.trunk"), hidden, cond_c, 3);
        init::zero_conv(s, &format!("{name}.gamma"), carrier_c, hidden, 1, true);
        init::zero_conv(s, &format!("{name}.beta"), carrier_c, hidden, 1, true);
    }
}

/// `(x − μ) / σ` with the statistics axis of `stats`.
pub fn normalize(f: &mut Fwd, x: Var, stats: StatsAxis) -> Result<Var> {
    let (c, h, w) = f.value(x).chw()?;
    match stats {
        StatsAxis::ChannelSpatial => f.g.group_norm(x, c, crate::EPS_STD),
        StatsAxis::SpatialOnly => {
            let t = f.to_tokens(x)?;
            let n = f.g.group_norm(t, h * w, crate::EPS_STD)?;
            f.from_tokens(n, h, w)
        }
    }
}

/// Generated `(γ, β)`, both shaped like the carrier (map conditions) or
/// length C (vector conditions).
pub fn generate(f: &mut Fwd, name: &str, carrier: Var, cond: Var, mode: NormMode) -> Result<(Var, Var)> {
    let (c, h, w) = f.value(carrier).chw()?;
    let (gamma, beta) = if mode.is_vector() {
        let d = f.value(cond).len();
        let v = f.g.reshape(cond, &[1, d])?;
        let t = f.linear(&format!("{name}.trunk"), v)?;
        let t = f.silu(t);
        let gamma = f.linear(&format!("{name}.gamma"), t)?;
        let beta = f.linear(&format!("{name}.beta"), t)?;
        let n = f.g.shape(gamma)[1];
        if n != c {
            return Err(contract_err!("generator emits {n} channels for a {c}-channel carrier"));
        }
        (f.g.reshape(gamma, &[c])?, f.g.reshape(beta, &[c])?)
    } else {
        let cond = f.g.resize_nearest(cond, h, w)?;
        let t = f.conv(&format!("{name}.trunk"), cond, 1, 1)?;
        let t = f.silu(t);
        let gamma = f.conv(&format!("{name}.gamma"), t, 1, 0)?;
        let beta = f.conv(&format!("{name}.beta"), t, 1, 0)?;
        let n = f.g.shape(gamma)[0];
        if n != c {
            return Err(contract_err!("generator emits {n} channels for a {c}-channel carrier"));
        }
        (gamma, beta)
    };
    Ok((gamma, beta))
}

/// Modulates an already-normalized carrier: `n + n ⊙ γ + β`.
pub fn modulate(f: &mut Fwd, normed: Var, gamma: Var, beta: Var) -> Result<Var> {
    if f.g.shape(gamma).len() == 1 {
        let scaled = f.g.mul_channel(normed, gamma)?;
        let y = f.g.add(normed, scaled)?;
        f.g.add_channel(y, beta)
    } else {
        let scaled = f.g.mul(normed, gamma)?;
        let y = f.g.add(normed, scaled)?;
        f.g.add(y, beta)
    }
}

/// The layer in an explicit configuration.
pub fn apply_mode(f: &mut Fwd, name: &str, carrier: Var, cond: Var, mode: NormMode) -> Result<Var> {
    let normed = normalize(f, carrier, mode.stats)?;
    let (gamma, beta) = generate(f, name, carrier, cond, mode)?;
    modulate(f, normed, gamma, beta)
}

/// The layer in its default configuration: per-channel statistics and a
/// spatial condition map.
pub fn apply(f: &mut Fwd, name: &str, carrier: Var, cond: Var) -> Result<Var> {
    apply_mode(f, name, carrier, cond, NormMode::default())
}

/// Injection site: modulates `carrier` with `h` and wires the result back
/// according to `mode`.
pub fn inject(f: &mut Fwd, name: &str, carrier: Var, h: Var, mode: InjectionMode) -> Result<Var> {
    match mode {
        InjectionMode::Strict => apply(f, name, carrier, h),
        InjectionMode::Residual => {
            let normed = normalize(f, carrier, StatsAxis::ChannelSpatial)?;
            let (gamma, beta) = generate(f, name, carrier, h, NormMode::default())?;
            let scaled = f.g.mul(normed, gamma)?;
            let shift = f.g.add(scaled, beta)?;
            f.g.add(carrier, shift)
        }
    }
}
