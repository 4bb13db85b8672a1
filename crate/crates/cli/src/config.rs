//! Run configuration: every tunable in one place, stored as `key = value`
//! lines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cocktail_core::backbone::schedule::NoiseSchedule;
use cocktail_core::backbone::SamplerConfig;
use cocktail_core::controlnorm::InjectionMode;
use cocktail_core::guidance::Variant;
use cocktail_core::{GControlConfig, UNetConfig};

/// Comma-separated list of sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeList(pub Vec<usize>);

impl FromStr for SizeList {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map(SizeList)
    }
}

impl fmt::Display for SizeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! run_config {
    ($($key:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Every key with its description.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($key), $doc),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| anyhow!("bad value {value:?} for {key}: {e}"))?;
                    })*
                    _ => bail!("unknown configuration key {key:?}"),
                }
                Ok(())
            }

            pub fn render(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "master seed for initialization, training and sampling";
    base_seed: u64 = 0, "first scene seed of the training split";
    n_train: usize = 2000, "training scenes";
    n_eval: usize = 200, "evaluation scenes";
    previews: usize = 8, "preview scenes written by synth";
    schedule_steps: usize = 1000, "diffusion steps T";
    beta_start: f64 = 1e-4, "first beta of the linear schedule";
    beta_end: f64 = 2e-2, "last beta of the linear schedule";
    latent_size: usize = 16, "latent side length";
    widths: SizeList = SizeList(vec![32, 64, 96, 128]), "channel width per encoder level";
    heads: usize = 2, "attention heads";
    n_tokens: usize = 8, "prompt slots N_t";
    vocab: usize = 64, "token vocabulary size";
    text_dim: usize = 64, "text embedding width";
    time_freq_dim: usize = 32, "sinusoidal timestep features";
    time_dim: usize = 128, "timestep embedding width";
    groups: usize = 8, "group-norm groups";
    embed_hidden: SizeList = SizeList(vec![16, 32]), "modality embedder hidden widths";
    norm_hidden: usize = 32, "ControlNorm generator trunk width";
    injection: String = "residual".into(), "injection wiring: residual or strict";
    pretrain_steps: usize = 2000, "backbone optimization steps";
    control_steps: usize = 3000, "control-branch optimization steps";
    batch_size: usize = 16, "scenes per optimization step";
    lr: f32 = 3e-4, "backbone learning rate";
    control_lr: f32 = 1e-3, "control-branch learning rate";
    weight_decay: f32 = 0.01, "AdamW decoupled weight decay";
    prompt_drop: f64 = 0.1, "probability of training on the empty prompt";
    p_drop: f64 = 0.3, "per-modality drop probability in control training";
    loss_window: usize = 50, "steps averaged for smoothed losses";
    sample_steps: usize = 50, "DDIM steps";
    cfg_scale: f32 = 9.0, "classifier-free guidance scale";
    eta: f64 = 0.0, "DDIM stochasticity";
    omega_prime: f64 = 1.0, "spatial guidance strength";
    guidance_variant: String = "literal".into(), "mask weighting: literal or logit";
    eval_count: usize = 200, "evaluation scenes scored by eval";
    data_dir: String = "data".into(), "dataset directory, relative to --out";
    backbone_path: String = "backbone.ckpt".into(), "backbone checkpoint, relative to --out";
    control_path: String = "gcontrol.ckpt".into(), "control checkpoint, relative to --out";
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            bail!("n_train and n_eval must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.p_drop) || !(0.0..1.0).contains(&self.prompt_drop) {
            bail!("drop probabilities must lie in [0, 1)");
        }
        if self.omega_prime < 0.0 {
            bail!("omega_prime must be non-negative");
        }
        if self.widths.0.len() != 4 {
            bail!("widths needs exactly 4 entries");
        }
        if self.embed_hidden.0.len() != 2 {
            bail!("embed_hidden needs exactly 2 entries");
        }
        self.injection_mode()?;
        self.variant()?;
        self.unet().validate()?;
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        let w = &self.widths.0;
        UNetConfig {
            latent_channels: cocktail_core::backbone::latent::LATENT_CHANNELS,
            latent_size: self.latent_size,
            widths: [w[0], w[1], w[2], w[3]],
            heads: self.heads,
            n_tokens: self.n_tokens,
            vocab: self.vocab,
            text_dim: self.text_dim,
            time_freq_dim: self.time_freq_dim,
            time_dim: self.time_dim,
            groups: self.groups,
        }
    }

    pub fn injection_mode(&self) -> Result<InjectionMode> {
        Ok(InjectionMode::parse(&self.injection)?)
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(Variant::parse(&self.guidance_variant)?)
    }

    pub fn gcontrol(&self) -> Result<GControlConfig> {
        Ok(GControlConfig {
            embed_hidden: [self.embed_hidden.0[0], self.embed_hidden.0[1]],
            norm_hidden: self.norm_hidden,
            injection: self.injection_mode()?,
            p_drop: self.p_drop,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)?)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample_steps,
            cfg_scale: self.cfg_scale,
            eta: self.eta,
        }
    }
}
