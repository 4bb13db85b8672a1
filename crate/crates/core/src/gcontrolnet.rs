//! The control branch: per-modality embedders, fusion, a trainable copy of
//! the backbone encoder, and output layers feeding the ControlNorm injection
//! sites.
//!
//! Only the γ/β heads at the injection sites start at zero. That single zero
//! layer keeps the controlled model equal to the backbone at initialization,
//! while everything upstream of it already carries the control signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::attention::{AttnCtl, LEVELS};
use crate::backbone::text::TextPrompt;
use crate::backbone::unet::{self, init_backbone, is_encoder_param, Injection, UNetConfig};
use crate::controlnorm::{self, InjectionMode, NormMode};
use crate::error::{contract_err, Error, Result};
use crate::nn::Fwd;
use crate::params::{init, ParamStore, BACKBONE_PREFIX, CONTROL_PREFIX};
use crate::tensor::Tensor;

/// Side length of control maps (pixel resolution).
pub const CONTROL_SIZE: usize = 32;
/// Segmentation classes.
pub const SEG_CLASSES: usize = 6;
/// Keypoints per figure.
pub const KEYPOINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityKind {
    Sketch,
    Segmentation,
    Keypoints,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [
        ModalityKind::Sketch,
        ModalityKind::Segmentation,
        ModalityKind::Keypoints,
    ];

    pub fn channels(self) -> usize {
        match self {
            ModalityKind::Sketch => 1,
            ModalityKind::Segmentation => SEG_CLASSES,
            ModalityKind::Keypoints => KEYPOINTS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Sketch => "sketch",
            ModalityKind::Segmentation => "seg",
            ModalityKind::Keypoints => "kp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| contract_err!("unknown modality kind {s:?}"))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-scene control maps; any subset may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalityBundle {
    pub sketch: Option<Tensor>,
    pub segmentation: Option<Tensor>,
    pub keypoints: Option<Tensor>,
}

impl ModalityBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: ModalityKind) -> Option<&Tensor> {
        match kind {
            ModalityKind::Sketch => self.sketch.as_ref(),
            ModalityKind::Segmentation => self.segmentation.as_ref(),
            ModalityKind::Keypoints => self.keypoints.as_ref(),
        }
    }

    pub fn set(&mut self, kind: ModalityKind, map: Option<Tensor>) {
        match kind {
            ModalityKind::Sketch => self.sketch = map,
            ModalityKind::Segmentation => self.segmentation = map,
            ModalityKind::Keypoints => self.keypoints = map,
        }
    }

    pub fn presence(&self) -> [bool; 3] {
        ModalityKind::ALL.map(|k| self.get(k).is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.presence() == [false; 3]
    }

    /// Keeps only the modalities flagged in `mask`.
    pub fn masked(&self, mask: [bool; 3]) -> Self {
        let mut out = Self::empty();
        for k in ModalityKind::ALL {
            if mask[k.index()] {
                out.set(k, self.get(k).cloned());
            }
        }
        out
    }

    /// Shapes and value ranges of the present maps.
    pub fn validate(&self) -> Result<()> {
        for k in ModalityKind::ALL {
            let Some(t) = self.get(k) else { continue };
            let want = [k.channels(), CONTROL_SIZE, CONTROL_SIZE];
            if t.shape() != want {
                return Err(Error::Validation(format!(
                    "{} map has shape {:?}, expected {:?}",
                    k.name(),
                    t.shape(),
                    want
                )));
            }
            t.check_finite(k.name())?;
            let bad = match k {
                ModalityKind::Sketch => t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)),
                ModalityKind::Keypoints => t.data().iter().any(|&v| v > 1.0),
                ModalityKind::Segmentation => {
                    let plane = CONTROL_SIZE * CONTROL_SIZE;
                    (0..plane).any(|i| {
                        let s: f32 = (0..SEG_CLASSES).map(|c| t.data()[c * plane + i]).sum();
                        s > 1.0 + 1e-6 || (0..SEG_CLASSES).any(|c| t.data()[c * plane + i] < 0.0)
                    })
                }
            };
            if bad {
                return Err(Error::Validation(format!("{} map values out of range", k.name())));
            }
        }
        Ok(())
    }
}

/// The five per-resolution features delivered to the injection sites.
#[derive(Clone, Copy, Debug)]
pub struct ControlFeatures(pub [Var; LEVELS + 1]);

#[derive(Clone, Debug, PartialEq)]
pub struct GControlConfig {
    pub embed_hidden: [usize; 2],
    pub norm_hidden: usize,
    pub injection: InjectionMode,
    pub p_drop: f64,
}

impl Default for GControlConfig {
    fn default() -> Self {
        Self {
            embed_hidden: [16, 32],
            norm_hidden: 32,
            injection: InjectionMode::Residual,
            p_drop: 0.3,
        }
    }
}

pub const ENCODER_COPY: &str = "gcontrol.enc.";

fn embed_name(kind: ModalityKind) -> String {
    format!("{CONTROL_PREFIX}embed.{}", kind.name())
}

fn fuse_name() -> String {
    format!("{CONTROL_PREFIX}fuse")
}

fn out_name(site: usize) -> String {
    format!("{CONTROL_PREFIX}out{site}")
}

/// Builds the branch parameters from a loaded backbone. The encoder and
/// middle block are copied bit-exact. The fusion layer and the input
/// ControlNorm heads are bias-free, so an empty bundle leaves the branch
/// input equal to `z_t`.
pub fn init_from_backbone(backbone: &ParamStore, ucfg: &UNetConfig, gcfg: &GControlConfig, seed: u64) -> Result<ParamStore> {
    let template = init_backbone(ucfg, 0)?;
    let mut s = ParamStore::new();
    for (name, t) in template.iter() {
        let rel = &name[BACKBONE_PREFIX.len()..];
        let src = backbone
            .get(name)
            .ok_or_else(|| contract_err!("backbone checkpoint lacks {name}"))?;
        if src.shape() != t.shape() {
            return Err(contract_err!(
                "backbone tensor {name} has shape {:?}, configuration expects {:?}",
                src.shape(),
                t.shape()
            ));
        }
        if is_encoder_param(rel) {
            s.insert(format!("{ENCODER_COPY}{rel}"), src.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lc = ucfg.latent_channels;
    let [h1, h2] = gcfg.embed_hidden;
    for kind in ModalityKind::ALL {
        let p = embed_name(kind);
        init::conv(&mut s, &mut rng, &format!("{p}.c1"), h1, kind.channels(), 3);
        init::conv(&mut s, &mut rng, &format!("{p}.c2"), h2, h1, 3);
        init::conv(&mut s, &mut rng, &format!("{p}.c3"), lc, h2, 3);
    }
    s.insert(format!("{}.w", fuse_name()), init::fan_in_uniform(&mut rng, &[lc, lc, 1, 1], lc));
    let input = controlnorm::input_name();
    let hidden = gcfg.norm_hidden;
    controlnorm::init_layer(&mut s, &mut rng, &input, lc, lc, hidden, NormMode::default());
    s.insert(format!("{input}.trunk.b"), Tensor::zeros(&[hidden]));
    for head in ["gamma", "beta"] {
        let w = init::fan_in_uniform(&mut rng, &[lc, hidden, 1, 1], hidden);
        s.insert(format!("{input}.{head}.w"), w);
    }
    for (site, shape) in ucfg.site_shapes().iter().enumerate() {
        let c = shape[0];
        init::conv(&mut s, &mut rng, &out_name(site), c, c, 1);
        controlnorm::init_layer(&mut s, &mut rng, &controlnorm::site_name(site), c, c, hidden, NormMode::default());
    }
    Ok(s)
}

/// `c_m = M(C)`: strided convolutions from the control resolution down to
/// the latent resolution.
pub fn embed_modality(f: &mut Fwd, kind: ModalityKind, map: &Tensor) -> Result<Var> {
    let want = [kind.channels(), CONTROL_SIZE, CONTROL_SIZE];
    if map.shape() != want {
        return Err(contract_err!(
            "{} map has shape {:?}, expected {:?}",
            kind.name(),
            map.shape(),
            want
        ));
    }
    let p = embed_name(kind);
    let x = f.g.constant(map.clone());
    let h = f.conv(&format!("{p}.c1"), x, 1, 1)?;
    let h = f.silu(h);
    let h = f.conv(&format!("{p}.c2"), h, 2, 1)?;
    let h = f.silu(h);
    f.conv(&format!("{p}.c3"), h, 1, 1)
}

/// Like [`embed_modality`] with the kind given by name.
pub fn embed_named(f: &mut Fwd, kind: &str, map: &Tensor) -> Result<Var> {
    embed_modality(f, ModalityKind::parse(kind)?, map)
}

/// `Σ_k c_m^k` over the present modalities (zeros when none is present).
pub fn modality_sum(f: &mut Fwd, ucfg: &UNetConfig, bundle: &ModalityBundle) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for kind in ModalityKind::ALL {
        if let Some(map) = bundle.get(kind) {
            let e = embed_modality(f, kind, map)?;
            acc = Some(match acc {
                Some(a) => f.g.add(a, e)?,
                None => e,
            });
        }
    }
    Ok(match acc {
        Some(a) => a,
        None => f.g.constant(Tensor::zeros(&ucfg.latent_shape())),
    })
}

/// `ĉ_m = Z(Σ_k c_m^k)`, a bias-free 1×1 convolution.
pub fn fuse_modalities(f: &mut Fwd, ucfg: &UNetConfig, bundle: &ModalityBundle) -> Result<Var> {
    let sum = modality_sum(f, ucfg, bundle)?;
    f.conv(&fuse_name(), sum, 1, 0)
}

/// The branch encoder's five raw features, before the output layers.
pub fn branch_encoder(
    f: &mut Fwd,
    ucfg: &UNetConfig,
    gcfg: &GControlConfig,
    z_t: Var,
    t: usize,
    ctx: Var,
    c_hat: Var,
    ctl: &mut AttnCtl,
) -> Result<[Var; LEVELS + 1]> {
    let x = controlnorm::inject(f, &controlnorm::input_name(), z_t, c_hat, gcfg.injection)?;
    let (feats, _) = unet::encoder(f, ucfg, ENCODER_COPY, x, t, ctx, ctl)?;
    Ok(feats)
}

/// Branch features `h^(1..5)`.
pub fn branch_forward(
    f: &mut Fwd,
    ucfg: &UNetConfig,
    gcfg: &GControlConfig,
    z_t: Var,
    t: usize,
    ctx: Var,
    c_hat: Var,
    ctl: &mut AttnCtl,
) -> Result<ControlFeatures> {
    let feats = branch_encoder(f, ucfg, gcfg, z_t, t, ctx, c_hat, ctl)?;
    let mut out = feats;
    for (site, (o, feat)) in out.iter_mut().zip(feats).enumerate() {
        *o = f.conv(&out_name(site), feat, 1, 0)?;
    }
    Ok(ControlFeatures(out))
}

/// Attention controls for one full-model forward pass.
#[derive(Default)]
pub struct ForwardCtl<'h> {
    pub backbone: AttnCtl<'h>,
    pub branch: AttnCtl<'h>,
}

/// `ε̂(z_t, t, c_p, ĉ_m)`: backbone prediction, controlled when a bundle is
/// given.
pub fn model_forward(
    f: &mut Fwd,
    ucfg: &UNetConfig,
    gcfg: &GControlConfig,
    z_t: Var,
    t: usize,
    prompt: &TextPrompt,
    bundle: Option<&ModalityBundle>,
    ctl: &mut ForwardCtl,
) -> Result<Var> {
    let ctx = unet::text_encode(f, ucfg, prompt)?;
    let control = match bundle {
        Some(b) => {
            let c_hat = fuse_modalities(f, ucfg, b)?;
            let feats = branch_forward(f, ucfg, gcfg, z_t, t, ctx, c_hat, &mut ctl.branch)?;
            if let (Some(hook), Some(state)) = (ctl.backbone.hook.as_deref_mut(), ctl.branch.capture.as_ref()) {
                hook.branch_maps(state);
            }
            Some(feats)
        }
        None => None,
    };
    let inj = control.as_ref().map(|c| Injection {
        features: &c.0,
        mode: gcfg.injection,
    });
    unet::unet_forward(f, ucfg, z_t, t, ctx, inj, &mut ctl.backbone)
}

/// Independent per-modality keep flags: each modality is dropped with
/// probability `p_drop`.
pub fn sample_modality_subset(rng: &mut impl Rng, p_drop: f64) -> Result<[bool; 3]> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(contract_err!("p_drop {p_drop} outside [0, 1)"));
    }
    Ok([(); 3].map(|_| rng.gen::<f64>() >= p_drop))
}
