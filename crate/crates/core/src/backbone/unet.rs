//! Toy latent-diffusion U-Net: four encoder levels, a middle block and a
//! mirrored decoder, each with one residual block and one text
//! cross-attention block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{cross_attention, AttnCtl, BlockId, LEVELS};
use super::text::TextPrompt;
use crate::autodiff::Var;
use crate::controlnorm::{self, InjectionMode};
use crate::error::{contract_err, Result};
use crate::nn::{init_blocks, Fwd};
use crate::params::{init, ParamStore, BACKBONE_PREFIX};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub widths: [usize; LEVELS],
    pub heads: usize,
    pub n_tokens: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub time_freq_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            widths: [32, 64, 96, 128],
            heads: 2,
            n_tokens: 8,
            vocab: 64,
            text_dim: 64,
            time_freq_dim: 32,
            time_dim: 128,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size, self.latent_size]
    }

    /// Spatial size of encoder level `l` (the middle block shares the last).
    pub fn level_size(&self, l: usize) -> usize {
        self.latent_size >> l.min(LEVELS - 1)
    }

    /// Shapes of the five injection sites: four encoder levels, then middle.
    pub fn site_shapes(&self) -> [[usize; 3]; LEVELS + 1] {
        let mut out = [[0; 3]; LEVELS + 1];
        for (l, o) in out.iter_mut().enumerate() {
            let c = self.widths[l.min(LEVELS - 1)];
            let s = self.level_size(l);
            *o = [c, s, s];
        }
        out
    }

    pub fn block_tokens(&self, block: BlockId) -> usize {
        let l = match block {
            BlockId::Enc(l) | BlockId::Dec(l) => l,
            BlockId::Mid => LEVELS - 1,
        };
        let s = self.level_size(l);
        s * s
    }

    pub fn validate(&self) -> Result<()> {
        if !self.latent_size.is_multiple_of(1 << (LEVELS - 1)) {
            return Err(contract_err!("latent size {} not divisible by 8", self.latent_size));
        }
        for &w in &self.widths {
            if w % self.groups != 0 || w % self.heads != 0 {
                return Err(contract_err!(
                    "width {w} incompatible with {} groups / {} heads",
                    self.groups,
                    self.heads
                ));
            }
        }
        Ok(())
    }
}

/// Fresh backbone parameters under `backbone.`.
pub fn init_backbone(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let p = BACKBONE_PREFIX;
    let d = cfg.text_dim;
    s.insert(
        format!("{p}text.tok"),
        init::fan_in_uniform(&mut rng, &[cfg.vocab, d], 1),
    );
    s.insert(
        format!("{p}text.pos"),
        init::fan_in_uniform(&mut rng, &[cfg.n_tokens, d], 1),
    );
    for part in ["q", "k", "v", "o"] {
        init::linear(&mut s, &mut rng, &format!("{p}text.attn.{part}"), d, d);
    }
    init_encoder(&mut s, &mut rng, p, cfg);
    let w = cfg.widths;
    let mut c = w[LEVELS - 1];
    for l in (0..LEVELS).rev() {
        init_blocks::res_block(&mut s, &mut rng, &format!("{p}dec{l}.res"), c + w[l], w[l], cfg.time_dim);
        init_blocks::cross_attention(&mut s, &mut rng, &format!("{p}dec{l}.attn"), w[l], d);
        c = w[l];
    }
    init::norm_affine(&mut s, &format!("{p}out.n"), w[0]);
    init::zero_conv(&mut s, &format!("{p}out.conv"), cfg.latent_channels, w[0], 3, true);
    Ok(s)
}

/// Encoder + middle parameters (the part the control branch copies).
pub(crate) fn init_encoder(s: &mut ParamStore, rng: &mut ChaCha8Rng, p: &str, cfg: &UNetConfig) {
    let w = cfg.widths;
    init::linear(s, rng, &format!("{p}time.l1"), cfg.time_freq_dim, cfg.time_dim);
    init::linear(s, rng, &format!("{p}time.l2"), cfg.time_dim, cfg.time_dim);
    init::conv(s, rng, &format!("{p}conv_in"), w[0], cfg.latent_channels, 3);
    let mut c = w[0];
    for l in 0..LEVELS {
        init_blocks::res_block(s, rng, &format!("{p}enc{l}.res"), c, w[l], cfg.time_dim);
        init_blocks::cross_attention(s, rng, &format!("{p}enc{l}.attn"), w[l], cfg.text_dim);
        c = w[l];
        if l + 1 < LEVELS {
            init::conv(s, rng, &format!("{p}down{l}"), c, c, 3);
        }
    }
    init_blocks::res_block(s, rng, &format!("{p}mid.res"), c, c, cfg.time_dim);
    init_blocks::cross_attention(s, rng, &format!("{p}mid.attn"), c, cfg.text_dim);
}

/// Whether a backbone-relative parameter name belongs to the encoder copy.
pub fn is_encoder_param(rel: &str) -> bool {
    ["time.", "conv_in.", "enc", "down", "mid."]
        .iter()
        .any(|p| rel.starts_with(p))
}

/// Sinusoidal features of a timestep, computed in 64-bit.
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        v[i] = a.sin() as f32;
        v[half + i] = a.cos() as f32;
    }
    Tensor::new(&[1, dim], v).expect("timestep shape")
}

/// `N_t × D` prompt encoding: token + position embeddings and one residual
/// self-attention mixing layer.
pub fn text_encode(f: &mut Fwd, cfg: &UNetConfig, prompt: &TextPrompt) -> Result<Var> {
    if prompt.len() != cfg.n_tokens {
        return Err(contract_err!("prompt length {} ≠ N_t {}", prompt.len(), cfg.n_tokens));
    }
    let p = BACKBONE_PREFIX;
    let tok = f.param(&format!("{p}text.tok"))?;
    let pos = f.param(&format!("{p}text.pos"))?;
    let e = f.g.embedding(tok, prompt.ids())?;
    let e = f.g.add(e, pos)?;
    let q = f.linear(&format!("{p}text.attn.q"), e)?;
    let k = f.linear(&format!("{p}text.attn.k"), e)?;
    let v = f.linear(&format!("{p}text.attn.v"), e)?;
    let logits = f.g.matmul_t(q, false, k, true)?;
    let logits = f.g.scale(logits, 1.0 / (cfg.text_dim as f32).sqrt());
    let a = f.g.softmax_rows(logits)?;
    let mixed = f.g.matmul(a, v)?;
    let o = f.linear(&format!("{p}text.attn.o"), mixed)?;
    f.g.add(e, o)
}

/// Runs the encoder and middle block under `prefix` and returns the five
/// per-resolution features (four level outputs, then the middle output),
/// together with the activated timestep embedding.
pub fn encoder(
    f: &mut Fwd,
    cfg: &UNetConfig,
    prefix: &str,
    z: Var,
    t: usize,
    ctx: Var,
    ctl: &mut AttnCtl,
) -> Result<([Var; LEVELS + 1], Var)> {
    let tf = f.g.constant(timestep_features(t, cfg.time_freq_dim));
    let temb = f.linear(&format!("{prefix}time.l1"), tf)?;
    let temb = f.silu(temb);
    let temb = f.linear(&format!("{prefix}time.l2"), temb)?;
    let temb = f.silu(temb);
    let mut h = f.conv(&format!("{prefix}conv_in"), z, 1, 1)?;
    let mut feats = [h; LEVELS + 1];
    for (l, feat) in feats.iter_mut().enumerate().take(LEVELS) {
        h = f.res_block(&format!("{prefix}enc{l}.res"), h, temb, cfg.groups)?;
        h = cross_attention(f, &format!("{prefix}enc{l}.attn"), h, ctx, cfg.heads, cfg.groups, BlockId::Enc(l), ctl)?;
        *feat = h;
        if l + 1 < LEVELS {
            h = f.conv(&format!("{prefix}down{l}"), h, 2, 1)?;
        }
    }
    h = f.res_block(&format!("{prefix}mid.res"), h, temb, cfg.groups)?;
    h = cross_attention(f, &format!("{prefix}mid.attn"), h, ctx, cfg.heads, cfg.groups, BlockId::Mid, ctl)?;
    feats[LEVELS] = h;
    Ok((feats, temb))
}

fn decoder(
    f: &mut Fwd,
    cfg: &UNetConfig,
    feats: &[Var; LEVELS + 1],
    temb: Var,
    ctx: Var,
    ctl: &mut AttnCtl,
) -> Result<Var> {
    let p = BACKBONE_PREFIX;
    let mut h = feats[LEVELS];
    for l in (0..LEVELS).rev() {
        let cat = f.g.concat(&[h, feats[l]])?;
        h = f.res_block(&format!("{p}dec{l}.res"), cat, temb, cfg.groups)?;
        h = cross_attention(f, &format!("{p}dec{l}.attn"), h, ctx, cfg.heads, cfg.groups, BlockId::Dec(l), ctl)?;
        if l > 0 {
            let s = cfg.level_size(l - 1);
            h = f.g.resize_nearest(h, s, s)?;
        }
    }
    let h = f.group_norm(&format!("{p}out.n"), h, cfg.groups)?;
    let h = f.silu(h);
    f.conv(&format!("{p}out.conv"), h, 1, 1)
}

/// Control features handed to the backbone, one per injection site.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub features: &'a [Var; LEVELS + 1],
    pub mode: InjectionMode,
}

/// Noise prediction `ε̂(z_t, t, c_p[, h])`.
///
/// With `control`, every encoder-level feature and the middle output are
/// modulated by the branch features through the ControlNorm injection sites
/// before the decoder consumes them.
pub fn unet_forward(
    f: &mut Fwd,
    cfg: &UNetConfig,
    z_t: Var,
    t: usize,
    ctx: Var,
    control: Option<Injection>,
    ctl: &mut AttnCtl,
) -> Result<Var> {
    let shape = f.g.shape(z_t);
    if shape != cfg.latent_shape() {
        return Err(contract_err!("latent shape {:?} ≠ {:?}", shape, cfg.latent_shape()));
    }
    let (mut feats, temb) = encoder(f, cfg, BACKBONE_PREFIX, z_t, t, ctx, ctl)?;
    if let Some(inj) = control {
        for (site, feat) in feats.iter_mut().enumerate() {
            let h = inj.features[site];
            if f.g.shape(h) != f.g.shape(*feat) {
                return Err(contract_err!(
                    "control feature {site} shape {:?} ≠ site shape {:?}",
                    f.g.shape(h),
                    f.g.shape(*feat)
                ));
            }
            *feat = controlnorm::inject(f, &controlnorm::site_name(site), *feat, h, inj.mode)?;
        }
    }
    decoder(f, cfg, &feats, temb, ctx, ctl)
}
