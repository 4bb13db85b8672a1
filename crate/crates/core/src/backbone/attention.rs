//! Cross-attention bookkeeping: block identities, captured maps and the
//! editing hook used by spatial guidance.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::Fwd;
use crate::tensor::Tensor;

/// Number of encoder resolution levels.
pub const LEVELS: usize = 4;

/// A cross-attention block of the U-Net (or of the branch, which only has
/// the encoder and middle blocks).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Enc(usize),
    Mid,
    Dec(usize),
}

impl BlockId {
    /// All backbone blocks in execution order.
    pub fn backbone_blocks() -> Vec<BlockId> {
        let mut v: Vec<_> = (0..LEVELS).map(BlockId::Enc).collect();
        v.push(BlockId::Mid);
        v.extend((0..LEVELS).rev().map(BlockId::Dec));
        v
    }

    pub fn branch_blocks() -> Vec<BlockId> {
        let mut v: Vec<_> = (0..LEVELS).map(BlockId::Enc).collect();
        v.push(BlockId::Mid);
        v
    }

    /// The branch block whose maps stand in for this block's maps: encoder
    /// and middle blocks pair with themselves, decoder blocks with the
    /// encoder block of the same resolution.
    pub fn branch_source(self) -> BlockId {
        match self {
            BlockId::Dec(l) => BlockId::Enc(l),
            other => other,
        }
    }

    pub fn name(self) -> String {
        match self {
            BlockId::Enc(l) => format!("enc{l}"),
            BlockId::Mid => "mid".to_string(),
            BlockId::Dec(l) => format!("dec{l}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Backbone,
    Branch,
}

/// Row-stochastic maps of one block, shaped `heads × N_i × N_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: BlockId,
    pub maps: Tensor,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn n_i(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn n_t(&self) -> usize {
        self.maps.shape()[2]
    }

    /// The `N_i × N_t` map of one head.
    pub fn head(&self, h: usize) -> Tensor {
        let (ni, nt) = (self.n_i(), self.n_t());
        let d = &self.maps.data()[h * ni * nt..(h + 1) * ni * nt];
        Tensor::new(&[ni, nt], d.to_vec()).expect("head slice")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub origin: Origin,
    pub maps: Vec<AttentionMap>,
}

impl AttentionState {
    pub fn new(origin: Origin) -> Self {
        Self {
            origin,
            maps: Vec::new(),
        }
    }

    pub fn get(&self, block: BlockId) -> Option<&AttentionMap> {
        self.maps.iter().find(|m| m.block == block)
    }
}

/// Sampling-time editor of attention maps.
pub trait AttentionHook {
    /// Receives the branch maps of the current forward pass before any
    /// backbone block runs.
    fn branch_maps(&mut self, _state: &AttentionState) {}

    /// Given one head's logits `⟨Q_i, K_j⟩` and its unedited softmax map,
    /// returns the map to multiply with `V`, or `None` to keep the original.
    fn edit(&mut self, block: BlockId, head: usize, logits: &Tensor, attn: &Tensor) -> Result<Option<Tensor>>;
}

/// Per-forward attention controls: optional capture and optional editing.
#[derive(Default)]
pub struct AttnCtl<'h> {
    pub capture: Option<AttentionState>,
    pub hook: Option<&'h mut dyn AttentionHook>,
}

impl<'h> AttnCtl<'h> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn capturing(origin: Origin) -> Self {
        Self {
            capture: Some(AttentionState::new(origin)),
            hook: None,
        }
    }

    pub fn with_hook(mut self, hook: &'h mut dyn AttentionHook) -> Self {
        self.hook = Some(hook);
        self
    }
}

/// Multi-head cross-attention of C×H×W features over an `N_t × D` context,
/// with a residual connection.
pub fn cross_attention(
    f: &mut Fwd,
    name: &str,
    x: Var,
    ctx: Var,
    heads: usize,
    groups: usize,
    block: BlockId,
    ctl: &mut AttnCtl,
) -> Result<Var> {
    let (c, h, w) = f.value(x).chw()?;
    if c % heads != 0 {
        return Err(shape_err!("{c} channels do not split into {heads} heads"));
    }
    let d = c / heads;
    let n = f.group_norm(&format!("{name}.n"), x, groups)?;
    let tokens = f.to_tokens(n)?;
    let q = f.linear(&format!("{name}.q"), tokens)?;
    let k = f.linear(&format!("{name}.k"), ctx)?;
    let v = f.linear(&format!("{name}.v"), ctx)?;
    let n_t = f.g.shape(k)[0];
    let scale = 1.0 / (d as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut captured = Vec::new();
    for hd in 0..heads {
        let qh = f.g.slice_cols(q, hd * d, d)?;
        let kh = f.g.slice_cols(k, hd * d, d)?;
        let vh = f.g.slice_cols(v, hd * d, d)?;
        let raw = f.g.matmul_t(qh, false, kh, true)?;
        let logits = f.g.scale(raw, scale);
        let attn = f.g.softmax_rows(logits)?;
        if ctl.capture.is_some() {
            captured.extend_from_slice(f.g.value(attn).data());
        }
        let used = match ctl.hook.as_deref_mut() {
            Some(hook) => {
                match hook.edit(block, hd, f.g.value(logits), f.g.value(attn))? {
                    Some(edited) => {
                        f.g.value(attn).expect_same_shape(&edited)?;
                        f.g.constant(edited)
                    }
                    None => attn,
                }
            }
            None => attn,
        };
        outs.push(f.g.matmul(used, vh)?);
    }
    if let Some(state) = ctl.capture.as_mut() {
        state.maps.push(AttentionMap {
            block,
            maps: Tensor::new(&[heads, h * w, n_t], captured)?,
        });
    }
    let o = if heads == 1 { outs[0] } else { f.g.concat_cols(&outs)? };
    let o = f.linear(&format!("{name}.o"), o)?;
    let o = f.from_tokens(o, h, w)?;
    f.g.add(x, o)
}
