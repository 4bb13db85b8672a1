//! Spatial guidance: region-mask weighting of cross-attention with a
//! noise-annealed strength, and substitution of object-token columns by the
//! branch's attention.

use std::collections::BTreeMap;

use crate::autodiff::kernels;
use crate::backbone::attention::{AttentionHook, AttentionState, BlockId};
use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Polarity::Positive),
            "neg" => Ok(Polarity::Negative),
            _ => Err(Error::Validation(format!("unknown polarity {s:?}"))),
        }
    }
}

/// A token slot tied to a binary pixel-space region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub token: usize,
    pub polarity: Polarity,
    /// `H × W` mask with entries in {0, 1}.
    pub mask: Tensor,
}

impl RegionSpec {
    pub fn new(token: usize, polarity: Polarity, mask: Tensor) -> Result<Self> {
        mask.rc()?;
        if polarity == Polarity::Positive && mask.data().iter().all(|&v| v < 0.5) {
            return Err(Error::Validation(format!("positive region for token {token} is empty")));
        }
        Ok(Self {
            token,
            polarity,
            mask: mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    /// Mask terms added outside the exponential over the unedited
    /// normalizer; rows need not sum to one.
    #[default]
    Literal,
    /// Mask terms added to the logits before the softmax.
    LogitSpace,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Literal => "literal",
            Variant::LogitSpace => "logit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Variant::Literal),
            "logit" => Ok(Variant::LogitSpace),
            _ => Err(Error::Validation(format!("unknown guidance variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidanceConfig {
    pub omega_prime: f64,
    pub regions: Vec<RegionSpec>,
    /// Tokens whose attention columns are taken from the branch.
    pub substitute: Vec<usize>,
    pub variant: Variant,
}

impl GuidanceConfig {
    pub fn validate(&self, n_t: usize) -> Result<()> {
        if !(self.omega_prime >= 0.0 && self.omega_prime.is_finite()) {
            return Err(Error::Validation(format!("ω' = {} must be a finite non-negative number", self.omega_prime)));
        }
        if let Some(j) = self.substitute.iter().find(|&&j| j >= n_t) {
            return Err(Error::Validation(format!("substitution token {j} ≥ N_t = {n_t}")));
        }
        if let Some(r) = self.regions.iter().find(|r| r.token >= n_t) {
            return Err(Error::Validation(format!("region token {} ≥ N_t = {n_t}", r.token)));
        }
        Ok(())
    }
}

/// Area-threshold downsampling of an `H × W` mask to `res × res`: a cell is
/// set when at least half its pixels are.
pub fn downsample_mask(mask: &Tensor, res: usize) -> Result<Vec<bool>> {
    let (h, w) = mask.rc()?;
    if res == 0 || h % res != 0 || w % res != 0 {
        return Err(contract_err!("{h}×{w} mask does not tile a {res}×{res} grid"));
    }
    let (fy, fx) = (h / res, w / res);
    let mut out = vec![false; res * res];
    for (cell, o) in out.iter_mut().enumerate() {
        let (cy, cx) = (cell / res, cell % res);
        let mut on = 0;
        for y in cy * fy..(cy + 1) * fy {
            for x in cx * fx..(cx + 1) * fx {
                on += (mask.data()[y * w + x] >= 0.5) as usize;
            }
        }
        *o = 2 * on >= fy * fx;
    }
    Ok(out)
}

/// `(M_pos, M_neg)`, each `N_i × N_t` with `N_i = res²`.
///
/// Tokens without a positive spec get the union of all positive regions in
/// their negative column.
pub fn build_masks(specs: &[RegionSpec], n_t: usize, res: usize) -> Result<(Tensor, Tensor)> {
    let n_i = res * res;
    let mut pos = vec![0.0f32; n_i * n_t];
    let mut neg = vec![0.0f32; n_i * n_t];
    let mut union = vec![false; n_i];
    let mut has_pos = vec![false; n_t];
    for s in specs {
        if s.token >= n_t {
            return Err(contract_err!("region token {} ≥ N_t = {n_t}", s.token));
        }
        let cells = downsample_mask(&s.mask, res)?;
        let target = match s.polarity {
            Polarity::Positive => {
                has_pos[s.token] = true;
                for (u, &c) in union.iter_mut().zip(&cells) {
                    *u |= c;
                }
                &mut pos
            }
            Polarity::Negative => &mut neg,
        };
        for (i, &c) in cells.iter().enumerate() {
            if c {
                target[i * n_t + s.token] = 1.0;
            }
        }
    }
    for j in (0..n_t).filter(|&j| !has_pos[j]) {
        for (i, &u) in union.iter().enumerate() {
            if u {
                neg[i * n_t + j] = 1.0;
            }
        }
    }
    Ok((Tensor::new(&[n_i, n_t], pos)?, Tensor::new(&[n_i, n_t], neg)?))
}

/// `ω = ω' · ln(1 + σ) · max(A)`.
pub fn omega(omega_prime: f64, sigma: f64, attn: &Tensor) -> f64 {
    let max_a = attn.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    omega_prime * sigma.ln_1p() * max_a
}

/// Edited attention map from one head's logits and the two mask matrices.
pub fn masked_attention(
    logits: &Tensor,
    m_pos: &Tensor,
    m_neg: &Tensor,
    w_pos: f64,
    w_neg: f64,
    variant: Variant,
) -> Result<Tensor> {
    let (r, c) = logits.rc()?;
    logits.expect_same_shape(m_pos)?;
    logits.expect_same_shape(m_neg)?;
    logits.check_finite("attention logits")?;
    let mut out = vec![0.0f32; r * c];
    let mut shifted = vec![0.0f32; c];
    for i in 0..r {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mp = &m_pos.data()[i * c..(i + 1) * c];
        let mn = &m_neg.data()[i * c..(i + 1) * c];
        let o = &mut out[i * c..(i + 1) * c];
        match variant {
            Variant::Literal => {
                let (m, z) = kernels::softmax_row(row, o);
                if w_pos == 0.0 && w_neg == 0.0 {
                    continue;
                }
                // exp(l) + w·M over Σ exp(l), with exp(−m) folded in for range.
                let inv = (-(m as f64)).exp();
                for j in 0..c {
                    let e = ((row[j] - m) as f64).exp();
                    let edit = (w_pos * mp[j] as f64 - w_neg * mn[j] as f64) * inv;
                    o[j] = ((e + edit) / z) as f32;
                }
            }
            Variant::LogitSpace => {
                for j in 0..c {
                    shifted[j] = (row[j] as f64 + w_pos * mp[j] as f64 - w_neg * mn[j] as f64) as f32;
                }
                if w_pos == 0.0 && w_neg == 0.0 {
                    kernels::softmax_row(row, o);
                } else {
                    kernels::softmax_row(&shifted, o);
                }
            }
        }
    }
    Tensor::new(&[r, c], out)
}

/// Columns listed in `tokens` come from `branch`, all others from `edited`.
pub fn substitute_attention(edited: &Tensor, branch: &Tensor, tokens: &[usize]) -> Result<Tensor> {
    if edited.shape() != branch.shape() {
        return Err(contract_err!(
            "backbone map {:?} and branch map {:?} differ in shape",
            edited.shape(),
            branch.shape()
        ));
    }
    let (r, c) = edited.rc()?;
    if let Some(j) = tokens.iter().find(|&&j| j >= c) {
        return Err(contract_err!("substitution token {j} ≥ {c} columns"));
    }
    let mut out = edited.clone();
    let d = out.data_mut();
    for i in 0..r {
        for &j in tokens {
            d[i * c + j] = branch.data()[i * c + j];
        }
    }
    Ok(out)
}

/// `Â · V`.
pub fn guided_attention_output(a_hat: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (m, k) = a_hat.rc()?;
    let (k2, n) = v.rc()?;
    if k != k2 {
        return Err(contract_err!("attention {m}×{k} cannot multiply values {k2}×{n}"));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a_hat.data(), false, v.data(), false, &mut out, 0.0);
    Tensor::new(&[m, n], out)
}

/// Attention hook applying mask weighting and substitution to every
/// backbone cross-attention block.
pub struct SpatialGuidance {
    config: GuidanceConfig,
    n_t: usize,
    sigma: f64,
    masks: BTreeMap<usize, (Tensor, Tensor)>,
    branch: Option<AttentionState>,
}

impl SpatialGuidance {
    pub fn new(config: GuidanceConfig, n_t: usize) -> Result<Self> {
        config.validate(n_t)?;
        Ok(Self {
            config,
            n_t,
            sigma: 0.0,
            masks: BTreeMap::new(),
            branch: None,
        })
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn needs_branch_maps(&self) -> bool {
        !self.config.substitute.is_empty()
    }

    /// Noise level of the step about to be evaluated.
    pub fn set_sigma(&mut self, sigma: f64) {
        self.sigma = sigma;
    }

    fn masks_for(&mut self, n_i: usize) -> Result<&(Tensor, Tensor)> {
        let res = (n_i as f64).sqrt().round() as usize;
        if res * res != n_i {
            return Err(contract_err!("{n_i} query positions do not form a square grid"));
        }
        if !self.masks.contains_key(&res) {
            let m = build_masks(&self.config.regions, self.n_t, res)?;
            self.masks.insert(res, m);
        }
        Ok(&self.masks[&res])
    }
}

impl AttentionHook for SpatialGuidance {
    fn branch_maps(&mut self, state: &AttentionState) {
        self.branch = Some(state.clone());
    }

    fn edit(&mut self, block: BlockId, head: usize, logits: &Tensor, attn: &Tensor) -> Result<Option<Tensor>> {
        let (n_i, n_t) = logits.rc()?;
        if n_t != self.n_t {
            return Err(contract_err!("block has {n_t} tokens, guidance built for {}", self.n_t));
        }
        let w = omega(self.config.omega_prime, self.sigma, attn);
        let variant = self.config.variant;
        let (pos, neg) = self.masks_for(n_i)?;
        let edited = masked_attention(logits, pos, neg, w, w, variant)?;
        if self.config.substitute.is_empty() {
            return Ok(Some(edited));
        }
        let source = block.branch_source();
        let branch = self
            .branch
            .as_ref()
            .and_then(|s| s.get(source))
            .ok_or_else(|| contract_err!("no branch attention map for {}", source.name()))?;
        substitute_attention(&edited, &branch.head(head), &self.config.substitute).map(Some)
    }
}
