//! Fixed pixel ↔ latent mapping.
//!
//! Encoding is a 2× average pool, a shift of `[0, 1]` pixels to `[-1, 1]`, and
//! a 1×1 lift from 3 to 4 channels with orthonormal columns. Decoding applies
//! the transposed lift and a nearest 2× upsample, so
//! `decode(encode(img))` is the block-averaged image.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 4;

/// First three columns of the 4×4 Hadamard matrix over 2.
const LIFT: [[f32; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
];

pub fn encode(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != IMAGE_CHANNELS || h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("cannot encode image of shape {:?}", image.shape()));
    }
    let (lh, lw) = (h / 2, w / 2);
    let mut pooled = vec![0.0f32; c * lh * lw];
    for ch in 0..c {
        let src = image.channel(ch);
        for y in 0..lh {
            for x in 0..lw {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                pooled[(ch * lh + y) * lw + x] = s * 0.25 * 2.0 - 1.0;
            }
        }
    }
    let plane = lh * lw;
    let mut out = vec![0.0f32; LATENT_CHANNELS * plane];
    for (lc, row) in LIFT.iter().enumerate() {
        for i in 0..plane {
            out[lc * plane + i] = (0..3).map(|k| row[k] * pooled[k * plane + i]).sum();
        }
    }
    Tensor::new(&[LATENT_CHANNELS, lh, lw], out)
}

/// Latent → clamped `[0, 1]` image at twice the latent resolution.
pub fn decode(latent: &Tensor) -> Result<Tensor> {
    let (c, lh, lw) = latent.chw()?;
    if c != LATENT_CHANNELS {
        return Err(shape_err!("cannot decode latent of shape {:?}", latent.shape()));
    }
    let plane = lh * lw;
    let (h, w) = (2 * lh, 2 * lw);
    let mut out = vec![0.0f32; IMAGE_CHANNELS * h * w];
    for k in 0..IMAGE_CHANNELS {
        for y in 0..lh {
            for x in 0..lw {
                let i = y * lw + x;
                let v: f32 = (0..LATENT_CHANNELS)
                    .map(|lc| LIFT[lc][k] * latent.data()[lc * plane + i])
                    .sum();
                let px = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out[(k * h + 2 * y + dy) * w + 2 * x + dx] = px;
                }
            }
        }
    }
    Tensor::new(&[IMAGE_CHANNELS, h, w], out)
}
