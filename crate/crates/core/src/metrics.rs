//! Condition-fidelity metrics: edge distance, segmentation accuracy and
//! IoU, keypoint mAP over OKS thresholds, and pixel MSE.

use std::fmt::Write as _;

use crate::error::{contract_err, Result};
use crate::gcontrolnet::{KEYPOINTS, SEG_CLASSES};
use crate::synthdata::{edge_map, one_hot, Class, Color, Figure, Scene, SIZE};
use crate::tensor::Tensor;

/// Per-keypoint OKS constant.
pub const KAPPA: f64 = 0.1;

/// `‖a − b‖ / sqrt(N)`.
pub fn edge_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(contract_err!("edge maps {:?} and {:?} differ in shape", a.shape(), b.shape()));
    }
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok((ss / a.len().max(1) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegScores {
    pub mpa: f64,
    pub miou: f64,
}

/// Mean pixel accuracy over classes present in `reference`, mean IoU over
/// classes present in either map.
pub fn seg_scores(generated: &[u8], reference: &[u8], classes: usize) -> Result<SegScores> {
    if generated.len() != reference.len() {
        return Err(contract_err!("label maps of {} and {} pixels", generated.len(), reference.len()));
    }
    if let Some(&l) = generated.iter().chain(reference).find(|&&l| l as usize >= classes) {
        return Err(contract_err!("label {l} ≥ {classes} classes"));
    }
    let mut inter = vec![0usize; classes];
    let mut n_gen = vec![0usize; classes];
    let mut n_ref = vec![0usize; classes];
    for (&g, &r) in generated.iter().zip(reference) {
        n_gen[g as usize] += 1;
        n_ref[r as usize] += 1;
        if g == r {
            inter[g as usize] += 1;
        }
    }
    let (mut pa, mut pa_n, mut iou, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..classes {
        if n_ref[c] > 0 {
            pa += inter[c] as f64 / n_ref[c] as f64;
            pa_n += 1;
        }
        let union = n_gen[c] + n_ref[c] - inter[c];
        if union > 0 {
            iou += inter[c] as f64 / union as f64;
            iou_n += 1;
        }
    }
    Ok(SegScores {
        mpa: if pa_n > 0 { pa / pa_n as f64 } else { 1.0 },
        miou: if iou_n > 0 { iou / iou_n as f64 } else { 1.0 },
    })
}

/// A keypoint position in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn at(x: f64, y: f64) -> Self {
        Self { x, y, visible: true }
    }
}

/// Object keypoint similarity: mean over visible reference keypoints of
/// `exp(−d² / (2 s² κ²))`. `None` when no reference keypoint is visible.
pub fn oks(generated: &[Keypoint], reference: &[Keypoint], scale: f64) -> Result<Option<f64>> {
    if generated.len() != reference.len() {
        return Err(contract_err!("{} generated vs {} reference keypoints", generated.len(), reference.len()));
    }
    let denom = 2.0 * scale * scale * KAPPA * KAPPA;
    let mut sum = 0.0;
    let mut n = 0;
    for (g, r) in generated.iter().zip(reference) {
        if !r.visible {
            continue;
        }
        n += 1;
        if g.visible {
            let d2 = (g.x - r.x).powi(2) + (g.y - r.y).powi(2);
            sum += (-d2 / denom).exp();
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// The ten OKS thresholds 0.50, 0.55, …, 0.95.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Mean over thresholds of the (single-detection) precision.
pub fn map_from_oks(oks: f64) -> f64 {
    let th = oks_thresholds();
    th.iter().filter(|&&t| oks >= t).count() as f64 / th.len() as f64
}

/// Keypoint mAP for one figure.
pub fn keypoint_map(generated: &[Keypoint], reference: &[Keypoint], scale: f64) -> Result<Option<f64>> {
    Ok(oks(generated, reference, scale)?.map(map_from_oks))
}

/// Conditions recovered from an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    pub sketch: Tensor,
    pub labels: Vec<u8>,
    pub keypoints: Option<[Keypoint; KEYPOINTS]>,
}

impl Extracted {
    pub fn segmentation(&self) -> Result<Tensor> {
        one_hot(&self.labels)
    }
}

/// Class of the nearest palette color (first in palette order on ties).
pub fn classify_pixel(rgb: [f32; 3]) -> Class {
    let mut best = (f32::INFINITY, Class::Background);
    for c in Color::ALL {
        let p = c.rgb();
        let d: f32 = (0..3).map(|k| (rgb[k] - p[k]).powi(2)).sum();
        if d < best.0 {
            best = (d, c.class());
        }
    }
    best.1
}

pub fn segment(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(contract_err!("segmentation needs an RGB image, got {c} channels"));
    }
    let plane = h * w;
    Ok((0..plane)
        .map(|i| classify_pixel([image.data()[i], image.data()[plane + i], image.data()[2 * plane + i]]) as u8)
        .collect())
}

/// Template pixels of a figure anchored at the origin pixel (offsets).
fn figure_template() -> Vec<(i64, i64)> {
    let f = Figure { x: 16, y: 16 };
    let mut out = Vec::new();
    for y in 0..SIZE as i64 {
        for x in 0..SIZE as i64 {
            if f.covers(2 * x + 1, 2 * y + 1) {
                out.push((x - 16, y - 16));
            }
        }
    }
    out
}

fn hit_score(mask: &[bool], offsets: &[(i64, i64)], ax: i64, ay: i64) -> i64 {
    offsets
        .iter()
        .map(|&(dx, dy)| {
            let (x, y) = (ax + dx, ay + dy);
            let on = (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) && mask[(y * SIZE as i64 + x) as usize];
            if on {
                1
            } else {
                -1
            }
        })
        .sum()
}

/// Keypoints from the figure mask: the rigid figure template is
/// correlated over all anchors, then every keypoint is refined within two
/// pixels by correlating the template patch around it.
pub fn extract_keypoints(labels: &[u8]) -> Option<[Keypoint; KEYPOINTS]> {
    let mask: Vec<bool> = labels.iter().map(|&l| l == Class::Figure as u8).collect();
    if mask.iter().filter(|&&m| m).count() < 5 {
        return None;
    }
    let template = figure_template();
    let mut best = (i64::MIN, 0, 0);
    for ay in 0..SIZE as i64 {
        for ax in 0..SIZE as i64 {
            let s = hit_score(&mask, &template, ax, ay);
            if s > best.0 {
                best = (s, ax, ay);
            }
        }
    }
    let (_, ax, ay) = best;
    let rigid = Figure { x: 16, y: 16 }.keypoints();
    Some(std::array::from_fn(|k| {
        let (kx, ky) = (rigid[k].0 as i64 - 16, rigid[k].1 as i64 - 16);
        let patch: Vec<(i64, i64)> = template
            .iter()
            .filter(|&&(dx, dy)| (dx - kx).pow(2) + (dy - ky).pow(2) <= 4)
            .map(|&(dx, dy)| (dx - kx, dy - ky))
            .collect();
        let (px, py) = (ax + kx, ay + ky);
        let mut local = (hit_score(&mask, &patch, px, py), px, py);
        for sy in -2..=2 {
            for sx in -2..=2 {
                let s = hit_score(&mask, &patch, px + sx, py + sy);
                if s > local.0 {
                    local = (s, px + sx, py + sy);
                }
            }
        }
        Keypoint::at(local.1 as f64, local.2 as f64)
    }))
}

pub fn extract_conditions(image: &Tensor) -> Result<Extracted> {
    let labels = segment(image)?;
    let keypoints = extract_keypoints(&labels);
    Ok(Extracted {
        sketch: edge_map(image)?,
        labels,
        keypoints,
    })
}

pub fn pixel_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(contract_err!("images {:?} and {:?} differ in shape", a.shape(), b.shape()));
    }
    let ss: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(ss / a.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScores {
    pub edge_l2: f64,
    pub mpa: f64,
    pub miou: f64,
    /// Only for scenes with a figure.
    pub keypoint_map: Option<f64>,
    pub pixel_mse: f64,
}

/// Scores a generated image against a scene's annotations.
pub fn score_sample(generated: &Tensor, scene: &Scene) -> Result<SampleScores> {
    let ex = extract_conditions(generated)?;
    let sketch = scene
        .bundle
        .sketch
        .as_ref()
        .ok_or_else(|| contract_err!("scene has no sketch"))?;
    let seg = seg_scores(&ex.labels, &scene.labels, SEG_CLASSES)?;
    let keypoint_map = match (scene.keypoints, scene.figure_scale) {
        (Some(refs), Some(scale)) => {
            let refs = refs.map(|(x, y)| Keypoint::at(x as f64, y as f64));
            let gen = ex.keypoints.unwrap_or([Keypoint {
                x: 0.0,
                y: 0.0,
                visible: false,
            }; KEYPOINTS]);
            keypoint_map(&gen, &refs, scale)?
        }
        _ => None,
    };
    Ok(SampleScores {
        edge_l2: edge_l2(&ex.sketch, sketch)?,
        mpa: seg.mpa,
        miou: seg.miou,
        keypoint_map,
        pixel_mse: pixel_mse(generated, &scene.image)?,
    })
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScores>,
    pub edge_l2: Aggregate,
    pub mpa: Aggregate,
    pub miou: Aggregate,
    pub keypoint_map: Aggregate,
    pub pixel_mse: Aggregate,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleScores>) -> Self {
        let col = |f: fn(&SampleScores) -> f64| Aggregate::of(&samples.iter().map(f).collect::<Vec<_>>());
        let kp: Vec<f64> = samples.iter().filter_map(|s| s.keypoint_map).collect();
        Self {
            edge_l2: col(|s| s.edge_l2),
            mpa: col(|s| s.mpa),
            miou: col(|s| s.miou),
            keypoint_map: Aggregate::of(&kp),
            pixel_mse: col(|s| s.pixel_mse),
            samples,
        }
    }

    fn rows(&self) -> [(&'static str, Aggregate); 5] {
        [
            ("edge_l2", self.edge_l2),
            ("mpa", self.mpa),
            ("miou", self.miou),
            ("keypoint_map", self.keypoint_map),
            ("pixel_mse", self.pixel_mse),
        ]
    }

    /// `key=value` lines prefixed by `prefix`.
    pub fn render_kv(&self, prefix: &str) -> String {
        let mut s = format!("{prefix}samples={}\n", self.samples.len());
        for (k, a) in self.rows() {
            let _ = writeln!(s, "{prefix}{k}={:.6}", a.mean);
            let _ = writeln!(s, "{prefix}{k}_stderr={:.6}", a.stderr);
            let _ = writeln!(s, "{prefix}{k}_n={}", a.n);
        }
        s
    }

    pub fn render_table(&self, title: &str) -> String {
        let mut s = format!("{title} ({} samples)\n", self.samples.len());
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>6}", "metric", "mean", "stderr", "n");
        for (k, a) in self.rows() {
            let _ = writeln!(s, "{:<14} {:>10.4} {:>10.4} {:>6}", k, a.mean, a.stderr, a.n);
        }
        s
    }
}
