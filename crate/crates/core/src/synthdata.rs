//! Procedural scenes with exact annotations.
//!
//! Geometry lives on a doubled integer grid: pixel `(x, y)` has its center
//! at `(2x + 1, 2y + 1)`, so every coverage test is exact integer
//! arithmetic and renders identically on every platform.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::text::TextPrompt;
use crate::error::{contract_err, Error, Result};
use crate::gcontrolnet::{ModalityBundle, CONTROL_SIZE, KEYPOINTS, SEG_CLASSES};
use crate::rng;
use crate::tensor::Tensor;

pub const SIZE: usize = CONTROL_SIZE;
pub const EDGE_THRESHOLD: f32 = 0.2;
pub const HEATMAP_SIGMA: f64 = 1.5;
const FIGURE_HALF_WIDTH: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Background = 0,
    Circle = 1,
    Square = 2,
    Triangle = 3,
    Figure = 4,
    Border = 5,
}

impl Class {
    pub const ALL: [Class; SEG_CLASSES] = [
        Class::Background,
        Class::Circle,
        Class::Square,
        Class::Triangle,
        Class::Figure,
        Class::Border,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Circle => "circle",
            Class::Square => "square",
            Class::Triangle => "triangle",
            Class::Figure => "figure",
            Class::Border => "border",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Black,
    White,
    Red,
    Yellow,
    Green,
    Cyan,
    Blue,
    Magenta,
    Gray,
    Orange,
}

impl Color {
    pub const ALL: [Color; 10] = [
        Color::Black,
        Color::White,
        Color::Red,
        Color::Yellow,
        Color::Green,
        Color::Cyan,
        Color::Blue,
        Color::Magenta,
        Color::Gray,
        Color::Orange,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Black => [0.0, 0.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Red => [1.0, 0.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Gray => [0.5, 0.5, 0.5],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::White => "white",
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Cyan => "cyan",
            Color::Blue => "blue",
            Color::Magenta => "magenta",
            Color::Gray => "gray",
            Color::Orange => "orange",
        }
    }

    /// The class every pixel of this color belongs to.
    pub fn class(self) -> Class {
        match self {
            Color::Black | Color::White => Class::Background,
            Color::Red | Color::Yellow => Class::Circle,
            Color::Green | Color::Cyan => Class::Square,
            Color::Blue | Color::Magenta => Class::Triangle,
            Color::Gray => Class::Figure,
            Color::Orange => Class::Border,
        }
    }

    fn choices(class: Class) -> [Color; 2] {
        match class {
            Class::Background => [Color::Black, Color::White],
            Class::Circle => [Color::Red, Color::Yellow],
            Class::Square => [Color::Green, Color::Cyan],
            Class::Triangle => [Color::Blue, Color::Magenta],
            Class::Figure => [Color::Gray, Color::Gray],
            Class::Border => [Color::Orange, Color::Orange],
        }
    }
}

/// Placement of one shape in doubled coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle { cx: i64, cy: i64, r: i64 },
    Square { cx: i64, cy: i64, half: i64 },
    /// Apex up; `half` is half the base width, `h` the height.
    Triangle { cx: i64, cy: i64, half: i64, h: i64 },
}

impl Shape {
    pub fn class(&self) -> Class {
        match self {
            Shape::Circle { .. } => Class::Circle,
            Shape::Square { .. } => Class::Square,
            Shape::Triangle { .. } => Class::Triangle,
        }
    }

    /// Whether the doubled-grid point `(px, py)` lies inside.
    pub fn covers(&self, px: i64, py: i64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Square { cx, cy, half } => (px - cx).abs() <= half && (py - cy).abs() <= half,
            Shape::Triangle { cx, cy, half, h } => {
                let top = cy - h / 2;
                let bottom = top + h;
                let v = [(cx, top), (cx + half, bottom), (cx - half, bottom)];
                (0..3).all(|i| {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % 3];
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
                })
            }
        }
    }
}

/// Stick figure anchored at a pixel; all parts are offsets in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Figure {
    pub x: i64,
    pub y: i64,
}

const HEAD: (i64, i64) = (0, -10);
const HEAD_RADIUS: i64 = 3;
const NECK: (i64, i64) = (0, -6);
const HIP: (i64, i64) = (0, 2);
const HANDS: [(i64, i64); 2] = [(-6, -2), (6, -2)];
const FEET: [(i64, i64); 2] = [(-4, 8), (4, 8)];

fn seg_covers(a: (i64, i64), b: (i64, i64), p: (i64, i64), half_width: i64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let dot = px * dx + py * dy;
    let hw2 = half_width * half_width;
    if dot <= 0 {
        return px * px + py * py <= hw2;
    }
    if dot >= len2 {
        let (qx, qy) = (p.0 - b.0, p.1 - b.1);
        return qx * qx + qy * qy <= hw2;
    }
    let cross = px * dy - py * dx;
    cross * cross <= hw2 * len2
}

impl Figure {
    fn doubled(&self, off: (i64, i64)) -> (i64, i64) {
        (2 * (self.x + off.0) + 1, 2 * (self.y + off.1) + 1)
    }

    pub fn covers(&self, px: i64, py: i64) -> bool {
        let p = (px, py);
        let (hx, hy) = self.doubled(HEAD);
        let r = 2 * HEAD_RADIUS;
        if (px - hx).pow(2) + (py - hy).pow(2) <= r * r {
            return true;
        }
        let neck = self.doubled(NECK);
        let hip = self.doubled(HIP);
        let mut segs = vec![(neck, hip)];
        segs.extend(HANDS.iter().map(|&h| (neck, self.doubled(h))));
        segs.extend(FEET.iter().map(|&f| (hip, self.doubled(f))));
        segs.iter().any(|&(a, b)| seg_covers(a, b, p, FIGURE_HALF_WIDTH))
    }

    /// Head, left hand, right hand, left foot, right foot, as pixel indices.
    pub fn keypoints(&self) -> [(usize, usize); KEYPOINTS] {
        let offs = [HEAD, HANDS[0], HANDS[1], FEET[0], FEET[1]];
        offs.map(|(dx, dy)| ((self.x + dx) as usize, (self.y + dy) as usize))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// 3×32×32 in `[0, 1]`.
    pub image: Tensor,
    pub caption: String,
    pub prompt: TextPrompt,
    pub bundle: ModalityBundle,
    /// Row-major class index per pixel.
    pub labels: Vec<u8>,
    pub keypoints: Option<[(usize, usize); KEYPOINTS]>,
    /// Diagonal of the figure's pixel bounding box.
    pub figure_scale: Option<f64>,
    pub shapes: Vec<(Shape, Color)>,
    pub background: Color,
    pub border: bool,
}

/// Caption grammar: `a <color> <shape> [and a <color> <shape> ...] [and a
/// figure] on a <color> background`.
pub fn caption(shapes: &[(Shape, Color)], figure: bool, background: Color) -> String {
    let mut parts: Vec<String> = shapes
        .iter()
        .map(|(s, c)| format!("a {} {}", c.name(), s.class().name()))
        .collect();
    if figure {
        parts.push("a figure".to_string());
    }
    format!("{} on a {} background", parts.join(" and "), background.name())
}

pub fn generate_scene(seed: u64, n_tokens: usize) -> Result<Scene> {
    let mut r = rng::stream(seed, 0);
    let background = Color::choices(Class::Background)[r.gen_range(0..2u32) as usize];
    let n_shapes = r.gen_range(1..=3u32) as usize;
    let mut classes = [Class::Circle, Class::Square, Class::Triangle];
    classes.shuffle(&mut r);
    let mut shapes = Vec::with_capacity(n_shapes);
    for &class in &classes[..n_shapes] {
        let color = Color::choices(class)[r.gen_range(0..2u32) as usize];
        let shape = match class {
            Class::Circle => {
                let rad = r.gen_range(6..=14i64);
                Shape::Circle {
                    cx: r.gen_range(rad + 4..=64 - rad - 4),
                    cy: r.gen_range(rad + 4..=64 - rad - 4),
                    r: rad,
                }
            }
            Class::Square => {
                let half = r.gen_range(6..=13i64);
                Shape::Square {
                    cx: r.gen_range(half + 4..=64 - half - 4),
                    cy: r.gen_range(half + 4..=64 - half - 4),
                    half,
                }
            }
            _ => {
                let half = r.gen_range(8..=16i64);
                let h = r.gen_range(12..=24i64);
                Shape::Triangle {
                    cx: r.gen_range(half + 4..=64 - half - 4),
                    cy: r.gen_range(h / 2 + 4..=64 - h / 2 - 4),
                    half,
                    h,
                }
            }
        };
        shapes.push((shape, color));
    }
    let figure = r.gen_bool(0.5).then(|| Figure {
        x: r.gen_range(9..=22i64),
        y: r.gen_range(16..=20i64),
    });
    let border = r.gen_bool(0.3);

    let mut labels = vec![Class::Background as u8; SIZE * SIZE];
    let mut colors = vec![background; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (px, py) = (2 * x as i64 + 1, 2 * y as i64 + 1);
            let i = y * SIZE + x;
            for (s, c) in &shapes {
                if s.covers(px, py) {
                    labels[i] = s.class() as u8;
                    colors[i] = *c;
                }
            }
            if figure.is_some_and(|f| f.covers(px, py)) {
                labels[i] = Class::Figure as u8;
                colors[i] = Color::Gray;
            }
            if border && (x < 2 || y < 2 || x >= SIZE - 2 || y >= SIZE - 2) {
                labels[i] = Class::Border as u8;
                colors[i] = Color::Orange;
            }
        }
    }
    let plane = SIZE * SIZE;
    let mut img = vec![0.0f32; 3 * plane];
    for (i, c) in colors.iter().enumerate() {
        for (ch, v) in c.rgb().into_iter().enumerate() {
            img[ch * plane + i] = v;
        }
    }
    let image = Tensor::new(&[3, SIZE, SIZE], img)?;
    let cap = caption(&shapes, figure.is_some(), background);
    let prompt = TextPrompt::parse(&cap, n_tokens)?;
    let keypoints = figure.map(|f| f.keypoints());
    let figure_scale = figure.map(|_| bbox_diagonal(&labels, Class::Figure as u8).unwrap_or(0.0));
    let bundle = ModalityBundle {
        sketch: Some(edge_map(&image)?),
        segmentation: Some(one_hot(&labels)?),
        keypoints: keypoints.map(|k| heatmaps(&k)),
    };
    Ok(Scene {
        seed,
        image,
        caption: cap,
        prompt,
        bundle,
        labels,
        keypoints,
        figure_scale,
        shapes,
        background,
        border,
    })
}

/// Diagonal of the bounding box of pixels labelled `class`.
pub fn bbox_diagonal(labels: &[u8], class: u8) -> Option<f64> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
        let (x, y) = (i % SIZE, i / SIZE);
        b = Some(match b {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let (w, h) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        (w * w + h * h).sqrt()
    })
}

pub fn one_hot(labels: &[u8]) -> Result<Tensor> {
    let plane = SIZE * SIZE;
    if labels.len() != plane {
        return Err(contract_err!("{} labels for a {SIZE}×{SIZE} grid", labels.len()));
    }
    let mut t = Tensor::zeros(&[SEG_CLASSES, SIZE, SIZE]);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= SEG_CLASSES {
            return Err(contract_err!("label {l} ≥ {SEG_CLASSES}"));
        }
        t.data_mut()[l as usize * plane + i] = 1.0;
    }
    Ok(t)
}

/// Unit-peak Gaussian heatmaps centered on each keypoint pixel.
pub fn heatmaps(points: &[(usize, usize); KEYPOINTS]) -> Tensor {
    let plane = SIZE * SIZE;
    let s2 = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
    Tensor::from_fn(&[KEYPOINTS, SIZE, SIZE], |i| {
        let (k, p) = (i / plane, i % plane);
        let (x, y) = ((p % SIZE) as f64, (p / SIZE) as f64);
        let (kx, ky) = (points[k].0 as f64, points[k].1 as f64);
        (-((x - kx).powi(2) + (y - ky).powi(2)) / s2).exp() as f32
    })
}

/// Binary edge map: forward-difference gradient magnitude over all color
/// channels, scaled into `[0, 1]` by its maximum possible value and
/// thresholded.
pub fn edge_map(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let norm = (2.0 * c as f64).sqrt();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut g2 = 0.0f64;
            for ch in 0..c {
                let p = image.channel(ch);
                let v = p[y * w + x] as f64;
                if x + 1 < w {
                    g2 += (p[y * w + x + 1] as f64 - v).powi(2);
                }
                if y + 1 < h {
                    g2 += (p[(y + 1) * w + x] as f64 - v).powi(2);
                }
            }
            if (g2.sqrt() / norm) as f32 >= EDGE_THRESHOLD {
                out[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(&[1, h, w], out)
}

/// A list of scene seeds for one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub split: String,
    pub seeds: Vec<u64>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!("split={} count={}\n", self.split, self.seeds.len());
        for seed in &self.seeds {
            s.push_str(&format!("{seed}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let mut split = None;
        let mut count = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("split", v)) => split = Some(v.to_string()),
                Some(("count", v)) => {
                    count = Some(v.parse::<usize>().map_err(|_| Error::Format(format!("bad count {v:?}")))?)
                }
                _ => return Err(Error::Format(format!("unexpected manifest header field {field:?}"))),
            }
        }
        let (Some(split), Some(count)) = (split, count) else {
            return Err(Error::Format("manifest header needs split= and count=".into()));
        };
        let seeds = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<u64>().map_err(|_| Error::Format(format!("bad seed line {l:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if seeds.len() != count {
            return Err(Error::Format(format!("manifest declares {count} seeds, lists {}", seeds.len())));
        }
        Ok(Self { split, seeds })
    }
}

/// Contiguous seed range `[start, start + count)` as a manifest.
pub fn seed_range(split: &str, start: u64, count: usize) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Validation(format!("split {split:?} needs at least one scene")));
    }
    start
        .checked_add(count as u64)
        .ok_or_else(|| contract_err!("seed range of {split:?} overflows"))?;
    Ok(Manifest {
        split: split.to_string(),
        seeds: (start..start + count as u64).collect(),
    })
}

/// Two manifests over explicit seed ranges; overlapping ranges are rejected.
pub fn split_ranges(train_start: u64, n_train: usize, eval_start: u64, n_eval: usize) -> Result<(Manifest, Manifest)> {
    let train = seed_range("train", train_start, n_train)?;
    let eval = seed_range("eval", eval_start, n_eval)?;
    let (a0, a1) = (train_start, train_start + n_train as u64);
    let (b0, b1) = (eval_start, eval_start + n_eval as u64);
    if a0 < b1 && b0 < a1 {
        return Err(contract_err!("train seeds [{a0}, {a1}) overlap eval seeds [{b0}, {b1})"));
    }
    Ok((train, eval))
}

/// Train seeds start at `base_seed`, eval seeds follow directly after.
pub fn make_split(n_train: usize, n_eval: usize, base_seed: u64) -> Result<(Manifest, Manifest)> {
    let eval_start = base_seed
        .checked_add(n_train as u64)
        .ok_or_else(|| contract_err!("seed range overflows"))?;
    split_ranges(base_seed, n_train, eval_start, n_eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        for seed in 0..5 {
            assert_eq!(generate_scene(seed, 8).unwrap(), generate_scene(seed, 8).unwrap());
        }
    }

    #[test]
    fn no_figure_means_no_heatmaps() {
        let mut seen = [false; 2];
        for seed in 0..40 {
            let s = generate_scene(seed, 8).unwrap();
            assert_eq!(s.keypoints.is_some(), s.bundle.keypoints.is_some());
            assert_eq!(s.keypoints.is_some(), s.caption.contains("figure"));
            seen[s.keypoints.is_some() as usize] = true;
        }
        assert_eq!(seen, [true; 2]);
    }

    #[test]
    fn prompts_fit() {
        for seed in 0..100 {
            let s = generate_scene(seed, 8).unwrap();
            assert!(!s.prompt.is_unconditional());
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = edge_map(&Tensor::full(&[3, 8, 8], 0.3)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_tone_split_has_one_line() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| if i % 8 >= 5 { 1.0 } else { 0.0 });
        let e = edge_map(&img).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(e.data()[y * 8 + x], if x == 4 { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn triangle_orientation() {
        let t = Shape::Triangle { cx: 32, cy: 32, half: 10, h: 20 };
        assert!(t.covers(32, 33));
        assert!(t.covers(32, 23));
        assert!(!t.covers(32, 21));
        assert!(t.covers(41, 41));
        assert!(!t.covers(41, 25));
    }

    #[test]
    fn manifests() {
        let (tr, ev) = make_split(20, 5, 100).unwrap();
        assert!(tr.seeds.iter().all(|s| !ev.seeds.contains(s)));
        assert_eq!(Manifest::parse(&tr.render()).unwrap(), tr);
        assert!(make_split(0, 5, 0).is_err());
        assert!(matches!(split_ranges(0, 10, 5, 10), Err(Error::Contract(_))));
        assert!(Manifest::parse("split=a count=2\n1\n").is_err());
    }
}
