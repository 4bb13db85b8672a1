#![allow(dead_code)]

//! Test-side oracles for attention guidance and the fidelity metrics.

use cocktail_core::backbone::attention::{AttentionHook, AttentionMap, AttentionState, Origin};
use cocktail_core::guidance::{masked_attention, omega, substitute_attention, Polarity, SpatialGuidance, Variant};
use cocktail_core::metrics::{edge_l2, keypoint_map, oks, seg_scores, Keypoint, KAPPA};
use cocktail_core::{BlockId, GuidanceConfig, NoiseSchedule, RegionSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(tag: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag.wrapping_mul(0x9e37_79b9) ^ i)
}

fn binary(r: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if r.gen_bool(p) { 1.0 } else { 0.0 })
}

/// `(exp(l_ij) + w⁺ M⁺_ij − w⁻ M⁻_ij) / Σ_k exp(l_ik)` evaluated directly in f64.
pub fn literal_oracle(logits: &Tensor, pos: &Tensor, neg: &Tensor, w_pos: f64, w_neg: f64) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for (i, row) in logits.data().chunks(c).enumerate() {
        let z: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
        for (j, &l) in row.iter().enumerate() {
            let k = i * c + j;
            out.push(((l as f64).exp() + w_pos * pos.data()[k] as f64 - w_neg * neg.data()[k] as f64) / z);
        }
    }
    out
}

/// `softmax(l + w⁺ M⁺ − w⁻ M⁻)` row-wise in f64.
pub fn logit_oracle(logits: &Tensor, pos: &Tensor, neg: &Tensor, w_pos: f64, w_neg: f64) -> Vec<f64> {
    let c = logits.shape()[1];
    let shifted: Vec<f64> = (0..logits.len())
        .map(|k| logits.data()[k] as f64 + w_pos * pos.data()[k] as f64 - w_neg * neg.data()[k] as f64)
        .collect();
    let mut out = Vec::with_capacity(shifted.len());
    for row in shifted.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

pub struct MaskedReport {
    /// Largest `|engine − oracle|` of the literal form.
    pub literal_err: f64,
    /// Largest `|engine − oracle|` of the logit-space form.
    pub logit_err: f64,
    /// Largest `|Σ_j Â_ij − 1|` of the logit-space form.
    pub logit_row_sum_dev: f64,
}

pub fn masked_attention_check(instances: u64) -> MaskedReport {
    let mut rep = MaskedReport {
        literal_err: 0.0,
        logit_err: 0.0,
        logit_row_sum_dev: 0.0,
    };
    for i in 0..instances {
        let mut r = rng(6, i);
        let (ni, nt) = (r.gen_range(1..=64), r.gen_range(1..=8));
        let logits = Tensor::from_fn(&[ni, nt], |_| r.gen_range(-4.0..4.0));
        let pos = binary(&mut r, &[ni, nt], 0.3);
        let neg = binary(&mut r, &[ni, nt], 0.3);
        let (wp, wn) = (r.gen_range(0.0..3.0), r.gen_range(0.0..3.0));
        let lit = masked_attention(&logits, &pos, &neg, wp, wn, Variant::Literal).unwrap();
        let want = literal_oracle(&logits, &pos, &neg, wp, wn);
        for (&a, &b) in lit.data().iter().zip(&want) {
            rep.literal_err = rep.literal_err.max((a as f64 - b).abs());
        }
        let lg = masked_attention(&logits, &pos, &neg, wp, wn, Variant::LogitSpace).unwrap();
        let want = logit_oracle(&logits, &pos, &neg, wp, wn);
        for (&a, &b) in lg.data().iter().zip(&want) {
            rep.logit_err = rep.logit_err.max((a as f64 - b).abs());
        }
        for row in lg.data().chunks(nt) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            rep.logit_row_sum_dev = rep.logit_row_sum_dev.max((s - 1.0).abs());
        }
    }
    rep
}

/// Counts instances where substitution touched a column outside the
/// designated set or failed to copy a designated one, both for the bare
/// operation and for the attention hook.
pub fn substitution_violations(instances: u64) -> usize {
    let mut bad = 0;
    for i in 0..instances {
        let mut r = rng(8, i);
        let res = [2usize, 4, 8][r.gen_range(0..3)];
        let (ni, nt) = (res * res, 8);
        let edited = Tensor::from_fn(&[ni, nt], |_| r.gen_range(0.0..1.0));
        let branch = Tensor::from_fn(&[ni, nt], |_| r.gen_range(0.0..1.0));
        let tokens: Vec<usize> = (0..nt).filter(|_| r.gen_bool(0.3)).collect();
        let out = substitute_attention(&edited, &branch, &tokens).unwrap();
        if !columns_ok(&out, &edited, &branch, &tokens) {
            bad += 1;
            continue;
        }

        // Through the hook: the same edit without substitution must agree
        // with the substituted one everywhere outside the designated columns.
        let heads = 2;
        let logits = Tensor::from_fn(&[ni, nt], |_| r.gen_range(-3.0..3.0));
        let attn = masked_attention(&logits, &Tensor::zeros(&[ni, nt]), &Tensor::zeros(&[ni, nt]), 0.0, 0.0, Variant::Literal).unwrap();
        let mut mask = Tensor::zeros(&[8, 8]);
        mask.data_mut()[..32].fill(1.0);
        let regions = vec![RegionSpec::new(r.gen_range(0..nt), Polarity::Positive, mask).unwrap()];
        let branch_maps = Tensor::from_fn(&[heads, ni, nt], |_| r.gen_range(0.0..1.0));
        let level = r.gen_range(0..4);
        let state = AttentionState {
            origin: Origin::Branch,
            maps: vec![AttentionMap {
                block: BlockId::Enc(level),
                maps: branch_maps.clone(),
            }],
        };
        let cfg = |substitute: Vec<usize>| GuidanceConfig {
            omega_prime: 1.5,
            regions: regions.clone(),
            substitute,
            variant: Variant::Literal,
        };
        let head = r.gen_range(0..heads);
        let block = if r.gen_bool(0.5) { BlockId::Dec(level) } else { BlockId::Enc(level) };
        let mut plain = SpatialGuidance::new(cfg(vec![]), nt).unwrap();
        plain.set_sigma(2.0);
        let mut sub = SpatialGuidance::new(cfg(tokens.clone()), nt).unwrap();
        sub.set_sigma(2.0);
        sub.branch_maps(&state);
        let a = plain.edit(block, head, &logits, &attn).unwrap().unwrap();
        let b = sub.edit(block, head, &logits, &attn).unwrap().unwrap();
        let src = AttentionMap {
            block: BlockId::Enc(level),
            maps: branch_maps,
        }
        .head(head);
        if !columns_ok(&b, &a, &src, &tokens) {
            bad += 1;
        }
    }
    bad
}

fn columns_ok(out: &Tensor, base: &Tensor, branch: &Tensor, tokens: &[usize]) -> bool {
    let nt = out.shape()[1];
    out.data().iter().enumerate().all(|(k, v)| {
        let want = if tokens.contains(&(k % nt)) { branch.data()[k] } else { base.data()[k] };
        v.to_bits() == want.to_bits()
    })
}

pub struct OmegaReport {
    pub zero_at_zero_sigma: bool,
    pub monotone_on_grid: bool,
    /// `|ω(σ = e − 1, max A = 1, ω' = 2) − 2|`.
    pub reference_err: f64,
}

pub fn omega_schedule_check(schedule: &NoiseSchedule, steps: usize) -> OmegaReport {
    let peak = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let mut zero = true;
    for i in 0..50 {
        let mut r = rng(5, i);
        let a = Tensor::from_fn(&[4, 3], |_| r.gen_range(0.0..1.0));
        zero &= omega(r.gen_range(0.0..10.0), 0.0, &a) == 0.0;
    }
    let mut sigmas: Vec<f64> = schedule
        .ddim_timesteps(steps)
        .unwrap()
        .iter()
        .map(|&t| schedule.sigma_level(t))
        .collect();
    sigmas.push(0.0);
    sigmas.sort_by(f64::total_cmp);
    let mut monotone = true;
    for i in 0..20 {
        let mut r = rng(7, i);
        let a = Tensor::from_fn(&[6, 4], |_| r.gen_range(0.0..1.0));
        let wp = r.gen_range(0.0..4.0);
        let ws: Vec<f64> = sigmas.iter().map(|&s| omega(wp, s, &a)).collect();
        monotone &= ws.windows(2).all(|p| p[1] >= p[0]);
    }
    OmegaReport {
        zero_at_zero_sigma: zero,
        monotone_on_grid: monotone,
        reference_err: (omega(2.0, std::f64::consts::E - 1.0, &peak) - 2.0).abs(),
    }
}

/// Exhaustive edge distance: every pair of 2×2 maps over {0, ½, 1}, plus
/// random 8×8 maps over quarter steps (all sums exact in f64).
pub fn edge_l2_mismatches() -> usize {
    let vals = [0.0f32, 0.5, 1.0];
    let maps: Vec<Tensor> = (0..81)
        .map(|code| {
            let mut c = code;
            Tensor::from_fn(&[1, 2, 2], |_| {
                let v = vals[c % 3];
                c /= 3;
                v
            })
        })
        .collect();
    let mut bad = 0;
    let brute = |a: &Tensor, b: &Tensor| -> f64 {
        let (_, h, w) = a.chw().unwrap();
        let mut ss = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let d = a.data()[y * w + x] as f64 - b.data()[y * w + x] as f64;
                ss += d * d;
            }
        }
        (ss / (h * w) as f64).sqrt()
    };
    for a in &maps {
        for b in &maps {
            bad += (edge_l2(a, b).unwrap() != brute(a, b)) as usize;
        }
    }
    for i in 0..200 {
        let mut r = rng(12, i);
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let a = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0..=4) as f32 / 4.0);
        let b = Tensor::from_fn(&[1, h, w], |_| r.gen_range(0..=4) as f32 / 4.0);
        bad += (edge_l2(&a, &b).unwrap() != brute(&a, &b)) as usize;
        bad += (edge_l2(&a, &b).unwrap() != edge_l2(&b, &a).unwrap()) as usize;
    }
    bad
}

/// Per-class counts by direct set membership over all pixels.
fn seg_brute(gen: &[u8], reference: &[u8], classes: usize) -> (f64, f64) {
    let (mut pa, mut pa_n, mut iou, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..classes as u8 {
        let both = (0..gen.len()).filter(|&p| gen[p] == c && reference[p] == c).count();
        let either = (0..gen.len()).filter(|&p| gen[p] == c || reference[p] == c).count();
        let in_ref = (0..gen.len()).filter(|&p| reference[p] == c).count();
        if in_ref > 0 {
            pa += both as f64 / in_ref as f64;
            pa_n += 1;
        }
        if either > 0 {
            iou += both as f64 / either as f64;
            iou_n += 1;
        }
    }
    (pa / pa_n as f64, iou / iou_n as f64)
}

/// Every pair of 2×2 three-class maps, plus random 8×8 maps over six classes.
pub fn seg_mismatches() -> usize {
    let maps: Vec<Vec<u8>> = (0..81u32)
        .map(|code| (0..4).map(|k| ((code / 3u32.pow(k)) % 3) as u8).collect())
        .collect();
    let mut bad = 0;
    let compare = |g: &[u8], r: &[u8], classes: usize| {
        let s = seg_scores(g, r, classes).unwrap();
        let (pa, iou) = seg_brute(g, r, classes);
        (s.mpa != pa || s.miou != iou) as usize
            + !(0.0..=1.0).contains(&s.mpa) as usize
            + !(0.0..=1.0).contains(&s.miou) as usize
    };
    for g in &maps {
        for r in &maps {
            bad += compare(g, r, 3);
        }
    }
    for i in 0..200 {
        let mut r = rng(13, i);
        let n = r.gen_range(1..=64);
        let g: Vec<u8> = (0..n).map(|_| r.gen_range(0..6)).collect();
        let rf: Vec<u8> = (0..n).map(|_| r.gen_range(0..6)).collect();
        bad += compare(&g, &rf, 6);
        // Relabeling both maps by the same permutation leaves scores unchanged.
        let mut perm: Vec<u8> = (0..6).collect();
        for k in (1..6).rev() {
            perm.swap(k, r.gen_range(0..=k));
        }
        let a = seg_scores(&g, &rf, 6).unwrap();
        let gp: Vec<u8> = g.iter().map(|&c| perm[c as usize]).collect();
        let rp: Vec<u8> = rf.iter().map(|&c| perm[c as usize]).collect();
        let b = seg_scores(&gp, &rp, 6).unwrap();
        bad += ((a.mpa - b.mpa).abs() > 1e-12 || (a.miou - b.miou).abs() > 1e-12) as usize;
    }
    bad
}

/// OKS by its definition and mAP by sweeping the ten thresholds.
fn keypoint_brute(gen: &[Keypoint], reference: &[Keypoint], scale: f64) -> Option<(f64, f64)> {
    let visible: Vec<usize> = (0..reference.len()).filter(|&k| reference[k].visible).collect();
    if visible.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &k in &visible {
        if gen[k].visible {
            let dx = gen[k].x - reference[k].x;
            let dy = gen[k].y - reference[k].y;
            total += (-(dx * dx + dy * dy) / (2.0 * scale * scale * KAPPA * KAPPA)).exp();
        }
    }
    let o = total / visible.len() as f64;
    let mut hits = 0;
    for i in 0..10 {
        let t = (50 + 5 * i) as f64 / 100.0;
        if o >= t {
            hits += 1;
        }
    }
    Some((o, hits as f64 / 10.0))
}

/// Every displacement of one keypoint within ±6 px, every visibility
/// pattern of up to five keypoints, and random instances.
pub fn keypoint_mismatches() -> usize {
    let mut bad = 0;
    let mut compare = |g: &[Keypoint], r: &[Keypoint], s: f64| {
        let got = oks(g, r, s).unwrap().zip(keypoint_map(g, r, s).unwrap());
        match (got, keypoint_brute(g, r, s)) {
            (None, None) => {}
            (Some((o, m)), Some((bo, bm))) => bad += ((o - bo).abs() > 1e-12 || m != bm) as usize,
            _ => bad += 1,
        }
    };
    let base = [Keypoint::at(10.0, 10.0)];
    for dy in -6..=6 {
        for dx in -6..=6 {
            compare(&[Keypoint::at(10.0 + dx as f64, 10.0 + dy as f64)], &base, 20.0);
        }
    }
    for k in 1..=5usize {
        for pattern in 0..(1u32 << (2 * k)) {
            let mut r = rng(14, pattern as u64 + 100 * k as u64);
            let reference: Vec<Keypoint> = (0..k)
                .map(|j| Keypoint {
                    x: r.gen_range(0..32) as f64,
                    y: r.gen_range(0..32) as f64,
                    visible: pattern >> j & 1 == 1,
                })
                .collect();
            let gen: Vec<Keypoint> = reference
                .iter()
                .enumerate()
                .map(|(j, p)| Keypoint {
                    x: p.x + r.gen_range(-3..=3) as f64,
                    y: p.y + r.gen_range(-3..=3) as f64,
                    visible: pattern >> (k + j) & 1 == 1,
                })
                .collect();
            compare(&gen, &reference, r.gen_range(5.0..30.0));
        }
    }
    bad
}
