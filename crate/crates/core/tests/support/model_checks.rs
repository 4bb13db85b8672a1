#![allow(dead_code)]

//! Whole-model checks shared by the integration tests and the acceptance
//! run: zero-init identity, ControlNorm initialization, guidance neutrality
//! and subset totality.

use cocktail_core::autodiff::Graph;
use cocktail_core::backbone::{sample, SamplerConfig};
use cocktail_core::controlnorm::{self, NormMode};
use cocktail_core::gcontrolnet::{init_from_backbone, ForwardCtl};
use cocktail_core::guidance::{Polarity, Variant};
use cocktail_core::nn::Fwd;
use cocktail_core::params::{Binder, ParamStore};
use cocktail_core::synthdata::generate_scene;
use cocktail_core::{rng, GControlConfig, GuidanceConfig, Model, NoiseSchedule, RegionSpec, Tensor, UNetConfig, EPS_STD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest ∞-norm between the backbone alone and the backbone with a fresh
/// control branch attached, over random `(z_t, t, prompt, bundle)` tuples.
pub fn zero_init_gap(backbone: &ParamStore, ucfg: &UNetConfig, gcfg: &GControlConfig, tuples: u64) -> f32 {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let mut params = backbone.clone();
    params.extend(init_from_backbone(backbone, ucfg, gcfg, 17).unwrap());
    let model = Model::new(ucfg.clone(), gcfg.clone(), schedule, params);
    let mut worst = 0.0f32;
    for i in 0..tuples {
        let mut r = rng::stream(91, i);
        let scene = generate_scene(r.gen(), ucfg.n_tokens).unwrap();
        let z = rng::normal(&mut r, &ucfg.latent_shape());
        let t = r.gen_range(0..1000);
        let mut mask = [false; 3];
        while mask == [false; 3] {
            mask = [r.gen_bool(0.5), r.gen_bool(0.5), r.gen_bool(0.5)];
        }
        let bundle = scene.bundle.masked(mask);
        let plain = model.predict(&z, t, &scene.prompt, None, &mut ForwardCtl::default()).unwrap();
        let ctrl = model.predict(&z, t, &scene.prompt, Some(&bundle), &mut ForwardCtl::default()).unwrap();
        worst = worst.max(plain.max_abs_diff(&ctrl).unwrap());
    }
    worst
}

pub struct ControlNormInit {
    /// Instances where the fresh layer differed from plain per-channel
    /// normalization in any bit.
    pub inexact: usize,
    pub max_abs_mean: f64,
    /// Largest `|std − 1|` after undoing the variance stabilizer.
    pub max_std_dev: f64,
}

pub fn controlnorm_init(instances: u64) -> ControlNormInit {
    let mut rep = ControlNormInit {
        inexact: 0,
        max_abs_mean: 0.0,
        max_std_dev: 0.0,
    };
    for i in 0..instances {
        let mut r = ChaCha8Rng::seed_from_u64(300 + i);
        let (c, h, w) = (r.gen_range(1..=8), r.gen_range(2..=12), r.gen_range(2..=12));
        let cond_c = r.gen_range(1..=4);
        // Channels at very different scales and offsets.
        let scales: Vec<f32> = (0..c).map(|_| 10f32.powf(r.gen_range(-3.0..1.0))).collect();
        let offsets: Vec<f32> = (0..c).map(|_| r.gen_range(-5.0..5.0)).collect();
        let x = Tensor::from_fn(&[c, h, w], |k| offsets[k / (h * w)] + scales[k / (h * w)] * r.gen_range(-1.0f32..1.0));
        let cond = Tensor::from_fn(&[cond_c, 2 * h, 2 * w], |_| r.gen_range(-1.0..1.0));

        let mut store = ParamStore::new();
        controlnorm::init_layer(&mut store, &mut r, "cn", c, cond_c, 8, NormMode::default());
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let mut f = Fwd::new(&mut g, &mut b);
        let xv = f.g.constant(x.clone());
        let cv = f.g.constant(cond);
        let y = controlnorm::apply(&mut f, "cn", xv, cv).unwrap();
        let n = f.g.group_norm(xv, c, EPS_STD).unwrap();
        if !f.value(y).bit_eq(f.value(n)) {
            rep.inexact += 1;
        }
        let ys = moments(f.value(y));
        let xs = moments(&x);
        for ((mean, var), (_, x_var)) in ys.into_iter().zip(xs) {
            rep.max_abs_mean = rep.max_abs_mean.max(mean.abs());
            let adjusted = (var * (x_var + EPS_STD) / x_var).sqrt();
            rep.max_std_dev = rep.max_std_dev.max((adjusted - 1.0).abs());
        }
    }
    rep
}

/// Per-channel population mean and variance in f64.
fn moments(t: &Tensor) -> Vec<(f64, f64)> {
    let c = t.shape()[0];
    let n = t.len() / c;
    t.data()
        .chunks(n)
        .map(|xs| {
            let m = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let v = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            (m, v)
        })
        .collect()
}

/// A guidance configuration with regions but `ω' = 0` and no substitution.
pub fn inert_guidance(n_t: usize) -> GuidanceConfig {
    let mut left = Tensor::zeros(&[32, 32]);
    for y in 0..32 {
        left.data_mut()[y * 32..y * 32 + 16].fill(1.0);
    }
    GuidanceConfig {
        omega_prime: 0.0,
        regions: vec![
            RegionSpec::new(0, Polarity::Positive, left.clone()).unwrap(),
            RegionSpec::new(1.min(n_t - 1), Polarity::Negative, left).unwrap(),
        ],
        substitute: vec![],
        variant: Variant::Literal,
    }
}

/// Seeds whose guided (`ω' = 0`) and unguided samples differ in any bit.
pub fn neutrality_failures(model: &Model, seeds: &[u64], scene_seed: u64, cfg: &SamplerConfig) -> Vec<u64> {
    let scene = generate_scene(scene_seed, model.unet.n_tokens).unwrap();
    let bundle = model.has_control().then_some(&scene.bundle);
    let guidance = inert_guidance(model.unet.n_tokens);
    seeds
        .iter()
        .copied()
        .filter(|&s| {
            let a = sample(model, &scene.prompt, bundle, None, s, cfg, false).unwrap();
            let b = sample(model, &scene.prompt, bundle, Some(&guidance), s, cfg, false).unwrap();
            !(a.latent.bit_eq(&b.latent) && a.image.bit_eq(&b.image))
        })
        .collect()
}

/// Samples every non-empty modality subset of one scene; returns the
/// subsets that failed along with the reason.
pub fn subset_failures(model: &Model, scene_seed: u64, seed: u64, cfg: &SamplerConfig) -> Vec<([bool; 3], String)> {
    let scene = generate_scene(scene_seed, model.unet.n_tokens).unwrap();
    let mut failures = Vec::new();
    for code in 1..8u8 {
        let mask = [code & 1 != 0, code & 2 != 0, code & 4 != 0];
        let bundle = scene.bundle.masked(mask);
        match sample(model, &scene.prompt, Some(&bundle), None, seed, cfg, false) {
            Ok(out) if out.image.shape() != [3, 32, 32] => {
                failures.push((mask, format!("image shape {:?}", out.image.shape())))
            }
            Ok(out) if !out.image.all_finite() => failures.push((mask, "non-finite pixels".into())),
            Ok(_) => {}
            Err(e) => failures.push((mask, e.to_string())),
        }
    }
    failures
}
