//! The subcommands. Every path in the configuration is relative to the
//! output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use cocktail_core::autodiff::AdamWConfig;
use cocktail_core::backbone::{init_backbone, sample, SampleOutput, StepAttention};
use cocktail_core::gcontrolnet::init_from_backbone;
use cocktail_core::guidance::Polarity;
use cocktail_core::metrics::score_sample;
use cocktail_core::params::{BACKBONE_PREFIX, CONTROL_PREFIX};
use cocktail_core::synthdata::{generate_scene, make_split, Manifest, Scene};
use cocktail_core::{
    checkpoint, io, rng, EvalReport, GuidanceConfig, Model, ModalityBundle, ModalityKind, ParamStore, RegionSpec,
    Tensor, TextPrompt,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::trainer::{smoothed_ends, Phase, TrainState, Trainer};

pub const TRAIN_MANIFEST: &str = "train.txt";
pub const EVAL_MANIFEST: &str = "eval.txt";
pub const PRETRAIN_STEM: &str = "pretrain";
pub const CONTROL_STEM: &str = "control";
pub const EVAL_DIR: &str = "eval";
pub const EVAL_REPORT: &str = "report.txt";

const EVAL_ID: u64 = 4;

fn read_manifest(cfg: &RunConfig, out: &Path, file: &str) -> Result<Manifest> {
    let path = out.join(&cfg.data_dir).join(file);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading dataset manifest {} (run synth first)", path.display()))?;
    Manifest::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub struct SynthOutcome {
    pub train: Manifest,
    pub eval: Manifest,
    pub previews: usize,
}

/// Writes the train and eval manifests and previews of the first training
/// scenes (image, caption and bundle).
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutcome> {
    let (train, eval) = make_split(cfg.n_train, cfg.n_eval, cfg.base_seed)?;
    let dir = out.join(&cfg.data_dir);
    create_dir(&dir)?;
    write_file(&dir.join(TRAIN_MANIFEST), train.render())?;
    write_file(&dir.join(EVAL_MANIFEST), eval.render())?;
    let pdir = dir.join("previews");
    create_dir(&pdir)?;
    let seeds: Vec<u64> = train.seeds.iter().take(cfg.previews).copied().collect();
    for &seed in &seeds {
        let scene = generate_scene(seed, cfg.n_tokens)?;
        io::write_ppm(&pdir.join(format!("{seed}.ppm")), &scene.image)?;
        write_file(&pdir.join(format!("{seed}.txt")), format!("{}\n", scene.caption))?;
        io::write_bundle(&pdir.join(seed.to_string()), &scene.bundle)?;
    }
    Ok(SynthOutcome {
        train,
        eval,
        previews: seeds.len(),
    })
}

fn adam(lr: f32, weight_decay: f32) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay,
        ..AdamWConfig::default()
    }
}

fn run_steps(trainer: &Trainer, params: &mut ParamStore, state: &mut TrainState, steps: u64, label: &str) -> Result<()> {
    let start = Instant::now();
    let first = state.step;
    while state.step < steps {
        let loss = trainer.step(params, state)?;
        if state.step.is_multiple_of(100) || state.step == steps {
            let secs = start.elapsed().as_secs_f64();
            let rate = secs / (state.step - first) as f64;
            eprintln!(
                "{label}: step {}/{steps} loss {loss:.4} ({secs:.0}s, {:.0}s left)",
                state.step,
                rate * (steps - state.step) as f64
            );
        }
    }
    Ok(())
}

/// Per-step losses followed by `key=value` summary lines.
fn loss_log(state: &TrainState, window: usize, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let first = state.step - state.losses.len() as u64;
    for (k, l) in state.losses.iter().enumerate() {
        let _ = writeln!(s, "step={} loss={l:.8}", first + k as u64);
    }
    let losses: Vec<f64> = state.losses.iter().copied().collect();
    if let Some((a, b)) = smoothed_ends(&losses, window) {
        let _ = writeln!(s, "smoothed_initial={a:.8}");
        let _ = writeln!(s, "smoothed_final={b:.8}");
    }
    for (k, v) in extra {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    /// Smoothed loss over the first and the last `loss_window` steps.
    pub smoothed: Option<(f64, f64)>,
    pub seconds: f64,
}

fn outcome(state: &TrainState, window: usize, start: Instant) -> TrainOutcome {
    let losses: Vec<f64> = state.losses.iter().copied().collect();
    TrainOutcome {
        steps: state.step,
        smoothed: smoothed_ends(&losses, window),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Trains the backbone on (image, prompt) pairs. With `resume` the
/// checkpoint and train state in `out` are continued up to
/// `pretrain_steps`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    let start = Instant::now();
    let train = read_manifest(cfg, out, TRAIN_MANIFEST)?;
    let ucfg = cfg.unet();
    let ckpt = out.join(&cfg.backbone_path);
    let (mut params, mut state) = if resume {
        (checkpoint::load(&ckpt)?, TrainState::load(out, PRETRAIN_STEM)?)
    } else {
        (
            init_backbone(&ucfg, cfg.seed)?,
            TrainState::new(cfg.seed, adam(cfg.lr, cfg.weight_decay)),
        )
    };
    let trainer = Trainer {
        phase: Phase::Pretrain,
        unet: ucfg,
        control: cfg.gcontrol()?,
        schedule: cfg.schedule()?,
        scene_seeds: train.seeds,
        batch_size: cfg.batch_size,
        prompt_drop: cfg.prompt_drop,
    };
    run_steps(&trainer, &mut params, &mut state, cfg.pretrain_steps as u64, "pretrain")?;
    checkpoint::save(&params, &ckpt)?;
    state.save(out, PRETRAIN_STEM)?;
    write_file(
        &out.join(format!("{PRETRAIN_STEM}.log")),
        loss_log(&state, cfg.loss_window, &[]),
    )?;
    Ok(outcome(&state, cfg.loss_window, start))
}

#[derive(Clone, Debug)]
pub struct ControlOutcome {
    pub train: TrainOutcome,
    /// Mean loss of the first batch through the fresh model and through the
    /// backbone alone; absent when resuming.
    pub step0: Option<(f64, f64)>,
    /// Mean held-out loss with the full bundle and with an empty bundle,
    /// and the number of scenes.
    pub heldout: Option<(f64, f64, usize)>,
}

fn same_topology(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
}

/// Freezes the backbone and trains the control branch, its embedders and
/// its normalization layers.
pub fn cmd_train_control(cfg: &RunConfig, out: &Path, resume: bool) -> Result<ControlOutcome> {
    let start = Instant::now();
    let train = read_manifest(cfg, out, TRAIN_MANIFEST)?;
    let ucfg = cfg.unet();
    let gcfg = cfg.gcontrol()?;
    let backbone = checkpoint::load(out.join(&cfg.backbone_path)).context("loading the backbone checkpoint")?;
    if backbone.names().any(|n| !n.starts_with(BACKBONE_PREFIX)) {
        bail!("backbone checkpoint holds tensors outside {BACKBONE_PREFIX}");
    }
    let fresh = init_from_backbone(&backbone, &ucfg, &gcfg, cfg.seed)?;
    let ckpt = out.join(&cfg.control_path);
    let (control, mut state) = if resume {
        let c = checkpoint::load(&ckpt)?;
        if !same_topology(&c, &fresh) {
            bail!("control checkpoint {} does not match the configured topology", ckpt.display());
        }
        (c, TrainState::load(out, CONTROL_STEM)?)
    } else {
        (fresh, TrainState::new(cfg.seed, adam(cfg.control_lr, cfg.weight_decay)))
    };
    let mut params = backbone.clone();
    params.extend(control);
    let trainer = Trainer {
        phase: Phase::Control,
        unet: ucfg,
        control: gcfg,
        schedule: cfg.schedule()?,
        scene_seeds: train.seeds,
        batch_size: cfg.batch_size,
        prompt_drop: cfg.prompt_drop,
    };
    let step0 = if state.step == 0 {
        let with = trainer.eval_loss(&params, state.seed, 0, false)?;
        let without = trainer.eval_loss(&params, state.seed, 0, true)?;
        Some((with, without))
    } else {
        None
    };
    run_steps(&trainer, &mut params, &mut state, cfg.control_steps as u64, "train-control")?;
    if !params.bit_eq_prefix(&backbone, BACKBONE_PREFIX) {
        bail!("backbone parameters changed during control training");
    }
    checkpoint::save(&params.with_prefix(CONTROL_PREFIX), &ckpt)?;
    state.save(out, CONTROL_STEM)?;

    let heldout = match read_manifest(cfg, out, EVAL_MANIFEST) {
        Ok(eval) => {
            let seeds: Vec<u64> = eval.seeds.iter().take(cfg.eval_count).copied().collect();
            let pairs: Vec<Result<(f64, f64)>> = seeds
                .par_iter()
                .enumerate()
                .map(|(i, &s)| {
                    let mut item = trainer.heldout_item(cfg.seed, s, i)?;
                    let cond = trainer.item_loss(&params, &item, false)?.0;
                    item.bundle = Some(ModalityBundle::empty());
                    let uncond = trainer.item_loss(&params, &item, false)?.0;
                    Ok((cond, uncond))
                })
                .collect();
            let (mut c, mut u) = (0.0, 0.0);
            for p in pairs {
                let (a, b) = p?;
                c += a;
                u += b;
            }
            let n = seeds.len();
            Some((c / n as f64, u / n as f64, n))
        }
        Err(_) => None,
    };

    let mut extra = vec![("backbone_unchanged", "true".to_string())];
    if let Some((a, b)) = step0 {
        extra.push(("step0_control_loss", format!("{a:.8}")));
        extra.push(("step0_backbone_loss", format!("{b:.8}")));
    }
    if let Some((c, u, n)) = heldout {
        extra.push(("heldout_scenes", n.to_string()));
        extra.push(("heldout_bundle_loss", format!("{c:.8}")));
        extra.push(("heldout_empty_bundle_loss", format!("{u:.8}")));
    }
    write_file(
        &out.join(format!("{CONTROL_STEM}.log")),
        loss_log(&state, cfg.loss_window, &extra),
    )?;
    Ok(ControlOutcome {
        train: outcome(&state, cfg.loss_window, start),
        step0,
        heldout,
    })
}

/// Loads the backbone and, when asked, the control branch.
pub fn load_model(cfg: &RunConfig, out: &Path, with_control: bool) -> Result<Model> {
    let mut params = checkpoint::load(out.join(&cfg.backbone_path)).context("loading the backbone checkpoint")?;
    if with_control {
        let c = checkpoint::load(out.join(&cfg.control_path)).context("loading the control checkpoint")?;
        if c.names().any(|n| !n.starts_with(CONTROL_PREFIX)) {
            bail!("control checkpoint holds tensors outside {CONTROL_PREFIX}");
        }
        params.extend(c);
    }
    Ok(Model::new(cfg.unet(), cfg.gcontrol()?, cfg.schedule()?, params))
}

/// Parses region lines `token=<i> polarity=<pos|neg> mask=<file>`; mask
/// files are graymaps relative to the region file.
pub fn read_regions(path: &Path) -> Result<Vec<RegionSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut specs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (mut token, mut polarity, mut mask) = (None, None, None);
        for field in line.split_whitespace() {
            match field.split_once('=') {
                Some(("token", v)) => token = Some(v.parse::<usize>().with_context(|| format!("line {}", n + 1))?),
                Some(("polarity", v)) => polarity = Some(Polarity::parse(v)?),
                Some(("mask", v)) => mask = Some(io::read_pgm(&base.join(v))?),
                _ => bail!("line {}: unexpected field {field:?}", n + 1),
            }
        }
        let (Some(token), Some(polarity), Some(mask)) = (token, polarity, mask) else {
            bail!("line {}: needs token=, polarity= and mask=", n + 1);
        };
        specs.push(RegionSpec::new(token, polarity, mask)?);
    }
    Ok(specs)
}

/// Attention maps as named tensors: `timesteps`, then
/// `s<step>.<backbone|branch>.<block>` shaped `heads × N_i × N_t`.
pub fn attention_store(steps: &[StepAttention]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.insert(
        "timesteps",
        Tensor::new(&[steps.len()], steps.iter().map(|a| a.t as f32).collect())?,
    );
    for a in steps {
        for (origin, state) in [("backbone", Some(&a.backbone)), ("branch", a.branch.as_ref())] {
            for m in state.into_iter().flat_map(|st| &st.maps) {
                s.insert(format!("s{:03}.{origin}.{}", a.step, m.block.name()), m.maps.clone());
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Default)]
pub struct SampleArgs {
    /// Prompt text; defaults to the scene's caption.
    pub prompt: Option<String>,
    /// Synthetic scene supplying prompt and bundle.
    pub scene: Option<u64>,
    /// Bundle directory; overrides the scene's bundle.
    pub bundle: Option<PathBuf>,
    /// Keeps only these modalities of the bundle.
    pub modalities: Option<Vec<ModalityKind>>,
    pub regions: Option<PathBuf>,
    pub substitute: Vec<usize>,
    pub dump_attn: bool,
    /// Output file stem.
    pub name: String,
}

pub struct SampleResult {
    pub image_path: PathBuf,
    pub attn_path: Option<PathBuf>,
    pub output: SampleOutput,
}

pub fn cmd_sample(cfg: &RunConfig, out: &Path, args: &SampleArgs) -> Result<SampleResult> {
    let scene = args.scene.map(|s| generate_scene(s, cfg.n_tokens)).transpose()?;
    let prompt = match (&args.prompt, &scene) {
        (Some(text), _) => TextPrompt::parse(text, cfg.n_tokens)?,
        (None, Some(s)) => s.prompt.clone(),
        (None, None) => bail!("sample needs a prompt or a scene"),
    };
    TextPrompt::new(prompt.ids().to_vec(), cfg.n_tokens, cfg.vocab)?;
    let mut bundle = match (&args.bundle, &scene) {
        (Some(dir), _) => Some(io::read_bundle(dir).with_context(|| format!("reading bundle {}", dir.display()))?),
        (None, Some(s)) => Some(s.bundle.clone()),
        (None, None) => None,
    };
    if let Some(kinds) = &args.modalities {
        let b = bundle.as_ref().context("a modality selection needs a bundle or a scene")?;
        let mut mask = [false; 3];
        for k in kinds {
            mask[k.index()] = true;
        }
        bundle = Some(b.masked(mask));
    }
    let guidance = if args.regions.is_some() || !args.substitute.is_empty() {
        Some(GuidanceConfig {
            omega_prime: cfg.omega_prime,
            regions: args.regions.as_deref().map(read_regions).transpose()?.unwrap_or_default(),
            substitute: args.substitute.clone(),
            variant: cfg.variant()?,
        })
    } else {
        None
    };
    let model = load_model(cfg, out, bundle.is_some())?;
    let output = sample(
        &model,
        &prompt,
        bundle.as_ref(),
        guidance.as_ref(),
        cfg.seed,
        &cfg.sampler(),
        args.dump_attn,
    )?;
    create_dir(out)?;
    let image_path = out.join(format!("{}.ppm", args.name));
    io::write_ppm(&image_path, &output.image)?;
    let attn_path = if args.dump_attn {
        let p = out.join(format!("{}.attn", args.name));
        checkpoint::save(&attention_store(&output.attention)?, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(SampleResult {
        image_path,
        attn_path,
        output,
    })
}

/// A fixed-point-free permutation: a random cycle through all indices.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::stream_id(&[EVAL_ID, 0])));
    let mut perm = vec![0; n];
    for k in 0..n {
        perm[order[k]] = order[(k + 1) % n];
    }
    perm
}

pub struct EvalOutcome {
    pub matched: EvalReport,
    pub shuffled: EvalReport,
    pub ceiling: EvalReport,
    /// Scene `i` was sampled with the bundle of scene `permutation[i]` in
    /// the shuffled baseline.
    pub permutation: Vec<usize>,
    pub report: String,
}

/// Samples every eval scene with its own bundle and with another scene's
/// bundle (same prompt, same noise), scores both against the scene's own
/// annotations, and scores the ground-truth images as a ceiling.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalOutcome> {
    let eval = read_manifest(cfg, out, EVAL_MANIFEST)?;
    let n = cfg.eval_count.min(eval.seeds.len());
    ensure!(n >= 2, "evaluation needs at least 2 scenes, have {n}");
    let model = load_model(cfg, out, true)?;
    let scenes: Vec<Scene> = eval.seeds[..n]
        .par_iter()
        .map(|&s| generate_scene(s, cfg.n_tokens))
        .collect::<cocktail_core::Result<_>>()?;
    let perm = derangement(n, cfg.seed);
    let sampler = cfg.sampler();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, i), (i, perm[i])]).collect();
    let images: Vec<Tensor> = jobs
        .par_iter()
        .map(|&(i, b)| {
            let seed = rng::stream_id(&[cfg.seed, EVAL_ID, i as u64]);
            sample(&model, &scenes[i].prompt, Some(&scenes[b].bundle), None, seed, &sampler, false).map(|o| o.image)
        })
        .collect::<cocktail_core::Result<_>>()?;
    let mut matched = Vec::with_capacity(n);
    let mut shuffled = Vec::with_capacity(n);
    let mut ceiling = Vec::with_capacity(n);
    for (i, scene) in scenes.iter().enumerate() {
        matched.push(score_sample(&images[2 * i], scene)?);
        shuffled.push(score_sample(&images[2 * i + 1], scene)?);
        ceiling.push(score_sample(&scene.image, scene)?);
    }
    let matched = EvalReport::from_samples(matched);
    let shuffled = EvalReport::from_samples(shuffled);
    let ceiling = EvalReport::from_samples(ceiling);

    let dir = out.join(EVAL_DIR);
    create_dir(&dir)?;
    for (i, scene) in scenes.iter().enumerate().take(cfg.previews) {
        io::write_ppm(&dir.join(format!("{}_truth.ppm", scene.seed)), &scene.image)?;
        io::write_ppm(&dir.join(format!("{}_matched.ppm", scene.seed)), &images[2 * i])?;
        io::write_ppm(&dir.join(format!("{}_shuffled.ppm", scene.seed)), &images[2 * i + 1])?;
    }
    let mut report = String::new();
    report.push_str(&matched.render_table("matched bundles"));
    report.push('\n');
    report.push_str(&shuffled.render_table("shuffled bundles"));
    report.push('\n');
    report.push_str(&ceiling.render_table("ground truth"));
    report.push('\n');
    report.push_str(&matched.render_kv("matched."));
    report.push_str(&shuffled.render_kv("shuffled."));
    report.push_str(&ceiling.render_kv("ceiling."));
    let _ = writeln!(report, "gap.miou={:.6}", matched.miou.mean - shuffled.miou.mean);
    let _ = writeln!(report, "gap.edge_l2={:.6}", shuffled.edge_l2.mean - matched.edge_l2.mean);
    write_file(&dir.join(EVAL_REPORT), &report)?;
    Ok(EvalOutcome {
        matched,
        shuffled,
        ceiling,
        permutation: perm,
        report,
    })
}

/// Renders one step of an attention dump: a head-averaged graymap per
/// block and token, and a table of each token's mean attention mass.
pub fn cmd_inspect_attn(out: &Path, dump: &Path, step: Option<usize>, token: Option<usize>) -> Result<String> {
    let store = checkpoint::load(dump).with_context(|| format!("loading {}", dump.display()))?;
    let steps = store.require("timesteps")?.len();
    ensure!(steps > 0, "the dump holds no steps");
    let step = step.unwrap_or(steps - 1);
    ensure!(step < steps, "step {step} is outside the dump's {steps} steps");
    let prefix = format!("s{step:03}.");
    let stem = dump.file_stem().and_then(|s| s.to_str()).unwrap_or("attn");
    let dir = out.join(format!("{stem}_s{step:03}"));
    create_dir(&dir)?;
    let t = store.require("timesteps")?.data()[step];
    let mut table = format!("step {step} (t = {t})\n");
    let mut header = false;
    for (name, maps) in store.iter().filter(|(k, _)| k.starts_with(&prefix)) {
        let &[heads, ni, nt] = maps.shape() else {
            bail!("{name} is not heads × N_i × N_t");
        };
        let res = (ni as f64).sqrt().round() as usize;
        ensure!(res * res == ni, "{name} has a non-square {ni} positions");
        if !header {
            let _ = write!(table, "{:<20} {:>4}", "block", "res");
            for j in 0..nt {
                let _ = write!(table, " {:>7}", format!("tok{j}"));
            }
            table.push('\n');
            header = true;
        }
        let mut avg = vec![0f64; ni * nt];
        for (k, &v) in maps.data().iter().enumerate() {
            avg[k % (ni * nt)] += v as f64 / heads as f64;
        }
        let block = &name[prefix.len()..];
        let _ = write!(table, "{block:<20} {res:>4}");
        for j in 0..nt {
            let mass = (0..ni).map(|i| avg[i * nt + j]).sum::<f64>() / ni as f64;
            let _ = write!(table, " {mass:>7.4}");
        }
        table.push('\n');
        for j in (0..nt).filter(|&j| token.is_none_or(|tk| tk == j)) {
            let col: Vec<f64> = (0..ni).map(|i| avg[i * nt + j]).collect();
            let max = col.iter().cloned().fold(0.0, f64::max);
            let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
            let img = Tensor::new(&[res, res], col.iter().map(|&v| (v * scale) as f32).collect())?;
            io::write_pgm(&dir.join(format!("{block}.tok{j}.pgm")), &img)?;
        }
    }
    ensure!(header, "the dump has no maps for step {step}");
    write_file(&dir.join("summary.txt"), &table)?;
    Ok(table)
}
