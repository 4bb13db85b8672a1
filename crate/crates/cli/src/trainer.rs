//! Noise-prediction training for the backbone and for the control branch.
//!
//! Every random draw of an item comes from its own counter-addressed stream
//! `(seed, phase, step, item)`, so a saved [`TrainState`] resumes the exact
//! trajectory and items may be evaluated in parallel.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cocktail_core::autodiff::{AdamW, AdamWConfig, Graph};
use cocktail_core::backbone::{latent, unet, NoiseSchedule};
use cocktail_core::gcontrolnet::{model_forward, sample_modality_subset, ForwardCtl};
use cocktail_core::nn::Fwd;
use cocktail_core::params::{Binder, GradAccumulator, BACKBONE_PREFIX, CONTROL_PREFIX};
use cocktail_core::rng;
use cocktail_core::synthdata::generate_scene;
use cocktail_core::{checkpoint, GControlConfig, ParamStore, Tensor, TextPrompt, UNetConfig};
use rand::Rng;
use rayon::prelude::*;

const HELDOUT_ID: u64 = 3;

/// Loss values kept in a [`TrainState`].
pub const LOSS_HISTORY: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Control,
}

impl Phase {
    fn id(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Control => 2,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Phase::Pretrain => BACKBONE_PREFIX,
            Phase::Control => CONTROL_PREFIX,
        }
    }
}

/// Step counter, optimizer state and recent losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub optimizer: AdamW,
    pub losses: VecDeque<f64>,
}

impl TrainState {
    pub fn new(seed: u64, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            seed,
            optimizer: AdamW::new(config),
            losses: VecDeque::new(),
        }
    }

    pub fn push_loss(&mut self, loss: f64) {
        if self.losses.len() == LOSS_HISTORY {
            self.losses.pop_front();
        }
        self.losses.push_back(loss);
    }

    /// Writes `<stem>.moments` (CKTL) and `<stem>.state` (text).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut m = ParamStore::new();
        for (name, (a, b)) in &self.optimizer.moments {
            m.insert(format!("m.{name}"), a.clone());
            m.insert(format!("v.{name}"), b.clone());
        }
        checkpoint::save(&m, dir.join(format!("{stem}.moments")))?;
        let c = &self.optimizer.config;
        let mut s = String::new();
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "adam_step={}", self.optimizer.step);
        let _ = writeln!(
            s,
            "adam={:08x},{:08x},{:08x},{:08x},{:08x}",
            c.lr.to_bits(),
            c.beta1.to_bits(),
            c.beta2.to_bits(),
            c.eps.to_bits(),
            c.weight_decay.to_bits()
        );
        let losses: Vec<String> = self.losses.iter().map(|l| format!("{:016x}", l.to_bits())).collect();
        let _ = writeln!(s, "losses={}", losses.join(","));
        std::fs::write(dir.join(format!("{stem}.state")), s)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.state"));
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').context("train state line is not key=value")?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).with_context(|| format!("train state lacks {k}"));
        let hex32 = |s: &str| -> Result<f32> { Ok(f32::from_bits(u32::from_str_radix(s, 16)?)) };
        let adam: Vec<f32> = get("adam")?.split(',').map(hex32).collect::<Result<_>>()?;
        if adam.len() != 5 {
            bail!("train state optimizer line has {} fields", adam.len());
        }
        let config = AdamWConfig {
            lr: adam[0],
            beta1: adam[1],
            beta2: adam[2],
            eps: adam[3],
            weight_decay: adam[4],
        };
        let mut optimizer = AdamW::new(config);
        optimizer.step = get("adam_step")?.parse()?;
        let m = checkpoint::load(dir.join(format!("{stem}.moments")))?;
        for (name, t) in m.iter() {
            if let Some(p) = name.strip_prefix("m.") {
                let v = m.get(&format!("v.{p}")).with_context(|| format!("moments lack v.{p}"))?;
                optimizer.moments.insert(p.to_string(), (t.clone(), v.clone()));
            }
        }
        let losses = get("losses")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| Ok(f64::from_bits(u64::from_str_radix(s, 16)?)))
            .collect::<Result<VecDeque<f64>>>()?;
        Ok(Self {
            step: get("step")?.parse()?,
            seed: get("seed")?.parse()?,
            optimizer,
            losses,
        })
    }
}

/// Everything fixed for the duration of a training run.
pub struct Trainer {
    pub phase: Phase,
    pub unet: UNetConfig,
    pub control: GControlConfig,
    pub schedule: NoiseSchedule,
    pub scene_seeds: Vec<u64>,
    pub batch_size: usize,
    pub prompt_drop: f64,
}

/// One drawn training example.
#[derive(Clone, Debug)]
pub struct Item {
    pub z0: Tensor,
    pub t: usize,
    pub eps: Tensor,
    pub prompt: TextPrompt,
    pub bundle: Option<cocktail_core::ModalityBundle>,
}

impl Trainer {
    pub fn draw_item(&self, seed: u64, step: u64, index: usize) -> Result<Item> {
        let mut r = rng::stream(seed, rng::stream_id(&[self.phase.id(), step, index as u64]));
        let scene_seed = self.scene_seeds[r.gen_range(0..self.scene_seeds.len())];
        let t = r.gen_range(0..self.schedule.len());
        let drop_prompt = r.gen::<f64>() < self.prompt_drop;
        let mask = match self.phase {
            Phase::Control => Some(sample_modality_subset(&mut r, self.control.p_drop)?),
            Phase::Pretrain => None,
        };
        let eps = rng::normal(&mut r, &self.unet.latent_shape());
        let scene = generate_scene(scene_seed, self.unet.n_tokens)?;
        let prompt = if drop_prompt {
            TextPrompt::empty(self.unet.n_tokens)
        } else {
            scene.prompt.clone()
        };
        Ok(Item {
            z0: latent::encode(&scene.image)?,
            t,
            eps,
            prompt,
            bundle: mask.map(|m| scene.bundle.masked(m)),
        })
    }

    /// A held-out item for scene `scene_seed`: full prompt and full bundle,
    /// noise level and noise drawn from the stream `(seed, index)`.
    pub fn heldout_item(&self, seed: u64, scene_seed: u64, index: usize) -> Result<Item> {
        let mut r = rng::stream(seed, rng::stream_id(&[HELDOUT_ID, index as u64]));
        let t = r.gen_range(0..self.schedule.len());
        let eps = rng::normal(&mut r, &self.unet.latent_shape());
        let scene = generate_scene(scene_seed, self.unet.n_tokens)?;
        Ok(Item {
            z0: latent::encode(&scene.image)?,
            t,
            eps,
            prompt: scene.prompt,
            bundle: Some(scene.bundle),
        })
    }

    /// MSE loss of one item and, when `grads` is set, the gradients of the
    /// phase's trainable parameters.
    pub fn item_loss(&self, params: &ParamStore, item: &Item, grads: bool) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self.loss_via(params, item, grads, self.phase)
    }

    /// Loss of `item` through the backbone alone, ignoring its bundle.
    pub fn backbone_loss(&self, params: &ParamStore, item: &Item) -> Result<f64> {
        Ok(self.loss_via(params, item, false, Phase::Pretrain)?.0)
    }

    fn loss_via(
        &self,
        params: &ParamStore,
        item: &Item,
        grads: bool,
        route: Phase,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let z_t = self.schedule.forward_diffuse(&item.z0, item.t, &item.eps)?;
        let mut g = Graph::new();
        let mut b = if grads {
            Binder::trainable_prefix(params, self.phase.prefix())
        } else {
            Binder::frozen(params)
        };
        let mut f = Fwd::new(&mut g, &mut b);
        let z = f.g.constant(z_t);
        let target = f.g.constant(item.eps.clone());
        let pred = match route {
            Phase::Pretrain => {
                let ctx = unet::text_encode(&mut f, &self.unet, &item.prompt)?;
                let mut ctl = Default::default();
                unet::unet_forward(&mut f, &self.unet, z, item.t, ctx, None, &mut ctl)?
            }
            Phase::Control => model_forward(
                &mut f,
                &self.unet,
                &self.control,
                z,
                item.t,
                &item.prompt,
                item.bundle.as_ref(),
                &mut ForwardCtl::default(),
            )?,
        };
        let loss = f.g.mse(pred, target)?;
        let value = f.value(loss).data()[0] as f64;
        if !value.is_finite() {
            bail!("non-finite training loss");
        }
        if !grads {
            return Ok((value, BTreeMap::new()));
        }
        let gr = g.backward(loss)?;
        Ok((value, b.grads(&gr)))
    }

    /// One optimization step over `batch_size` items; returns the mean loss.
    pub fn step(&self, params: &mut ParamStore, state: &mut TrainState) -> Result<f64> {
        let step = state.step;
        let seed = state.seed;
        let shared: &ParamStore = params;
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = (0..self.batch_size)
            .into_par_iter()
            .map(|i| {
                let item = self.draw_item(seed, step, i)?;
                self.item_loss(shared, &item, true)
            })
            .collect();
        let mut acc = GradAccumulator::default();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            acc.add(&g);
        }
        let loss = loss / self.batch_size as f64;
        state.optimizer.step(params, &acc.mean())?;
        state.step += 1;
        state.push_loss(loss);
        Ok(loss)
    }

    /// Mean loss of the batch `step` would draw, without updating anything.
    /// With `backbone_only` the items skip the control branch.
    pub fn eval_loss(&self, params: &ParamStore, seed: u64, step: u64, backbone_only: bool) -> Result<f64> {
        let losses: Vec<Result<f64>> = (0..self.batch_size)
            .into_par_iter()
            .map(|i| {
                let item = self.draw_item(seed, step, i)?;
                if backbone_only {
                    self.backbone_loss(params, &item)
                } else {
                    Ok(self.item_loss(params, &item, false)?.0)
                }
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.batch_size as f64)
    }
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_ends(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}
