//! Training loop pieces and retrieval evaluation.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{GroundInput, W2wBev};
use crate::optim::{AdamW, CosineSchedule};
use crate::retrieval::{infonce, recall_at_k, RetrievalReport};
use crate::synth::{augment, rotate_quarter, scene_seed, to_tensor, RenderedPair};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub fov: f64,
    pub seed: u64,
    /// Rotate each training aerial by a random quarter turn.
    pub rotate_aerial: bool,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-4,
            weight_decay: 0.01,
            tau: 0.05,
            fov: 90.0,
            seed: 0,
            rotate_aerial: true,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.lr,
            min_lr: self.min_lr,
            total_steps: self.steps,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// One training example after augmentation.
pub struct Example<T> {
    pub ground: GroundInput<T>,
    pub aerial: Tensor<T>,
}

/// Forward both branches over the batch, symmetric InfoNCE, backward, one
/// AdamW update at `lr`. Returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut W2wBev<T>,
    opt: &mut AdamW<T>,
    batch: &[Example<T>],
    lr: f64,
    tau: f64,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::config(
            "batch_size",
            format!("need at least 2 pairs for negatives, got {}", batch.len()),
        ));
    }
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mut ground = Vec::with_capacity(batch.len());
    let mut aerial = Vec::with_capacity(batch.len());
    for ex in batch {
        ground.push(model.ground_forward(&mut g, &p, &ex.ground)?.embedding);
        aerial.push(model.aerial_forward(&mut g, &p, &ex.aerial)?);
    }
    let ground = W2wBev::stack(&mut g, &ground)?;
    let aerial = W2wBev::stack(&mut g, &aerial)?;
    let loss = infonce(&mut g, ground, aerial, tau)?;
    let value = g.data(loss)[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {value}\n{}",
            parameter_norms(&model.store)
        )));
    }
    g.backward(loss)?;
    model.store.zero_grads();
    model.store.absorb_grads(&g, &p)?;
    opt.step(&mut model.store, lr)?;
    Ok(value)
}

/// `name norm` per parameter, one per line.
pub fn parameter_norms<T: Scalar>(store: &crate::params::ParamStore<T>) -> String {
    let mut out = String::from("parameter norms:\n");
    for (name, t) in store.iter() {
        let _ = writeln!(out, "  {name} {:.6e}", t.l2_norm());
    }
    out
}

/// Per-step randomness: a function of the run seed and step index only, so
/// a resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x5eed_0f57_e9, step))
}

/// Draws `batch_size` distinct training pairs and augments their panoramas.
pub fn sample_batch<T: Scalar>(
    model: &W2wBev<T>,
    pairs: &[RenderedPair],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<Example<T>>> {
    if cfg.batch_size > pairs.len() {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training scenes", cfg.batch_size, pairs.len()),
        ));
    }
    let mut rng = step_rng(cfg.seed, step);
    let picks = sample(&mut rng, pairs.len(), cfg.batch_size);
    picks
        .into_iter()
        .map(|i| {
            let (crop, _) = augment(&pairs[i].pano, cfg.fov, &mut rng)?;
            let aerial = if cfg.rotate_aerial {
                to_tensor(&rotate_quarter(&pairs[i].aerial, rng.random_range(0..4)))
            } else {
                to_tensor(&pairs[i].aerial)
            };
            Ok(Example {
                ground: model.prepare_ground(&crop)?,
                aerial,
            })
        })
        .collect()
}

/// Model, optimizer and step counter.
pub struct Trainer<T> {
    pub model: W2wBev<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: W2wBev<T>, config: TrainConfig) -> Result<Self> {
        let opt = AdamW::new(&model.store, config.weight_decay)?;
        Ok(Trainer {
            model,
            opt,
            config,
            step: 0,
        })
    }

    /// Runs the next step; returns its loss.
    pub fn next(&mut self, pairs: &[RenderedPair]) -> Result<f64> {
        let batch = sample_batch(&self.model, pairs, &self.config, self.step)?;
        let lr = self.config.schedule().lr_at(self.step);
        let loss = train_step(&mut self.model, &mut self.opt, &batch, lr, self.config.tau)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Parameters only.
pub fn model_checkpoint<T: Scalar>(model: &W2wBev<T>) -> Checkpoint<T> {
    Checkpoint {
        tensors: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    }
}

/// Overwrites every parameter of `model` from `ckpt`; names and shapes must match.
pub fn load_params<T: Scalar>(model: &mut W2wBev<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = ckpt
            .get(&name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing parameter `{name}`")))?;
        if t.shape() != model.store.get(id).shape() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                ),
            ));
        }
        model.store.set(id, t.data())?;
    }
    Ok(())
}

impl<T: Scalar> Trainer<T> {
    /// Parameters plus optimizer moments and step.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut c = model_checkpoint(&self.model);
        c.tensors.extend(self.opt.state(&self.model.store));
        c
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(mut model: W2wBev<T>, config: TrainConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        load_params(&mut model, ckpt)?;
        let mut t = Trainer::new(model, config)?;
        t.opt.load_state(&t.model.store, |k| ckpt.get(k).cloned())?;
        t.step = t.opt.steps_taken() as usize;
        Ok(t)
    }
}

/// Ground-to-aerial retrieval over `pairs`: every aerial is a reference,
/// every panorama becomes one query at `fov` with a seeded random roll.
pub fn evaluate<T: Scalar>(model: &W2wBev<T>, pairs: &[RenderedPair], fov: f64, seed: u64) -> Result<RetrievalReport> {
    let aerial = embed_aerials(model, pairs)?;
    evaluate_against(model, pairs, &aerial, fov, seed)
}

pub fn embed_aerials<T: Scalar>(model: &W2wBev<T>, pairs: &[RenderedPair]) -> Result<Vec<Vec<f64>>> {
    pairs
        .iter()
        .map(|p| model.embed_aerial(&to_tensor(&p.aerial)))
        .collect()
}

/// As [`evaluate`] with precomputed aerial embeddings.
pub fn evaluate_against<T: Scalar>(
    model: &W2wBev<T>,
    pairs: &[RenderedPair],
    aerial: &[Vec<f64>],
    fov: f64,
    seed: u64,
) -> Result<RetrievalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ground = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (crop, _) = augment(&p.pano, fov, &mut rng)?;
        ground.push(model.embed_ground(&model.prepare_ground(&crop)?)?);
    }
    let truth: Vec<usize> = (0..pairs.len()).collect();
    recall_at_k(&ground, aerial, &truth)
}
