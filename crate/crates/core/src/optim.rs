//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `lr(t) = min + ½ (base − min)(1 + cos(π t / T))`, held at `min` for `t ≥ T`.
/// The first `warmup_steps` ramp linearly up to that curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.min_lr;
        }
        let progress = step as f64 / self.total_steps as f64;
        let lr = self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos());
        if step < self.warmup_steps {
            lr * (step + 1) as f64 / (self.warmup_steps + 1) as f64
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor<T>>> { store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect() };
        Ok(AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held by `store`. Decay is
    /// applied to matrices and kernels only, never to biases, norms or
    /// embeddings of rank 1.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let decay = if param.rank() >= 2 { self.weight_decay } else { 0.0 };
            let grad: Vec<f64> = match param.grad() {
                Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
                None => continue,
            };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let data = param.data_mut();
            for i in 0..data.len() {
                let gi = grad[i];
                let mi = b1 * m[i].to_f64_lossy() + (1.0 - b1) * gi;
                let vi = b2 * v[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let mut p = data[i].to_f64_lossy();
                p -= lr * decay * p;
                p -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = T::of(p);
            }
        }
        Ok(())
    }

    /// Moment tensors and step counter, named for checkpointing.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (k, (name, _)) in store.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[k].clone()));
            out.push((format!("opt.v.{name}"), self.v[k].clone()));
        }
        // u64 step split into two exactly-representable halves
        let (hi, lo) = ((self.step >> 24) as f64, (self.step & 0xff_ffff) as f64);
        out.push((
            "opt.step".into(),
            Tensor::from_f64(&[2], &[hi, lo]).expect("two values"),
        ));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (k, (name, t)) in store.iter().enumerate() {
            for (prefix, slot) in [("opt.m", &mut self.m[k]), ("opt.v", &mut self.v[k])] {
                let key = format!("{prefix}.{name}");
                let s = lookup(&key).ok_or_else(|| Error::format("checkpoint", format!("missing `{key}`")))?;
                if s.shape() != t.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("`{key}` has shape {:?}", s.shape()),
                    ));
                }
                *slot = s;
            }
        }
        let step = lookup("opt.step").ok_or_else(|| Error::format("checkpoint", "missing `opt.step`"))?;
        if step.numel() != 2 {
            return Err(Error::format("checkpoint", "`opt.step` must hold two values"));
        }
        let d = step.data();
        self.step = ((d[0].to_f64_lossy() as u64) << 24) | d[1].to_f64_lossy() as u64;
        Ok(())
    }
}
