//! Flat `key = value` run configuration. One pair per line, `#` starts a
//! comment, unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::CollapseMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::DatasetSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Validation evaluation period in steps; 0 disables it.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec {
                scenes: 256,
                fractions: [0.75, 0.0, 0.25],
                seed: 0,
                landmarks: 10,
            },
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.w2wb"),
            eval_every: 0,
        }
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn list<V: FromStr, const N: usize>(key: &str, v: &str) -> Result<[V; N]> {
    let items: Vec<V> = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::config(key, format!("expected {N} comma-separated values")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{v}`"))),
    }
}

fn join<V: ToString>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected key = value, got `{line}`"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "stage_channels" => m.stage_channels = list(key, v)?,
            "c_model" => m.c_model = num(key, v)?,
            "bev_h" => m.bev_h = num(key, v)?,
            "bev_w" => m.bev_w = num(key, v)?,
            "windows" => m.windows = num(key, v)?,
            "depth_bins" => m.depth_bins = num(key, v)?,
            "collapse" => {
                m.collapse = match v {
                    "max" => CollapseMode::Max,
                    "avg" => CollapseMode::Avg,
                    _ => return Err(Error::config(key, format!("expected max or avg, got `{v}`"))),
                }
            }
            "num_blocks" => m.blocks = num(key, v)?,
            "num_heads" => m.heads = num(key, v)?,
            "ffn_expansion" => m.ffn_expansion = num(key, v)?,
            "embed_dim" => m.embed_dim = num(key, v)?,
            "bev_init_enabled" => m.bev_init_enabled = flag(key, v)?,
            "shared_backbone" => m.shared_backbone = flag(key, v)?,
            "ground_width" => m.ground_width = num(key, v)?,
            "pad_crops_to_panorama" => m.pad_crops_to_panorama = flag(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "min_lr" => t.min_lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "tau" => t.tau = num(key, v)?,
            "fov" => t.fov = num(key, v)?,
            "rotate_aerial" => t.rotate_aerial = flag(key, v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "seed" => {
                t.seed = num(key, v)?;
                self.data.seed = t.seed;
            }
            "data_seed" => self.data.seed = num(key, v)?,
            "scenes" => self.data.scenes = num(key, v)?,
            "split" => self.data.fractions = list(key, v)?,
            "landmarks" => self.data.landmarks = num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::config("batch_size", "need at least 2 for in-batch negatives"));
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(t.lr > 0.0 && t.min_lr >= 0.0 && t.min_lr <= t.lr) {
            return Err(Error::config("lr", "need 0 <= min_lr <= lr and lr > 0"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(t.fov > 0.0 && t.fov <= 360.0) {
            return Err(Error::config("fov", format!("must lie in (0, 360], got {}", t.fov)));
        }
        if self.data.landmarks < 3 {
            return Err(Error::config("landmarks", "need at least 3"));
        }
        let counts = self.data.counts()?;
        if counts[0] < t.batch_size {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds the {} training scenes", t.batch_size, counts[0]),
            ));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage_channels", join(&m.stage_channels));
        kv("c_model", m.c_model.to_string());
        kv("bev_h", m.bev_h.to_string());
        kv("bev_w", m.bev_w.to_string());
        kv("windows", m.windows.to_string());
        kv("depth_bins", m.depth_bins.to_string());
        kv(
            "collapse",
            if m.collapse == CollapseMode::Max { "max" } else { "avg" }.into(),
        );
        kv("num_blocks", m.blocks.to_string());
        kv("num_heads", m.heads.to_string());
        kv("ffn_expansion", m.ffn_expansion.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("bev_init_enabled", m.bev_init_enabled.to_string());
        kv("shared_backbone", m.shared_backbone.to_string());
        kv("ground_width", m.ground_width.to_string());
        kv("pad_crops_to_panorama", m.pad_crops_to_panorama.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("min_lr", t.min_lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("tau", t.tau.to_string());
        kv("fov", t.fov.to_string());
        kv("rotate_aerial", t.rotate_aerial.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("seed", t.seed.to_string());
        kv("data_seed", self.data.seed.to_string());
        kv("scenes", self.data.scenes.to_string());
        kv("split", join(&self.data.fractions));
        kv("landmarks", self.data.landmarks.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }
}
