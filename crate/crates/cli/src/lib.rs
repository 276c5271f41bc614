//! Subcommands behind the `w2w` binary. Each returns an [`Outcome`] so the
//! binary and the tests share one code path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use w2w_core::autodiff::Graph;
use w2w_core::checkpoint::Checkpoint;
use w2w_core::config::RunConfig;
use w2w_core::imageio::heatmap_pgm;
use w2w_core::model::W2wBev;
use w2w_core::synth::{augment, make_dataset, to_tensor, Dataset, RenderedPair, WorldConfig};
use w2w_core::train::{embed_aerials, evaluate, evaluate_against, load_params, model_checkpoint, Trainer};
use w2w_core::verify::gradient_suite;
use w2w_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRAD_CHECK: i32 = 3;

/// Seeds the gradient suite runs over.
pub const GRAD_SEEDS: u64 = 20;

#[derive(Parser, Debug)]
#[command(
    name = "w2w",
    version,
    about = "Window-to-window BEV cross-view retrieval at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// key = value run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` (and the data seed) from the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated FoV list in degrees
    #[arg(long, global = true)]
    pub fov: Option<String>,
    /// Overrides `checkpoint` from the config
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset to disk
    GenData,
    /// Train and write the loss log plus final and best checkpoints
    Train {
        /// Continue from a checkpoint written by a previous run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval report on the test split for each FoV
    Eval {
        /// Split to evaluate
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every differentiable op and the full loss
    GradCheck {
        /// Corrupt one op's backward rule (test hook)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Dump matches, scores, attention, depth and BEV norms for one scene
    Inspect {
        /// Scene id
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

/// What a command produced: its exit code and the text for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { code: EXIT_OK, stdout }
    }
}

/// Parses `args` (including the program name) and runs the command. Usage
/// and configuration problems map to exit 1, everything else to 2.
pub fn run<I, S>(args: I) -> Outcome
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                return Outcome::ok(text);
            }
            return Outcome { code, stdout: text };
        }
    };
    match dispatch(&cli) {
        Ok(o) => o,
        Err(e) => {
            let usage = e
                .downcast_ref::<Error>()
                .is_some_and(|c| matches!(c, Error::Config { .. }))
                || e.downcast_ref::<UsageError>().is_some();
            Outcome {
                code: if usage { EXIT_USAGE } else { EXIT_RUNTIME },
                stdout: format!("error: {e:#}\n"),
            }
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &cli.global),
        Command::Train { resume } => train(&cfg, &cli.global, resume.as_deref()),
        Command::Eval { split } => eval(&cfg, &cli.global, split),
        Command::GradCheck { inject_fault } => grad_check(inject_fault.as_deref()),
        Command::Inspect { sample } => inspect(&cfg, &cli.global, *sample),
    }
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn load_config(global: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(ckpt) = &global.checkpoint {
        cfg.checkpoint = ckpt.clone();
    }
    if let Some(f) = &global.fov {
        let list = parse_fovs(f)?;
        if let Some(&first) = list.first() {
            cfg.train.fov = first;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `"90, 360"` → `[90.0, 360.0]`; an empty list is a usage error.
pub fn parse_fovs(text: &str) -> anyhow::Result<Vec<f64>> {
    let fovs: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| usage(format!("--fov: cannot parse `{s}`")))
        })
        .collect::<anyhow::Result<_>>()?;
    if fovs.is_empty() {
        return Err(usage("--fov: the FoV list is empty"));
    }
    if let Some(bad) = fovs.iter().find(|f| !(**f > 0.0 && **f <= 360.0)) {
        return Err(usage(format!("--fov: {bad} is outside (0, 360]")));
    }
    Ok(fovs)
}

fn out_dir(global: &Global, fallback: &Path) -> anyhow::Result<PathBuf> {
    let dir = global.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    Dataset::load(&cfg.dataset).with_context(|| format!("loading dataset from {}", cfg.dataset.display()))
}

fn load_model(cfg: &RunConfig, path: &Path) -> anyhow::Result<W2wBev<f32>> {
    let mut model = W2wBev::<f32>::new(&cfg.model, cfg.train.seed)?;
    let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    load_params(&mut model, &ckpt)?;
    Ok(model)
}

pub fn gen_data(cfg: &RunConfig, global: &Global) -> anyhow::Result<Outcome> {
    let dir = out_dir(global, &cfg.dataset)?;
    let data = make_dataset(&cfg.data, &WorldConfig::default())?;
    let manifest = data.save(&dir)?;
    Ok(Outcome::ok(format!("wrote {}\n{manifest}", dir.display())))
}

/// Path of the best-by-validation checkpoint next to `final_path`.
pub fn best_path(final_path: &Path) -> PathBuf {
    let stem = final_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    final_path.with_file_name(format!("{stem}.best.w2wb"))
}

/// Trains on the train split. Every `eval_every` steps (and at the end) the
/// model is scored on the validation split, or on the training split when
/// there is none, and the best one is kept. The loss log goes to
/// `<out>/loss.csv`.
pub fn train(cfg: &RunConfig, global: &Global, resume: Option<&Path>) -> anyhow::Result<Outcome> {
    let data = load_dataset(cfg)?;
    if data.train.is_empty() {
        bail!("dataset {} has no training scenes", cfg.dataset.display());
    }
    let model = W2wBev::<f32>::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::<f32>::load(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            Trainer::resume(model, cfg.train.clone(), &ckpt)?
        }
        None => Trainer::new(model, cfg.train.clone())?,
    };
    let dir = out_dir(global, Path::new("."))?;
    let (val, val_name) = if data.val.is_empty() {
        (&data.train, "train")
    } else {
        (&data.val, "val")
    };
    let mut log = String::from("step,lr,loss\n");
    let mut best: Option<f64> = None;
    let mut notes = String::new();
    let schedule = cfg.train.schedule();
    let final_path = cfg.checkpoint.clone();
    if let Some(parent) = final_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    while trainer.step < cfg.train.steps {
        let step = trainer.step;
        let lr = schedule.lr_at(step);
        let loss = trainer.next(&data.train).context("training step failed")?;
        let _ = writeln!(log, "{step},{lr:.6e},{loss:.6}");
        let done = trainer.step == cfg.train.steps;
        if done || (cfg.eval_every > 0 && trainer.step % cfg.eval_every == 0) {
            let r1 = evaluate(&trainer.model, val, cfg.train.fov, cfg.train.seed)?.r1();
            let _ = writeln!(notes, "step {} {val_name} R@1 {r1:.4}", trainer.step);
            if best.is_none_or(|b| r1 > b) {
                best = Some(r1);
                model_checkpoint(&trainer.model).save(&best_path(&final_path))?;
            }
        }
    }
    let log_path = dir.join("loss.csv");
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    trainer.checkpoint().save(&final_path)?;
    let mut out = notes;
    let _ = writeln!(out, "final checkpoint {}", final_path.display());
    let _ = writeln!(out, "best checkpoint {}", best_path(&final_path).display());
    let _ = writeln!(out, "loss log {}", log_path.display());
    Ok(Outcome::ok(out))
}

/// One report per FoV, all against the same aerial embeddings.
pub fn eval(cfg: &RunConfig, global: &Global, split: &str) -> anyhow::Result<Outcome> {
    let fovs = match &global.fov {
        Some(f) => parse_fovs(f)?,
        None => vec![cfg.train.fov],
    };
    let data = load_dataset(cfg)?;
    let pairs = data
        .split(split)
        .ok_or_else(|| usage(format!("unknown split `{split}`")))?;
    if pairs.is_empty() {
        bail!("split `{split}` of {} is empty", cfg.dataset.display());
    }
    let model = load_model(cfg, &cfg.checkpoint)?;
    let aerial = embed_aerials(&model, pairs)?;
    let dir = global
        .out
        .as_ref()
        .map(|_| out_dir(global, Path::new(".")))
        .transpose()?;
    let mut out = String::new();
    for fov in fovs {
        let report = evaluate_against(&model, pairs, &aerial, fov, cfg.train.seed)?;
        let _ = writeln!(out, "fov {fov} split {split}\n{}", report.to_text());
        if let Some(dir) = &dir {
            let path = dir.join(format!("eval_{split}_fov{fov}.csv"));
            fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(Outcome::ok(out))
}

pub fn grad_check(fault: Option<&str>) -> anyhow::Result<Outcome> {
    let fault: Option<&'static str> = match fault {
        None => None,
        Some(op) => Some(
            w2w_core::verify::OPS
                .iter()
                .copied()
                .find(|o| *o == op)
                .ok_or_else(|| usage(format!("--inject-fault: unknown op `{op}`")))?,
        ),
    };
    let seeds: Vec<u64> = (0..GRAD_SEEDS).collect();
    let suite = gradient_suite(&seeds, fault, 2);
    let code = if suite.passed() { EXIT_OK } else { EXIT_GRAD_CHECK };
    Ok(Outcome {
        code,
        stdout: suite.to_text(),
    })
}

fn find_scene(data: &Dataset, id: usize) -> Option<&RenderedPair> {
    [&data.train, &data.val, &data.test]
        .into_iter()
        .flat_map(|s| s.iter())
        .find(|p| p.scene.id == id)
}

fn write_map(dir: &Path, name: &str, values: &[f64], h: usize, w: usize, index: &mut String) -> anyhow::Result<()> {
    let path = dir.join(format!("{name}.pgm"));
    fs::write(&path, heatmap_pgm(values, h, w)?).with_context(|| format!("writing {}", path.display()))?;
    let _ = writeln!(index, "{name}.pgm {h}x{w}");
    Ok(())
}

fn table(rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Runs one ground query through the model and dumps its internals to
/// `--out`. Heatmaps are min-max normalized per map.
pub fn inspect(cfg: &RunConfig, global: &Global, sample: usize) -> anyhow::Result<Outcome> {
    let data = load_dataset(cfg)?;
    let pair = find_scene(&data, sample).ok_or_else(|| usage(format!("--sample: no scene with id {sample}")))?;
    let model = if cfg.checkpoint.is_file() {
        load_model(cfg, &cfg.checkpoint)?
    } else {
        bail!("checkpoint {} not found", cfg.checkpoint.display());
    };
    let dir = out_dir(global, Path::new("inspect"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (crop, roll) = augment(&pair.pano, cfg.train.fov, &mut rng)?;
    let input = model.prepare_ground(&crop)?;

    let mut g = Graph::<f32>::new();
    let p = model.store.bind_frozen(&mut g);
    let trace = model.ground_forward(&mut g, &p, &input)?;
    let aerial = model.aerial_forward(&mut g, &p, &to_tensor(&pair.aerial))?;
    let dot: f64 = g
        .data(trace.embedding)
        .iter()
        .zip(g.data(aerial))
        .map(|(a, b)| (*a as f64) * (*b as f64))
        .sum();

    let mut index = String::from("# heatmaps are 8-bit P5, min-max normalized per map\n");
    let _ = writeln!(
        index,
        "scene {sample} fov {} roll {roll} similarity {dot:.6}",
        cfg.train.fov
    );

    let mut matches = String::from("# block window level0 level1 level2 level3\n");
    let mut scores = String::new();
    for (b, bt) in trace.blocks.iter().enumerate() {
        for (i, m) in bt.assignment.matches.iter().enumerate() {
            let _ = writeln!(matches, "{b} {i} {} {} {} {}", m[0], m[1], m[2], m[3]);
        }
        for (l, s) in bt.assignment.scores.iter().enumerate() {
            let _ = writeln!(scores, "# block {b} level {l}: rows BEV windows, columns ground strips");
            scores.push_str(&table(s.iter().cloned()));
        }
        for (i, levels) in bt.cross.iter().enumerate() {
            for (l, &node) in levels.iter().enumerate() {
                if let Some((w, [h, lq, lk])) = g.attention_weights(node) {
                    write_map(
                        &dir,
                        &format!("attn_b{b}_w{i}_l{l}"),
                        &head_mean(w, h, lq, lk),
                        lq,
                        lk,
                        &mut index,
                    )?;
                }
            }
        }
        if let Some((w, [h, lq, lk])) = g.attention_weights(bt.self_attn) {
            write_map(
                &dir,
                &format!("self_attn_b{b}"),
                &head_mean(w, h, lq, lk),
                lq,
                lk,
                &mut index,
            )?;
        }
    }
    fs::write(dir.join("matches.txt"), &matches)?;
    fs::write(dir.join("scores.txt"), &scores)?;

    if let Some(depth) = trace.depth {
        let shape = g.shape(depth).to_vec();
        let (h, w, d) = (shape[0], shape[1], shape[2]);
        let probs = g.data(depth);
        // Column-wise marginal over image rows: (D, W), nearest bin on top.
        let mut marginal = vec![0.0; d * w];
        for y in 0..h {
            for x in 0..w {
                for k in 0..d {
                    marginal[k * w + x] += probs[(y * w + x) * d + k] as f64 / h as f64;
                }
            }
        }
        let text = table((0..d).map(|k| marginal[k * w..(k + 1) * w].to_vec()));
        fs::write(
            dir.join("depth_marginal.txt"),
            format!("# rows depth bins, columns image columns\n{text}"),
        )?;
        write_map(&dir, "depth_marginal", &marginal, d, w, &mut index)?;
    }

    let shape = g.shape(trace.bev).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let norms: Vec<f64> = g
        .data(trace.bev)
        .chunks(c)
        .map(|t| t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let text = table((0..h).map(|y| norms[y * w..(y + 1) * w].to_vec()));
    fs::write(
        dir.join("bev_norm.txt"),
        format!("# BEV token L2 norms, {h}x{w}\n{text}"),
    )?;
    write_map(&dir, "bev_norm", &norms, h, w, &mut index)?;
    fs::write(dir.join("index.txt"), &index)?;
    Ok(Outcome::ok(format!("wrote {}\n{index}", dir.display())))
}

fn head_mean(w: &[f32], heads: usize, lq: usize, lk: usize) -> Vec<f64> {
    let mut out = vec![0.0; lq * lk];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&w[h * lq * lk..(h + 1) * lq * lk]) {
            *o += *v as f64 / heads as f64;
        }
    }
    out
}
