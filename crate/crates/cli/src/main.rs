use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rvos::config::{Config, Preset};
use rvos::data::{generate, parse_query, Clip, SynthSpec};
use rvos::gradcheck::{suite, GradReport, PathDims};
use rvos::hungarian::{hungarian, CostMatrix};
use rvos::io::{self, Checkpoint};
use rvos::metrics::{evaluate, iou, MetricsReport, Sample};
use rvos::model::Model;
use rvos::train::{StepLog, Trainer};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "rvos", version, about = "Referring video object segmentation on synthetic clips")]
struct Cli {
    /// TOML config; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.clips` from the config.
        #[arg(long)]
        count: Option<usize>,
        /// Index of the first clip; clips are addressed by (seed, index).
        #[arg(long, default_value_t = 0)]
        first: usize,
    },
    /// Train from scratch, or resume from --checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment the referred object in a directory of PPM frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick end-to-end check at toy size.
    Selftest,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = || -> Result<Config> {
        let mut cfg = match &cli.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::preset(cli.preset),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    };
    match &cli.command {
        Command::GenData { out, count, first } => gen_data(&cfg()?, out, *count, *first),
        Command::Train {
            out,
            data,
            checkpoint,
            epochs,
        } => train(cfg, out, data.as_deref(), checkpoint.as_deref(), *epochs),
        Command::Infer {
            checkpoint,
            frames,
            query,
            out,
        } => infer(checkpoint, frames, query, out),
        Command::Eval { checkpoint, data, out } => eval(checkpoint, data, out),
        Command::Gradcheck { seeds, out } => gradcheck(cli.seed.unwrap_or(0), *seeds, out.as_deref()),
        Command::Selftest => selftest(cli.seed.unwrap_or(0)),
    }
}

fn gen_data(cfg: &Config, out: &Path, count: Option<usize>, first: usize) -> Result<()> {
    let count = count.unwrap_or(cfg.data.clips);
    let clips = generate(&SynthSpec::from_config(cfg), cfg.seed, first, count)?;
    io::save_dataset(out, &clips)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {count} clips to {}", out.display());
    Ok(())
}

fn load_resized(dir: &Path, cfg: &Config) -> Result<Vec<Clip>> {
    let clips = io::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    ensure!(!clips.is_empty(), "dataset {} is empty", dir.display());
    clips
        .iter()
        .map(|c| Ok(io::resize_clip(c, cfg.model.height, cfg.model.width)?))
        .collect()
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    steps: usize,
    mask: f64,
    reference: f64,
    diversity: f64,
    total: f64,
    grad_norm: f64,
    seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, logs: &[StepLog], seconds: f64) -> Self {
        let n = logs.len().max(1) as f64;
        let mean = |f: fn(&StepLog) -> f64| logs.iter().map(f).sum::<f64>() / n;
        EpochRecord {
            epoch,
            steps: logs.len(),
            mask: mean(|l| l.losses.mask),
            reference: mean(|l| l.losses.reference),
            diversity: mean(|l| l.losses.diversity),
            total: mean(|l| l.losses.total),
            grad_norm: mean(|l| l.grad_norm),
            seconds,
        }
    }
}

fn append(path: &Path, header: Option<&str>) -> Result<File> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if let (true, Some(h)) = (fresh, header) {
        writeln!(f, "{h}")?;
    }
    Ok(f)
}

fn train(
    cfg: impl Fn() -> Result<Config>,
    out: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut tr = match checkpoint {
        Some(p) => Checkpoint::load(p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?
            .into_trainer()?,
        None => Trainer::new(&cfg()?)?,
    };
    if let Some(e) = epochs {
        tr.cfg.optim.epochs = e;
    }
    let clips = match data {
        Some(d) => load_resized(d, &tr.cfg)?,
        None => generate(&SynthSpec::from_config(&tr.cfg), tr.cfg.seed, 0, tr.cfg.data.clips)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), tr.cfg.to_toml())?;
    let mut steps = append(&out.join("losses.tsv"), Some("step\tmask\tref\tdiv\ttotal"))?;
    let mut per_epoch = append(&out.join("epochs.jsonl"), None)?;
    let ckpt_dir = out.join("checkpoint");
    eprintln!(
        "training {} parameters on {} clips, epochs {}..{}",
        tr.model.parameter_count(),
        clips.len(),
        tr.epoch,
        tr.cfg.optim.epochs
    );
    while tr.epoch < tr.cfg.optim.epochs {
        let t0 = Instant::now();
        let mut err = Ok(());
        let logs = tr.epoch(&clips, |l| {
            if err.is_ok() {
                err = writeln!(steps, "{}", l.line());
            }
        })?;
        err?;
        let rec = EpochRecord::new(tr.epoch, &logs, t0.elapsed().as_secs_f64());
        writeln!(per_epoch, "{}", serde_json::to_string(&rec)?)?;
        Checkpoint::from_trainer(&tr).save(&ckpt_dir)?;
        eprintln!(
            "epoch {:>4}  total {:.4}  mask {:.4}  ref {:.4}  div {:.4}  {:.1}s",
            rec.epoch, rec.total, rec.mask, rec.reference, rec.diversity, rec.seconds
        );
    }
    Checkpoint::from_trainer(&tr).save(&ckpt_dir)?;
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model())
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    query: &'a str,
    candidate: usize,
    confidence: f64,
    scores: &'a [f64],
    frames: usize,
    height: usize,
    width: usize,
}

fn infer(checkpoint: &Path, frames_dir: &Path, query: &str, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let frames = io::load_frames(frames_dir)?;
    let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let input = io::resize_frames(&frames, model.cfg.height, model.cfg.width)?;
    let r = model.infer(&input, query)?;
    let masks: Vec<_> = r.masks.iter().map(|m| io::resize_mask(m, h, w)).collect();
    fs::create_dir_all(out)?;
    io::save_masks(&out.join("masks.json"), &masks)?;
    let pred = PredictionFile {
        query,
        candidate: r.candidate,
        confidence: r.confidence,
        scores: &r.scores,
        frames: t,
        height: h,
        width: w,
    };
    fs::write(out.join("prediction.json"), serde_json::to_string_pretty(&pred)? + "\n")?;
    println!("candidate {} confidence {:.4}", r.candidate, r.confidence);
    Ok(())
}

fn eval_clips(model: &Model, clips: &[Clip]) -> Result<(MetricsReport, Vec<String>)> {
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    for c in clips {
        let r = model.infer(&c.frames, &c.query)?;
        let gt = c.target_masks();
        let mut ious = Vec::new();
        for (pred, gt) in r.masks.into_iter().zip(gt) {
            ious.push(iou(&pred, &gt)?);
            samples.push(Sample {
                pred,
                gt,
                confidence: r.confidence,
            });
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        rows.push(format!("{}\t{}\t{:.6}\t{:.6}", c.id, r.candidate, r.confidence, mean));
    }
    Ok((evaluate(&samples)?, rows))
}

fn eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let cfg = Config {
        model: model.cfg.clone(),
        ..Config::desk()
    };
    let clips = load_resized(data, &cfg)?;
    let (report, rows) = eval_clips(&model, &clips)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut per_clip = File::create(out.join("per_clip.tsv"))?;
    writeln!(per_clip, "clip\tcandidate\tconfidence\tmean_iou")?;
    for r in rows {
        writeln!(per_clip, "{r}")?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(first: u64, seeds: u64, out: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let mut worst: Vec<GradReport> = Vec::new();
    for seed in first..first + seeds {
        for r in suite(seed, PathDims::default())? {
            match worst.iter_mut().find(|w| w.op == r.op) {
                Some(w) if w.max_rel_error < r.max_rel_error => *w = r,
                Some(_) => {}
                None => worst.push(r),
            }
        }
    }
    let mut table = String::from("op\tmax_rel_error\tchecked\n");
    for r in &worst {
        table += &format!("{}\t{:.3e}\t{}\n", r.op, r.max_rel_error, r.checked);
    }
    print!("{table}");
    let max = worst.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max {max:.3e} over {seeds} seeds in {:.1}s", t0.elapsed().as_secs_f64());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.tsv"), &table)?;
    }
    if max > GRAD_TOLERANCE {
        bail!("relative error {max:.3e} exceeds {GRAD_TOLERANCE:e}");
    }
    Ok(())
}

fn brute_force(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64) -> f64 {
        if row == cost.rows {
            return acc;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.cols {
            if !used[c] {
                used[c] = true;
                best = best.min(go(cost, row + 1, used, acc + cost.at(row, c)));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.cols], 0.0)
}

fn toy_config(seed: u64) -> Config {
    let mut cfg = Config::desk();
    cfg.seed = seed;
    cfg.model.height = 32;
    cfg.model.width = 32;
    cfg.model.candidates = 4;
    cfg.data.min_size = 7;
    cfg.data.max_size = 10;
    cfg.optim.warmup_steps = 0;
    cfg
}

fn selftest(seed: u64) -> Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: Result<bool>| {
        let ok = ok.unwrap_or_else(|e| {
            eprintln!("{name}: {e:#}");
            false
        });
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
        failures += usize::from(!ok);
    };
    let cfg = toy_config(seed);
    let spec = SynthSpec::from_config(&cfg);

    check("synthetic data is reproducible and queries parse", (|| {
        let a = generate(&spec, seed, 0, 4)?;
        let b = generate(&spec, seed, 0, 4)?;
        Ok(a == b && a.iter().all(|c| parse_query(&c.query) == Some(c.objects[c.target].attributes)))
    })());

    check("assignment matches exhaustive search", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let k = rng.random_range(1..=6);
            let n = rng.random_range(1..=k);
            let cost = CostMatrix::from_fn(n, k, |_, _| rng.random_range(0..20) as f64 / 4.0);
            if hungarian(&cost)?.cost != brute_force(&cost) {
                return Ok(false);
            }
        }
        Ok(true)
    })());

    check("gradients match finite differences", (|| {
        let dims = PathDims {
            height: 16,
            width: 16,
            candidates: 3,
            d_model: 16,
            ..PathDims::default()
        };
        Ok(suite(seed, dims)?.iter().all(|r| r.passes(GRAD_TOLERANCE)))
    })());

    check("training lowers the loss and checkpoints round-trip", (|| {
        let clips = generate(&spec, seed, 0, 2)?;
        let mut tr = Trainer::new(&cfg)?;
        tr.augment = false;
        let before = tr.eval_loss(&clips[0])?.total + tr.eval_loss(&clips[1])?.total;
        for _ in 0..30 {
            tr.step(&clips)?;
        }
        let after = tr.eval_loss(&clips[0])?.total + tr.eval_loss(&clips[1])?.total;
        let dir = std::env::temp_dir().join(format!("rvos-selftest-{}", std::process::id()));
        Checkpoint::from_trainer(&tr).save(&dir)?;
        let loaded = Checkpoint::load(&dir)?.model();
        fs::remove_dir_all(&dir)?;
        let same = loaded.infer(&clips[0].frames, &clips[0].query)? == tr.model.infer(&clips[0].frames, &clips[0].query)?;
        let (report, _) = eval_clips(&loaded, &clips)?;
        let bounded = [report.overall_iou, report.mean_iou, report.map, report.j, report.f, report.jf]
            .iter()
            .chain(&report.precision)
            .all(|v| (0.0..=1.0).contains(v));
        Ok(after < before && same && bounded)
    })());

    if failures > 0 {
        bail!("{failures} self-test check(s) failed");
    }
    Ok(())
}
