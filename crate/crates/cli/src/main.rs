//! `quartf`: generate data, train the three stages, evaluate, ablate,
//! perturb and gradient-check. Machine-readable results go to stdout or
//! files; progress and summaries go to stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quart_core::evalkit::{ablation_matrix, evaluate_masked, write_ablation_csv, AblationRow, ModelPredictor};
use quart_core::perturb::{perturb_dataset, write_records, PerturbationSpec};
use quart_core::pipeline::{
    load_checkpoint_file, objective_grad_check, run_stage, save_checkpoint_file, Checkpoint, JsonlSink, ModalityMask,
    Stage, StageConfig, Start,
};
use quart_core::quart::ContextMode;
use quart_core::streams::{generate_dataset, load_dataset, save_dataset, Dataset, Modality, Scenario};
use quart_core::{Error, Result, Scalar};
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{Layers, Precision, RunConfig, KEYS};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "quartf", version, about = "Query-conditioned multimodal gating: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; see `quartf keys` for accepted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage2.steps=100`; repeatable, applied after the environment
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (same as run.threads)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset directory
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (default: data.n)
        #[arg(long)]
        n: Option<usize>,
        /// Dataset seed (default: data.seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage 1, 2, 3 or all of them in sequence
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// 1, 2, 3 or all
        #[arg(long, default_value = "all")]
        stage: String,
        /// Checkpoint to continue from (same stage resumes, earlier stage starts the next)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training dataset directory (default: data.train, else generated)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints, metrics and the config snapshot
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and write an evaluation report
    Eval {
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Also score perturbed copies: a seed or a JSON perturbation spec file
        #[arg(long)]
        perturb: Option<String>,
        /// Report path (JSON); the report is also printed to stdout
        #[arg(long)]
        report: Option<PathBuf>,
        /// Context mode, gated or raw (default: the checkpoint's)
        #[arg(long)]
        mode: Option<String>,
        /// Kept modalities as letters, e.g. VA; `none` hides every block
        #[arg(long)]
        mask: Option<String>,
        /// Zero hidden blocks without renormalizing the remaining weights
        #[arg(long)]
        no_renormalize: bool,
    },
    /// Train one stage under a grid of settings and write a CSV
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis and values, e.g. `lambda=1,0.1`; repeat for a product grid.
        /// Axes: lambda, reg_sign, context_mode, steps, seed
        #[arg(long, required = true)]
        grid: Vec<String>,
        /// Stage to ablate, 2 or 3
        #[arg(long, default_value = "3")]
        stage: String,
        /// Starting checkpoint (default: train the earlier stages first)
        #[arg(long)]
        base: Option<PathBuf>,
        /// Also score each row on perturbed evaluation data
        #[arg(long)]
        robustness: bool,
        /// CSV output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb a dataset and write it with one record per sample
    Perturb {
        /// Clean dataset directory
        #[arg(long)]
        data: PathBuf,
        /// JSON perturbation spec (default: the standard op sets)
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Perturbation seed (overrides the spec's)
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; records go to perturbations.jsonl inside it
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training objective in f64
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Central-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Samples in the checked batch
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Regularizer weight (default: stage3.lambda, or 0.1 when that is 0)
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Print the resolved configuration as JSON
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List configuration keys and their environment variable names
    Keys,
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut layers = match &args.config {
        Some(p) => Layers::from_file(p)?,
        None => Layers::default(),
    };
    layers.apply_env(std::env::vars())?;
    layers.apply_sets(&args.sets)?;
    if let Some(t) = args.threads {
        layers.values.insert("run.threads".into(), t.to_string());
    }
    layers.resolve()
}

fn emit(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn generate(cfg: &RunConfig, n: usize, seed: u64) -> Result<Dataset> {
    let streams = cfg.model.streams.clone();
    let samples = generate_dataset(seed, n, &Scenario::ALL, &streams)?;
    Ok(Dataset::new(seed, streams, samples))
}

fn manifest_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["dataset.json", "manifest.jsonl"]
        .into_iter()
        .map(String::from)
        .chain(Modality::ALL.iter().map(|m| format!("{m}.qtns")))
    {
        h.update(name.as_bytes());
        h.update(std::fs::read(dir.join(&name))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn train_data(cfg: &RunConfig, flag: Option<&Path>) -> Result<Dataset> {
    match flag.or(cfg.data.train.as_deref()) {
        Some(p) => load_dataset(p),
        None => generate(cfg, cfg.data.n, cfg.data.seed),
    }
}

fn eval_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.eval {
        Some(p) => load_dataset(p),
        None => generate(cfg, cfg.data.eval_n, cfg.data.eval_seed),
    }
}

fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s == "all" {
        Ok(vec![Stage::I, Stage::II, Stage::III])
    } else {
        Ok(vec![s.parse()?])
    }
}

fn cmd_train<T: Scalar>(
    cfg: &RunConfig,
    stage: &str,
    resume: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
) -> Result<serde_json::Value> {
    let stages = parse_stages(stage)?;
    let ds = train_data(cfg, data)?;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut sink = JsonlSink::append(&out.join("metrics.jsonl"))?;
    let mut current: Option<Checkpoint<T>> = resume.map(load_checkpoint_file).transpose()?;
    let mut summary = Vec::new();
    for s in stages {
        let sc = cfg.stage(s);
        let start = match current.take() {
            Some(ck) => Start::From(ck),
            None => Start::Fresh {
                config: cfg.model.clone(),
                seed: cfg.init_seed,
            },
        };
        eprintln!("stage {s}: {} steps, batch {}", sc.steps, sc.batch_size);
        let ck = run_stage(sc, &ds, start, &mut sink)?;
        let path = out.join("checkpoints").join(format!("stage{s}.ckpt"));
        save_checkpoint_file(&path, &ck)?;
        if let Some(m) = &ck.header.last_metrics {
            eprintln!("stage {s}: final loss {:.4}", m.loss_total);
        }
        summary.push(json!({
            "stage": s,
            "checkpoint": path,
            "steps": sc.steps,
            "last_metrics": ck.header.last_metrics,
        }));
        current = Some(ck);
    }
    Ok(json!({ "stages": summary, "dtype": format!("{:?}", T::DTYPE).to_lowercase() }))
}

fn parse_mask(s: &str, renormalize: bool) -> Result<ModalityMask> {
    let mut keep = Vec::new();
    if s != "none" {
        for c in s.chars() {
            let m = Modality::ALL
                .into_iter()
                .find(|m| m.letter() == c.to_ascii_uppercase())
                .ok_or_else(|| Error::config("mask", format!("unknown modality letter `{c}`")))?;
            keep.push(m);
        }
    }
    let mut mask = ModalityMask::only(&keep);
    mask.renormalize = renormalize;
    Ok(mask)
}

fn parse_perturb(s: &str) -> Result<PerturbationSpec> {
    if let Ok(seed) = s.parse::<u64>() {
        return Ok(PerturbationSpec::new(seed));
    }
    let spec: PerturbationSpec = serde_json::from_slice(&std::fs::read(s)?)?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_eval<T: Scalar>(
    ck: &Checkpoint<T>,
    data: &Dataset,
    perturb: Option<&PerturbationSpec>,
    mode: Option<ContextMode>,
    mask: &ModalityMask,
) -> Result<serde_json::Value> {
    let mode = mode.unwrap_or(ck.header.stage_config.context_mode);
    let pred = ModelPredictor::new(&ck.model, mode);
    let report = evaluate_masked(&pred, data, perturb, mask)?;
    eprintln!(
        "accuracy {:.4} on {} samples{}",
        report.accuracy,
        report.samples,
        report
            .robustness
            .as_ref()
            .map(|r| format!(", perturbed {:.4}", r.accuracy))
            .unwrap_or_default()
    );
    Ok(serde_json::to_value(&report)?)
}

/// Loads a checkpoint in whichever precision it was written.
fn with_checkpoint<R>(
    path: &Path,
    f32_fn: impl FnOnce(Checkpoint<f32>) -> Result<R>,
    f64_fn: impl FnOnce(Checkpoint<f64>) -> Result<R>,
) -> Result<R> {
    match load_checkpoint_file::<f32>(path) {
        Ok(ck) => f32_fn(ck),
        Err(Error::Input(_)) => f64_fn(load_checkpoint_file::<f64>(path)?),
        Err(e) => Err(e),
    }
}

fn grid_configs(base: &StageConfig, grid: &[String]) -> Result<Vec<(String, StageConfig)>> {
    let mut out = vec![(String::new(), base.clone())];
    for axis in grid {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::config("grid", format!("expected axis=v1,v2 in `{axis}`")))?;
        let mut next = Vec::new();
        for (label, cfg) in &out {
            for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                let mut c = cfg.clone();
                let bad = || Error::config(format!("grid.{key}"), format!("cannot parse `{v}`"));
                match key {
                    "lambda" => c.lambda = v.parse().map_err(|_| bad())?,
                    "reg_sign" => c.reg_sign = v.parse()?,
                    "context_mode" => c = c.with_mode(v.parse()?),
                    "steps" => c.steps = v.parse().map_err(|_| bad())?,
                    "seed" => c.seed = v.parse().map_err(|_| bad())?,
                    _ => return Err(Error::config(format!("grid.{key}"), "unknown axis")),
                }
                c.validate()?;
                let l = if label.is_empty() { format!("{key}={v}") } else { format!("{label};{key}={v}") };
                next.push((l, c));
            }
        }
        out = next;
    }
    Ok(out)
}

/// Runs rows on up to `threads` workers; each row depends only on its config.
fn run_grid<T: Scalar>(
    base: &Checkpoint<T>,
    configs: &[(String, StageConfig)],
    train: &Dataset,
    eval: &Dataset,
    perturb: Option<&PerturbationSpec>,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let chunk = configs.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<AblationRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .chunks(chunk)
            .map(|c| s.spawn(move || ablation_matrix(base, c, train, eval, perturb)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(configs.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate<T: Scalar>(
    cfg: &RunConfig,
    grid: &[String],
    stage: Stage,
    base: Option<Checkpoint<T>>,
    robustness: bool,
    out: &Path,
) -> Result<serde_json::Value> {
    if stage == Stage::I {
        return Err(Error::config("stage", "ablations run stage 2 or 3"));
    }
    let configs = grid_configs(cfg.stage(stage), grid)?;
    let train = train_data(cfg, None)?;
    let eval = eval_data(cfg)?;
    let base = match base {
        Some(b) => b,
        None => {
            let mut ck = None;
            for s in [Stage::I, Stage::II].into_iter().filter(|&s| s < stage) {
                let start = match ck.take() {
                    Some(c) => Start::From(c),
                    None => Start::Fresh {
                        config: cfg.model.clone(),
                        seed: cfg.init_seed,
                    },
                };
                eprintln!("base: stage {s}");
                ck = Some(run_stage(cfg.stage(s), &train, start, &mut ())?);
            }
            ck.expect("at least one earlier stage")
        }
    };
    eprintln!("ablating stage {stage}: {} runs", configs.len());
    let perturb = robustness.then(|| cfg.perturb.clone());
    let rows = run_grid(&base, &configs, &train, &eval, perturb.as_ref(), cfg.threads())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_ablation_csv(out, &rows)?;
    for r in &rows {
        eprintln!("{:<40} accuracy {:.4}", r.label, r.report.accuracy);
    }
    Ok(json!({
        "csv": out,
        "rows": rows.iter().map(|r| json!({"label": r.label, "accuracy": r.report.accuracy})).collect::<Vec<_>>(),
    }))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData { cfg, out, n, seed } => {
            let rc = resolve(&cfg)?;
            let n = n.unwrap_or(rc.data.n);
            if n == 0 {
                return Err(Error::config("n", "must be positive"));
            }
            let seed = seed.unwrap_or(rc.data.seed);
            let ds = generate(&rc, n, seed)?;
            save_dataset(&out, &ds)?;
            let hash = manifest_hash(&out)?;
            eprintln!("wrote {n} samples to {}", out.display());
            emit(&json!({"out": out, "samples": n, "seed": seed, "sha256": hash}));
        }
        Cmd::Train {
            cfg,
            stage,
            resume,
            data,
            out,
        } => {
            let rc = resolve(&cfg)?;
            let v = match rc.precision {
                Precision::F32 => cmd_train::<f32>(&rc, &stage, resume.as_deref(), data.as_deref(), &out)?,
                Precision::F64 => cmd_train::<f64>(&rc, &stage, resume.as_deref(), data.as_deref(), &out)?,
            };
            emit(&v);
        }
        Cmd::Eval {
            checkpoint,
            data,
            perturb,
            report,
            mode,
            mask,
            no_renormalize,
        } => {
            let ds = load_dataset(&data)?;
            let spec = perturb.as_deref().map(parse_perturb).transpose()?;
            let mode: Option<ContextMode> = mode.as_deref().map(str::parse).transpose()?;
            let mask = match mask {
                Some(m) => parse_mask(&m, !no_renormalize)?,
                None => ModalityMask::default(),
            };
            let v = with_checkpoint(
                &checkpoint,
                |ck| cmd_eval(&ck, &ds, spec.as_ref(), mode, &mask),
                |ck| cmd_eval(&ck, &ds, spec.as_ref(), mode, &mask),
            )?;
            if let Some(p) = report {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(p, serde_json::to_string_pretty(&v)?)?;
            }
            emit(&v);
        }
        Cmd::Ablate {
            cfg,
            grid,
            stage,
            base,
            robustness,
            out,
        } => {
            let rc = resolve(&cfg)?;
            let stage: Stage = stage.parse()?;
            let v = match (rc.precision, base) {
                (Precision::F32, b) => {
                    let b = b.map(|p| load_checkpoint_file::<f32>(&p)).transpose()?;
                    cmd_ablate(&rc, &grid, stage, b, robustness, &out)?
                }
                (Precision::F64, b) => {
                    let b = b.map(|p| load_checkpoint_file::<f64>(&p)).transpose()?;
                    cmd_ablate(&rc, &grid, stage, b, robustness, &out)?
                }
            };
            emit(&v);
        }
        Cmd::Perturb { data, spec, seed, out } => {
            let ds = load_dataset(&data)?;
            let mut spec = match spec {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => PerturbationSpec::new(0),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            let (pd, records) = perturb_dataset(&ds, &spec)?;
            save_dataset(&out, &pd)?;
            write_records(&out.join("perturbations.jsonl"), &records)?;
            let touched = records.iter().filter(|r| r.any_perturbed()).count();
            eprintln!("perturbed {touched} of {} samples", records.len());
            emit(&json!({"out": out, "samples": records.len(), "perturbed": touched, "seed": spec.seed}));
        }
        Cmd::Gradcheck {
            cfg,
            eps,
            samples,
            lambda,
        } => {
            let rc = resolve(&cfg)?;
            if samples == 0 {
                return Err(Error::config("samples", "must be positive"));
            }
            let s3 = rc.stage(Stage::III);
            let lambda = lambda.unwrap_or(if s3.lambda > 0.0 { s3.lambda } else { 0.1 });
            let ds = generate(&rc, samples, rc.data.seed)?;
            let r = objective_grad_check(&rc.model, rc.init_seed, &ds.samples, lambda, s3.reg_sign, eps)?;
            let pass = r.max_rel_err <= GRADCHECK_TOL;
            eprintln!(
                "max relative error {:.3e} over {} coordinates: {}",
                r.max_rel_err,
                r.coords,
                if pass { "ok" } else { "FAILED" }
            );
            emit(&json!({
                "max_rel_err": r.max_rel_err,
                "coords": r.coords,
                "worst": r.worst,
                "tolerance": GRADCHECK_TOL,
                "pass": pass,
            }));
            return Ok(if pass { 0 } else { 1 });
        }
        Cmd::Config { cfg } => emit(&serde_json::to_value(resolve(&cfg)?)?),
        Cmd::Keys => {
            for (k, help) in KEYS {
                println!("{k:<26} {:<34} {help}", config_env(k));
            }
        }
    }
    Ok(0)
}

fn config_env(key: &str) -> String {
    format!("{}{}", config::ENV_PREFIX, key.to_uppercase().replace('.', "_"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Contract(_) => 3,
        _ => 1,
    }
}
