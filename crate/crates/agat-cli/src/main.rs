//! Command-line driver: training runs, robustness evaluation, severity
//! sweeps, augmentation previews, gradient checking, and checkpoint
//! inspection. Every command resolves its configuration, writes a
//! `resolved.cfg` snapshot into its output directory, and never writes
//! outside it.
//!
//! Exit codes: 0 success, 1 training abort or failed assertion/threshold,
//! 2 configuration error, 3 data or checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agat_core::bench::{self, RtsMode};
use agat_core::data::{
    self, load_checkpoint, save_checkpoint, Checkpoint, DatasetKind, Mode, RunConfig,
};
use agat_core::gradcheck;
use agat_core::models::Classifier;
use agat_core::surrogates::{SurrogateId, SurrogateSpec};
use agat_core::trainer;
use agat_core::{AgatError, Rng, Tensor};

#[derive(Parser)]
#[command(name = "agat", version, about = "Attribute-guided adversarial training toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training job (agat, plain, or pgd-augment mode)
    Train(TrainArgs),
    /// Evaluate a checkpoint under clean, geometric, corruption, or
    /// split-protocol conditions
    Eval(EvalArgs),
    /// Accuracy sweep along one geometric axis at increasing severity
    Sweep(SweepArgs),
    /// Export surrogate-perturbed samples plus their attribute manifest
    AugmentPreview(PreviewArgs),
    /// Verify every gradient path against central finite differences
    Gradcheck(GradcheckArgs),
    /// Print the contents of a checkpoint container
    DumpCheckpoint(DumpArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set t_aug=0.5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (relative paths root at $AGAT_OUT_ROOT)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// clean | rts | corruption | shapes-split
    #[arg(long, default_value = "rts")]
    mode: String,
    /// Test-set size for generated datasets
    #[arg(long, default_value_t = 2000)]
    eval_n: usize,
    /// Corruption severity (1..=5)
    #[arg(long, default_value_t = 5)]
    severity: usize,
    /// Baseline report to compare against
    #[arg(long)]
    against: Option<PathBuf>,
    /// Assertions of the form min_gap=10 (requires --against)
    #[arg(long = "assert", value_name = "CHECK=VALUE")]
    asserts: Vec<String>,
    /// Condition the gap assertion applies to (defaults to the headline
    /// condition of the mode)
    #[arg(long)]
    condition: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// R | T | S
    #[arg(long)]
    axis: String,
    /// Comma-separated non-decreasing levels (degrees / pixels / scale
    /// half-range)
    #[arg(long)]
    levels: String,
    #[arg(long, default_value_t = 2000)]
    eval_n: usize,
}

#[derive(Args)]
struct PreviewArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Optional checkpoint; with it the preview runs the adversarial inner
    /// loop, without it attributes are drawn uniformly inside bounds
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of samples to export
    #[arg(long, default_value_t = 16)]
    n: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to checks whose name contains this substring
    #[arg(long)]
    only: Option<String>,
    /// Random draws per primitive
    #[arg(long, default_value_t = 8)]
    repeats: usize,
    #[arg(long, default_value_t = 20260810)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::AugmentPreview(a) => run_preview(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::DumpCheckpoint(a) => run_dump(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                AgatError::Config(_) => 2,
                AgatError::Data(_) | AgatError::Io { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, AgatError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::profile_defaults(data::Profile::Mnist),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AgatError::Config(format!("--set wants KEY=VALUE, got '{}'", kv)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Relative output paths root at $AGAT_OUT_ROOT (default: current dir).
fn resolve_out(args: &ConfigArgs, cfg: &RunConfig) -> PathBuf {
    let dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    if dir.is_absolute() {
        dir
    } else {
        let root = std::env::var_os("AGAT_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        root.join(dir)
    }
}

fn prepare_out(args: &ConfigArgs, cfg: &RunConfig) -> Result<PathBuf, AgatError> {
    let out = resolve_out(args, cfg);
    std::fs::create_dir_all(&out).map_err(|e| AgatError::io(out.display().to_string(), e))?;
    write_file(&out.join("resolved.cfg"), &cfg.resolved())?;
    Ok(out)
}

fn write_file(path: &Path, content: &str) -> Result<(), AgatError> {
    std::fs::write(path, content).map_err(|e| AgatError::io(path.display().to_string(), e))
}

fn model_checkpoint(model: &Classifier, epoch: usize, rng: &Rng, fingerprint: u64) -> Checkpoint {
    Checkpoint {
        tensors: model.named_tensors(),
        epoch: epoch as u64,
        rng_state: rng.state(),
        fingerprint,
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode, AgatError> {
    let cfg = load_config(&args.config)?;
    let out = prepare_out(&args.config, &cfg)?;
    let data = cfg.load_dataset()?;
    let mut model = Classifier::build(cfg.arch, cfg.seed)?;
    let fingerprint = cfg.fingerprint();

    let out_ref = out.clone();
    let n_aug = cfg.n_aug;
    let observer = move |epoch: usize, m: &Classifier, rng: &Rng, _store: &data::LabeledDataset| {
        if epoch % n_aug == 0 {
            let ckpt = model_checkpoint(m, epoch, rng, fingerprint);
            let _ = save_checkpoint(&ckpt, &out_ref.join(format!("ckpt_epoch_{:03}.ckpt", epoch)));
        }
    };

    let log = match cfg.mode {
        Mode::Agat => {
            let spec = SurrogateSpec::from_id(cfg.surrogate);
            trainer::train_agat_with(&mut model, data, &spec, &cfg, observer)?
        }
        mode => trainer::train_baseline_with(&mut model, data, &cfg, mode, observer)?,
    };

    write_file(&out.join("train_log.csv"), &log.to_csv())?;
    write_file(&out.join("train_log.json"), &log.canonical_json())?;
    write_file(
        &out.join("timing.json"),
        &format!("{{\"wall_time_s\": {}}}\n", log.wall_time_s),
    )?;
    let final_rng = Rng::new(cfg.seed);
    save_checkpoint(
        &model_checkpoint(&model, cfg.n_epochs, &final_rng, fingerprint),
        &out.join("ckpt_final.ckpt"),
    )?;
    println!(
        "trained {} epochs ({} mode) -> {}",
        cfg.n_epochs,
        cfg.mode.name(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Classifier, AgatError> {
    let ckpt = load_checkpoint(path)?;
    if let Some(w) = ckpt.fingerprint_warning(cfg.fingerprint()) {
        eprintln!("warning: {}", w);
    }
    let mut model = Classifier::build(cfg.arch, cfg.seed)?;
    model.load_named_tensors(&ckpt.tensors)?;
    Ok(model)
}

/// Evaluation datasets come from a seed stream disjoint from training; for
/// the shapes data the held-out split rule is used.
fn eval_dataset(cfg: &RunConfig, eval_n: usize) -> Result<data::LabeledDataset, AgatError> {
    let mut c = cfg.clone();
    c.max_n = eval_n;
    c.seed = cfg.seed ^ 0xe7a1_0000;
    if c.dataset == DatasetKind::Shapes {
        c.split_rule = bench::complementary_rule(cfg.split_rule);
    }
    c.load_dataset()
}

fn run_eval(args: EvalArgs) -> Result<ExitCode, AgatError> {
    let cfg = load_config(&args.config)?;
    let out = prepare_out(&args.config, &cfg)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let fingerprint = cfg.fingerprint();
    let seed = cfg.seed ^ 0xe7a1_0000;

    let (mut report, default_condition) = match args.mode.as_str() {
        "clean" => {
            let test = eval_dataset(&cfg, args.eval_n)?;
            let r = bench::EvalReport {
                conditions: vec![bench::evaluate_named(&model, &test, "clean")?],
                config_fingerprint: fingerprint,
                seed,
            };
            (r, "clean".to_string())
        }
        "rts" => {
            let test = eval_dataset(&cfg, args.eval_n)?;
            (
                bench::rts_report(&model, &test, seed, fingerprint)?,
                "RTS".to_string(),
            )
        }
        "corruption" => {
            let test = eval_dataset(&cfg, args.eval_n)?;
            (
                bench::corruption_report(&model, &test, args.severity, seed, fingerprint)?,
                "avg".to_string(),
            )
        }
        "shapes-split" => {
            let test_rule = bench::complementary_rule(cfg.split_rule);
            let (r, warning) = bench::shapes_split_eval(
                &model,
                cfg.split_rule,
                test_rule,
                args.eval_n,
                seed,
                fingerprint,
            )?;
            if let Some(w) = warning {
                eprintln!("warning: {}", w);
            }
            (r, test_rule.name().to_string())
        }
        other => {
            return Err(AgatError::Config(format!(
                "unknown eval mode '{}' (clean | rts | corruption | shapes-split)",
                other
            )))
        }
    };

    if args.mode == "corruption" {
        let kinds: Vec<f64> = report
            .conditions
            .iter()
            .filter(|c| c.condition != "clean")
            .map(|c| c.accuracy)
            .collect();
        let n = report
            .conditions
            .iter()
            .find(|c| c.condition != "clean")
            .map(|c| c.n)
            .unwrap_or(0);
        report.conditions.push(bench::ConditionResult {
            condition: "avg".into(),
            accuracy: kinds.iter().sum::<f64>() / kinds.len().max(1) as f64,
            n,
        });
    }

    write_file(&out.join("eval_report.json"), &report.to_json())?;
    write_file(&out.join("eval_report.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());

    if let Some(baseline_path) = &args.against {
        let text = std::fs::read_to_string(baseline_path)
            .map_err(|e| AgatError::io(baseline_path.display().to_string(), e))?;
        let baseline = bench::EvalReport::from_json(&text)?;
        let condition = args.condition.clone().unwrap_or(default_condition);
        for check in &args.asserts {
            let (k, v) = check.split_once('=').ok_or_else(|| {
                AgatError::Config(format!("--assert wants CHECK=VALUE, got '{}'", check))
            })?;
            match k {
                "min_gap" => {
                    let threshold: f64 = v
                        .parse()
                        .map_err(|_| AgatError::Config(format!("min_gap: '{}'", v)))?;
                    let ours = report.accuracy(&condition).ok_or_else(|| {
                        AgatError::Config(format!("condition '{}' not in report", condition))
                    })?;
                    let theirs = baseline.accuracy(&condition).ok_or_else(|| {
                        AgatError::Config(format!(
                            "condition '{}' not in baseline report",
                            condition
                        ))
                    })?;
                    let gap = ours - theirs;
                    println!(
                        "assert min_gap: {} {:.2} - {:.2} = {:.2} (threshold {})",
                        condition, ours, theirs, gap, threshold
                    );
                    if gap < threshold {
                        return Ok(ExitCode::FAILURE);
                    }
                }
                other => {
                    return Err(AgatError::Config(format!("unknown assert '{}'", other)));
                }
            }
        }
    } else if !args.asserts.is_empty() {
        return Err(AgatError::Config("--assert requires --against".into()));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(args: SweepArgs) -> Result<ExitCode, AgatError> {
    let cfg = load_config(&args.config)?;
    let out = prepare_out(&args.config, &cfg)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let axis = RtsMode::parse(&args.axis)?;
    let levels: Result<Vec<f64>, AgatError> = args
        .levels
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| AgatError::Config(format!("bad level '{}'", s)))
        })
        .collect();
    let levels = levels?;
    let test = eval_dataset(&cfg, args.eval_n)?;
    let report = bench::severity_sweep(
        &model,
        &test,
        axis,
        &levels,
        cfg.seed ^ 0xe7a1_0000,
        cfg.fingerprint(),
    )?;
    let csv = bench::sweep_csv(axis, &report);
    write_file(&out.join("sweep.csv"), &csv)?;
    write_file(&out.join("sweep.json"), &report.to_json())?;
    print!("{}", csv);
    Ok(ExitCode::SUCCESS)
}

fn run_preview(args: PreviewArgs) -> Result<ExitCode, AgatError> {
    let mut cfg = load_config(&args.config)?;
    let out = prepare_out(&args.config, &cfg)?;
    let source = cfg.load_dataset()?;
    let spec = SurrogateSpec::from_id(cfg.surrogate);
    let n = args.n.min(source.source_len()).max(1);
    let mut rng = Rng::new(cfg.seed ^ 0x9e10_0001);

    let (images, labels, alpha_init, alpha_final) = match &args.checkpoint {
        Some(path) => {
            let model = load_model(&cfg, path)?;
            cfg.t_aug = (n as f64 / source.source_len() as f64).clamp(1e-9, 1.0);
            let gen = trainer::augment_event(&model, &source, &spec, &cfg, &mut rng)?;
            (gen.images, gen.labels, gen.alpha_init, gen.alpha_final)
        }
        None => {
            let picked = rng.sample_indices(source.source_len(), n);
            let (x, y) = source.batch(&picked);
            let mut alpha = Tensor::zeros(&[n, spec.d_alpha]);
            for i in 0..n {
                for (c, &(lo, hi)) in spec.bounds.iter().enumerate() {
                    alpha.data_mut()[i * spec.d_alpha + c] = rng.range(lo, hi);
                }
            }
            let noise = spec.uses_frozen_noise().then(|| {
                let mut t = Tensor::zeros(x.shape());
                rng.fill_normal(t.data_mut());
                t
            });
            let x_input = if cfg.surrogate == SurrogateId::SoftShapes {
                let mut colors = Tensor::zeros(&[n, 3]);
                for (i, &label) in y.iter().enumerate() {
                    colors.data_mut()[i * 3..i * 3 + 3]
                        .copy_from_slice(&data::COLOR_PALETTE[label % 8]);
                }
                colors
            } else {
                x
            };
            let mut images = spec.apply(&x_input, &alpha, noise.as_ref())?;
            images.clamp_in_place(0.0, 1.0);
            (images, y, alpha.clone(), alpha)
        }
    };

    let ckpt = Checkpoint {
        tensors: vec![("images".into(), images)],
        epoch: 0,
        rng_state: rng.state(),
        fingerprint: cfg.fingerprint(),
    };
    save_checkpoint(&ckpt, &out.join("preview.ckpt"))?;

    let manifest: Vec<serde_json::Value> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let d = spec.d_alpha;
            serde_json::json!({
                "index": i,
                "label": label,
                "alpha_init": alpha_init.data()[i * d..(i + 1) * d],
                "alpha_final": alpha_final.data()[i * d..(i + 1) * d],
            })
        })
        .collect();
    write_file(
        &out.join("preview_manifest.json"),
        &serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    println!("wrote {} preview samples -> {}", labels.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<ExitCode, AgatError> {
    let outcomes = gradcheck::run_suite(args.seed, args.repeats, args.only.as_deref())?;
    if outcomes.is_empty() {
        return Err(AgatError::Config(format!(
            "no checks match filter '{}'",
            args.only.unwrap_or_default()
        )));
    }
    let mut failed = false;
    for o in &outcomes {
        let ok = o.passed(gradcheck::DEFAULT_TOL);
        failed |= !ok;
        println!(
            "{:<32} max_rel_err {:>10.3e}  checks {:>6}  {}",
            o.name,
            o.max_rel_err,
            o.checks,
            if ok { "pass" } else { "FAIL" }
        );
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn run_dump(args: DumpArgs) -> Result<ExitCode, AgatError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    print!("{}", data::dump_checkpoint(&ckpt));
    Ok(ExitCode::SUCCESS)
}
