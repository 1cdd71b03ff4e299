use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vqa_core::data::{generate_dataset, load_dataset, Dataset, GeneratorSpec};
use vqa_core::harness::checkpoint;
use vqa_core::harness::eval::{evaluate, format_table, relabel};
use vqa_core::harness::experiments::{ablate, format_rows, format_sweep, sweep, SWEEP_VALUES};
use vqa_core::harness::flops::count_params_flops;
use vqa_core::harness::gradcam::{gradcam, write_overlay, Target};
use vqa_core::harness::gradsuite::{format_suite, run_suite};
use vqa_core::harness::train::{fit_config, train, TrainOptions};
use vqa_core::par::ExecMode;
use vqa_core::{Error, Result, TrainConfig};

#[derive(Parser)]
#[command(
    name = "vqa",
    version,
    about = "Synthetic visual question answering: data, training and analysis"
)]
struct Cli {
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train the six component ablation rows.
    Ablate(ExperimentArgs),
    /// Train the loss-weight sweep.
    Sweep(ExperimentArgs),
    /// Grad-CAM map and overlay for one sample.
    Saliency(SaliencyArgs),
    /// Parameter, FLOP and memory counts.
    Flops(FlopsArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    open_fraction: Option<f64>,
    /// Add "is there a {shape} in the {position}" yes/no questions.
    #[arg(long)]
    positional_closed: bool,
}

/// Training configuration: preset, then `--config` file, then flags, then
/// `--set` overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// `toy` or `paper`.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// File of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    qqformer: Option<bool>,
    #[arg(long)]
    cmcl: Option<bool>,
    #[arg(long)]
    cmm: Option<bool>,
    #[arg(long)]
    ahead: Option<bool>,
    /// Any configuration key, e.g. `--set d_state=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        let flags: [(&str, Option<String>); 12] = [
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("patch", self.patch.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("qqformer", self.qqformer.map(|v| v.to_string())),
            ("cmcl", self.cmcl.map(|v| v.to_string())),
            ("cmm", self.cmm.map(|v| v.to_string())),
            ("ahead", self.ahead.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Class id or `predicted`.
    #[arg(long, default_value = "predicted")]
    target: String,
    /// Overlay image path.
    #[arg(long, default_value = "saliency.ppm")]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path)
}

fn run(cli: Cli) -> Result<()> {
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::GenData(a) => {
            let d = GeneratorSpec::default();
            let spec = GeneratorSpec {
                image_size: a.image_size.unwrap_or(d.image_size),
                train: a.train.unwrap_or(d.train),
                val: a.val.unwrap_or(d.val),
                test: a.test.unwrap_or(d.test),
                open_fraction: a.open_fraction.unwrap_or(d.open_fraction),
                positional_closed: a.positional_closed,
                ..d
            };
            for m in generate_dataset(&spec, a.seed, &a.out)? {
                println!("{}", m.to_text());
            }
        }
        Command::Train(a) => {
            let data = load(&a.data)?;
            let cfg = a.config.build(Some(a.seed))?;
            let opts = TrainOptions {
                checkpoint: Some(a.out.clone()),
                eval_mode: mode,
                skip_validation: false,
            };
            let out = train(&cfg, &data, &opts)?;
            for e in &out.report.epochs {
                let m = &e.mean;
                println!(
                    "epoch={} total={:.6} cls={:.6} vtc={:.6} aux={:.6} val_overall={:.4}",
                    e.epoch,
                    m.total,
                    m.l_cls,
                    m.l_vtc,
                    m.l_aux,
                    e.val.acc_overall()
                );
            }
            let test = evaluate(&out.model, &data.test.samples, &data.vocab, mode)?;
            println!("best_epoch={}", out.report.best_epoch);
            println!("checkpoint={}", a.out.display());
            print!("{}", format_table(&[("test".into(), &test)]));
            print!("{}", test.to_kv());
        }
        Command::Eval(a) => {
            let data = load(&a.data)?;
            let saved = checkpoint::load(&a.checkpoint)?.config;
            let ck = checkpoint::load_for(&a.checkpoint, &fit_config(&saved, &data).model)?;
            let samples = relabel(&data.split(&a.split)?.samples, &ck.answers);
            let m = evaluate(&ck.model, &samples, &data.vocab, mode)?;
            print!("{}", format_table(&[(a.split.clone(), &m)]));
        }
        Command::Ablate(a) => {
            let data = load(&a.data)?;
            let cfg = a.config.build(Some(a.seed))?;
            print!("{}", format_rows(&ablate(&cfg, &data, mode)?));
        }
        Command::Sweep(a) => {
            let data = load(&a.data)?;
            let cfg = a.config.build(Some(a.seed))?;
            print!("{}", format_sweep(&sweep(&cfg, &data, &SWEEP_VALUES, mode)?));
        }
        Command::Saliency(a) => {
            let data = load(&a.data)?;
            let ck = checkpoint::load(&a.checkpoint)?;
            let split = data.split(&a.split)?;
            let sample = split.samples.get(a.sample).ok_or_else(|| {
                Error::Contract(format!(
                    "sample {} out of range ({} samples)",
                    a.sample,
                    split.samples.len()
                ))
            })?;
            let target = match a.target.as_str() {
                "predicted" => Target::Predicted,
                c => Target::Class(
                    c.parse()
                        .map_err(|_| Error::Contract(format!("target must be a class id or 'predicted', got {c:?}")))?,
                ),
            };
            let map = gradcam(&ck.model, sample, &data.vocab, target)?;
            write_overlay(&a.out, &sample.image, &map)?;
            print!("{}", map.to_kv());
            println!("overlay={}", a.out.display());
        }
        Command::Flops(a) => {
            let cfg = a.config.build(None)?;
            print!("{}", count_params_flops(&cfg.model)?.to_kv());
        }
        Command::Gradcheck(a) => {
            let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
            let rows = run_suite(&seeds, mode)?;
            print!("{}", format_suite(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.passes()) {
                return Err(Error::Contract(format!(
                    "{} exceeds tolerance: {:e} at seed {}",
                    bad.name, bad.max_rel_err, bad.worst_seed
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
