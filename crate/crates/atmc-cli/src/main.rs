//! `atmc` command line: train compression pipelines, evaluate checkpoints
//! under attacks, sweep trade-off grids to CSV, and plot the curves.

mod plot;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use atmc_core::attacks::AttackConfig;
use atmc_core::baselines::{budget_from_ratio, run_pipeline, PipelineKind, PipelineSpec};
use atmc_core::harness::{
    self, load_checkpoint, load_mnist, peek_header, save_checkpoint, synth_dataset, write_csv,
    Dataset, MetricsRow, SynthSpec,
};
use atmc_core::model::ArchitectureSpec;
use atmc_core::projections::CompressionConfig;
use atmc_core::tensor::{Dtype, Element};
use atmc_core::trainer::{LrSchedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "atmc",
    about = "Adversarially trained model compression: joint pruning, factorization and quantization under adversarial training",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one pipeline and write a checkpoint plus a metrics row.
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean and attacked test sets.
    Eval(EvalArgs),
    /// Run one pipeline over a k x bits grid and write a metrics CSV.
    Sweep(SweepArgs),
    /// Render accuracy/robustness vs compression-ratio curves from a CSV.
    Plot(PlotArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset: "mnist" (IDX files) or "synth" (deterministic blobs).
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// Directory with the MNIST IDX files; falls back to $ATMC_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Architecture preset: lenet, mlp-small, conv-small.
    #[arg(long, default_value = "lenet")]
    arch: String,
    /// Synthetic training samples per class.
    #[arg(long, default_value_t = 200)]
    synth_train: usize,
    /// Synthetic test samples per class.
    #[arg(long, default_value_t = 40)]
    synth_test: usize,
    /// Seed for synthetic data generation (independent of --seed).
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Clone)]
struct AttackArgs {
    /// Attack family: none, pgd, fgsm, wrm.
    #[arg(long, default_value = "pgd")]
    attack: String,
    /// l-infinity budget on the 0-255 color scale.
    #[arg(long, default_value_t = 76.0)]
    delta: f64,
    /// Attack iterations (pgd/wrm).
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// WRM transport penalty.
    #[arg(long, default_value_t = 1.3)]
    wrm_gamma: f64,
}

#[derive(Args, Clone)]
struct TrainCommon {
    /// Pipeline: nap, da, ap, al0, alr, atmc, atmc-uniform-pq.
    #[arg(long, default_value = "atmc")]
    pipeline: String,
    /// Quantization bit width (codebook size 2^bits per matrix; 32 = off).
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// ADMM penalty.
    #[arg(long, default_value_t = 1e-2)]
    rho: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Base learning rate (x0.1 at 50% and 75% of the epochs).
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refresh the quantization mirror every N steps.
    #[arg(long, default_value_t = 1)]
    mirror_period: usize,
    /// Pruning ratio in (0,1]; mutually exclusive with --k.
    #[arg(long)]
    pruning_ratio: Option<f64>,
    /// Rank fraction in (0,1] for the low-rank pipeline.
    #[arg(long)]
    rank_fraction: Option<f64>,
    /// Fine-tune epoch budget (defaults to half the training epochs).
    #[arg(long)]
    fine_tune_epochs: Option<usize>,
    /// Element precision: f32 or f64.
    #[arg(long, default_value = "f32")]
    precision: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[command(flatten)]
    train: TrainCommon,
    /// Global nonzero budget over all U, V, C ("inf" or a count).
    #[arg(long, default_value = "inf")]
    k: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Zero the wall-time column so output bytes are reproducible.
    #[arg(long, default_value_t = false)]
    stable_output: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Optional metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    stable_output: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[command(flatten)]
    train: TrainCommon,
    /// Comma-separated k values ("inf" allowed).
    #[arg(long, default_value = "inf")]
    k: String,
    /// Comma-separated bit widths.
    #[arg(long, default_value = "8,32")]
    bits_list: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    stable_output: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV produced by train/eval/sweep.
    #[arg(long)]
    csv: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => match args.train.precision.as_str() {
            "f32" => train::<f32>(args),
            "f64" => train::<f64>(args),
            other => bail!("unknown precision {:?} (use f32 or f64)", other),
        },
        Cmd::Eval(args) => eval(args),
        Cmd::Sweep(args) => match args.train.precision.as_str() {
            "f32" => sweep::<f32>(args),
            "f64" => sweep::<f64>(args),
            other => bail!("unknown precision {:?} (use f32 or f64)", other),
        },
        Cmd::Plot(args) => plot::render(&args.csv, &args.out),
    }
}

fn parse_k(s: &str) -> Result<usize> {
    if s == "inf" {
        Ok(usize::MAX)
    } else {
        s.parse::<usize>()
            .map_err(|e| anyhow!("bad k value {:?}: {}", s, e))
    }
}

fn parse_arch(name: &str) -> Result<ArchitectureSpec> {
    ArchitectureSpec::by_name(name)
        .ok_or_else(|| anyhow!("unknown architecture {:?} (lenet, mlp-small, conv-small)", name))
}

fn attack_config(args: &AttackArgs) -> Result<AttackConfig> {
    let delta = harness::normalize_delta(args.delta);
    let cfg = match args.attack.as_str() {
        "none" => AttackConfig::none(),
        "pgd" => AttackConfig::pgd(delta, args.steps),
        "fgsm" => AttackConfig::fgsm(delta),
        "wrm" => AttackConfig::wrm(delta, args.wrm_gamma, args.steps),
        other => bail!("unknown attack {:?} (none, pgd, fgsm, wrm)", other),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset<E: Element>(args: &DataArgs, arch: &ArchitectureSpec) -> Result<Dataset<E>> {
    match args.dataset.as_str() {
        "mnist" => {
            if arch.input != (1, 28, 28) {
                bail!("architecture {:?} does not accept 28x28 MNIST input", arch.name);
            }
            let dir = args
                .data_dir
                .clone()
                .or_else(|| std::env::var_os("ATMC_DATA_DIR").map(PathBuf::from))
                .ok_or_else(|| anyhow!("mnist needs --data-dir or $ATMC_DATA_DIR"))?;
            load_mnist(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))
        }
        "synth" => {
            let side = arch.input.1;
            if arch.input.0 != 1 || arch.input.2 != side {
                bail!("synthetic data needs a single-channel square input");
            }
            let spec = SynthSpec {
                classes: arch.classes,
                side,
                train_per_class: args.synth_train,
                test_per_class: args.synth_test,
                noise: 0.06,
            };
            Ok(synth_dataset(&spec, args.data_seed))
        }
        other => bail!("unknown dataset {:?} (mnist, synth)", other),
    }
}

struct ResolvedTrain {
    arch: ArchitectureSpec,
    spec: PipelineSpec,
    cfg: TrainConfig,
    k: usize,
}

fn resolve_train(
    data: &DataArgs,
    attack: &AttackArgs,
    common: &TrainCommon,
    k_flag: &str,
) -> Result<ResolvedTrain> {
    let arch = parse_arch(&data.arch)?;
    let kind = PipelineKind::parse(&common.pipeline)
        .ok_or_else(|| anyhow!("unknown pipeline {:?}", common.pipeline))?;
    if common.pruning_ratio.is_some() && k_flag != "inf" {
        bail!("--k and --pruning-ratio are mutually exclusive");
    }
    let k = match common.pruning_ratio {
        Some(r) => {
            if !(r > 0.0 && r <= 1.0) {
                bail!("--pruning-ratio must be in (0, 1], got {}", r);
            }
            budget_from_ratio(&arch, r)?
        }
        None => parse_k(k_flag)?,
    };
    if kind == PipelineKind::AtmcUniformPq && common.bits >= 32 {
        bail!("atmc-uniform-pq needs --bits below 32");
    }
    let dense = arch.dense_param_count()?;
    let ratio = if k == usize::MAX {
        1.0
    } else {
        (k as f64 / dense as f64).min(1.0)
    };
    let mut spec = PipelineSpec::new(kind).with_pruning_ratio(ratio.max(f64::MIN_POSITIVE));
    if let Some(f) = common.rank_fraction {
        spec = spec.with_rank_fraction(f);
    }
    spec.fine_tune_epochs = common.fine_tune_epochs;
    spec.validate()?;
    let cfg = TrainConfig {
        epochs: common.epochs,
        batch_size: common.batch,
        lr: LrSchedule::step_decay(common.lr),
        seed: common.seed,
        attack: attack_config(attack)?,
        compression: CompressionConfig {
            k,
            bits: common.bits,
            rho: common.rho,
            ..Default::default()
        },
        mirror_period: common.mirror_period,
        early_stop: None,
    };
    cfg.validate()?;
    Ok(ResolvedTrain { arch, spec, cfg, k })
}

fn print_row(row: &MetricsRow) {
    println!(
        "{} k={} bits={} nnz={} size_bits={} cr={:.6} ta={:.4} ata={:.4} attack={} seed={}",
        row.pipeline,
        if row.k == usize::MAX { "inf".to_string() } else { row.k.to_string() },
        row.bits,
        row.nnz,
        row.size_bits,
        row.compression_ratio,
        row.ta,
        row.ata,
        row.attack,
        row.seed
    );
}

fn train<E: Element>(args: TrainArgs) -> Result<()> {
    let resolved = resolve_train(&args.data, &args.attack, &args.train, &args.k)?;
    let data: Dataset<E> = load_dataset(&args.data, &resolved.arch)?;
    let t0 = Instant::now();
    let out = run_pipeline(&resolved.spec, &resolved.arch, &data, &resolved.cfg)?;
    let wall = t0.elapsed().as_secs_f64();
    save_checkpoint(&out.model, out.bits, &args.out)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let row = harness::measure(
        resolved.spec.kind.name(),
        &out.model,
        out.bits,
        resolved.k,
        &data,
        &resolved.cfg.attack,
        resolved.cfg.seed,
        wall,
    )?;
    print_row(&row);
    if let Some(path) = &args.metrics {
        let dense = harness::dense_size_bits(&resolved.arch)?;
        write_csv(&[row], path, dense, args.stable_output)?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (dtype, bits) = peek_header(&args.checkpoint)?;
    match dtype {
        Dtype::F32 => eval_typed::<f32>(args, bits),
        Dtype::F64 => eval_typed::<f64>(args, bits),
    }
}

fn eval_typed<E: Element>(args: EvalArgs, bits: u8) -> Result<()> {
    let model = load_checkpoint::<E>(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let attack = attack_config(&args.attack)?;
    let data_args = DataArgs {
        arch: model.arch.name.clone(),
        ..args.data.clone()
    };
    let data: Dataset<E> = load_dataset(&data_args, &model.arch)?;
    let t0 = Instant::now();
    let row = harness::measure(
        "eval",
        &model,
        bits,
        usize::MAX,
        &data,
        &attack,
        0,
        0.0,
    )?;
    let mut row = row;
    row.wall_time_s = t0.elapsed().as_secs_f64();
    print_row(&row);
    if let Some(path) = &args.out {
        let dense = harness::dense_size_bits(&model.arch)?;
        write_csv(&[row], path, dense, args.stable_output)?;
    }
    Ok(())
}

fn sweep<E: Element>(args: SweepArgs) -> Result<()> {
    let ks: Vec<usize> = args
        .k
        .split(',')
        .map(parse_k)
        .collect::<Result<Vec<_>>>()?;
    let bits_list: Vec<u8> = args
        .bits_list
        .split(',')
        .map(|s| s.parse::<u8>().map_err(|e| anyhow!("bad bits {:?}: {}", s, e)))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || bits_list.is_empty() {
        bail!("sweep needs at least one k and one bits value");
    }
    let mut rows = Vec::with_capacity(ks.len() * bits_list.len());
    let mut dense = 0u64;
    for &k in &ks {
        for &bits in &bits_list {
            let mut common = args.train.clone();
            common.bits = bits;
            let resolved = resolve_train(
                &args.data,
                &args.attack,
                &common,
                &if k == usize::MAX { "inf".to_string() } else { k.to_string() },
            )?;
            dense = harness::dense_size_bits(&resolved.arch)?;
            let data: Dataset<E> = load_dataset(&args.data, &resolved.arch)?;
            let t0 = Instant::now();
            let out = run_pipeline(&resolved.spec, &resolved.arch, &data, &resolved.cfg)?;
            let wall = t0.elapsed().as_secs_f64();
            let row = harness::measure(
                resolved.spec.kind.name(),
                &out.model,
                out.bits,
                resolved.k,
                &data,
                &resolved.cfg.attack,
                resolved.cfg.seed,
                wall,
            )?;
            print_row(&row);
            rows.push(row);
        }
    }
    write_csv(&rows, &args.out, dense, args.stable_output)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
