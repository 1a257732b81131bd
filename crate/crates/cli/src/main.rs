//! `fglm`: train and analyze generalized linear models with feature-grouping
//! stochastic regularization.
//!
//! Exit codes: 0 success, 2 malformed configuration or arguments,
//! 3 numerical abort, 1 other failures.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{experiment_from_config, parse_geometry, FileConfig};
use fglm_core::analysis;
use fglm_core::bank::{build_bank, BankPolicy, ProjectionBank};
use fglm_core::data::{self, LoadOptions, NoiseSpec};
use fglm_core::experiment::{
    aggregate_csv, bench_csv, bench_scaling, curves_csv, results_csv, run_sweep, write_text,
};
use fglm_core::glm::{self, GlmFamily, GlmModel, Optimizer, Regularizer, TrainConfig};
use fglm_core::grouping::{default_k, grid_adjacency, rena_cluster};
use fglm_core::{DenseMatrix, RngState};

#[derive(Parser)]
#[command(
    name = "fglm",
    version,
    about = "Feature-grouping stochastic regularization for GLMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic structured-image dataset.
    Synth(SynthArgs),
    /// Cluster features of a dataset into a partition file.
    Cluster(ClusterArgs),
    /// Build a bank of grouping matrices from training data.
    Bank(BankArgs),
    /// Train a logistic-regression model.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Emit penalty-theory reports for a bank (and optionally a model).
    Analyze(AnalyzeArgs),
    /// Run a regularizer/noise grid across seeds.
    Sweep(SweepArgs),
    /// Measure clustering and training-time scaling in p.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset path (.bin uses the FGRD format, anything else is CSV).
    #[arg(long)]
    data: PathBuf,
    /// Grid geometry like 64x64 (defaults to stored/1-D geometry).
    #[arg(long)]
    geometry: Option<String>,
    /// Standardize features after load.
    #[arg(long)]
    standardize: bool,
}

impl DataArgs {
    fn load(&self) -> Result<data::Dataset> {
        let opts = LoadOptions {
            classes: None,
            geometry: self.geometry.as_deref().map(parse_geometry).transpose()?,
            standardize: self.standardize,
        };
        let ds = if self.data.extension().and_then(|e| e.to_str()) == Some("bin") {
            data::load_bin_with(&self.data, &opts)?
        } else {
            data::load_csv_with(&self.data, &opts)?
        };
        Ok(ds)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    seed: u64,
    /// Optional additive Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Output path (.bin or .csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Cluster count (default: 20% of the feature count).
    #[arg(long)]
    k: Option<usize>,
    /// Cluster on this many randomly drawn samples (default: all).
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output partition file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BankArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k: Option<usize>,
    /// Samples drawn per matrix.
    #[arg(long, default_value_t = 20)]
    r: usize,
    /// Number of matrices in the bank.
    #[arg(long, default_value_t = 100)]
    b: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Held-out dataset for per-epoch accuracy (defaults to training data).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Regularizer: none | l2 | dropout | grouping | grouping+l2.
    #[arg(long, default_value = "none")]
    reg: String,
    /// l2 penalty strength.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Dropout probability.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Bank directory (required for grouping regularizers).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Bank sampling cadence: per-minibatch | per-epoch.
    #[arg(long, default_value = "per-minibatch")]
    policy: String,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    minibatch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Optimizer: adam | sgd.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Model family: logistic | gaussian.
    #[arg(long, default_value = "logistic")]
    family: String,
    #[arg(long)]
    seed: u64,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "logistic")]
    family: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Bank directory to analyze.
    #[arg(long)]
    bank: PathBuf,
    /// Output directory (omega.csv, delta.csv, report.json, taylor.json).
    #[arg(long)]
    out: PathBuf,
    /// Dataset for the penalty report (binary labels).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<String>,
    /// Model whose weight row supplies beta.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Weight row to use as beta.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Text file with one beta entry per line (alternative to --model).
    #[arg(long)]
    beta_file: Option<PathBuf>,
    #[arg(long, default_value = "logistic")]
    family: String,
    /// Also emit the Taylor-expansion comparison.
    #[arg(long)]
    taylor: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Flat key-value config file.
    #[arg(long)]
    config: PathBuf,
    /// Seeds, comma separated (required for reproducibility).
    #[arg(long, required = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory (results.csv, curves.csv, aggregate.csv).
    #[arg(long)]
    out: PathBuf,
    /// Override config values, repeatable: --set key=value.
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Feature counts to measure, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096])]
    p_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<fglm_core::Error>() {
        Some(fglm_core::Error::Numerical(_)) => 3,
        Some(
            fglm_core::Error::Parse { .. }
            | fglm_core::Error::InvalidArgument(_)
            | fglm_core::Error::DimensionMismatch(_),
        ) => 2,
        Some(fglm_core::Error::Io { .. }) => 1,
        // Config/argument problems raised by the CLI layer itself.
        None => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Bank(args) => cmd_bank(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn save_dataset(ds: &data::Dataset, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        data::save_bin(ds, path)?;
    } else {
        data::save_csv(ds, path)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut rng = RngState::new(args.seed);
    let ds = data::synth_faces(
        args.classes,
        args.per_class,
        (args.height, args.width),
        &mut rng,
    )?;
    let ds = if args.sigma > 0.0 {
        data::add_noise(
            &ds,
            &NoiseSpec {
                sigma: args.sigma,
                seed: rng.derive(1).seed(),
            },
        )?
    } else {
        ds
    };
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} samples, p={}, {} classes to {}",
        ds.n(),
        ds.p(),
        ds.classes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let ds = args.data.load()?;
    let graph = grid_adjacency(ds.geometry())?;
    let k = args.k.unwrap_or_else(|| default_k(ds.p()));
    let mut rng = RngState::new(args.seed);
    let samples: DenseMatrix = match args.r {
        None => ds.x().clone(),
        Some(r) => {
            if r == 0 || r > ds.n() {
                bail!(fglm_core::Error::InvalidArgument(format!(
                    "r={r} out of range [1, {}]",
                    ds.n()
                )));
            }
            let picked = rng.sample_indices(ds.n(), r);
            let mut sub = DenseMatrix::zeros(r, ds.p());
            for (row, &i) in picked.iter().enumerate() {
                sub.row_mut(row).copy_from_slice(ds.sample(i));
            }
            sub
        }
    };
    let part = rena_cluster(&samples, &graph, k, &rng)?;
    part.save(&args.out)?;
    println!(
        "wrote partition with k={} over p={} to {}",
        part.k(),
        part.p(),
        args.out.display()
    );
    Ok(())
}

fn cmd_bank(args: BankArgs) -> Result<()> {
    let ds = args.data.load()?;
    let graph = grid_adjacency(ds.geometry())?;
    let k = args.k.unwrap_or_else(|| default_k(ds.p()));
    let bank = build_bank(&ds, &graph, k, args.r, args.b, &RngState::new(args.seed))?;
    bank.save_dir(&args.out)?;
    println!(
        "wrote bank of b={} matrices (k={}, r={}) to {}",
        bank.len(),
        bank.k(),
        bank.r(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = args.data.load()?;
    let test = match &args.test {
        Some(path) => Some(
            DataArgs {
                data: path.clone(),
                geometry: args.data.geometry.clone(),
                standardize: args.data.standardize,
            }
            .load()?,
        ),
        None => None,
    };
    let regularizer = match args.reg.as_str() {
        "none" => Regularizer::None,
        "l2" => Regularizer::L2 {
            lambda: args.lambda,
        },
        "dropout" => Regularizer::Dropout { delta: args.delta },
        "grouping" | "grouping+l2" => {
            let dir = args
                .bank
                .as_ref()
                .ok_or_else(|| anyhow!("--bank DIR is required for grouping regularizers"))?;
            let bank = Arc::new(ProjectionBank::load_dir(dir)?);
            let lambda = if args.reg == "grouping+l2" {
                args.lambda
            } else {
                0.0
            };
            Regularizer::Grouping {
                bank,
                policy: BankPolicy::parse(&args.policy)?,
                lambda,
            }
        }
        other => bail!("unknown regularizer {other:?}"),
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        minibatch: args.minibatch,
        learning_rate: args.lr,
        optimizer: Optimizer::parse(&args.optimizer)?,
        regularizer,
        seed: args.seed,
        eval_every: 1,
    };
    let family = GlmFamily::parse(&args.family)?;
    let model = GlmModel::zeros(ds.classes(), ds.p(), family);
    let (model, metrics) = glm::train(model, &ds, test.as_ref(), &cfg)?;
    model.save(&args.out)?;
    if let Some(metrics_path) = &args.metrics {
        write_text(metrics_path, &metrics.to_csv())?;
    }
    println!(
        "final train loss {} | accuracy {} | model {}",
        metrics.final_loss(),
        metrics.final_accuracy(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ds = args.data.load()?;
    let model = GlmModel::load(&args.model, GlmFamily::parse(&args.family)?)?;
    let accuracy = glm::evaluate(&model, &ds)?;
    println!("{accuracy}");
    Ok(())
}

fn read_beta(args: &AnalyzeArgs, p: usize) -> Result<Option<Vec<f64>>> {
    if let Some(path) = &args.beta_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let beta: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| anyhow!("bad beta entry {l:?}"))
            })
            .collect::<Result<_, _>>()?;
        return Ok(Some(beta));
    }
    if let Some(path) = &args.model {
        let model = GlmModel::load(path, GlmFamily::parse(&args.family)?)?;
        if args.row >= model.outputs() {
            bail!(
                "--row {} out of range for model with {} outputs",
                args.row,
                model.outputs()
            );
        }
        if model.p() != p {
            bail!(fglm_core::Error::DimensionMismatch(format!(
                "model has p={}, bank has p={p}",
                model.p()
            )));
        }
        return Ok(Some(model.weights().row(args.row).to_vec()));
    }
    Ok(None)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let bank = ProjectionBank::load_dir(&args.bank)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let family = GlmFamily::parse(&args.family)?;

    if bank.p() <= 64 {
        let omega = analysis::estimate_omega(&bank)?;
        write_text(
            &args.out.join("omega.csv"),
            &analysis::matrix_csv(omega.matrix())?,
        )?;
        let second = analysis::delta_second_moment(&bank)?;
        write_text(&args.out.join("delta.csv"), &analysis::matrix_csv(&second)?)?;
        println!("wrote omega.csv and delta.csv (p={} <= 64)", bank.p());
    } else {
        println!("p={} > 64: skipping dense moment dumps", bank.p());
    }

    let beta = read_beta(&args, bank.p())?;
    if let (Some(beta), Some(data_path)) = (&beta, &args.data) {
        let ds = DataArgs {
            data: data_path.clone(),
            geometry: args.geometry.clone(),
            standardize: false,
        }
        .load()?;
        let report = analysis::penalty(beta, &ds, &bank, family)?;
        write_text(&args.out.join("report.json"), &report.to_json())?;
        println!(
            "penalty report: smoothed_loss={} penalty={}",
            report.smoothed_loss, report.penalty
        );
        if args.taylor {
            let taylor = analysis::taylor_check(beta, &ds, &bank, family)?;
            write_text(
                &args.out.join("taylor.json"),
                &serde_json_string(taylor.lhs, taylor.rhs, taylor.gap),
            )?;
            println!(
                "taylor check: lhs={} rhs={} gap={}",
                taylor.lhs, taylor.rhs, taylor.gap
            );
        }
    } else if args.data.is_some() || beta.is_some() {
        bail!("penalty report needs both --data and a beta source (--model or --beta-file)");
    }
    Ok(())
}

fn serde_json_string(lhs: f64, rhs: f64, gap: f64) -> String {
    format!("{{\n  \"lhs\": {lhs},\n  \"rhs\": {rhs},\n  \"gap\": {gap}\n}}\n")
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut file_cfg = FileConfig::load(&args.config)?;
    file_cfg.apply_overrides(&args.sets)?;
    let cfg = experiment_from_config(&file_cfg, args.seeds.clone())?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let rows = run_sweep(&cfg)?;
    write_text(&args.out.join("results.csv"), &results_csv(&rows))?;
    write_text(&args.out.join("curves.csv"), &curves_csv(&rows))?;
    write_text(&args.out.join("aggregate.csv"), &aggregate_csv(&rows))?;
    println!("wrote {} result rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let rows = bench_scaling(&args.p_list, args.repeats, args.seed)?;
    write_text(&args.out, &bench_csv(&rows))?;
    println!("wrote {} timing rows to {}", rows.len(), args.out.display());
    Ok(())
}
