//! Experiment orchestration: regularizer grids, noise sweeps, multi-seed
//! aggregation, and scaling benchmarks.
//!
//! A sweep expands into independent cells (one per regularizer variant,
//! noise level, and seed). Cells run in parallel; every stochastic stage
//! (noise, split, bank, training) draws from a stream derived from the cell
//! seed, so re-running a sweep reproduces everything except wall-clock
//! fields.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::bank::{build_bank, BankPolicy};
use crate::data::{self, Dataset, LoadOptions, NoiseSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::glm::{
    evaluate, train, EpochMetrics, GlmFamily, GlmModel, Optimizer, Regularizer, TrainConfig,
};
use crate::grouping::{default_k, grid_adjacency, rena_cluster};
use crate::linalg::DenseMatrix;
use crate::rng::RngState;

const NOISE_TAG: u64 = 0xA1;
const SPLIT_TAG: u64 = 0xA2;
const BANK_TAG: u64 = 0xA3;

/// Synthetic-faces generation parameters. The seed fixes the dataset
/// identity; per-cell randomness (noise, split, training) comes from the
/// sweep seeds instead.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum DataSource {
    File(PathBuf),
    Synth(SynthSpec),
}

/// Grouping hyperparameters for one sweep variant.
#[derive(Clone, Debug)]
pub struct GroupingSpec {
    /// Cluster count; `None` means 20% of p.
    pub k: Option<usize>,
    pub r: usize,
    pub b: usize,
    pub policy: BankPolicy,
    /// l2 strength on the full-space weights; 0 for plain grouping.
    pub lambda: f64,
}

impl Default for GroupingSpec {
    fn default() -> Self {
        GroupingSpec {
            k: None,
            r: 20,
            b: 100,
            policy: BankPolicy::PerMinibatch,
            lambda: 0.0,
        }
    }
}

/// One regularizer family with its hyperparameter grid.
#[derive(Clone, Debug)]
pub enum MethodGrid {
    None,
    L2 { lambdas: Vec<f64> },
    Dropout { deltas: Vec<f64> },
    Grouping { variants: Vec<GroupingSpec> },
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub geometry: Option<Vec<usize>>,
    pub standardize: bool,
    pub sigmas: Vec<f64>,
    pub test_fraction: f64,
    pub methods: Vec<MethodGrid>,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep needs at least one sigma, one seed, and one method".into(),
            ));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("seeds must be unique".into()));
        }
        Ok(())
    }
}

/// Concrete regularizer settings for one cell.
#[derive(Clone, Debug)]
enum CellReg {
    None,
    L2(f64),
    Dropout(f64),
    Grouping(GroupingSpec),
}

#[derive(Clone, Debug)]
struct CellSpec {
    regularizer: String,
    params: String,
    sigma: f64,
    seed: u64,
    reg: CellReg,
}

/// Result of one cell: the per-epoch curve plus final summary values.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub regularizer: String,
    pub params: String,
    pub sigma: f64,
    pub seed: u64,
    pub curve: Vec<EpochMetrics>,
    pub final_acc: f64,
    pub seconds: f64,
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

fn expand_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for &sigma in &cfg.sigmas {
        for method in &cfg.methods {
            let variants: Vec<(String, String, CellReg)> = match method {
                MethodGrid::None => {
                    vec![("none".into(), "-".into(), CellReg::None)]
                }
                MethodGrid::L2 { lambdas } => lambdas
                    .iter()
                    .map(|&l| {
                        (
                            "l2".into(),
                            format!("lambda={}", format_float(l)),
                            CellReg::L2(l),
                        )
                    })
                    .collect(),
                MethodGrid::Dropout { deltas } => deltas
                    .iter()
                    .map(|&d| {
                        (
                            "dropout".into(),
                            format!("delta={}", format_float(d)),
                            CellReg::Dropout(d),
                        )
                    })
                    .collect(),
                MethodGrid::Grouping { variants } => variants
                    .iter()
                    .map(|g| {
                        let name = if g.lambda > 0.0 {
                            "grouping+l2"
                        } else {
                            "grouping"
                        }
                        .to_string();
                        let k_str = g.k.map_or("20%".into(), |k| k.to_string());
                        let mut params =
                            format!("k={k_str};r={};b={};policy={}", g.r, g.b, g.policy.as_str());
                        if g.lambda > 0.0 {
                            params.push_str(&format!(";lambda={}", format_float(g.lambda)));
                        }
                        (name, params, CellReg::Grouping(g.clone()))
                    })
                    .collect(),
            };
            for (regularizer, params, reg) in variants {
                for &seed in &cfg.seeds {
                    cells.push(CellSpec {
                        regularizer: regularizer.clone(),
                        params: params.clone(),
                        sigma,
                        seed,
                        reg: reg.clone(),
                    });
                }
            }
        }
    }
    cells
}

/// Loads or synthesizes the base dataset of a sweep.
pub fn load_source(
    source: &DataSource,
    geometry: Option<&[usize]>,
    standardize: bool,
) -> Result<Dataset> {
    let ds = match source {
        DataSource::Synth(spec) => {
            let mut rng = RngState::new(spec.seed);
            data::synth_faces(
                spec.classes,
                spec.per_class,
                (spec.height, spec.width),
                &mut rng,
            )?
        }
        DataSource::File(path) => {
            let opts = LoadOptions {
                classes: None,
                geometry: geometry.map(|g| g.to_vec()),
                standardize,
            };
            if path.extension().and_then(|e| e.to_str()) == Some("bin") {
                data::load_bin_with(path, &opts)?
            } else {
                data::load_csv_with(path, &opts)?
            }
        }
    };
    match (source, geometry) {
        (DataSource::Synth(_), Some(g)) => ds.with_geometry(g.to_vec()),
        _ => Ok(ds),
    }
}

fn run_cell(base: &Dataset, cfg: &ExperimentConfig, cell: &CellSpec) -> Result<ResultRow> {
    let started = Instant::now();
    let seed_root = RngState::new(cell.seed);
    let noisy = data::add_noise(
        base,
        &NoiseSpec {
            sigma: cell.sigma,
            seed: seed_root.derive(NOISE_TAG).seed(),
        },
    )?;
    let mut split_rng = seed_root.derive(SPLIT_TAG);
    let (train_ds, test_ds) = data::split(&noisy, cfg.test_fraction, &mut split_rng)?;

    let regularizer = match &cell.reg {
        CellReg::None => Regularizer::None,
        CellReg::L2(lambda) => Regularizer::L2 { lambda: *lambda },
        CellReg::Dropout(delta) => Regularizer::Dropout { delta: *delta },
        CellReg::Grouping(spec) => {
            let graph = grid_adjacency(train_ds.geometry())?;
            let k = spec.k.unwrap_or_else(|| default_k(train_ds.p()));
            let bank_rng = seed_root
                .derive(BANK_TAG)
                .derive(k as u64)
                .derive(spec.r as u64)
                .derive(spec.b as u64);
            let bank = Arc::new(build_bank(&train_ds, &graph, k, spec.r, spec.b, &bank_rng)?);
            Regularizer::Grouping {
                bank,
                policy: spec.policy,
                lambda: spec.lambda,
            }
        }
    };

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        minibatch: cfg.minibatch,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        regularizer,
        seed: cell.seed,
        eval_every: 1,
    };
    let model = GlmModel::zeros(train_ds.classes(), train_ds.p(), GlmFamily::Logistic);
    let (model, metrics) = train(model, &train_ds, Some(&test_ds), &train_cfg)?;
    let final_acc = evaluate(&model, &test_ds)?;
    Ok(ResultRow {
        regularizer: cell.regularizer.clone(),
        params: cell.params.clone(),
        sigma: cell.sigma,
        seed: cell.seed,
        curve: metrics.epochs,
        final_acc,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every cell of the sweep; cells execute in parallel and results come
/// back in deterministic cell order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let base = load_source(&cfg.source, cfg.geometry.as_deref(), cfg.standardize)?;
    let cells = expand_cells(cfg);
    let results: Vec<Result<ResultRow>> =
        exec::map_indexed(cells.len(), |i| run_cell(&base, cfg, &cells[i]));
    results.into_iter().collect()
}

pub const RESULTS_HEADER: &str = "regularizer,params,sigma,seed,epoch,train_loss,test_acc,seconds";

/// One line per cell: the final epoch's numbers.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for row in rows {
        let last_epoch = row.curve.last().map_or(0, |e| e.epoch);
        let last_loss = row.curve.last().map_or(f64::NAN, |e| e.train_loss);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.regularizer,
            row.params,
            row.sigma,
            row.seed,
            last_epoch,
            last_loss,
            row.final_acc,
            row.seconds
        ));
    }
    out
}

/// One line per epoch per cell: the accuracy-vs-epoch curves, unsmoothed.
pub fn curves_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for row in rows {
        for e in &row.curve {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.regularizer,
                row.params,
                row.sigma,
                row.seed,
                e.epoch,
                e.train_loss,
                e.test_acc,
                e.seconds
            ));
        }
    }
    out
}

/// Final accuracy aggregated across seeds for one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub regularizer: String,
    pub params: String,
    pub sigma: f64,
    pub mean_acc: f64,
    pub stderr: f64,
    pub seeds: usize,
}

/// Mean and standard error of final accuracy across seeds, grouped by
/// (regularizer, params, sigma), in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for row in rows {
        let key = (row.regularizer.clone(), row.params.clone(), row.sigma);
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(row.final_acc),
            None => {
                keys.push(key);
                groups.push(vec![row.final_acc]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((regularizer, params, sigma), accs)| {
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let var =
                    accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                regularizer,
                params,
                sigma,
                mean_acc: mean,
                stderr,
                seeds: n,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("regularizer,params,sigma,mean_acc,stderr,seeds\n");
    for agg in aggregate(rows) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            agg.regularizer, agg.params, agg.sigma, agg.mean_acc, agg.stderr, agg.seeds
        ));
    }
    out
}

/// One timing measurement of the scaling benchmark.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub p: usize,
    pub k: usize,
    pub phase: String,
    pub seconds: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("p,k,phase,seconds\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.p, row.k, row.phase, row.seconds
        ));
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Splits p into a near-square 2-D grid.
fn grid_dims(p: usize) -> (usize, usize) {
    let mut h = (p as f64).sqrt() as usize;
    while h > 1 && p % h != 0 {
        h -= 1;
    }
    (h, p / h)
}

/// Scaling benchmark over feature counts: median wall time of ReNA
/// clustering and of one grouping-regularized training epoch, at a fixed
/// cluster ratio k = 20% of p and fixed (r, b, m, l, n).
pub fn bench_scaling(p_list: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let r = 10;
    let b = 4;
    let l = 10;
    let n = 64;
    let epochs_per_run = 4;
    let mut rows = Vec::new();
    for &p in p_list {
        let k = default_k(p);
        let (h, w) = grid_dims(p);
        let graph = grid_adjacency(&[h, w])?;
        let mut gen = RngState::new(seed ^ p as u64);
        let mut x = DenseMatrix::zeros(n, p);
        for v in x.data_mut() {
            *v = gen.normal();
        }
        let y: Vec<u32> = (0..n).map(|i| (i % l) as u32).collect();
        let ds = Dataset::new(x, y, l, vec![h, w])?;

        let mut cluster_times = Vec::with_capacity(repeats);
        let cluster_rng = RngState::new(seed);
        let mut samples = DenseMatrix::zeros(r, p);
        for row in 0..r {
            samples.row_mut(row).copy_from_slice(ds.sample(row));
        }
        // Warm the allocator and caches, then time a batch of clusterings
        // per run; single invocations are a few milliseconds and too easy
        // for scheduler noise to distort.
        let part = rena_cluster(&samples, &graph, k, &cluster_rng)?;
        assert_eq!(part.k(), k);
        let batch = 12;
        for _ in 0..repeats {
            let t = Instant::now();
            for _ in 0..batch {
                rena_cluster(&samples, &graph, k, &cluster_rng)?;
            }
            cluster_times.push(t.elapsed().as_secs_f64() / batch as f64);
        }
        rows.push(BenchRow {
            p,
            k,
            phase: "cluster".into(),
            seconds: median(cluster_times),
        });

        let bank = Arc::new(build_bank(
            &ds,
            &graph,
            k,
            r,
            b,
            &RngState::new(seed ^ 0xB0),
        )?);
        let mut train_times = Vec::with_capacity(repeats);
        for rep in 0..=repeats {
            let cfg = TrainConfig {
                epochs: epochs_per_run,
                minibatch: 32,
                learning_rate: 1e-4,
                optimizer: Optimizer::adam(),
                regularizer: Regularizer::Grouping {
                    bank: bank.clone(),
                    policy: BankPolicy::PerMinibatch,
                    lambda: 0.0,
                },
                seed: seed ^ rep as u64,
                eval_every: 0,
            };
            let model = GlmModel::zeros(l, p, GlmFamily::Logistic);
            let t = Instant::now();
            let _ = train(model, &ds, None, &cfg)?;
            if rep > 0 {
                // First run is warmup.
                train_times.push(t.elapsed().as_secs_f64() / epochs_per_run as f64);
            }
        }
        rows.push(BenchRow {
            p,
            k,
            phase: "train_epoch".into(),
            seconds: median(train_times),
        });
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            source: DataSource::Synth(SynthSpec {
                classes: 4,
                per_class: 6,
                height: 8,
                width: 8,
                seed: 7,
            }),
            geometry: None,
            standardize: false,
            sigmas: vec![0.1, 0.3],
            test_fraction: 0.33,
            methods: vec![
                MethodGrid::None,
                MethodGrid::L2 {
                    lambdas: vec![1e-3, 1e-1],
                },
                MethodGrid::Grouping {
                    variants: vec![GroupingSpec {
                        b: 3,
                        r: 4,
                        ..Default::default()
                    }],
                },
            ],
            epochs: 3,
            minibatch: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn sweep_emits_one_row_per_cell() {
        let cfg = tiny_config();
        let rows = run_sweep(&cfg).unwrap();
        // (1 none + 2 l2 + 1 grouping) * 2 sigmas * 2 seeds
        assert_eq!(rows.len(), 4 * 2 * 2);
        let csv = results_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + rows.len());
        assert!(csv.starts_with(RESULTS_HEADER));
        let curves = curves_csv(&rows);
        assert_eq!(curves.lines().count(), 1 + rows.len() * cfg.epochs);
    }

    #[test]
    fn sweep_reruns_identically_except_seconds() {
        let cfg = tiny_config();
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.regularizer, rb.regularizer);
            assert_eq!(ra.params, rb.params);
            assert_eq!(ra.seed, rb.seed);
            assert_eq!(ra.final_acc.to_bits(), rb.final_acc.to_bits());
            for (ea, eb) in ra.curve.iter().zip(&rb.curve) {
                assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
                assert_eq!(ea.test_acc.to_bits(), eb.test_acc.to_bits());
            }
        }
    }

    #[test]
    fn aggregate_matches_independent_statistics_oracle() {
        let mk = |acc: f64, seed: u64| ResultRow {
            regularizer: "l2".into(),
            params: "lambda=0.1".into(),
            sigma: 0.5,
            seed,
            curve: vec![],
            final_acc: acc,
            seconds: 0.0,
        };
        let rows = vec![mk(0.8, 0), mk(0.6, 1), mk(0.7, 2)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        // Two-pass oracle.
        let mean = (0.8 + 0.6 + 0.7) / 3.0;
        let var = ((0.8f64 - mean).powi(2) + (0.6 - mean).powi(2) + (0.7 - mean).powi(2)) / 2.0;
        let stderr = (var / 3.0).sqrt();
        assert!((agg[0].mean_acc - mean).abs() <= 1e-15);
        assert!((agg[0].stderr - stderr).abs() <= 1e-15);
        assert_eq!(agg[0].seeds, 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.seeds = vec![0, 0];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.sigmas.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bench_rows_cover_each_phase() {
        let rows = bench_scaling(&[64, 128], 2, 3).unwrap();
        assert_eq!(rows.len(), 4);
        for phase in ["cluster", "train_epoch"] {
            assert_eq!(rows.iter().filter(|r| r.phase == phase).count(), 2);
        }
        assert!(rows.iter().all(|r| r.seconds >= 0.0));
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("p,k,phase,seconds\n"));
    }
}
