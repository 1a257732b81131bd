//! Banks of grouping matrices.
//!
//! A bank holds `b` grouping matrices, each clustered on `r` training
//! samples drawn uniformly without replacement (a fresh draw per matrix).
//! During training one matrix is drawn uniformly with replacement, either
//! per minibatch or per epoch.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::grouping::partition_to_phi;
use crate::grouping::{rena_cluster, FeatureGraph, Partition};
use crate::linalg::{DenseMatrix, SparseGrouping};
use crate::rng::RngState;

/// When a fresh matrix is drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankPolicy {
    PerMinibatch,
    PerEpoch,
}

impl BankPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-minibatch" => Ok(BankPolicy::PerMinibatch),
            "per-epoch" => Ok(BankPolicy::PerEpoch),
            other => Err(Error::InvalidArgument(format!(
                "unknown bank policy {other:?} (expected per-minibatch or per-epoch)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BankPolicy::PerMinibatch => "per-minibatch",
            BankPolicy::PerEpoch => "per-epoch",
        }
    }
}

/// Immutable collection of grouping matrices sharing (k, p).
#[derive(Clone, Debug)]
pub struct ProjectionBank {
    matrices: Vec<SparseGrouping>,
    r: usize,
    k: usize,
    source_seed: u64,
}

impl ProjectionBank {
    /// Wraps pre-built matrices (used by tests and the analysis module).
    pub fn from_matrices(
        matrices: Vec<SparseGrouping>,
        r: usize,
        source_seed: u64,
    ) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::InvalidArgument(
                "bank must hold at least one matrix".into(),
            ));
        }
        let k = matrices[0].k();
        let p = matrices[0].p();
        if !matrices.iter().all(|m| m.k() == k && m.p() == p) {
            return Err(Error::DimensionMismatch(
                "bank matrices must share (k, p)".into(),
            ));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.is_mask() {
                return Err(Error::InvalidArgument(format!(
                    "bank matrix {i} is a mask; banks hold grouping matrices"
                )));
            }
            // Rows are structurally orthogonal (clusters are disjoint); check
            // they are unit length.
            let mut row_norms = vec![0.0f64; k];
            for j in 0..p {
                let r = m
                    .row_of(j)
                    .expect("non-mask matrices have no dropped columns");
                row_norms[r] += m.value_of(j) * m.value_of(j);
            }
            if let Some(bad) = row_norms.iter().position(|&n| (n - 1.0).abs() > 1e-12) {
                return Err(Error::Numerical(format!(
                    "bank matrix {i} row {bad} has squared norm {}, not 1",
                    row_norms[bad]
                )));
            }
        }
        Ok(ProjectionBank {
            matrices,
            r,
            k,
            source_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.matrices[0].p()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn get(&self, i: usize) -> &SparseGrouping {
        &self.matrices[i]
    }

    pub fn matrices(&self) -> &[SparseGrouping] {
        &self.matrices
    }

    /// Uniform draw with replacement.
    pub fn draw(&self, rng: &mut RngState) -> &SparseGrouping {
        &self.matrices[rng.index(self.matrices.len())]
    }

    /// Serializes as a directory: `manifest.txt` plus one partition file per
    /// matrix in the grouping module's text format.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.txt");
        let manifest =
            std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut w = BufWriter::new(manifest);
        write!(
            w,
            "b={}\nr={}\nk={}\nseed={}\n",
            self.len(),
            self.r,
            self.k,
            self.source_seed
        )
        .map_err(|e| Error::io(&manifest_path, e))?;
        w.flush().map_err(|e| Error::io(&manifest_path, e))?;
        for (i, phi) in self.matrices.iter().enumerate() {
            let part = partition_of(phi);
            part.save(&dir.join(format!("phi_{i:05}.txt")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut b = None;
        let mut r = None;
        let mut k = None;
        let mut seed = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(&manifest_path, format!("bad manifest line {line:?}"))
            })?;
            let value = value.trim();
            match key.trim() {
                "b" => b = value.parse::<usize>().ok(),
                "r" => r = value.parse::<usize>().ok(),
                "k" => k = value.parse::<usize>().ok(),
                "seed" => seed = value.parse::<u64>().ok(),
                other => {
                    return Err(Error::parse(
                        &manifest_path,
                        format!("unknown manifest key {other:?}"),
                    ))
                }
            }
        }
        let (b, r, k, seed) = match (b, r, k, seed) {
            (Some(b), Some(r), Some(k), Some(seed)) => (b, r, k, seed),
            _ => {
                return Err(Error::parse(
                    &manifest_path,
                    "manifest must list b, r, k, seed",
                ))
            }
        };
        let mut matrices = Vec::with_capacity(b);
        for i in 0..b {
            let part = Partition::load(&dir.join(format!("phi_{i:05}.txt")))?;
            if part.k() != k {
                return Err(Error::parse(
                    dir,
                    format!("partition {i} has k={}, manifest says {k}", part.k()),
                ));
            }
            matrices.push(partition_to_phi(&part));
        }
        ProjectionBank::from_matrices(matrices, r, seed)
    }
}

fn partition_of(phi: &SparseGrouping) -> Partition {
    let assign: Vec<u32> = (0..phi.p())
        .map(|j| {
            phi.row_of(j)
                .expect("bank matrices have no dropped columns") as u32
        })
        .collect();
    Partition::new(phi.k(), assign).expect("bank matrix columns cover all clusters")
}

/// Builds a bank of `b` matrices, each clustered on a fresh uniform draw of
/// `r` training samples. Matrix `i` uses the child stream `rng.derive(i)`,
/// so construction parallelizes across matrices without changing results.
pub fn build_bank(
    train: &Dataset,
    graph: &FeatureGraph,
    k: usize,
    r: usize,
    b: usize,
    rng: &RngState,
) -> Result<ProjectionBank> {
    if b == 0 {
        return Err(Error::InvalidArgument(
            "bank size b must be at least 1".into(),
        ));
    }
    if r == 0 || r > train.n() {
        return Err(Error::InvalidArgument(format!(
            "r={r} out of range [1, n={}]",
            train.n()
        )));
    }
    if graph.p() != train.p() {
        return Err(Error::DimensionMismatch(format!(
            "graph has {} nodes, data has p={}",
            graph.p(),
            train.p()
        )));
    }
    let results: Vec<Result<SparseGrouping>> = exec::map_indexed(b, |i| {
        let mut child = rng.derive(i as u64);
        let picked = child.sample_indices(train.n(), r);
        let mut samples = DenseMatrix::zeros(r, train.p());
        for (row, &idx) in picked.iter().enumerate() {
            samples.row_mut(row).copy_from_slice(train.sample(idx));
        }
        let part = rena_cluster(&samples, graph, k, &child)?;
        Ok(partition_to_phi(&part))
    });
    let mut matrices = Vec::with_capacity(b);
    for r in results {
        matrices.push(r?);
    }
    ProjectionBank::from_matrices(matrices, r, rng.seed())
}
