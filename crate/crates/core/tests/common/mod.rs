//! Shared generators and oracles for the integration suites.
#![allow(dead_code)] // each test target uses a different subset

use fglm_core::bank::ProjectionBank;
use fglm_core::glm::{loss_grad, GlmFamily, GlmModel};
use fglm_core::grouping::{partition_to_phi, Partition};
use fglm_core::{DenseMatrix, RngState, SparseGrouping};

/// Random dense partition of `p` features into exactly `k` nonempty clusters.
pub fn random_partition(p: usize, k: usize, rng: &mut RngState) -> Partition {
    assert!(k >= 1 && k <= p);
    // Seed each cluster with one feature, scatter the rest.
    let mut features: Vec<usize> = (0..p).collect();
    rng.shuffle(&mut features);
    let mut assign = vec![0u32; p];
    for (cluster, &f) in features[..k].iter().enumerate() {
        assign[f] = cluster as u32;
    }
    for &f in &features[k..] {
        assign[f] = rng.index(k) as u32;
    }
    Partition::new(k, assign).expect("generator produces valid partitions")
}

pub fn random_grouping(p: usize, k: usize, rng: &mut RngState) -> SparseGrouping {
    partition_to_phi(&random_partition(p, k, rng))
}

/// Bank of random partitions sharing (k, p).
pub fn random_bank(p: usize, k: usize, b: usize, rng: &mut RngState) -> ProjectionBank {
    let matrices: Vec<SparseGrouping> = (0..b).map(|_| random_grouping(p, k, rng)).collect();
    ProjectionBank::from_matrices(matrices, 1, rng.seed()).expect("valid bank")
}

/// Largest absolute entry of `a*b - c`.
pub fn max_abs(m: &DenseMatrix) -> f64 {
    m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `phi phi^T` as a dense matrix.
pub fn gram(phi: &SparseGrouping) -> DenseMatrix {
    let dense = phi.to_dense();
    let k = dense.rows();
    let mut out = DenseMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for j in 0..dense.cols() {
                acc += dense[(a, j)] * dense[(b, j)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// `phi^T phi` as a dense matrix.
pub fn projector(phi: &SparseGrouping) -> DenseMatrix {
    let dense = phi.to_dense();
    let p = dense.cols();
    let mut out = DenseMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for r in 0..dense.rows() {
                acc += dense[(r, a)] * dense[(r, b)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

pub fn sub(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= *v;
    }
    out
}

/// Central finite differences against `loss_grad`; returns worst relative
/// error over all weight and bias coordinates.
pub fn finite_diff_worst(model: &GlmModel, x: &DenseMatrix, y: &[u32]) -> f64 {
    let (_, g_w, g_b) = loss_grad(model, x, y).expect("valid problem");
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = |delta: &mut dyn FnMut(&mut GlmModel, f64), analytic: f64| {
        let mut up = model.clone();
        delta(&mut up, h);
        let mut down = model.clone();
        delta(&mut down, -h);
        let (lu, _, _) = loss_grad(&up, x, y).unwrap();
        let (ld, _, _) = loss_grad(&down, x, y).unwrap();
        let fd = (lu - ld) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max((fd - analytic).abs() / denom);
    };
    for c in 0..model.outputs() {
        for j in 0..model.p() {
            probe(&mut |m, d| m.weights_mut()[(c, j)] += d, g_w[(c, j)]);
        }
        probe(&mut |m, d| m.bias_mut()[c] += d, g_b[c]);
    }
    worst
}

/// Random GLM instance for gradient checks.
pub fn random_instance(
    seed: u64,
    m: usize,
    p: usize,
    l: usize,
    family: GlmFamily,
) -> (GlmModel, DenseMatrix, Vec<u32>) {
    let mut rng = RngState::new(seed);
    let mut w = DenseMatrix::zeros(l, p);
    for v in w.data_mut() {
        *v = 0.4 * rng.normal();
    }
    let bias: Vec<f64> = (0..l).map(|_| 0.2 * rng.normal()).collect();
    let model = GlmModel::new(w, bias, family).expect("finite");
    let mut x = DenseMatrix::zeros(m, p);
    for v in x.data_mut() {
        *v = rng.normal();
    }
    let limit = if l == 1 { 2 } else { l };
    let y: Vec<u32> = (0..m).map(|_| rng.index(limit) as u32).collect();
    (model, x, y)
}
