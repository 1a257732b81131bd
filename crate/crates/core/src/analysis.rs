//! Numerical realization of the grouping-penalty theory.
//!
//! The stochastic objective decomposes around `Omega = E[phi^T phi]`:
//! writing `phi^T phi = Omega + Delta` with `E[Delta] = 0`, a second-order
//! expansion of the log-partition function turns the expected loss into a
//! loss on the smoothed input plus half a penalty
//! `R(beta) = sum_i A''(x_i^T Omega beta) * Var_phi[x_i^T phi^T phi beta]`.
//!
//! Expectations here are exact averages over the finite bank, so every
//! identity checked in this module holds to rounding error rather than
//! asymptotically: `E[Delta^T Delta] = Omega - Omega^2`, the first-order
//! term vanishes, and the dropout penalty has the closed form
//! `delta/(1-delta) * sum_j x_j^2 beta_j^2`.

use serde::Serialize;

use crate::bank::ProjectionBank;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::glm::GlmFamily;
use crate::linalg::{dot, spgemv, DenseMatrix, SparseGrouping};

/// Largest p that may be densified into p-by-p moment matrices.
pub const DENSE_GUARD: usize = 4096;

/// Deterministic smoothing term `Omega = E[phi^T phi]`.
#[derive(Clone, Debug)]
pub struct SmoothingOperator {
    omega: DenseMatrix,
}

impl SmoothingOperator {
    fn from_matrix(omega: DenseMatrix) -> Result<Self> {
        let p = omega.rows();
        let bound = (p as f64).sqrt() + 1e-9;
        for i in 0..p {
            let mut row_sum = 0.0;
            for j in 0..p {
                let v = omega[(i, j)];
                if v < -1e-12 {
                    return Err(Error::Numerical(format!("negative smoothing entry {v}")));
                }
                if (v - omega[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Numerical("smoothing operator not symmetric".into()));
                }
                row_sum += v;
            }
            if row_sum > bound {
                return Err(Error::Numerical(format!(
                    "smoothing row sum {row_sum} out of scale"
                )));
            }
        }
        Ok(SmoothingOperator { omega })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.omega
    }

    pub fn p(&self) -> usize {
        self.omega.rows()
    }

    /// `Omega x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.omega.matvec(x)
    }
}

fn guard_dense(p: usize) -> Result<()> {
    if p > DENSE_GUARD {
        return Err(Error::InvalidArgument(format!(
            "p={p} too large to densify (limit {DENSE_GUARD}); use the matrix-free var_target path"
        )));
    }
    Ok(())
}

/// Dense projector `phi^T phi`.
fn projector(phi: &SparseGrouping) -> DenseMatrix {
    let p = phi.p();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); phi.k()];
    for j in 0..p {
        if let Some(r) = phi.row_of(j) {
            members[r].push(j);
        }
    }
    let mut out = DenseMatrix::zeros(p, p);
    for cluster in &members {
        for &a in cluster {
            let va = phi.value_of(a);
            for &b in cluster {
                out[(a, b)] = va * phi.value_of(b);
            }
        }
    }
    out
}

fn uniform_weights(b: usize) -> Vec<f64> {
    vec![1.0 / b as f64; b]
}

fn check_ensemble(matrices: &[SparseGrouping], weights: &[f64]) -> Result<()> {
    if matrices.is_empty() {
        return Err(Error::InvalidArgument("empty matrix ensemble".into()));
    }
    if matrices.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} matrices but {} weights",
            matrices.len(),
            weights.len()
        )));
    }
    let p = matrices[0].p();
    if !matrices.iter().all(|m| m.p() == p) {
        return Err(Error::DimensionMismatch(
            "ensemble matrices must share p".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument(
            "ensemble weights must be a distribution".into(),
        ));
    }
    Ok(())
}

/// Exact weighted average of `phi^T phi` over an ensemble.
pub fn estimate_omega_weighted(
    matrices: &[SparseGrouping],
    weights: &[f64],
) -> Result<SmoothingOperator> {
    check_ensemble(matrices, weights)?;
    let p = matrices[0].p();
    guard_dense(p)?;
    let mut omega = DenseMatrix::zeros(p, p);
    for (phi, &w) in matrices.iter().zip(weights) {
        let proj = projector(phi);
        for (acc, v) in omega.data_mut().iter_mut().zip(proj.data()) {
            *acc += w * *v;
        }
    }
    SmoothingOperator::from_matrix(omega)
}

/// Exact bank average of `phi^T phi`.
pub fn estimate_omega(bank: &ProjectionBank) -> Result<SmoothingOperator> {
    estimate_omega_weighted(bank.matrices(), &uniform_weights(bank.len()))
}

/// Second moment of the grouping noise, `E[(phi^T phi - Omega)^T (phi^T phi - Omega)]`.
/// By idempotence of the projectors this equals `Omega - Omega^2` exactly.
pub fn delta_second_moment_weighted(
    matrices: &[SparseGrouping],
    weights: &[f64],
) -> Result<DenseMatrix> {
    check_ensemble(matrices, weights)?;
    let p = matrices[0].p();
    guard_dense(p)?;
    let omega = estimate_omega_weighted(matrices, weights)?;
    let mut acc = DenseMatrix::zeros(p, p);
    for (phi, &w) in matrices.iter().zip(weights) {
        let mut delta = projector(phi);
        for (d, o) in delta.data_mut().iter_mut().zip(omega.matrix().data()) {
            *d -= *o;
        }
        // Delta is symmetric, so Delta^T Delta = Delta * Delta.
        let sq = delta.matmul(&delta)?;
        for (a, v) in acc.data_mut().iter_mut().zip(sq.data()) {
            *a += w * *v;
        }
    }
    Ok(acc)
}

pub fn delta_second_moment(bank: &ProjectionBank) -> Result<DenseMatrix> {
    delta_second_moment_weighted(bank.matrices(), &uniform_weights(bank.len()))
}

/// Scalar `x^T phi^T phi beta`, computed in the reduced space.
fn projected_target(phi: &SparseGrouping, x: &[f64], beta_proj: &[f64]) -> Result<f64> {
    let zx = spgemv(phi, x)?;
    Ok(dot(&zx, beta_proj))
}

/// Weighted variance over the ensemble of `x^T phi^T phi beta`.
pub fn var_target_weighted(
    matrices: &[SparseGrouping],
    weights: &[f64],
    x: &[f64],
    beta: &[f64],
) -> Result<f64> {
    check_ensemble(matrices, weights)?;
    if x.len() != beta.len() || x.len() != matrices[0].p() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, beta {}, matrices p={}",
            x.len(),
            beta.len(),
            matrices[0].p()
        )));
    }
    let mut targets = Vec::with_capacity(matrices.len());
    for phi in matrices {
        let beta_proj = spgemv(phi, beta)?;
        targets.push(projected_target(phi, x, &beta_proj)?);
    }
    let mean: f64 = targets.iter().zip(weights).map(|(s, w)| w * s).sum();
    Ok(targets
        .iter()
        .zip(weights)
        .map(|(s, w)| w * (s - mean) * (s - mean))
        .sum())
}

/// Empirical variance over the bank of the projected target; matrix-free,
/// works at any p.
pub fn var_target(bank: &ProjectionBank, x: &[f64], beta: &[f64]) -> Result<f64> {
    var_target_weighted(bank.matrices(), &uniform_weights(bank.len()), x, beta)
}

/// Exhaustive feature-dropout ensemble: all `2^p` masks with their exact
/// probabilities. Only sensible for small p; used to verify the closed-form
/// dropout penalty by enumeration.
pub fn exhaustive_dropout_masks(p: usize, delta: f64) -> Result<(Vec<SparseGrouping>, Vec<f64>)> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta {delta} must be in [0, 1)"
        )));
    }
    if p > 20 {
        return Err(Error::InvalidArgument(format!(
            "p={p} too large to enumerate 2^p masks"
        )));
    }
    let value = 1.0 / (1.0 - delta).sqrt();
    let mut matrices = Vec::with_capacity(1 << p);
    let mut weights = Vec::with_capacity(1 << p);
    for bits in 0..(1u32 << p) {
        let keep: Vec<bool> = (0..p).map(|j| bits >> j & 1 == 1).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        matrices.push(SparseGrouping::from_mask(&keep, value));
        weights.push((1.0 - delta).powi(kept as i32) * delta.powi((p - kept) as i32));
    }
    Ok((matrices, weights))
}

/// The two cost terms of the expanded objective.
#[derive(Clone, Debug, Serialize)]
pub struct PenaltyReport {
    /// `sum_i L(Omega x_i, y_i; beta)`.
    pub smoothed_loss: f64,
    /// `R(beta) = sum_i A''(x_i^T Omega beta) Var_phi[x_i^T phi^T phi beta]`.
    /// The expanded objective is `smoothed_loss + penalty / 2`.
    pub penalty: f64,
    /// Per-sample `A''(x_i^T Omega beta)`.
    pub per_sample_app: Vec<f64>,
    /// Per-sample `Var_phi[x_i^T phi^T phi beta]`.
    pub per_sample_var: Vec<f64>,
}

impl PenaltyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn binary_targets(data: &Dataset) -> Result<Vec<f64>> {
    if data.classes() > 2 {
        return Err(Error::InvalidArgument(
            "penalty analysis is defined for the single-parameter-vector GLM; use binary labels"
                .into(),
        ));
    }
    Ok(data.labels().iter().map(|&y| y as f64).collect())
}

/// Both terms of the expanded objective for a single-vector GLM.
pub fn penalty(
    beta: &[f64],
    data: &Dataset,
    bank: &ProjectionBank,
    family: GlmFamily,
) -> Result<PenaltyReport> {
    penalty_weighted(
        beta,
        data,
        bank.matrices(),
        &uniform_weights(bank.len()),
        family,
    )
}

pub fn penalty_weighted(
    beta: &[f64],
    data: &Dataset,
    matrices: &[SparseGrouping],
    weights: &[f64],
    family: GlmFamily,
) -> Result<PenaltyReport> {
    check_ensemble(matrices, weights)?;
    if beta.len() != data.p() || matrices[0].p() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries, data p={}, matrices p={}",
            beta.len(),
            data.p(),
            matrices[0].p()
        )));
    }
    let y = binary_targets(data)?;
    let omega = estimate_omega_weighted(matrices, weights)?;
    let n = data.n();

    let smoothed: Vec<(f64, f64)> = exec::map_indexed(n, |i| {
        let sx = omega.apply(data.sample(i)).expect("validated dims");
        let z = dot(&sx, beta);
        (family.nll(z, y[i]), family.a_double_prime(z))
    });
    let per_sample_var: Vec<f64> = exec::map_indexed(n, |i| {
        var_target_weighted(matrices, weights, data.sample(i), beta).expect("validated dims")
    });
    let smoothed_loss: f64 = smoothed.iter().map(|(loss, _)| loss).sum();
    let per_sample_app: Vec<f64> = smoothed.iter().map(|&(_, app)| app).collect();
    let penalty: f64 = per_sample_app
        .iter()
        .zip(&per_sample_var)
        .map(|(a, v)| a * v)
        .sum();
    Ok(PenaltyReport {
        smoothed_loss,
        penalty,
        per_sample_app,
        per_sample_var,
    })
}

/// Both sides of the second-order expansion.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TaylorCheck {
    /// Exact expected loss `sum_i E_phi[L(phi^T phi x_i, y_i; beta)]`.
    pub lhs: f64,
    /// Expansion `sum_i L(Omega x_i, y_i; beta) + R(beta) / 2`.
    pub rhs: f64,
    pub gap: f64,
}

/// Compares the exact expected objective with its second-order expansion.
/// Exact for the Gaussian family (the log-partition function is quadratic);
/// for the logistic family the gap shrinks at least cubically in the scale
/// of `beta`.
pub fn taylor_check(
    beta: &[f64],
    data: &Dataset,
    bank: &ProjectionBank,
    family: GlmFamily,
) -> Result<TaylorCheck> {
    taylor_check_weighted(
        beta,
        data,
        bank.matrices(),
        &uniform_weights(bank.len()),
        family,
    )
}

pub fn taylor_check_weighted(
    beta: &[f64],
    data: &Dataset,
    matrices: &[SparseGrouping],
    weights: &[f64],
    family: GlmFamily,
) -> Result<TaylorCheck> {
    let report = penalty_weighted(beta, data, matrices, weights, family)?;
    let y = binary_targets(data)?;
    let beta_proj: Vec<Vec<f64>> = matrices
        .iter()
        .map(|phi| spgemv(phi, beta))
        .collect::<Result<_>>()?;
    let mut lhs = 0.0;
    for i in 0..data.n() {
        let mut expected = 0.0;
        for (m, phi) in matrices.iter().enumerate() {
            let s = projected_target(phi, data.sample(i), &beta_proj[m])?;
            expected += weights[m] * family.nll(s, y[i]);
        }
        lhs += expected;
    }
    let rhs = report.smoothed_loss + 0.5 * report.penalty;
    Ok(TaylorCheck {
        lhs,
        rhs,
        gap: lhs - rhs,
    })
}

/// CSV dump (plain rows of comma-separated values) for the small moment
/// matrices; guarded to p <= 64 where a dense dump is readable.
pub fn matrix_csv(m: &DenseMatrix) -> Result<String> {
    if m.cols() > 64 {
        return Err(Error::InvalidArgument(format!(
            "matrix dump limited to p <= 64, got {}",
            m.cols()
        )));
    }
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
