//! Least-squares estimation of Volterra kernels from input/output training pairs.
//!
//! Each training pair contributes `L + R - 1` rows to the design matrix `U`:
//! a constant column, `R` lagged inputs and the `R(R+1)/2` lexicographic lag
//! products `x[n-a]·x[n-b]`, `a <= b`. Pairs are stacked without mixing
//! samples across pairs. The coefficients are recovered in the canonical
//! [`CoefficientVector`] order and decoded into a [`VolterraKernel`].

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::linalg::lstsq_qr;
use crate::pulse::TrainingPair;
use crate::volterra::{coefficient_count, write_kernel, CoefficientVector, VolterraKernel};

/// Relative threshold on the pivoted triangular diagonal below which a
/// direction counts as numerically absent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// What to do with a measured output whose length is not `L + R - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthPolicy {
    /// Truncate or zero-pad the output and log a warning.
    #[default]
    Adjust,
    /// Reject the pair.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelOrder {
    Linear,
    Quadratic,
}

impl ModelOrder {
    pub fn columns(self, r: usize) -> usize {
        match self {
            ModelOrder::Linear => 1 + r,
            ModelOrder::Quadratic => coefficient_count(r),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub design: DMatrix<f64>,
    pub observations: DVector<f64>,
    pub memory_length: usize,
    /// Row offset of each pair, plus the total row count at the end.
    pub pair_boundaries: Vec<usize>,
    pub order: ModelOrder,
}

impl EstimationProblem {
    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn columns(&self) -> usize {
        self.design.ncols()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    #[serde(skip)]
    pub kernel: VolterraKernel,
    pub residual_norm: f64,
    pub rank_deficient: bool,
    pub rank: usize,
    pub condition_estimate: f64,
    pub method: &'static str,
}

pub fn build_design_matrix(pairs: &[TrainingPair], r: usize) -> Result<EstimationProblem> {
    build_problem(pairs, r, ModelOrder::Quadratic, LengthPolicy::default())
}

pub fn build_problem(
    pairs: &[TrainingPair],
    r: usize,
    order: ModelOrder,
    policy: LengthPolicy,
) -> Result<EstimationProblem> {
    if r == 0 {
        return Err(Error::invalid("memory length must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("at least one training pair is required"));
    }
    let mut boundaries = Vec::with_capacity(pairs.len() + 1);
    let mut total = 0;
    for (p, pair) in pairs.iter().enumerate() {
        let expected = pair.input.len() + r - 1;
        let got = pair.output.len();
        if got != expected {
            match policy {
                LengthPolicy::Strict => {
                    return Err(Error::validation(format!(
                        "training pair {p} ('{}'): output has {got} samples, expected L + R - 1 = {expected}",
                        pair.input.label()
                    )))
                }
                LengthPolicy::Adjust => warn!(
                    "training pair {p}: output has {got} samples, using {expected} (L + R - 1)"
                ),
            }
        }
        boundaries.push(total);
        total += expected;
    }
    boundaries.push(total);

    let m = order.columns(r);
    let mut design = DMatrix::zeros(total, m);
    let mut obs = DVector::zeros(total);
    let mut window = vec![0.0; r];
    for (pair, &offset) in pairs.iter().zip(&boundaries) {
        let x = pair.input.samples();
        let y = pair.output.samples();
        let rows = x.len() + r - 1;
        for n in 0..rows {
            for (j, w) in window.iter_mut().enumerate() {
                *w = if j > n { 0.0 } else { x.get(n - j).copied().unwrap_or(0.0) };
            }
            let row = offset + n;
            design[(row, 0)] = 1.0;
            for j in 0..r {
                design[(row, 1 + j)] = window[j];
            }
            if order == ModelOrder::Quadratic {
                let mut col = 1 + r;
                for a in 0..r {
                    for b in a..r {
                        design[(row, col)] = window[a] * window[b];
                        col += 1;
                    }
                }
            }
            obs[row] = y.get(n).copied().unwrap_or(0.0);
        }
    }
    Ok(EstimationProblem {
        design,
        observations: obs,
        memory_length: r,
        pair_boundaries: boundaries,
        order,
    })
}

fn decode(p: &EstimationProblem, coeffs: &DVector<f64>) -> Result<VolterraKernel> {
    let r = p.memory_length;
    match p.order {
        ModelOrder::Quadratic => {
            VolterraKernel::from_coefficients(&CoefficientVector(coeffs.as_slice().to_vec()), r)
        }
        ModelOrder::Linear => {
            let mut full = vec![0.0; coefficient_count(r)];
            full[..=r].copy_from_slice(coeffs.as_slice());
            VolterraKernel::from_coefficients(&CoefficientVector(full), r)
        }
    }
}

fn residual_norm(p: &EstimationProblem, coeffs: &DVector<f64>) -> f64 {
    (&p.observations - &p.design * coeffs).norm()
}

fn check_rows(p: &EstimationProblem) -> Result<()> {
    if p.rows() == 0 {
        return Err(Error::invalid("estimation problem has no rows"));
    }
    if p.rows() < p.columns() {
        warn!(
            "only {} rows for {} coefficients; the estimate is not unique",
            p.rows(),
            p.columns()
        );
    }
    Ok(())
}

/// Least squares through a pivoted Householder factorization of `U`.
pub fn solve_orthogonalized(p: &EstimationProblem) -> Result<EstimateReport> {
    check_rows(p)?;
    let ls = lstsq_qr(&p.design, &p.observations, RANK_TOLERANCE)?;
    if ls.rank < p.columns() {
        warn!(
            "design matrix is rank deficient ({} of {} columns); returning the minimum-norm estimate",
            ls.rank,
            p.columns()
        );
    }
    Ok(EstimateReport {
        kernel: decode(p, &ls.solution)?,
        residual_norm: residual_norm(p, &ls.solution),
        rank_deficient: ls.rank < p.columns(),
        rank: ls.rank,
        condition_estimate: ls.condition_estimate,
        method: "qr",
    })
}

/// Solves `UᵀU K = UᵀY` directly. Falls back to a pseudo-inverse at machine
/// precision when the Gram matrix is not positive definite.
pub fn solve_normal_equations(p: &EstimationProblem) -> Result<EstimateReport> {
    check_rows(p)?;
    let gram = p.design.tr_mul(&p.design);
    let rhs = p.design.tr_mul(&p.observations);
    let m = gram.nrows();
    let (coeffs, rank_deficient, rank, condition_estimate) = match gram.clone().cholesky() {
        Some(chol) => {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
            (chol.solve(&rhs), false, m, (hi / lo).powi(2))
        }
        None => {
            warn!("normal equations are singular; using the pseudo-inverse");
            let svd = gram.svd(true, true);
            let smax = svd.singular_values.max();
            let tol = f64::EPSILON * m as f64 * smax;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            let smin = svd
                .singular_values
                .iter()
                .filter(|&&s| s > tol)
                .fold(f64::INFINITY, |a, &b| a.min(b));
            let coeffs = svd
                .solve(&rhs, tol)
                .map_err(|e| Error::Numerical(e.to_string()))?;
            (coeffs, true, rank, smax / smin)
        }
    };
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("normal-equation solve produced non-finite coefficients".into()));
    }
    Ok(EstimateReport {
        kernel: decode(p, &coeffs)?,
        residual_norm: residual_norm(p, &coeffs),
        rank_deficient,
        rank,
        condition_estimate,
        method: "normal",
    })
}

/// Linear impulse-response baseline: offset plus `R` lags, no quadratic part.
pub fn solve_linear_only(pairs: &[TrainingPair], r: usize) -> Result<EstimateReport> {
    let p = build_problem(pairs, r, ModelOrder::Linear, LengthPolicy::default())?;
    let mut report = solve_orthogonalized(&p)?;
    report.method = "linear";
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Qr,
    Normal,
    Linear,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "qr" => Ok(Method::Qr),
            "normal" => Ok(Method::Normal),
            "linear" => Ok(Method::Linear),
            _ => Err(Error::invalid(format!(
                "unknown estimation method '{s}'; valid methods: qr, normal, linear"
            ))),
        }
    }
}

pub fn estimate(pairs: &[TrainingPair], r: usize, method: Method) -> Result<EstimateReport> {
    match method {
        Method::Qr => solve_orthogonalized(&build_design_matrix(pairs, r)?),
        Method::Normal => solve_normal_equations(&build_design_matrix(pairs, r)?),
        Method::Linear => solve_linear_only(pairs, r),
    }
}

/// Mean absolute scaled error between two sequences, each normalized by its
/// Euclidean norm.
pub fn mase(z_true: &[f64], z_est: &[f64]) -> Result<f64> {
    if z_true.len() != z_est.len() {
        return Err(Error::invalid(format!(
            "MASE needs equal lengths, got {} and {}",
            z_true.len(),
            z_est.len()
        )));
    }
    if z_true.is_empty() {
        return Err(Error::invalid("MASE of empty sequences"));
    }
    let nt = l2(z_true);
    let ne = l2(z_est);
    if nt == 0.0 || ne == 0.0 {
        return Err(Error::Numerical(
            "undefined scale: MASE of an identically zero sequence".into(),
        ));
    }
    let sum: f64 = z_true
        .iter()
        .zip(z_est)
        .map(|(t, e)| (t / nt - e / ne).abs())
        .sum();
    Ok(sum / z_true.len() as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-order comparison of an estimate against a reference kernel. Both are
/// compared over the larger of the two memory lengths; the quadratic part is
/// compared as the full symmetric matrix.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KernelErrors {
    pub h0_abs: f64,
    pub h1_mase: f64,
    pub h2_mase: f64,
}

pub fn kernel_errors(truth: &VolterraKernel, est: &VolterraKernel) -> Result<KernelErrors> {
    let r = truth.memory_length().max(est.memory_length());
    let t = truth.with_memory_length(r)?;
    let e = est.with_memory_length(r)?;
    Ok(KernelErrors {
        h0_abs: (t.h0() - e.h0()).abs(),
        h1_mase: mase(t.h1(), e.h1())?,
        h2_mase: mase(t.h2_matrix().as_slice(), e.h2_matrix().as_slice())?,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EstimateReport,
    memory_length: usize,
    kernel_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<KernelErrors>,
}

/// Writes `<stem>.kernel.json` and `<stem>.report.json`.
pub fn write_report(
    dir: &Path,
    stem: &str,
    report: &EstimateReport,
    truth: Option<KernelErrors>,
) -> Result<()> {
    let kernel_name = format!("{stem}.kernel.json");
    write_kernel(&dir.join(&kernel_name), &report.kernel)?;
    write_json(
        &dir.join(format!("{stem}.report.json")),
        &ReportFile {
            report,
            memory_length: report.kernel.memory_length(),
            kernel_file: kernel_name,
            truth,
        },
    )
}
