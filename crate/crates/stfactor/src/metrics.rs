//! Evaluation quantities: projector-based space distance and the MSE/MSPE
//! family used to score simulation replicates.

use crate::dataset::SignalTensor;
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Distance between column spaces:
/// `D = sqrt(1 − tr(P̂·P)/max(d, d̂))` with P the orthogonal projector onto
/// the column space. 0 iff equal spaces, 1 iff orthogonal.
///
/// Projectors are formed from orthonormalized bases rather than the explicit
/// `(A'A)⁻¹` inverse; the value is identical.
pub fn space_distance(a_hat: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<f64> {
    for m in [&a_hat, &a] {
        let probe = linalg::lstsq(m.view(), Array2::zeros((m.nrows(), 0)).view(), 1e-10);
        if probe.rank < m.ncols() {
            return Err(Error::SingularInput);
        }
    }
    let q_hat = linalg::orthonormal_columns(a_hat);
    let q = linalg::orthonormal_columns(a);
    // With k_small ≤ k_big basis sizes,
    //   1 − tr(P̂P)/k_big = (k_big − k_small + ‖(I − P_big) Q_small‖_F²)/k_big,
    // and the right-hand side is free of the catastrophic cancellation the
    // 1 − tr/k form suffers when the spaces (nearly) coincide.
    let (qs, qb) = if q_hat.ncols() <= q.ncols() {
        (&q_hat, &q)
    } else {
        (&q, &q_hat)
    };
    let coeff = qb.t().dot(qs);
    let resid = qs - &qb.dot(&coeff);
    let resid_sq: f64 = resid.iter().map(|v| v * v).sum();
    let k_small = qs.ncols() as f64;
    let k_big = qb.ncols() as f64;
    Ok((((k_big - k_small) + resid_sq) / k_big).max(0.0).sqrt())
}

fn mean_sq_diff3(est: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    if est.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            est.dim(),
            truth.dim()
        )));
    }
    let n = est.len().max(1) as f64;
    Ok(est
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean squared error of estimated signals: `(1/npT) Σ_t Σ_i ‖ξ̂ − ξ‖²`.
pub fn mse_signals(est: &SignalTensor, truth: &SignalTensor) -> Result<f64> {
    mean_sq_diff3(&est.values, &truth.values)
}

/// Spatial prediction error over held-out sites, `(1/n₀pT) Σ ‖ŷ − ξ‖²`.
pub fn mspe_spatial(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    mean_sq_diff3(pred, truth)
}

/// Temporal prediction error at one horizon, `(1/np) Σ_j ‖ŷ_{T+h}(s_j) − ξ_{T+h}(s_j)‖²`.
pub fn mspe_temporal(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// One evaluated metric with the run parameters that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub std: Option<f64>,
    pub config: BTreeMap<String, String>,
}

impl MetricReport {
    /// CSV header matching [`to_csv_row`](Self::to_csv_row): the config
    /// columns follow `name,value,std` in key order.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["name".to_string(), "value".to_string(), "std".to_string()];
        cols.extend(self.config.keys().cloned());
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![
            self.name.clone(),
            format!("{}", self.value),
            self.std.map(|s| format!("{s}")).unwrap_or_default(),
        ];
        cols.extend(self.config.values().cloned());
        cols.join(",")
    }
}
