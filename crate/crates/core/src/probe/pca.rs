// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ProbeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaConfig {
    pub variance_target: f64,
    pub k_max: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            variance_target: 0.95,
            k_max: 50,
        }
    }
}

/// Principal axes of a centred data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `k x d`, orthonormal rows, largest variance first.
    pub components: DMatrix<f64>,
    /// Variance along each kept axis (denominator n - 1).
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbeError> {
        pca_transform(self, x)
    }

    /// Map scores back to the input space.
    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = scores * &self.components;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

/// Fit PCA by SVD of the centred data, keeping the fewest components whose
/// cumulative explained variance reaches `variance_target`, capped at
/// `min(k_max, n - 1, d)`.
pub fn pca_fit(x: &DMatrix<f64>, variance_target: f64, k_max: usize) -> Result<PcaModel, ProbeError> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(ProbeError::TooFewRows { need: 2, got: n });
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) || k_max == 0 {
        return Err(ProbeError::Config(format!(
            "variance_target {variance_target} must be in (0, 1] and k_max positive"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let total: f64 = centred.iter().map(|v| v * v).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(ProbeError::ZeroVariance);
    }

    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let cap = k_max.min(n - 1).min(d);
    let mut k = 0;
    let mut cumulative = 0.0;
    while k < cap {
        cumulative += svd.singular_values[order[k]].powi(2) / total;
        k += 1;
        if cumulative >= variance_target - 1e-12 {
            break;
        }
    }

    let mut components = DMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    let mut explained_variance_ratio = Vec::with_capacity(k);
    for (row, &idx) in order[..k].iter().enumerate() {
        let mut axis = v_t.row(idx).clone_owned();
        // sign convention: largest-magnitude loading is positive
        let pivot = axis
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            axis.neg_mut();
        }
        components.set_row(row, &axis);
        let s2 = svd.singular_values[idx].powi(2);
        explained_variance.push(s2 / (n as f64 - 1.0));
        explained_variance_ratio.push(s2 / total);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
    })
}

/// Project `(x - mean)` onto the components.
pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbeError> {
    if x.ncols() != model.mean.len() {
        return Err(ProbeError::ShapeMismatch {
            expected: model.mean.len(),
            found: x.ncols(),
        });
    }
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= model.mean.transpose();
    }
    Ok(centred * model.components.transpose())
}
