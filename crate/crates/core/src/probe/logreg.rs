// SPDX-License-Identifier: MIT OR Apache-2.0

//! L2-regularized logistic regression fitted by full-batch gradient descent
//! with Armijo backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ProbeError;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticConfig {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-2,
            tol: 1e-6,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub converged: bool,
    pub n_iters: usize,
    /// Objective after each accepted step, starting from the initial point.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

impl LogisticModel {
    /// Linear score `x . w + b` per row.
    pub fn decision_function(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let w = DVector::from_column_slice(&self.weights);
        (x * w).iter().map(|z| z + self.bias).collect()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.decision_function(x).into_iter().map(sigmoid).collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean cross-entropy plus `l2_lambda * |w|^2 / 2`, and its gradient
/// with respect to `(w, b)`. The bias is not penalized.
pub fn loss_and_grad(
    x: &DMatrix<f64>,
    y: &[bool],
    w: &[f64],
    b: f64,
    l2_lambda: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.nrows() as f64;
    let wv = DVector::from_column_slice(w);
    let z = x * &wv;
    let mut loss = 0.0;
    let mut resid = DVector::zeros(x.nrows());
    for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
        let zi = zi + b;
        // -log sigma(z) = softplus(-z); -log(1 - sigma(z)) = softplus(z)
        loss += if yi { softplus(-zi) } else { softplus(zi) };
        resid[i] = sigmoid(zi) - if yi { 1.0 } else { 0.0 };
    }
    loss = loss / n + 0.5 * l2_lambda * wv.norm_squared();
    let grad_w = x.tr_mul(&resid) / n + &wv * l2_lambda;
    let grad_b = resid.sum() / n;
    (loss, grad_w.iter().copied().collect(), grad_b)
}

pub fn logreg_fit(
    x: &DMatrix<f64>,
    y: &[bool],
    config: &LogisticConfig,
) -> Result<LogisticModel, ProbeError> {
    if x.nrows() != y.len() {
        return Err(ProbeError::ShapeMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if !(y.iter().any(|&v| v) && y.iter().any(|&v| !v)) {
        return Err(ProbeError::SingleClass);
    }
    if config.l2_lambda < 0.0 || config.tol.is_nan() || config.tol <= 0.0 {
        return Err(ProbeError::Config(format!(
            "l2_lambda {} must be non-negative and tol {} positive",
            config.l2_lambda, config.tol
        )));
    }
    let k = x.ncols();
    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let (mut loss, mut gw, mut gb) = loss_and_grad(x, y, &w, b, config.l2_lambda);
    if !loss.is_finite() {
        return Err(ProbeError::NonFiniteLoss);
    }
    let mut loss_trace = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut n_iters = 0;

    while n_iters < config.max_iters {
        let gnorm_inf = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gnorm_inf < config.tol {
            converged = true;
            break;
        }
        let gnorm2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        step *= 2.0;
        let accepted = loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
            let b_new = b - step * gb;
            let (l_new, gw_new, gb_new) = loss_and_grad(x, y, &w_new, b_new, config.l2_lambda);
            if l_new.is_finite() && l_new <= loss - ARMIJO_C * step * gnorm2 {
                break Some((w_new, b_new, l_new, gw_new, gb_new));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((w_new, b_new, l_new, gw_new, gb_new)) = accepted else {
            break;
        };
        w = w_new;
        b = b_new;
        loss = l_new;
        gw = gw_new;
        gb = gb_new;
        loss_trace.push(loss);
        n_iters += 1;
    }
    if !converged {
        let gnorm_inf = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        converged = gnorm_inf < config.tol;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(ProbeError::NonFiniteLoss);
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        l2_lambda: config.l2_lambda,
        converged,
        n_iters,
        loss_trace,
    })
}
