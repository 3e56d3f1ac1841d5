use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Coefficient of `0.5 * |w|^2` added to the mean log-loss; the bias is not penalized.
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// z-score features with training-split statistics before fitting.
    pub standardize: bool,
    /// Survival outcomes become "event within this many days" for the head.
    pub horizon_days: u32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            max_iter: 10_000,
            grad_tol: 1e-6,
            standardize: true,
            horizon_days: 365,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) || self.max_iter == 0 || self.grad_tol <= 0.0 {
            return Err(NepError::InvalidConfig(
                "head: l2 must be finite and >= 0, max_iter >= 1, grad_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean log-loss plus `0.5 * l2 * |w|^2`, with its gradient `(dw, db)`.
pub fn logistic_objective(
    x: ArrayView2<f64>,
    y: &[bool],
    w: ArrayView1<f64>,
    b: f64,
    l2: f64,
) -> (f64, Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let z = x.dot(&w) + b;
    let mut loss = 0.0;
    let mut resid = Array1::zeros(z.len());
    for (i, &zi) in z.iter().enumerate() {
        let yi = if y[i] { 1.0 } else { 0.0 };
        loss += softplus(zi) - yi * zi;
        resid[i] = (sigmoid(zi) - yi) / n;
    }
    let gw = x.t().dot(&resid) + &w * l2;
    let gb = resid.sum();
    (loss / n + 0.5 * l2 * w.dot(&w), gw, gb)
}

/// Full-batch gradient descent with Armijo backtracking. Each step starts
/// from twice the previous accepted step size.
pub fn train_logistic(x: ArrayView2<f64>, y: &[bool], cfg: &HeadConfig) -> Result<LogisticModel> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(NepError::Validation(format!(
            "{} rows for {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(NepError::SingleClass);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NepError::Validation(
            "features contain NaN or infinite values".into(),
        ));
    }
    let d = x.ncols();
    let (mean, scale) = if cfg.standardize {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let sd = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        (mean, sd)
    } else {
        (Array1::zeros(d), Array1::ones(d))
    };
    let xs = (&x - &mean) / &scale;

    let mut w = Array1::<f64>::zeros(d);
    let prior = n_pos as f64 / y.len() as f64;
    let mut b = (prior / (1.0 - prior)).ln();
    let (mut f, mut gw, mut gb) = logistic_objective(xs.view(), y, w.view(), b, cfg.l2);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gnorm = (gw.dot(&gw) + gb * gb).sqrt();
    while gnorm >= cfg.grad_tol && iterations < cfg.max_iter {
        let g2 = gnorm * gnorm;
        step *= 2.0;
        loop {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let (f_new, gw_new, gb_new) =
                logistic_objective(xs.view(), y, w_new.view(), b_new, cfg.l2);
            if f_new <= f - 1e-4 * step * g2 || step < 1e-12 {
                w = w_new;
                b = b_new;
                f = f_new;
                gw = gw_new;
                gb = gb_new;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        gnorm = (gw.dot(&gw) + gb * gb).sqrt();
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        mean,
        scale,
        iterations,
        grad_norm: gnorm,
    })
}

impl LogisticModel {
    pub fn decision(&self, x: ArrayView2<f64>) -> Array1<f64> {
        ((&x - &self.mean) / &self.scale).dot(&self.weights) + self.bias
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.decision(x).mapv(sigmoid)
    }
}
