use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_features, class_counts, LinearScorer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticNetOptions {
    pub alpha: f64,
    pub l1_ratio: f64,
    /// Largest coefficient change of a full sweep that ends the descent.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ElasticNetOptions {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            l1_ratio: 0.5,
            tol: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Minimizes `1/(2n)‖y − Xw − b‖² + α·ρ‖w‖₁ + α(1−ρ)/2‖w‖²` by cyclic
/// coordinate descent on centered data.
pub fn fit_elastic_net(x: &DMatrix<f64>, y: &[f64], opts: &ElasticNetOptions) -> Result<LinearScorer> {
    let (n, d) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::Shape(format!("{n} rows, {} targets", y.len())));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature or target".into()));
    }
    if !(opts.alpha >= 0.0 && (0.0..=1.0).contains(&opts.l1_ratio) && opts.tol > 0.0) {
        return Err(Error::validation("elastic_net", "need alpha >= 0, l1_ratio in [0, 1], tol > 0"));
    }
    let nf = n as f64;
    let xm = x.row_mean();
    let ym = y.iter().sum::<f64>() / nf;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &xm;
    }
    let mut r = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let sq: Vec<f64> = xc.column_iter().map(|c| c.norm_squared() / nf).collect();
    let l1 = opts.alpha * opts.l1_ratio;
    let l2 = opts.alpha * (1.0 - opts.l1_ratio);
    let mut w = vec![0.0; d];
    for _ in 0..opts.max_sweeps {
        let mut max_delta = 0.0_f64;
        for j in 0..d {
            if sq[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let old = w[j];
            let rho = col.dot(&r) / nf + sq[j] * old;
            let new = soft_threshold(rho, l1) / (sq[j] + l2);
            if new != old {
                r.axpy(old - new, &col, 1.0);
                w[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        if max_delta < opts.tol {
            break;
        }
    }
    let bias = ym - w.iter().zip(xm.iter()).map(|(a, b)| a * b).sum::<f64>();
    LinearScorer::new(w, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmOptions {
    pub c: f64,
    pub epochs: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self { c: 1.0, epochs: 2000 }
    }
}

/// Linear SVM minimizing `½‖w‖² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))` by
/// full-batch subgradient steps of size `1/(λt)` with `λ = 1/(Cn)`,
/// projection onto the `1/√λ` ball and averaging over the second half of
/// the run. The bias is an extra regularized input fixed at one.
pub fn fit_linear_svm(x: &DMatrix<f64>, labels: &[u8], opts: &SvmOptions) -> Result<LinearScorer> {
    check_features(x, labels)?;
    class_counts(labels)?;
    if !(opts.c > 0.0 && opts.epochs > 0) {
        return Err(Error::validation("svm", "need c > 0 and epochs > 0"));
    }
    let (n, d) = x.shape();
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let lambda = 1.0 / (opts.c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = DVector::<f64>::zeros(d + 1);
    let mut avg = DVector::<f64>::zeros(d + 1);
    let mut n_avg = 0.0;
    let mut grad = DVector::<f64>::zeros(d + 1);
    for t in 1..=opts.epochs {
        let wx = x * w.rows(0, d) + DVector::from_element(n, w[d]);
        grad.fill(0.0);
        for i in 0..n {
            if y[i] * wx[i] < 1.0 {
                grad.rows_mut(0, d).axpy(y[i], &x.row(i).transpose(), 1.0);
                grad[d] += y[i];
            }
        }
        let eta = 1.0 / (lambda * t as f64);
        w *= 1.0 - eta * lambda;
        w.axpy(eta / n as f64, &grad, 1.0);
        let norm = w.norm();
        if norm > radius {
            w *= radius / norm;
        }
        if 2 * t > opts.epochs {
            avg += &w;
            n_avg += 1.0;
        }
    }
    avg /= n_avg;
    LinearScorer::new(avg.rows(0, d).iter().copied().collect(), avg[d])
}
