use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::{check_features, class_counts, FeaturePrep, LinearScorer};
use crate::error::{Error, Result};
use crate::tensorkit::{sym_eig, SymmetricMatrix};

/// Covariance shrinkage towards a scaled identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shrinkage {
    LedoitWolf,
    Fixed(f64),
}

/// Ledoit-Wolf shrinkage intensity for already centered rows `z`, given
/// `s = zᵀz / n`.
pub fn ledoit_wolf_gamma(z: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let (n, d) = (z.nrows() as f64, z.ncols() as f64);
    let mu = s.trace() / d;
    let s_sq: f64 = s.iter().map(|v| v * v).sum();
    let quartic: f64 = z.row_iter().map(|r| r.norm_squared().powi(2)).sum();
    let beta = (quartic / n - s_sq) / (n * d);
    let delta = (s_sq - 2.0 * mu * s.trace() + d * mu * mu) / d;
    if delta <= 0.0 {
        return 0.0;
    }
    (beta.min(delta) / delta).clamp(0.0, 1.0)
}

fn class_means(x: &DMatrix<f64>, labels: &[u8]) -> (DVector<f64>, DVector<f64>) {
    let d = x.ncols();
    let mut mu = [DVector::zeros(d), DVector::zeros(d)];
    let mut n = [0.0; 2];
    for (i, &l) in labels.iter().enumerate() {
        mu[l as usize] += x.row(i).transpose();
        n[l as usize] += 1.0;
    }
    let [m0, m1] = mu;
    (m0 / n[0], m1 / n[1])
}

/// LDA on the pooled within-class covariance with the given shrinkage.
/// Returns the scorer and the shrinkage intensity used.
pub fn fit_lda(x: &DMatrix<f64>, labels: &[u8], shrinkage: Shrinkage) -> Result<(LinearScorer, f64)> {
    check_features(x, labels)?;
    let (n0, n1) = class_counts(labels)?;
    if n0 < 2 || n1 < 2 {
        return Err(Error::DegenerateLabels(format!("need two trials per class, got {n0}/{n1}")));
    }
    let (m0, m1) = class_means(x, labels);
    let mut z = x.clone();
    for (i, &l) in labels.iter().enumerate() {
        let m = if l == 1 { &m1 } else { &m0 };
        let mut row = z.row_mut(i);
        row -= m.transpose();
    }
    let n = x.nrows() as f64;
    let s = (z.transpose() * &z) / n;
    let gamma = match shrinkage {
        Shrinkage::LedoitWolf => ledoit_wolf_gamma(&z, &s),
        Shrinkage::Fixed(g) if (0.0..=1.0).contains(&g) => g,
        Shrinkage::Fixed(g) => return Err(Error::InvalidInput(format!("shrinkage {g} outside [0, 1]"))),
    };
    let d = x.ncols();
    let mu = s.trace() / d as f64;
    let sigma = s * (1.0 - gamma) + DMatrix::identity(d, d) * (gamma * mu);
    let diff = &m1 - &m0;
    let w = sigma
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("shrunk covariance".into()))?
        .solve(&diff);
    let bias = -w.dot(&(&m0 + &m1)) / 2.0;
    let scorer = LinearScorer::new(w.iter().copied().collect(), bias)?;
    Ok((scorer, gamma))
}

pub fn fit_shrinkage_lda(x: &DMatrix<f64>, labels: &[u8]) -> Result<LinearScorer> {
    Ok(fit_lda(x, labels, Shrinkage::LedoitWolf)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwldaOptions {
    pub p_enter: f64,
    pub p_remove: f64,
    pub max_terms: usize,
}

impl Default for SwldaOptions {
    fn default() -> Self {
        Self {
            p_enter: 0.10,
            p_remove: 0.15,
            max_terms: 60,
        }
    }
}

fn f_pvalue(f: f64, dof: usize) -> f64 {
    if !f.is_finite() {
        return 0.0;
    }
    FisherSnedecor::new(1.0, dof as f64).map_or(1.0, |dist| dist.sf(f.max(0.0)))
}

/// Least-squares fit restricted to the columns `sel` of the augmented Gram
/// system: returns (inverse Gram block, coefficients, RSS).
fn restricted_fit(g: &DMatrix<f64>, c: &DVector<f64>, yy: f64, sel: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let k = sel.len();
    let gs = DMatrix::from_fn(k, k, |i, j| g[(sel[i], sel[j])]);
    let cs = DVector::from_fn(k, |i, _| c[sel[i]]);
    let inv = gs
        .cholesky()
        .ok_or_else(|| Error::Numerical("collinear stepwise design".into()))?
        .inverse();
    let beta = &inv * &cs;
    let rss = (yy - cs.dot(&beta)).max(0.0);
    Ok((inv, beta, rss))
}

/// Stepwise regression of ±1 labels on the features with forward entry and
/// backward removal by partial F-test. Unselected weights are exactly zero.
pub fn fit_swlda(x: &DMatrix<f64>, labels: &[u8], opts: &SwldaOptions) -> Result<LinearScorer> {
    check_features(x, labels)?;
    class_counts(labels)?;
    if !(opts.p_enter > 0.0 && opts.p_enter <= opts.p_remove && opts.p_remove < 1.0) {
        return Err(Error::validation("swlda", "need 0 < p_enter <= p_remove < 1"));
    }
    let (n, d) = x.shape();
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    a.columns_mut(1, d).copy_from(x);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }));
    let g = a.transpose() * &a;
    let c = a.transpose() * &y;
    let yy = y.norm_squared();

    let mut sel = vec![0usize];
    let step_cap = 10 * opts.max_terms + 10;
    for _ in 0..step_cap {
        let (inv, beta, rss) = restricted_fit(&g, &c, yy, &sel)?;
        let dof = n.saturating_sub(sel.len());
        if sel.len() > 1 && dof > 0 {
            let s2 = rss / dof as f64;
            let (worst, p) = (1..sel.len())
                .map(|k| (k, f_pvalue(beta[k] * beta[k] / inv[(k, k)] / s2, dof)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("model has a feature");
            if p > opts.p_remove {
                sel.remove(worst);
                continue;
            }
        }
        if sel.len() > opts.max_terms || dof < 2 {
            break;
        }
        let dof_new = dof - 1;
        let mut best: Option<(usize, f64)> = None;
        for j in 1..=d {
            if sel.contains(&j) {
                continue;
            }
            let gj = DVector::from_fn(sel.len(), |i, _| g[(j, sel[i])]);
            let den = g[(j, j)] - gj.dot(&(&inv * &gj));
            if den <= 1e-10 * g[(j, j)].max(f64::MIN_POSITIVE) {
                continue;
            }
            let num = (c[j] - gj.dot(&beta)).powi(2);
            let rss_new = rss - num / den;
            let f = if rss_new > 0.0 {
                num / den / (rss_new / dof_new as f64)
            } else {
                f64::INFINITY
            };
            let p = f_pvalue(f, dof_new);
            if best.is_none_or(|(_, bp)| p < bp) {
                best = Some((j, p));
            }
        }
        match best {
            Some((j, p)) if p < opts.p_enter => sel.push(j),
            _ => break,
        }
    }
    if sel.len() == 1 {
        return Err(Error::EmptyModel);
    }
    let (_, beta, _) = restricted_fit(&g, &c, yy, &sel)?;
    let mut w = vec![0.0; d];
    for (k, &j) in sel.iter().enumerate().skip(1) {
        w[j - 1] = beta[k];
    }
    LinearScorer::new(w, beta[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BldaOptions {
    /// Relative change of both hyperparameters that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep the prior precision fixed instead of re-estimating it.
    pub fixed_alpha: Option<f64>,
}

impl Default for BldaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            fixed_alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BldaFit {
    pub scorer: LinearScorer,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Noise precision after each iteration.
    pub beta_trace: Vec<f64>,
}

/// Bayesian linear regression with evidence maximization of the prior
/// precision `alpha` and noise precision `beta`. The intercept is left
/// unregularized by centering.
pub fn blda_regression(x: &DMatrix<f64>, t: &[f64], opts: &BldaOptions) -> Result<BldaFit> {
    let (n, d) = x.shape();
    if t.len() != n || n < 2 {
        return Err(Error::Shape(format!("{n} rows, {} targets", t.len())));
    }
    if !x.iter().chain(t).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature or target".into()));
    }
    let xm = x.row_mean();
    let tm = t.iter().sum::<f64>() / n as f64;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &xm;
    }
    let tc = DVector::from_iterator(n, t.iter().map(|v| v - tm));
    let eig = sym_eig(&SymmetricMatrix::symmetrize(xc.transpose() * &xc))?;
    let ev: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let v = eig.vectors;
    let xv = &xc * &v;
    let p = xv.transpose() * &tc;

    let var_t = tc.norm_squared() / n as f64;
    let mut alpha = opts.fixed_alpha.unwrap_or(1.0);
    let mut beta = if var_t > 0.0 { 1.0 / var_t } else { 1.0 };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // Residuals at rounding level mean the targets are fitted exactly.
    let floor = (f64::EPSILON * tc.norm()).powi(2) * n as f64;
    let coeffs = |alpha: f64, beta: f64| DVector::from_fn(d, |i, _| beta * p[i] / (beta * ev[i] + alpha));
    while iterations < opts.max_iter {
        iterations += 1;
        let m = coeffs(alpha, beta);
        let gamma: f64 = ev.iter().map(|&e| beta * e / (beta * e + alpha)).sum();
        let err = (&tc - &xv * &m).norm_squared();
        if err <= floor {
            converged = true;
            break;
        }
        let new_alpha = match opts.fixed_alpha {
            Some(a) => a,
            None => gamma / m.norm_squared().max(f64::MIN_POSITIVE),
        };
        let new_beta = (n as f64 - gamma) / err;
        if !new_alpha.is_finite() || !new_beta.is_finite() || new_beta <= 0.0 {
            break;
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
        let done = rel(new_alpha, alpha) < opts.tol && rel(new_beta, beta) < opts.tol;
        alpha = new_alpha;
        beta = new_beta;
        trace.push(beta);
        if done {
            converged = true;
            break;
        }
    }
    let w = &v * coeffs(alpha, beta);
    let bias = tm - w.dot(&xm.transpose());
    Ok(BldaFit {
        scorer: LinearScorer::new(w.iter().copied().collect(), bias)?,
        alpha,
        beta,
        iterations,
        converged,
        beta_trace: trace,
    })
}

/// BLDA on ±1 class targets.
pub fn fit_blda(x: &DMatrix<f64>, labels: &[u8], opts: &BldaOptions) -> Result<BldaFit> {
    check_features(x, labels)?;
    class_counts(labels)?;
    let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    blda_regression(x, &t, opts)
}

impl LinearScorer {
    pub(crate) fn with_prep(mut self, prep: FeaturePrep) -> Self {
        self.prep = prep;
        self
    }
}
