use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use super::midranks;
use crate::error::{Error, Result};

/// Exact null distribution is used up to this many nonzero differences.
const WILCOXON_EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Friedman rank test on a `subjects × methods` matrix (rows are blocks).
///
/// Uses within-row midranks and the uncorrected statistic
/// `12n/(k(k+1)) Σ R̄ⱼ² − 3n(k+1)` with the χ²(k−1) upper tail.
pub fn friedman(matrix: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = matrix.len();
    let k = matrix.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::UndefinedMetric(format!(
            "Friedman test needs ≥2 subjects and ≥2 methods, got {n}×{k}"
        )));
    }
    if matrix.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged Friedman matrix".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in Friedman matrix".into()));
    }
    let mut mean_ranks = vec![0.0; k];
    for row in matrix {
        for (j, r) in midranks(row).into_iter().enumerate() {
            mean_ranks[j] += r / n as f64;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let chi2 = (12.0 * nf / (kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let df = k - 1;
    Ok(FriedmanResult {
        chi2,
        df,
        p_value: chi2_upper_tail(chi2, df),
    })
}

/// Upper tail of the χ² distribution with `df` degrees of freedom.
pub fn chi2_upper_tail(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
    /// `a` tends to fall below `b`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)` for two-sided tests, `W+` otherwise.
    pub statistic: f64,
    /// Number of nonzero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on paired samples. Zero differences are
/// dropped; ties get midranks. Exact for up to 20 nonzero differences,
/// normal approximation with continuity correction above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired samples", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::UndefinedMetric("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX_N {
        let upper = wilcoxon_exact_upper_tail(&ranks, w_plus);
        let lower = wilcoxon_exact_upper_tail(&ranks, w_minus);
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let sd = var.sqrt();
        let normal = Normal::standard();
        let upper = 1.0 - normal.cdf((w_plus - mean - 0.5) / sd);
        let lower = normal.cdf((w_plus - mean + 0.5) / sd);
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, false)
    };

    let statistic = match alternative {
        Alternative::TwoSided => w_plus.min(w_minus),
        _ => w_plus,
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        statistic,
        n,
        p_value,
        exact,
    })
}

/// `P(W ≥ w)` under the sign-flip null for the given (mid)ranks, computed
/// by exact enumeration of the rank-sum distribution over all `2ⁿ` sign
/// patterns. Ranks are doubled so midranks stay integral.
pub fn wilcoxon_exact_upper_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0.0_f64; max_sum + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2 = (2.0 * w).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    counts.iter().skip(w2).sum::<f64>() / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with n−2 df.
    pub p_value: f64,
    /// One-sided p-value for a positive association.
    pub p_positive: f64,
}

/// Spearman rank correlation (midranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedMetric("Spearman needs at least 3 pairs".into()));
    }
    let rx = midranks(x);
    let ry = midranks(y);
    let m = (n as f64 + 1.0) / 2.0;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("constant input to Spearman".into()));
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = n as f64 - 2.0;
    let (p_value, p_positive) = if rho.abs() >= 1.0 {
        (0.0, if rho > 0.0 { 0.0 } else { 1.0 })
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
        let upper = 1.0 - dist.cdf(t);
        ((2.0 * upper.min(1.0 - upper)).min(1.0), upper)
    };
    Ok(SpearmanResult {
        rho,
        p_value,
        p_positive,
    })
}
