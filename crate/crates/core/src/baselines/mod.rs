//! Classical single-trial decoders: shrinkage LDA, stepwise LDA and
//! Bayesian LDA on decimated amplitude features, and xDAWN covariances
//! projected to the tangent space with an elastic-net or SVM head.

mod heads;
mod lda;
mod riemann;

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use heads::{fit_elastic_net, fit_linear_svm, ElasticNetOptions, SvmOptions};
pub use lda::{
    blda_regression, fit_blda, fit_lda, fit_shrinkage_lda, fit_swlda, ledoit_wolf_gamma, BldaFit, BldaOptions,
    Shrinkage, SwldaOptions,
};
pub use riemann::{
    class_average, fit_xdawn, gen_eig_residual, log_euclidean_mean, noise_covariance, riemann_mean, upper_vec,
    HeadKind, Normalizer, RiemannPipeline, TangentMetric, TangentSpace, Xdawn,
};

use crate::error::{Error, Result};
use crate::sigproc::{moving_avg_decimate, EpochTensor, Windsorizer};

pub const CLASSICAL_PIPELINES: [&str; 5] = ["shrinkage_lda", "swlda", "blda", "xdawn_ts_en", "xdawn_ts_svm"];

/// Both classes present; returns (non-target, target) counts.
pub(crate) fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::validation("labels", "labels must be 0 or 1"));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::DegenerateLabels(format!("{n0} non-target and {n1} target trials")));
    }
    Ok((n0, n1))
}

pub(crate) fn check_features(x: &DMatrix<f64>, labels: &[u8]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows, {} labels", x.nrows(), labels.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidInput("no features".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature".into()));
    }
    Ok(())
}

/// Per-column standardization with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        match Normalizer::fit_zscore(x) {
            Normalizer::Zscore { mean, std } => Self { mean, std },
            Normalizer::L1 => unreachable!("fit_zscore returns z-score statistics"),
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Normalizer::Zscore {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
        .apply(x)
    }
}

/// Epochs to amplitude features: optional windsorizing, moving-average
/// decimation with channels concatenated, optional standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePrep {
    pub windsor: Option<Windsorizer>,
    pub decimation: usize,
    pub scaler: Option<FeatureScaler>,
}

impl Default for FeaturePrep {
    fn default() -> Self {
        Self {
            windsor: None,
            decimation: 1,
            scaler: None,
        }
    }
}

impl FeaturePrep {
    pub fn transform(&self, e: &EpochTensor) -> Result<DMatrix<f64>> {
        let x = match &self.windsor {
            Some(w) => moving_avg_decimate(&w.apply(e)?, self.decimation)?,
            None => moving_avg_decimate(e, self.decimation)?,
        };
        match &self.scaler {
            Some(s) => s.apply(&x),
            None => Ok(x),
        }
    }
}

/// `score = w·x + b` on prepared features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(default)]
    pub prep: FeaturePrep,
}

impl LinearScorer {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if !weights.iter().all(|v| v.is_finite()) || !bias.is_finite() {
            return Err(Error::Numerical("non-finite linear weights".into()));
        }
        Ok(Self {
            weights,
            bias,
            prep: FeaturePrep::default(),
        })
    }

    /// Scores of already prepared feature rows.
    pub fn decision(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::Shape(format!("{} weights, {} features", self.weights.len(), x.ncols())));
        }
        Ok(x.row_iter()
            .map(|r| r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
            .collect())
    }

    pub fn score_epochs(&self, e: &EpochTensor) -> Result<Vec<f64>> {
        self.decision(&self.prep.transform(e)?)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub decimation: usize,
    /// Lower and upper clipping percentiles for BLDA.
    pub windsor_pct: (f64, f64),
    pub swlda: SwldaOptions,
    pub blda: BldaOptions,
    pub n_filters: usize,
    pub elastic_net: ElasticNetOptions,
    pub svm: SvmOptions,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            decimation: 12,
            windsor_pct: (10.0, 90.0),
            swlda: SwldaOptions::default(),
            blda: BldaOptions::default(),
            n_filters: 4,
            elastic_net: ElasticNetOptions::default(),
            svm: SvmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassicalModel {
    Linear(LinearScorer),
    Riemann(RiemannPipeline),
}

/// A fitted classical pipeline. Scores are decision values thresholded at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalPipeline {
    pub name: String,
    pub model: ClassicalModel,
    /// Fit-time notes such as a stepwise fallback or BLDA non-convergence.
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn is_classical(name: &str) -> bool {
    CLASSICAL_PIPELINES.contains(&name)
}

/// Fit a named classical pipeline on training epochs.
pub fn fit_pipeline(name: &str, e: &EpochTensor, cfg: &BaselineConfig) -> Result<ClassicalPipeline> {
    e.validate()?;
    class_counts(&e.labels)?;
    let mut warnings = Vec::new();
    let decimated = |windsor: Option<Windsorizer>| FeaturePrep {
        windsor,
        decimation: cfg.decimation,
        scaler: None,
    };
    let model = match name {
        "shrinkage_lda" => {
            let prep = decimated(None);
            let x = prep.transform(e)?;
            ClassicalModel::Linear(fit_shrinkage_lda(&x, &e.labels)?.with_prep(prep))
        }
        "swlda" => {
            let mut prep = decimated(None);
            let raw = prep.transform(e)?;
            let scaler = FeatureScaler::fit(&raw);
            let x = scaler.apply(&raw)?;
            prep.scaler = Some(scaler);
            let scorer = match fit_swlda(&x, &e.labels, &cfg.swlda) {
                Err(Error::EmptyModel) => {
                    warnings.push("stepwise selection admitted no feature; fell back to shrinkage LDA".into());
                    fit_shrinkage_lda(&x, &e.labels)?
                }
                other => other?,
            };
            ClassicalModel::Linear(scorer.with_prep(prep))
        }
        "blda" => {
            let w = Windsorizer::fit(e, cfg.windsor_pct.0, cfg.windsor_pct.1)?;
            let prep = decimated(Some(w));
            let x = prep.transform(e)?;
            let fit = fit_blda(&x, &e.labels, &cfg.blda)?;
            if !fit.converged {
                warnings.push(format!("evidence maximization stopped after {} iterations", fit.iterations));
            }
            ClassicalModel::Linear(fit.scorer.with_prep(prep))
        }
        "xdawn_ts_en" | "xdawn_ts_svm" => {
            let (metric, head) = if name == "xdawn_ts_en" {
                (TangentMetric::LogEuclidean, HeadKind::ElasticNet)
            } else {
                (TangentMetric::Riemann, HeadKind::LinearSvm)
            };
            ClassicalModel::Riemann(RiemannPipeline::fit(
                e,
                cfg.n_filters,
                metric,
                head,
                &cfg.elastic_net,
                &cfg.svm,
            )?)
        }
        other => return Err(Error::validation("pipeline", format!("unknown classical pipeline `{other}`"))),
    };
    Ok(ClassicalPipeline {
        name: name.to_string(),
        model,
        warnings,
    })
}

impl ClassicalPipeline {
    pub fn scores(&self, e: &EpochTensor) -> Result<Vec<f64>> {
        match &self.model {
            ClassicalModel::Linear(s) => s.score_epochs(e),
            ClassicalModel::Riemann(p) => p.scores(e),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.model {
            ClassicalModel::Linear(s) => s.param_count(),
            ClassicalModel::Riemann(p) => p.param_count(),
        }
    }
}

/// `<base>.scorer.json` next to `path`, whatever extension it carries.
pub fn scorer_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".scorer.json").unwrap_or(&s);
    PathBuf::from(format!("{base}.scorer.json"))
}

pub fn save_scorer(p: &ClassicalPipeline, path: &Path) -> Result<PathBuf> {
    let out = scorer_path(path);
    std::fs::write(&out, serde_json::to_vec_pretty(p)?)?;
    Ok(out)
}

pub fn load_scorer(path: &Path) -> Result<ClassicalPipeline> {
    let p: ClassicalPipeline = serde_json::from_slice(&std::fs::read(scorer_path(path))?)?;
    if !is_classical(&p.name) {
        return Err(Error::validation("name", format!("unknown classical pipeline `{}`", p.name)));
    }
    Ok(p)
}
