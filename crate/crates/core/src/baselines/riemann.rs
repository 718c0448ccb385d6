use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::heads::{fit_elastic_net, fit_linear_svm, ElasticNetOptions, SvmOptions};
use super::{class_counts, LinearScorer};
use crate::error::{Error, Result};
use crate::sigproc::EpochTensor;
use crate::tensorkit::{gen_eig_spd, spd_expm, spd_invsqrt, spd_logm, spd_sqrtm, SymmetricMatrix, SPD_FLOOR};

const KARCHER_MAX_ITER: usize = 50;
const KARCHER_TOL: f64 = 1e-9;

fn load_diagonal(mut m: DMatrix<f64>) -> SymmetricMatrix {
    let n = m.nrows();
    let eps = SPD_FLOOR * (m.trace() / n as f64).max(f64::MIN_POSITIVE);
    for i in 0..n {
        m[(i, i)] += eps;
    }
    SymmetricMatrix::symmetrize(m)
}

fn trial_matrix(e: &EpochTensor, i: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(e.n_channels, e.n_samples, e.trial(i))
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Spatial filters per class and the filtered class-average responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Xdawn {
    pub n_filters: usize,
    /// One row per filter over channels; non-target filters first.
    pub filters: Vec<Vec<f64>>,
    /// Filtered class averages, rows aligned with `filters`.
    pub prototypes: Vec<Vec<f64>>,
    /// Generalized eigenvalues of the retained filters.
    pub eigenvalues: Vec<f64>,
}

/// Residual of one generalized eigenpair, relative to the operator scale.
pub fn gen_eig_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &[f64], lambda: f64) -> f64 {
    let v = nalgebra::DVector::from_column_slice(v);
    let r = a * &v - b * &v * lambda;
    r.norm() / ((a.norm() + lambda.abs() * b.norm()) * v.norm())
}

/// Class-average response of one class, channels × samples.
pub fn class_average(e: &EpochTensor, label: u8) -> Result<DMatrix<f64>> {
    let idx: Vec<usize> = (0..e.n_trials).filter(|&i| e.labels[i] == label).collect();
    if idx.is_empty() {
        return Err(Error::DegenerateLabels(format!("no trials with label {label}")));
    }
    let mut p = DMatrix::zeros(e.n_channels, e.n_samples);
    for &i in &idx {
        p += trial_matrix(e, i);
    }
    Ok(p / idx.len() as f64)
}

/// Channel covariance of all trials concatenated in time.
pub fn noise_covariance(e: &EpochTensor) -> SymmetricMatrix {
    let (c, t) = (e.n_channels, e.n_samples);
    let mut mean = vec![0.0; c];
    for i in 0..e.n_trials {
        for (ch, row) in e.trial(i).chunks(t).enumerate() {
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    let total = (e.n_trials * t) as f64;
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = DMatrix::zeros(c, c);
    for i in 0..e.n_trials {
        let mut x = trial_matrix(e, i);
        for (ch, mut row) in x.row_iter_mut().enumerate() {
            row.add_scalar_mut(-mean[ch]);
        }
        cov.gemm(1.0, &x, &x.transpose(), 1.0);
    }
    load_diagonal(cov / total)
}

/// Fit xDAWN: for each class, the top generalized eigenvectors of the
/// class-average covariance against the covariance of all data.
pub fn fit_xdawn(e: &EpochTensor, n_filters: usize) -> Result<Xdawn> {
    e.validate()?;
    class_counts(&e.labels)?;
    if n_filters == 0 || n_filters > e.n_channels {
        return Err(Error::InvalidInput(format!(
            "n_filters {n_filters} must be in 1..={}",
            e.n_channels
        )));
    }
    let noise = noise_covariance(e);
    let mut filters = Vec::new();
    let mut prototypes = Vec::new();
    let mut eigenvalues = Vec::new();
    for label in [0u8, 1] {
        let p = class_average(e, label)?;
        let signal = SymmetricMatrix::symmetrize(&p * p.transpose() / e.n_samples as f64);
        let eig = gen_eig_spd(&signal, &noise)?;
        let w = eig.vectors.columns(0, n_filters).transpose();
        prototypes.extend(matrix_to_rows(&(&w * &p)));
        filters.extend(matrix_to_rows(&w.into_owned()));
        eigenvalues.extend_from_slice(&eig.values[..n_filters]);
    }
    Ok(Xdawn {
        n_filters,
        filters,
        prototypes,
        eigenvalues,
    })
}

impl Xdawn {
    pub fn filter_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.filters)
    }

    /// Size of the augmented covariance.
    pub fn cov_dim(&self) -> usize {
        self.filters.len() + self.prototypes.len()
    }

    /// Covariance of `[prototypes; filtered trial]` for every trial.
    pub fn covariances(&self, e: &EpochTensor) -> Result<Vec<SymmetricMatrix>> {
        let w = self.filter_matrix();
        if w.ncols() != e.n_channels {
            return Err(Error::Shape(format!("filters span {} channels, got {}", w.ncols(), e.n_channels)));
        }
        let proto = rows_to_matrix(&self.prototypes);
        if proto.ncols() != e.n_samples {
            return Err(Error::Shape(format!(
                "prototypes span {} samples, got {}",
                proto.ncols(),
                e.n_samples
            )));
        }
        let (k, m, t) = (proto.nrows(), self.cov_dim(), e.n_samples);
        (0..e.n_trials)
            .map(|i| {
                let mut z = DMatrix::zeros(m, t);
                z.rows_mut(0, k).copy_from(&proto);
                z.rows_mut(k, m - k).copy_from(&(&w * trial_matrix(e, i)));
                for mut row in z.row_iter_mut() {
                    let mean = row.mean();
                    row.add_scalar_mut(-mean);
                }
                let cov = &z * z.transpose() / (t.max(2) - 1) as f64;
                Ok(load_diagonal(cov))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentMetric {
    LogEuclidean,
    Riemann,
}

/// Upper triangle, row by row, with off-diagonal entries weighted by √2 so
/// the Euclidean norm equals the Frobenius norm.
pub fn upper_vec(s: &DMatrix<f64>) -> Vec<f64> {
    let m = s.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        out.push(s[(i, i)]);
        for j in i + 1..m {
            out.push(std::f64::consts::SQRT_2 * s[(i, j)]);
        }
    }
    out
}

pub fn log_euclidean_mean(covs: &[SymmetricMatrix]) -> Result<SymmetricMatrix> {
    let Some(first) = covs.first() else {
        return Err(Error::InvalidInput("mean of zero matrices".into()));
    };
    let mut acc = DMatrix::zeros(first.n(), first.n());
    for c in covs {
        acc += spd_logm(c)?.matrix();
    }
    spd_expm(&SymmetricMatrix::symmetrize(acc / covs.len() as f64))
}

/// Affine-invariant (Karcher) mean by fixed-point iteration from the
/// log-Euclidean mean.
pub fn riemann_mean(covs: &[SymmetricMatrix]) -> Result<SymmetricMatrix> {
    let mut g = log_euclidean_mean(covs)?;
    let n = g.n();
    for _ in 0..KARCHER_MAX_ITER {
        let half = spd_sqrtm(&g)?;
        let inv_half = spd_invsqrt(&g)?;
        let mut t = DMatrix::zeros(n, n);
        for c in covs {
            let w = SymmetricMatrix::symmetrize(inv_half.matrix() * c.matrix() * inv_half.matrix());
            t += spd_logm(&w)?.matrix();
        }
        t /= covs.len() as f64;
        let step = t.norm();
        let e = spd_expm(&SymmetricMatrix::symmetrize(t))?;
        g = SymmetricMatrix::symmetrize(half.matrix() * e.matrix() * half.matrix());
        if step < KARCHER_TOL {
            break;
        }
    }
    Ok(g)
}

/// Tangent-space map at a reference SPD matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentSpace {
    pub metric: TangentMetric,
    pub dim: usize,
    /// Reference matrix, row-major.
    pub reference: Vec<f64>,
}

impl TangentSpace {
    pub fn new(metric: TangentMetric, reference: &SymmetricMatrix) -> Self {
        Self {
            metric,
            dim: reference.n(),
            reference: reference.matrix().transpose().iter().copied().collect(),
        }
    }

    /// Reference at the metric's mean of the training covariances.
    pub fn fit(metric: TangentMetric, covs: &[SymmetricMatrix]) -> Result<Self> {
        let g = match metric {
            TangentMetric::LogEuclidean => log_euclidean_mean(covs)?,
            TangentMetric::Riemann => riemann_mean(covs)?,
        };
        Ok(Self::new(metric, &g))
    }

    pub fn reference_matrix(&self) -> Result<SymmetricMatrix> {
        SymmetricMatrix::from_row_slice(self.dim, &self.reference)
    }

    pub fn feature_len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    /// log-Euclidean: `logm(S) − logm(G)`; Riemann: `logm(G^{-1/2} S G^{-1/2})`.
    pub fn transform(&self, covs: &[SymmetricMatrix]) -> Result<DMatrix<f64>> {
        let g = self.reference_matrix()?;
        let mut out = DMatrix::zeros(covs.len(), self.feature_len());
        let project: Box<dyn Fn(&SymmetricMatrix) -> Result<DMatrix<f64>>> = match self.metric {
            TangentMetric::LogEuclidean => {
                let log_g = spd_logm(&g)?.into_matrix();
                Box::new(move |s| Ok(spd_logm(s)?.into_matrix() - &log_g))
            }
            TangentMetric::Riemann => {
                let ih = spd_invsqrt(&g)?.into_matrix();
                Box::new(move |s| {
                    let w = SymmetricMatrix::symmetrize(&ih * s.matrix() * &ih);
                    Ok(spd_logm(&w)?.into_matrix())
                })
            }
        };
        for (i, s) in covs.iter().enumerate() {
            if s.n() != self.dim {
                return Err(Error::Shape(format!("covariance {}x{} vs reference {}", s.n(), s.n(), self.dim)));
            }
            let v = upper_vec(&project(s)?);
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalizer {
    /// Each feature vector divided by its L1 norm.
    L1,
    /// Per-feature standardization with training statistics.
    Zscore { mean: Vec<f64>, std: Vec<f64> },
}

impl Normalizer {
    pub fn fit_zscore(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let std = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer::Zscore { mean, std }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = x.clone();
        match self {
            Normalizer::L1 => {
                for mut row in out.row_iter_mut() {
                    let s = row.iter().map(|v| v.abs()).sum::<f64>();
                    if s > 0.0 {
                        row /= s;
                    }
                }
            }
            Normalizer::Zscore { mean, std } => {
                if mean.len() != x.ncols() {
                    return Err(Error::Shape(format!("normalizer has {} features, got {}", mean.len(), x.ncols())));
                }
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col.apply(|v| *v = (*v - mean[j]) / std[j]);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ElasticNet,
    LinearSvm,
}

/// xDAWN covariances, tangent-space features, normalization and a linear
/// head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiemannPipeline {
    pub xdawn: Xdawn,
    pub tangent: TangentSpace,
    pub normalizer: Normalizer,
    pub head_kind: HeadKind,
    pub head: LinearScorer,
}

impl RiemannPipeline {
    pub fn fit(
        e: &EpochTensor,
        n_filters: usize,
        metric: TangentMetric,
        head_kind: HeadKind,
        en: &ElasticNetOptions,
        svm: &SvmOptions,
    ) -> Result<Self> {
        let xdawn = fit_xdawn(e, n_filters)?;
        let covs = xdawn.covariances(e)?;
        let tangent = TangentSpace::fit(metric, &covs)?;
        let feats = tangent.transform(&covs)?;
        let normalizer = match head_kind {
            HeadKind::ElasticNet => Normalizer::L1,
            HeadKind::LinearSvm => Normalizer::fit_zscore(&feats),
        };
        let x = normalizer.apply(&feats)?;
        let head = match head_kind {
            HeadKind::ElasticNet => {
                let y: Vec<f64> = e.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
                fit_elastic_net(&x, &y, en)?
            }
            HeadKind::LinearSvm => fit_linear_svm(&x, &e.labels, svm)?,
        };
        Ok(Self {
            xdawn,
            tangent,
            normalizer,
            head_kind,
            head,
        })
    }

    pub fn features(&self, e: &EpochTensor) -> Result<DMatrix<f64>> {
        let covs = self.xdawn.covariances(e)?;
        self.normalizer.apply(&self.tangent.transform(&covs)?)
    }

    pub fn scores(&self, e: &EpochTensor) -> Result<Vec<f64>> {
        self.head.decision(&self.features(e)?)
    }

    pub fn param_count(&self) -> usize {
        self.xdawn.filters.iter().map(Vec::len).sum::<usize>() + self.head.param_count()
    }
}
