use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decode_epochs, Decoder, SessionPlan};
use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::metrics::{friedman, wilcoxon_signed_rank, Alternative, FriedmanResult, WilcoxonResult};
use crate::neural::TrainConfig;
use crate::rng;
use crate::sigproc::EpochTensor;
use crate::synthgen::{ProtocolConfig, SnrLevel, SubjectProfile};

use super::decoder::all_pipelines;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub pipelines: Vec<String>,
    pub n_subjects: usize,
    pub n_repeats: usize,
    /// Held-out online sessions per subject.
    pub online_sessions: usize,
    pub snr: SnrLevel,
    pub calibration: ProtocolConfig,
    pub online: ProtocolConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub seed: u64,
    /// Record wall-clock training and inference times; off gives
    /// byte-reproducible reports.
    pub host_timing: bool,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            pipelines: all_pipelines().into_iter().map(String::from).collect(),
            n_subjects: 6,
            n_repeats: 30,
            online_sessions: 2,
            snr: SnrLevel::Medium,
            calibration: ProtocolConfig::calibration(),
            online: ProtocolConfig::online(),
            train: TrainConfig::with_epochs(250),
            baselines: BaselineConfig::default(),
            seed: 0,
            host_timing: true,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pipelines.is_empty() {
            return Err(Error::validation("pipelines", "no pipelines"));
        }
        let known = all_pipelines();
        for (i, p) in self.pipelines.iter().enumerate() {
            if !known.contains(&p.as_str()) {
                return Err(Error::validation(format!("pipelines[{i}]"), format!("unknown pipeline `{p}`")));
            }
            if self.pipelines[..i].contains(p) {
                return Err(Error::validation(format!("pipelines[{i}]"), format!("duplicate pipeline `{p}`")));
            }
        }
        for (name, v) in [
            ("n_subjects", self.n_subjects),
            ("n_repeats", self.n_repeats),
            ("online_sessions", self.online_sessions),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        self.train.validate()?;
        let plan = SessionPlan {
            calibration: self.calibration.clone(),
            online: self.online.clone(),
            ..SessionPlan::new(SubjectProfile::generate(0, self.snr, 0)?, &self.pipelines[0], 0)
        };
        plan.validate()
    }

    /// Session plan of subject `s` (zero-based); its seed fixes the
    /// subject's recordings across pipelines and repeats.
    pub fn subject_plan(&self, s: usize) -> Result<SessionPlan> {
        let subject = SubjectProfile::generate(s, self.snr, self.seed)?;
        Ok(SessionPlan {
            calibration: self.calibration.clone(),
            online: self.online.clone(),
            train: self.train.clone(),
            baselines: self.baselines,
            ..SessionPlan::new(subject, &self.pipelines[0], rng::cell_seed(self.seed, "sessions", &[s as u64]))
        })
    }
}

/// One pipeline, subject, repeat and online session. Subjects, sessions
/// and repeats are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub subject: usize,
    pub session: usize,
    pub pipeline: String,
    pub repeat: usize,
    pub ba: f64,
    pub auc: f64,
    pub cdr: f64,
    pub itr: f64,
    pub train_time_s: f64,
    /// Mean decode time per single trial.
    pub infer_ms: f64,
    pub params: usize,
    pub macs: Option<u64>,
    /// `ok` or the error that stopped the cell.
    pub status: String,
}

impl CellRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok { result: T },
    Undefined { reason: String },
}

impl<T> Outcome<T> {
    fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(result) => Outcome::Ok { result },
            Err(e) => Outcome::Undefined { reason: e.to_string() },
        }
    }

    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok { result } => Some(result),
            Outcome::Undefined { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub pipeline: String,
    pub cells: usize,
    pub failed: usize,
    pub ba: MeanStd,
    pub auc: MeanStd,
    pub cdr: MeanStd,
    pub itr: MeanStd,
    pub train_time_s: MeanStd,
    pub infer_ms: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub test: Outcome<WilcoxonResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub pipelines: Vec<PipelineSummary>,
    /// Subjects with results for every pipeline, used by the tests below.
    pub subjects_tested: Vec<usize>,
    /// Friedman test on subject-level means, per metric.
    pub friedman: BTreeMap<String, Outcome<FriedmanResult>>,
    /// Two-sided Wilcoxon signed-rank tests for every pipeline pair.
    pub wilcoxon: Vec<PairTest>,
    pub failed_cells: Vec<String>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<CellRow>,
    pub summary: ComparisonSummary,
}

const TEST_METRICS: [&str; 3] = ["auc", "cdr", "itr"];

fn metric(row: &CellRow, name: &str) -> f64 {
    match name {
        "ba" => row.ba,
        "auc" => row.auc,
        "cdr" => row.cdr,
        "itr" => row.itr,
        "train_time_s" => row.train_time_s,
        "infer_ms" => row.infer_ms,
        _ => unreachable!("known metric"),
    }
}

/// Per-pipeline aggregates and rank tests on subject-level means. Pipelines
/// keep the order of `pipelines`, or first appearance in `rows` if empty.
pub fn summarize(rows: &[CellRow], pipelines: &[String]) -> Result<ComparisonSummary> {
    let mut order: Vec<String> = pipelines.to_vec();
    if order.is_empty() {
        for r in rows {
            if !order.contains(&r.pipeline) {
                order.push(r.pipeline.clone());
            }
        }
    }
    let ok = |p: &str| -> Vec<&CellRow> { rows.iter().filter(|r| r.pipeline == p && r.is_ok()).collect() };
    let per_pipeline = order
        .iter()
        .map(|p| {
            let stat = |m: &str| MeanStd::of(&ok(p).iter().map(|r| metric(r, m)).collect::<Vec<_>>());
            PipelineSummary {
                pipeline: p.clone(),
                cells: rows.iter().filter(|r| &r.pipeline == p).count(),
                failed: rows.iter().filter(|r| &r.pipeline == p && !r.is_ok()).count(),
                ba: stat("ba"),
                auc: stat("auc"),
                cdr: stat("cdr"),
                itr: stat("itr"),
                train_time_s: stat("train_time_s"),
                infer_ms: stat("infer_ms"),
            }
        })
        .collect();

    let mut subjects: Vec<usize> = rows.iter().map(|r| r.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let subject_mean = |p: &str, s: usize, m: &str| {
        let v: Vec<f64> = ok(p).iter().filter(|r| r.subject == s).map(|r| metric(r, m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    subjects.retain(|&s| order.iter().all(|p| subject_mean(p, s, "auc").is_some()));

    let mut friedman_out = BTreeMap::new();
    let mut wilcoxon = Vec::new();
    for m in TEST_METRICS {
        let matrix: Vec<Vec<f64>> = subjects
            .iter()
            .map(|&s| order.iter().map(|p| subject_mean(p, s, m).unwrap_or(f64::NAN)).collect())
            .collect();
        friedman_out.insert(m.to_string(), Outcome::from_result(friedman(&matrix)));
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let a: Vec<f64> = matrix.iter().map(|r| r[i]).collect();
                let b: Vec<f64> = matrix.iter().map(|r| r[j]).collect();
                wilcoxon.push(PairTest {
                    metric: m.to_string(),
                    a: order[i].clone(),
                    b: order[j].clone(),
                    test: Outcome::from_result(wilcoxon_signed_rank(&a, &b, Alternative::TwoSided)),
                });
            }
        }
    }
    let failed_cells: Vec<String> = rows
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("{}/S{}/session{}/repeat{}: {}", r.pipeline, r.subject, r.session, r.repeat, r.status))
        .collect();
    Ok(ComparisonSummary {
        pipelines: per_pipeline,
        subjects_tested: subjects,
        friedman: friedman_out,
        wilcoxon,
        complete: failed_cells.is_empty(),
        failed_cells,
    })
}

struct SubjectData {
    calibration: EpochTensor,
    online: Vec<EpochTensor>,
}

fn subject_data(cfg: &ComparisonConfig, s: usize) -> Result<SubjectData> {
    let plan = cfg.subject_plan(s)?;
    Ok(SubjectData {
        calibration: plan.calibration_epochs()?,
        online: (0..cfg.online_sessions).map(|k| plan.online_epochs(k)).collect::<Result<_>>()?,
    })
}

fn run_cell(cfg: &ComparisonConfig, data: &SubjectData, pipeline: &str, s: usize, r: usize) -> Vec<CellRow> {
    let seed = rng::cell_seed(cfg.seed, &format!("cell/{pipeline}"), &[s as u64, r as u64]);
    let base = |session: usize| CellRow {
        subject: s + 1,
        session: session + 1,
        pipeline: pipeline.to_string(),
        repeat: r + 1,
        ba: f64::NAN,
        auc: f64::NAN,
        cdr: f64::NAN,
        itr: f64::NAN,
        train_time_s: 0.0,
        infer_ms: 0.0,
        params: 0,
        macs: None,
        status: "ok".into(),
    };
    let decoder = match Decoder::fit(pipeline, &data.calibration, &cfg.train, &cfg.baselines, seed) {
        Ok(d) => d,
        Err(e) => {
            return (0..cfg.online_sessions)
                .map(|k| CellRow {
                    status: e.to_string(),
                    ..base(k)
                })
                .collect()
        }
    };
    let timing = |v: f64| if cfg.host_timing { v } else { 0.0 };
    data.online
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut row = CellRow {
                train_time_s: timing(decoder.train_time_s),
                params: decoder.param_count(),
                macs: decoder.macs(),
                ..base(k)
            };
            match decode_epochs(&decoder, e, &cfg.online) {
                Ok(res) => {
                    let total: f64 = res.blocks.iter().map(|b| b.latency_ms).sum();
                    row.infer_ms = timing(total / e.n_trials.max(1) as f64);
                    row.ba = res.report.balanced_accuracy;
                    row.auc = res.report.auc;
                    row.cdr = res.report.command_detection_rate;
                    row.itr = res.report.itr_bits_per_min;
                }
                Err(err) => row.status = err.to_string(),
            }
            row
        })
        .collect()
}

/// Every pipeline × subject × repeat cell, each seeded from its own path so
/// results do not depend on scheduling. `jobs` = 0 uses the global pool.
pub fn run_comparison(cfg: &ComparisonConfig, jobs: usize) -> Result<ComparisonReport> {
    cfg.validate()?;
    let body = || -> Result<ComparisonReport> {
        let data = (0..cfg.n_subjects)
            .into_par_iter()
            .map(|s| subject_data(cfg, s))
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<(usize, usize, usize)> = (0..cfg.pipelines.len())
            .flat_map(|p| (0..cfg.n_subjects).flat_map(move |s| (0..cfg.n_repeats).map(move |r| (p, s, r))))
            .collect();
        let rows: Vec<CellRow> = cells
            .par_iter()
            .map(|&(p, s, r)| run_cell(cfg, &data[s], &cfg.pipelines[p], s, r))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        let summary = summarize(&rows, &cfg.pipelines)?;
        Ok(ComparisonReport { rows, summary })
    };
    if jobs == 0 {
        return body();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
        .install(body)
}

pub fn write_report_csv(rows: &[CellRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CellRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_error)?;
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::validation(format!("row {}", i + 1), e.to_string())))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}
