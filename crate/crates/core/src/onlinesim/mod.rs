//! Closed-loop copy-spelling simulation: calibrate a decoder on one
//! synthetic session, decode held-out single-trial sessions block by block,
//! and run pipeline comparison grids.

mod compare;
mod decoder;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use compare::{
    read_report_csv, run_comparison, summarize, write_report_csv, CellRow, ComparisonConfig, ComparisonReport,
    ComparisonSummary, MeanStd, Outcome, PairTest, PipelineSummary,
};
pub use decoder::{all_pipelines, load_decoder, save_decoder, Decoder, DecoderModel};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::metrics::{decide_command, evaluate, spearman, CommandScore, MetricReport, ScoredTrials, SpearmanResult};
use crate::neural::TrainConfig;
use crate::rng;
use crate::sigproc::{online_epochs, EpochTensor};
use crate::synthgen::{ProtocolConfig, ShiftSpec, SubjectProfile, SynthSession};

/// One calibration and one or more single-trial online sessions of a
/// synthetic subject decoded by one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub calibration: ProtocolConfig,
    pub online: ProtocolConfig,
    pub subject: SubjectProfile,
    /// Change of the target responses in the online sessions; `None` uses
    /// the subject's own shift.
    pub shift: Option<ShiftSpec>,
    /// Gain of the target responses in the online sessions.
    pub online_attend_gain: f64,
    pub pipeline: String,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub seed: u64,
}

impl SessionPlan {
    pub fn new(subject: SubjectProfile, pipeline: &str, seed: u64) -> Self {
        Self {
            calibration: ProtocolConfig::calibration(),
            online: ProtocolConfig::online(),
            subject,
            shift: None,
            online_attend_gain: 1.0,
            pipeline: pipeline.to_string(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        self.online.validate()?;
        if self.online.repetitions != 1 {
            return Err(Error::InvalidProtocol(format!(
                "online sessions are single trial, got {} repetitions",
                self.online.repetitions
            )));
        }
        if self.online.n_commands != self.calibration.n_commands {
            return Err(Error::InvalidProtocol("calibration and online command counts differ".into()));
        }
        if !self.online_attend_gain.is_finite() {
            return Err(Error::validation("online_attend_gain", "must be finite"));
        }
        if !all_pipelines().contains(&self.pipeline.as_str()) {
            return Err(Error::validation("pipeline", format!("unknown pipeline `{}`", self.pipeline)));
        }
        self.train.validate()
    }

    /// The calibration session of the plan.
    pub fn calibration_session(&self) -> SynthSession {
        self.subject
            .calibration_session(self.calibration.clone(), rng::sub_seed(self.seed, "calibration"))
    }

    /// Online session `index` of the plan, with its shift and attend gain.
    pub fn online_session(&self, index: usize) -> SynthSession {
        let i = index as u64;
        let mut s = self.subject.online_session(
            self.online.clone(),
            rng::cell_seed(self.seed, "online", &[i]),
            rng::cell_seed(self.seed, "online_noise", &[i]),
        );
        if let Some(shift) = &self.shift {
            s.shift = shift.clone();
        }
        s.attend_gain = vec![self.online_attend_gain];
        s
    }

    /// Filtered and segmented calibration trials.
    pub fn calibration_epochs(&self) -> Result<EpochTensor> {
        online_epochs(&self.calibration_session().render()?)
    }

    /// Filtered and segmented trials of online session `index`.
    pub fn online_epochs(&self, index: usize) -> Result<EpochTensor> {
        online_epochs(&self.online_session(index).render()?)
    }

    pub fn train_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "train")
    }

    /// Fit the plan's pipeline on its calibration session.
    pub fn train_decoder(&self) -> Result<Decoder> {
        self.validate()?;
        let e = self.calibration_epochs()?;
        Decoder::fit(&self.pipeline, &e, &self.train, &self.baselines, self.train_seed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: usize,
    pub target: u8,
    pub decoded: u8,
    pub scores: Vec<CommandScore>,
    /// Wall-clock time to score the block and decide.
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub pipeline: String,
    pub blocks: Vec<BlockResult>,
    pub report: MetricReport,
    /// Blocks times the simulated selection time.
    pub duration_s: f64,
    /// Fingerprint of the calibration z-score used for decoding.
    pub zscore_checksum: u64,
}

impl SessionResult {
    /// The same result with wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.blocks.iter_mut().for_each(|b| b.latency_ms = 0.0);
        out
    }

    pub fn mean_latency_ms(&self) -> f64 {
        self.blocks.iter().map(|b| b.latency_ms).sum::<f64>() / self.blocks.len().max(1) as f64
    }
}

/// Decode prepared online epochs one selection block at a time.
pub fn decode_epochs(decoder: &Decoder, e: &EpochTensor, online: &ProtocolConfig) -> Result<SessionResult> {
    if !decoder.is_fitted() {
        return Err(Error::NotFitted);
    }
    let mut blocks = Vec::new();
    let mut all_scores = vec![0.0; e.n_trials];
    let mut start = 0;
    while start < e.n_trials {
        let b = e.blocks[start];
        let end = (start..e.n_trials).find(|&i| e.blocks[i] != b).unwrap_or(e.n_trials);
        let idx: Vec<usize> = (start..end).collect();
        let t = Instant::now();
        let scores = decoder.scores(&e.select(&idx))?;
        let cs: Vec<CommandScore> = idx
            .iter()
            .zip(&scores)
            .map(|(&i, &score)| CommandScore {
                command: e.command_codes[i],
                score,
            })
            .collect();
        let decoded = decide_command(&cs, online.n_commands)?;
        let latency_ms = t.elapsed().as_secs_f64() * 1e3;
        let target = idx
            .iter()
            .find(|&&i| e.labels[i] == 1)
            .map(|&i| e.command_codes[i])
            .ok_or_else(|| Error::IncompleteBlock(format!("block {b} without target")))?;
        for (&i, &s) in idx.iter().zip(&scores) {
            all_scores[i] = s;
        }
        blocks.push(BlockResult {
            block: b,
            target,
            decoded,
            scores: cs,
            latency_ms,
        });
        start = end;
    }
    let trials = ScoredTrials {
        scores: all_scores,
        labels: e.labels.clone(),
        command_codes: e.command_codes.clone(),
        blocks: e.blocks.clone(),
    };
    let report = evaluate(&trials, decoder.threshold(), online.n_commands, online.selection_time_s())?;
    Ok(SessionResult {
        pipeline: decoder.pipeline.clone(),
        duration_s: blocks.len() as f64 * online.selection_time_s(),
        blocks,
        report,
        zscore_checksum: decoder.zscore.checksum(),
    })
}

/// Decode online session `index` of the plan with a trained decoder.
pub fn decode_session(decoder: &Decoder, plan: &SessionPlan, index: usize) -> Result<SessionResult> {
    if !decoder.is_fitted() {
        return Err(Error::NotFitted);
    }
    plan.validate()?;
    decode_epochs(decoder, &plan.online_epochs(index)?, &plan.online)
}

/// Train on the calibration session and decode the first online session.
pub fn run_session(plan: &SessionPlan) -> Result<SessionResult> {
    let d = plan.train_decoder()?;
    decode_session(&d, plan, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub scale: f64,
    pub detection_rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSweep {
    pub pipeline: String,
    pub points: Vec<SweepPoint>,
    /// Rank correlation between scale and per-session detection rate.
    pub spearman: SpearmanResult,
}

/// Detection rate versus uniform ERP amplitude scale of the online
/// sessions, `seeds` sessions per scale, all decoded by `decoder`.
pub fn shift_sweep(decoder: &Decoder, plan: &SessionPlan, scales: &[f64], seeds: usize) -> Result<ShiftSweep> {
    if scales.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::validation("scales", "scales must lie in [0, 1]"));
    }
    if seeds == 0 || scales.is_empty() {
        return Err(Error::validation("seeds", "need at least one scale and one seed"));
    }
    let points = scales
        .iter()
        .map(|&scale| {
            let p = SessionPlan {
                shift: Some(ShiftSpec::uniform(scale)),
                ..plan.clone()
            };
            let rates = (0..seeds)
                .into_par_iter()
                .map(|k| Ok(decode_session(decoder, &p, k)?.report.command_detection_rate))
                .collect::<Result<Vec<f64>>>()?;
            let ms = MeanStd::of(&rates);
            Ok(SweepPoint {
                scale,
                detection_rates: rates,
                mean: ms.mean,
                std: ms.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .flat_map(|p| p.detection_rates.iter().map(move |&r| (p.scale, r)))
        .unzip();
    Ok(ShiftSweep {
        pipeline: decoder.pipeline.clone(),
        spearman: spearman(&xs, &ys)?,
        points,
    })
}
