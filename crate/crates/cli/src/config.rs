use std::path::{Path, PathBuf};

use erpdeck::baselines::BaselineConfig;
use erpdeck::error::{Error, Result};
use erpdeck::neural::TrainConfig;
use erpdeck::onlinesim::{all_pipelines, ComparisonConfig, SessionPlan};
use erpdeck::synthgen::{ErpComponentSpec, NoiseSpec, ProtocolConfig, ShiftSpec, SnrLevel, SubjectProfile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Calibration,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectConfig {
    pub id: usize,
    pub snr: SnrLevel,
    /// Replaces the drawn ERP templates.
    pub components: Option<Vec<ErpComponentSpec>>,
    /// Replaces the drawn noise levels.
    pub noise: Option<NoiseSpec>,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self {
            id: 0,
            snr: SnrLevel::High,
            components: None,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub online_sessions: usize,
    pub attend_gain: f64,
    /// Overrides the subject's own calibration-to-online shift.
    pub shift: Option<ShiftSpec>,
    /// Amplitude scales of an optional shift sweep.
    pub sweep_scales: Vec<f64>,
    pub sweep_seeds: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            online_sessions: 2,
            attend_gain: 1.0,
            shift: None,
            sweep_scales: Vec::new(),
            sweep_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub pipelines: Vec<String>,
    pub n_subjects: usize,
    pub n_repeats: usize,
    pub online_sessions: usize,
    pub snr: SnrLevel,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let d = ComparisonConfig::default();
        Self {
            pipelines: d.pipelines,
            n_subjects: d.n_subjects,
            n_repeats: d.n_repeats,
            online_sessions: d.online_sessions,
            snr: d.snr,
        }
    }
}

/// One experiment: every subcommand reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Protocol rendered by `synth`.
    pub session: SessionKind,
    pub calibration: ProtocolConfig,
    pub online: ProtocolConfig,
    pub subject: SubjectConfig,
    pub pipeline: String,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub simulate: SimulateConfig,
    pub compare: CompareConfig,
    pub out: Option<PathBuf>,
    /// Record wall-clock fields; off zeroes them for byte-identical reruns.
    pub host_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            session: SessionKind::Calibration,
            calibration: ProtocolConfig::calibration(),
            online: ProtocolConfig::online(),
            subject: SubjectConfig::default(),
            pipeline: "eegnet".into(),
            train: TrainConfig::with_epochs(250),
            baselines: BaselineConfig::default(),
            simulate: SimulateConfig::default(),
            compare: CompareConfig::default(),
            out: None,
            host_timing: true,
        }
    }
}

impl ExperimentConfig {
    /// Parse a JSON document; schema errors name the offending field.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |field: &str, e: Error| match e {
            Error::InvalidProtocol(m) => Error::validation(field, m),
            other => other,
        };
        self.calibration.validate().map_err(|e| at("calibration", e))?;
        self.online.validate().map_err(|e| at("online", e))?;
        if !all_pipelines().contains(&self.pipeline.as_str()) {
            return Err(Error::validation("pipeline", format!("unknown pipeline `{}`", self.pipeline)));
        }
        if let Some(c) = &self.subject.components {
            for (i, spec) in c.iter().enumerate() {
                spec.validate().map_err(|e| Error::validation(format!("subject.components[{i}]"), e.to_string()))?;
            }
        }
        if let Some(n) = &self.subject.noise {
            n.validate().map_err(|e| Error::validation("subject.noise", e.to_string()))?;
        }
        if self.simulate.online_sessions == 0 {
            return Err(Error::validation("simulate.online_sessions", "must be positive"));
        }
        if let Some(s) = &self.simulate.shift {
            s.channel_scales().map_err(|e| Error::validation("simulate.shift", e.to_string()))?;
        }
        self.train.validate()?;
        self.comparison().validate()
    }

    pub fn subject(&self) -> Result<SubjectProfile> {
        let mut s = SubjectProfile::generate(self.subject.id, self.subject.snr, self.seed)?;
        if let Some(c) = &self.subject.components {
            s.components = c.clone();
        }
        if let Some(n) = &self.subject.noise {
            s.noise = n.clone();
        }
        Ok(s)
    }

    pub fn session_plan(&self) -> Result<SessionPlan> {
        Ok(SessionPlan {
            calibration: self.calibration.clone(),
            online: self.online.clone(),
            shift: self.simulate.shift.clone(),
            online_attend_gain: self.simulate.attend_gain,
            train: self.train.clone(),
            baselines: self.baselines,
            ..SessionPlan::new(self.subject()?, &self.pipeline, self.seed)
        })
    }

    pub fn comparison(&self) -> ComparisonConfig {
        ComparisonConfig {
            pipelines: self.compare.pipelines.clone(),
            n_subjects: self.compare.n_subjects,
            n_repeats: self.compare.n_repeats,
            online_sessions: self.compare.online_sessions,
            snr: self.compare.snr,
            calibration: self.calibration.clone(),
            online: self.online.clone(),
            train: self.train.clone(),
            baselines: self.baselines,
            seed: self.seed,
            host_timing: self.host_timing,
        }
    }
}
