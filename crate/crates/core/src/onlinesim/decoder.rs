use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_pipeline, is_classical, load_scorer, save_scorer, BaselineConfig, ClassicalPipeline, CLASSICAL_PIPELINES};
use crate::error::{Error, Result};
use crate::neural::{
    build_architecture, epochs_to_tensor, load_weights, save_weights, train, ModelGraph, TrainConfig, WeightDtype,
    ARCHITECTURES,
};
use crate::rng;
use crate::sigproc::{EpochTensor, ZScore};

/// The five classical pipelines followed by the five networks.
pub fn all_pipelines() -> Vec<&'static str> {
    CLASSICAL_PIPELINES.iter().chain(ARCHITECTURES.iter()).copied().collect()
}

#[derive(Debug, Clone)]
pub enum DecoderModel {
    Neural(Box<ModelGraph>),
    Classical(ClassicalPipeline),
}

/// A pipeline plus the calibration z-score applied to every input.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub pipeline: String,
    pub zscore: ZScore,
    pub model: Option<DecoderModel>,
    pub train_time_s: f64,
}

impl Decoder {
    pub fn unfitted(pipeline: &str, zscore: ZScore) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            zscore,
            model: None,
            train_time_s: 0.0,
        }
    }

    /// Standardize with calibration statistics, then fit the pipeline.
    pub fn fit(pipeline: &str, e: &EpochTensor, train_cfg: &TrainConfig, baselines: &BaselineConfig, seed: u64) -> Result<Self> {
        let t = Instant::now();
        let zscore = ZScore::fit(e)?;
        let ez = zscore.apply(e)?;
        let model = if is_classical(pipeline) {
            DecoderModel::Classical(fit_pipeline(pipeline, &ez, baselines)?)
        } else if ARCHITECTURES.contains(&pipeline) {
            let mut g = build_architecture(pipeline, e.n_channels, e.n_samples, rng::sub_seed(seed, "init"))?;
            train(&mut g, &ez, train_cfg, rng::sub_seed(seed, "fit"))?;
            DecoderModel::Neural(Box::new(g))
        } else {
            return Err(Error::validation("pipeline", format!("unknown pipeline `{pipeline}`")));
        };
        Ok(Self {
            pipeline: pipeline.to_string(),
            zscore,
            model: Some(model),
            train_time_s: t.elapsed().as_secs_f64(),
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.model.is_some()
    }

    /// Probabilities for networks, decision values for classical pipelines.
    pub fn scores(&self, e: &EpochTensor) -> Result<Vec<f64>> {
        let ez = self.zscore.apply(e)?;
        match &self.model {
            None => Err(Error::NotFitted),
            Some(DecoderModel::Neural(g)) => g.predict(&epochs_to_tensor(&ez)?),
            Some(DecoderModel::Classical(p)) => p.scores(&ez),
        }
    }

    /// Score at which a trial is called a target.
    pub fn threshold(&self) -> f64 {
        match self.model {
            Some(DecoderModel::Neural(_)) => 0.5,
            _ => 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.model {
            None => 0,
            Some(DecoderModel::Neural(g)) => g.param_count(),
            Some(DecoderModel::Classical(p)) => p.param_count(),
        }
    }

    /// Analytic MACs per trial; networks only.
    pub fn macs(&self) -> Option<u64> {
        match &self.model {
            Some(DecoderModel::Neural(g)) => Some(g.analytic_macs()),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DecoderFile {
    pipeline: String,
    zscore: ZScore,
    /// Model file name, relative to the decoder file.
    model_file: String,
}

fn decoder_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    PathBuf::from(s.strip_suffix(".decoder.json").unwrap_or(&s).to_string())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `<base>.decoder.json` plus the model files; returns the decoder
/// file path.
pub fn save_decoder(d: &Decoder, path: &Path) -> Result<PathBuf> {
    let base = decoder_base(path);
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let model_path = match &d.model {
        None => return Err(Error::NotFitted),
        Some(DecoderModel::Neural(g)) => save_weights(g, &base, WeightDtype::F64)?,
        Some(DecoderModel::Classical(p)) => save_scorer(p, &base)?,
    };
    let file = DecoderFile {
        pipeline: d.pipeline.clone(),
        zscore: d.zscore.clone(),
        model_file: file_name(&model_path),
    };
    let mut out = base.into_os_string();
    out.push(".decoder.json");
    let out = PathBuf::from(out);
    std::fs::write(&out, serde_json::to_vec_pretty(&file)?)?;
    Ok(out)
}

pub fn load_decoder(path: &Path) -> Result<Decoder> {
    let base = decoder_base(path);
    let mut p = base.clone().into_os_string();
    p.push(".decoder.json");
    let file: DecoderFile = serde_json::from_slice(&std::fs::read(PathBuf::from(p))?)?;
    let model_path = base.parent().unwrap_or(Path::new("")).join(&file.model_file);
    let model = if is_classical(&file.pipeline) {
        DecoderModel::Classical(load_scorer(&model_path)?)
    } else if ARCHITECTURES.contains(&file.pipeline.as_str()) {
        DecoderModel::Neural(Box::new(load_weights(&model_path)?))
    } else {
        return Err(Error::validation("pipeline", format!("unknown pipeline `{}`", file.pipeline)));
    };
    Ok(Decoder {
        pipeline: file.pipeline,
        zscore: file.zscore,
        model: Some(model),
        train_time_s: 0.0,
    })
}
