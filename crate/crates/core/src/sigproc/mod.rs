//! Filter design, zero-phase filtering, epoch segmentation and the feature
//! preprocessors shared by the decoding pipelines.

mod filter;
pub mod io;

pub use filter::{butter_bandpass, filtfilt, filtfilt_many, notch, IirFilter};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stimulus marker in a continuous recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub sample: usize,
    /// Flashed command, `1..=9`.
    pub command: u8,
    pub is_target: bool,
    /// Selection block (cued target) the flash belongs to.
    #[serde(default)]
    pub block: usize,
}

/// Multichannel EEG in microvolts, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRecording {
    pub fs: f64,
    pub channels: Vec<String>,
    /// `channels.len()` rows of `n_samples` values each.
    pub data: Vec<Vec<f64>>,
    pub events: Vec<Event>,
}

impl ContinuousRecording {
    pub fn new(fs: f64, channels: Vec<String>, data: Vec<Vec<f64>>, events: Vec<Event>) -> Result<Self> {
        let rec = Self {
            fs,
            channels,
            data,
            events,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::validation("fs", "sampling rate must be positive"));
        }
        if self.channels.len() != self.data.len() {
            return Err(Error::validation(
                "channels",
                format!("{} names for {} data rows", self.channels.len(), self.data.len()),
            ));
        }
        let n = self.n_samples();
        if self.data.iter().any(|r| r.len() != n) {
            return Err(Error::validation("data", "channel rows differ in length"));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.sample >= n {
                return Err(Error::validation(
                    format!("events[{i}].sample"),
                    format!("{} beyond {} samples", e.sample, n),
                ));
            }
            if e.command == 0 {
                return Err(Error::validation(format!("events[{i}].command"), "command codes start at 1"));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// Zero-phase filter every channel.
    pub fn filtered(&self, f: &IirFilter) -> Result<Self> {
        let rows: Vec<&[f64]> = self.data.iter().map(Vec::as_slice).collect();
        Ok(Self {
            fs: self.fs,
            channels: self.channels.clone(),
            data: filtfilt_many(f, &rows)?,
            events: self.events.clone(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }
}

/// Segmented trials, laid out trials × channels × samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTensor {
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub data: Vec<f64>,
    pub labels: Vec<u8>,
    pub command_codes: Vec<u8>,
    pub blocks: Vec<usize>,
    pub fs: f64,
    /// Epoch start relative to stimulus onset.
    pub t0_ms: f64,
    pub channels: Vec<String>,
}

impl EpochTensor {
    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.n_channels * self.n_samples;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn trial_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.n_channels * self.n_samples;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn trial_len(&self) -> usize {
        self.n_channels * self.n_samples
    }

    /// Keep the listed trials, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.trial_len());
        for &i in idx {
            data.extend_from_slice(self.trial(i));
        }
        Self {
            n_trials: idx.len(),
            n_channels: self.n_channels,
            n_samples: self.n_samples,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            command_codes: idx.iter().map(|&i| self.command_codes[i]).collect(),
            blocks: idx.iter().map(|&i| self.blocks[i]).collect(),
            fs: self.fs,
            t0_ms: self.t0_ms,
            channels: self.channels.clone(),
        }
    }

    /// Sample time in milliseconds relative to stimulus onset.
    pub fn time_ms(&self, sample: usize) -> f64 {
        self.t0_ms + sample as f64 * 1000.0 / self.fs
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_trials * self.trial_len() {
            return Err(Error::validation("data", "length does not match dims"));
        }
        if self.labels.len() != self.n_trials
            || self.command_codes.len() != self.n_trials
            || self.blocks.len() != self.n_trials
        {
            return Err(Error::validation("labels", "per-trial metadata length mismatch"));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::validation("labels", "labels must be 0 or 1"));
        }
        if self.channels.len() != self.n_channels {
            return Err(Error::validation("channels", "channel names do not match dims"));
        }
        Ok(())
    }
}

/// Stack epoch tensors with identical layout along the trial axis.
pub fn concat_epochs(parts: &[EpochTensor]) -> Result<EpochTensor> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidInput("nothing to concatenate".into()));
    };
    let mut out = first.clone();
    for p in &parts[1..] {
        if p.n_channels != out.n_channels || p.n_samples != out.n_samples || p.fs != out.fs || p.t0_ms != out.t0_ms {
            return Err(Error::Shape("epoch tensors differ in layout".into()));
        }
        out.n_trials += p.n_trials;
        out.data.extend_from_slice(&p.data);
        out.labels.extend_from_slice(&p.labels);
        out.command_codes.extend_from_slice(&p.command_codes);
        out.blocks.extend_from_slice(&p.blocks);
    }
    Ok(out)
}

/// Offline analysis band, epoch window and baseline.
pub const OFFLINE_BAND_HZ: (f64, f64) = (1.0, 10.0);
pub const OFFLINE_WINDOW_MS: (f64, f64) = (0.0, 800.0);
/// Online decoding band, epoch window and baseline.
pub const ONLINE_BAND_HZ: (f64, f64) = (5.0, 12.0);
pub const ONLINE_WINDOW_MS: (f64, f64) = (100.0, 500.0);
pub const BASELINE_MS: (f64, f64) = (-200.0, 0.0);
pub const ANALYSIS_ORDER: usize = 2;

/// Zero-phase band filtering followed by baseline-corrected segmentation.
pub fn filter_and_segment(
    rec: &ContinuousRecording,
    band: (f64, f64),
    window_ms: (f64, f64),
) -> Result<EpochTensor> {
    let f = butter_bandpass(ANALYSIS_ORDER, band.0, band.1, rec.fs)?;
    segment(&rec.filtered(&f)?, window_ms.0, window_ms.1, Some(BASELINE_MS))
}

/// 1-10 Hz, 0-800 ms epochs used for grand averages.
pub fn offline_epochs(rec: &ContinuousRecording) -> Result<EpochTensor> {
    filter_and_segment(rec, OFFLINE_BAND_HZ, OFFLINE_WINDOW_MS)
}

/// 5-12 Hz, 100-500 ms epochs fed to the decoders.
pub fn online_epochs(rec: &ContinuousRecording) -> Result<EpochTensor> {
    filter_and_segment(rec, ONLINE_BAND_HZ, ONLINE_WINDOW_MS)
}

/// Number of samples spanned by `duration_ms` at `fs`.
pub fn samples_for(duration_ms: f64, fs: f64) -> usize {
    (duration_ms / 1000.0 * fs).round() as usize
}

/// Signed sample offset of `ms` at `fs`.
pub fn offset_samples(ms: f64, fs: f64) -> i64 {
    (ms / 1000.0 * fs).round() as i64
}

/// Cut one epoch per event covering `[t0_ms, t1_ms)` after onset. With a
/// baseline window, each channel's mean over that window (relative to the
/// same onset) is subtracted.
pub fn segment(
    rec: &ContinuousRecording,
    t0_ms: f64,
    t1_ms: f64,
    baseline: Option<(f64, f64)>,
) -> Result<EpochTensor> {
    if !(t1_ms > t0_ms) {
        return Err(Error::InvalidWindow(format!("empty epoch window {t0_ms}..{t1_ms} ms")));
    }
    let fs = rec.fs;
    let n_samples = samples_for(t1_ms - t0_ms, fs);
    let start_off = offset_samples(t0_ms, fs);
    let base = match baseline {
        Some((b0, b1)) => {
            let (s, e) = (offset_samples(b0, fs), offset_samples(b1, fs));
            if e <= s {
                return Err(Error::InvalidWindow(format!("empty baseline window {b0}..{b1} ms")));
            }
            Some((s, e))
        }
        None => None,
    };
    let total = rec.n_samples() as i64;
    let nc = rec.channels.len();
    let mut data = Vec::with_capacity(rec.events.len() * nc * n_samples);
    for (i, ev) in rec.events.iter().enumerate() {
        let onset = ev.sample as i64;
        let s = onset + start_off;
        let e = s + n_samples as i64;
        let (lo, hi) = match base {
            Some((b0, b1)) => (s.min(onset + b0), e.max(onset + b1)),
            None => (s, e),
        };
        if lo < 0 || hi > total {
            return Err(Error::EpochOutOfBounds(format!(
                "event {i} at sample {} needs [{lo}, {hi}) of {total}",
                ev.sample
            )));
        }
        for row in &rec.data {
            let offset = match base {
                Some((b0, b1)) => {
                    let w = &row[(onset + b0) as usize..(onset + b1) as usize];
                    w.iter().sum::<f64>() / w.len() as f64
                }
                None => 0.0,
            };
            data.extend(row[s as usize..e as usize].iter().map(|v| v - offset));
        }
    }
    Ok(EpochTensor {
        n_trials: rec.events.len(),
        n_channels: nc,
        n_samples,
        data,
        labels: rec.events.iter().map(|e| u8::from(e.is_target)).collect(),
        command_codes: rec.events.iter().map(|e| e.command).collect(),
        blocks: rec.events.iter().map(|e| e.block).collect(),
        fs,
        t0_ms,
        channels: rec.channels.clone(),
    })
}

/// Average non-overlapping blocks of `factor` samples per channel and
/// concatenate channels: trials × (channels·⌊samples/factor⌋).
pub fn moving_avg_decimate(e: &EpochTensor, factor: usize) -> Result<DMatrix<f64>> {
    if factor == 0 || factor > e.n_samples {
        return Err(Error::InvalidFactor {
            factor,
            samples: e.n_samples,
        });
    }
    let per_ch = e.n_samples / factor;
    let dim = e.n_channels * per_ch;
    let mut out = DMatrix::<f64>::zeros(e.n_trials, dim);
    for t in 0..e.n_trials {
        let trial = e.trial(t);
        for c in 0..e.n_channels {
            let row = &trial[c * e.n_samples..(c + 1) * e.n_samples];
            for k in 0..per_ch {
                let block = &row[k * factor..(k + 1) * factor];
                out[(t, c * per_ch + k)] = block.iter().sum::<f64>() / factor as f64;
            }
        }
    }
    Ok(out)
}

/// Percentile with linear interpolation between order statistics of a
/// sorted slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-channel clipping bounds learned from training epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Windsorizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Windsorizer {
    pub fn fit(e: &EpochTensor, lo_pct: f64, hi_pct: f64) -> Result<Self> {
        if e.n_trials == 0 || e.n_samples == 0 || e.n_channels == 0 {
            return Err(Error::InvalidInput("empty epoch tensor".into()));
        }
        if !(0.0..=100.0).contains(&lo_pct) || !(lo_pct..=100.0).contains(&hi_pct) {
            return Err(Error::InvalidInput(format!("bad percentiles {lo_pct}/{hi_pct}")));
        }
        let mut lo = Vec::with_capacity(e.n_channels);
        let mut hi = Vec::with_capacity(e.n_channels);
        for c in 0..e.n_channels {
            let mut vals: Vec<f64> = (0..e.n_trials)
                .flat_map(|t| e.trial(t)[c * e.n_samples..(c + 1) * e.n_samples].iter().copied())
                .collect();
            vals.sort_by(f64::total_cmp);
            lo.push(percentile_sorted(&vals, lo_pct));
            hi.push(percentile_sorted(&vals, hi_pct));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, e: &EpochTensor) -> Result<EpochTensor> {
        if e.n_channels != self.lo.len() {
            return Err(Error::Shape(format!(
                "windsorizer fitted on {} channels, got {}",
                self.lo.len(),
                e.n_channels
            )));
        }
        let mut out = e.clone();
        let ns = e.n_samples;
        for t in 0..e.n_trials {
            let trial = out.trial_mut(t);
            for (c, chunk) in trial.chunks_mut(ns).enumerate() {
                for v in chunk {
                    *v = v.clamp(self.lo[c], self.hi[c]);
                }
            }
        }
        Ok(out)
    }
}

/// Per-(channel, sample) standardization fitted on training epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Population statistics over trials; zero spread is replaced by 1.
    pub fn fit(e: &EpochTensor) -> Result<Self> {
        if e.n_trials == 0 {
            return Err(Error::InvalidInput("cannot fit z-score on zero trials".into()));
        }
        let d = e.trial_len();
        let n = e.n_trials as f64;
        let mut mean = vec![0.0; d];
        for t in 0..e.n_trials {
            for (m, v) in mean.iter_mut().zip(e.trial(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for t in 0..e.n_trials {
            for ((s, v), m) in var.iter_mut().zip(e.trial(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, e: &EpochTensor) -> Result<EpochTensor> {
        if e.trial_len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "z-score fitted on {} features, got {}",
                self.mean.len(),
                e.trial_len()
            )));
        }
        let mut out = e.clone();
        for t in 0..e.n_trials {
            for ((v, m), s) in out.trial_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Order-sensitive fingerprint of the stored statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.mean.iter().chain(&self.std) {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
