use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigproc::EpochTensor;

/// Class-conditional mean waveform, channels × samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandAverage {
    pub channels: Vec<String>,
    pub fs: f64,
    pub t0_ms: f64,
    pub n_trials: usize,
    pub data: Vec<Vec<f64>>,
}

impl GrandAverage {
    pub fn time_ms(&self, sample: usize) -> f64 {
        self.t0_ms + sample as f64 * 1000.0 / self.fs
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

/// Average the trials carrying `label`.
pub fn grand_average(e: &EpochTensor, label: u8) -> Result<GrandAverage> {
    let idx: Vec<usize> = (0..e.n_trials).filter(|&i| e.labels[i] == label).collect();
    if idx.is_empty() {
        return Err(Error::InvalidWindow(format!("no trials with label {label}")));
    }
    let mut data = vec![vec![0.0; e.n_samples]; e.n_channels];
    for &t in &idx {
        for (row, chunk) in data.iter_mut().zip(e.trial(t).chunks(e.n_samples)) {
            for (a, v) in row.iter_mut().zip(chunk) {
                *a += v;
            }
        }
    }
    let n = idx.len() as f64;
    data.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(GrandAverage {
        channels: e.channels.clone(),
        fs: e.fs,
        t0_ms: e.t0_ms,
        n_trials: idx.len(),
        data,
    })
}

/// Extremum of the requested polarity on `channel` within
/// `[t_lo_ms, t_hi_ms]`. Returns (amplitude, latency_ms); ties resolve to the
/// earliest sample.
pub fn peak_pick(
    ga: &GrandAverage,
    channel: &str,
    t_lo_ms: f64,
    t_hi_ms: f64,
    polarity: Polarity,
) -> Result<(f64, f64)> {
    let c = ga
        .channels
        .iter()
        .position(|n| n == channel)
        .ok_or_else(|| Error::InvalidInput(format!("unknown channel {channel}")))?;
    let row = &ga.data[c];
    let idx: Vec<usize> = (0..row.len())
        .filter(|&s| {
            let t = ga.time_ms(s);
            t >= t_lo_ms - 1e-9 && t <= t_hi_ms + 1e-9
        })
        .collect();
    let Some(&first) = idx.first() else {
        return Err(Error::InvalidWindow(format!("{t_lo_ms}..{t_hi_ms} ms selects no samples")));
    };
    let mut best = first;
    for &s in &idx[1..] {
        let better = match polarity {
            Polarity::Positive => row[s] > row[best],
            Polarity::Negative => row[s] < row[best],
        };
        if better {
            best = s;
        }
    }
    Ok((row[best], ga.time_ms(best)))
}
