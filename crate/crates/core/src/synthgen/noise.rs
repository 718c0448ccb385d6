use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Background activity added independently to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// RMS of the 1/f component, µV.
    pub pink_uv: f64,
    /// Peak amplitude of the 50 Hz line, µV.
    pub mains_uv: f64,
    /// RMS of the white component, µV.
    pub white_uv: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(pink_uv: f64, mains_uv: f64, white_uv: f64, seed: u64) -> Self {
        Self {
            pink_uv,
            mains_uv,
            white_uv,
            seed,
        }
    }

    pub fn silent(seed: u64) -> Self {
        Self::new(0.0, 0.0, 0.0, seed)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pink_uv", self.pink_uv), ("mains_uv", self.mains_uv), ("white_uv", self.white_uv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("noise.{name}"), "amplitude must be >= 0"));
            }
        }
        Ok(())
    }

    /// Channels × samples noise, reproducible from the seed.
    pub fn render(&self, n_channels: usize, n: usize, fs: f64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut out = vec![vec![0.0; n]; n_channels];
        for (c, row) in out.iter_mut().enumerate() {
            let path = [c as u64];
            if self.pink_uv > 0.0 {
                let p = pink_noise(n, fs, self.pink_uv, &mut rng::cell_stream(self.seed, "pink", &path));
                row.iter_mut().zip(p).for_each(|(v, x)| *v += x);
            }
            if self.white_uv > 0.0 {
                let mut r = rng::cell_stream(self.seed, "white", &path);
                for v in row.iter_mut() {
                    let z: f64 = r.sample(StandardNormal);
                    *v += self.white_uv * z;
                }
            }
            if self.mains_uv > 0.0 {
                let phase = rng::cell_stream(self.seed, "mains", &path).random_range(0.0..2.0 * PI);
                for (i, v) in row.iter_mut().enumerate() {
                    *v += self.mains_uv * (2.0 * PI * 50.0 * i as f64 / fs + phase).sin();
                }
            }
        }
        Ok(out)
    }
}

/// Gaussian white noise shaped by 1/√f in the frequency domain, zero mean,
/// scaled to the requested RMS.
pub fn pink_noise(n: usize, fs: f64, rms: f64, r: &mut rng::Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(r.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for (k, b) in buf.iter_mut().enumerate().skip(1) {
        // Mirror so the spectrum stays Hermitian.
        let kk = k.min(n - k) as f64;
        *b /= (kk * fs / n as f64).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if cur == 0.0 {
        return x;
    }
    x.into_iter().map(|v| v * rms / cur).collect()
}
