use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Rational IIR filter in transfer-function form, `a[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl IirFilter {
    /// Normalize so that `a[0] == 1` and check finiteness and stability.
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if b.is_empty() || a.is_empty() || a[0] == 0.0 {
            return Err(Error::InvalidInput("empty filter or a[0] == 0".into()));
        }
        if b.iter().chain(&a).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite filter coefficient".into()));
        }
        let a0 = a[0];
        let f = Self {
            b: b.iter().map(|v| v / a0).collect(),
            a: a.iter().map(|v| v / a0).collect(),
        };
        if !f.is_stable() {
            return Err(Error::InvalidInput("filter has poles on or outside the unit circle".into()));
        }
        Ok(f)
    }

    /// Pole magnitudes from the eigenvalues of the companion matrix of `a`.
    pub fn pole_radii(&self) -> Vec<f64> {
        let p = self.a.len() - 1;
        if p == 0 {
            return Vec::new();
        }
        let mut c = DMatrix::<f64>::zeros(p, p);
        for j in 0..p {
            c[(0, j)] = -self.a[j + 1];
        }
        for i in 1..p {
            c[(i, i - 1)] = 1.0;
        }
        c.complex_eigenvalues().iter().map(|z| z.norm()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radii().iter().all(|r| *r < 1.0)
    }

    /// Complex frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / fs;
        let z_inv = Complex64::from_polar(1.0, -w);
        let eval = |c: &[f64]| {
            c.iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z_inv + v)
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn gain(&self, f_hz: f64, fs: f64) -> f64 {
        self.response(f_hz, fs).norm()
    }

    pub fn gain_db(&self, f_hz: f64, fs: f64) -> f64 {
        20.0 * self.gain(f_hz, fs).log10()
    }

    fn order(&self) -> usize {
        self.a.len().max(self.b.len()) - 1
    }

    /// Padding length used by [`filtfilt`].
    pub fn padlen(&self) -> usize {
        3 * self.a.len().max(self.b.len())
    }

    /// Direct-form II transposed filtering with an initial state.
    pub fn lfilter(&self, x: &[f64], zi: Option<&[f64]>) -> Vec<f64> {
        let n = self.order();
        let mut b = self.b.clone();
        let mut a = self.a.clone();
        b.resize(n + 1, 0.0);
        a.resize(n + 1, 0.0);
        let mut z = match zi {
            Some(s) => s.to_vec(),
            None => vec![0.0; n],
        };
        let mut y = Vec::with_capacity(x.len());
        for &xi in x {
            let yi = b[0] * xi + z.first().copied().unwrap_or(0.0);
            for k in 0..n {
                let next = if k + 1 < n { z[k + 1] } else { 0.0 };
                z[k] = b[k + 1] * xi + next - a[k + 1] * yi;
            }
            y.push(yi);
        }
        y
    }
}

fn check_band(lo: f64, hi: f64, fs: f64) -> Result<()> {
    if !(fs > 0.0) || !(lo > 0.0) || !(lo < hi) || !(hi < fs / 2.0) {
        return Err(Error::InvalidBand(format!(
            "need 0 < lo < hi < fs/2, got lo={lo} hi={hi} fs={fs}"
        )));
    }
    Ok(())
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c
}

/// Butterworth bandpass of total order `order` (even; the analog lowpass
/// prototype has order `order/2`), designed by lowpass-to-bandpass
/// transformation and the bilinear transform with pre-warped band edges.
pub fn butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Result<IirFilter> {
    check_band(lo_hz, hi_hz, fs)?;
    if order == 0 || order % 2 != 0 {
        return Err(Error::InvalidInput(format!("bandpass order must be even, got {order}")));
    }
    let n = order / 2;
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * lo_hz / fs).tan();
    let w_hi = fs2 * (PI * hi_hz / fs).tan();
    let bw = w_hi - w_lo;
    let w0 = (w_lo * w_hi).sqrt();

    let mut poles = Vec::with_capacity(2 * n);
    for p in &proto {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(half + disc);
        poles.push(half - disc);
    }
    // n analog zeros at the origin, gain bw^n
    let zeros_analog = vec![Complex64::new(0.0, 0.0); n];
    let k_analog = bw.powi(n as i32);

    let bilinear = |s: &Complex64| (fs2 + s) / (fs2 - s);
    let mut zeros: Vec<Complex64> = zeros_analog.iter().map(bilinear).collect();
    let poles_d: Vec<Complex64> = poles.iter().map(bilinear).collect();
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), poles.len() - zeros_analog.len()));
    let num: Complex64 = zeros_analog.iter().map(|z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    let k = k_analog * (num / den).re;

    let b: Vec<f64> = poly_from_roots(&zeros).iter().map(|c| c.re * k).collect();
    let a: Vec<f64> = poly_from_roots(&poles_d).iter().map(|c| c.re).collect();
    IirFilter::new(b, a)
}

/// Second-order IIR notch at `f0_hz` with quality factor `q`.
pub fn notch(f0_hz: f64, q: f64, fs: f64) -> Result<IirFilter> {
    if !(fs > 0.0) || !(f0_hz > 0.0) || !(f0_hz < fs / 2.0) || !(q > 0.0) {
        return Err(Error::InvalidBand(format!(
            "need 0 < f0 < fs/2 and q > 0, got f0={f0_hz} q={q} fs={fs}"
        )));
    }
    let w0 = 2.0 * PI * f0_hz / fs;
    let bw = w0 / q;
    let g = 1.0 / (1.0 + (bw / 2.0).tan());
    let c = w0.cos();
    IirFilter::new(vec![g, -2.0 * g * c, g], vec![1.0, -2.0 * g * c, 2.0 * g - 1.0])
}

fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[i]);
    }
    out.extend_from_slice(x);
    for i in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    out
}

/// Precomputed Gustafsson initial-state solver for one filter and one
/// (padded) signal length.
struct GustafssonSolver {
    /// Columns map forward/backward initial states onto the output.
    w: DMatrix<f64>,
    /// Least-squares pseudo-inverse of the state-mismatch matrix.
    pinv: DMatrix<f64>,
}

impl GustafssonSolver {
    fn new(f: &IirFilter, m: usize) -> Self {
        let order = f.order();
        let mut e0 = vec![0.0; order];
        e0[0] = 1.0;
        let first = f.lfilter(&vec![0.0; m], Some(&e0));
        let mut obs = DMatrix::<f64>::zeros(m, order);
        for k in 0..order {
            for i in k..m {
                obs[(i, k)] = first[i - k];
            }
        }
        let mut s = DMatrix::<f64>::zeros(m, order);
        for k in 0..order {
            let rev: Vec<f64> = (0..m).map(|i| obs[(m - 1 - i, k)]).collect();
            let col = f.lfilter(&rev, None);
            for i in 0..m {
                s[(i, k)] = col[i];
            }
        }
        let mut mm = DMatrix::<f64>::zeros(m, 2 * order);
        let mut w = DMatrix::<f64>::zeros(m, 2 * order);
        for i in 0..m {
            for k in 0..order {
                let sr = s[(m - 1 - i, k)];
                let obsr = obs[(m - 1 - i, k)];
                mm[(i, k)] = sr - obs[(i, k)];
                mm[(i, order + k)] = obsr - s[(i, k)];
                w[(i, k)] = sr;
                w[(i, order + k)] = obsr;
            }
        }
        let svd = mm.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        let pinv = svd.pseudo_inverse(tol).expect("SVD computed with both factors");
        Self { w, pinv }
    }

    fn apply(&self, f: &IirFilter, x: &[f64]) -> Vec<f64> {
        let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<f64>>();
        let y_f = f.lfilter(x, None);
        let y_fb = rev(&f.lfilter(&rev(&y_f), None));
        let y_b = rev(&f.lfilter(&rev(x), None));
        let y_bf = f.lfilter(&y_b, None);
        let delta = DVector::from_iterator(x.len(), y_bf.iter().zip(&y_fb).map(|(a, b)| a - b));
        let ic = &self.pinv * delta;
        let wic = &self.w * ic;
        y_fb.iter().zip(wic.iter()).map(|(a, b)| a + b).collect()
    }
}

type SolverKey = (Vec<u64>, Vec<u64>, usize);

/// Recently used solvers; sessions of equal length reuse the same SVD.
fn cached_solver(f: &IirFilter, m: usize) -> Arc<GustafssonSolver> {
    static CACHE: Mutex<Vec<(SolverKey, Arc<GustafssonSolver>)>> = Mutex::new(Vec::new());
    const CAPACITY: usize = 8;
    let key: SolverKey = (
        f.b.iter().map(|v| v.to_bits()).collect(),
        f.a.iter().map(|v| v.to_bits()).collect(),
        m,
    );
    if let Some((_, s)) = CACHE.lock().expect("solver cache").iter().find(|(k, _)| *k == key) {
        return Arc::clone(s);
    }
    let solver = Arc::new(GustafssonSolver::new(f, m));
    let mut cache = CACHE.lock().expect("solver cache");
    if cache.len() >= CAPACITY {
        cache.remove(0);
    }
    cache.push((key, Arc::clone(&solver)));
    solver
}

/// Zero-phase forward-backward filtering.
///
/// The signal is odd-extended by `3·max(len(a), len(b))` samples at both
/// ends; the forward and backward initial states are chosen by
/// Gustafsson's method so that forward-backward and backward-forward
/// filtering agree. The two time orientations are then averaged so the
/// result commutes with time reversal to the last bit.
pub fn filtfilt(f: &IirFilter, x: &[f64]) -> Result<Vec<f64>> {
    Ok(filtfilt_many(f, &[x])?.pop().expect("one channel in, one out"))
}

/// [`filtfilt`] over several equally long channels, sharing the
/// initial-state solve.
pub fn filtfilt_many(f: &IirFilter, channels: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let pad = f.padlen();
    let Some(first) = channels.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("channels differ in length".into()));
    }
    if n <= pad {
        return Err(Error::SignalTooShort { needed: pad, got: n });
    }
    if f.order() == 0 {
        let g = (f.b[0] / f.a[0]).powi(2);
        return Ok(channels.iter().map(|c| c.iter().map(|v| v * g).collect()).collect());
    }
    let solver = cached_solver(f, n + 2 * pad);
    Ok(channels
        .par_iter()
        .map(|c| {
            let ext = odd_extend(c, pad);
            let fwd = solver.apply(f, &ext);
            let rev_in: Vec<f64> = ext.iter().rev().copied().collect();
            let bwd = solver.apply(f, &rev_in);
            (pad..pad + n)
                .map(|i| 0.5 * (fwd[i] + bwd[ext.len() - 1 - i]))
                .collect()
        })
        .collect())
}
