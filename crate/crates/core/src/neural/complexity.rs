use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use crate::error::Result;
use crate::tensorkit::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub architecture: String,
    pub params: usize,
    pub macs_analytic: u64,
    pub macs_instrumented: u64,
    pub inference_ms_median: f64,
    pub inference_ms_mean: f64,
    pub timing_runs: usize,
}

/// Parameter and MAC counts plus single-trial eval-mode latency over
/// `runs` repetitions.
pub fn complexity(g: &ModelGraph, runs: usize) -> Result<Complexity> {
    let [c, h, w] = g.input_shape;
    let x = Tensor::zeros(&[1, c, h, w]);
    g.predict(&x)?;
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            let s = g.predict(&x);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(s).ok();
            ms
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let k = times.len();
    let median = if k % 2 == 1 {
        times[k / 2]
    } else {
        0.5 * (times[k / 2 - 1] + times[k / 2])
    };
    Ok(Complexity {
        architecture: g.architecture.clone(),
        params: g.param_count(),
        macs_analytic: g.analytic_macs(),
        macs_instrumented: g.instrumented_macs(),
        inference_ms_median: median,
        inference_ms_mean: times.iter().sum::<f64>() / k as f64,
        timing_runs: k,
    })
}
