//! Evaluation math: discriminability, classification and speller metrics,
//! grand averages with peak picking, and the nonparametric tests used to
//! compare pipelines.

mod erp;
mod stats;

pub use erp::{grand_average, peak_pick, GrandAverage, Polarity};
pub use stats::{
    chi2_upper_tail, friedman, spearman, wilcoxon_signed_rank, wilcoxon_exact_upper_tail, Alternative,
    FriedmanResult, SpearmanResult, WilcoxonResult,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default selection time of one command in seconds (cue, nine flashes,
/// processing gap, feedback).
pub const SELECTION_TIME_S: f64 = 2.49;

/// Signed squared point-biserial correlation between class 1 samples `x1`
/// and class 2 samples `x2`, using the population standard deviation of the
/// pooled samples. Zero pooled spread yields 0.
pub fn signed_r2(x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::InvalidInput("signed r² needs both classes".into()));
    }
    let n1 = x1.len() as f64;
    let n2 = x2.len() as f64;
    let m1 = x1.iter().sum::<f64>() / n1;
    let m2 = x2.iter().sum::<f64>() / n2;
    let mean = (m1 * n1 + m2 * n2) / (n1 + n2);
    let var = x1.iter().chain(x2).map(|v| (v - mean).powi(2)).sum::<f64>() / (n1 + n2);
    let sd = var.sqrt();
    if sd <= 0.0 {
        return Ok(0.0);
    }
    let r = (n1 * n2).sqrt() / (n1 + n2) * (m1 - m2) / sd;
    Ok(r.signum() * r * r)
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn from_predictions(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Counts::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

pub fn balanced_accuracy(c: &Counts) -> Result<f64> {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "balanced accuracy needs both classes".into(),
        ));
    }
    Ok(0.5 * (c.tp as f64 / pos as f64 + c.tn as f64 / neg as f64))
}

/// Midranks (1-based) of `values`; ties share the mean of their ranks.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// ROC AUC as the normalized Mann-Whitney U statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Information transfer rate in bits/min for `n_commands` choices selected
/// with accuracy `p`, each selection taking `t_select_s` seconds.
pub fn itr(n_commands: usize, p: f64, t_select_s: f64) -> f64 {
    let n = n_commands as f64;
    let xlog2 = |x: f64| if x <= 0.0 { 0.0 } else { x * x.log2() };
    let q = 1.0 - p;
    let miss = if q <= 0.0 { 0.0 } else { q * (q / (n - 1.0)).log2() };
    let bits = n.log2() + xlog2(p) + miss;
    (bits * 60.0 / t_select_s).max(0.0)
}

/// One flash: the command it highlighted and the scorer output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandScore {
    pub command: u8,
    pub score: f64,
}

/// Pick the command with the highest score; ties go to the lowest code.
/// Every command in `1..=n_commands` must appear exactly once.
pub fn decide_command(block: &[CommandScore], n_commands: usize) -> Result<u8> {
    if block.len() != n_commands {
        return Err(Error::IncompleteBlock(format!(
            "expected {n_commands} scores, got {}",
            block.len()
        )));
    }
    let mut seen = vec![false; n_commands];
    for cs in block {
        let c = cs.command as usize;
        if c == 0 || c > n_commands || seen[c - 1] {
            return Err(Error::IncompleteBlock(format!(
                "command {} missing or repeated",
                cs.command
            )));
        }
        seen[c - 1] = true;
    }
    let mut best = block[0];
    for &cs in &block[1..] {
        if cs.score > best.score || (cs.score == best.score && cs.command < best.command) {
            best = cs;
        }
    }
    Ok(best.command)
}

/// Fraction of blocks whose decided command equals the cued target.
pub fn command_detection_rate(blocks: &[(u8, Vec<CommandScore>)], n_commands: usize) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::UndefinedMetric("no selection blocks".into()));
    }
    let mut correct = 0usize;
    for (target, block) in blocks {
        if decide_command(block, n_commands)? == *target {
            correct += 1;
        }
    }
    Ok(correct as f64 / blocks.len() as f64)
}

/// Scored single trials grouped into selection blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub command_codes: Vec<u8>,
    pub blocks: Vec<usize>,
}

impl ScoredTrials {
    /// Group trials by block index into `(target command, scores)` pairs.
    pub fn selection_blocks(&self) -> Result<Vec<(u8, Vec<CommandScore>)>> {
        let n = self.scores.len();
        if self.labels.len() != n || self.command_codes.len() != n || self.blocks.len() != n {
            return Err(Error::Shape("scored-trial fields differ in length".into()));
        }
        let mut out: Vec<(Option<u8>, Vec<CommandScore>)> = Vec::new();
        let mut current = None;
        for i in 0..n {
            if current != Some(self.blocks[i]) {
                current = Some(self.blocks[i]);
                out.push((None, Vec::new()));
            }
            let entry = out.last_mut().expect("block pushed above");
            if self.labels[i] == 1 {
                if entry.0.is_some() {
                    return Err(Error::IncompleteBlock(format!(
                        "block {} has more than one target",
                        self.blocks[i]
                    )));
                }
                entry.0 = Some(self.command_codes[i]);
            }
            entry.1.push(CommandScore {
                command: self.command_codes[i],
                score: self.scores[i],
            });
        }
        out.into_iter()
            .map(|(t, b)| {
                t.map(|t| (t, b))
                    .ok_or_else(|| Error::IncompleteBlock("block without target".into()))
            })
            .collect()
    }
}

/// Online performance summary of one session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub command_detection_rate: f64,
    pub itr_bits_per_min: f64,
    pub counts: Counts,
}

/// Compute every session metric from scored trials. `threshold` turns
/// scores into binary decisions for the balanced accuracy.
pub fn evaluate(
    trials: &ScoredTrials,
    threshold: f64,
    n_commands: usize,
    t_select_s: f64,
) -> Result<MetricReport> {
    let counts = Counts::from_predictions(&trials.scores, &trials.labels, threshold);
    let ba = balanced_accuracy(&counts)?;
    let a = auc(&trials.scores, &trials.labels)?;
    let cdr = command_detection_rate(&trials.selection_blocks()?, n_commands)?;
    Ok(MetricReport {
        balanced_accuracy: ba,
        auc: a,
        command_detection_rate: cdr,
        itr_bits_per_min: itr(n_commands, cdr, t_select_s),
        counts,
    })
}
