//! Flash schedules and synthetic EEG sessions with planted ERP components.

mod calibrate;
mod noise;
mod profiles;

pub use calibrate::{
    calibrate_components, measure_components, measure_pooled, reference_components, ComponentMeasurement, REFERENCE_SEED,
};
pub use noise::{pink_noise, NoiseSpec};
pub use profiles::{SnrLevel, SubjectProfile};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Polarity;
use crate::rng;
use crate::sigproc::{butter_bandpass, notch, ContinuousRecording, Event};

/// The 15-electrode dry montage, in recording order.
pub const MONTAGE: [&str; 15] = [
    "PO7", "P3", "P7", "Fz", "Cz", "Pz", "POz", "PO3", "O1", "Oz", "O2", "P4", "P8", "PO4", "PO8",
];

/// Electrode adjacency used for the default spatial spread.
fn neighbors(channel: &str) -> &'static [&'static str] {
    match channel {
        "PO7" => &["P7", "PO3", "O1"],
        "P3" => &["P7", "Pz", "PO3", "Cz"],
        "P7" => &["P3", "PO7"],
        "Fz" => &["Cz"],
        "Cz" => &["Fz", "Pz", "P3", "P4"],
        "Pz" => &["Cz", "P3", "P4", "POz"],
        "POz" => &["Pz", "PO3", "PO4", "Oz"],
        "PO3" => &["P3", "POz", "PO7", "O1"],
        "O1" => &["PO7", "PO3", "Oz"],
        "Oz" => &["O1", "O2", "POz"],
        "O2" => &["PO8", "PO4", "Oz"],
        "P4" => &["P8", "Pz", "PO4", "Cz"],
        "P8" => &["P4", "PO8"],
        "PO4" => &["P4", "POz", "PO8", "O2"],
        "PO8" => &["P8", "PO4", "O2"],
        _ => &[],
    }
}

/// Channel groups addressable by [`ShiftSpec`]. `all` covers every channel.
pub fn channel_group(group: &str) -> Option<&'static [&'static str]> {
    Some(match group {
        "frontal" => &["Fz"],
        "central" => &["Cz"],
        "parietal" => &["P3", "Pz", "P4"],
        "lateral_parietal" => &["P7", "P8"],
        "parieto_occipital" => &["PO7", "PO3", "POz", "PO4", "PO8"],
        "occipital" => &["O1", "Oz", "O2"],
        "all" => &MONTAGE,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_commands: usize,
    pub soa_ms: f64,
    pub stim_ms: f64,
    pub isi_ms: f64,
    pub cue_ms: f64,
    /// Shown inside the processing gap.
    pub feedback_ms: f64,
    pub processing_gap_ms: f64,
    pub repetitions: usize,
    pub targets_per_session: usize,
    pub fs: f64,
    /// Minimum index difference between two flashes of the same command.
    pub min_gap: usize,
    /// Quiet time before the first cue and after the last block.
    pub margin_ms: f64,
    /// Apply the 50 Hz notch and 0.1-60 Hz order-4 bandpass of the amplifier.
    pub acquisition_filters: bool,
    /// Selection time used for ITR in place of the block duration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_time_s: Option<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::calibration()
    }
}

impl ProtocolConfig {
    pub fn calibration() -> Self {
        Self {
            n_commands: 9,
            soa_ms: 110.0,
            stim_ms: 40.0,
            isi_ms: 70.0,
            cue_ms: 500.0,
            feedback_ms: 500.0,
            processing_gap_ms: 1000.0,
            repetitions: 10,
            targets_per_session: 18,
            fs: 512.0,
            min_gap: 3,
            margin_ms: 1000.0,
            acquisition_filters: true,
            selection_time_s: None,
        }
    }

    pub fn online() -> Self {
        Self {
            repetitions: 1,
            ..Self::calibration()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProtocol(m));
        if !(2..=255).contains(&self.n_commands) {
            return bad(format!("n_commands {} outside 2..=255", self.n_commands));
        }
        for (name, v) in [
            ("soa_ms", self.soa_ms),
            ("stim_ms", self.stim_ms),
            ("fs", self.fs),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("isi_ms", self.isi_ms),
            ("cue_ms", self.cue_ms),
            ("feedback_ms", self.feedback_ms),
            ("processing_gap_ms", self.processing_gap_ms),
            ("margin_ms", self.margin_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if (self.stim_ms + self.isi_ms - self.soa_ms).abs() > 1e-9 {
            return bad(format!(
                "stim_ms + isi_ms = {} but soa_ms = {}",
                self.stim_ms + self.isi_ms,
                self.soa_ms
            ));
        }
        if self.feedback_ms > self.processing_gap_ms {
            return bad("feedback must fit inside the processing gap".into());
        }
        if let Some(t) = self.selection_time_s {
            if !(t > 0.0 && t.is_finite()) {
                return bad("selection_time_s must be positive".into());
            }
        }
        if self.repetitions == 0 || self.targets_per_session == 0 {
            return bad("repetitions and targets_per_session must be positive".into());
        }
        Ok(())
    }

    pub fn flashes_per_block(&self) -> usize {
        self.n_commands * self.repetitions
    }

    /// Cue, flashes, then the processing gap (which contains the feedback).
    pub fn block_ms(&self) -> f64 {
        self.cue_ms + self.flashes_per_block() as f64 * self.soa_ms + self.processing_gap_ms
    }

    /// Time to produce one command.
    pub fn selection_time_s(&self) -> f64 {
        self.selection_time_s.unwrap_or(self.block_ms() / 1000.0)
    }

    pub fn n_events(&self) -> usize {
        self.targets_per_session * self.flashes_per_block()
    }
}

/// Flash order for one selection block: `repetitions` permutations of
/// `1..=n_commands` such that two flashes of the same command are at least
/// `min_gap` positions apart.
pub fn flash_sequence(n_commands: usize, repetitions: usize, min_gap: usize, seed: u64) -> Result<Vec<u8>> {
    if !(1..=255).contains(&n_commands) {
        return Err(Error::InvalidProtocol(format!("n_commands {n_commands} outside 1..=255")));
    }
    if repetitions > 1 && min_gap > n_commands {
        return Err(Error::ConstraintUnsatisfiable(format!(
            "min_gap {min_gap} exceeds the {n_commands}-flash trial length"
        )));
    }
    let mut r = rng::stream(seed, "flash_sequence");
    let mut out: Vec<u8> = Vec::with_capacity(n_commands * repetitions);
    for _ in 0..repetitions {
        let start = out.len();
        // Most recent position of every command, if any.
        let mut last = vec![None::<usize>; n_commands + 1];
        for (i, &c) in out.iter().enumerate() {
            last[c as usize] = Some(i);
        }
        let mut block = Vec::with_capacity(n_commands);
        let mut used = vec![false; n_commands + 1];
        if !place(&mut block, &mut used, &last, start, n_commands, min_gap, &mut r) {
            return Err(Error::ConstraintUnsatisfiable(format!(
                "no permutation of {n_commands} commands satisfies min_gap {min_gap}"
            )));
        }
        out.extend(block);
    }
    Ok(out)
}

/// Randomized depth-first placement with backtracking.
fn place(
    block: &mut Vec<u8>,
    used: &mut [bool],
    last: &[Option<usize>],
    start: usize,
    n: usize,
    min_gap: usize,
    r: &mut rng::Rng,
) -> bool {
    if block.len() == n {
        return true;
    }
    let pos = start + block.len();
    let mut candidates: Vec<u8> = (1..=n as u8)
        .filter(|&c| !used[c as usize] && last[c as usize].is_none_or(|p| pos - p >= min_gap))
        .collect();
    candidates.shuffle(r);
    for c in candidates {
        used[c as usize] = true;
        block.push(c);
        if place(block, used, last, start, n, min_gap, r) {
            return true;
        }
        block.pop();
        used[c as usize] = false;
    }
    false
}

/// Cued targets: every command equally often, then a random remainder.
pub fn target_sequence(n_commands: usize, n_targets: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed, "targets");
    let mut out: Vec<u8> = (0..n_targets / n_commands)
        .flat_map(|_| 1..=n_commands as u8)
        .collect();
    let mut rest: Vec<u8> = (1..=n_commands as u8).collect();
    rest.shuffle(&mut r);
    out.extend(rest.into_iter().take(n_targets % n_commands));
    out.shuffle(&mut r);
    out
}

/// Gaussian ERP template with a fixed spatial map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpComponentSpec {
    pub name: String,
    /// Electrode where the component is measured.
    pub channel: String,
    /// Per-montage-channel weights.
    pub weights: Vec<f64>,
    /// Peak magnitude in microvolts.
    pub amplitude_uv: f64,
    pub latency_ms: f64,
    /// Gaussian standard deviation.
    pub width_ms: f64,
    pub polarity: Polarity,
    /// Post-stimulus search window used when measuring the peak.
    pub window_ms: (f64, f64),
}

impl ErpComponentSpec {
    /// Named channel 1.0, its neighbours 0.5, everything else 0.1.
    pub fn new(
        name: &str,
        channel: &str,
        amplitude_uv: f64,
        latency_ms: f64,
        width_ms: f64,
        window_ms: (f64, f64),
    ) -> Result<Self> {
        if !MONTAGE.contains(&channel) {
            return Err(Error::InvalidProtocol(format!("{channel} is not in the montage")));
        }
        let near = neighbors(channel);
        let weights = MONTAGE
            .iter()
            .map(|c| {
                if *c == channel {
                    1.0
                } else if near.contains(c) {
                    0.5
                } else {
                    0.1
                }
            })
            .collect();
        let spec = Self {
            name: name.to_string(),
            channel: channel.to_string(),
            weights,
            amplitude_uv: amplitude_uv.abs(),
            latency_ms,
            width_ms,
            polarity: if amplitude_uv < 0.0 {
                Polarity::Negative
            } else {
                Polarity::Positive
            },
            window_ms,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Signed peak amplitude.
    pub fn signed_amplitude(&self) -> f64 {
        self.polarity.sign() * self.amplitude_uv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProtocol(format!("component {}: {m}", self.name)));
        if !(self.width_ms > 0.0) {
            return bad("width must be positive".into());
        }
        if self.weights.len() != MONTAGE.len() || self.weights.iter().any(|w| !w.is_finite()) {
            return bad("needs one finite weight per montage channel".into());
        }
        if !(self.amplitude_uv >= 0.0 && self.amplitude_uv.is_finite()) {
            return bad("amplitude must be finite and non-negative".into());
        }
        if self.latency_ms < 0.0 || self.latency_ms + 3.0 * self.width_ms > 1000.0 {
            return bad("template must lie within 0..1000 ms after onset".into());
        }
        if !MONTAGE.contains(&self.channel.as_str()) {
            return bad(format!("{} is not in the montage", self.channel));
        }
        Ok(())
    }

    /// Template value at `t_ms` after onset on channel `c`, before gain.
    fn value(&self, c: usize, t_ms: f64, latency_ms: f64) -> f64 {
        let d = (t_ms - latency_ms) / self.width_ms;
        self.signed_amplitude() * self.weights[c] * (-0.5 * d * d).exp()
    }
}

/// Observed target-class grand-average peaks after offline analysis.
pub fn table4_components() -> Vec<ErpComponentSpec> {
    [
        ("N100", "Pz", -1.18, 128.27, 20.0, (100.0, 200.0)),
        ("P100", "P8", 2.76, 157.51, 20.0, (100.0, 200.0)),
        ("VPP", "Fz", 3.96, 237.43, 35.0, (200.0, 400.0)),
        ("P300", "POz", 6.41, 256.93, 50.0, (200.0, 400.0)),
        ("N400", "Fz", -1.49, 551.27, 60.0, (400.0, 600.0)),
    ]
    .into_iter()
    .map(|(n, c, a, l, w, win)| ErpComponentSpec::new(n, c, a, l, w, win).expect("valid preset"))
    .collect()
}

/// Per-channel-group amplitude scaling and latency jitter of the target
/// responses between sessions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    /// Group name (see [`channel_group`]) to scale; scales multiply.
    pub amplitude_scale: BTreeMap<String, f64>,
    /// Each target response is moved by a uniform draw in ±jitter.
    pub latency_jitter_ms: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn uniform(scale: f64) -> Self {
        Self {
            amplitude_scale: BTreeMap::from([("all".to_string(), scale)]),
            ..Self::default()
        }
    }

    pub fn channel_scales(&self) -> Result<Vec<f64>> {
        let mut out = vec![1.0; MONTAGE.len()];
        for (group, &s) in &self.amplitude_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::validation(format!("amplitude_scale.{group}"), "scale must be >= 0"));
            }
            let members = channel_group(group)
                .ok_or_else(|| Error::validation(format!("amplitude_scale.{group}"), "unknown channel group"))?;
            for (c, name) in MONTAGE.iter().enumerate() {
                if members.contains(name) {
                    out[c] *= s;
                }
            }
        }
        Ok(out)
    }
}

/// Everything needed to render a session; re-rendering with a modified
/// shift leaves the noise realization untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSession {
    pub protocol: ProtocolConfig,
    pub components: Vec<ErpComponentSpec>,
    pub noise: NoiseSpec,
    /// Gain of the target responses, one per selection block or a single
    /// value for all.
    pub attend_gain: Vec<f64>,
    /// Seed of the flash schedule and cued targets.
    pub seed: u64,
    pub shift: ShiftSpec,
}

impl SynthSession {
    pub fn new(
        protocol: ProtocolConfig,
        components: Vec<ErpComponentSpec>,
        noise: NoiseSpec,
        attend_gain: Vec<f64>,
        seed: u64,
    ) -> Self {
        Self {
            protocol,
            components,
            noise,
            attend_gain,
            seed,
            shift: ShiftSpec::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.noise.validate()?;
        for c in &self.components {
            c.validate()?;
        }
        let n = self.attend_gain.len();
        if n != 1 && n != self.protocol.targets_per_session {
            return Err(Error::InvalidProtocol(format!(
                "attend_gain has {n} entries for {} blocks",
                self.protocol.targets_per_session
            )));
        }
        if self.attend_gain.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidProtocol("attend_gain must be finite".into()));
        }
        Ok(())
    }

    fn gain(&self, block: usize) -> f64 {
        if self.attend_gain.len() == 1 {
            self.attend_gain[0]
        } else {
            self.attend_gain[block]
        }
    }

    /// Event list and total length of the session.
    pub fn schedule(&self) -> Result<(Vec<Event>, usize)> {
        let p = &self.protocol;
        p.validate()?;
        let targets = target_sequence(p.n_commands, p.targets_per_session, self.seed);
        let to_sample = |ms: f64| (ms / 1000.0 * p.fs).round() as usize;
        let mut events = Vec::with_capacity(p.n_events());
        for (b, &target) in targets.iter().enumerate() {
            let block_start = p.margin_ms + b as f64 * p.block_ms();
            let seq = flash_sequence(
                p.n_commands,
                p.repetitions,
                p.min_gap,
                rng::cell_seed(self.seed, "block", &[b as u64]),
            )?;
            for (k, &command) in seq.iter().enumerate() {
                let onset = block_start + p.cue_ms + k as f64 * p.soa_ms;
                events.push(Event {
                    sample: to_sample(onset),
                    command,
                    is_target: command == target,
                    block: b,
                });
            }
        }
        let total = to_sample(2.0 * p.margin_ms + targets.len() as f64 * p.block_ms());
        Ok((events, total))
    }

    /// Target responses only, channels × samples.
    fn signal(&self, events: &[Event], n: usize) -> Result<Vec<Vec<f64>>> {
        let fs = self.protocol.fs;
        let scales = self.shift.channel_scales()?;
        let mut jitter_rng = rng::stream(self.shift.seed, "latency_jitter");
        let mut out = vec![vec![0.0; n]; MONTAGE.len()];
        for ev in events.iter().filter(|e| e.is_target) {
            let j = self.shift.latency_jitter_ms;
            let offset = if j > 0.0 { jitter_rng.random_range(-j..=j) } else { 0.0 };
            let gain = self.gain(ev.block);
            for comp in &self.components {
                let lat = comp.latency_ms + offset;
                let lo = ((lat - 6.0 * comp.width_ms) / 1000.0 * fs).floor().max(0.0) as usize;
                let hi = ((lat + 6.0 * comp.width_ms) / 1000.0 * fs).ceil() as usize;
                for (c, row) in out.iter_mut().enumerate() {
                    let g = gain * scales[c];
                    for k in lo..=hi {
                        let s = ev.sample + k;
                        if s >= n {
                            break;
                        }
                        row[s] += g * comp.value(c, k as f64 * 1000.0 / fs, lat);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn render(&self) -> Result<ContinuousRecording> {
        self.validate()?;
        let (events, n) = self.schedule()?;
        let fs = self.protocol.fs;
        let mut data = self.noise.render(MONTAGE.len(), n, fs)?;
        for (row, sig) in data.iter_mut().zip(self.signal(&events, n)?) {
            for (v, s) in row.iter_mut().zip(sig) {
                *v += s;
            }
        }
        let mut rec = ContinuousRecording::new(fs, MONTAGE.iter().map(|s| s.to_string()).collect(), data, events)?;
        if self.protocol.acquisition_filters {
            rec = rec.filtered(&notch(50.0, 35.0, fs)?)?;
            rec = rec.filtered(&butter_bandpass(4, 0.1, 60.0, fs)?)?;
        }
        Ok(rec)
    }
}

/// Render a session.
pub fn synth_session(
    cfg: &ProtocolConfig,
    components: &[ErpComponentSpec],
    noise: &NoiseSpec,
    attend_gain: &[f64],
    seed: u64,
) -> Result<ContinuousRecording> {
    SynthSession::new(cfg.clone(), components.to_vec(), noise.clone(), attend_gain.to_vec(), seed).render()
}

/// The same session with its target responses rescaled and jittered.
pub fn session_shift(session: &SynthSession, shift: &ShiftSpec) -> Result<SynthSession> {
    shift.channel_scales()?;
    if !(shift.latency_jitter_ms >= 0.0 && shift.latency_jitter_ms.is_finite()) {
        return Err(Error::validation("latency_jitter_ms", "jitter must be >= 0"));
    }
    Ok(SynthSession {
        shift: shift.clone(),
        ..session.clone()
    })
}
