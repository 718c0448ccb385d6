use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{reference_components, ErpComponentSpec, NoiseSpec, ProtocolConfig, ShiftSpec, SynthSession};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrLevel {
    High,
    Medium,
    Low,
}

impl SnrLevel {
    /// (pink RMS, mains peak, white RMS) in µV.
    pub fn noise_levels(self) -> (f64, f64, f64) {
        match self {
            SnrLevel::High => (4.0, 2.0, 1.0),
            SnrLevel::Medium => (8.0, 5.0, 2.0),
            SnrLevel::Low => (14.0, 8.0, 3.0),
        }
    }
}

/// A synthetic participant: templates and noise drawn around the reference
/// components, plus the change of their responses between the calibration
/// and the online sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: usize,
    pub snr: SnrLevel,
    pub components: Vec<ErpComponentSpec>,
    pub noise: NoiseSpec,
    pub online_shift: ShiftSpec,
}

impl SubjectProfile {
    pub fn generate(id: usize, snr: SnrLevel, seed: u64) -> Result<Self> {
        let mut r = rng::cell_stream(seed, "subject", &[id as u64]);
        let mut normal = move || -> f64 { r.sample(StandardNormal) };
        let components = reference_components()?
            .into_iter()
            .map(|mut c| {
                c.amplitude_uv *= (1.0 + 0.15 * normal()).clamp(0.6, 1.4);
                c.latency_ms += (10.0 * normal()).clamp(-25.0, 25.0);
                c
            })
            .collect();
        let (pink, mains, white) = snr.noise_levels();
        let jitter = |x: f64| (1.0 + 0.1 * x).clamp(0.8, 1.2);
        let noise = NoiseSpec::new(
            pink * jitter(normal()),
            mains * jitter(normal()),
            white * jitter(normal()),
            rng::cell_seed(seed, "subject_noise", &[id as u64]),
        );
        let u = |x: f64, lo: f64, hi: f64| lo + (hi - lo) * (0.5 + 0.5 * (x / 3.0).tanh());
        let online_shift = ShiftSpec {
            amplitude_scale: BTreeMap::from([
                ("lateral_parietal".to_string(), u(normal(), 0.6, 1.0)),
                ("parieto_occipital".to_string(), u(normal(), 0.7, 1.0)),
                ("frontal".to_string(), u(normal(), 1.0, 1.2)),
                ("central".to_string(), u(normal(), 1.0, 1.2)),
            ]),
            latency_jitter_ms: u(normal(), 0.0, 15.0),
            seed: rng::cell_seed(seed, "subject_shift", &[id as u64]),
        };
        Ok(Self {
            id,
            snr,
            components,
            noise,
            online_shift,
        })
    }

    /// Calibration session for this subject.
    pub fn calibration_session(&self, protocol: ProtocolConfig, seed: u64) -> SynthSession {
        SynthSession::new(protocol, self.components.clone(), self.noise.clone(), vec![1.0], seed)
    }

    /// Online session with its own noise realization and the subject's shift.
    pub fn online_session(&self, protocol: ProtocolConfig, seed: u64, noise_seed: u64) -> SynthSession {
        let noise = NoiseSpec {
            seed: noise_seed,
            ..self.noise.clone()
        };
        let mut s = SynthSession::new(protocol, self.components.clone(), noise, vec![1.0], seed);
        s.shift = self.online_shift.clone();
        s
    }
}
