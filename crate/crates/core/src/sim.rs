//! Parametric EM-emission simulator standing in for the target device and
//! the capture rig.
//!
//! Every instruction emits one pulse per clock cycle. The pulse height is the
//! instruction's base amplitude, modulated by the class of the instruction
//! executed just before it (plus a small per-mnemonic perturbation). Each
//! capture then gets one multiplicative gain draw, white noise per sample,
//! and a bounded circular shift modelling clock drift at the trigger.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::isa::{hex, ExecutionPath, Instruction, OpClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    #[default]
    HalfSine,
    Triangle,
    Square,
}

impl PulseShape {
    /// Value of the per-cycle template at sample `k` of `n`, sampled at bin
    /// centres so the arch peaks at the middle sample.
    pub fn value(self, k: usize, n: usize) -> f64 {
        let x = (k as f64 + 0.5) / n as f64;
        match self {
            PulseShape::HalfSine => (PI * x).sin(),
            PulseShape::Triangle => 1.0 - (2.0 * x - 1.0).abs(),
            PulseShape::Square => 1.0,
        }
    }

    pub fn template(self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.value(k, n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub prev: OpClass,
    pub cur: OpClass,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionConfig {
    pub samples_per_cycle: usize,
    pub base_amplitude: BTreeMap<String, f64>,
    pub pulse_shape: PulseShape,
    /// Class-pair amplitude factors; pairs not listed use 1.0.
    pub influence: Vec<InfluenceEntry>,
    /// Per-predecessor-mnemonic relative perturbation of the class factor.
    pub influence_spread: BTreeMap<String, f64>,
    pub noise_sigma: f64,
    pub jitter_sigma: f64,
    pub drift_max: usize,
    pub seed: u64,
}

const DEFAULT_AMPLITUDES: [(&str, f64); 23] = [
    ("adc", 1.15),
    ("add", 1.00),
    ("and", 0.90),
    ("asr", 1.10),
    ("breq", 0.70),
    ("clr", 0.80),
    ("cls", 0.40),
    ("clv", 0.42),
    ("com", 1.20),
    ("cp", 0.75),
    ("eor", 0.65),
    ("ldi", 0.95),
    ("lsl", 0.60),
    ("lsr", 0.55),
    ("mov", 0.70),
    ("nop", 0.30),
    ("rjmp", 0.75),
    ("sbc", 1.25),
    ("sbi", 1.30),
    ("ser", 0.90),
    ("ses", 0.45),
    ("sev", 0.50),
    ("sub", 0.85),
];

const DEFAULT_INFLUENCE: [(OpClass, OpClass, f64); 8] = [
    (OpClass::Io, OpClass::Logic, 1.15),
    (OpClass::Io, OpClass::Transfer, 1.12),
    (OpClass::Arithmetic, OpClass::Logic, 0.92),
    (OpClass::Logic, OpClass::Arithmetic, 1.08),
    (OpClass::Transfer, OpClass::Arithmetic, 1.05),
    (OpClass::Flag, OpClass::Flag, 0.90),
    (OpClass::Branch, OpClass::Transfer, 0.94),
    (OpClass::Branch, OpClass::Io, 0.95),
];

impl Default for EmissionConfig {
    fn default() -> Self {
        EmissionConfig {
            samples_per_cycle: 31,
            base_amplitude: DEFAULT_AMPLITUDES
                .iter()
                .map(|(m, a)| (m.to_string(), *a))
                .collect(),
            pulse_shape: PulseShape::HalfSine,
            influence: DEFAULT_INFLUENCE
                .iter()
                .map(|&(prev, cur, factor)| InfluenceEntry { prev, cur, factor })
                .collect(),
            influence_spread: DEFAULT_AMPLITUDES
                .iter()
                .map(|(m, _)| (m.to_string(), 0.02))
                .collect(),
            noise_sigma: 0.05,
            jitter_sigma: 0.02,
            drift_max: 4,
            seed: 0x5e_ed0f_e4a7,
        }
    }
}

impl EmissionConfig {
    /// Default amplitudes with every random effect switched off.
    pub fn noiseless() -> Self {
        EmissionConfig::default().without_randomness()
    }

    /// Config paired with [`crate::isa::Catalog::calibrated`]: one sample per
    /// tick, no drift.
    pub fn calibration() -> Self {
        EmissionConfig {
            samples_per_cycle: 1,
            drift_max: 0,
            ..EmissionConfig::default()
        }
    }

    pub fn without_randomness(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.jitter_sigma = 0.0;
        self.drift_max = 0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: EmissionConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples_per_cycle == 0 {
            return bad("samples_per_cycle must be at least 1".into());
        }
        if let Some((m, a)) = self
            .base_amplitude
            .iter()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return bad(format!("amplitude for `{m}` must be positive, got {a}"));
        }
        if let Some(e) = self
            .influence
            .iter()
            .find(|e| !(e.factor.is_finite() && e.factor > 0.0))
        {
            return bad(format!(
                "influence factor {}->{} must be positive",
                e.prev, e.cur
            ));
        }
        if let Some((m, s)) = self
            .influence_spread
            .iter()
            .find(|(_, s)| !(s.is_finite() && (0.0..1.0).contains(*s)))
        {
            return bad(format!(
                "influence spread for `{m}` must be in [0, 1), got {s}"
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.drift_max >= self.samples_per_cycle.max(1) && self.drift_max > 0 {
            return bad(format!(
                "drift_max ({}) must be below samples_per_cycle ({})",
                self.drift_max, self.samples_per_cycle
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn influence_factor(&self, prev: OpClass, cur: OpClass) -> f64 {
        self.influence
            .iter()
            .find(|e| e.prev == prev && e.cur == cur)
            .map_or(1.0, |e| e.factor)
    }

    /// Noise-free pulse height of `cur` when it executes right after `prev`.
    pub fn pair_amplitude(&self, prev: &Instruction, cur: &Instruction) -> Result<f64> {
        let base = self
            .base_amplitude
            .get(&cur.mnemonic)
            .ok_or_else(|| Error::Config(format!("no base amplitude for `{}`", cur.mnemonic)))?;
        let spread = self
            .influence_spread
            .get(&prev.mnemonic)
            .copied()
            .unwrap_or(0.0);
        let wobble = 1.0 + spread * pair_offset(&prev.mnemonic, &cur.mnemonic);
        Ok(base * self.influence_factor(prev.op_class, cur.op_class) * wobble)
    }
}

/// Fixed pseudo-random value in [-1, 1] for a mnemonic pair (FNV-1a).
fn pair_offset(prev: &str, cur: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prev.bytes().chain(*b"|").chain(cur.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Combines a base seed with a stream discriminator (SplitMix64 finalizer).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Simulated,
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub samples: Vec<f64>,
    pub samples_per_cycle: usize,
    pub origin: Origin,
    pub path_id: Option<usize>,
    /// Sample offset of the loop start.
    pub alignment: Option<usize>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Simulates one capture of `path`. Pure in `(path, config, capture_index)`.
pub fn emit(path: &ExecutionPath, config: &EmissionConfig, capture_index: u64) -> Result<Trace> {
    config.validate()?;
    let n = path.len();
    if n == 0 {
        return Err(Error::Parameter("cannot emit an empty path".into()));
    }
    let spc = config.samples_per_cycle;
    let template = config.pulse_shape.template(spc);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(capture_index);
    let gain = 1.0 + config.jitter_sigma * rng.sample::<f64, _>(StandardNormal);

    let mut samples = Vec::with_capacity(path.cycles() as usize * spc);
    for (i, cur) in path.instructions.iter().enumerate() {
        let prev = &path.instructions[(i + n - 1) % n];
        let amp = config.pair_amplitude(prev, cur)? * gain;
        for _ in 0..cur.cycles {
            for &t in &template {
                let noise: f64 = rng.sample(StandardNormal);
                samples.push(amp * t + config.noise_sigma * noise);
            }
        }
    }

    let shift = if config.drift_max > 0 {
        rng.random_range(0..=config.drift_max)
    } else {
        0
    };
    let len = samples.len();
    samples.rotate_right(shift % len);

    Ok(Trace {
        samples,
        samples_per_cycle: spc,
        origin: Origin::Simulated,
        path_id: Some(path.path_id),
        alignment: Some(shift),
    })
}

/// `n` captures with capture indices `0..n`.
pub fn capture_set(path: &ExecutionPath, config: &EmissionConfig, n: usize) -> Result<Vec<Trace>> {
    if n == 0 {
        return Err(Error::Parameter("capture count must be at least 1".into()));
    }
    (0..n as u64).map(|k| emit(path, config, k)).collect()
}
