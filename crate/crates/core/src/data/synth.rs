//! Synthetic bearing-fault signals: a shaft-frequency base tone plus
//! Gaussian noise, with faults adding an exponentially decaying impulse
//! train at a kind-specific characteristic frequency. Deterministic given a
//! seed, so corpora built from it are reproducible end to end.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RecordMeta, SignalRecord};

pub const SAMPLE_RATE_HZ: f64 = 12_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    Healthy,
    Ball,
    Inner,
    Outer,
}

impl FaultKind {
    /// Characteristic fault frequency as a multiple of shaft speed; the only
    /// kind-dependent quantity, so two kinds with one seed differ purely in
    /// impulse spacing.
    fn order(self) -> f64 {
        match self {
            FaultKind::Healthy => 0.0,
            FaultKind::Ball => 4.64,
            FaultKind::Inner => 5.42,
            FaultKind::Outer => 3.58,
        }
    }

    pub fn location(self) -> &'static str {
        match self {
            FaultKind::Healthy => "none",
            FaultKind::Ball => "ball",
            FaultKind::Inner => "inner race",
            FaultKind::Outer => "outer race",
        }
    }
}

/// Damage morphology: punctual (drilled-pit-like sharp rings) versus
/// distributed (broad, damped wear patches). The two make a source/target
/// pair for artificial-to-real style transfer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DamagePattern {
    Punctual,
    Distributed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatingCondition {
    pub name: String,
    pub shaft_hz: f64,
}

/// The four CWRU-style motor speeds.
pub fn default_conditions() -> Vec<OperatingCondition> {
    [(1797, "1797rpm"), (1772, "1772rpm"), (1750, "1750rpm"), (1730, "1730rpm")]
        .into_iter()
        .map(|(rpm, name)| OperatingCondition {
            name: name.to_string(),
            shaft_hz: rpm as f64 / 60.0,
        })
        .collect()
}

/// Generates one two-channel record. Severity (1..=3) scales the impulse
/// amplitude; the channels share the fault signature (attenuated and slightly
/// delayed on channel two) but carry independent noise.
pub fn synth_fault_signal(
    kind: FaultKind,
    pattern: DamagePattern,
    severity: u8,
    condition: &OperatingCondition,
    duration: usize,
    fault_class: usize,
    seed: u64,
) -> SignalRecord {
    assert!(duration >= super::SEGMENT_LEN, "duration must cover one segment");
    assert!((1..=3).contains(&severity), "severity must be 1..=3");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let shaft = condition.shaft_hz;

    // Base tone + harmonic; identical for every fault kind at one condition.
    let base: Vec<f64> = (0..duration)
        .map(|i| {
            let t = i as f64 * dt;
            (std::f64::consts::TAU * shaft * t).sin()
                + 0.3 * (std::f64::consts::TAU * 2.0 * shaft * t + 0.7).sin()
        })
        .collect();

    // Fault signature: decaying resonance rings at the characteristic rate.
    let mut impulses = vec![0.0f64; duration];
    if kind != FaultKind::Healthy {
        let amp = 0.75 * f64::from(2u32.pow(u32::from(severity)));
        let (amp, tau, ring_hz) = match pattern {
            DamagePattern::Punctual => (amp, 1.5e-3, 2500.0),
            DamagePattern::Distributed => (0.45 * amp, 4.5e-3, 1500.0),
        };
        let period = SAMPLE_RATE_HZ / (kind.order() * shaft);
        let ring_len = ((8.0 * tau) * SAMPLE_RATE_HZ) as usize;
        let mut j = 0.0f64;
        loop {
            let start = (j * period).round() as usize;
            if start >= duration {
                break;
            }
            for k in 0..ring_len.min(duration - start) {
                let t = k as f64 * dt;
                impulses[start + k] +=
                    amp * (-t / tau).exp() * (std::f64::consts::TAU * ring_hz * t).sin();
            }
            j += 1.0;
        }
    }

    // Independent per-channel noise, drawn in a kind-independent order.
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..duration).map(|_| 0.25 * gaussian(rng)).collect()
    };
    let noise_a = noise(&mut rng);
    let noise_b = noise(&mut rng);

    let channel = |gain_base: f64, gain_fault: f64, delay: usize, noise: &[f64]| -> Vec<f32> {
        (0..duration)
            .map(|i| {
                let fault = if i >= delay { impulses[i - delay] } else { 0.0 };
                (gain_base * base[i] + gain_fault * fault + noise[i]) as f32
            })
            .collect()
    };

    SignalRecord {
        channels: vec![channel(1.0, 1.0, 0, &noise_a), channel(0.9, 0.7, 3, &noise_b)],
        sample_rate_hz: SAMPLE_RATE_HZ,
        fault_class,
        meta: RecordMeta {
            location: kind.location().to_string(),
            cause: match pattern {
                DamagePattern::Punctual => "punctual".to_string(),
                DamagePattern::Distributed => "distributed".to_string(),
            },
            severity: if kind == FaultKind::Healthy { 0 } else { severity },
            condition: condition.name.clone(),
        },
    }
}

/// Standard normal via Box-Muller from a pair of uniform draws.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One class of the synthetic taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClassSpec {
    pub label: usize,
    pub code: String,
    pub kind: FaultKind,
    pub pattern: DamagePattern,
    pub severity: u8,
}

/// CWRU-style punctual classes: label 1 healthy, then ball / inner race /
/// outer race at severities 1..3 (labels 2..=10). `n <= 10`.
pub fn punctual_taxonomy(n: usize) -> Vec<SynthClassSpec> {
    assert!(n <= 10, "punctual taxonomy defines 10 classes");
    let mut classes = vec![SynthClassSpec {
        label: 1,
        code: "H".to_string(),
        kind: FaultKind::Healthy,
        pattern: DamagePattern::Punctual,
        severity: 1,
    }];
    for (base, code, kind) in [
        (2, "B", FaultKind::Ball),
        (5, "IR", FaultKind::Inner),
        (8, "OR", FaultKind::Outer),
    ] {
        for severity in 1..=3u8 {
            classes.push(SynthClassSpec {
                label: base + severity as usize - 1,
                code: format!("{code}{severity}"),
                kind,
                pattern: DamagePattern::Punctual,
                severity,
            });
        }
    }
    classes.truncate(n);
    classes
}

/// Distributed-damage counterparts, labels 11..; ordered severity-major so
/// the first three already span all fault kinds. `n <= 9`.
pub fn distributed_taxonomy(n: usize) -> Vec<SynthClassSpec> {
    assert!(n <= 9, "distributed taxonomy defines 9 classes");
    let mut classes = Vec::new();
    for severity in 1..=3u8 {
        for (code, kind) in
            [("DB", FaultKind::Ball), ("DIR", FaultKind::Inner), ("DOR", FaultKind::Outer)]
        {
            classes.push(SynthClassSpec {
                label: 11 + classes.len(),
                code: format!("{code}{severity}"),
                kind,
                pattern: DamagePattern::Distributed,
                severity,
            });
        }
    }
    classes.truncate(n);
    classes
}
