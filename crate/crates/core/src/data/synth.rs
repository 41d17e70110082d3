//! Deterministic synthetic sources standing in for recorded utterances.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::init::rng_for;

use super::AudioBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    /// Harmonic series on a jittered f0 in [80, 300] Hz with a syllabic envelope.
    Harmonic,
    /// White noise through a random resonator, amplitude modulated.
    Noise,
    /// Frequency sweep with a second harmonic.
    Chirp,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Harmonic, SourceKind::Noise, SourceKind::Chirp];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Harmonic => "harmonic",
            SourceKind::Noise => "noise",
            SourceKind::Chirp => "chirp",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown source kind `{s}` (harmonic, noise, chirp)")))
    }
}

/// Slow random envelope in roughly `[0.1, 1]`, changing at syllable rate.
fn envelope(rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let rate = rng.random_range(2.0..5.0);
    let phase = rng.random_range(0.0..TAU);
    let depth = rng.random_range(0.5..0.9);
    (0..n)
        .map(|i| {
            let s = (TAU * rate * i as f64 / sr + phase).sin();
            1.0 - depth * 0.5 * (1.0 - s)
        })
        .collect()
}

fn harmonic(rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0 = rng.random_range(80.0..300.0);
    let vib_rate = rng.random_range(3.0..7.0);
    let vib_depth = rng.random_range(0.005..0.02);
    let drift_rate = rng.random_range(0.2..1.0);
    let drift_depth = rng.random_range(0.02..0.08);
    let drift_phase = rng.random_range(0.0..TAU);
    let n_harm = ((0.45 * sr / (f0 * (1.0 + drift_depth + vib_depth))) as usize).clamp(1, 30);
    let amps: Vec<f64> = (1..=n_harm).map(|h| rng.random_range(0.3..1.0) / h as f64).collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..TAU)).collect();
    let env = envelope(rng, n, sr);
    let mut theta = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0
                * (1.0 + vib_depth * (TAU * vib_rate * t).sin())
                * (1.0 + drift_depth * (TAU * drift_rate * t + drift_phase).sin());
            theta += TAU * f / sr;
            let v: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * ((h + 1) as f64 * theta + p).sin())
                .sum();
            v * env[i]
        })
        .collect()
}

fn noise(rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let fc = rng.random_range(300.0..3000.0_f64.min(0.4 * sr));
    let r: f64 = rng.random_range(0.9..0.98);
    let (a1, a2) = (2.0 * r * (TAU * fc / sr).cos(), -r * r);
    let env = envelope(rng, n, sr);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(rng);
            let y = w + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y * env[i]
        })
        .collect()
}

fn chirp(rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let top = 0.4 * sr;
    let f_start = rng.random_range(100.0..1000.0_f64.min(top / 2.0));
    let f_end = rng.random_range(f_start * 1.5..top);
    let (f_start, f_end) = if rng.random_bool(0.5) { (f_start, f_end) } else { (f_end, f_start) };
    let second = rng.random_range(0.1..0.5);
    let dur = n as f64 / sr;
    let mut theta = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f_start * (f_end / f_start).powf(t / dur);
            theta += TAU * f / sr;
            let h2 = if 2.0 * f < 0.5 * sr { second * (2.0 * theta).sin() } else { 0.0 };
            theta.sin() + h2
        })
        .collect()
}

/// Generates `duration_s` seconds of a source with unit RMS, deterministic
/// in `seed`.
pub fn synth_source(kind: SourceKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioBuffer> {
    if !(duration_s > 0.0) || sample_rate == 0 {
        return Err(Error::Data(format!("invalid duration {duration_s} s or sample rate {sample_rate}")));
    }
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let sr = sample_rate as f64;
    let mut rng = rng_for(seed, 11);
    let mut x = match kind {
        SourceKind::Harmonic => harmonic(&mut rng, n, sr),
        SourceKind::Noise => noise(&mut rng, n, sr),
        SourceKind::Chirp => chirp(&mut rng, n, sr),
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    AudioBuffer::new(x, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_rms() {
        for kind in SourceKind::ALL {
            let a = synth_source(kind, 0.5, 8000, 42).unwrap();
            let b = synth_source(kind, 0.5, 8000, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.samples.len(), 4000);
            assert!((a.rms() - 1.0).abs() < 1e-6, "{kind}: {}", a.rms());
        }
    }

    #[test]
    fn kinds_parse() {
        for kind in SourceKind::ALL {
            assert_eq!(kind.name().parse::<SourceKind>().unwrap(), kind);
        }
        assert!("speech".parse::<SourceKind>().is_err());
    }
}
