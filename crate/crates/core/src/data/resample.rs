//! Windowed-sinc resampling for speed perturbation.

use std::sync::OnceLock;

use crate::error::{Error, Result};

use super::AudioBuffer;

/// Taps on each side of the interpolation point.
pub const HALF_TAPS: usize = 32;
pub const KAISER_BETA: f64 = 8.0;

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const TABLE_SIZE: usize = 16384;

/// Kaiser window sampled on a uniform grid in `r^2`, `r` the normalized
/// distance from the centre.
fn kaiser_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let norm = bessel_i0(KAISER_BETA);
        (0..=TABLE_SIZE)
            .map(|i| bessel_i0(KAISER_BETA * (1.0 - i as f64 / TABLE_SIZE as f64).sqrt()) / norm)
            .collect()
    })
}

fn kaiser(table: &[f64], d: f64, half: f64) -> f64 {
    let u = (d / half) * (d / half);
    if u >= 1.0 {
        return 0.0;
    }
    let pos = u * TABLE_SIZE as f64;
    let i = pos as usize;
    let frac = pos - i as f64;
    table[i] + frac * (table[i + 1] - table[i])
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Plays `x` back `factor` times faster: the output has `round(L / factor)`
/// samples at the same nominal rate, so pitch and duration both change.
/// The cutoff drops to `1 / factor` of Nyquist when speeding up.
pub fn speed_perturb(x: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(Error::Domain(format!("speed factor {factor} outside (0.5, 2)")));
    }
    AudioBuffer::new(resample_by(&x.samples, factor), x.sample_rate)
}

/// Converts to `rate` Hz, keeping duration and pitch.
pub fn resample_to(x: &AudioBuffer, rate: u32) -> Result<AudioBuffer> {
    if rate == 0 {
        return Err(Error::Domain("target sample rate must be positive".into()));
    }
    if rate == x.sample_rate {
        return Ok(x.clone());
    }
    AudioBuffer::new(resample_by(&x.samples, x.sample_rate as f64 / rate as f64), rate)
}

fn resample_by(x: &[f64], factor: f64) -> Vec<f64> {
    let n_out = (x.len() as f64 / factor).round() as usize;
    let cutoff = (1.0 / factor).min(1.0);
    let half = (HALF_TAPS + 1) as f64;
    let table = kaiser_table();
    let len = x.len() as isize;
    (0..n_out)
        .map(|n| {
            let t = n as f64 * factor;
            let base = t.floor() as isize;
            let mut acc = 0.0;
            for k in (base - HALF_TAPS as isize + 1)..=(base + HALF_TAPS as isize) {
                if k < 0 || k >= len {
                    continue;
                }
                let d = t - k as f64;
                acc += x[k as usize] * cutoff * sinc(cutoff * d) * kaiser(table, d, half);
            }
            acc
        })
        .collect()
}
