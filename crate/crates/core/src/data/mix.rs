use rand::Rng;

use crate::error::{Error, Result};
use crate::init::rng_for;

use super::resample::speed_perturb;
use super::AudioBuffer;

pub const SNR_RANGE_DB: (f64, f64) = (-2.5, 2.5);
pub const SPEED_RANGE: (f64, f64) = (0.95, 1.05);

/// Sampling intervals for [`MixSpec`]; must lie inside the default ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixRanges {
    pub snr_db: (f64, f64),
    pub speed: (f64, f64),
}

impl Default for MixRanges {
    fn default() -> Self {
        Self {
            snr_db: SNR_RANGE_DB,
            speed: SPEED_RANGE,
        }
    }
}

impl MixRanges {
    pub fn validate(&self) -> Result<()> {
        let inside = |(lo, hi): (f64, f64), (a, b): (f64, f64)| a <= lo && lo <= hi && hi <= b;
        if inside(self.snr_db, SNR_RANGE_DB) && inside(self.speed, SPEED_RANGE) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "mix ranges must be ordered and lie within SNR {SNR_RANGE_DB:?} dB and speed {SPEED_RANGE:?}, got {self:?}"
            )))
        }
    }
}

/// Sampled parameters of one dynamic mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub snr_db: f64,
    pub speed_factors: [f64; 2],
    pub seed: u64,
}

/// A mixture and the references it is the exact sum of.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: AudioBuffer,
    pub refs: [AudioBuffer; 2],
    pub spec: MixSpec,
}

impl MixSpec {
    /// Draws SNR and speed factors uniformly from their ranges.
    pub fn sample(seed: u64) -> Self {
        Self::sample_in(seed, &MixRanges::default())
    }

    pub fn sample_in(seed: u64, r: &MixRanges) -> Self {
        let mut rng = rng_for(seed, 7);
        Self {
            snr_db: rng.random_range(r.snr_db.0..=r.snr_db.1),
            speed_factors: [
                rng.random_range(r.speed.0..=r.speed.1),
                rng.random_range(r.speed.0..=r.speed.1),
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_snr = (SNR_RANGE_DB.0..=SNR_RANGE_DB.1).contains(&self.snr_db);
        let in_speed = self
            .speed_factors
            .iter()
            .all(|f| (SPEED_RANGE.0..=SPEED_RANGE.1).contains(f));
        if in_snr && in_speed {
            Ok(())
        } else {
            Err(Error::Data(format!("mix spec out of range: {self:?}")))
        }
    }
}

/// Power after removing the mean.
pub fn centered_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_a / P_b)` with mean-removed powers.
pub fn measured_snr_db(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (centered_power(a) / centered_power(b)).log10()
}

/// Speed-perturbs both sources, truncates them to the shorter one and scales
/// `b` so that the pair sits at `spec.snr_db`. The mixture is the sample-wise
/// sum of the returned references.
pub fn dynamic_mix(a: &AudioBuffer, b: &AudioBuffer, spec: &MixSpec) -> Result<Mixture> {
    spec.validate()?;
    if a.sample_rate != b.sample_rate {
        return Err(Error::Data(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate, b.sample_rate
        )));
    }
    let mut a = speed_perturb(a, spec.speed_factors[0])?;
    let mut b = speed_perturb(b, spec.speed_factors[1])?;
    let n = a.samples.len().min(b.samples.len());
    a.samples.truncate(n);
    b.samples.truncate(n);
    let (pa, pb) = (centered_power(&a.samples), centered_power(&b.samples));
    if !(pa > 1e-20 && pb > 1e-20) {
        return Err(Error::Data("cannot mix a silent source".into()));
    }
    let gain = (pa / (pb * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    b.samples.iter_mut().for_each(|v| *v *= gain);
    let mixture = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
    Ok(Mixture {
        mixture: AudioBuffer::new(mixture, a.sample_rate)?,
        refs: [a, b],
        spec: *spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, amp: f64) -> AudioBuffer {
        AudioBuffer::new((0..4000).map(|i| amp * (f * i as f64 / 8000.0 * std::f64::consts::TAU).sin()).collect(), 8000)
            .unwrap()
    }

    #[test]
    fn gain_follows_power_ratio() {
        let spec = MixSpec {
            snr_db: 0.0,
            speed_factors: [1.0, 1.0],
            seed: 0,
        };
        let m = dynamic_mix(&tone(200.0, 2.0), &tone(310.0, 1.0), &spec).unwrap();
        let g = m.refs[1].samples.iter().zip(&tone(310.0, 1.0).samples).find(|(_, b)| b.abs() > 0.5).map(|(r, b)| r / b);
        assert!((g.unwrap() - 2.0).abs() < 1e-3);
        assert!(measured_snr_db(&m.refs[0].samples, &m.refs[1].samples).abs() < 1e-9);
    }

    #[test]
    fn silent_source_is_rejected() {
        let spec = MixSpec::sample(3);
        let silent = AudioBuffer::new(vec![0.0; 4000], 8000).unwrap();
        assert!(dynamic_mix(&tone(200.0, 1.0), &silent, &spec).is_err());
    }

    #[test]
    fn sampled_specs_are_in_range() {
        for s in 0..200 {
            MixSpec::sample(s).validate().unwrap();
        }
    }
}
