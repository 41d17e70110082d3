//! Audio I/O, synthetic sources and dynamic mixing.

pub mod manifest;
pub mod mix;
pub mod queue;
pub mod resample;
pub mod synth;
pub mod wav;

use crate::error::{Error, Result};

pub use manifest::{parse_manifest, read_manifest, synthetic_manifest, ManifestEntry, SourceSpec};
pub use mix::{dynamic_mix, measured_snr_db, MixRanges, MixSpec, Mixture};
pub use queue::Prefetch;
pub use resample::{resample_to, speed_perturb};
pub use synth::{synth_source, SourceKind};
pub use wav::{read_wav, write_wav, WavEncoding};

/// Mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}
