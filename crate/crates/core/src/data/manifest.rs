//! Line-oriented dataset manifests: `seed<TAB>duration_s<TAB>kind_a<TAB>kind_b`.
//!
//! A kind is either a synthetic source name or `file:<path>` pointing at a
//! WAV file; blank lines and lines starting with `#` are ignored.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{derive_seed, rng_for};

use super::resample::resample_to;
use super::synth::{synth_source, SourceKind};
use super::wav::read_wav;
use super::AudioBuffer;

#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    Synth(SourceKind),
    File(PathBuf),
}

impl SourceSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(SourceSpec::File(PathBuf::from(p))),
            Some(_) => Err(Error::Data("empty file source".into())),
            None => s.parse().map(SourceSpec::Synth),
        }
    }

    /// Loads or synthesizes `duration_s` seconds at `sample_rate`. Files are
    /// resampled if needed and cut to the duration.
    pub fn load(&self, duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioBuffer> {
        match self {
            SourceSpec::Synth(kind) => synth_source(*kind, duration_s, sample_rate, seed),
            SourceSpec::File(path) => {
                let mut buf = resample_to(&read_wav(path)?, sample_rate)?;
                let n = (duration_s * sample_rate as f64).round() as usize;
                buf.samples.truncate(n.max(1));
                Ok(buf)
            }
        }
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::Synth(k) => write!(f, "{k}"),
            SourceSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub duration_s: f64,
    pub kind_a: SourceSpec,
    pub kind_b: SourceSpec,
}

impl ManifestEntry {
    /// Both sources of the entry, seeded from `seed`.
    pub fn sources(&self, sample_rate: u32, seed: u64) -> Result<[AudioBuffer; 2]> {
        Ok([
            self.kind_a.load(self.duration_s, sample_rate, derive_seed(seed, 1))?,
            self.kind_b.load(self.duration_s, sample_rate, derive_seed(seed, 2))?,
        ])
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Data(format!("manifest line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        let [seed, dur, a, b] = f[..] else {
            return Err(err(format!("expected 4 tab-separated fields, got {}", f.len())));
        };
        let seed = seed.parse().map_err(|_| err(format!("bad seed `{seed}`")))?;
        let duration_s: f64 = dur.parse().map_err(|_| err(format!("bad duration `{dur}`")))?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(err(format!("duration must be positive, got {duration_s}")));
        }
        let kind_a = SourceSpec::parse(a).map_err(|e| err(e.to_string()))?;
        let kind_b = SourceSpec::parse(b).map_err(|e| err(e.to_string()))?;
        out.push(ManifestEntry {
            seed,
            duration_s,
            kind_a,
            kind_b,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_manifest(&text)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.seed, e.duration_s, e.kind_a, e.kind_b))
        .collect()
}

/// `n` synthetic entries with random kinds, deterministic in `seed`.
pub fn synthetic_manifest(n: usize, duration_s: f64, seed: u64) -> Vec<ManifestEntry> {
    let mut rng = rng_for(seed, 3);
    let mut pick = || SourceSpec::Synth(SourceKind::ALL[rng.random_range(0..SourceKind::ALL.len())]);
    (0..n)
        .map(|i| ManifestEntry {
            seed: derive_seed(seed, i as u64),
            duration_s,
            kind_a: pick(),
            kind_b: pick(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_then_parse() {
        let m = synthetic_manifest(5, 1.5, 9);
        assert_eq!(parse_manifest(&format_manifest(&m)).unwrap(), m);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_manifest("# header\n1\t1.0\tharmonic\tnoise\n2\t-1\tchirp\tnoise\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(parse_manifest("1\t1\tharmonic\n").is_err());
        assert!(parse_manifest("1\t1\tharmonic\tvoice\n").is_err());
        let files = parse_manifest("1\t1\tfile:/tmp/a.wav\tnoise\n").unwrap();
        assert_eq!(files[0].kind_a, SourceSpec::File("/tmp/a.wav".into()));
    }
}
