use std::path::PathBuf;

use crate::data::MixRanges;
use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::separator::KeyDoc;

use super::optim::AdamWConfig;
use super::schedule::DecayPolicy;

fn parse<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub gamma: f64,
    /// `plateau` or `manual`.
    pub decay_policy: String,
    pub decay_epoch: u64,
    pub plateau_window: usize,
    pub plateau_delta_db: f64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Single thread and zeroed wall-clock column.
    pub deterministic: bool,
    /// Intra-op threads; 0 defers to `SEPM_THREADS`.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 15e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            gamma: 0.98,
            decay_policy: "plateau".into(),
            decay_epoch: 0,
            plateau_window: 5,
            plateau_delta_db: 0.1,
            steps_per_epoch: 1000,
            batch_size: 1,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 1000,
            precision: Precision::F32,
            deterministic: false,
            threads: 0,
        }
    }
}

pub const TRAIN_KEYS: &[KeyDoc] = &[
    KeyDoc { key: "lr", doc: "initial learning rate" },
    KeyDoc { key: "weight_decay", doc: "decoupled AdamW weight decay" },
    KeyDoc { key: "beta1", doc: "AdamW first-moment decay" },
    KeyDoc { key: "beta2", doc: "AdamW second-moment decay" },
    KeyDoc { key: "adam_eps", doc: "AdamW denominator epsilon" },
    KeyDoc { key: "clip_norm", doc: "global gradient-norm clip" },
    KeyDoc { key: "gamma", doc: "per-epoch decay factor once decay starts (0.98 to 0.99)" },
    KeyDoc { key: "decay_policy", doc: "plateau (detector) or manual (decay_epoch)" },
    KeyDoc { key: "decay_epoch", doc: "first decayed epoch for the manual policy" },
    KeyDoc { key: "plateau_window", doc: "epochs per window of the plateau detector" },
    KeyDoc { key: "plateau_delta_db", doc: "minimum windowed improvement in dB before decay starts" },
    KeyDoc { key: "steps_per_epoch", doc: "steps counted as one epoch" },
    KeyDoc { key: "batch_size", doc: "mixtures per update; values above 1 are experimental" },
    KeyDoc { key: "max_steps", doc: "total optimizer steps" },
    KeyDoc { key: "seed", doc: "seed for initialization and data" },
    KeyDoc { key: "checkpoint_every", doc: "steps between checkpoints (0: only first and last)" },
    KeyDoc { key: "precision", doc: "f32 or f64" },
    KeyDoc { key: "deterministic", doc: "one thread and wall_ms written as 0" },
    KeyDoc { key: "threads", doc: "intra-op threads (0: SEPM_THREADS or all cores)" },
];

impl TrainConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("gamma", self.gamma.to_string()),
            ("decay_policy", self.decay_policy.clone()),
            ("decay_epoch", self.decay_epoch.to_string()),
            ("plateau_window", self.plateau_window.to_string()),
            ("plateau_delta_db", self.plateau_delta_db.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("precision", self.precision.name().to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "decay_policy" => self.decay_policy = v.to_string(),
            "decay_epoch" => self.decay_epoch = parse(key, v)?,
            "plateau_window" => self.plateau_window = parse(key, v)?,
            "plateau_delta_db" => self.plateau_delta_db = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "precision" => self.precision = Precision::parse(v).map_err(|e| Error::Config(format!("precision: {e}")))?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("gamma", self.gamma),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.gamma > 1.0 {
            return Err(Error::Config("weight_decay must be >= 0 and gamma <= 1".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        self.policy().map(|_| ())
    }

    pub fn policy(&self) -> Result<DecayPolicy> {
        match self.decay_policy.as_str() {
            "manual" => Ok(DecayPolicy::ManualEpoch(self.decay_epoch)),
            "plateau" => Ok(DecayPolicy::Plateau {
                window: self.plateau_window,
                delta_db: self.plateau_delta_db,
            }),
            other => Err(Error::Config(format!("decay_policy: expected plateau or manual, got `{other}`"))),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// How training mixtures are drawn from the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    /// A fresh random entry, source seed and mix spec every step.
    Dynamic,
    /// Cycle through the entries, each always producing the same mixture.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Without a manifest, `n_mixtures` synthetic entries are generated.
    pub manifest: Option<PathBuf>,
    pub mode: DataMode,
    pub n_mixtures: usize,
    pub duration_s: f64,
    pub ranges: MixRanges,
    pub queue_depth: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            mode: DataMode::Dynamic,
            n_mixtures: 1000,
            duration_s: 4.0,
            ranges: MixRanges::default(),
            queue_depth: 4,
        }
    }
}

pub const DATA_KEYS: &[KeyDoc] = &[
    KeyDoc { key: "manifest", doc: "manifest path (seed, duration, kind_a, kind_b); empty for synthetic" },
    KeyDoc { key: "mode", doc: "dynamic (fresh mixture per step) or fixed (cycle the manifest)" },
    KeyDoc { key: "n_mixtures", doc: "entries of the synthetic manifest" },
    KeyDoc { key: "duration_s", doc: "duration of synthetic entries in seconds" },
    KeyDoc { key: "snr_min", doc: "lowest sampled SNR in dB (>= -2.5)" },
    KeyDoc { key: "snr_max", doc: "highest sampled SNR in dB (<= 2.5)" },
    KeyDoc { key: "speed_min", doc: "lowest speed factor (>= 0.95)" },
    KeyDoc { key: "speed_max", doc: "highest speed factor (<= 1.05)" },
    KeyDoc { key: "queue_depth", doc: "mixtures prepared ahead of the trainer" },
];

impl DataConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            (
                "manifest",
                self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            (
                "mode",
                match self.mode {
                    DataMode::Dynamic => "dynamic".into(),
                    DataMode::Fixed => "fixed".into(),
                },
            ),
            ("n_mixtures", self.n_mixtures.to_string()),
            ("duration_s", self.duration_s.to_string()),
            ("snr_min", self.ranges.snr_db.0.to_string()),
            ("snr_max", self.ranges.snr_db.1.to_string()),
            ("speed_min", self.ranges.speed.0.to_string()),
            ("speed_max", self.ranges.speed.1.to_string()),
            ("queue_depth", self.queue_depth.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "mode" => {
                self.mode = match v {
                    "dynamic" => DataMode::Dynamic,
                    "fixed" => DataMode::Fixed,
                    _ => return Err(Error::Config(format!("mode: expected dynamic or fixed, got `{v}`"))),
                }
            }
            "n_mixtures" => self.n_mixtures = parse(key, v)?,
            "duration_s" => self.duration_s = parse(key, v)?,
            "snr_min" => self.ranges.snr_db.0 = parse(key, v)?,
            "snr_max" => self.ranges.snr_db.1 = parse(key, v)?,
            "speed_min" => self.ranges.speed.0 = parse(key, v)?,
            "speed_max" => self.ranges.speed.1 = parse(key, v)?,
            "queue_depth" => self.queue_depth = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown data key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()?;
        if !(self.duration_s > 0.0) || (self.manifest.is_none() && self.n_mixtures == 0) {
            return Err(Error::Config("duration_s and n_mixtures must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_tables_match_pairs() {
        let t = TrainConfig::default().to_pairs();
        assert!(TRAIN_KEYS.iter().map(|k| k.key).eq(t.iter().map(|p| p.0)));
        let d = DataConfig::default().to_pairs();
        assert!(DATA_KEYS.iter().map(|k| k.key).eq(d.iter().map(|p| p.0)));
    }

    #[test]
    fn pairs_round_trip() {
        let mut t = TrainConfig::default();
        t.gamma = 0.985;
        t.precision = Precision::F64;
        let mut back = TrainConfig::default();
        for (k, v) in t.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, t);
        let mut d = DataConfig::default();
        d.mode = DataMode::Fixed;
        d.manifest = Some("m.tsv".into());
        let mut back = DataConfig::default();
        for (k, v) in d.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, d);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut d = DataConfig::default();
        d.set("snr_max", "3").unwrap();
        assert!(d.validate().is_err());
        let mut t = TrainConfig::default();
        assert!(t.set("learning_rate", "1").is_err());
        t.decay_policy = "cosine".into();
        assert!(t.validate().is_err());
    }
}
