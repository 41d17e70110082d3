//! Training loop: permutation-invariant SI-SDR loss, AdamW, gradient
//! clipping, learning-rate decay and resumable checkpoints.

mod config;
pub mod optim;
pub mod schedule;

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::data::{dynamic_mix, read_manifest, synthetic_manifest, ManifestEntry, MixSpec, Mixture, Prefetch};
use crate::error::{Error, Result};
use crate::init::{derive_seed, rng_for};
use crate::numerics::{Real, Tape, Tensor};
use crate::objective::{si_sdr_improvement, upit_loss_tape, CLAMP_DB};
use crate::separator::{checkpoint, SeparatorConfig, SeparatorModel};

pub use config::{DataConfig, DataMode, TrainConfig, DATA_KEYS, TRAIN_KEYS};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::{DecayPolicy, LrSchedule};

/// File name of the checkpoint written after `step` updates.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:07}.sepm")
}

pub const METRICS_FILE: &str = "metrics.tsv";
const RECENT_LOSSES: usize = 64;

/// One training pair in model precision.
#[derive(Clone, Debug)]
pub struct Example<T> {
    /// `[1 x L]`
    pub mixture: Tensor<T>,
    /// `[2 x L]`
    pub refs: Tensor<T>,
}

impl<T: Real> Example<T> {
    pub fn from_mixture(m: &Mixture) -> Result<Self> {
        let conv = |s: &[f64]| s.iter().map(|&v| T::from_f64(v)).collect::<Vec<T>>();
        let l = m.mixture.samples.len();
        let mut refs = conv(&m.refs[0].samples);
        refs.extend(conv(&m.refs[1].samples));
        Ok(Self {
            mixture: Tensor::new(vec![1, l], conv(&m.mixture.samples))?,
            refs: Tensor::new(vec![2, l], refs)?,
        })
    }
}

/// Deterministic source of training mixtures: example `i` depends only on
/// the manifest, the data seed and `i`.
#[derive(Clone, Debug)]
pub struct ExampleSource {
    entries: Arc<Vec<ManifestEntry>>,
    cfg: DataConfig,
    seed: u64,
    sample_rate: u32,
}

impl ExampleSource {
    pub fn new(cfg: &DataConfig, seed: u64, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let entries = match &cfg.manifest {
            Some(p) => read_manifest(p)?,
            None => synthetic_manifest(cfg.n_mixtures, cfg.duration_s, derive_seed(seed, 101)),
        };
        Ok(Self {
            entries: Arc::new(entries),
            cfg: cfg.clone(),
            seed,
            sample_rate,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// The mixture consumed at step index `i`.
    pub fn mixture(&self, i: u64) -> Result<Mixture> {
        let n = self.entries.len() as u64;
        let (entry, seed) = match self.cfg.mode {
            DataMode::Fixed => {
                let e = &self.entries[(i % n) as usize];
                (e, e.seed)
            }
            DataMode::Dynamic => {
                let s = derive_seed(self.seed, i);
                let idx = rng_for(s, 5).random_range(0..n) as usize;
                (&self.entries[idx], s)
            }
        };
        let [a, b] = entry.sources(self.sample_rate, seed)?;
        let spec = MixSpec::sample_in(derive_seed(seed, 3), &self.cfg.ranges);
        dynamic_mix(&a, &b, &spec)
    }
}

/// Values logged for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub last: Option<StepStats>,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Model, optimizer and schedule state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: SeparatorModel<T>,
    pub opt: AdamW<T>,
    pub sched: LrSchedule,
    pub cfg: TrainConfig,
    /// Updates applied so far.
    pub step: u64,
    epoch_loss_sum: f64,
    epoch_loss_count: u64,
    pub recent_losses: VecDeque<f64>,
}

fn join_f64(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("bad number `{x}` in state"))))
        .collect()
}

impl<T: Real> Trainer<T> {
    pub fn new(model_cfg: &SeparatorConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SeparatorModel::build(model_cfg, cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), model.params.iter().map(|(_, _, t)| t.shape().to_vec()));
        Ok(Self {
            model,
            opt,
            sched: LrSchedule::new(cfg.lr, cfg.gamma, cfg.policy()?),
            cfg: cfg.clone(),
            step: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_count: 0,
            recent_losses: VecDeque::new(),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Self::save`]. The
    /// optimizer hyperparameters come from `cfg`; model configuration and
    /// all running state come from the file.
    pub fn resume(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ck = checkpoint::load::<T>(path)?;
        let missing = |k: &str| Error::Checkpoint(format!("{}: no `{k}` in state", path.display()));
        let get = |k: &str| ck.state.get(k).cloned().ok_or_else(|| missing(k));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}` in state")))
        };
        let step = num("step")? as u64;
        let mut sched = LrSchedule::new(cfg.lr, cfg.gamma, cfg.policy()?);
        sched.trigger_epoch = match get("trigger_epoch")?.as_str() {
            "none" => None,
            v => Some(v.parse().map_err(|_| missing("trigger_epoch"))?),
        };
        if let DecayPolicy::ManualEpoch(e) = sched.policy {
            sched.trigger_epoch = Some(e);
        }
        sched.epoch_losses = split_f64(&get("epoch_losses")?)?;
        let mut opt = AdamW::new(cfg.adamw(), std::iter::empty());
        opt.t = num("adam_t")? as u64;
        for (_, name, t) in ck.model.params.iter() {
            for (key, dst) in [("adam.m/", &mut opt.m), ("adam.v/", &mut opt.v)] {
                let m = ck
                    .extra
                    .remove(&format!("{key}{name}"))
                    .ok_or_else(|| missing(&format!("{key}{name}")))?;
                if m.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for `{name}`")));
                }
                dst.push(m);
            }
        }
        Ok(Self {
            model: ck.model,
            opt,
            sched,
            cfg: cfg.clone(),
            step,
            epoch_loss_sum: num("epoch_loss_sum")?,
            epoch_loss_count: num("epoch_loss_count")? as u64,
            recent_losses: split_f64(&get("recent_losses")?)?.into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut extra: Vec<(String, &Tensor<T>)> = Vec::new();
        for (n, m) in names.iter().zip(&self.opt.m) {
            extra.push((format!("adam.m/{n}"), m));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            extra.push((format!("adam.v/{n}"), v));
        }
        let mut state = vec![
            ("step".to_string(), self.step.to_string()),
            ("adam_t".to_string(), self.opt.t.to_string()),
            (
                "trigger_epoch".to_string(),
                self.sched.trigger_epoch.map_or("none".into(), |e| e.to_string()),
            ),
            ("epoch_losses".to_string(), join_f64(self.sched.epoch_losses.iter().copied())),
            ("epoch_loss_sum".to_string(), self.epoch_loss_sum.to_string()),
            ("epoch_loss_count".to_string(), self.epoch_loss_count.to_string()),
            ("recent_losses".to_string(), join_f64(self.recent_losses.iter().copied())),
        ];
        for (k, v) in self.cfg.to_pairs() {
            state.push((format!("train.{k}"), v));
        }
        checkpoint::save(path, &self.model, &extra, &state)
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.cfg.steps_per_epoch
    }

    pub fn current_lr(&self) -> f64 {
        self.sched.lr(self.epoch())
    }

    /// Forward, loss, backward for one example; returns the loss and the
    /// parameter gradients in store order.
    pub fn loss_and_grads(&self, ex: &Example<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(ex.mixture.clone(), false);
        let y = self.model.net.forward_exec(&mut tape, &self.model.params, &x)?;
        let (loss, _) = upit_loss_tape(&mut tape, y, &ex.refs, CLAMP_DB)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value} at step {}", self.step + 1)));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, tape.param_grads(&mut grads, &self.model.params)))
    }

    /// One optimizer update on `batch` (mean loss over its examples).
    pub fn train_step(&mut self, batch: &[Example<T>]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for ex in batch {
            let (l, g) = self.loss_and_grads(ex)?;
            loss += l;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    for (a, g) in a.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("non-empty batch");
        if batch.len() > 1 {
            let s = T::from_f64(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            loss /= batch.len() as f64;
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let lr = self.current_lr();
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.opt.step(self.model.params.tensors_mut(), &grads, lr, &name_refs)?;

        self.step += 1;
        self.recent_losses.push_back(loss);
        if self.recent_losses.len() > RECENT_LOSSES {
            self.recent_losses.pop_front();
        }
        self.epoch_loss_sum += loss;
        self.epoch_loss_count += 1;
        if self.step % self.cfg.steps_per_epoch == 0 {
            let mean = self.epoch_loss_sum / self.epoch_loss_count as f64;
            self.sched.end_epoch(self.step / self.cfg.steps_per_epoch - 1, mean);
            self.epoch_loss_sum = 0.0;
            self.epoch_loss_count = 0;
        }
        Ok(StepStats { loss, grad_norm, lr })
    }

    /// Trains until `cfg.max_steps`, writing `metrics.tsv` and checkpoints to
    /// `out_dir`. A fresh run first writes the step-0 checkpoint. On a
    /// non-finite loss or gradient the current state is saved as
    /// `abort-<step>.sepm` and the error returned.
    pub fn run(&mut self, out_dir: &Path, source: &ExampleSource) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let kept = if self.step == 0 {
            String::new()
        } else {
            // drop lines written after the checkpoint we resumed from
            fs::read_to_string(&metrics_path)
                .unwrap_or_default()
                .lines()
                .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= self.step))
                .map(|l| format!("{l}\n"))
                .collect()
        };
        fs::write(&metrics_path, kept)?;
        let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        let mut checkpoints = Vec::new();
        if self.step == 0 {
            let p = out_dir.join(checkpoint_name(0));
            self.save(&p)?;
            checkpoints.push(p);
        }
        if self.cfg.batch_size > 1 {
            log::warn!("batch_size {} > 1 is experimental", self.cfg.batch_size);
        }

        let bs = self.cfg.batch_size as u64;
        let (start, end) = (self.step, self.cfg.max_steps);
        let src = source.clone();
        let mut queue = Prefetch::spawn(source.cfg.queue_depth, start * bs..end.max(start) * bs, move |i| {
            src.mixture(i).and_then(|m| Example::<T>::from_mixture(&m))
        });
        let mut last = None;
        while self.step < end {
            let t0 = Instant::now();
            let batch = (0..bs)
                .map(|_| queue.next().unwrap_or_else(|| Err(Error::Data("data queue ended early".into()))))
                .collect::<Result<Vec<_>>>()?;
            let stats = match self.train_step(&batch) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    let p = out_dir.join(format!("abort-{:07}.sepm", self.step));
                    self.save(&p)?;
                    log::error!("{e}; state saved to {}", p.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let wall_ms = if self.cfg.deterministic {
                0.0
            } else {
                t0.elapsed().as_secs_f64() * 1e3
            };
            writeln!(
                metrics,
                "{}\t{}\t{}\t{}\t{}",
                self.step, stats.loss, stats.grad_norm, stats.lr, wall_ms
            )?;
            last = Some(stats);
            let every = self.cfg.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == end {
                let p = out_dir.join(checkpoint_name(self.step));
                self.save(&p)?;
                checkpoints.push(p);
            }
        }
        metrics.flush()?;
        Ok(TrainOutcome {
            final_step: self.step,
            last,
            metrics: metrics_path,
            checkpoints,
        })
    }
}

/// SI-SDR improvement of `model` on each mixture.
pub fn evaluate_si_sdri<T: Real>(model: &SeparatorModel<T>, mixtures: &[Mixture]) -> Result<Vec<f64>> {
    mixtures
        .iter()
        .map(|m| {
            let ex = Example::<T>::from_mixture(m)?;
            let est = model.forward(&ex.mixture)?;
            si_sdr_improvement(&est, &ex.refs, ex.mixture.data())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SeparatorConfig, TrainConfig, DataConfig) {
        let model = SeparatorConfig {
            base_dim: 4,
            ..SeparatorConfig::toy()
        };
        let train = TrainConfig {
            precision: crate::numerics::Precision::F64,
            deterministic: true,
            max_steps: 3,
            steps_per_epoch: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let data = DataConfig {
            n_mixtures: 3,
            duration_s: 0.02,
            ..DataConfig::default()
        };
        (model, train, data)
    }

    #[test]
    fn fixed_mode_repeats_mixtures() {
        let (_, _, mut data) = tiny();
        data.mode = DataMode::Fixed;
        let src = ExampleSource::new(&data, 1, 8000).unwrap();
        assert_eq!(src.mixture(0).unwrap(), src.mixture(3).unwrap());
        assert_ne!(src.mixture(0).unwrap(), src.mixture(1).unwrap());
    }

    #[test]
    fn checkpoint_restores_trainer_state() {
        let (m, t, d) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let src = ExampleSource::new(&d, t.seed, m.sample_rate).unwrap();
        let mut a = Trainer::<f64>::new(&m, &t).unwrap();
        a.run(dir.path(), &src).unwrap();
        let b = Trainer::<f64>::resume(&dir.path().join(checkpoint_name(3)), &t).unwrap();
        assert_eq!(b.step, 3);
        assert_eq!(b.opt, a.opt);
        assert_eq!(b.sched, a.sched);
        assert_eq!(b.recent_losses, a.recent_losses);
        assert_eq!(b.epoch_loss_sum, a.epoch_loss_sum);
    }
}
