//! Constant learning rate followed by exponential decay once triggered.

/// What starts the decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayPolicy {
    /// Decay from this epoch on.
    ManualEpoch(u64),
    /// Decay once the mean loss of the last `window` epochs improves on the
    /// mean of the `window` epochs before by less than `delta_db`.
    Plateau { window: usize, delta_db: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub gamma: f64,
    pub policy: DecayPolicy,
    /// First epoch with decayed rate, once known.
    pub trigger_epoch: Option<u64>,
    /// Mean loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl LrSchedule {
    pub fn new(lr0: f64, gamma: f64, policy: DecayPolicy) -> Self {
        let trigger_epoch = match policy {
            DecayPolicy::ManualEpoch(e) => Some(e),
            DecayPolicy::Plateau { .. } => None,
        };
        Self {
            lr0,
            gamma,
            policy,
            trigger_epoch,
            epoch_losses: Vec::new(),
        }
    }

    /// Learning rate during `epoch`.
    pub fn lr(&self, epoch: u64) -> f64 {
        match self.trigger_epoch {
            Some(t) if epoch >= t => self.lr0 * self.gamma.powi((epoch - t) as i32),
            _ => self.lr0,
        }
    }

    /// Records the mean loss of the epoch that just finished.
    pub fn end_epoch(&mut self, epoch: u64, mean_loss: f64) {
        self.epoch_losses.push(mean_loss);
        if self.trigger_epoch.is_some() {
            return;
        }
        if let DecayPolicy::Plateau { window, delta_db } = self.policy {
            let n = self.epoch_losses.len();
            if window == 0 || n < 2 * window {
                return;
            }
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let before = mean(&self.epoch_losses[n - 2 * window..n - window]);
            let recent = mean(&self.epoch_losses[n - window..]);
            if before - recent < delta_db {
                self.trigger_epoch = Some(epoch + 1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_trigger_decays_geometrically() {
        let s = LrSchedule::new(15e-5, 0.98, DecayPolicy::ManualEpoch(3));
        assert_eq!(s.lr(0), 15e-5);
        assert_eq!(s.lr(3), 15e-5);
        assert!((s.lr(13) - 1.225_609_2e-4).abs() < 1e-11);
        let flat = LrSchedule::new(15e-5, 1.0, DecayPolicy::ManualEpoch(0));
        assert_eq!(flat.lr(1000), 15e-5);
    }

    #[test]
    fn plateau_detector_needs_two_windows() {
        let mut s = LrSchedule::new(1.0, 0.5, DecayPolicy::Plateau { window: 2, delta_db: 0.1 });
        for (e, l) in [-1.0, -2.0, -3.0, -3.0].into_iter().enumerate() {
            s.end_epoch(e as u64, l);
        }
        assert_eq!(s.trigger_epoch, None);
        s.end_epoch(4, -3.02);
        s.end_epoch(5, -3.03);
        assert_eq!(s.trigger_epoch, Some(6));
        assert_eq!(s.lr(5), 1.0);
        assert_eq!(s.lr(7), 0.5);
    }
}
