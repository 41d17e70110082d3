use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.clone()), Tensor::zeros(s)))
            .unzip();
        Self { cfg, m, v, t: 0 }
    }

    /// One update. `names` labels the parameters in error messages.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, names: &[&str]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::NonFinite(format!(
                    "{bad} non-finite gradient entries in `{}` at update {}",
                    names.get(i).copied().unwrap_or("?"),
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                let g = g.as_f64();
                let mn = beta1 * m.as_f64() + (1.0 - beta1) * g;
                let vn = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + eps);
                *p = T::from_f64(p.as_f64() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm` and returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * s));
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_opt(wd: f64) -> AdamW<f64> {
        AdamW::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            [vec![1]],
        )
    }

    #[test]
    fn first_step_is_a_unit_update() {
        let mut opt = scalar_opt(0.0);
        let mut p = [Tensor::scalar(1.0)];
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1, &["p"]).unwrap();
        // bias-corrected moments are both 1, so the step is lr / (1 + eps)
        assert!((p[0].item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_only_decays() {
        let mut opt = scalar_opt(0.1);
        let mut p = [Tensor::scalar(2.0)];
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1, &["p"]).unwrap();
        assert_eq!(p[0].item(), 2.0 * (1.0 - 0.1 * 0.1));
        let mut opt = scalar_opt(0.0);
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1, &["p"]).unwrap();
        assert_eq!(p[0].item(), 2.0 * (1.0 - 0.1 * 0.1));
    }

    #[test]
    fn non_finite_gradients_abort_with_the_parameter_name() {
        let mut opt = scalar_opt(0.0);
        let mut p = [Tensor::scalar(1.0)];
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)], 0.1, &["head.w"]).unwrap_err();
        assert!(err.to_string().contains("head.w"));
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![6.0, 8.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 10.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::new(vec![2], vec![0.0, 3.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 3.0);
        assert_eq!(g[0].data(), &[0.0, 3.0]);
    }
}
