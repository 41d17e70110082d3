use crate::error::{Error, Result};
use crate::init::{rng_for, uniform};
use crate::mamba::BambaStack;
use crate::numerics::{ConvGeom, ConvTGeom, Eager, Exec, ParamId, ParamStore, Real, Tensor};

use super::config::SeparatorConfig;

/// Weight and bias of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter layout of the U-Net. Level `k` runs at `1 / stride^(k+1)` of
/// the input rate with `base_dim * 2^k` channels.
#[derive(Clone, Debug)]
pub struct Separator {
    pub cfg: SeparatorConfig,
    pub stem: ConvParams,
    pub enc: Vec<BambaStack>,
    pub down: Vec<ConvParams>,
    pub mid: BambaStack,
    /// Indexed by level; built deepest first.
    pub up: Vec<ConvParams>,
    pub skip: Vec<ConvParams>,
    pub dec: Vec<BambaStack>,
    pub head: ConvParams,
}

/// A separator together with its weights.
#[derive(Clone, Debug)]
pub struct SeparatorModel<T> {
    pub net: Separator,
    pub params: ParamStore<T>,
}

fn conv_param<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 3],
    bias_len: usize,
    bound: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ConvParams> {
    let w = store.insert(format!("{name}.w"), uniform(rng, shape.to_vec(), bound))?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(vec![bias_len]))?;
    Ok(ConvParams { w, b })
}

impl Separator {
    /// Registers all weights in `store`, initialized deterministically from
    /// `seed`. Convolutions feeding a ReLU use He-uniform bounds, the others
    /// Xavier-like ones; all biases start at zero.
    pub fn build<T: Real>(cfg: &SeparatorConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (k, s, depth) = (cfg.kernel_size, cfg.stride, cfg.depth());
        let mut rng = rng_for(seed, 0);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();

        let stem = conv_param(store, "stem", [cfg.base_dim, 1, k], cfg.base_dim, he(k), &mut rng)?;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for lvl in 0..depth {
            let (wi, wo) = (cfg.width(lvl), cfg.width(lvl + 1));
            enc.push(BambaStack::build(store, &format!("enc.{lvl}"), cfg.stack_config(wi), &mut rng)?);
            down.push(conv_param(store, &format!("down.{lvl}"), [wo, wi, k], wo, he(wi * k), &mut rng)?);
        }
        let mid = BambaStack::build(store, "mid", cfg.stack_config(cfg.width(depth)), &mut rng)?;
        let mut up = vec![None; depth];
        let mut skip = vec![None; depth];
        let mut dec = vec![None; depth];
        for lvl in (0..depth).rev() {
            let (wo, wi) = (cfg.width(lvl), cfg.width(lvl + 1));
            let fan_t = (wi * k / s).max(1);
            up[lvl] = Some(conv_param(store, &format!("up.{lvl}"), [wi, wo, k], wo, he(fan_t), &mut rng)?);
            skip[lvl] = Some(conv_param(store, &format!("skip.{lvl}"), [wo, wo, 1], wo, lin(wo), &mut rng)?);
            dec[lvl] = Some(BambaStack::build(store, &format!("dec.{lvl}"), cfg.stack_config(wo), &mut rng)?);
        }
        let head_fan = (cfg.base_dim * k / s).max(1);
        let head = conv_param(store, "head", [cfg.base_dim, cfg.n_sources, k], cfg.n_sources, lin(head_fan), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            enc,
            down,
            mid,
            up: up.into_iter().map(Option::unwrap).collect(),
            skip: skip.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn down_geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.cfg.stride,
            pad_left: self.cfg.pad_left(),
            pad_right: self.cfg.pad_right(),
            groups: 1,
        }
    }

    pub fn up_geom(&self) -> ConvTGeom {
        ConvTGeom {
            stride: self.cfg.stride,
            crop_left: self.cfg.pad_left(),
            crop_right: self.cfg.pad_right(),
        }
    }

    fn conv<T: Real, E: Exec<T>>(
        &self,
        ex: &mut E,
        store: &ParamStore<T>,
        p: ConvParams,
        x: &E::V,
        geom: ConvGeom,
    ) -> Result<E::V> {
        let w = ex.param(store, p.w);
        let b = ex.param(store, p.b);
        ex.conv1d(x, &w, Some(&b), geom)
    }

    fn conv_t<T: Real, E: Exec<T>>(
        &self,
        ex: &mut E,
        store: &ParamStore<T>,
        p: ConvParams,
        x: &E::V,
    ) -> Result<E::V> {
        let w = ex.param(store, p.w);
        let b = ex.param(store, p.b);
        ex.conv_transpose1d(x, &w, Some(&b), self.up_geom())
    }

    /// U-Net body on `[1 x L]` with `L` a multiple of the frame multiple.
    fn body<T: Real, E: Exec<T>>(&self, ex: &mut E, store: &ParamStore<T>, x: &E::V) -> Result<E::V> {
        let one = ConvGeom {
            stride: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        };
        let h = self.conv(ex, store, self.stem, x, self.down_geom())?;
        let mut h = ex.relu(&h);
        let mut skips = Vec::with_capacity(self.enc.len());
        for (stack, down) in self.enc.iter().zip(&self.down) {
            h = stack.forward(ex, store, &h)?;
            skips.push(h.clone());
            let d = self.conv(ex, store, *down, &h, self.down_geom())?;
            h = ex.relu(&d);
        }
        h = self.mid.forward(ex, store, &h)?;
        for lvl in (0..self.dec.len()).rev() {
            let u = self.conv_t(ex, store, self.up[lvl], &h)?;
            let u = ex.relu(&u);
            let s = self.conv(ex, store, self.skip[lvl], &skips[lvl], one)?;
            let u = ex.add(&u, &s)?;
            h = self.dec[lvl].forward(ex, store, &u)?;
        }
        self.conv_t(ex, store, self.head, &h)
    }

    /// Forward pass on `x: [1 x L]` returning `[n_sources x L]`. The input is
    /// right-padded with zeros to a multiple of
    /// [`frame_multiple`](SeparatorConfig::frame_multiple) and the output
    /// cropped back.
    pub fn forward_exec<T: Real, E: Exec<T>>(
        &self,
        ex: &mut E,
        store: &ParamStore<T>,
        x: &E::V,
    ) -> Result<E::V> {
        let shape = ex.shape(x).to_vec();
        let len = match shape[..] {
            [1, l] => l,
            _ => return Err(Error::Shape(format!("separator input must be [1 x L], got {shape:?}"))),
        };
        if len < self.cfg.kernel_size {
            return Err(Error::InputTooShort {
                len,
                kernel: self.cfg.kernel_size,
            });
        }
        let padded = self.cfg.padded_len(len);
        if padded == len {
            return self.body(ex, store, x);
        }
        let xp = ex.time_window(x, 0, padded)?;
        let y = self.body(ex, store, &xp)?;
        ex.time_window(&y, 0, len)
    }
}

impl<T: Real> SeparatorModel<T> {
    pub fn build(cfg: &SeparatorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Separator::build(cfg, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.net.cfg
    }

    /// Inference on a mono waveform `[1 x L]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward_exec(&mut Eager, &self.params, x)
    }

    /// Inference on a slice of samples.
    pub fn separate(&self, samples: &[T]) -> Result<Tensor<T>> {
        self.forward(&Tensor::new(vec![1, samples.len()], samples.to_vec())?)
    }

    pub fn cast<U: Real>(&self) -> SeparatorModel<U> {
        SeparatorModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
