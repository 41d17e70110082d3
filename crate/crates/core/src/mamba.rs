//! Mamba block and the bidirectional Bamba stack.
//!
//! Block dataflow on `x: [D x L]`:
//!
//! ```text
//! h      = norm(x)                       (optional RMS norm)
//! [u; z] = in_proj h                     [2Di x L], no bias
//! u      = silu(depthwise_conv(u))       kernel d_conv, with bias
//! y      = ssm(u) * silu(z)
//! out    = x + out_proj y                no bias
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::uniform;
use crate::numerics::exec;
use crate::numerics::exec::softplus_inverse;
use crate::numerics::{ConvGeom, Eager, Exec, ParamId, ParamStore, Real, Tensor, UnaryOp};
use crate::ssm::{self, ScanAlgorithm, ScanInputs, SsmHandles, ZeroOrderHold};

pub const NORM_EPS: f64 = 1e-5;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub n_state: usize,
    pub d_conv: usize,
    /// Left-pad the depthwise conv (causal) instead of centering it.
    pub causal_conv: bool,
    /// Learned per-channel skip `D x_t` in the scan output.
    pub d_skip: bool,
    /// Pre-block RMS normalization.
    pub rms_norm: bool,
    pub scan: ScanAlgorithm,
}

impl MambaBlockConfig {
    pub fn new(d_model: usize, expand: usize, n_state: usize, d_conv: usize) -> Self {
        Self {
            d_model,
            expand,
            n_state,
            d_conv,
            causal_conv: true,
            d_skip: true,
            rms_norm: false,
            scan: ScanAlgorithm::Sequential,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.n_state == 0 || self.d_conv == 0 {
            return Err(Error::Config(format!(
                "mamba block needs d_model, expand, n_state, d_conv >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Exact number of scalar parameters in one block.
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (
            self.d_model,
            self.d_inner(),
            self.n_state,
            self.dt_rank(),
            self.d_conv,
        );
        let mut p = 2 * di * d // in_proj
            + di * k + di      // depthwise conv
            + (r + 2 * n) * di // x_proj
            + di * r + di      // dt_proj + dt_bias
            + di * n           // a_log
            + d * di; // out_proj
        if self.d_skip {
            p += di;
        }
        if self.rms_norm {
            p += d;
        }
        p
    }

    /// Multiply-accumulates of one block over `len` steps. Linear maps count
    /// `D_in * D_out` per step, exp/silu/softplus/sigmoid and elementwise
    /// products count one each, additions count zero, and the scan counts
    /// three per state and step plus one per channel and step for the skip.
    pub fn macs(&self, len: usize) -> u64 {
        let (d, di, n, r, k) = (
            self.d_model as u64,
            self.d_inner() as u64,
            self.n_state as u64,
            self.dt_rank() as u64,
            self.d_conv as u64,
        );
        let l = len as u64;
        let mut m = 2 * di * d * l // in_proj
            + di * k * l           // depthwise conv
            + di * l               // silu
            + (r + 2 * n) * di * l // x_proj
            + di * r * l           // dt_proj
            + di * l               // softplus
            + di * n               // exp(a_log)
            + 3 * di * n * l       // scan
            + 2 * di * l           // silu(z), gate
            + d * di * l; // out_proj
        if self.d_skip {
            m += di * l;
        }
        if self.rms_norm {
            m += 2 * d * l;
        }
        m
    }

    fn conv_geom(&self) -> ConvGeom {
        let total = self.d_conv - 1;
        let left = if self.causal_conv { total } else { total / 2 };
        ConvGeom {
            stride: 1,
            pad_left: left,
            pad_right: total - left,
            groups: self.d_inner(),
        }
    }
}

/// Parameter handles of one Mamba block inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    norm: Option<ParamId>,
    in_proj: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: ParamId,
    dt_proj: ParamId,
    dt_bias: ParamId,
    a_log: ParamId,
    d_skip: Option<ParamId>,
    out_proj: ParamId,
}

/// Streaming carry of one block: depthwise-conv tail and scan state.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    /// `[Di x (d_conv - 1)]`
    pub conv_tail: Tensor<T>,
    /// `[Di x N]`
    pub h: Tensor<T>,
}

impl MambaBlock {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: MambaBlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, di, n, r, k) = (cfg.d_model, cfg.d_inner(), cfg.n_state, cfg.dt_rank(), cfg.d_conv);
        let name = |s: &str| format!("{prefix}.{s}");
        let norm = if cfg.rms_norm {
            Some(store.insert(name("norm"), Tensor::full(vec![d], T::one()))?)
        } else {
            None
        };
        let in_proj = store.insert(name("in_proj"), uniform(rng, vec![2 * di, d], (1.0 / d as f64).sqrt()))?;
        let conv_w = store.insert(name("conv.w"), uniform(rng, vec![di, 1, k], (1.0 / k as f64).sqrt()))?;
        let conv_b = store.insert(name("conv.b"), Tensor::zeros(vec![di]))?;
        let x_proj = store.insert(name("x_proj"), uniform(rng, vec![r + 2 * n, di], (1.0 / di as f64).sqrt()))?;
        let dt_proj = store.insert(name("dt_proj"), uniform(rng, vec![di, r], (1.0 / r as f64).sqrt()))?;
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias = Tensor::from_fn(vec![di], |_| {
            let dt: f64 = rng.random_range(lo..hi).exp();
            T::from_f64(softplus_inverse(dt))
        });
        let dt_bias = store.insert(name("dt_bias"), dt_bias)?;
        let a_log = Tensor::from_fn(vec![di, n], |i| T::from_f64(((i % n) + 1) as f64).ln());
        let a_log = store.insert(name("a_log"), a_log)?;
        let d_skip = if cfg.d_skip {
            Some(store.insert(name("d"), Tensor::full(vec![di], T::one()))?)
        } else {
            None
        };
        let out_proj = store.insert(name("out_proj"), uniform(rng, vec![d, di], (1.0 / di as f64).sqrt()))?;
        Ok(Self {
            cfg,
            norm,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
        })
    }

    /// Ids of every parameter of this block, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.norm.into_iter().collect();
        v.extend([
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.x_proj,
            self.dt_proj,
            self.dt_bias,
            self.a_log,
        ]);
        v.extend(self.d_skip);
        v.push(self.out_proj);
        v
    }

    pub fn out_proj_id(&self) -> ParamId {
        self.out_proj
    }

    fn ssm_handles<T: Real, E: Exec<T>>(&self, ex: &mut E, store: &ParamStore<T>) -> SsmHandles<E::V> {
        SsmHandles {
            a_log: ex.param(store, self.a_log),
            x_proj: ex.param(store, self.x_proj),
            dt_proj: ex.param(store, self.dt_proj),
            dt_bias: ex.param(store, self.dt_bias),
            d_skip: self.d_skip.map(|id| ex.param(store, id)),
            dt_rank: self.cfg.dt_rank(),
            n_state: self.cfg.n_state,
        }
    }

    fn check_width(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] != self.cfg.d_model {
            return Err(Error::Config(format!(
                "mamba block expects [{} x L] input, got {shape:?}",
                self.cfg.d_model
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real, E: Exec<T>>(
        &self,
        ex: &mut E,
        store: &ParamStore<T>,
        x: &E::V,
    ) -> Result<E::V> {
        self.check_width(ex.shape(x))?;
        let di = self.cfg.d_inner();
        let h = match self.norm {
            Some(id) => {
                let w = ex.param(store, id);
                ex.rms_norm(x, &w, NORM_EPS)?
            }
            None => x.clone(),
        };
        let w_in = ex.param(store, self.in_proj);
        let uz = ex.matmul(&w_in, &h)?;
        let u = ex.rows(&uz, 0, di)?;
        let z = ex.rows(&uz, di, 2 * di)?;
        let cw = ex.param(store, self.conv_w);
        let cb = ex.param(store, self.conv_b);
        let u = ex.conv1d(&u, &cw, Some(&cb), self.cfg.conv_geom())?;
        let u = ex.silu(&u);
        let handles = self.ssm_handles(ex, store);
        let y = ssm::selective_ssm(ex, &handles, &u, self.cfg.scan)?;
        let gate = ex.silu(&z);
        let y = ex.mul(&y, &gate)?;
        let w_out = ex.param(store, self.out_proj);
        let out = ex.matmul(&w_out, &y)?;
        ex.add(x, &out)
    }

    pub fn init_state<T: Real>(&self) -> BlockState<T> {
        let di = self.cfg.d_inner();
        BlockState {
            conv_tail: Tensor::zeros(vec![di, self.cfg.d_conv - 1]),
            h: Tensor::zeros(vec![di, self.cfg.n_state]),
        }
    }

    /// Processes the next `x: [D x l]` of a causal stream. Equivalent to the
    /// matching slice of [`forward`](Self::forward) on the whole sequence.
    pub fn forward_stream<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        st: &mut BlockState<T>,
    ) -> Result<Tensor<T>> {
        if !self.cfg.causal_conv {
            return Err(Error::Stream("streaming requires a causal depthwise conv".into()));
        }
        self.check_width(x.shape())?;
        let len = x.shape()[1];
        if len == 0 {
            return Ok(x.clone());
        }
        let mut ex = Eager;
        let di = self.cfg.d_inner();
        let h = match self.norm {
            Some(id) => exec::Exec::<T>::rms_norm(&mut ex, x, store.get(id), NORM_EPS)?,
            None => x.clone(),
        };
        let uz = exec::matmul(store.get(self.in_proj), &h)?;
        let u = exec::rows(&uz, 0, di)?;
        let z = exec::rows(&uz, di, 2 * di)?;
        let ext = Tensor::concat_time(&[st.conv_tail.clone(), u])?;
        let keep = self.cfg.d_conv - 1;
        st.conv_tail = ext.time_slice(ext.shape()[1] - keep, keep)?;
        let geom = ConvGeom {
            stride: 1,
            pad_left: 0,
            pad_right: 0,
            groups: di,
        };
        let u = exec::conv1d(&ext, store.get(self.conv_w), Some(store.get(self.conv_b)), geom)?;
        let u = u.map(|v| UnaryOp::Silu.apply(v));
        let handles = self.ssm_handles(&mut ex, store);
        let p = ssm::project(&mut ex, &handles, &u)?;
        let inputs = ScanInputs {
            u: u.data(),
            delta: p.delta.data(),
            a: p.a.data(),
            b: p.b.data(),
            c: p.c.data(),
            d: handles.d_skip.as_ref().map(|d| d.data()),
            channels: di,
            n_state: self.cfg.n_state,
            len,
        };
        let out = ssm::run_scan::<T, ZeroOrderHold>(&inputs, Some(st.h.data()), false, self.cfg.scan);
        st.h = Tensor::new(vec![di, self.cfg.n_state], out.h_last)?;
        let y = Tensor::new(vec![di, len], out.y)?;
        let gate = z.map(|v| UnaryOp::Silu.apply(v));
        let y = exec::Exec::<T>::mul(&mut ex, &y, &gate)?;
        let out = exec::matmul(store.get(self.out_proj), &y)?;
        exec::Exec::<T>::add(&mut ex, x, &out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BambaStackConfig {
    pub n_blocks_per_branch: usize,
    /// Reverse the second branch in time. Off for causal models, where both
    /// branches run forward.
    pub bidirectional: bool,
    /// Sum the branches after every block instead of once at the end.
    pub recombine_per_block: bool,
    pub block: MambaBlockConfig,
}

impl BambaStackConfig {
    pub fn total_blocks(&self) -> usize {
        2 * self.n_blocks_per_branch
    }

    pub fn param_count(&self) -> usize {
        self.total_blocks() * self.block.param_count()
    }

    pub fn macs(&self, len: usize) -> u64 {
        self.total_blocks() as u64 * self.block.macs(len)
    }
}

/// Two independent Mamba stacks combined additively.
#[derive(Clone, Debug)]
pub struct BambaStack {
    pub cfg: BambaStackConfig,
    pub forward_branch: Vec<MambaBlock>,
    pub second_branch: Vec<MambaBlock>,
}

/// Streaming carry of a causal stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackState<T> {
    pub forward_branch: Vec<BlockState<T>>,
    pub second_branch: Vec<BlockState<T>>,
}

impl BambaStack {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: BambaStackConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.n_blocks_per_branch == 0 {
            return Err(Error::Config("a Bamba stack needs at least one block per branch".into()));
        }
        let mut forward_branch = Vec::new();
        let mut second_branch = Vec::new();
        for i in 0..cfg.n_blocks_per_branch {
            forward_branch.push(MambaBlock::build(store, &format!("{prefix}.fwd.{i}"), cfg.block, rng)?);
        }
        for i in 0..cfg.n_blocks_per_branch {
            second_branch.push(MambaBlock::build(store, &format!("{prefix}.bwd.{i}"), cfg.block, rng)?);
        }
        Ok(Self {
            cfg,
            forward_branch,
            second_branch,
        })
    }

    pub fn forward<T: Real, E: Exec<T>>(
        &self,
        ex: &mut E,
        store: &ParamStore<T>,
        x: &E::V,
    ) -> Result<E::V> {
        let rev = self.cfg.bidirectional;
        if self.cfg.recombine_per_block {
            let mut cur = x.clone();
            for (f, g) in self.forward_branch.iter().zip(&self.second_branch) {
                let a = f.forward(ex, store, &cur)?;
                let b = if rev {
                    let xr = ex.flip_time(&cur);
                    let b = g.forward(ex, store, &xr)?;
                    ex.flip_time(&b)
                } else {
                    g.forward(ex, store, &cur)?
                };
                cur = ex.add(&a, &b)?;
            }
            return Ok(cur);
        }
        let mut a = x.clone();
        for f in &self.forward_branch {
            a = f.forward(ex, store, &a)?;
        }
        let mut b = if rev { ex.flip_time(x) } else { x.clone() };
        for g in &self.second_branch {
            b = g.forward(ex, store, &b)?;
        }
        if rev {
            b = ex.flip_time(&b);
        }
        ex.add(&a, &b)
    }

    pub fn init_state<T: Real>(&self) -> StackState<T> {
        StackState {
            forward_branch: self.forward_branch.iter().map(MambaBlock::init_state).collect(),
            second_branch: self.second_branch.iter().map(MambaBlock::init_state).collect(),
        }
    }

    pub fn forward_stream<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        st: &mut StackState<T>,
    ) -> Result<Tensor<T>> {
        if self.cfg.bidirectional {
            return Err(Error::Stream("a bidirectional stack cannot be streamed".into()));
        }
        let mut ex = Eager;
        if self.cfg.recombine_per_block {
            let mut cur = x.clone();
            for i in 0..self.forward_branch.len() {
                let a = self.forward_branch[i].forward_stream(store, &cur, &mut st.forward_branch[i])?;
                let b = self.second_branch[i].forward_stream(store, &cur, &mut st.second_branch[i])?;
                cur = exec::Exec::<T>::add(&mut ex, &a, &b)?;
            }
            return Ok(cur);
        }
        let mut a = x.clone();
        for (blk, s) in self.forward_branch.iter().zip(&mut st.forward_branch) {
            a = blk.forward_stream(store, &a, s)?;
        }
        let mut b = x.clone();
        for (blk, s) in self.second_branch.iter().zip(&mut st.second_branch) {
            b = blk.forward_stream(store, &b, s)?;
        }
        exec::Exec::<T>::add(&mut ex, &a, &b)
    }
}
