//! Selective state-space scan.
//!
//! Per channel `d` and state index `n`, with input-dependent step `Δ_t`,
//! projections `B_t`, `C_t` and a negative diagonal `a`:
//!
//! ```text
//!   z        = Δ_t · a[d,n]
//!   A_bar    = exp(z)
//!   B_bar    = (exp(z) - 1) / z · Δ_t · B_t[n]        (zero-order hold)
//!   h_t[n]   = A_bar · h_{t-1}[n] + B_bar · x_t
//!   y_t      = Σ_n C_t[n] · h_t[n] + D[d] · x_t
//! ```
//!
//! The sequential form is the reference. The parallel form evaluates the same
//! recurrence as a work-efficient (Blelloch) associative scan over pairs
//! `(A_bar, B_bar·x)` with `(a1, b1) ∘ (a2, b2) = (a2·a1, a2·b1 + b2)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::exec::{Eager, Exec, ScanOperands, UnaryOp};
use crate::numerics::tensor::{Real, Tensor};

/// Below this `|Δ·a|` the ZOH input gain uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;
const DPHI_SERIES_THRESHOLD: f64 = 0.1;

/// Discretization rule for the continuous diagonal system.
pub trait Discretization {
    /// State decay `A_bar` as a function of `z = Δ·a`.
    fn a_bar<T: Real>(z: T) -> T;
    /// `B_bar = phi(z) · Δ · B`.
    fn phi<T: Real>(z: T) -> T;
    /// Derivative of `phi`.
    fn dphi<T: Real>(z: T) -> T;

    /// `(A_bar, phi)` at `z`; rules may override this to share work.
    #[inline]
    fn coeffs<T: Real>(z: T) -> (T, T) {
        (Self::a_bar(z), Self::phi(z))
    }

    /// `(A_bar, phi, dphi)` at `z`.
    #[inline]
    fn coeffs_with_grad<T: Real>(z: T) -> (T, T, T) {
        (Self::a_bar(z), Self::phi(z), Self::dphi(z))
    }
}

#[inline]
fn phi_series<T: Real>(z: T) -> T {
    let half = T::from_f64(0.5);
    let sixth = T::from_f64(1.0 / 6.0);
    T::one() + z * (half + z * sixth)
}

#[inline]
fn dphi_series<T: Real>(z: T) -> T {
    // sum_{k>=1} k z^(k-1) / (k+1)!
    const C: [f64; 8] = [
        1.0 / 2.0,
        1.0 / 3.0,
        1.0 / 8.0,
        1.0 / 30.0,
        1.0 / 144.0,
        1.0 / 840.0,
        1.0 / 5760.0,
        1.0 / 45360.0,
    ];
    let mut acc = T::zero();
    for &c in C.iter().rev() {
        acc = acc * z + T::from_f64(c);
    }
    acc
}

/// `(exp(z), exp(z) - 1)`, each accurate to a few ulps.
#[inline]
fn exp_pair<T: Real>(z: T) -> (T, T) {
    if z.abs().as_f64() < 0.5 {
        let em1 = z.exp_m1();
        (em1 + T::one(), em1)
    } else {
        let e = z.exp();
        (e, e - T::one())
    }
}

/// Zero-order hold: `A_bar = exp(z)`, `phi(z) = (exp(z) - 1) / z`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroOrderHold;

impl Discretization for ZeroOrderHold {
    #[inline]
    fn a_bar<T: Real>(z: T) -> T {
        z.exp()
    }

    #[inline]
    fn phi<T: Real>(z: T) -> T {
        if z.abs().as_f64() < SERIES_THRESHOLD {
            phi_series(z)
        } else {
            z.exp_m1() / z
        }
    }

    #[inline]
    fn dphi<T: Real>(z: T) -> T {
        if z.abs().as_f64() < DPHI_SERIES_THRESHOLD {
            dphi_series(z)
        } else {
            (z * z.exp() - z.exp_m1()) / (z * z)
        }
    }

    // One exponential serves all three quantities.
    #[inline]
    fn coeffs<T: Real>(z: T) -> (T, T) {
        let (ab, em1) = exp_pair(z);
        let phi = if z.abs().as_f64() < SERIES_THRESHOLD {
            phi_series(z)
        } else {
            em1 / z
        };
        (ab, phi)
    }

    #[inline]
    fn coeffs_with_grad<T: Real>(z: T) -> (T, T, T) {
        let (ab, em1) = exp_pair(z);
        let small = z.abs().as_f64();
        let phi = if small < SERIES_THRESHOLD { phi_series(z) } else { em1 / z };
        let dphi = if small < DPHI_SERIES_THRESHOLD {
            dphi_series(z)
        } else {
            (z * ab - em1) / (z * z)
        };
        (ab, phi, dphi)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanAlgorithm {
    #[default]
    Sequential,
    Parallel,
}

/// Raw scan operands; see the module docs for layouts.
pub struct ScanInputs<'a, T> {
    /// `[D x L]`
    pub u: &'a [T],
    /// `[D x L]`, strictly positive.
    pub delta: &'a [T],
    /// `[D x N]`, strictly negative.
    pub a: &'a [T],
    /// `[N x L]`
    pub b: &'a [T],
    /// `[N x L]`
    pub c: &'a [T],
    /// `[D]`
    pub d: Option<&'a [T]>,
    pub channels: usize,
    pub n_state: usize,
    pub len: usize,
}

pub struct ScanOutput<T> {
    /// `[D x L]`
    pub y: Vec<T>,
    /// `[D x N]`
    pub h_last: Vec<T>,
    /// `[D x L x N]`, present when requested.
    pub states: Option<Vec<T>>,
}

/// `[N x L]` to `[L x N]`.
fn time_major<T: Real>(x: &[T], n: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * len];
    for i in 0..n {
        for t in 0..len {
            out[t * n + i] = x[i * len + t];
        }
    }
    out
}

pub fn run_scan<T: Real, Z: Discretization>(
    inp: &ScanInputs<'_, T>,
    h0: Option<&[T]>,
    keep_states: bool,
    algo: ScanAlgorithm,
) -> ScanOutput<T> {
    match algo {
        ScanAlgorithm::Sequential => scan_sequential_raw::<T, Z>(inp, h0, keep_states),
        ScanAlgorithm::Parallel => scan_parallel_raw::<T, Z>(inp, h0, keep_states),
    }
}

/// Reference left-to-right recurrence.
pub fn scan_sequential_raw<T: Real, Z: Discretization>(
    inp: &ScanInputs<'_, T>,
    h0: Option<&[T]>,
    keep_states: bool,
) -> ScanOutput<T> {
    let (dch, n, len) = (inp.channels, inp.n_state, inp.len);
    let bt = time_major(inp.b, n, len);
    let ct = time_major(inp.c, n, len);
    let mut y = vec![T::zero(); dch * len];
    let mut h_last = vec![T::zero(); dch * n];
    let mut states = keep_states.then(|| vec![T::zero(); dch * len * n]);
    for d in 0..dch {
        let h = &mut h_last[d * n..(d + 1) * n];
        if let Some(h0) = h0 {
            h.copy_from_slice(&h0[d * n..(d + 1) * n]);
        }
        let a = &inp.a[d * n..(d + 1) * n];
        let skip = inp.d.map_or(T::zero(), |dd| dd[d]);
        for t in 0..len {
            let dt = inp.delta[d * len + t];
            let x = inp.u[d * len + t];
            let bt_t = &bt[t * n..(t + 1) * n];
            let ct_t = &ct[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for i in 0..n {
                let z = dt * a[i];
                let (ab, ph) = Z::coeffs(z);
                h[i] = ab * h[i] + ph * dt * bt_t[i] * x;
                acc += ct_t[i] * h[i];
            }
            y[d * len + t] = acc + skip * x;
            if let Some(s) = states.as_mut() {
                s[(d * len + t) * n..(d * len + t + 1) * n].copy_from_slice(h);
            }
        }
    }
    ScanOutput { y, h_last, states }
}

/// Exclusive Blelloch scan in place over one lane of `(a, b)` pairs whose
/// length is a power of two.
fn blelloch_exclusive<T: Real>(ea: &mut [T], eb: &mut [T]) {
    let p = ea.len();
    let mut s = 1;
    while s < p {
        let mut i = 2 * s - 1;
        while i < p {
            let (a1, b1) = (ea[i - s], eb[i - s]);
            let (a2, b2) = (ea[i], eb[i]);
            ea[i] = a2 * a1;
            eb[i] = a2 * b1 + b2;
            i += 2 * s;
        }
        s *= 2;
    }
    ea[p - 1] = T::one();
    eb[p - 1] = T::zero();
    s = p / 2;
    while s >= 1 {
        let mut i = 2 * s - 1;
        while i < p {
            let (la, lb) = (ea[i - s], eb[i - s]);
            let (pa, pb) = (ea[i], eb[i]);
            ea[i - s] = pa;
            eb[i - s] = pb;
            ea[i] = la * pa;
            eb[i] = la * pb + lb;
            i += 2 * s;
        }
        s /= 2;
    }
}

/// Associative-scan evaluation of the same recurrence. Lanes `(d, n)` are
/// independent and run on the rayon pool.
pub fn scan_parallel_raw<T: Real, Z: Discretization>(
    inp: &ScanInputs<'_, T>,
    h0: Option<&[T]>,
    keep_states: bool,
) -> ScanOutput<T> {
    let (dch, n, len) = (inp.channels, inp.n_state, inp.len);
    let p = len.next_power_of_two().max(1);
    // states[d][t][n]
    let mut states = vec![T::zero(); dch * len * n];
    let lanes: Vec<(usize, Vec<T>)> = (0..dch * n)
        .into_par_iter()
        .map(|lane| {
            let (d, i) = (lane / n, lane % n);
            let a = inp.a[d * n + i];
            let mut ea = vec![T::one(); p];
            let mut eb = vec![T::zero(); p];
            for t in 0..len {
                let dt = inp.delta[d * len + t];
                let z = dt * a;
                let (ab, ph) = Z::coeffs(z);
                ea[t] = ab;
                eb[t] = ph * dt * inp.b[i * len + t] * inp.u[d * len + t];
            }
            let (oa, ob): (Vec<T>, Vec<T>) = (ea[..len].to_vec(), eb[..len].to_vec());
            blelloch_exclusive(&mut ea, &mut eb);
            let h_init = h0.map_or(T::zero(), |h| h[d * n + i]);
            let hs = (0..len)
                .map(|t| {
                    let ia = oa[t] * ea[t];
                    let ib = oa[t] * eb[t] + ob[t];
                    ia * h_init + ib
                })
                .collect();
            (lane, hs)
        })
        .collect();
    for (lane, hs) in lanes {
        let (d, i) = (lane / n, lane % n);
        for (t, h) in hs.into_iter().enumerate() {
            states[(d * len + t) * n + i] = h;
        }
    }
    let ct = time_major(inp.c, n, len);
    let mut y = vec![T::zero(); dch * len];
    let mut h_last = h0.map_or_else(|| vec![T::zero(); dch * n], <[T]>::to_vec);
    for d in 0..dch {
        let skip = inp.d.map_or(T::zero(), |dd| dd[d]);
        for t in 0..len {
            let h = &states[(d * len + t) * n..(d * len + t + 1) * n];
            let mut acc = T::zero();
            for i in 0..n {
                acc += ct[t * n + i] * h[i];
            }
            y[d * len + t] = acc + skip * inp.u[d * len + t];
        }
        if len > 0 {
            h_last[d * n..(d + 1) * n]
                .copy_from_slice(&states[(d * len + len - 1) * n..(d * len + len) * n]);
        }
    }
    ScanOutput {
        y,
        h_last,
        states: keep_states.then_some(states),
    }
}

pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Option<Vec<T>>,
}

/// Reverse pass of the scan from a zero initial state, given the stored
/// per-step states `[D x L x N]` and the output gradient `gy: [D x L]`.
pub fn scan_backward<T: Real, Z: Discretization>(
    inp: &ScanInputs<'_, T>,
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let (dch, n, len) = (inp.channels, inp.n_state, inp.len);
    let bt = time_major(inp.b, n, len);
    let ct = time_major(inp.c, n, len);
    let mut gu = vec![T::zero(); dch * len];
    let mut gdelta = vec![T::zero(); dch * len];
    let mut ga = vec![T::zero(); dch * n];
    let mut gbt = vec![T::zero(); len * n];
    let mut gct = vec![T::zero(); len * n];
    let mut gd = inp.d.map(|_| vec![T::zero(); dch]);
    let zeros = vec![T::zero(); n];
    let mut gh = vec![T::zero(); n];
    for d in 0..dch {
        gh.iter_mut().for_each(|g| *g = T::zero());
        let a = &inp.a[d * n..(d + 1) * n];
        let ga_d = &mut ga[d * n..(d + 1) * n];
        let skip = inp.d.map_or(T::zero(), |dd| dd[d]);
        let mut gskip = T::zero();
        for t in (0..len).rev() {
            let g_out = gy[d * len + t];
            let x = inp.u[d * len + t];
            let dt = inp.delta[d * len + t];
            let h_t = &states[(d * len + t) * n..(d * len + t + 1) * n];
            let h_prev = if t > 0 {
                &states[(d * len + t - 1) * n..(d * len + t) * n]
            } else {
                &zeros[..]
            };
            let bt_t = &bt[t * n..(t + 1) * n];
            let ct_t = &ct[t * n..(t + 1) * n];
            let gct_t = &mut gct[t * n..(t + 1) * n];
            let gbt_t = &mut gbt[t * n..(t + 1) * n];
            let mut gx = skip * g_out;
            let mut gdt = T::zero();
            for i in 0..n {
                gct_t[i] += g_out * h_t[i];
                gh[i] += g_out * ct_t[i];
                let z = dt * a[i];
                let (ab, ph, dph) = Z::coeffs_with_grad(z);
                let g = gh[i];
                // decay path
                let g_ab = g * h_prev[i];
                gdt += g_ab * ab * a[i];
                ga_d[i] += g_ab * ab * dt;
                // input path: phi(z) * dt * B * x
                let bx = bt_t[i] * x;
                gx += g * ph * dt * bt_t[i];
                gbt_t[i] += g * ph * dt * x;
                gdt += g * bx * (ph + z * dph);
                ga_d[i] += g * bx * dph * dt * dt;
                gh[i] = g * ab;
            }
            gskip += g_out * x;
            gu[d * len + t] = gx;
            gdelta[d * len + t] = gdt;
        }
        if let Some(gd) = gd.as_mut() {
            gd[d] = gskip;
        }
    }
    ScanGrads {
        u: gu,
        delta: gdelta,
        a: ga,
        b: time_major(&gbt, len, n),
        c: time_major(&gct, len, n),
        d: gd,
    }
}

/// Zero-order-hold discretization of a diagonal system.
///
/// `a: [D x N]` (strictly negative), `b_t: [N]`, `delta_t: [D]` (strictly
/// positive). Returns `(A_bar, B_bar)`, both `[D x N]`.
pub fn discretize<T: Real>(
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    delta_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    discretize_with::<T, ZeroOrderHold>(a, b_t, delta_t)
}

pub fn discretize_with<T: Real, Z: Discretization>(
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    delta_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dch, n) = a.dims2()?;
    if b_t.numel() != n || delta_t.numel() != dch {
        return Err(Error::Dimension {
            op: "discretize",
            lhs: a.shape().to_vec(),
            rhs: [b_t.shape(), delta_t.shape()].concat(),
        });
    }
    if let Some(bad) = delta_t.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Domain(format!("step size must be > 0, got {bad}")));
    }
    if let Some(bad) = a.data().iter().find(|v| !(**v < T::zero())) {
        return Err(Error::Domain(format!("state decay must be < 0, got {bad}")));
    }
    let mut ab = Tensor::zeros(vec![dch, n]);
    let mut bb = Tensor::zeros(vec![dch, n]);
    for d in 0..dch {
        let dt = delta_t.data()[d];
        for i in 0..n {
            let z = dt * a.data()[d * n + i];
            let (a_bar, ph) = Z::coeffs(z);
            ab.data_mut()[d * n + i] = a_bar;
            bb.data_mut()[d * n + i] = ph * dt * b_t.data()[i];
        }
    }
    Ok((ab, bb))
}

/// Recurrent state `[D x N]` carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T> {
    pub h: Tensor<T>,
}

impl<T: Real> ScanState<T> {
    pub fn zeros(channels: usize, n_state: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![channels, n_state]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.all_finite()
    }
}

/// Parameters of a selective SSM over `d_channels` channels.
///
/// `B_t`, `C_t` and a rank-`dt_rank` step pre-activation are linear in the
/// input via `x_proj`; the step is `Δ_t = softplus(dt_proj · dt_low + dt_bias)`.
/// `a_log` stores `log(-a)` so the realized decay is always negative.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    pub n_state: usize,
    pub d_channels: usize,
    pub dt_rank: usize,
    /// `[D x N]`
    pub a_log: Tensor<T>,
    /// `[(R + 2N) x D]`
    pub x_proj: Tensor<T>,
    /// `[D x R]`
    pub dt_proj: Tensor<T>,
    /// `[D]`
    pub dt_bias: Tensor<T>,
    /// `[D]`
    pub d_skip: Option<Tensor<T>>,
}

/// Handles to the SSM parameters inside an execution backend.
pub struct SsmHandles<V> {
    pub a_log: V,
    pub x_proj: V,
    pub dt_proj: V,
    pub dt_bias: V,
    pub d_skip: Option<V>,
    pub dt_rank: usize,
    pub n_state: usize,
}

/// Projected, discretization-ready operands for a scan over `x`.
pub struct Projected<V> {
    pub delta: V,
    pub a: V,
    pub b: V,
    pub c: V,
}

/// Input-dependent projections of a selective SSM.
pub fn project<T: Real, E: Exec<T>>(
    ex: &mut E,
    h: &SsmHandles<E::V>,
    x: &E::V,
) -> Result<Projected<E::V>> {
    let (r, n) = (h.dt_rank, h.n_state);
    let proj = ex.matmul(&h.x_proj, x)?;
    let dt_low = ex.rows(&proj, 0, r)?;
    let b = ex.rows(&proj, r, r + n)?;
    let c = ex.rows(&proj, r + n, r + 2 * n)?;
    let dt = ex.matmul(&h.dt_proj, &dt_low)?;
    let dt = ex.add_bias(&dt, &h.dt_bias)?;
    let delta = ex.unary(&dt, UnaryOp::Softplus);
    let a = ex.unary(&h.a_log, UnaryOp::Exp);
    let a = ex.unary(&a, UnaryOp::Neg);
    Ok(Projected { delta, a, b, c })
}

/// Full selective SSM: projections followed by the scan.
pub fn selective_ssm<T: Real, E: Exec<T>>(
    ex: &mut E,
    h: &SsmHandles<E::V>,
    x: &E::V,
    algo: ScanAlgorithm,
) -> Result<E::V> {
    let p = project(ex, h, x)?;
    ex.selective_scan(
        ScanOperands {
            u: x,
            delta: &p.delta,
            a: &p.a,
            b: &p.b,
            c: &p.c,
            d: h.d_skip.as_ref(),
        },
        algo,
    )
}

impl<T: Real> SsmParams<T> {
    pub fn handles(&self) -> SsmHandles<Tensor<T>> {
        SsmHandles {
            a_log: self.a_log.clone(),
            x_proj: self.x_proj.clone(),
            dt_proj: self.dt_proj.clone(),
            dt_bias: self.dt_bias.clone(),
            d_skip: self.d_skip.clone(),
            dt_rank: self.dt_rank,
            n_state: self.n_state,
        }
    }

    fn check(&self) -> Result<()> {
        let (d, n, r) = (self.d_channels, self.n_state, self.dt_rank);
        let ok = self.a_log.shape() == [d, n]
            && self.x_proj.shape() == [r + 2 * n, d]
            && self.dt_proj.shape() == [d, r]
            && self.dt_bias.shape() == [d]
            && self.d_skip.as_ref().is_none_or(|s| s.shape() == [d]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("SSM parameter shapes are inconsistent".into()))
        }
    }

    fn scan_impl<Z: Discretization>(
        &self,
        x: &Tensor<T>,
        h0: &ScanState<T>,
        algo: ScanAlgorithm,
    ) -> Result<(Tensor<T>, ScanState<T>)> {
        self.check()?;
        let (d, len) = x.dims2()?;
        if d != self.d_channels {
            return Err(Error::Dimension {
                op: "scan",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_channels],
            });
        }
        if h0.h.shape() != [self.d_channels, self.n_state] {
            return Err(Error::Dimension {
                op: "scan state",
                lhs: h0.h.shape().to_vec(),
                rhs: vec![self.d_channels, self.n_state],
            });
        }
        let mut ex = Eager;
        let p = project(&mut ex, &self.handles(), x)?;
        let inputs = ScanInputs {
            u: x.data(),
            delta: p.delta.data(),
            a: p.a.data(),
            b: p.b.data(),
            c: p.c.data(),
            d: self.d_skip.as_ref().map(|s| s.data()),
            channels: d,
            n_state: self.n_state,
            len,
        };
        let out = run_scan::<T, Z>(&inputs, Some(h0.h.data()), false, algo);
        Ok((
            Tensor::new(vec![d, len], out.y)?,
            ScanState {
                h: Tensor::new(vec![d, self.n_state], out.h_last)?,
            },
        ))
    }

    /// Reference left-to-right evaluation over `x: [D x L]`.
    pub fn scan_sequential(
        &self,
        x: &Tensor<T>,
        h0: &ScanState<T>,
    ) -> Result<(Tensor<T>, ScanState<T>)> {
        self.scan_impl::<ZeroOrderHold>(x, h0, ScanAlgorithm::Sequential)
    }

    /// Associative-scan evaluation of the same recurrence.
    pub fn scan_parallel(
        &self,
        x: &Tensor<T>,
        h0: &ScanState<T>,
    ) -> Result<(Tensor<T>, ScanState<T>)> {
        self.scan_impl::<ZeroOrderHold>(x, h0, ScanAlgorithm::Parallel)
    }

    /// Sequential scan with an alternative discretization rule.
    pub fn scan_sequential_with<Z: Discretization>(
        &self,
        x: &Tensor<T>,
        h0: &ScanState<T>,
    ) -> Result<(Tensor<T>, ScanState<T>)> {
        self.scan_impl::<Z>(x, h0, ScanAlgorithm::Sequential)
    }

    /// One streaming step on `x_t: [D]`.
    pub fn scan_step(&self, x_t: &Tensor<T>, h_prev: &ScanState<T>) -> Result<(Tensor<T>, ScanState<T>)> {
        let x = x_t.clone().reshape(vec![x_t.numel(), 1])?;
        let (y, h) = self.scan_sequential(&x, h_prev)?;
        Ok((y.reshape(vec![x_t.numel()])?, h))
    }
}

/// Scalar ZOH pair `(A_bar, B_bar)` for a single state, used by tests and
/// verification suites.
pub fn zoh_scalar(a: f64, delta: f64, b: f64) -> (f64, f64) {
    let z = delta * a;
    (
        <ZeroOrderHold as Discretization>::a_bar(z),
        <ZeroOrderHold as Discretization>::phi(z) * delta * b,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_closed_forms() {
        let (ab, bb) = zoh_scalar(-1.0, 1.0, 1.0);
        assert!((ab - 0.36788).abs() < 1e-5);
        assert!((bb - 0.63212).abs() < 1e-5);
        let (ab, bb) = zoh_scalar(-2.0, 0.5, 3.0);
        assert!((ab - (-1f64).exp()).abs() < 1e-12);
        assert!((bb - 0.94818).abs() < 1e-5);
    }

    #[test]
    fn fused_coefficients_match_separate_ones() {
        for &z in &[-60.0f64, -3.5, -0.7, -0.1, -0.05, -2e-4, -5e-5, 0.0, 1e-3] {
            let (ab, ph, dph) = ZeroOrderHold::coeffs_with_grad(z);
            assert!((ab / ZeroOrderHold::a_bar(z) - 1.0).abs() < 1e-15, "{z}");
            assert!((ph - ZeroOrderHold::phi(z)).abs() < 1e-15, "{z}");
            assert!((dph - ZeroOrderHold::dphi(z)).abs() < 1e-14, "{z}");
            assert_eq!(ZeroOrderHold::coeffs(z), (ab, ph));
        }
    }

    #[test]
    fn small_step_limit() {
        let (ab, bb) = zoh_scalar(-1.0, 1e-7, 2.0);
        assert!((ab - 1.0).abs() < 1e-6);
        assert!((bb - 2e-7).abs() < 1e-13);
    }

    #[test]
    fn phi_is_continuous_at_series_switch() {
        for &z in &[SERIES_THRESHOLD * (1.0 - 1e-9), SERIES_THRESHOLD * (1.0 + 1e-9)] {
            let exact = (-z as f64).exp_m1() / -z;
            let got = <ZeroOrderHold as Discretization>::phi(-z);
            assert!((got - exact).abs() < 1e-13, "{got} vs {exact}");
        }
    }

    #[test]
    fn dphi_matches_finite_difference() {
        for &z in &[-3.0f64, -0.5, -0.11, -0.09, -1e-3, -1e-6] {
            let h = 1e-6 * (1.0f64).max(z.abs());
            let fd = (<ZeroOrderHold as Discretization>::phi(z + h)
                - <ZeroOrderHold as Discretization>::phi(z - h))
                / (2.0 * h);
            let an = <ZeroOrderHold as Discretization>::dphi(z);
            assert!((fd - an).abs() < 1e-7, "z={z}: {an} vs {fd}");
        }
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let a = Tensor::<f64>::full(vec![1, 1], -1.0);
        let b = Tensor::full(vec![1], 1.0);
        let err = discretize(&a, &b, &Tensor::full(vec![1], 0.0)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn blelloch_matches_serial_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [1usize, 2, 4, 8, 64] {
            let a: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..1.0)).collect();
            let b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (mut ea, mut eb) = (a.clone(), b.clone());
            blelloch_exclusive(&mut ea, &mut eb);
            let (mut pa, mut pb) = (1.0, 0.0);
            for t in 0..p {
                assert!((ea[t] - pa).abs() < 1e-12 && (eb[t] - pb).abs() < 1e-12);
                pa *= a[t];
                pb = a[t] * pb + b[t];
            }
        }
    }
}
