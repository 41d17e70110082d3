//! Self-checks runnable from the command line: scan equivalence, gradient
//! finite differences, the causal lookahead probe and metric invariants.
//!
//! Every check compares against an independent computation (closed forms,
//! exhaustive enumeration, central differences) rather than against another
//! code path of the same kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{rng_for, uniform};
use crate::mamba::BambaStack;
use crate::numerics::{ConvGeom, ConvTGeom, Exec, ParamStore, Real, ScanOperands, Tape, Tensor, Var};
use crate::objective::{si_sdr_raw, upit_loss, upit_loss_tape, CLAMP_DB, EPS};
use crate::separator::{lookahead, SeparatorConfig, SeparatorModel};
use crate::ssm::{
    run_scan, selective_ssm, Discretization, ScanAlgorithm, ScanInputs, SsmHandles, ZeroOrderHold,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Scan,
    Grads,
    Causality,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Scan, Suite::Grads, Suite::Causality, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Scan => "scan",
            Suite::Grads => "grads",
            Suite::Causality => "causality",
            Suite::Metrics => "metrics",
        }
    }

    /// A suite name or `all`.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (expected scan, grads, causality, metrics or all)")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deliberate defects used to check that the suites can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Growth instead of decay in the state transition.
    SignFlip,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "sign-flip" => Ok(Fault::SignFlip),
            _ => Err(Error::Config(format!("unknown fault `{s}`"))),
        }
    }
}

/// Zero-order hold with the exponent sign flipped in the state transition.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SignFlipped;

impl Discretization for SignFlipped {
    fn a_bar<T: Real>(z: T) -> T {
        (-z).exp()
    }

    fn phi<T: Real>(z: T) -> T {
        ZeroOrderHold::phi(z)
    }

    fn dphi<T: Real>(z: T) -> T {
        ZeroOrderHold::dphi(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn error(suite: Suite, name: impl Into<String>, e: Error) -> Self {
        Self::new(suite, name, false, format!("error: {e}"))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.detail
        )
    }
}

pub fn run(suite: Suite, seed: u64, fault: Fault) -> Vec<Check> {
    match suite {
        Suite::Scan => match fault {
            Fault::None => scan_suite::<ZeroOrderHold>(seed),
            Fault::SignFlip => scan_suite::<SignFlipped>(seed),
        },
        Suite::Grads => grads_suite(seed),
        Suite::Causality => causality_suite(seed),
        Suite::Metrics => metrics_suite(seed),
    }
}

// ---------------------------------------------------------------- scan

pub const SCAN_CASES: usize = 100;
pub const SCAN_TOL_F64: f64 = 1e-10;
pub const SCAN_TOL_F32: f64 = 1e-5;

/// Random scan operands in `f64`.
#[derive(Clone, Debug)]
pub struct ScanCase {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub channels: usize,
    pub n_state: usize,
    pub len: usize,
}

impl ScanCase {
    pub fn random(rng: &mut ChaCha8Rng, max_len: usize) -> Self {
        let channels = rng.random_range(1..=16);
        let n_state = rng.random_range(1..=16);
        let len = rng.random_range(1..=max_len);
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        Self {
            u: draw(channels * len, -1.0, 1.0),
            delta: draw(channels * len, 1e-3, 0.5),
            a: draw(channels * n_state, -4.0, -0.05),
            b: draw(n_state * len, -1.0, 1.0),
            c: draw(n_state * len, -1.0, 1.0),
            d: draw(channels, -1.0, 1.0),
            channels,
            n_state,
            len,
        }
    }

    pub fn run<T: Real, Z: Discretization>(&self, algo: ScanAlgorithm) -> Vec<T> {
        let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
        let (u, delta, a, b, c, d) = (
            cast(&self.u),
            cast(&self.delta),
            cast(&self.a),
            cast(&self.b),
            cast(&self.c),
            cast(&self.d),
        );
        let inp = ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: Some(&d),
            channels: self.channels,
            n_state: self.n_state,
            len: self.len,
        };
        run_scan::<T, Z>(&inp, None, false, algo).y
    }

    /// Direct evaluation of the zero-order-hold recurrence.
    pub fn oracle(&self) -> Vec<f64> {
        let (dch, n, len) = (self.channels, self.n_state, self.len);
        let mut y = vec![0.0; dch * len];
        for d in 0..dch {
            let mut h = vec![0.0; n];
            for t in 0..len {
                let dt = self.delta[d * len + t];
                let x = self.u[d * len + t];
                let mut acc = self.d[d] * x;
                for (i, hi) in h.iter_mut().enumerate() {
                    let a = self.a[d * n + i];
                    *hi = (dt * a).exp() * *hi + (dt * a).exp_m1() / a * self.b[i * len + t] * x;
                    acc += self.c[i * len + t] * *hi;
                }
                y[d * len + t] = acc;
            }
        }
        y
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn max_abs<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

fn finite_max(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

pub fn scan_suite<Z: Discretization>(seed: u64) -> Vec<Check> {
    let s = Suite::Scan;
    let mut rng = rng_for(seed, 31);
    let cases: Vec<ScanCase> = (0..SCAN_CASES).map(|_| ScanCase::random(&mut rng, 1024)).collect();
    let mut out = Vec::new();

    let mut e64 = 0.0f64;
    let mut e32 = 0.0f64;
    for c in &cases {
        let seq = c.run::<f64, Z>(ScanAlgorithm::Sequential);
        let par = c.run::<f64, Z>(ScanAlgorithm::Parallel);
        e64 = e64.max(finite_max(max_abs(&seq, &par)));
        let seq = c.run::<f32, Z>(ScanAlgorithm::Sequential);
        let par = c.run::<f32, Z>(ScanAlgorithm::Parallel);
        e32 = e32.max(finite_max(max_abs(&seq, &par)));
    }
    out.push(Check::new(
        s,
        "parallel scan matches sequential (f64)",
        e64 < SCAN_TOL_F64,
        format!("max |diff| {e64:.3e} over {SCAN_CASES} cases, tol {SCAN_TOL_F64:e}"),
    ));
    out.push(Check::new(
        s,
        "parallel scan matches sequential (f32)",
        e32 < SCAN_TOL_F32,
        format!("max |diff| {e32:.3e} over {SCAN_CASES} cases, tol {SCAN_TOL_F32:e}"),
    ));

    let mut eo = 0.0f64;
    for c in cases.iter().take(20) {
        let seq = c.run::<f64, Z>(ScanAlgorithm::Sequential);
        eo = eo.max(finite_max(max_rel_diff(&seq, &c.oracle())));
    }
    out.push(Check::new(
        s,
        "sequential scan matches the closed-form recurrence",
        eo < SCAN_TOL_F64,
        format!("max scaled diff {eo:.3e}, tol {SCAN_TOL_F64:e}"),
    ));

    let mut worst = 0.5f64;
    let mut ok = true;
    for i in 0..=2000 {
        // log-spaced over [-20, -1e-6]
        let z = -(10f64.powf(-6.0 + 7.3 * i as f64 / 2000.0));
        for v in [Z::a_bar(z), Z::a_bar(z as f32) as f64] {
            if !(v > 0.0 && v < 1.0) {
                ok = false;
                worst = v;
            }
        }
    }
    out.push(Check::new(
        s,
        "state transition is a contraction for negative a",
        ok,
        if ok {
            "A_bar in (0, 1) on z in [-20, -1e-6]".to_string()
        } else {
            format!("A_bar = {worst:.6} outside (0, 1)")
        },
    ));

    // Splitting the sequence and carrying the state must not change outputs.
    let mut ec = 0.0f64;
    for c in cases.iter().filter(|c| c.len >= 2).take(20) {
        let full = c.run::<f64, Z>(ScanAlgorithm::Sequential);
        let cut = c.len / 2;
        let split = |v: &[f64], rows: usize, lo: usize, hi: usize| -> Vec<f64> {
            (0..rows).flat_map(|r| v[r * c.len + lo..r * c.len + hi].to_vec()).collect()
        };
        let mut y = vec![0.0; c.channels * c.len];
        let mut h = None::<Vec<f64>>;
        for (lo, hi) in [(0, cut), (cut, c.len)] {
            let (u, dl, b, cc) = (
                split(&c.u, c.channels, lo, hi),
                split(&c.delta, c.channels, lo, hi),
                split(&c.b, c.n_state, lo, hi),
                split(&c.c, c.n_state, lo, hi),
            );
            let inp = ScanInputs {
                u: &u,
                delta: &dl,
                a: &c.a,
                b: &b,
                c: &cc,
                d: Some(&c.d),
                channels: c.channels,
                n_state: c.n_state,
                len: hi - lo,
            };
            let o = run_scan::<f64, Z>(&inp, h.as_deref(), false, ScanAlgorithm::Parallel);
            for r in 0..c.channels {
                y[r * c.len + lo..r * c.len + hi].copy_from_slice(&o.y[r * (hi - lo)..(r + 1) * (hi - lo)]);
            }
            h = Some(o.h_last);
        }
        ec = ec.max(finite_max(max_abs(&full, &y)));
    }
    out.push(Check::new(
        s,
        "chunked scan with carried state matches one pass",
        ec < SCAN_TOL_F64,
        format!("max |diff| {ec:.3e}, tol {SCAN_TOL_F64:e}"),
    ));
    out
}

// ---------------------------------------------------------------- grads

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
/// Floor of the relative-error denominator; entries with both gradients
/// below it are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;
const FD_COORDS_PER_TENSOR: usize = 3;

pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

fn loss_value(store: &ParamStore<f64>, f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let l = f(&mut tape, store)?;
    Ok(tape.value(l).item())
}

fn central_difference(store: &ParamStore<f64>, f: &LossFn<'_>, idx: usize, i: usize, h: f64) -> Result<f64> {
    let mut p = store.clone();
    let orig = p.tensors_mut()[idx].data()[i];
    p.tensors_mut()[idx].data_mut()[i] = orig + h;
    let up = loss_value(&p, f)?;
    p.tensors_mut()[idx].data_mut()[i] = orig - h;
    let down = loss_value(&p, f)?;
    Ok((up - down) / (2.0 * h))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Worst finite-difference disagreement of the gradient from a result of
/// [`fd_max_rel_error`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst coordinate.
    pub at: String,
    pub coords: usize,
}

/// Compares taped gradients of every parameter tensor in `store` against
/// central differences at a few sampled coordinates (all of them for tiny
/// tensors). A coordinate that fails is retried once with a quarter step,
/// which separates genuine errors from a ReLU kink inside the stencil.
pub fn fd_max_rel_error(store: &ParamStore<f64>, f: &LossFn<'_>, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let mut g = tape.backward(loss)?;
    let grads = tape.param_grads(&mut g, store);
    let mut rep = FdReport {
        max_rel_err: 0.0,
        at: String::new(),
        coords: 0,
    };
    for (idx, ((_, pname, t), ga)) in store.iter().zip(&grads).enumerate() {
        let picks: Vec<usize> = if t.numel() <= FD_COORDS_PER_TENSOR {
            (0..t.numel()).collect()
        } else {
            (0..FD_COORDS_PER_TENSOR).map(|_| rng.random_range(0..t.numel())).collect()
        };
        for i in picks {
            let a = ga.data()[i];
            let mut e = rel_err(a, central_difference(store, f, idx, i, FD_STEP)?);
            if e >= FD_REL_TOL {
                e = e.min(rel_err(a, central_difference(store, f, idx, i, FD_STEP / 4.0)?));
            }
            rep.coords += 1;
            if !(e <= rep.max_rel_err) {
                rep.max_rel_err = e;
                rep.at = format!("{pname}[{i}]");
            }
        }
    }
    Ok(rep)
}

pub fn fd_check(suite: Suite, name: &str, store: &ParamStore<f64>, f: &LossFn<'_>, rng: &mut ChaCha8Rng) -> Check {
    match fd_max_rel_error(store, f, rng) {
        Ok(r) => Check::new(
            suite,
            name,
            r.max_rel_err < FD_REL_TOL,
            format!(
                "max rel err {:.2e} at {} over {} coordinates, tol {FD_REL_TOL:e}",
                r.max_rel_err, r.at, r.coords
            ),
        ),
        Err(e) => Check::error(suite, name, e),
    }
}

/// `sum(y * w)` for a fixed random `w`, so every output element matters.
fn projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.input(uniform(&mut rng_for(seed, 41), shape, 1.0));
    let p = tape.mul(&y, &w)?;
    Ok(tape.sum(p))
}

fn insert(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, lo: f64, hi: f64) -> Result<()> {
    let t = Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    store.insert(name, t).map(|_| ())
}

pub fn grads_suite(seed: u64) -> Vec<Check> {
    let s = Suite::Grads;
    let mut rng = rng_for(seed, 33);
    let mut out = Vec::new();

    // Selective SSM: projections, softplus step, ZOH and scan.
    for algo in [ScanAlgorithm::Sequential, ScanAlgorithm::Parallel] {
        let name = format!("selective ssm ({algo:?} scan)").to_lowercase();
        let (d, n, r, l) = (6, 4, 2, 24);
        let mut store = ParamStore::new();
        let built = (|| -> Result<()> {
            insert(&mut store, &mut rng, "x", vec![d, l], -1.0, 1.0)?;
            insert(&mut store, &mut rng, "a_log", vec![d, n], -0.7, 1.4)?;
            insert(&mut store, &mut rng, "x_proj", vec![r + 2 * n, d], -0.5, 0.5)?;
            insert(&mut store, &mut rng, "dt_proj", vec![d, r], -0.5, 0.5)?;
            insert(&mut store, &mut rng, "dt_bias", vec![d], -3.0, -1.0)?;
            insert(&mut store, &mut rng, "d_skip", vec![d], -1.0, 1.0)
        })();
        if let Err(e) = built {
            out.push(Check::error(s, name, e));
            continue;
        }
        let f = move |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
            let p = |tape: &mut Tape<f64>, k: &str| tape.param(st, st.id(k).expect("registered"));
            let x = p(tape, "x");
            let h = SsmHandles {
                a_log: p(tape, "a_log"),
                x_proj: p(tape, "x_proj"),
                dt_proj: p(tape, "dt_proj"),
                dt_bias: p(tape, "dt_bias"),
                d_skip: Some(p(tape, "d_skip")),
                dt_rank: r,
                n_state: n,
            };
            let y = selective_ssm(tape, &h, &x, algo)?;
            projection(tape, y, seed)
        };
        out.push(fd_check(s, &name, &store, &f, &mut rng));
    }

    // Raw scan operands, including the skip term.
    {
        let (d, n, l) = (3, 5, 17);
        let mut store = ParamStore::new();
        let built = (|| -> Result<()> {
            insert(&mut store, &mut rng, "u", vec![d, l], -1.0, 1.0)?;
            insert(&mut store, &mut rng, "delta", vec![d, l], 0.01, 0.8)?;
            insert(&mut store, &mut rng, "a", vec![d, n], -3.0, -0.1)?;
            insert(&mut store, &mut rng, "b", vec![n, l], -1.0, 1.0)?;
            insert(&mut store, &mut rng, "c", vec![n, l], -1.0, 1.0)?;
            insert(&mut store, &mut rng, "d", vec![d], -1.0, 1.0)
        })();
        let f = |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
            let v: Vec<Var> = st.iter().map(|(id, _, _)| tape.param(st, id)).collect();
            let y = tape.selective_scan(
                ScanOperands {
                    u: &v[0],
                    delta: &v[1],
                    a: &v[2],
                    b: &v[3],
                    c: &v[4],
                    d: Some(&v[5]),
                },
                ScanAlgorithm::Sequential,
            )?;
            projection(tape, y, seed)
        };
        out.push(match built {
            Ok(()) => fd_check(s, "scan operands", &store, &f, &mut rng),
            Err(e) => Check::error(s, "scan operands", e),
        });
    }

    // Strided, grouped and transposed convolutions.
    for (name, groups, transposed) in [
        ("strided conv1d", 1, false),
        ("grouped conv1d", 2, false),
        ("transposed conv1d", 1, true),
    ] {
        let (ci, co, k, l) = (4, 6, 5, 19);
        let mut store = ParamStore::new();
        let wshape = if transposed { vec![ci, co, k] } else { vec![co, ci / groups, k] };
        let built = (|| -> Result<()> {
            insert(&mut store, &mut rng, "x", vec![ci, l], -1.0, 1.0)?;
            insert(&mut store, &mut rng, "w", wshape, -0.5, 0.5)?;
            insert(&mut store, &mut rng, "b", vec![co], -0.5, 0.5)
        })();
        let f = move |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
            let v: Vec<Var> = st.iter().map(|(id, _, _)| tape.param(st, id)).collect();
            let y = if transposed {
                let g = ConvTGeom {
                    stride: 2,
                    crop_left: 2,
                    crop_right: 1,
                };
                tape.conv_transpose1d(&v[0], &v[1], Some(&v[2]), g)?
            } else {
                let g = ConvGeom {
                    stride: 2,
                    pad_left: 2,
                    pad_right: 1,
                    groups,
                };
                tape.conv1d(&v[0], &v[1], Some(&v[2]), g)?
            };
            projection(tape, y, seed)
        };
        out.push(match built {
            Ok(()) => fd_check(s, name, &store, &f, &mut rng),
            Err(e) => Check::error(s, name, e),
        });
    }

    // Bidirectional stack of Mamba blocks with normalization.
    {
        let cfg = SeparatorConfig::toy();
        let d = cfg.base_dim;
        let mut store = ParamStore::new();
        let built = (|| -> Result<BambaStack> {
            insert(&mut store, &mut rng, "x", vec![d, 20], -1.0, 1.0)?;
            let mut init_rng = rng_for(seed, 43);
            BambaStack::build(&mut store, "stack", cfg.stack_config(d), &mut init_rng)
        })();
        match built {
            Ok(stack) => {
                let f = |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
                    let x = tape.param(st, st.id("x").expect("registered"));
                    let y = stack.forward(tape, st, &x)?;
                    projection(tape, y, seed)
                };
                out.push(fd_check(s, "bidirectional mamba stack", &store, &f, &mut rng));
            }
            Err(e) => out.push(Check::error(s, "bidirectional mamba stack", e)),
        }
    }

    // Whole separator through the permutation-invariant loss.
    match SeparatorModel::<f64>::build(&SeparatorConfig::toy(), seed) {
        Ok(model) => {
            let len = 64;
            let refs: Tensor<f64> = uniform(&mut rng_for(seed, 44), vec![2, len], 1.0);
            let mix = Tensor::from_fn(vec![1, len], |t| refs.data()[t] + refs.data()[len + t]);
            let f = |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
                let x = tape.input(mix.clone());
                let y = model.net.forward_exec(tape, st, &x)?;
                Ok(upit_loss_tape(tape, y, &refs, CLAMP_DB)?.0)
            };
            out.push(fd_check(s, "separator with uPIT loss", &model.params, &f, &mut rng));
        }
        Err(e) => out.push(Check::error(s, "separator with uPIT loss", e)),
    }
    out
}

// ---------------------------------------------------------------- causality

/// Result of perturbing single input samples of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// Largest `p - t` over probed positions `p` with output `t` changed.
    pub max_reach: usize,
    /// Whether some probed position influenced no output at all.
    pub silent: bool,
}

/// Perturbs `x[p]` for each `p` in `positions` and records how far back in
/// time the output changed (exact comparison).
pub fn probe_lookahead(model: &SeparatorModel<f64>, len: usize, positions: impl IntoIterator<Item = usize>, seed: u64) -> Result<Probe> {
    let x: Tensor<f64> = uniform(&mut rng_for(seed, 51), vec![1, len], 1.0);
    let base = model.forward(&x)?;
    let (rows, _) = base.dims2()?;
    let mut max_reach = 0;
    let mut silent = false;
    for p in positions {
        let mut xp = x.clone();
        xp.data_mut()[p] += 0.5;
        let y = model.forward(&xp)?;
        let first = (0..len).find(|&t| (0..rows).any(|r| y.row(r)[t] != base.row(r)[t]));
        match first {
            Some(t) if t < p => max_reach = max_reach.max(p - t),
            Some(_) => {}
            None => silent = true,
        }
    }
    Ok(Probe { max_reach, silent })
}

pub fn causality_suite(seed: u64) -> Vec<Check> {
    let s = Suite::Causality;
    let mut out = Vec::new();
    let causal = SeparatorConfig {
        causal: true,
        ..SeparatorConfig::toy()
    };
    let lam = lookahead(&causal).expect("causal");
    let fm = causal.frame_multiple();
    let start = lam.div_ceil(fm) * fm + fm;
    let len = (start + 2 * fm + lam).div_ceil(fm) * fm + fm;
    let positions = start..start + 2 * fm;

    match SeparatorModel::<f64>::build(&causal, seed).and_then(|m| probe_lookahead(&m, len, positions.clone(), seed)) {
        Ok(p) => out.push(Check::new(
            s,
            "measured lookahead equals the analytic value",
            p.max_reach == lam && !p.silent,
            format!("measured {}, analytic {lam} samples", p.max_reach),
        )),
        Err(e) => out.push(Check::error(s, "measured lookahead equals the analytic value", e)),
    }

    let bidir = SeparatorConfig::toy();
    match SeparatorModel::<f64>::build(&bidir, seed).and_then(|m| probe_lookahead(&m, len, positions, seed)) {
        Ok(p) => out.push(Check::new(
            s,
            "non-causal model reaches beyond the causal bound",
            p.max_reach > lam,
            format!("measured {} > {lam} samples", p.max_reach),
        )),
        Err(e) => out.push(Check::error(s, "non-causal model reaches beyond the causal bound", e)),
    }

    let stream = (|| -> Result<f64> {
        let model = SeparatorModel::<f32>::build(&causal, seed)?;
        let x: Tensor<f32> = uniform(&mut rng_for(seed, 52), vec![1, 8 * fm], 1.0);
        let batch = model.forward(&x)?;
        let mut st = model.init_stream()?;
        let mut parts = Vec::new();
        for i in 0..8 {
            parts.push(model.forward_streaming(&x.time_slice(i * fm, fm)?, &mut st)?);
        }
        parts.push(model.flush_stream(&mut st)?);
        let y = Tensor::concat_time(&parts)?;
        if y.shape() != batch.shape() {
            return Err(Error::Shape(format!("stream {:?} vs batch {:?}", y.shape(), batch.shape())));
        }
        Ok(y.max_abs_diff(&batch))
    })();
    out.push(match stream {
        Ok(d) => Check::new(
            s,
            "frame-by-frame streaming matches batch inference (f32)",
            d < 1e-5,
            format!("max |diff| {d:.2e}, tol 1e-5"),
        ),
        Err(e) => Check::error(s, "frame-by-frame streaming matches batch inference (f32)", e),
    });
    out
}

// ---------------------------------------------------------------- metrics

/// SI-SDR in dB straight from the definition, without stabilizers.
pub fn si_sdr_oracle(est: &[f64], reference: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let alpha = dot(est, reference) / dot(reference, reference);
    let target: Vec<f64> = reference.iter().map(|r| alpha * r).collect();
    let noise: Vec<f64> = est.iter().zip(&target).map(|(e, t)| e - t).collect();
    10.0 * (dot(&target, &target) / dot(&noise, &noise)).log10()
}

pub fn metrics_suite(seed: u64) -> Vec<Check> {
    let s = Suite::Metrics;
    let mut rng = rng_for(seed, 61);
    let mut out = Vec::new();
    let len = 400;
    let sig = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r = sig(&mut rng);
        let e: Vec<f64> = r.iter().zip(sig(&mut rng)).map(|(a, b)| a + 0.3 * b).collect();
        let base = si_sdr_raw(&e, &r, EPS);
        for c in [0.1, 1.0, 10.0] {
            let ec: Vec<f64> = e.iter().map(|v| v * c).collect();
            worst = worst.max((si_sdr_raw(&ec, &r, EPS) - base).abs());
        }
    }
    out.push(Check::new(
        s,
        "SI-SDR is invariant to estimate scaling",
        worst < 1e-6,
        format!("max change {worst:.2e} dB for c in {{0.1, 1, 10}}"),
    ));

    // 10 dB by construction: reference plus an orthogonal residual of a
    // tenth of its energy.
    let r = sig(&mut rng);
    let mut n = sig(&mut rng);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj: f64 = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    n.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let k = (rr / 10.0 / nn).sqrt();
    let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + k * b).collect();
    let v = si_sdr_raw(&e, &r, EPS);
    out.push(Check::new(
        s,
        "orthogonal residual at a tenth of the energy gives 10 dB",
        (v - 10.0).abs() < 1e-6,
        format!("{v:.9} dB"),
    ));

    let mut agree = 0;
    let mut worst_loss = 0.0f64;
    let mut perm_invariant = true;
    let cases = 100;
    for _ in 0..cases {
        let refs = Tensor::from_rows(&[sig(&mut rng), sig(&mut rng)]).expect("rows");
        let est = Tensor::from_fn(vec![2, len], |i| refs.data()[i] * rng.random_range(0.0..1.0) + rng.random_range(-0.8..0.8));
        let Ok(u) = upit_loss(&est, &refs, CLAMP_DB) else {
            continue;
        };
        let m = |i: usize, j: usize| si_sdr_oracle(est.row(j), refs.row(i)).min(CLAMP_DB);
        let direct = -(m(0, 0) + m(1, 1)) / 2.0;
        let swapped = -(m(0, 1) + m(1, 0)) / 2.0;
        let (loss, perm) = if direct <= swapped { (direct, vec![0, 1]) } else { (swapped, vec![1, 0]) };
        worst_loss = worst_loss.max((u.loss - loss).abs());
        if u.perm == perm {
            agree += 1;
        }
        let flipped = Tensor::from_rows(&[est.row(1).to_vec(), est.row(0).to_vec()]).expect("rows");
        match upit_loss(&flipped, &refs, CLAMP_DB) {
            Ok(f) if f.loss == u.loss && f.perm != u.perm => {}
            _ => perm_invariant = false,
        }
    }
    out.push(Check::new(
        s,
        "PIT assignment equals exhaustive enumeration",
        agree == cases && worst_loss < 1e-6,
        format!("{agree}/{cases} assignments agree, max loss diff {worst_loss:.2e}"),
    ));
    out.push(Check::new(
        s,
        "PIT loss is invariant to the order of estimates",
        perm_invariant,
        "swapping estimate rows swaps the assignment only".to_string(),
    ));

    let refs = Tensor::from_rows(&[sig(&mut rng), sig(&mut rng)]).expect("rows");
    let clamp = upit_loss(&refs, &refs, CLAMP_DB).map(|u| u.loss);
    out.push(Check::new(
        s,
        "per-source loss clamps at -30 dB",
        clamp.as_ref().is_ok_and(|&l| l == -CLAMP_DB),
        format!("perfect estimates give {clamp:?}"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_selection("all").unwrap().len(), 4);
        assert_eq!(Suite::parse_selection("grads").unwrap(), vec![Suite::Grads]);
        assert!(Suite::parse_selection("everything").is_err());
    }

    #[test]
    fn oracle_agrees_with_scan_on_a_small_case() {
        let c = ScanCase::random(&mut rng_for(1, 0), 16);
        let y = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        assert!(max_rel_diff(&y, &c.oracle()) < 1e-12);
    }

    #[test]
    fn sign_flip_is_caught() {
        let checks = scan_suite::<SignFlipped>(0);
        assert!(checks.iter().any(|c| !c.passed));
    }
}
