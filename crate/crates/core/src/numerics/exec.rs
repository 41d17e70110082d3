//! Execution backends for model code.
//!
//! Layers are written once against [`Exec`]. [`Eager`] computes values and
//! drops intermediates as soon as they go out of scope (inference);
//! [`Tape`](super::tape::Tape) records every op for reverse-mode
//! differentiation.

use super::kernels::{self, ConvGeom, ConvShape, ConvTGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{self, ScanAlgorithm, ScanInputs, ZeroOrderHold};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Neg,
    Softplus,
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Neg => -x,
            UnaryOp::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the input, given input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Exp => y,
            UnaryOp::Neg => -T::one(),
            UnaryOp::Softplus => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Operands of a selective scan: `u, delta: [D x L]`, `a: [D x N]` (negative
/// continuous-time diagonal), `b, c: [N x L]`, optional skip `d: [D]`.
pub struct ScanOperands<'a, V> {
    pub u: &'a V,
    pub delta: &'a V,
    pub a: &'a V,
    pub b: &'a V,
    pub c: &'a V,
    pub d: Option<&'a V>,
}

/// Output shape of a broadcasting binary op. The smaller operand, after
/// dropping leading unit axes, must equal a suffix of the larger one.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == trimmed[..] {
        Ok(big.to_vec())
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub(crate) fn binary_values<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = a.len().max(b.len());
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(a[i % a.len()], b[i % b.len()])).collect()
    }
}

pub(crate) fn conv_shape(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    transposed: bool,
    groups: usize,
) -> Result<ConvShape> {
    let (c_in, len) = match x {
        [c, l] => (*c, *l),
        _ => return Err(Error::Shape(format!("{op}: input must be [C x L], got {x:?}"))),
    };
    let (w0, w1, kernel) = match w {
        [a, b, k] => (*a, *b, *k),
        _ => return Err(Error::Shape(format!("{op}: weight must be 3-d, got {w:?}"))),
    };
    if kernel == 0 || groups == 0 {
        return Err(Error::Config(format!("{op}: kernel and groups must be >= 1")));
    }
    let (c_out, ok) = if transposed {
        (w1, w0 == c_in && groups == 1)
    } else {
        (w0, w1 * groups == c_in && w0 % groups == 0)
    };
    if !ok {
        return Err(Error::Dimension {
            op,
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    Ok(ConvShape {
        c_in,
        c_out,
        kernel,
        len,
        out_len: 0,
    })
}

/// Differentiable-op interface shared by the eager and taped backends.
pub trait Exec<T: Real> {
    type V: Clone;

    fn shape<'a>(&'a self, v: &'a Self::V) -> &'a [usize];
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V;
    fn input(&mut self, t: Tensor<T>) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn unary(&mut self, x: &Self::V, op: UnaryOp) -> Self::V;
    /// `x[C x L] + b[C]` broadcast along time.
    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        geom: ConvGeom,
    ) -> Result<Self::V>;
    fn conv_transpose1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        geom: ConvTGeom,
    ) -> Result<Self::V>;
    fn flip_time(&mut self, x: &Self::V) -> Self::V;
    /// Rows `[start, end)` of a `[R x L]` tensor.
    fn rows(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    /// `out[c, t] = x[c, t + offset]` for `t < len`, zero outside `x`.
    fn time_window(&mut self, x: &Self::V, offset: isize, len: usize) -> Result<Self::V>;
    fn selective_scan(
        &mut self,
        ops: ScanOperands<'_, Self::V>,
        algo: ScanAlgorithm,
    ) -> Result<Self::V>;
    /// Per-timestep RMS normalization across channels with a per-channel gain.
    fn rms_norm(&mut self, x: &Self::V, w: &Self::V, eps: f64) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Self::V {
        self.unary(x, UnaryOp::Relu)
    }
    fn silu(&mut self, x: &Self::V) -> Self::V {
        self.unary(x, UnaryOp::Silu)
    }
}

/// Inference backend operating directly on tensors.
#[derive(Default)]
pub struct Eager;

pub(crate) fn eager_time_window<T: Real>(x: &Tensor<T>, offset: isize, len: usize) -> Result<Tensor<T>> {
    let (c, l) = x.dims2()?;
    let mut out = Tensor::zeros(vec![c, len]);
    for ch in 0..c {
        let src = x.row(ch);
        let dst = out.row_mut(ch);
        for (t, v) in dst.iter_mut().enumerate() {
            let i = t as isize + offset;
            if i >= 0 && (i as usize) < l {
                *v = src[i as usize];
            }
        }
    }
    Ok(out)
}

pub(crate) fn eager_rms_norm<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, l) = x.dims2()?;
    if w.shape() != [c] {
        return Err(Error::Dimension {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut inv = vec![T::zero(); l];
    let xd = x.data();
    for (t, r) in inv.iter_mut().enumerate() {
        let mut ms = T::zero();
        for ch in 0..c {
            let v = xd[ch * l + t];
            ms += v * v;
        }
        ms /= T::from_f64(c as f64);
        *r = T::one() / (ms + T::from_f64(eps)).sqrt();
    }
    let mut out = x.clone();
    for ch in 0..c {
        let g = w.data()[ch];
        for (t, v) in out.row_mut(ch).iter_mut().enumerate() {
            *v = *v * inv[t] * g;
        }
    }
    Ok((out, inv))
}

pub(crate) fn scan_dims(
    u: &[usize],
    delta: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
    d: Option<&[usize]>,
) -> Result<(usize, usize, usize)> {
    let bad = |what: &str| Error::Shape(format!("selective_scan: inconsistent {what}"));
    let (ch, len) = match u {
        [ch, len] => (*ch, *len),
        _ => return Err(bad("input rank")),
    };
    let n = match a {
        [ach, n] if *ach == ch => *n,
        _ => return Err(bad("state matrix")),
    };
    if delta != u {
        return Err(bad("step size"));
    }
    if b != [n, len] || c != [n, len] {
        return Err(bad("input/output projections"));
    }
    if let Some(d) = d {
        if d != [ch] {
            return Err(bad("skip term"));
        }
    }
    Ok((ch, n, len))
}

impl<T: Real> Exec<T> for Eager {
    type V = Tensor<T>;

    fn shape<'a>(&'a self, v: &'a Tensor<T>) -> &'a [usize] {
        v.shape()
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        store.get(id).clone()
    }

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = broadcast_shape(a.shape(), b.shape(), "add")?;
        Tensor::new(shape, binary_values(a.data(), b.data(), |x, y| x + y))
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = broadcast_shape(a.shape(), b.shape(), "mul")?;
        Tensor::new(shape, binary_values(a.data(), b.data(), |x, y| x * y))
    }

    fn unary(&mut self, x: &Tensor<T>, op: UnaryOp) -> Tensor<T> {
        x.map(|v| op.apply(v))
    }

    fn add_bias(&mut self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        add_bias(x, b)
    }

    fn conv1d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Tensor<T>> {
        conv1d(x, w, b, geom)
    }

    fn conv_transpose1d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        geom: ConvTGeom,
    ) -> Result<Tensor<T>> {
        conv_transpose1d(x, w, b, geom)
    }

    fn flip_time(&mut self, x: &Tensor<T>) -> Tensor<T> {
        flip_time(x)
    }

    fn rows(&mut self, x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
        rows(x, start, end)
    }

    fn time_window(&mut self, x: &Tensor<T>, offset: isize, len: usize) -> Result<Tensor<T>> {
        eager_time_window(x, offset, len)
    }

    fn selective_scan(
        &mut self,
        ops: ScanOperands<'_, Tensor<T>>,
        algo: ScanAlgorithm,
    ) -> Result<Tensor<T>> {
        let (ch, n, len) = scan_dims(
            ops.u.shape(),
            ops.delta.shape(),
            ops.a.shape(),
            ops.b.shape(),
            ops.c.shape(),
            ops.d.map(|d| d.shape()),
        )?;
        let inputs = ScanInputs {
            u: ops.u.data(),
            delta: ops.delta.data(),
            a: ops.a.data(),
            b: ops.b.data(),
            c: ops.c.data(),
            d: ops.d.map(|d| d.data()),
            channels: ch,
            n_state: n,
            len,
        };
        let out = ssm::run_scan::<T, ZeroOrderHold>(&inputs, None, false, algo);
        Tensor::new(vec![ch, len], out.y)
    }

    fn rms_norm(&mut self, x: &Tensor<T>, w: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        Ok(eager_rms_norm(x, w, eps)?.0)
    }
}

// Free-function forms of the tensor ops, used by the eager backend, the tape
// and streaming inference.

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub fn add_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, _) = x.dims2()?;
    if b.shape() != [c] {
        return Err(Error::Dimension {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for ch in 0..c {
        let bv = b.data()[ch];
        out.row_mut(ch).iter_mut().for_each(|v| *v += bv);
    }
    Ok(out)
}

pub fn conv1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let mut s = conv_shape("conv1d", x.shape(), w.shape(), false, geom.groups)?;
    if geom.stride == 0 {
        return Err(Error::Config("conv1d: stride must be >= 1".into()));
    }
    s.out_len = geom.out_len(s.len, s.kernel).ok_or(Error::EmptyOutput {
        op: "conv1d",
        padded: s.len + geom.pad_left + geom.pad_right,
        kernel: s.kernel,
    })?;
    check_bias("conv1d", b, s.c_out)?;
    let y = kernels::conv1d(x.data(), w.data(), b.map(|b| b.data()), &s, &geom);
    Tensor::new(vec![s.c_out, s.out_len], y)
}

pub fn conv_transpose1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvTGeom,
) -> Result<Tensor<T>> {
    let mut s = conv_shape("conv_transpose1d", x.shape(), w.shape(), true, 1)?;
    if geom.stride == 0 {
        return Err(Error::Config("conv_transpose1d: stride must be >= 1".into()));
    }
    s.out_len = geom.out_len(s.len, s.kernel).ok_or(Error::EmptyOutput {
        op: "conv_transpose1d",
        padded: s.len,
        kernel: s.kernel,
    })?;
    check_bias("conv_transpose1d", b, s.c_out)?;
    let y = kernels::conv_transpose1d(x.data(), w.data(), b.map(|b| b.data()), &s, &geom);
    Tensor::new(vec![s.c_out, s.out_len], y)
}

fn check_bias<T: Real>(op: &'static str, b: Option<&Tensor<T>>, c_out: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [c_out] => Err(Error::Dimension {
            op,
            lhs: vec![c_out],
            rhs: b.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

pub fn flip_time<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let l = *x.shape().last().unwrap_or(&1);
    if l > 0 {
        out.data_mut().chunks_mut(l).for_each(|r| r.reverse());
    }
    out
}

pub fn rows<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (r, l) = x.dims2()?;
    if start >= end || end > r {
        return Err(Error::Shape(format!("rows {start}..{end} out of range for {r} rows")));
    }
    Tensor::new(vec![end - start, l], x.data()[start * l..end * l].to_vec())
}
