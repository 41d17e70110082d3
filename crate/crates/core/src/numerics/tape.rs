//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough context to
//! apply its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse once. A tape lives for exactly one training step; a fresh tape is
//! the graph reset.

use std::collections::HashMap;

use super::exec::{
    self, binary_values, broadcast_shape, conv_shape, eager_rms_norm, eager_time_window,
    scan_dims, Exec, ScanOperands, UnaryOp,
};
use super::kernels::{self, ConvGeom, ConvTGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{self, ScanAlgorithm, ScanInputs, ZeroOrderHold};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, UnaryOp),
    AddBias(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTGeom,
    },
    FlipTime(Var),
    Rows {
        x: Var,
        start: usize,
    },
    TimeWindow {
        x: Var,
        offset: isize,
    },
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        states: Vec<T>,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    NegSiSdr {
        est: Var,
        reference: Vec<T>,
        eps: f64,
    },
    ClampMin {
        x: Var,
        min: T,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording backend. Parameters are registered once per tape as leaves.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf tensor; gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The leaf registered for `id`, if the forward pass used it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Bytes held by non-leaf node values plus saved scan states and
    /// normalization statistics. Leaves (parameters, inputs) are excluded.
    pub fn activation_bytes(&self) -> usize {
        let sz = T::PRECISION.size_bytes();
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| {
                let aux = match &n.op {
                    Op::Scan { states, .. } => states.len(),
                    Op::RmsNorm { inv_rms, .. } => inv_rms.len(),
                    Op::NegSiSdr { reference, .. } => reference.len(),
                    _ => 0,
                };
                (n.value.numel() + aux) * sz
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.val(a).shape(), self.val(b).shape(), "sub")?;
        let data = binary_values(self.val(a).data(), self.val(b).data(), |x, y| x - y);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.val(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let v = self.val(x).map(|v| v.max(min));
        self.push(v, Op::ClampMin { x, min }, &[x])
    }

    /// Negative scale-invariant SDR (dB) of `est` against a constant reference.
    pub fn neg_si_sdr(&mut self, est: Var, reference: &[T], eps: f64) -> Result<Var> {
        let e = self.val(est);
        if e.numel() != reference.len() {
            return Err(Error::Dimension {
                op: "si_sdr",
                lhs: e.shape().to_vec(),
                rhs: vec![reference.len()],
            });
        }
        let v = -crate::objective::si_sdr_raw(e.data(), reference, eps);
        Ok(self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::NegSiSdr {
                est,
                reference: reference.to_vec(),
                eps,
            },
            &[est],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.val(loss).shape();
        if self.val(loss).numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape.to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Keep gradients only where requested.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            } else if grads[i].is_none() && matches!(n.op, Op::Leaf) {
                grads[i] = Some(Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Collects parameter gradients in store order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .get(&id)
                    .and_then(|v| grads.take(*v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    fn apply_vjp(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2()?;
                let n = self.val(*b).dims2()?.1;
                if self.nodes[a.0].needs_grad {
                    acc(*a, kernels::matmul_grad_a(gd, self.val(*b).data(), m, k, n));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, kernels::matmul_grad_b(gd, self.val(*a).data(), m, k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, reduce_broadcast(gd, self.val(*a).numel(), T::one()));
                acc(*b, reduce_broadcast(gd, self.val(*b).numel(), sign));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.nodes[a.0].needs_grad {
                    let full = binary_values(gd, bv, |g, y| g * y);
                    acc(*a, reduce_broadcast(&full, av.len(), T::one()));
                }
                if self.nodes[b.0].needs_grad {
                    let full = binary_values(gd, av, |g, x| g * x);
                    acc(*b, reduce_broadcast(&full, bv.len(), T::one()));
                }
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|&v| v * *c).collect()),
            Op::Unary(x, op) => {
                let xv = self.val(*x).data();
                let yv = node.value.data();
                acc(
                    *x,
                    gd.iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(&g, (&xi, &yi))| g * op.derivative(xi, yi))
                        .collect(),
                );
            }
            Op::AddBias(x, b) => {
                let (c, l) = node.value.dims2()?;
                acc(*x, gd.to_vec());
                acc(*b, kernels::row_sums(gd, c, l));
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut s = conv_shape(
                    "conv1d",
                    self.val(*x).shape(),
                    self.val(*w).shape(),
                    false,
                    geom.groups,
                )?;
                s.out_len = node.value.shape()[1];
                if self.nodes[x.0].needs_grad {
                    acc(*x, kernels::conv1d_grad_x(gd, self.val(*w).data(), &s, geom));
                }
                if self.nodes[w.0].needs_grad {
                    acc(*w, kernels::conv1d_grad_w(gd, self.val(*x).data(), &s, geom));
                }
                if let Some(b) = b {
                    acc(*b, kernels::row_sums(gd, s.c_out, s.out_len));
                }
            }
            Op::ConvT1d { x, w, b, geom } => {
                let mut s = conv_shape(
                    "conv_transpose1d",
                    self.val(*x).shape(),
                    self.val(*w).shape(),
                    true,
                    1,
                )?;
                s.out_len = node.value.shape()[1];
                if self.nodes[x.0].needs_grad {
                    acc(
                        *x,
                        kernels::conv_transpose1d_grad_x(gd, self.val(*w).data(), &s, geom),
                    );
                }
                if self.nodes[w.0].needs_grad {
                    acc(
                        *w,
                        kernels::conv_transpose1d_grad_w(gd, self.val(*x).data(), &s, geom),
                    );
                }
                if let Some(b) = b {
                    acc(*b, kernels::row_sums(gd, s.c_out, s.out_len));
                }
            }
            Op::FlipTime(x) => acc(*x, exec::flip_time(g).into_data()),
            Op::Rows { x, start } => {
                let mut full = vec![T::zero(); self.val(*x).numel()];
                let l = node.value.shape()[1];
                full[start * l..start * l + gd.len()].copy_from_slice(gd);
                acc(*x, full);
            }
            Op::TimeWindow { x, offset } => {
                let xl = self.val(*x).shape()[1];
                acc(*x, eager_time_window(g, -offset, xl)?.into_data());
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let (ch, n, len) = scan_dims(
                    self.val(*u).shape(),
                    self.val(*delta).shape(),
                    self.val(*a).shape(),
                    self.val(*b).shape(),
                    self.val(*c).shape(),
                    d.map(|d| self.val(d).shape()),
                )?;
                let inputs = ScanInputs {
                    u: self.val(*u).data(),
                    delta: self.val(*delta).data(),
                    a: self.val(*a).data(),
                    b: self.val(*b).data(),
                    c: self.val(*c).data(),
                    d: d.map(|d| self.val(d).data()),
                    channels: ch,
                    n_state: n,
                    len,
                };
                let sg = ssm::scan_backward::<T, ZeroOrderHold>(&inputs, states, gd);
                acc(*u, sg.u);
                acc(*delta, sg.delta);
                acc(*a, sg.a);
                acc(*b, sg.b);
                acc(*c, sg.c);
                if let (Some(d), Some(gdv)) = (d, sg.d) {
                    acc(*d, gdv);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (c, l) = node.value.dims2()?;
                let xv = self.val(*x).data();
                let wv = self.val(*w).data();
                let mut gx = vec![T::zero(); c * l];
                let mut gw = vec![T::zero(); c];
                let cf = T::from_f64(c as f64);
                for t in 0..l {
                    let r = inv_rms[t];
                    // y_c = x_c r w_c ; dr/dx_c = -r^3 x_c / C
                    let mut s = T::zero();
                    for ch in 0..c {
                        s += gd[ch * l + t] * wv[ch] * xv[ch * l + t];
                    }
                    for ch in 0..c {
                        let i = ch * l + t;
                        gx[i] = gd[i] * wv[ch] * r - r * r * r * xv[i] * s / cf;
                        gw[ch] += gd[i] * xv[i] * r;
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::NegSiSdr {
                est,
                reference,
                eps,
            } => {
                let grad = crate::objective::si_sdr_grad_raw(self.val(*est).data(), reference, *eps);
                let scale = -gd[0].as_f64();
                acc(*est, grad.iter().map(|v| T::from_f64(v * scale)).collect());
            }
            Op::ClampMin { x, min } => {
                let xv = self.val(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > *min { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.val(*x).numel();
                acc(*x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

/// Sums a broadcast gradient of `full.len()` values back to `n` values.
fn reduce_broadcast<T: Real>(full: &[T], n: usize, sign: T) -> Vec<T> {
    if full.len() == n {
        return full.iter().map(|&v| v * sign).collect();
    }
    let mut out = vec![T::zero(); n];
    for (i, &v) in full.iter().enumerate() {
        out[i % n] += v;
    }
    out.iter_mut().for_each(|v| *v *= sign);
    out
}

impl<T: Real> Exec<T> for Tape<T> {
    type V = Var;

    fn shape<'a>(&'a self, v: &'a Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = exec::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let shape = broadcast_shape(self.val(*a).shape(), self.val(*b).shape(), "add")?;
        let data = binary_values(self.val(*a).data(), self.val(*b).data(), |x, y| x + y);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let shape = broadcast_shape(self.val(*a).shape(), self.val(*b).shape(), "mul")?;
        let data = binary_values(self.val(*a).data(), self.val(*b).data(), |x, y| x * y);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn unary(&mut self, x: &Var, op: UnaryOp) -> Var {
        let v = self.val(*x).map(|v| op.apply(v));
        self.push(v, Op::Unary(*x, op), &[*x])
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let v = exec::add_bias(self.val(*x), self.val(*b))?;
        Ok(self.push(v, Op::AddBias(*x, *b), &[*x, *b]))
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let v = exec::conv1d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), geom)?;
        let mut parents = vec![*x, *w];
        parents.extend(b.copied());
        Ok(self.push(
            v,
            Op::Conv1d {
                x: *x,
                w: *w,
                b: b.copied(),
                geom,
            },
            &parents,
        ))
    }

    fn conv_transpose1d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        geom: ConvTGeom,
    ) -> Result<Var> {
        let v = exec::conv_transpose1d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), geom)?;
        let mut parents = vec![*x, *w];
        parents.extend(b.copied());
        Ok(self.push(
            v,
            Op::ConvT1d {
                x: *x,
                w: *w,
                b: b.copied(),
                geom,
            },
            &parents,
        ))
    }

    fn flip_time(&mut self, x: &Var) -> Var {
        let v = exec::flip_time(self.val(*x));
        self.push(v, Op::FlipTime(*x), &[*x])
    }

    fn rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let v = exec::rows(self.val(*x), start, end)?;
        Ok(self.push(v, Op::Rows { x: *x, start }, &[*x]))
    }

    fn time_window(&mut self, x: &Var, offset: isize, len: usize) -> Result<Var> {
        let v = eager_time_window(self.val(*x), offset, len)?;
        Ok(self.push(v, Op::TimeWindow { x: *x, offset }, &[*x]))
    }

    fn selective_scan(&mut self, ops: ScanOperands<'_, Var>, algo: ScanAlgorithm) -> Result<Var> {
        let (ch, n, len) = scan_dims(
            self.val(*ops.u).shape(),
            self.val(*ops.delta).shape(),
            self.val(*ops.a).shape(),
            self.val(*ops.b).shape(),
            self.val(*ops.c).shape(),
            ops.d.map(|d| self.val(*d).shape()),
        )?;
        let inputs = ScanInputs {
            u: self.val(*ops.u).data(),
            delta: self.val(*ops.delta).data(),
            a: self.val(*ops.a).data(),
            b: self.val(*ops.b).data(),
            c: self.val(*ops.c).data(),
            d: ops.d.map(|d| self.val(*d).data()),
            channels: ch,
            n_state: n,
            len,
        };
        let out = ssm::run_scan::<T, ZeroOrderHold>(&inputs, None, true, algo);
        let y = Tensor::new(vec![ch, len], out.y)?;
        let mut parents = vec![*ops.u, *ops.delta, *ops.a, *ops.b, *ops.c];
        parents.extend(ops.d.copied());
        Ok(self.push(
            y,
            Op::Scan {
                u: *ops.u,
                delta: *ops.delta,
                a: *ops.a,
                b: *ops.b,
                c: *ops.c,
                d: ops.d.copied(),
                states: out.states.unwrap_or_default(),
            },
            &parents,
        ))
    }

    fn rms_norm(&mut self, x: &Var, w: &Var, eps: f64) -> Result<Var> {
        let (v, inv_rms) = eager_rms_norm(self.val(*x), self.val(*w), eps)?;
        Ok(self.push(
            v,
            Op::RmsNorm {
                x: *x,
                w: *w,
                inv_rms,
            },
            &[*x, *w],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![3], vec![0.3, 0.1, 2.0]).unwrap(), true);
        let p = tape.mul(&w, &x).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn grad_of_half_square_is_weight() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.5]).unwrap(), true);
        let sq = tape.mul(&w, &w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, -1.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2]), true);
        let y = tape.relu(&w);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::full(vec![2], 1.0), true);
        let unused = tape.leaf(Tensor::full(vec![3], 1.0), true);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }
}
