//! Chunked inference for causal models.
//!
//! Every layer keeps just enough history to continue where the previous
//! chunk stopped: strided convolutions keep their last `K - stride` inputs,
//! Mamba blocks their depthwise-conv tail and scan state, and transposed
//! convolutions the `K - stride` output positions that later inputs still
//! add to. Transposed convolutions therefore emit only finalized samples and
//! the stream lags the input; [`SeparatorModel::flush_stream`] emits the
//! remainder, after which the concatenated output equals the batch output.

use crate::error::{Error, Result};
use crate::mamba::StackState;
use crate::numerics::exec;
use crate::numerics::{ConvGeom, ConvTGeom, Real, Tensor, UnaryOp};

use super::net::{ConvParams, SeparatorModel};

const MAGIC: &[u8; 5] = b"SEPS1";

/// Overlap-add carry of a streamed transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct UpState<T> {
    /// Partial sums for the next `K - stride` output positions.
    pub pending: Tensor<T>,
    /// Inputs consumed so far.
    pub n_in: u64,
}

/// Complete recurrent carry of a streamed separator.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<T> {
    fingerprint: u64,
    stem_tail: Tensor<T>,
    enc: Vec<StackState<T>>,
    down_tail: Vec<Tensor<T>>,
    mid: StackState<T>,
    up: Vec<UpState<T>>,
    /// Projected skip activations not yet matched by decoder output.
    skip_queue: Vec<Tensor<T>>,
    dec: Vec<StackState<T>>,
    head: UpState<T>,
    finished: bool,
}

fn relu<T: Real>(t: Tensor<T>) -> Tensor<T> {
    t.map(|v| UnaryOp::Relu.apply(v))
}

fn empty<T: Real>(rows: usize) -> Tensor<T> {
    Tensor::zeros(vec![rows, 0])
}

impl<T: Real> StreamState<T> {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.stem_tail];
        fn stack<'a, T>(s: &'a mut StackState<T>, out: &mut Vec<&'a mut Tensor<T>>) {
            for b in s.forward_branch.iter_mut().chain(s.second_branch.iter_mut()) {
                out.push(&mut b.conv_tail);
                out.push(&mut b.h);
            }
        }
        for (e, d) in self.enc.iter_mut().zip(self.down_tail.iter_mut()) {
            stack(e, &mut out);
            out.push(d);
        }
        stack(&mut self.mid, &mut out);
        for ((u, q), d) in self
            .up
            .iter_mut()
            .zip(self.skip_queue.iter_mut())
            .zip(self.dec.iter_mut())
        {
            out.push(&mut u.pending);
            out.push(q);
            stack(d, &mut out);
        }
        out.push(&mut self.head.pending);
        out
    }

    fn counters_mut(&mut self) -> Vec<&mut u64> {
        let mut v: Vec<&mut u64> = self.up.iter_mut().map(|u| &mut u.n_in).collect();
        v.push(&mut self.head.n_in);
        v
    }

    /// Serializes the carry to a compact little-endian byte string.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut me = self.clone();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.push(T::PRECISION.size_bytes() as u8);
        out.push(self.finished as u8);
        for c in me.counters_mut() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for t in me.tensors_mut() {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.extend_le_bytes(&mut out);
            }
        }
        out
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Stream("truncated stream state".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Real> SeparatorModel<T> {
    /// Fresh carry for streaming inference. Only causal models stream.
    pub fn init_stream(&self) -> Result<StreamState<T>> {
        let cfg = self.config();
        if !cfg.causal {
            return Err(Error::Stream("streaming needs a causal configuration".into()));
        }
        let tail = cfg.kernel_size - cfg.stride;
        let depth = cfg.depth();
        Ok(StreamState {
            fingerprint: cfg.fingerprint(),
            stem_tail: Tensor::zeros(vec![1, tail]),
            enc: self.net.enc.iter().map(|s| s.init_state()).collect(),
            down_tail: (0..depth).map(|k| Tensor::zeros(vec![cfg.width(k), tail])).collect(),
            mid: self.net.mid.init_state(),
            up: (0..depth)
                .map(|k| UpState {
                    pending: Tensor::zeros(vec![cfg.width(k), tail]),
                    n_in: 0,
                })
                .collect(),
            skip_queue: (0..depth).map(|k| empty(cfg.width(k))).collect(),
            dec: self.net.dec.iter().map(|s| s.init_state()).collect(),
            head: UpState {
                pending: Tensor::zeros(vec![cfg.n_sources, tail]),
                n_in: 0,
            },
            finished: false,
        })
    }

    /// Restores a carry produced by [`StreamState::to_bytes`] for this model.
    pub fn stream_from_bytes(&self, bytes: &[u8]) -> Result<StreamState<T>> {
        let mut st = self.init_stream()?;
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Stream("not a stream state".into()));
        }
        let fp = r.u64()?;
        if fp != st.fingerprint {
            return Err(Error::Stream("stream state belongs to a different configuration".into()));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::PRECISION.size_bytes() {
            return Err(Error::Stream(format!(
                "stream state precision ({width} bytes) differs from model ({})",
                T::PRECISION.name()
            )));
        }
        st.finished = r.take(1)?[0] != 0;
        for c in st.counters_mut() {
            *c = r.u64()?;
        }
        for t in st.tensors_mut() {
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if rank != 2 || shape[0] != t.shape()[0] {
                return Err(Error::Stream(format!("unexpected tensor shape {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let data = raw.chunks_exact(width).map(T::from_le_slice).collect();
            *t = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Stream("trailing bytes after stream state".into()));
        }
        Ok(st)
    }

    fn conv_stream(&self, p: ConvParams, x: &Tensor<T>, tail: &mut Tensor<T>) -> Result<Tensor<T>> {
        let keep = tail.shape()[1];
        let ext = Tensor::concat_time(&[tail.clone(), x.clone()])?;
        *tail = ext.time_slice(ext.shape()[1] - keep, keep)?;
        let geom = ConvGeom {
            stride: self.config().stride,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        };
        exec::conv1d(&ext, self.params.get(p.w), Some(self.params.get(p.b)), geom)
    }

    fn up_stream(&self, p: ConvParams, x: &Tensor<T>, st: &mut UpState<T>, flush: bool) -> Result<Tensor<T>> {
        let cfg = self.config();
        let (s, crop) = (cfg.stride, cfg.pad_left());
        let tail = cfg.kernel_size - s;
        let c_out = st.pending.shape()[0];
        let m = x.shape()[1];
        let start = st.n_in * s as u64; // full position of local index 0
        let mut ready = if m > 0 {
            let geom = ConvTGeom {
                stride: s,
                crop_left: 0,
                crop_right: 0,
            };
            let mut y = exec::conv_transpose1d(x, self.params.get(p.w), None, geom)?;
            let local = y.shape()[1];
            for o in 0..c_out {
                let row = y.row_mut(o);
                for (v, &q) in row.iter_mut().zip(st.pending.row(o)) {
                    *v += q;
                }
            }
            st.pending = y.time_slice(m * s, tail)?;
            debug_assert_eq!(local, m * s + tail);
            y.time_slice(0, m * s)?
        } else {
            empty(c_out)
        };
        st.n_in += m as u64;
        if flush {
            ready = Tensor::concat_time(&[ready, st.pending.clone()])?;
            st.pending = Tensor::zeros(vec![c_out, tail]);
        }
        // drop positions removed by the left crop
        let skip = (crop as u64).saturating_sub(start).min(ready.shape()[1] as u64) as usize;
        let mut out = ready.time_slice(skip, ready.shape()[1] - skip)?;
        let bias = self.params.get(p.b);
        for o in 0..c_out {
            let b = bias.data()[o];
            out.row_mut(o).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    fn run_stream(&self, frame: Option<&Tensor<T>>, st: &mut StreamState<T>) -> Result<Tensor<T>> {
        if st.fingerprint != self.config().fingerprint() {
            return Err(Error::Stream("stream state belongs to a different configuration".into()));
        }
        if st.finished {
            return Err(Error::Stream("stream already flushed".into()));
        }
        let net = &self.net;
        let depth = net.cfg.depth();
        let one = ConvGeom {
            stride: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        };
        let mut h = match frame {
            Some(x) => {
                let mut h = relu(self.conv_stream(net.stem, x, &mut st.stem_tail)?);
                for lvl in 0..depth {
                    h = net.enc[lvl].forward_stream(&self.params, &h, &mut st.enc[lvl])?;
                    let sp = net.skip[lvl];
                    let proj = exec::conv1d(&h, self.params.get(sp.w), Some(self.params.get(sp.b)), one)?;
                    st.skip_queue[lvl] = Tensor::concat_time(&[st.skip_queue[lvl].clone(), proj])?;
                    h = relu(self.conv_stream(net.down[lvl], &h, &mut st.down_tail[lvl])?);
                }
                net.mid.forward_stream(&self.params, &h, &mut st.mid)?
            }
            None => empty(net.cfg.width(depth)),
        };
        let flush = frame.is_none();
        for lvl in (0..depth).rev() {
            let u = relu(self.up_stream(net.up[lvl], &h, &mut st.up[lvl], flush)?);
            let n = u.shape()[1];
            let q = &st.skip_queue[lvl];
            if n > q.shape()[1] {
                return Err(Error::Stream("decoder ran ahead of the skip queue".into()));
            }
            let s = q.time_slice(0, n)?;
            st.skip_queue[lvl] = q.time_slice(n, q.shape()[1] - n)?;
            h = if n == 0 {
                u
            } else {
                let sum = exec::Exec::<T>::add(&mut exec::Eager, &u, &s)?;
                net.dec[lvl].forward_stream(&self.params, &sum, &mut st.dec[lvl])?
            };
        }
        let y = self.up_stream(net.head, &h, &mut st.head, flush)?;
        st.finished = flush;
        Ok(y)
    }

    /// Feeds one `[1 x m]` frame, `m` a multiple of
    /// [`frame_multiple`](super::SeparatorConfig::frame_multiple), and
    /// returns the newly finalized `[n_sources x m']` output samples.
    pub fn forward_streaming(&self, frame: &Tensor<T>, st: &mut StreamState<T>) -> Result<Tensor<T>> {
        let cfg = self.config();
        let (rows, m) = frame.dims2()?;
        if rows != 1 || m % cfg.frame_multiple() != 0 {
            return Err(Error::Stream(format!(
                "frames must be [1 x m] with m a multiple of {}, got {:?}",
                cfg.frame_multiple(),
                frame.shape()
            )));
        }
        if m == 0 {
            return Ok(empty(cfg.n_sources));
        }
        self.run_stream(Some(frame), st)
    }

    /// Emits the samples still held back by the transposed convolutions and
    /// closes the stream.
    pub fn flush_stream(&self, st: &mut StreamState<T>) -> Result<Tensor<T>> {
        self.run_stream(None, st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::SeparatorConfig;

    fn causal_toy() -> SeparatorModel<f64> {
        let cfg = SeparatorConfig {
            causal: true,
            ..SeparatorConfig::toy()
        };
        SeparatorModel::build(&cfg, 5).unwrap()
    }

    fn signal(n: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, n], |i| (i as f64 * 0.21).sin() + 0.3 * (i as f64 * 0.057).cos())
    }

    #[test]
    fn streamed_then_flushed_equals_batch() {
        let model = causal_toy();
        let x = signal(96);
        let batch = model.forward(&x).unwrap();
        let mut st = model.init_stream().unwrap();
        let mut parts = Vec::new();
        for (s, l) in [(0, 8), (8, 40), (48, 48)] {
            parts.push(model.forward_streaming(&x.time_slice(s, l).unwrap(), &mut st).unwrap());
        }
        parts.push(model.flush_stream(&mut st).unwrap());
        let out = Tensor::concat_time(&parts).unwrap();
        assert_eq!(out.shape(), batch.shape());
        assert!(out.max_abs_diff(&batch) < 1e-12);
    }

    #[test]
    fn serialized_carry_resumes_identically() {
        let model = causal_toy();
        let x = signal(64);
        let mut a = model.init_stream().unwrap();
        model.forward_streaming(&x.time_slice(0, 32).unwrap(), &mut a).unwrap();
        let mut b = model.stream_from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let ya = model.forward_streaming(&x.time_slice(32, 32).unwrap(), &mut a).unwrap();
        let yb = model.forward_streaming(&x.time_slice(32, 32).unwrap(), &mut b).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn rejects_foreign_carry_and_non_causal_models() {
        let model = causal_toy();
        let other = SeparatorModel::<f64>::build(
            &SeparatorConfig {
                causal: true,
                base_dim: 4,
                ..SeparatorConfig::toy()
            },
            5,
        )
        .unwrap();
        let bytes = other.init_stream().unwrap().to_bytes();
        assert!(matches!(model.stream_from_bytes(&bytes), Err(Error::Stream(_))));
        let bidir = SeparatorModel::<f64>::build(&SeparatorConfig::toy(), 5).unwrap();
        assert!(bidir.init_stream().is_err());
    }

    #[test]
    fn zero_frame_gives_zero_output() {
        let model = causal_toy();
        let mut st = model.init_stream().unwrap();
        let y = model.forward_streaming(&Tensor::zeros(vec![1, 16]), &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
