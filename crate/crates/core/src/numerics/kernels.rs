//! Forward and backward kernels on raw slices. All arrays are row-major;
//! activations are `[channels x time]`.

use rayon::prelude::*;

use super::tensor::Real;

const PAR_MIN_WORK: usize = 1 << 14;

/// Runs `f(row_index, row)` over consecutive rows of `out`, in parallel when
/// the global pool has more than one thread. Each row is produced by exactly
/// one call, so results do not depend on the thread count.
pub(crate) fn for_each_row<T: Send>(
    out: &mut [T],
    row_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if row_len == 0 || out.is_empty() {
        return;
    }
    if rayon::current_num_threads() > 1 && out.len() >= PAR_MIN_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `c[m x n] = a[m x k] * b[k x n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_row(&mut c, n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (kk, &av) in ai.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], row);
            }
        }
    });
    c
}

/// Gradient of `a` for `c = a b`: `gc * b^T`.
pub fn matmul_grad_a<T: Real>(gc: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut ga = vec![T::zero(); m * k];
    for_each_row(&mut ga, k, |i, row| {
        let gi = &gc[i * n..(i + 1) * n];
        for (kk, g) in row.iter_mut().enumerate() {
            *g = dot(gi, &b[kk * n..(kk + 1) * n]);
        }
    });
    ga
}

/// Gradient of `b` for `c = a b`: `a^T * gc`.
pub fn matmul_grad_b<T: Real>(gc: &[T], a: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); k * n];
    for_each_row(&mut gb, n, |kk, row| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av != T::zero() {
                axpy(av, &gc[i * n..(i + 1) * n], row);
            }
        }
    });
    gb
}

/// Geometry of a 1-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        (padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

/// Range of output indices `j` for which `j*stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    len: usize,
    out_len: usize,
) -> std::ops::Range<usize> {
    // need j*stride + k >= pad  and  j*stride + k < len + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi_excl.max(lo)
}

pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
    pub out_len: usize,
}

/// `w` is `[c_out x c_in/groups x kernel]`.
pub fn conv1d<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
    g: &ConvGeom,
) -> Vec<T> {
    let cig = s.c_in / g.groups;
    let cog = s.c_out / g.groups;
    let mut y = vec![T::zero(); s.c_out * s.out_len];
    for_each_row(&mut y, s.out_len, |o, row| {
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
        let grp = o / cog;
        for ci in 0..cig {
            let c = grp * cig + ci;
            let xc = &x[c * s.len..(c + 1) * s.len];
            let wk = &w[(o * cig + ci) * s.kernel..(o * cig + ci + 1) * s.kernel];
            for (k, &wv) in wk.iter().enumerate() {
                let r = valid_range(k, g.pad_left, g.stride, s.len, s.out_len);
                if r.is_empty() {
                    continue;
                }
                let base = r.start * g.stride + k - g.pad_left;
                if g.stride == 1 {
                    axpy(wv, &xc[base..base + r.len()], &mut row[r]);
                } else {
                    for (n, yj) in row[r].iter_mut().enumerate() {
                        *yj += wv * xc[base + n * g.stride];
                    }
                }
            }
        }
    });
    y
}

pub fn conv1d_grad_x<T: Real>(gy: &[T], w: &[T], s: &ConvShape, g: &ConvGeom) -> Vec<T> {
    let cig = s.c_in / g.groups;
    let cog = s.c_out / g.groups;
    let mut gx = vec![T::zero(); s.c_in * s.len];
    for_each_row(&mut gx, s.len, |c, row| {
        let grp = c / cig;
        let ci = c % cig;
        for oo in 0..cog {
            let o = grp * cog + oo;
            let gyo = &gy[o * s.out_len..(o + 1) * s.out_len];
            let wk = &w[(o * cig + ci) * s.kernel..(o * cig + ci + 1) * s.kernel];
            for (k, &wv) in wk.iter().enumerate() {
                let r = valid_range(k, g.pad_left, g.stride, s.len, s.out_len);
                if r.is_empty() {
                    continue;
                }
                let base = r.start * g.stride + k - g.pad_left;
                if g.stride == 1 {
                    axpy(wv, &gyo[r.clone()], &mut row[base..base + r.len()]);
                } else {
                    for (n, &gj) in gyo[r].iter().enumerate() {
                        row[base + n * g.stride] += wv * gj;
                    }
                }
            }
        }
    });
    gx
}

pub fn conv1d_grad_w<T: Real>(gy: &[T], x: &[T], s: &ConvShape, g: &ConvGeom) -> Vec<T> {
    let cig = s.c_in / g.groups;
    let cog = s.c_out / g.groups;
    let mut gw = vec![T::zero(); s.c_out * cig * s.kernel];
    for_each_row(&mut gw, cig * s.kernel, |o, row| {
        let grp = o / cog;
        let gyo = &gy[o * s.out_len..(o + 1) * s.out_len];
        for ci in 0..cig {
            let c = grp * cig + ci;
            let xc = &x[c * s.len..(c + 1) * s.len];
            for k in 0..s.kernel {
                let r = valid_range(k, g.pad_left, g.stride, s.len, s.out_len);
                if r.is_empty() {
                    continue;
                }
                let base = r.start * g.stride + k - g.pad_left;
                let acc = if g.stride == 1 {
                    dot(&gyo[r.clone()], &xc[base..base + r.len()])
                } else {
                    let mut acc = T::zero();
                    for (n, &gj) in gyo[r].iter().enumerate() {
                        acc += gj * xc[base + n * g.stride];
                    }
                    acc
                };
                row[ci * s.kernel + k] = acc;
            }
        }
    });
    gw
}

/// Sum over time of each channel row.
pub fn row_sums<T: Real>(g: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| g[r * cols..(r + 1) * cols].iter().copied().sum())
        .collect()
}

/// Geometry of a transposed convolution: the full-length output
/// `(len - 1) * stride + kernel` is cropped by `crop_left` / `crop_right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub stride: usize,
    pub crop_left: usize,
    pub crop_right: usize,
}

impl ConvTGeom {
    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let full = (len.checked_sub(1)?) * self.stride + kernel;
        full.checked_sub(self.crop_left + self.crop_right)
            .filter(|&n| n > 0)
    }
}

/// `w` is `[c_in x c_out x kernel]`; `s.len` is the input length.
pub fn conv_transpose1d<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
    g: &ConvTGeom,
) -> Vec<T> {
    let mut y = vec![T::zero(); s.c_out * s.out_len];
    for_each_row(&mut y, s.out_len, |o, row| {
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..s.c_in {
            let xc = &x[c * s.len..(c + 1) * s.len];
            let wk = &w[(c * s.c_out + o) * s.kernel..(c * s.c_out + o + 1) * s.kernel];
            for (k, &wv) in wk.iter().enumerate() {
                // output n = j*stride + k - crop_left
                let r = valid_range(k, g.crop_left, g.stride, s.out_len, s.len);
                for j in r {
                    row[j * g.stride + k - g.crop_left] += wv * xc[j];
                }
            }
        }
    });
    y
}

pub fn conv_transpose1d_grad_x<T: Real>(
    gy: &[T],
    w: &[T],
    s: &ConvShape,
    g: &ConvTGeom,
) -> Vec<T> {
    let mut gx = vec![T::zero(); s.c_in * s.len];
    for_each_row(&mut gx, s.len, |c, row| {
        for o in 0..s.c_out {
            let gyo = &gy[o * s.out_len..(o + 1) * s.out_len];
            let wk = &w[(c * s.c_out + o) * s.kernel..(c * s.c_out + o + 1) * s.kernel];
            for (k, &wv) in wk.iter().enumerate() {
                let r = valid_range(k, g.crop_left, g.stride, s.out_len, s.len);
                for j in r {
                    row[j] += wv * gyo[j * g.stride + k - g.crop_left];
                }
            }
        }
    });
    gx
}

pub fn conv_transpose1d_grad_w<T: Real>(
    gy: &[T],
    x: &[T],
    s: &ConvShape,
    g: &ConvTGeom,
) -> Vec<T> {
    let mut gw = vec![T::zero(); s.c_in * s.c_out * s.kernel];
    for_each_row(&mut gw, s.c_out * s.kernel, |c, row| {
        let xc = &x[c * s.len..(c + 1) * s.len];
        for o in 0..s.c_out {
            let gyo = &gy[o * s.out_len..(o + 1) * s.out_len];
            for k in 0..s.kernel {
                let r = valid_range(k, g.crop_left, g.stride, s.out_len, s.len);
                let mut acc = T::zero();
                for j in r {
                    acc += xc[j] * gyo[j * g.stride + k - g.crop_left];
                }
                row[o * s.kernel + k] = acc;
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for pad in 0..6 {
                for k in 0..8 {
                    for len in 1..10 {
                        let out_len = 12;
                        let r = valid_range(k, pad, stride, len, out_len);
                        for j in 0..out_len {
                            let idx = (j * stride + k) as isize - pad as isize;
                            let ok = idx >= 0 && (idx as usize) < len;
                            assert_eq!(r.contains(&j), ok, "s{stride} p{pad} k{k} len{len} j{j}");
                        }
                    }
                }
            }
        }
    }
}
