//! Scale-invariant SDR, plain SDR and utterance-level permutation-invariant
//! loss.
//!
//! All ratios use `eps = 1e-8` in numerator and denominator. Accumulation is
//! done in `f64` regardless of the tensor precision.

use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::numerics::{Exec, Real, Tape, Tensor, Var};

pub const EPS: f64 = 1e-8;
/// Loss threshold in dB: per-source terms never go below `-CLAMP_DB`.
pub const CLAMP_DB: f64 = 30.0;

/// A metric in dB, remembering whether it hit the clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub clamped: bool,
}

impl MetricValue {
    pub fn clamp_max(value: f64, limit: f64) -> Self {
        if value >= limit {
            Self {
                value: limit,
                clamped: true,
            }
        } else {
            Self {
                value,
                clamped: false,
            }
        }
    }
}

struct Parts {
    alpha: f64,
    ref_energy: f64,
    p_s: f64,
    p_n: f64,
}

fn parts<T: Real>(est: &[T], reference: &[T], eps: f64) -> Parts {
    let mut er = 0.0;
    let mut rr = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let (e, r) = (e.as_f64(), r.as_f64());
        er += e * r;
        rr += r * r;
    }
    let alpha = er / (rr + eps);
    let mut p_n = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let d = alpha * r.as_f64() - e.as_f64();
        p_n += d * d;
    }
    Parts {
        alpha,
        ref_energy: rr,
        p_s: alpha * alpha * rr,
        p_n,
    }
}

/// SI-SDR in dB without input validation.
pub fn si_sdr_raw<T: Real>(est: &[T], reference: &[T], eps: f64) -> f64 {
    let p = parts(est, reference, eps);
    10.0 * ((p.p_s + eps) / (p.p_n + eps)).log10()
}

/// Gradient of [`si_sdr_raw`] with respect to the estimate.
pub fn si_sdr_grad_raw<T: Real>(est: &[T], reference: &[T], eps: f64) -> Vec<f64> {
    let p = parts(est, reference, eps);
    let r_norm = p.ref_energy + eps;
    let ks = 1.0 / (p.p_s + eps);
    let kn = 1.0 / (p.p_n + eps);
    let scale = 10.0 / LN_10;
    est.iter()
        .zip(reference)
        .map(|(e, r)| {
            let (e, r) = (e.as_f64(), r.as_f64());
            let dps = 2.0 * p.alpha * p.ref_energy * r / r_norm;
            let dpn = -2.0 * p.alpha * eps * r / r_norm - 2.0 * (p.alpha * r - e);
            scale * (dps * ks - dpn * kn)
        })
        .collect()
}

fn check_pair<T: Real>(est: &[T], reference: &[T]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Dimension {
            op: "si_sdr",
            lhs: vec![est.len()],
            rhs: vec![reference.len()],
        });
    }
    if reference.iter().all(|v| *v == T::zero()) {
        return Err(Error::Domain("reference signal is identically zero".into()));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr<T: Real>(est: &[T], reference: &[T], eps: f64) -> Result<f64> {
    check_pair(est, reference)?;
    Ok(si_sdr_raw(est, reference, eps))
}

/// Plain (non-scale-invariant) SDR in dB: the projection gain is fixed to 1.
pub fn sdr<T: Real>(est: &[T], reference: &[T], eps: f64) -> Result<f64> {
    check_pair(est, reference)?;
    let (mut s, mut n) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let (e, r) = (e.as_f64(), r.as_f64());
        s += r * r;
        n += (r - e) * (r - e);
    }
    Ok(10.0 * ((s + eps) / (n + eps)).log10())
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// Result of a permutation-invariant evaluation. `perm[i]` is the estimate
/// assigned to reference `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Upit {
    pub loss: f64,
    pub perm: Vec<usize>,
    /// Per-reference SI-SDR under `perm`, clamped at `clamp_db`.
    pub terms: Vec<MetricValue>,
}

fn check_sources<T: Real>(est: &Tensor<T>, refs: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, l) = refs.dims2()?;
    let (ne, le) = est.dims2()?;
    if (ne, le) != (n, l) || n == 0 {
        return Err(Error::Dimension {
            op: "upit",
            lhs: est.shape().to_vec(),
            rhs: refs.shape().to_vec(),
        });
    }
    for i in 0..n {
        check_pair(est.row(i), refs.row(i))?;
    }
    Ok((n, l))
}

/// Pairwise SI-SDR matrix: `m[i][j] = si_sdr(est_j, ref_i)`.
fn pair_matrix<T: Real>(est: &Tensor<T>, refs: &Tensor<T>, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| si_sdr_raw(est.row(j), refs.row(i), EPS))
                .collect()
        })
        .collect()
}

/// Utterance-level PIT loss: the minimum over permutations of the mean
/// clamped negative SI-SDR. Ties go to the lexicographically first
/// permutation. The search is exhaustive, so cost grows as `n!`.
pub fn upit_loss<T: Real>(est: &Tensor<T>, refs: &Tensor<T>, clamp_db: f64) -> Result<Upit> {
    let (n, _) = check_sources(est, refs)?;
    let m = pair_matrix(est, refs, n);
    let mut best: Option<Upit> = None;
    for perm in permutations(n) {
        let terms: Vec<MetricValue> = (0..n)
            .map(|i| MetricValue::clamp_max(m[i][perm[i]], clamp_db))
            .collect();
        let loss = -terms.iter().map(|t| t.value).sum::<f64>() / n as f64;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(Upit { loss, perm, terms });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Records the PIT loss on `tape` for estimates `est: [n x L]`. The
/// permutation is selected on values, then only the chosen pairs are taped.
pub fn upit_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    est: Var,
    refs: &Tensor<T>,
    clamp_db: f64,
) -> Result<(Var, Upit)> {
    let sel = upit_loss(tape.value(est), refs, clamp_db)?;
    let n = sel.perm.len();
    let mut total: Option<Var> = None;
    for (i, &j) in sel.perm.iter().enumerate() {
        let row = tape.rows(&est, j, j + 1)?;
        let neg = tape.neg_si_sdr(row, refs.row(i), EPS)?;
        let term = tape.clamp_min(neg, T::from_f64(-clamp_db));
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    let loss = tape.scale(total.expect("n >= 1"), T::from_f64(1.0 / n as f64));
    Ok((loss, sel))
}

fn mixture_rows<T: Real>(mixture: &[T], n: usize, l: usize) -> Result<Tensor<T>> {
    if mixture.len() != l {
        return Err(Error::Dimension {
            op: "improvement",
            lhs: vec![mixture.len()],
            rhs: vec![n, l],
        });
    }
    let mut data = Vec::with_capacity(n * l);
    for _ in 0..n {
        data.extend_from_slice(mixture);
    }
    Tensor::new(vec![n, l], data)
}

/// SI-SDR improvement in dB: best-permutation mean SI-SDR of the estimates
/// minus the mean SI-SDR of the unprocessed mixture, both clamped at
/// [`CLAMP_DB`].
pub fn si_sdr_improvement<T: Real>(est: &Tensor<T>, refs: &Tensor<T>, mixture: &[T]) -> Result<f64> {
    let (n, l) = check_sources(est, refs)?;
    let after = -upit_loss(est, refs, CLAMP_DB)?.loss;
    let mix = mixture_rows(mixture, n, l)?;
    let before = -upit_loss(&mix, refs, CLAMP_DB)?.loss;
    Ok(after - before)
}

/// Non-scale-invariant counterpart of [`si_sdr_improvement`].
pub fn sdr_improvement<T: Real>(est: &Tensor<T>, refs: &Tensor<T>, mixture: &[T]) -> Result<f64> {
    let (n, l) = check_sources(est, refs)?;
    let mix = mixture_rows(mixture, n, l)?;
    let best_mean = |e: &Tensor<T>| -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for perm in permutations(n) {
            let mut s = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                s += sdr(e.row(j), refs.row(i), EPS)?.min(CLAMP_DB);
            }
            best = best.max(s / n as f64);
        }
        Ok(best)
    };
    Ok(best_mean(est)? - best_mean(&mix)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin() + 0.3 * (i as f64 * 0.37).cos()).collect()
    }

    #[test]
    fn perfect_estimate_is_large_and_clamps() {
        let r = sig(256, 0.1);
        assert!(si_sdr(&r, &r, EPS).unwrap() > 60.0);
        let refs = Tensor::from_rows(&[sig(64, 0.1), sig(64, 0.23)]).unwrap();
        let u = upit_loss(&refs, &refs, CLAMP_DB).unwrap();
        assert_eq!(u.loss, -30.0);
        assert!(u.terms.iter().all(|t| t.clamped && t.value == 30.0));
    }

    #[test]
    fn swapped_estimates_pick_swapped_permutation() {
        let refs = Tensor::from_rows(&[sig(64, 0.1), sig(64, 0.23)]).unwrap();
        let est = Tensor::from_rows(&[sig(64, 0.23), sig(64, 0.1)]).unwrap();
        let u = upit_loss(&est, &refs, CLAMP_DB).unwrap();
        assert_eq!(u.loss, -30.0);
        assert_eq!(u.perm, vec![1, 0]);
    }

    #[test]
    fn ten_db_construction() {
        // est = r + n with n orthogonal to r and |n|^2 = |r|^2 / 10.
        let l = 1000;
        let r: Vec<f64> = (0..l).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let n: Vec<f64> = (0..l)
            .map(|i| if i % 2 == 1 { (0.1f64).sqrt() } else { 0.0 })
            .collect();
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!((si_sdr(&e, &r, EPS).unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn zero_reference_is_an_error() {
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.0, 0.0], EPS), Err(Error::Domain(_))));
    }

    #[test]
    fn improvement_of_unprocessed_mixture_is_zero() {
        let a = sig(128, 0.1);
        let b = sig(128, 0.31);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let refs = Tensor::from_rows(&[a, b]).unwrap();
        let est = Tensor::from_rows(&[mix.clone(), mix.clone()]).unwrap();
        assert!(si_sdr_improvement(&est, &refs, &mix).unwrap().abs() < 1e-12);
        assert!(sdr_improvement(&est, &refs, &mix).unwrap().abs() < 1e-12);
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(
            permutations(3),
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
