use proptest::prelude::*;
use rand::Rng;

use sepmamba::init::rng_for;
use sepmamba::numerics::{Tape, Tensor};
use sepmamba::objective::{si_sdr, si_sdr_improvement, upit_loss, upit_loss_tape, CLAMP_DB, EPS};
use sepmamba::Error;

// direct projection formula, no epsilon
fn oracle(est: &[f64], r: &[f64]) -> f64 {
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let a = est.iter().zip(r).map(|(e, r)| e * r).sum::<f64>() / rr;
    let s: f64 = r.iter().map(|v| (a * v) * (a * v)).sum();
    let n: f64 = est.iter().zip(r).map(|(e, r)| (e - a * r) * (e - a * r)).sum();
    10.0 * (s / n).log10()
}

fn noise(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
    let mut rng = rng_for(seed, 4);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let l = t.shape()[1];
    let data = perm.iter().flat_map(|&j| t.row(j).to_vec()).collect();
    Tensor::new(vec![perm.len(), l], data).unwrap()
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn enumerate_best(est: &Tensor<f64>, refs: &Tensor<f64>) -> (f64, Vec<usize>) {
    let n = refs.shape()[0];
    all_perms(n)
        .into_iter()
        .map(|p| ((0..n).map(|i| oracle(est.row(p[i]), refs.row(i)).min(CLAMP_DB)).sum::<f64>() / n as f64, p))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
}

#[test]
fn ten_db_from_an_orthogonal_residual() {
    let l = 1000;
    let r: Vec<f64> = (0..l).map(|i| (i as f64 * 0.05).sin()).collect();
    // Gram-Schmidt a noise vector against r, then set its energy to 1/10
    let mut n = noise(1, vec![l]).data().to_vec();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let k = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    n.iter_mut().zip(&r).for_each(|(a, b)| *a -= k * b);
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let g = (rr / 10.0 / nn).sqrt();
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
    assert!((si_sdr(&est, &r, EPS).unwrap() - 10.0).abs() < 1e-6);
}

#[test]
fn perfect_estimates_hit_the_clamp() {
    let refs = noise(2, vec![2, 300]);
    let u = upit_loss(&refs, &refs, CLAMP_DB).unwrap();
    assert_eq!(u.loss, -30.0);
    assert!(u.terms.iter().all(|t| t.clamped && t.value == 30.0));
    let swapped = permute_rows(&refs, &[1, 0]);
    let u = upit_loss(&swapped, &refs, CLAMP_DB).unwrap();
    assert_eq!(u.loss, -30.0);
    assert_eq!(u.perm, vec![1, 0]);
}

#[test]
fn pit_equals_exhaustive_enumeration() {
    let mut rng = rng_for(9, 0);
    for case in 0..100u64 {
        let n = 2 + (case % 3) as usize;
        let l = rng.random_range(16..200);
        let refs = noise(case, vec![n, l]);
        // each estimate leans towards a random reference
        let target = &all_perms(n)[rng.random_range(0..all_perms(n).len())];
        let mix = noise(case + 1000, vec![n, l]);
        let w = rng.random_range(0.2..2.0);
        let est = Tensor::from_fn(vec![n, l], |i| {
            let (r, t) = (i / l, i % l);
            refs.row(target[r])[t] + w * mix.row(r)[t]
        });
        let u = upit_loss(&est, &refs, CLAMP_DB).unwrap();
        let (best, perm) = enumerate_best(&est, &refs);
        assert_eq!(u.perm, perm, "case {case}");
        assert!((-u.loss - best).abs() < 1e-6, "case {case}: {} vs {best}", -u.loss);
    }
}

#[test]
fn tape_loss_matches_value_loss() {
    let refs = noise(3, vec![2, 128]);
    let est = noise(4, vec![2, 128]);
    let mut tape = Tape::new();
    let v = tape.leaf(est.clone(), true);
    let (loss, sel) = upit_loss_tape(&mut tape, v, &refs, CLAMP_DB).unwrap();
    assert!((tape.value(loss).item() - sel.loss).abs() < 1e-12);
    assert_eq!(sel, upit_loss(&est, &refs, CLAMP_DB).unwrap());
}

#[test]
fn improvement_of_perfect_separation() {
    let refs = noise(5, vec![2, 400]);
    let mix: Vec<f64> = (0..400).map(|t| refs.row(0)[t] + refs.row(1)[t]).collect();
    let before = (oracle(&mix, refs.row(0)) + oracle(&mix, refs.row(1))) / 2.0;
    let imp = si_sdr_improvement(&refs, &refs, &mix).unwrap();
    assert!((imp - (30.0 - before)).abs() < 1e-6);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(matches!(si_sdr(&[1.0, 2.0], &[0.0, 0.0], EPS), Err(Error::Domain(_))));
    assert!(si_sdr(&[1.0, 2.0], &[1.0], EPS).is_err());
    assert!(upit_loss(&noise(1, vec![2, 10]), &noise(2, vec![2, 11]), CLAMP_DB).is_err());
}

proptest! {
    #[test]
    fn agrees_with_projection_oracle(seed in any::<u64>(), w in 0.05f64..3.0) {
        let r = noise(seed, vec![256]);
        let n = noise(seed ^ 7, vec![256]);
        let est: Vec<f64> = r.data().iter().zip(n.data()).map(|(a, b)| a + w * b).collect();
        prop_assert!((si_sdr(&est, r.data(), EPS).unwrap() - oracle(&est, r.data())).abs() < 1e-6);
    }

    #[test]
    fn scale_invariant(seed in any::<u64>(), k in prop_oneof![0.1f64..10.0, -10.0f64..-0.1]) {
        let r = noise(seed, vec![200]);
        let n = noise(seed ^ 3, vec![200]);
        let e = Tensor::from_fn(vec![200], |i| r.data()[i] + n.data()[i]);
        let scaled: Vec<f64> = e.data().iter().map(|v| k * v).collect();
        let a = si_sdr(e.data(), r.data(), EPS).unwrap();
        let b = si_sdr(&scaled, r.data(), EPS).unwrap();
        prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn invariant_to_estimate_order(seed in any::<u64>(), n in 2usize..5, pick in any::<prop::sample::Index>()) {
        let refs = noise(seed, vec![n, 64]);
        let est = noise(seed ^ 11, vec![n, 64]);
        let perms = all_perms(n);
        let p = &perms[pick.index(perms.len())];
        let a = upit_loss(&est, &refs, CLAMP_DB).unwrap();
        let b = upit_loss(&permute_rows(&est, p), &refs, CLAMP_DB).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-9);
    }

    #[test]
    fn terms_never_exceed_the_clamp(seed in any::<u64>(), w in 0.0f64..1e-3) {
        let refs = noise(seed, vec![2, 64]);
        let est = Tensor::from_fn(vec![2, 64], |i| refs.data()[i] * (1.0 + w));
        let u = upit_loss(&est, &refs, CLAMP_DB).unwrap();
        prop_assert!(u.terms.iter().all(|t| t.value <= CLAMP_DB));
        prop_assert!(u.loss >= -CLAMP_DB);
    }
}
