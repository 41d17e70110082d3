use proptest::prelude::*;
use rand::Rng;

use sepmamba::init::rng_for;
use sepmamba::numerics::Tensor;
use sepmamba::ssm::{Discretization, ScanAlgorithm, ScanState, SsmParams, ZeroOrderHold};
use sepmamba::verify::{ScanCase, SignFlipped};

fn case(seed: u64, max_len: usize) -> ScanCase {
    ScanCase::random(&mut rng_for(seed, 0), max_len)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hundred_random_cases_match_in_both_precisions() {
    let mut rng = rng_for(2024, 1);
    for _ in 0..100 {
        let c = ScanCase::random(&mut rng, 1024);
        let s64 = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        let p64 = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Parallel);
        assert!(max_abs(&s64, &p64) < 1e-10);
        let s32 = c.run::<f32, ZeroOrderHold>(ScanAlgorithm::Sequential);
        let p32 = c.run::<f32, ZeroOrderHold>(ScanAlgorithm::Parallel);
        let d = s32.iter().zip(&p32).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-5, "{d}");
    }
}

#[test]
fn closed_form_single_state() {
    // one channel, one state, constant input: h_t = 1 - exp(a * delta * t) for
    // B = 1, x = 1, a = -1
    let len = 50;
    let c = ScanCase {
        u: vec![1.0; len],
        delta: vec![0.1; len],
        a: vec![-1.0],
        b: vec![1.0; len],
        c: vec![1.0; len],
        d: vec![0.0],
        channels: 1,
        n_state: 1,
        len,
    };
    let y = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
    for (t, v) in y.iter().enumerate() {
        let expect = 1.0 - (-0.1 * (t + 1) as f64).exp();
        assert!((v - expect).abs() < 1e-14, "t={t}: {v} vs {expect}");
    }
}

#[test]
fn sign_flipped_fixture_diverges() {
    let c = case(5, 200);
    let good = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
    let bad = c.run::<f64, SignFlipped>(ScanAlgorithm::Sequential);
    assert!(max_abs(&good, &c.oracle()) < 1e-10);
    assert!(!(max_abs(&bad, &c.oracle()) < 1e-3));
}

fn ssm(seed: u64, d: usize, n: usize) -> SsmParams<f64> {
    let mut rng = rng_for(seed, 2);
    let mut t = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    let r = 2;
    SsmParams {
        n_state: n,
        d_channels: d,
        dt_rank: r,
        a_log: t(vec![d, n], -1.0, 1.5),
        x_proj: t(vec![r + 2 * n, d], -0.5, 0.5),
        dt_proj: t(vec![d, r], -0.5, 0.5),
        dt_bias: t(vec![d], -4.0, -1.0),
        d_skip: Some(t(vec![d], -1.0, 1.0)),
    }
}

#[test]
fn stepwise_scan_equals_batch() {
    let (d, n, l) = (4, 6, 40);
    let p = ssm(7, d, n);
    let mut rng = rng_for(7, 3);
    let x = Tensor::from_fn(vec![d, l], |_| rng.random_range(-1.0..1.0));
    let (batch, h_end) = p.scan_sequential(&x, &ScanState::zeros(d, n)).unwrap();
    let (par, _) = p.scan_parallel(&x, &ScanState::zeros(d, n)).unwrap();
    assert!(batch.max_abs_diff(&par) < 1e-12);
    let mut h = ScanState::zeros(d, n);
    for t in 0..l {
        let xt = Tensor::from_fn(vec![d], |c| x.data()[c * l + t]);
        let (y, h2) = p.scan_step(&xt, &h).unwrap();
        for c in 0..d {
            assert!((y.data()[c] - batch.data()[c * l + t]).abs() < 1e-12);
        }
        h = h2;
    }
    assert!(h.h.max_abs_diff(&h_end.h) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_equals_sequential(seed in any::<u64>()) {
        let c = case(seed, 300);
        let s = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        let p = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Parallel);
        prop_assert!(max_abs(&s, &p) < 1e-10);
    }

    #[test]
    fn sequential_matches_oracle(seed in any::<u64>()) {
        let c = case(seed, 200);
        let s = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        let o = c.oracle();
        let scaled = s.iter().zip(&o).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
        prop_assert!(scaled < 1e-10);
    }

    #[test]
    fn decay_is_in_unit_interval(delta in 1e-6f64..10.0, a in -20.0f64..-1e-3) {
        let (ab, phi) = ZeroOrderHold::coeffs(delta * a);
        prop_assert!(ab > 0.0 && ab < 1.0);
        prop_assert!(phi > 0.0 && phi <= 1.0);
    }

    #[test]
    fn zero_input_keeps_zero_state(seed in any::<u64>()) {
        let mut c = case(seed, 64);
        c.u.iter_mut().for_each(|v| *v = 0.0);
        let y = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Parallel);
        prop_assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_in_the_input(seed in any::<u64>(), k in -3.0f64..3.0) {
        let c = case(seed, 64);
        let y = c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        let mut ck = c.clone();
        ck.u.iter_mut().for_each(|v| *v *= k);
        let yk = ck.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential);
        for (a, b) in y.iter().zip(&yk) {
            prop_assert!((a * k - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }
}
