//! Taped gradients against central finite differences in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sepmamba::init::rng_for;
use sepmamba::mamba::{BambaStack, MambaBlock};
use sepmamba::numerics::{ConvGeom, ConvTGeom, Exec, ParamStore, ScanOperands, Tape, Tensor, UnaryOp, Var};
use sepmamba::objective::{upit_loss_tape, CLAMP_DB, EPS};
use sepmamba::separator::{SeparatorConfig, SeparatorModel};
use sepmamba::ssm::{selective_ssm, ScanAlgorithm, SsmHandles};
use sepmamba::verify::{fd_max_rel_error, LossFn};
use sepmamba::Result;

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;

struct Setup {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Setup {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: rng_for(seed, 0),
        }
    }

    fn add(mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Self {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi));
        self.store.insert(name, t).unwrap();
        self
    }

    /// Values with magnitude in `[0.2, 1.5]` and random sign, keeping kinks
    /// out of the stencil.
    fn add_off_zero(mut self, name: &str, shape: &[usize]) -> Self {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        self.store.insert(name, t).unwrap();
        self
    }

    fn check(mut self, tol: f64, f: &LossFn<'_>) {
        let r = fd_max_rel_error(&self.store, f, &mut self.rng).unwrap();
        assert!(r.max_rel_err < tol, "rel err {:.3e} at {} (tol {tol:e})", r.max_rel_err, r.at);
    }
}

fn params(tape: &mut Tape<f64>, st: &ParamStore<f64>) -> Vec<Var> {
    st.iter().map(|(id, _, _)| tape.param(st, id)).collect()
}

/// `sum(y * w)` with a fixed random weight.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = rng_for(99, 1);
    let w = tape.input(Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)));
    let p = tape.mul(&y, &w)?;
    Ok(tape.sum(p))
}

#[test]
fn unary_ops() {
    for op in [
        UnaryOp::Relu,
        UnaryOp::Silu,
        UnaryOp::Sigmoid,
        UnaryOp::Exp,
        UnaryOp::Neg,
        UnaryOp::Softplus,
    ] {
        Setup::new(1).add_off_zero("x", &[3, 7]).check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let y = t.unary(&v[0], op);
            project(t, y)
        });
    }
}

#[test]
fn binary_and_broadcast_ops() {
    Setup::new(2)
        .add("a", &[4, 5], -1.0, 1.0)
        .add("b", &[5, 3], -1.0, 1.0)
        .check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let y = t.matmul(&v[0], &v[1])?;
            project(t, y)
        });
    Setup::new(3)
        .add("a", &[4, 6], -1.0, 1.0)
        .add("b", &[6], -1.0, 1.0)
        .add("c", &[4, 6], -1.0, 1.0)
        .check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let s = t.add(&v[0], &v[1])?;
            let m = t.mul(&s, &v[2])?;
            let d = t.sub(m, v[0])?;
            let d = t.scale(d, 0.7);
            project(t, d)
        });
    Setup::new(4)
        .add("x", &[3, 8], -1.0, 1.0)
        .add("b", &[3], -1.0, 1.0)
        .check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let y = t.add_bias(&v[0], &v[1])?;
            project(t, y)
        });
}

#[test]
fn layout_ops() {
    Setup::new(5).add("x", &[4, 9], -1.0, 1.0).check(OP_TOL, &|t, st| {
        let v = params(t, st);
        let f = t.flip_time(&v[0]);
        let r = t.rows(&f, 1, 3)?;
        let w1 = t.time_window(&r, -2, 12)?;
        let w2 = t.time_window(&w1, 3, 5)?;
        project(t, w2)
    });
}

#[test]
fn rms_norm() {
    Setup::new(6)
        .add("x", &[5, 11], -1.0, 1.0)
        .add("w", &[5], 0.5, 1.5)
        .check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let y = t.rms_norm(&v[0], &v[1], 1e-5)?;
            project(t, y)
        });
}

#[test]
fn convolutions() {
    for (stride, pl, pr, groups, ci, co) in [(1, 2, 0, 1, 3, 4), (2, 3, 1, 1, 3, 5), (1, 3, 0, 4, 4, 4), (2, 1, 1, 2, 4, 6)] {
        Setup::new(7)
            .add("x", &[ci, 17], -1.0, 1.0)
            .add("w", &[co, ci / groups, 4], -0.5, 0.5)
            .add("b", &[co], -0.5, 0.5)
            .check(OP_TOL, &|t, st| {
                let v = params(t, st);
                let g = ConvGeom {
                    stride,
                    pad_left: pl,
                    pad_right: pr,
                    groups,
                };
                let y = t.conv1d(&v[0], &v[1], Some(&v[2]), g)?;
                project(t, y)
            });
    }
    for (stride, cl, cr) in [(2, 0, 0), (2, 2, 0), (3, 1, 2)] {
        Setup::new(8)
            .add("x", &[3, 9], -1.0, 1.0)
            .add("w", &[3, 4, 6], -0.5, 0.5)
            .add("b", &[4], -0.5, 0.5)
            .check(OP_TOL, &|t, st| {
                let v = params(t, st);
                let g = ConvTGeom {
                    stride,
                    crop_left: cl,
                    crop_right: cr,
                };
                let y = t.conv_transpose1d(&v[0], &v[1], Some(&v[2]), g)?;
                project(t, y)
            });
    }
}

#[test]
fn raw_scan_both_algorithms() {
    for algo in [ScanAlgorithm::Sequential, ScanAlgorithm::Parallel] {
        for with_d in [false, true] {
            let mut s = Setup::new(9)
                .add("u", &[3, 13], -1.0, 1.0)
                .add("delta", &[3, 13], 0.01, 0.9)
                .add("a", &[3, 4], -3.0, -0.1)
                .add("b", &[4, 13], -1.0, 1.0)
                .add("c", &[4, 13], -1.0, 1.0);
            if with_d {
                s = s.add("d", &[3], -1.0, 1.0);
            }
            s.check(OP_TOL, &|t, st| {
                let v = params(t, st);
                let y = t.selective_scan(
                    ScanOperands {
                        u: &v[0],
                        delta: &v[1],
                        a: &v[2],
                        b: &v[3],
                        c: &v[4],
                        d: v.get(5),
                    },
                    algo,
                )?;
                project(t, y)
            });
        }
    }
}

#[test]
fn tiny_steps_use_the_series_branch() {
    // |delta * a| around 1e-5 exercises the Taylor forms of phi and dphi.
    Setup::new(10)
        .add("u", &[2, 6], -1.0, 1.0)
        .add("delta", &[2, 6], 1e-5, 3e-5)
        .add("a", &[2, 3], -1.0, -0.5)
        .add("b", &[3, 6], -1.0, 1.0)
        .add("c", &[3, 6], -1.0, 1.0)
        .check(OP_TOL, &|t, st| {
            let v = params(t, st);
            let y = t.selective_scan(
                ScanOperands {
                    u: &v[0],
                    delta: &v[1],
                    a: &v[2],
                    b: &v[3],
                    c: &v[4],
                    d: None,
                },
                ScanAlgorithm::Sequential,
            )?;
            let y = t.scale(y, 1e4);
            project(t, y)
        });
}

#[test]
fn selective_ssm_parameters() {
    let (d, n, r) = (5, 4, 2);
    Setup::new(11)
        .add("x", &[d, 16], -1.0, 1.0)
        .add("a_log", &[d, n], -0.7, 1.4)
        .add("x_proj", &[r + 2 * n, d], -0.5, 0.5)
        .add("dt_proj", &[d, r], -0.5, 0.5)
        .add("dt_bias", &[d], -3.0, -1.0)
        .add("d_skip", &[d], -1.0, 1.0)
        .check(MODEL_TOL, &|t, st| {
            let v = params(t, st);
            let h = SsmHandles {
                a_log: v[1],
                x_proj: v[2],
                dt_proj: v[3],
                dt_bias: v[4],
                d_skip: Some(v[5]),
                dt_rank: r,
                n_state: n,
            };
            let y = selective_ssm(t, &h, &v[0], ScanAlgorithm::Sequential)?;
            project(t, y)
        });
}

#[test]
fn si_sdr_and_clamp() {
    let mut rng = rng_for(12, 3);
    let reference: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    Setup::new(12).add("e", &[40], -1.0, 1.0).check(OP_TOL, &|t, st| {
        let v = params(t, st);
        let l = t.neg_si_sdr(v[0], &reference, EPS)?;
        // far from the clamp, so the clamp is the identity here
        Ok(t.clamp_min(l, -1e3))
    });
}

#[test]
fn upit_loss_wrt_estimates() {
    let mut rng = rng_for(13, 3);
    let refs = Tensor::from_fn(vec![2, 50], |_| rng.random_range(-1.0..1.0));
    let base = refs.clone();
    let mut s = Setup::new(13);
    let mut r2 = rng_for(13, 4);
    // noisy, swapped estimates: away from ties and from the clamp
    let est = Tensor::from_fn(vec![2, 50], |i| base.data()[(i + 50) % 100] + 0.4 * r2.random_range(-1.0..1.0));
    s.store.insert("est", est).unwrap();
    s.check(OP_TOL, &|t, st| {
        let v = params(t, st);
        Ok(upit_loss_tape(t, v[0], &refs, CLAMP_DB)?.0)
    });
}

#[test]
fn mamba_block_with_norm() {
    let cfg = SeparatorConfig {
        rms_norm: true,
        ..SeparatorConfig::toy()
    };
    let mut s = Setup::new(14).add("x", &[8, 12], -1.0, 1.0);
    let block = MambaBlock::build(&mut s.store, "blk", cfg.block_config(8), &mut rng_for(14, 1)).unwrap();
    s.check(MODEL_TOL, &|t, st| {
        let x = t.param(st, st.id("x").unwrap());
        let y = block.forward(t, st, &x)?;
        project(t, y)
    });
}

#[test]
fn bamba_stacks() {
    for recombine in [false, true] {
        let cfg = SeparatorConfig {
            recombine_per_block: recombine,
            blocks_per_stage: 4,
            ..SeparatorConfig::toy()
        };
        let mut s = Setup::new(15).add("x", &[8, 10], -1.0, 1.0);
        let stack = BambaStack::build(&mut s.store, "s", cfg.stack_config(8), &mut rng_for(15, 1)).unwrap();
        s.check(MODEL_TOL, &|t, st| {
            let x = t.param(st, st.id("x").unwrap());
            let y = stack.forward(t, st, &x)?;
            project(t, y)
        });
    }
}

#[test]
fn separator_end_to_end_causal_and_not() {
    for causal in [false, true] {
        let cfg = SeparatorConfig {
            causal,
            ..SeparatorConfig::toy()
        };
        let model = SeparatorModel::<f64>::build(&cfg, 16).unwrap();
        let mut rng = rng_for(16, 2);
        // 60 is not a frame multiple, so the padding path is taped too
        let refs = Tensor::from_fn(vec![2, 60], |_| rng.random_range(-1.0..1.0));
        let mix = Tensor::from_fn(vec![1, 60], |t| refs.data()[t] + refs.data()[60 + t]);
        let s = Setup {
            store: model.params.clone(),
            rng: rng_for(16, 3),
        };
        s.check(MODEL_TOL, &|t, st| {
            let x = t.input(mix.clone());
            let y = model.net.forward_exec(t, st, &x)?;
            Ok(upit_loss_tape(t, y, &refs, CLAMP_DB)?.0)
        });
    }
}
