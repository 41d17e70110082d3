//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run alone with `cargo test --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;

use sepmamba::bench::parse_tsv;
use sepmamba::data::{dynamic_mix, measured_snr_db, synth_source, MixSpec, SourceKind};
use sepmamba::init::{derive_seed, rng_for};
use sepmamba::numerics::{Exec, ParamStore, Precision, Real, Tape, Tensor};
use sepmamba::objective::{upit_loss_tape, CLAMP_DB};
use sepmamba::separator::{calibrate, lookahead, SeparatorConfig, SeparatorModel};
use sepmamba::ssm::{ScanAlgorithm, ZeroOrderHold};
use sepmamba::train::{evaluate_si_sdri, Example, ExampleSource, Trainer};
use sepmamba::verify::{self, fd_max_rel_error, probe_lookahead, Fault, ScanCase, Suite};
use sepmamba_cli::CliConfig;

const PARAMS_TOL: f64 = 0.10;
const GMAC_TOL: f64 = 0.15;
const TARGETS: [(&str, f64, f64); 2] = [("SepMamba (S)", 7.2e6, 12.46), ("SepMamba (M)", 22.0e6, 37.0)];
const CALIBRATION_TRIPLE: (usize, usize, usize) = (2, 32, 3);
const SCAN_CASES: usize = 100;
const SCAN_MAX: (usize, usize, usize) = (1024, 16, 16);
const SCAN_TOL_F32: f64 = 1e-5;
const SCAN_TOL_F64: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const DRILL_STEPS: u64 = 2000;
const DRILL_EVAL_EVERY: u64 = 200;
const DRILL_TARGET_DB: f64 = 10.0;
const STREAM_TOL: f64 = 1e-5;
const DETERMINISM_STEPS: &str = "50";
const MIX_SPECS: u64 = 1000;
const SNR_TOL_DB: f64 = 0.01;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sepmamba(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sepmamba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run sepmamba")
}

fn bench_rows() -> Result<Vec<sepmamba::bench::ComputeReport>, String> {
    let out = sepmamba(&["bench", "--no-timing", "--format", "tsv"]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    parse_tsv(&String::from_utf8_lossy(&out.stdout)).map_err(|e| e.to_string())
}

fn rel(x: f64, target: f64) -> f64 {
    x / target - 1.0
}

fn c1_params() -> Outcome {
    let rows = match bench_rows() {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let mut ok = rows.len() == 2;
    let mut detail = Vec::new();
    for (name, target, _) in TARGETS {
        match rows.iter().find(|r| r.model == name) {
            Some(r) => {
                let d = rel(r.params as f64, target);
                ok &= d.abs() <= PARAMS_TOL;
                detail.push(format!("{name} {} ({:+.1}%)", r.params, 100.0 * d));
            }
            None => ok = false,
        }
    }
    let cal = calibrate();
    let small = SeparatorConfig::small();
    let triple = (cal.expand, cal.n_state, cal.d_conv);
    let readme = fs::read_to_string(root().join("README.md")).unwrap_or_default();
    let documented = readme.contains(&format!(
        "expand = {}, n_state = {}, d_conv = {}",
        triple.0, triple.1, triple.2
    ));
    ok &= triple == CALIBRATION_TRIPLE && triple == (small.expand, small.n_state, small.d_conv) && documented;
    detail.push(format!("calibration {triple:?}, documented: {documented}"));
    outcome(ok, detail.join("; "))
}

fn c2_gmac() -> Outcome {
    let rows = match bench_rows() {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, _, target) in TARGETS {
        match rows.iter().find(|r| r.model == name) {
            Some(r) => {
                let d = rel(r.gmac_per_s, target);
                ok &= d.abs() <= GMAC_TOL;
                detail.push(format!("{name} {:.2} GMAC/s ({:+.1}%)", r.gmac_per_s, 100.0 * d));
            }
            None => ok = false,
        }
    }
    outcome(ok, detail.join("; "))
}

fn c3_scan() -> Outcome {
    let mut rng = rng_for(3, 0);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for _ in 0..SCAN_CASES {
        let c = ScanCase::random(&mut rng, SCAN_MAX.0);
        assert!(c.channels <= SCAN_MAX.1 && c.n_state <= SCAN_MAX.2);
        let d = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        e64 = e64.max(d(
            c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Parallel),
            c.run::<f64, ZeroOrderHold>(ScanAlgorithm::Sequential),
        ));
        let p: Vec<f64> = c.run::<f32, ZeroOrderHold>(ScanAlgorithm::Parallel).iter().map(|v| *v as f64).collect();
        let s: Vec<f64> = c.run::<f32, ZeroOrderHold>(ScanAlgorithm::Sequential).iter().map(|v| *v as f64).collect();
        e32 = e32.max(d(p, s));
    }
    outcome(
        e32 < SCAN_TOL_F32 && e64 < SCAN_TOL_F64,
        format!("{SCAN_CASES} cases, max diff f32 {e32:.2e}, f64 {e64:.2e}"),
    )
}

fn c4_gradients() -> Outcome {
    if verify::FD_STEP != FD_STEP || verify::FD_REL_TOL != FD_TOL {
        return outcome(false, "finite-difference settings drifted");
    }
    let checks = verify::run(Suite::Grads, 4, Fault::None);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();

    // end to end through the separator and the permutation-invariant loss
    let cfg = SeparatorConfig {
        base_dim: 4,
        n_state: 4,
        ..SeparatorConfig::toy()
    };
    let e2e = SeparatorModel::<f64>::build(&cfg, 4).and_then(|m| {
        let mut rng = rng_for(4, 1);
        let x = Tensor::from_fn(vec![1, 64], |_| rng.random_range(-1.0..1.0));
        let refs = Tensor::from_fn(vec![2, 64], |_| rng.random_range(-1.0..1.0));
        let net = m.net.clone();
        let f = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let xv = tape.input(x.clone());
            let y = net.forward_exec(tape, store, &xv)?;
            Ok(upit_loss_tape(tape, y, &refs, CLAMP_DB)?.0)
        };
        fd_max_rel_error(&m.params, &f, &mut rng_for(4, 2))
    });
    match e2e {
        Ok(r) => outcome(
            failed.is_empty() && r.max_rel_err < FD_TOL,
            format!(
                "{} suite checks, {} failed; end-to-end max rel err {:.2e} over {} coordinates{}",
                checks.len(),
                failed.len(),
                r.max_rel_err,
                r.coords,
                failed.iter().map(|f| format!(" [{f}]")).collect::<String>()
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn c5_causality() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    let toy = SeparatorConfig::toy();
    let drill = SeparatorConfig {
        base_dim: 16,
        ..toy.clone()
    };
    for cfg in [toy, drill] {
        let causal = SeparatorConfig {
            causal: true,
            ..cfg.clone()
        };
        let lam = lookahead(&causal).expect("causal");
        let fm = causal.frame_multiple();
        let start = lam.div_ceil(fm) * fm + fm;
        let len = (start + 2 * fm + lam).div_ceil(fm) * fm + fm;
        let pos = start..start + 2 * fm;
        let measured = SeparatorModel::<f64>::build(&causal, 5).and_then(|m| probe_lookahead(&m, len, pos.clone(), 5));
        let bidir = SeparatorModel::<f64>::build(&cfg, 5).and_then(|m| probe_lookahead(&m, len, pos, 5));
        match (measured, bidir) {
            (Ok(c), Ok(b)) => {
                ok &= c.max_reach == lam && !c.silent && b.max_reach > lam;
                detail.push(format!(
                    "base {}: causal {} vs analytic {lam}, non-causal {}",
                    cfg.base_dim, c.max_reach, b.max_reach
                ));
            }
            (c, b) => return outcome(false, format!("{:?} {:?}", c.err(), b.err())),
        }
    }
    outcome(ok, detail.join("; "))
}

fn c6_metrics() -> Outcome {
    let checks = verify::run(Suite::Metrics, 6, Fault::None);
    let ok = checks.iter().all(|c| c.passed);
    outcome(
        ok,
        checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; "),
    )
}

fn drill<T: Real>(cfg: &CliConfig) -> sepmamba::Result<Vec<(u64, f64)>> {
    let mut tr = Trainer::<T>::new(&cfg.model, &cfg.train)?;
    let src = ExampleSource::new(&cfg.data, cfg.train.seed, cfg.model.sample_rate)?;
    let n = cfg.data.n_mixtures as u64;
    let mixes = (0..n).map(|i| src.mixture(i)).collect::<sepmamba::Result<Vec<_>>>()?;
    let examples = mixes.iter().map(Example::<T>::from_mixture).collect::<sepmamba::Result<Vec<_>>>()?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mut trajectory = vec![(0, mean(evaluate_si_sdri(&tr.model, &mixes)?))];
    while tr.step < DRILL_STEPS {
        let ex = &examples[(tr.step % n) as usize];
        tr.train_step(std::slice::from_ref(ex))?;
        if tr.step % DRILL_EVAL_EVERY == 0 {
            trajectory.push((tr.step, mean(evaluate_si_sdri(&tr.model, &mixes)?)));
        }
    }
    Ok(trajectory)
}

fn c7_overfit() -> Outcome {
    let cfg = match CliConfig::load(&root().join("configs/drill.conf")) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let shape = (cfg.model.base_dim, cfg.model.n_stages, cfg.model.blocks_per_stage, cfg.data.n_mixtures);
    if shape != (16, 3, 2, 8) {
        return outcome(false, format!("drill config drifted: {shape:?}"));
    }
    let t0 = Instant::now();
    let r = match cfg.train.precision {
        Precision::F32 => drill::<f32>(&cfg),
        Precision::F64 => drill::<f64>(&cfg),
    };
    match r {
        Ok(traj) => {
            let (steps, end) = *traj.last().expect("initial score");
            let path: Vec<String> = traj.iter().map(|(s, v)| format!("{s}:{v:.1}")).collect();
            outcome(
                steps == DRILL_STEPS && end > DRILL_TARGET_DB,
                format!(
                    "mean SI-SDRi {end:.2} dB after {steps} steps ({:.0} s); step:dB {}",
                    t0.elapsed().as_secs_f64(),
                    path.join(" ")
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn c8_streaming() -> Outcome {
    let cfg = SeparatorConfig {
        causal: true,
        ..SeparatorConfig::toy()
    };
    let lam = lookahead(&cfg).expect("causal");
    let fm = cfg.frame_multiple();
    let mut rng = rng_for(8, 0);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let model = match SeparatorModel::<f32>::build(&cfg, trial) {
            Ok(m) => m,
            Err(e) => return outcome(false, e.to_string()),
        };
        let len = fm * rng.random_range(8..40);
        let x = Tensor::from_fn(vec![1, len], |_| rng.random_range(-1.0f32..1.0));
        let mut run = || -> sepmamba::Result<f64> {
            let batch = model.forward(&x)?;
            let mut st = model.init_stream()?;
            let mut parts = Vec::new();
            let mut at = 0;
            while at < len {
                let m = (fm * rng.random_range(1..6)).min(len - at);
                parts.push(model.forward_streaming(&x.time_slice(at, m)?, &mut st)?);
                at += m;
            }
            let streamed = Tensor::concat_time(&parts)?;
            let keep = len - lam;
            let done = streamed.shape()[1];
            if done < keep {
                return Ok(f64::INFINITY);
            }
            Ok(streamed.time_slice(0, keep)?.max_abs_diff(&batch.time_slice(0, keep)?).as_f64())
        };
        match run() {
            Ok(d) => worst = worst.max(d),
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    outcome(
        worst < STREAM_TOL,
        format!("10 signals, max diff {worst:.2e} outside the last {lam} samples"),
    )
}

fn c9_determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let cfg = dir.path().join("det.conf");
    let text = "[model]\nn_stages = 3\nbase_dim = 4\nblocks_per_stage = 2\nkernel_size = 4\nn_state = 4\n\n\
                [train]\nprecision = f64\ndeterministic = true\ncheckpoint_every = 0\n\n\
                [data]\nn_mixtures = 8\nduration_s = 0.05\n";
    if let Err(e) = fs::write(&cfg, text) {
        return outcome(false, e.to_string());
    }
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let o = sepmamba(&[
            "train",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--steps",
            DETERMINISM_STEPS,
            "--seed",
            "9",
        ]);
        if !o.status.success() {
            return outcome(false, String::from_utf8_lossy(&o.stderr).into_owned());
        }
        metrics.push(fs::read(out_dir.join("metrics.tsv")).unwrap_or_default());
    }
    let lines = String::from_utf8_lossy(&metrics[0]).lines().count();
    outcome(
        metrics[0] == metrics[1] && lines == 50,
        format!("{lines} metric lines, byte-identical: {}", metrics[0] == metrics[1]),
    )
}

fn c10_mixing() -> Outcome {
    let mut worst = 0.0f64;
    let mut exact = true;
    for i in 0..MIX_SPECS {
        let spec = MixSpec::sample(derive_seed(10, i));
        let kinds = SourceKind::ALL;
        let a = synth_source(kinds[(i % 3) as usize], 0.1, 8000, derive_seed(i, 1));
        let b = synth_source(kinds[((i / 3) % 3) as usize], 0.1, 8000, derive_seed(i, 2));
        let m = match (a, b) {
            (Ok(a), Ok(b)) => dynamic_mix(&a, &b, &spec),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        let m = match m {
            Ok(m) => m,
            Err(e) => return outcome(false, e.to_string()),
        };
        worst = worst.max((measured_snr_db(&m.refs[0].samples, &m.refs[1].samples) - spec.snr_db).abs());
        exact &= m
            .mixture
            .samples
            .iter()
            .zip(&m.refs[0].samples)
            .zip(&m.refs[1].samples)
            .all(|((x, a), b)| x.to_bits() == (a + b).to_bits());
    }
    outcome(
        worst < SNR_TOL_DB && exact,
        format!("{MIX_SPECS} specs, max SNR error {worst:.2e} dB, bitwise sums: {exact}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter counts", c1_params),
        ("compute per second of audio", c2_gmac),
        ("parallel scan equals sequential", c3_scan),
        ("gradients match finite differences", c4_gradients),
        ("causal lookahead", c5_causality),
        ("metric properties", c6_metrics),
        ("overfit drill", c7_overfit),
        ("streaming equals batch", c8_streaming),
        ("deterministic training", c9_determinism),
        ("dynamic mixing", c10_mixing),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.passed);
        println!("{} {:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
