//! Compute reports: parameter count, analytic MACs, forward timing and the
//! peak-memory estimate, rendered as TSV or a markdown table.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::init::uniform;
use crate::init::rng_for;
use crate::numerics::{Real, Tensor};
use crate::separator::counts::samples_for;
use crate::separator::{count_params, estimate_peak_memory, gmac_per_second, SeparatorModel};

pub const COLUMNS: [&str; 6] = ["Model", "# Params", "GMAC/s", "Fw. pass (ms)", "Mem. Usage (GB)", "Env"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeReport {
    pub model: String,
    pub params: usize,
    /// Per second of audio at the model's sample rate.
    pub gmac_per_s: f64,
    /// Mean forward time on the timing input; NaN when not measured.
    pub fwd_ms: f64,
    pub peak_mem_bytes: u64,
    pub env: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingStats {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let min_ms = samples_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ms = samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            samples_ms,
            mean_ms,
            stddev_ms: var.sqrt(),
            min_ms,
            max_ms,
        }
    }
}

/// Times `repeats` forward passes over `seconds` of fixed random input
/// after `warmup` untimed passes.
pub fn profile_forward<T: Real>(
    model: &SeparatorModel<T>,
    seconds: f64,
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<TimingStats> {
    if repeats < 3 || warmup < 1 {
        return Err(Error::Config(format!(
            "timing needs repeats >= 3 and warmup >= 1, got {repeats} and {warmup}"
        )));
    }
    let len = samples_for(seconds, model.config().sample_rate);
    let x: Tensor<T> = uniform(&mut rng_for(seed, 21), vec![1, len], 1.0);
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        std::hint::black_box(model.forward(&x)?);
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TimingStats::from_samples(samples))
}

/// Platform, thread count and precision, for labelling timings.
pub fn env_descriptor(threads: usize, precision: &str) -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.split_whitespace().collect::<Vec<_>>().join(" "))
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{}-{} {cpu}, {threads} thread{}, {precision}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if threads == 1 { "" } else { "s" }
    )
}

/// Peak resident set size of this process (`VmHWM`), where available.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Builds a report; `timing` is `(seconds, repeats, warmup)` or `None` to
/// skip the wall-clock measurement.
pub fn compute_report<T: Real>(
    name: &str,
    model: &SeparatorModel<T>,
    mem_seconds: f64,
    timing: Option<(f64, usize, usize)>,
    env: String,
) -> Result<ComputeReport> {
    let cfg = model.config();
    let fwd_ms = match timing {
        Some((seconds, repeats, warmup)) => profile_forward(model, seconds, repeats, warmup, 0)?.mean_ms,
        None => f64::NAN,
    };
    Ok(ComputeReport {
        model: name.to_string(),
        params: count_params(cfg),
        gmac_per_s: gmac_per_second(cfg),
        fwd_ms,
        peak_mem_bytes: estimate_peak_memory(cfg, mem_seconds, T::PRECISION),
        env,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '|'], " ")
}

/// Renders reports with the columns of [`COLUMNS`]. TSV keeps full
/// precision and parses back with [`parse_tsv`].
pub fn emit_report(reports: &[ComputeReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(&COLUMNS.join("\t"));
            out.push('\n');
            for r in reports {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    clean(&r.model),
                    r.params,
                    r.gmac_per_s,
                    r.fwd_ms,
                    r.peak_mem_bytes as f64 / 1e9,
                    clean(&r.env)
                );
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
            for r in reports {
                let fwd = if r.fwd_ms.is_nan() {
                    "n/a".to_string()
                } else {
                    format!("{:.1}", r.fwd_ms)
                };
                let _ = writeln!(
                    out,
                    "| {} | {:.2}M | {:.2} | {fwd} | {:.2} | {} |",
                    clean(&r.model),
                    r.params as f64 / 1e6,
                    r.gmac_per_s,
                    r.peak_mem_bytes as f64 / 1e9,
                    clean(&r.env)
                );
            }
        }
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<ComputeReport>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty report".into()))?;
    if header.split('\t').ne(COLUMNS) {
        return Err(Error::Data(format!("unexpected report header `{header}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Data(format!("bad report line `{l}`"));
            let [model, params, gmac, fwd, mem, env] = f[..] else {
                return Err(bad());
            };
            let mem: f64 = mem.parse().map_err(|_| bad())?;
            Ok(ComputeReport {
                model: model.to_string(),
                params: params.parse().map_err(|_| bad())?,
                gmac_per_s: gmac.parse().map_err(|_| bad())?,
                fwd_ms: fwd.parse().map_err(|_| bad())?,
                peak_mem_bytes: (mem * 1e9).round() as u64,
                env: env.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(fwd_ms: f64) -> ComputeReport {
        ComputeReport {
            model: "toy".into(),
            params: 12345,
            gmac_per_s: 0.123_456_789,
            fwd_ms,
            peak_mem_bytes: 987_654_321,
            env: "test, 1 thread, f32".into(),
        }
    }

    #[test]
    fn empty_list_is_header_only() {
        assert_eq!(emit_report(&[], ReportFormat::Tsv).lines().count(), 1);
        assert_eq!(emit_report(&[], ReportFormat::Markdown).lines().count(), 2);
        assert_eq!(emit_report(&[report(1.0)], ReportFormat::Markdown).lines().count(), 3);
    }

    #[test]
    fn tsv_round_trips() {
        let rs = vec![report(12.5), report(0.1 + 0.2)];
        assert_eq!(parse_tsv(&emit_report(&rs, ReportFormat::Tsv)).unwrap(), rs);
        let nan = parse_tsv(&emit_report(&[report(f64::NAN)], ReportFormat::Tsv)).unwrap();
        assert!(nan[0].fwd_ms.is_nan());
    }

    #[test]
    fn timing_statistics_are_consistent() {
        let model = SeparatorModel::<f32>::build(&crate::separator::SeparatorConfig::toy(), 0).unwrap();
        let t = profile_forward(&model, 0.01, 3, 1, 0).unwrap();
        assert_eq!(t.samples_ms.len(), 3);
        assert!(t.min_ms <= t.mean_ms && t.mean_ms <= t.max_ms);
        assert!(profile_forward(&model, 0.01, 2, 1, 0).is_err());
    }
}
