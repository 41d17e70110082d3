//! Command implementations behind the `sepmamba` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sepmamba::bench::{compute_report, emit_report, env_descriptor, ReportFormat};
use sepmamba::data::{read_wav, resample_to, write_wav, AudioBuffer, WavEncoding};
use sepmamba::numerics::{init_threads, Precision, Real, Tensor};
use sepmamba::objective::si_sdr_improvement;
use sepmamba::separator::{KeyDoc, SeparatorConfig, SeparatorModel, MODEL_KEYS};
use sepmamba::train::{DataConfig, ExampleSource, TrainConfig, Trainer, DATA_KEYS, TRAIN_KEYS};
use sepmamba::verify::{self, Fault, Suite};
use sepmamba::{Error, Result};

/// Process exit status for an error: 2 for usage and configuration, 3 for
/// data, audio and checkpoint problems, 4 for numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_)
        | Error::Wav(_)
        | Error::Data(_)
        | Error::Checkpoint(_)
        | Error::Stream(_)
        | Error::InputTooShort { .. } => 3,
        _ => 4,
    }
}

/// Contents of a configuration file: `[model]`, `[train]` and `[data]`
/// sections of `key = value` lines. `#` and `;` start comments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    pub model: SeparatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CliConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "train" | "data") {
                    return Err(Error::Config(format!("line {n}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let res = match section.as_deref() {
                Some("model") => cfg.model.set(k, v),
                Some("train") => cfg.train.set(k, v),
                Some("data") => cfg.data.set(k, v),
                _ => return Err(Error::Config(format!("line {n}: `{k}` appears before any section"))),
            };
            res.map_err(|e| Error::Config(format!("line {n}: {}", strip_prefix(&e))))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    /// The configuration in the file format, every key written out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, pairs) in [
            ("model", self.model.to_pairs()),
            ("train", self.train.to_pairs()),
            ("data", self.data.to_pairs()),
        ] {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Help text listing every configuration key with its default.
pub fn keys_help() -> String {
    let d = CliConfig::default();
    let mut out = String::from(
        "Configuration file keys (sections [model], [train], [data]; defaults shown, model defaults are the S preset):\n",
    );
    let mut section = |name: &str, keys: &[KeyDoc], pairs: Vec<(&'static str, String)>| {
        let _ = writeln!(out, "\n  [{name}]");
        for k in keys {
            let v = pairs.iter().find(|p| p.0 == k.key).map(|p| p.1.as_str()).unwrap_or("");
            let v = if v.is_empty() { "\"\"" } else { v };
            let _ = writeln!(out, "    {:<20} {:<12} {}", k.key, v, k.doc);
        }
    };
    section("model", MODEL_KEYS, d.model.to_pairs());
    section("train", TRAIN_KEYS, d.train.to_pairs());
    section("data", DATA_KEYS, d.data.to_pairs());
    out.push_str("\nEnvironment: SEPM_THREADS sets the intra-op thread count.\n");
    out.push_str("Exit codes: 0 ok, 2 usage or configuration, 3 data or checkpoint, 4 numerical failure.\n");
    out
}

fn threads_for(train: &TrainConfig) -> usize {
    let explicit = if train.deterministic {
        Some(1)
    } else {
        (train.threads > 0).then_some(train.threads)
    };
    init_threads(explicit)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = CliConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    let threads = threads_for(&cfg.train);
    log::info!("training with {threads} thread(s) in {}", cfg.train.precision.name());
    match cfg.train.precision {
        Precision::F32 => train_with::<f32>(&cfg, args),
        Precision::F64 => train_with::<f64>(&cfg, args),
    }
}

fn train_with<T: Real>(cfg: &CliConfig, args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(p) => {
            let t = Trainer::<T>::resume(p, &cfg.train)?;
            if t.model.config() != &cfg.model {
                log::warn!("model section of the config differs from the checkpoint; using the checkpoint");
            }
            log::info!("resuming from {} at step {}", p.display(), t.step);
            t
        }
        None => Trainer::<T>::new(&cfg.model, &cfg.train)?,
    };
    let source = ExampleSource::new(&cfg.data, cfg.train.seed, trainer.model.config().sample_rate)?;
    let out = trainer.run(&args.out_dir, &source)?;
    match out.last {
        Some(s) => log::info!(
            "finished at step {} (loss {:.3}, lr {:.3e}); metrics in {}",
            out.final_step,
            s.loss,
            s.lr,
            out.metrics.display()
        ),
        None => log::info!("no updates run; step {} checkpoint written", out.final_step),
    }
    Ok(())
}

pub struct SeparateArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out_prefix: Option<String>,
    pub references: Vec<PathBuf>,
    pub precision: Precision,
    pub encoding: WavEncoding,
}

/// Output paths `<prefix>_src1.wav`, `<prefix>_src2.wav`, ...
pub fn output_paths(prefix: &str, n: usize) -> Vec<PathBuf> {
    (1..=n).map(|i| PathBuf::from(format!("{prefix}_src{i}.wav"))).collect()
}

/// Separated sources and, when references were given, the SI-SDR
/// improvement.
pub struct SeparateOutcome {
    pub outputs: Vec<PathBuf>,
    pub si_sdri: Option<f64>,
}

pub fn cmd_separate(args: &SeparateArgs) -> Result<SeparateOutcome> {
    init_threads(None);
    match args.precision {
        Precision::F32 => separate_with::<f32>(args),
        Precision::F64 => separate_with::<f64>(args),
    }
}

fn at_rate(buf: AudioBuffer, rate: u32, what: &Path) -> Result<AudioBuffer> {
    if buf.sample_rate == rate {
        return Ok(buf);
    }
    log::warn!(
        "{} is sampled at {} Hz; resampling to {rate} Hz",
        what.display(),
        buf.sample_rate
    );
    resample_to(&buf, rate)
}

fn separate_with<T: Real>(args: &SeparateArgs) -> Result<SeparateOutcome> {
    let model = SeparatorModel::<T>::load(&args.checkpoint)?;
    let sr = model.config().sample_rate;
    let input = read_wav(&args.input)?;
    let (in_rate, in_len) = (input.sample_rate, input.samples.len());
    let mix = at_rate(input, sr, &args.input)?;
    let x: Vec<T> = mix.samples.iter().map(|&v| T::from_f64(v)).collect();
    let est = model.separate(&x)?;
    let (n_src, len) = est.dims2()?;

    let prefix = match &args.out_prefix {
        Some(p) => p.clone(),
        None => args.input.with_extension("").display().to_string(),
    };
    let outputs = output_paths(&prefix, n_src);
    if let Some(dir) = outputs[0].parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    for (i, path) in outputs.iter().enumerate() {
        let src = AudioBuffer::new(est.row(i).iter().map(|v| v.as_f64()).collect(), sr)?;
        let mut src = if in_rate == sr { src } else { resample_to(&src, in_rate)? };
        src.samples.resize(in_len, 0.0);
        write_wav(path, &src, args.encoding)?;
    }

    let si_sdri = match args.references.as_slice() {
        [] => None,
        refs if refs.len() == n_src => {
            let mut rows = Vec::with_capacity(n_src * len);
            for p in refs {
                let r = at_rate(read_wav(p)?, sr, p)?;
                if r.samples.len() != len {
                    return Err(Error::Data(format!(
                        "reference {} has {} samples, the mixture {len}",
                        p.display(),
                        r.samples.len()
                    )));
                }
                rows.extend(r.samples.iter().map(|&v| T::from_f64(v)));
            }
            let refs = Tensor::new(vec![n_src, len], rows)?;
            let v = si_sdr_improvement(&est, &refs, &x)?;
            eprintln!("SI-SDRi: {v:.2} dB");
            Some(v)
        }
        refs => {
            return Err(Error::Config(format!(
                "expected {n_src} references, got {}",
                refs.len()
            )))
        }
    };
    Ok(SeparateOutcome { outputs, si_sdri })
}

pub struct BenchArgs {
    /// Configuration files or checkpoints.
    pub sources: Vec<PathBuf>,
    /// `small`, `medium` or `toy`.
    pub presets: Vec<String>,
    pub seconds: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub timing: bool,
    pub precision: Precision,
    pub format: ReportFormat,
}

pub fn preset(name: &str) -> Result<(String, SeparatorConfig)> {
    match name {
        "small" | "s" | "S" => Ok(("SepMamba (S)".into(), SeparatorConfig::small())),
        "medium" | "m" | "M" => Ok(("SepMamba (M)".into(), SeparatorConfig::medium())),
        "toy" => Ok(("toy".into(), SeparatorConfig::toy())),
        _ => Err(Error::Config(format!("unknown preset `{name}` (expected small, medium or toy)"))),
    }
}

fn is_checkpoint(path: &Path) -> bool {
    use std::io::Read;
    let mut head = [0u8; 5];
    fs::File::open(path).and_then(|mut f| f.read_exact(&mut head)).is_ok() && &head == b"SEPM1"
}

/// Renders the compute report for the requested models; without any, the
/// S and M presets.
pub fn cmd_bench(args: &BenchArgs) -> Result<String> {
    let threads = init_threads(None);
    let env = env_descriptor(threads, args.precision.name());
    let mut models: Vec<(String, SeparatorConfig, Option<SeparatorModel<f64>>)> = Vec::new();
    for p in &args.presets {
        let (name, cfg) = preset(p)?;
        models.push((name, cfg, None));
    }
    for path in &args.sources {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if is_checkpoint(path) {
            let m = SeparatorModel::<f64>::load(path)?;
            models.push((name, m.config().clone(), Some(m)));
        } else {
            models.push((name, CliConfig::load(path)?.model, None));
        }
    }
    if models.is_empty() {
        for p in ["small", "medium"] {
            let (name, cfg) = preset(p)?;
            models.push((name, cfg, None));
        }
    }
    let timing = args.timing.then_some((args.seconds, args.repeats, args.warmup));
    let mut reports = Vec::new();
    for (name, cfg, loaded) in models {
        let model = match loaded {
            Some(m) => m,
            None => SeparatorModel::<f64>::build(&cfg, 0)?,
        };
        let r = match args.precision {
            Precision::F32 => compute_report(&name, &model.cast::<f32>(), args.seconds, timing, env.clone())?,
            Precision::F64 => compute_report(&name, &model, args.seconds, timing, env.clone())?,
        };
        reports.push(r);
    }
    Ok(emit_report(&reports, args.format))
}

/// Runs the selected suites, printing one line per check; `Ok(true)` when
/// all passed.
pub fn cmd_verify(suite: &str, seed: u64, fault: Fault, out: &mut impl std::io::Write) -> Result<bool> {
    let suites = Suite::parse_selection(suite)?;
    init_threads(None);
    let mut all = true;
    for s in suites {
        for c in verify::run(s, seed, fault) {
            all &= c.passed;
            writeln!(out, "{c}")?;
        }
    }
    writeln!(out, "{}", if all { "all checks passed" } else { "some checks FAILED" })?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c = CliConfig::parse("[model]\nbase_dim = 16 # narrow\n\n[train]\nlr=1e-3\n[data]\nmode = fixed\n").unwrap();
        assert_eq!(c.model.base_dim, 16);
        assert_eq!(c.train.lr, 1e-3);
        let e = CliConfig::parse("[model]\nbase_dimm = 16\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(CliConfig::parse("[optim]\n").is_err());
        assert!(CliConfig::parse("lr = 1\n").is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = CliConfig::default();
        c.model.causal = true;
        c.train.max_steps = 7;
        c.data.ranges.snr_db = (-1.0, 1.5);
        assert_eq!(CliConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for k in MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(DATA_KEYS) {
            assert!(h.contains(k.key), "{}", k.key);
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
    }
}
