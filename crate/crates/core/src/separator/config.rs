use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mamba::{BambaStackConfig, MambaBlockConfig};
use crate::ssm::ScanAlgorithm;

/// Architecture of the separation U-Net.
///
/// `n_stages` counts Bamba stages and must be odd: `(n_stages - 1) / 2`
/// encoder stages, one bottleneck and as many decoder stages. The stem conv
/// already downsamples once, so the internal sequence is
/// `stride^((n_stages + 1) / 2)` times shorter than the input at the
/// bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorConfig {
    pub n_stages: usize,
    pub base_dim: usize,
    /// Mamba blocks per stage, summed over both branches.
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub n_sources: usize,
    pub causal: bool,
    pub sample_rate: u32,
    pub expand: usize,
    pub n_state: usize,
    pub d_conv: usize,
    pub d_skip: bool,
    pub rms_norm: bool,
    pub recombine_per_block: bool,
    pub scan: ScanAlgorithm,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self::small()
    }
}

/// Documentation for one configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

pub const MODEL_KEYS: &[KeyDoc] = &[
    KeyDoc { key: "n_stages", doc: "number of Bamba stages (odd): encoder + bottleneck + decoder" },
    KeyDoc { key: "base_dim", doc: "channel width of the first stage; doubles per downsampling (S: 64, M: 128)" },
    KeyDoc { key: "blocks_per_stage", doc: "Mamba blocks per stage over both branches (S: 8, M: 6)" },
    KeyDoc { key: "kernel_size", doc: "kernel of the down/up-sampling convolutions" },
    KeyDoc { key: "stride", doc: "stride of the down/up-sampling convolutions" },
    KeyDoc { key: "n_sources", doc: "number of separated outputs" },
    KeyDoc { key: "causal", doc: "causal Mamba blocks (two forward branches, streamable)" },
    KeyDoc { key: "sample_rate", doc: "sample rate in Hz" },
    KeyDoc { key: "expand", doc: "Mamba inner width factor" },
    KeyDoc { key: "n_state", doc: "SSM state size per channel" },
    KeyDoc { key: "d_conv", doc: "Mamba depthwise conv kernel" },
    KeyDoc { key: "d_skip", doc: "learned direct term D*x in the scan output" },
    KeyDoc { key: "rms_norm", doc: "RMS normalization before every Mamba block" },
    KeyDoc { key: "recombine_per_block", doc: "sum the two branches after every block (ablation)" },
    KeyDoc { key: "scan", doc: "scan algorithm: sequential or parallel" },
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl SeparatorConfig {
    /// The 7.2M-parameter configuration.
    pub fn small() -> Self {
        Self {
            n_stages: 5,
            base_dim: 64,
            blocks_per_stage: 8,
            kernel_size: 16,
            stride: 2,
            n_sources: 2,
            causal: false,
            sample_rate: 8000,
            expand: 2,
            n_state: 32,
            d_conv: 3,
            d_skip: true,
            rms_norm: false,
            recombine_per_block: false,
            scan: ScanAlgorithm::Sequential,
        }
    }

    /// The 22M-parameter configuration.
    pub fn medium() -> Self {
        Self {
            base_dim: 128,
            blocks_per_stage: 6,
            ..Self::small()
        }
    }

    /// A tiny two-level model for tests.
    pub fn toy() -> Self {
        Self {
            n_stages: 3,
            base_dim: 8,
            blocks_per_stage: 2,
            kernel_size: 4,
            expand: 2,
            n_state: 4,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_stages == 0 || self.n_stages % 2 == 0 {
            return fail(format!("n_stages must be odd, got {}", self.n_stages));
        }
        if self.base_dim == 0 || self.n_sources == 0 || self.sample_rate == 0 {
            return fail("base_dim, n_sources and sample_rate must be positive".into());
        }
        if self.blocks_per_stage < 2 || self.blocks_per_stage % 2 != 0 {
            return fail(format!(
                "blocks_per_stage counts both branches and must be even and >= 2, got {}",
                self.blocks_per_stage
            ));
        }
        if self.stride == 0 || self.kernel_size <= self.stride {
            return fail(format!(
                "kernel_size ({}) must exceed stride ({}) and stride must be >= 1",
                self.kernel_size, self.stride
            ));
        }
        self.block_config(self.base_dim).validate()
    }

    /// Number of downsampling convolutions after the stem.
    pub fn depth(&self) -> usize {
        (self.n_stages - 1) / 2
    }

    /// Channel width at level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.base_dim << k
    }

    /// Inputs are right-padded to a multiple of this length.
    pub fn frame_multiple(&self) -> usize {
        self.stride.pow(self.depth() as u32 + 1)
    }

    pub fn padded_len(&self, len: usize) -> usize {
        len.div_ceil(self.frame_multiple()) * self.frame_multiple()
    }

    /// Left padding of the sampling convolutions; the total is `K - stride`.
    pub fn pad_left(&self) -> usize {
        let total = self.kernel_size - self.stride;
        if self.causal {
            total
        } else {
            total / 2
        }
    }

    pub fn pad_right(&self) -> usize {
        self.kernel_size - self.stride - self.pad_left()
    }

    pub fn block_config(&self, d_model: usize) -> MambaBlockConfig {
        MambaBlockConfig {
            d_model,
            expand: self.expand,
            n_state: self.n_state,
            d_conv: self.d_conv,
            causal_conv: true,
            d_skip: self.d_skip,
            rms_norm: self.rms_norm,
            scan: self.scan,
        }
    }

    pub fn stack_config(&self, d_model: usize) -> BambaStackConfig {
        BambaStackConfig {
            n_blocks_per_branch: self.blocks_per_stage / 2,
            bidirectional: !self.causal,
            recombine_per_block: self.recombine_per_block,
            block: self.block_config(d_model),
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_stages", self.n_stages.to_string()),
            ("base_dim", self.base_dim.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("stride", self.stride.to_string()),
            ("n_sources", self.n_sources.to_string()),
            ("causal", self.causal.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("expand", self.expand.to_string()),
            ("n_state", self.n_state.to_string()),
            ("d_conv", self.d_conv.to_string()),
            ("d_skip", self.d_skip.to_string()),
            ("rms_norm", self.rms_norm.to_string()),
            ("recombine_per_block", self.recombine_per_block.to_string()),
            (
                "scan",
                match self.scan {
                    ScanAlgorithm::Sequential => "sequential".into(),
                    ScanAlgorithm::Parallel => "parallel".into(),
                },
            ),
        ]
    }

    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_stages" => self.n_stages = parse_num(key, v)?,
            "base_dim" => self.base_dim = parse_num(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_num(key, v)?,
            "kernel_size" => self.kernel_size = parse_num(key, v)?,
            "stride" => self.stride = parse_num(key, v)?,
            "n_sources" => self.n_sources = parse_num(key, v)?,
            "causal" => self.causal = parse_bool(key, v)?,
            "sample_rate" => self.sample_rate = parse_num(key, v)?,
            "expand" => self.expand = parse_num(key, v)?,
            "n_state" => self.n_state = parse_num(key, v)?,
            "d_conv" => self.d_conv = parse_num(key, v)?,
            "d_skip" => self.d_skip = parse_bool(key, v)?,
            "rms_norm" => self.rms_norm = parse_bool(key, v)?,
            "recombine_per_block" => self.recombine_per_block = parse_bool(key, v)?,
            "scan" => {
                self.scan = match v {
                    "sequential" => ScanAlgorithm::Sequential,
                    "parallel" => ScanAlgorithm::Parallel,
                    _ => return Err(Error::Config(format!("scan: expected sequential or parallel, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable 64-bit FNV-1a hash of the textual configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(text, "{k}={v}");
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
