//! Self-describing checkpoint files.
//!
//! Layout: the line `SEPM1`, the line `manifest_bytes=N`, `N` bytes of UTF-8
//! manifest, then a little-endian blob. The manifest has a `[config]`
//! section with the model keys, a `[tensors]` section with one
//! `name dtype shape offset len` line per tensor (offsets and lengths in
//! bytes into the blob, shape as `AxB`) and an optional `[state]` section of
//! free-form `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Precision, Real, Tensor};

use super::config::SeparatorConfig;
use super::net::SeparatorModel;

const MAGIC: &str = "SEPM1";

/// Everything recovered from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: SeparatorModel<T>,
    /// Tensors that are not model parameters, such as optimizer moments.
    pub extra: BTreeMap<String, Tensor<T>>,
    pub state: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Encodes a model plus extra tensors and state into checkpoint bytes.
pub fn encode<T: Real>(
    model: &SeparatorModel<T>,
    extra: &[(String, &Tensor<T>)],
    state: &[(String, String)],
) -> Vec<u8> {
    let mut manifest = String::from("[config]\n");
    for (k, v) in model.config().to_pairs() {
        let _ = writeln!(manifest, "{k}={v}");
    }
    manifest.push_str("[tensors]\n");
    let mut blob = Vec::new();
    let params = model.params.iter().map(|(_, n, t)| (n.to_string(), t));
    for (name, t) in params.chain(extra.iter().map(|(n, t)| (n.clone(), *t))) {
        let offset = blob.len();
        for &v in t.data() {
            v.extend_le_bytes(&mut blob);
        }
        let _ = writeln!(
            manifest,
            "{name} {} {} {offset} {}",
            T::PRECISION.name(),
            shape_text(t.shape()),
            blob.len() - offset
        );
    }
    if !state.is_empty() {
        manifest.push_str("[state]\n");
        for (k, v) in state {
            let _ = writeln!(manifest, "{k}={v}");
        }
    }
    let mut out = format!("{MAGIC}\nmanifest_bytes={}\n", manifest.len()).into_bytes();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out
}

/// Writes a checkpoint atomically (temporary file plus rename).
pub fn save<T: Real>(
    path: &Path,
    model: &SeparatorModel<T>,
    extra: &[(String, &Tensor<T>)],
    state: &[(String, String)],
) -> Result<()> {
    let bytes = encode(model, extra, state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split_line(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
    *pos += end + 1;
    String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8"))
}

fn read_values<T: Real>(raw: &[u8], dtype: Precision) -> Vec<T> {
    match dtype {
        Precision::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect(),
        Precision::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect(),
    }
}

/// Decodes checkpoint bytes, converting stored tensors to precision `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut pos = 0;
    if split_line(bytes, &mut pos)? != MAGIC {
        return Err(bad("not a SEPM1 checkpoint"));
    }
    let n: usize = split_line(bytes, &mut pos)?
        .strip_prefix("manifest_bytes=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing manifest_bytes"))?;
    let manifest = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("truncated manifest"))
        .and_then(|m| std::str::from_utf8(m).map_err(|_| bad("manifest is not UTF-8")))?;
    let blob = &bytes[pos + n..];

    let mut section = "";
    let mut cfg_pairs = Vec::new();
    let mut tensors = BTreeMap::new();
    let mut state = BTreeMap::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with('[') {
            section = match line {
                "[config]" | "[tensors]" | "[state]" => line,
                _ => return Err(bad(format!("unknown section {line}"))),
            };
            continue;
        }
        match section {
            "[config]" | "[state]" => {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line `{line}`")))?;
                if section == "[config]" {
                    cfg_pairs.push((k.to_string(), v.to_string()));
                } else {
                    state.insert(k.to_string(), v.to_string());
                }
            }
            "[tensors]" => {
                let f: Vec<&str> = line.split_whitespace().collect();
                let [name, dtype, shape, offset, len] = f[..] else {
                    return Err(bad(format!("bad tensor line `{line}`")));
                };
                let dtype = Precision::parse(dtype).map_err(|_| bad(format!("bad dtype `{dtype}`")))?;
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                    .collect::<Result<_>>()?;
                let (offset, len): (usize, usize) = match (offset.parse(), len.parse()) {
                    (Ok(o), Ok(l)) => (o, l),
                    _ => return Err(bad(format!("bad offsets in `{line}`"))),
                };
                let numel: usize = shape.iter().product();
                if numel * dtype.size_bytes() != len {
                    return Err(bad(format!("length of `{name}` does not match its shape")));
                }
                let raw = blob.get(offset..offset + len).ok_or_else(|| bad(format!("`{name}` exceeds the blob")))?;
                let t = Tensor::new(shape, read_values(raw, dtype))?;
                tensors.insert(name.to_string(), t);
            }
            _ => return Err(bad("content before the first section")),
        }
    }

    let cfg = SeparatorConfig::from_pairs(cfg_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| bad(format!("config: {e}")))?;
    let mut model = SeparatorModel::<T>::build(&cfg, 0)?;
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (name, slot) in names.iter().zip(model.params.tensors_mut()) {
        let t = tensors.remove(name).ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(Checkpoint {
        model,
        extra: tensors,
        state,
    })
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

impl<T: Real> SeparatorModel<T> {
    /// Saves weights and configuration only.
    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, self, &[], &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(load(path)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let model = SeparatorModel::<f32>::build(&SeparatorConfig::toy(), 9).unwrap();
        let m = Tensor::full(vec![2, 3], 0.5f32);
        let bytes = encode(&model, &[("adam.m/x".into(), &m)], &[("step".into(), "12".into())]);
        let ck = decode::<f32>(&bytes).unwrap();
        assert_eq!(ck.model.config(), model.config());
        for ((_, na, a), (_, nb, b)) in ck.model.params.iter().zip(model.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        assert_eq!(ck.extra["adam.m/x"], m);
        assert_eq!(ck.state["step"], "12");
        let wide = decode::<f64>(&bytes).unwrap();
        assert_eq!(wide.model.params.numel(), model.params.numel());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = SeparatorModel::<f32>::build(&SeparatorConfig::toy(), 1).unwrap();
        let bytes = encode(&model, &[], &[]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode::<f32>(b"garbage\n").is_err());
        let mut other = bytes.clone();
        let at = other.windows(10).position(|w| w == b"base_dim=8").unwrap();
        other[at + 9] = b'9';
        assert!(matches!(decode::<f32>(&other), Err(Error::Checkpoint(_))));
    }
}
