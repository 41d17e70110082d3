//! RIFF/WAVE reading and writing.
//!
//! Reads 16-bit PCM and 32-bit IEEE float, including
//! `WAVE_FORMAT_EXTENSIBLE` wrappers of either. Multichannel input is
//! averaged down to mono. Writes the canonical 44-byte header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::AudioBuffer;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding used by [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl WavEncoding {
    fn tag(self) -> u16 {
        match self {
            WavEncoding::Pcm16 => FORMAT_PCM,
            WavEncoding::Float32 => FORMAT_FLOAT,
        }
    }

    fn bits(self) -> u16 {
        match self {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        }
    }
}

fn wav_err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Quantizes to 16 bits; full scale is `[-1, 1)` with step `1/32768`.
pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a mono buffer as a canonical 44-byte-header WAV file.
pub fn encode_wav(buf: &AudioBuffer, enc: WavEncoding) -> Vec<u8> {
    let bytes_per = (enc.bits() / 8) as u32;
    let data_len = buf.samples.len() as u32 * bytes_per;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&enc.tag().to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * bytes_per).to_le_bytes());
    out.extend_from_slice(&(bytes_per as u16).to_le_bytes());
    out.extend_from_slice(&enc.bits().to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in &buf.samples {
        match enc {
            WavEncoding::Pcm16 => out.extend_from_slice(&quantize_pcm16(x).to_le_bytes()),
            WavEncoding::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(path: &Path, buf: &AudioBuffer, enc: WavEncoding) -> Result<()> {
    fs::write(path, encode_wav(buf, enc)).map_err(|e| wav_err(format!("{}: {e}", path.display())))
}

/// Decodes a WAV byte string into a mono buffer.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).ok_or_else(|| wav_err("chunk size overflow"))?;
        match id {
            b"fmt " => {
                if size < 16 || end > bytes.len() {
                    return Err(wav_err("truncated fmt chunk"));
                }
                let mut tag = le_u16(bytes, body);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(wav_err("truncated extensible fmt chunk"));
                    }
                    tag = le_u16(bytes, body + 24);
                }
                fmt = Some((tag, le_u16(bytes, body + 2), le_u32(bytes, body + 4), le_u16(bytes, body + 14)));
            }
            b"data" => {
                // tolerate writers that leave the size of a streamed file unset
                data = Some(&bytes[body..end.min(bytes.len())]);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| wav_err("no fmt chunk"))?;
    let data = data.ok_or_else(|| wav_err("no data chunk"))?;
    if channels == 0 || sample_rate == 0 {
        return Err(wav_err("zero channels or sample rate"));
    }
    let width = match (tag, bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        _ => return Err(wav_err(format!("unsupported codec: format tag {tag} with {bits} bits"))),
    };
    let frame = width * channels as usize;
    if data.len() % frame != 0 {
        return Err(wav_err("data length is not a whole number of frames"));
    }
    if channels > 1 {
        log::warn!("downmixing {channels}-channel audio to mono");
    }
    let read = |c: &[u8]| -> f64 {
        if width == 2 {
            i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes(c.try_into().unwrap()) as f64
        }
    };
    let samples = data
        .chunks_exact(frame)
        .map(|f| f.chunks_exact(width).map(read).sum::<f64>() / channels as f64)
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| wav_err(format!("{}: {e}", path.display())))?;
    decode_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, 8000).unwrap()
    }

    #[test]
    fn canonical_header_layout() {
        let b = encode_wav(&buf(vec![0.0; 10]), WavEncoding::Pcm16);
        assert_eq!(b.len(), 44 + 20);
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(le_u32(&b, 4), 36 + 20);
        assert_eq!(&b[8..16], b"WAVEfmt ");
        assert_eq!(le_u32(&b, 16), 16);
        assert_eq!(le_u16(&b, 20), 1);
        assert_eq!(le_u16(&b, 22), 1);
        assert_eq!(le_u32(&b, 24), 8000);
        assert_eq!(le_u32(&b, 28), 16000);
        assert_eq!(le_u16(&b, 32), 2);
        assert_eq!(le_u16(&b, 34), 16);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(le_u32(&b, 40), 20);
    }

    #[test]
    fn stereo_is_averaged() {
        let mut b = encode_wav(&buf(vec![0.5, -0.25, 0.25, 0.75]), WavEncoding::Float32);
        b[22] = 2; // channels
        let a = decode_wav(&b).unwrap();
        assert_eq!(a.samples, vec![0.125, 0.5]);
    }

    #[test]
    fn malformed_input_is_described() {
        assert!(matches!(decode_wav(b"RIFX"), Err(Error::Wav(_))));
        let mut b = encode_wav(&buf(vec![0.0; 4]), WavEncoding::Pcm16);
        b[34] = 24;
        let err = decode_wav(&b).unwrap_err().to_string();
        assert!(err.contains("unsupported codec"), "{err}");
    }
}
