use std::fs;
use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

const PCM: u16 = 1;
const SCALE: f64 = 32767.0;

pub fn wav_read(path: impl AsRef<Path>) -> Result<AudioClip> {
    wav_decode(&fs::read(path)?)
}

pub fn wav_write(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, wav_encode(clip))?;
    Ok(())
}

/// Mono PCM16 little-endian RIFF/WAVE; samples are clipped to [-1, 1].
pub fn wav_encode(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * SCALE).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Decode PCM16 WAV; multi-channel input is downmixed by averaging.
pub fn wav_decode(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(Error::codec(0, "file too short for a RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::codec(0, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::codec(8, "missing WAVE tag"));
    }
    let mut pos = 12usize;
    let mut format: Option<Format> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::codec(
                pos as u64 + 4,
                format!("chunk size {size} runs past end of file"),
            ));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::codec(pos as u64 + 4, "fmt chunk too small"));
                }
                let f = &bytes[body..body + size];
                let codec = u16::from_le_bytes([f[0], f[1]]);
                let channels = u16::from_le_bytes([f[2], f[3]]);
                let sample_rate = u32::from_le_bytes(f[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([f[14], f[15]]);
                if codec != PCM {
                    return Err(Error::codec(body as u64, format!("unsupported codec tag {codec:#06x}")));
                }
                if bits != 16 {
                    return Err(Error::codec(body as u64 + 14, format!("unsupported bit depth {bits}")));
                }
                if channels == 0 || sample_rate == 0 {
                    return Err(Error::codec(body as u64 + 2, "zero channels or sample rate"));
                }
                format = Some(Format { channels, sample_rate });
            }
            b"data" => {
                let fmt = format
                    .as_ref()
                    .ok_or_else(|| Error::codec(pos as u64, "data chunk before fmt chunk"))?;
                let ch = fmt.channels as usize;
                let frame_bytes = 2 * ch;
                if !size.is_multiple_of(frame_bytes) {
                    return Err(Error::codec(
                        pos as u64 + 4,
                        format!("data size {size} is not a whole number of frames"),
                    ));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|b| (i16::from_le_bytes([b[0], b[1]]) as f64 / SCALE).max(-1.0))
                            .sum();
                        sum / ch as f64
                    })
                    .collect();
                return AudioClip::new(samples, fmt.sample_rate);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body + size + (size & 1);
    }
    Err(Error::codec(pos as u64, "no data chunk"))
}
