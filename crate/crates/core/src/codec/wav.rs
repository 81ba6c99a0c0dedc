//! Minimal RIFF/WAVE reader and writer for mono 16-bit PCM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tokens::{write_file, WaveformBuffer};

/// Encodes mono 16-bit PCM; samples are clamped to [-1, 1].
pub fn wav_bytes(wave: &WaveformBuffer) -> Vec<u8> {
    let data_len = (wave.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes mono or multi-channel 16-bit PCM; channels are averaged.
pub fn parse_wav(bytes: &[u8]) -> Result<WaveformBuffer> {
    let bad = |m: &str| Error::Malformed(format!("wav: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(bad("chunk runs past end of file"));
        }
        if id == b"fmt " {
            if len < 16 {
                return Err(bad("short fmt chunk"));
            }
            format = Some((u16_at(body), u16_at(body + 2), u32_at(body + 4), u16_at(body + 14)));
        } else if id == b"data" {
            let (tag, channels, rate, bits) = format.ok_or_else(|| bad("data before fmt"))?;
            if tag != 1 || bits != 16 || channels == 0 {
                return Err(bad("only 16-bit integer PCM is supported"));
            }
            let ch = channels as usize;
            let frames = len / (2 * ch);
            let samples = (0..frames)
                .map(|f| {
                    (0..ch)
                        .map(|c| {
                            let i = body + 2 * (f * ch + c);
                            i16::from_le_bytes([bytes[i], bytes[i + 1]]) as f64 / 32768.0
                        })
                        .sum::<f64>()
                        / ch as f64
                })
                .collect();
            return WaveformBuffer::new(samples, rate);
        }
        pos = body + len + (len & 1);
    }
    Err(bad("no data chunk"))
}

pub fn write_wav(path: &Path, wave: &WaveformBuffer) -> Result<()> {
    write_file(path, &wav_bytes(wave))
}

pub fn read_wav(path: &Path) -> Result<WaveformBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}
