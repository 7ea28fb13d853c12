//! RIFF/WAVE read and write: PCM 16-bit and IEEE float 32-bit, little-endian.
//! Other encodings are rejected with a diagnostic.

use std::fs;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::error::{DspError, Result};
use crate::Sample;

pub fn read_wav<T: Sample>(path: &Path) -> Result<AudioBuffer<T>> {
    let buf = fs::read(path)?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(DspError::Wav(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let size = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(buf.len());
        let body = &buf[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(DspError::Wav("fmt chunk too short".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| DspError::Wav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| DspError::Wav("missing data chunk".into()))?;

    let samples: Vec<T> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| T::f(i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0))
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| T::f(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        (f, b) => {
            return Err(DspError::Wav(format!(
                "unsupported encoding: format tag {f}, {b}-bit (want PCM16 or float32)"
            )))
        }
    };
    AudioBuffer::new(samples, rate, channels)
}

/// Write as IEEE float32 (the canonical on-disk form for this codec).
pub fn write_wav<T: Sample>(path: &Path, audio: &AudioBuffer<T>) -> Result<()> {
    write_wav_impl(path, audio, false)
}

/// Write as PCM 16-bit.
pub fn write_wav_pcm16<T: Sample>(path: &Path, audio: &AudioBuffer<T>) -> Result<()> {
    write_wav_impl(path, audio, true)
}

fn write_wav_impl<T: Sample>(path: &Path, audio: &AudioBuffer<T>, pcm16: bool) -> Result<()> {
    let n = audio.samples().len();
    let (format, bits, bytes_per) = if pcm16 { (1u16, 16u16, 2usize) } else { (3, 32, 4) };
    let data_len = n * bytes_per;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&audio.channels().to_le_bytes());
    out.extend_from_slice(&audio.sample_rate().to_le_bytes());
    let byte_rate = audio.sample_rate() * audio.channels() as u32 * bytes_per as u32;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&((audio.channels() as usize * bytes_per) as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in audio.samples() {
        let clamped = v.to64().clamp(-1.0, 1.0);
        if pcm16 {
            let q = (clamped * 32767.0).round() as i16;
            out.extend_from_slice(&q.to_le_bytes());
        } else {
            out.extend_from_slice(&(clamped as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
