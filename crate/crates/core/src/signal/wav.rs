//! Mono WAV reading and writing. 16-bit integer and 32-bit float PCM only;
//! everything else is rejected rather than silently converted. Writes go
//! through a temp file in the target directory and rename into place.

use super::AudioClip;
use crate::{Error, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::io::{Cursor, Write};
use std::path::Path;

fn wav_err(path: &Path, e: hound::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Read a mono 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported encoding {bits}-bit {fmt:?}; use 16-bit PCM or 32-bit float",
                path.display()
            )));
        }
    };
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: contains no samples", path.display())));
    }
    AudioClip::new(samples, spec.sample_rate)
}

fn persist(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Write as 16-bit PCM; samples are clamped to [-1, 1] and quantized.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    let mut writer = WavWriter::new(&mut cursor, spec).map_err(|e| wav_err(path, e))?;
    for &x in &clip.samples {
        let v = (x.clamp(-1.0, 1.0) as f64 * 32768.0).round().clamp(-32768.0, 32767.0);
        writer.write_sample(v as i16).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    persist(path, cursor.get_ref())
}

/// Write as 32-bit float; sample values round-trip exactly.
pub fn write_wav_f32(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut cursor = Cursor::new(Vec::new());
    let mut writer = WavWriter::new(&mut cursor, spec).map_err(|e| wav_err(path, e))?;
    for &x in &clip.samples {
        writer.write_sample(x).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    persist(path, cursor.get_ref())
}
