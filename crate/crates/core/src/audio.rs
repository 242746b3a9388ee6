//! Mono PCM WAV input/output.

use std::io::Cursor;
use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::manifest::Segment;

/// Mono waveform, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

const PCM16_SCALE: f64 = 32768.0;

fn audio_err(e: impl std::fmt::Display) -> Error {
    Error::Audio(e.to_string())
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(audio_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(audio_err)?,
        (fmt, bits) => return Err(Error::Audio(format!("unsupported sample format {fmt:?}/{bits}"))),
    };
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    decode(reader)
}

/// Writes 16-bit signed little-endian mono PCM. Samples are clipped to the
/// representable range; values read back from a 16-bit file survive a
/// write/read cycle exactly.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for &s in &wave.samples {
        let q = (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

/// Reads a `wav.scp` value: either a file path or a shell command ending
/// in `|` whose standard output is a WAV stream.
pub fn read_audio_source(source: &str) -> Result<Waveform> {
    if let Some(cmd) = source.strip_suffix('|') {
        let out = Command::new("sh")
            .arg("-c")
            .arg(cmd.trim())
            .output()
            .map_err(|e| Error::Audio(format!("`{cmd}`: {e}")))?;
        if !out.status.success() {
            return Err(Error::Audio(format!("`{cmd}` exited with {}", out.status)));
        }
        let reader = hound::WavReader::new(Cursor::new(out.stdout)).map_err(audio_err)?;
        decode(reader)
    } else {
        read_wav(source)
    }
}

/// Sample range `[round(start·sr), round(end·sr))`, clamped to the signal.
pub fn segment_bounds(seg: &Segment, sample_rate: u32, len: usize) -> (usize, usize) {
    let sr = sample_rate as f64;
    let start = ((seg.start_sec * sr).round() as usize).min(len);
    let end = ((seg.end_sec * sr).round() as usize).clamp(start, len);
    (start, end)
}

/// Default loader for `from_data_directory`: reads the source and trims it
/// to the segment when one is given.
pub fn load_segment(source: &str, segment: Option<&Segment>) -> Result<Waveform> {
    let mut wave = read_audio_source(source)?;
    if let Some(seg) = segment {
        let (a, b) = segment_bounds(seg, wave.sample_rate, wave.samples.len());
        wave.samples = wave.samples[a..b].to_vec();
    }
    Ok(wave)
}
