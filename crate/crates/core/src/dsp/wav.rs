use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono WAV file; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let wav_err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err("only integer PCM is supported".into()));
    }
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit samples, found {}",
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &audio.samples {
        let v = (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
