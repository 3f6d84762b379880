//! Mono audio buffers and 16 kHz WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Energies below this are treated as silence (unit-peak buffers).
pub const ZERO_ENERGY: f64 = 1e-12;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        AudioBuffer { sample_rate, samples }
    }

    pub fn zeros(sample_rate: u32, len: usize) -> Self {
        AudioBuffer { sample_rate, samples: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn is_silent(&self) -> bool {
        self.energy() < ZERO_ENERGY
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer::new(self.sample_rate, self.samples.iter().map(|v| v * gain).collect())
    }

    /// Copy of `len` samples starting at `start`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> AudioBuffer {
        let mut out = vec![0.0; len];
        let avail = self.samples.len().saturating_sub(start).min(len);
        out[..avail].copy_from_slice(&self.samples[start..start + avail]);
        AudioBuffer::new(self.sample_rate, out)
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Sample encoding of a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Writes 16 kHz mono audio as 32-bit float WAV.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    write_wav_as(path, audio, WavEncoding::Float32)
}

pub fn write_wav_as(path: &Path, audio: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    let (bits_per_sample, sample_format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: audio.sample_rate, bits_per_sample, sample_format };
    let mut writer = WavWriter::create(path, spec)?;
    match encoding {
        WavEncoding::Float32 => {
            for &v in &audio.samples {
                writer.write_sample(v as f32)?;
            }
        }
        WavEncoding::Pcm16 => {
            for &v in &audio.samples {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a 16 kHz mono WAV file (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} Hz, expected {} Hz",
            path.display(),
            spec.sample_rate,
            SAMPLE_RATE
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Data(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<Vec<_>, _>>()?
        }
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::Data(format!("{}: unsupported encoding {:?}/{} bit", path.display(), fmt, bits)))
        }
    };
    Ok(AudioBuffer::new(spec.sample_rate, samples))
}
