//! Mono waveform buffers, WAV file I/O and cubic sample-rate conversion.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default output rate of the pipeline.
pub const TARGET_RATE: u32 = 48_000;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting a zero rate or non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to_len(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::MalformedContainer(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported WAV feature".into()),
        hound::Error::TooWide => Error::UnsupportedEncoding("sample too wide".into()),
        other => Error::MalformedContainer(other.to_string()),
    }
}

/// Reads a PCM16 or float32 RIFF/WAVE file, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav_from(BufReader::new(file), path)
}

fn read_wav_from<R: Read>(reader: R, path: &Path) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::new(reader).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedContainer("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} with {bits} bits")));
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let samples: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. PCM16 output clips to [-1, 1].
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav_to(buf, BufWriter::new(file), encoding, path)
}

fn write_wav_to<W: Write + Seek>(
    buf: &AudioBuffer,
    writer: W,
    encoding: WavEncoding,
    path: &Path,
) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut w = hound::WavWriter::new(writer, spec).map_err(|e| map_hound(path, e))?;
    for &s in &buf.samples {
        let res = match encoding {
            WavEncoding::Pcm16 => w.write_sample(pcm16_quantize(s)),
            WavEncoding::Float32 => w.write_sample(s as f32),
        };
        res.map_err(|e| map_hound(path, e))?;
    }
    w.finalize().map_err(|e| map_hound(path, e))
}

fn pcm16_quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[inline]
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
    let b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
    let c = -0.5 * p0 + 0.5 * p2;
    ((a * t + b) * t + c) * t + p1
}

/// Piecewise-cubic (Catmull-Rom) resampling with edge replication.
///
/// No anti-aliasing is applied; callers that downsample must lowpass first.
pub fn resample_cubic(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = &buf.samples;
    let n = src.len();
    let out_len =
        ((n as f64) * target_rate as f64 / buf.sample_rate as f64).round() as usize;
    if n == 0 {
        return Ok(AudioBuffer::zeros(0, target_rate));
    }
    let at = |i: isize| src[i.clamp(0, n as isize - 1) as usize];
    let ratio = buf.sample_rate as f64 / target_rate as f64;
    let out = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as isize;
            let t = pos - i as f64;
            catmull_rom(at(i - 1), at(i), at(i + 1), at(i + 2), t)
        })
        .collect();
    Ok(AudioBuffer {
        samples: out,
        sample_rate: target_rate,
    })
}
