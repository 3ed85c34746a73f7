//! WAV ingestion and output, plus a linear resampler.

use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every feature extractor expects.
pub const TARGET_RATE: u32 = 16_000;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns the clip at `rate`, interpolating linearly if needed.
    pub fn resampled(&self, rate: u32) -> Result<AudioClip> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        AudioClip::new(resample_linear(&self.samples, self.sample_rate, rate)?, rate)
    }
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) => {
            Error::Parse(format!("wav: truncated file or malformed header ({io})"))
        }
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Parse(format!("wav: {other}")),
    }
}

/// Reads a PCM-16 or float-32 WAV file, averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_wav(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_wav<R: Read>(reader: R) -> Result<AudioClip> {
    let mut wav = hound::WavReader::new(reader).map_err(wav_err)?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Parse("wav: zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => wav
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Parse(format!("wav: unsupported codec {fmt:?} with {bits} bits per sample")));
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clamping to the representable range.
pub fn write_wav<W: Write + Seek>(writer: W, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::new(writer, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.write_sample(q).map_err(wav_err)?;
    }
    out.finalize().map_err(wav_err)
}

pub fn save_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_wav(std::io::BufWriter::new(file), clip)
}

/// Linear-interpolation resampler. Output length is `round(n · to / from)`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let n_out = ((samples.len() as f64) * to as f64 / from as f64).round() as usize;
    let step = from as f64 / to as f64;
    let last = samples.len() - 1;
    Ok((0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let next = samples[(j + 1).min(last)];
            samples[j] * (1.0 - frac) + next * frac
        })
        .collect())
}
