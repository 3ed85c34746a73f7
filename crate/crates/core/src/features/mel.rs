//! Log-mel spectrogram: periodic Hann window, power STFT, HTK triangular
//! filterbank, natural log with a fixed floor.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::audio::{AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self { sample_rate: TARGET_RATE, win: 1024, hop: 313, n_mels: 128, f_min: 0.0, f_max: 8000.0 }
    }
}

impl LogMelConfig {
    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Frame count for `n` samples, or `None` when the clip is shorter than a window.
    pub fn frames_for(&self, n: usize) -> Option<usize> {
        (n >= self.win).then(|| (n - self.win) / self.hop + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win < 2 || self.hop == 0 || self.n_mels == 0 || self.sample_rate == 0 {
            return Err(Error::InvalidArgument(format!("bad log-mel config {self:?}")));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::InvalidArgument(format!("mel band {}..{} Hz out of range", self.f_min, self.f_max)));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels` rows of `win/2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &LogMelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.win / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.win as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { weights, centers: edges[1..=cfg.n_mels].to_vec() })
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    cfg: LogMelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new(cfg: LogMelConfig) -> Result<Self> {
        let bank = MelFilterbank::new(&cfg)?;
        let window = (0..cfg.win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.win);
        Ok(Self { cfg, window, fft, bank })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Mel energies before the log, `[T, n_mels]`.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<Tensor> {
        let clip = clip.resampled(self.cfg.sample_rate)?;
        let n = clip.samples.len();
        let frames = self.cfg.frames_for(n).ok_or_else(|| {
            Error::InvalidArgument(format!("clip has {n} samples, shorter than one {}-sample window", self.cfg.win))
        })?;
        let n_bins = self.cfg.win / 2 + 1;
        let mut out = Tensor::zeros(&[frames, self.cfg.n_mels]);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(clip.samples[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let row = &mut out.data_mut()[t * self.cfg.n_mels..(t + 1) * self.cfg.n_mels];
            self.bank.apply(&power, row);
        }
        Ok(out)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelSpec> {
        let mut frames = self.mel_power(clip)?;
        for v in frames.data_mut() {
            *v = (*v + LOG_FLOOR).ln();
        }
        Ok(LogMelSpec { frames, hop: self.cfg.hop_seconds() })
    }
}

/// `frames` is `[T, n_mels]`; `hop` is in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpec {
    pub frames: Tensor,
    pub hop: f64,
}

impl LogMelSpec {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// One-shot convenience over [`LogMelExtractor`].
pub fn logmel(clip: &AudioClip, cfg: LogMelConfig) -> Result<LogMelSpec> {
    LogMelExtractor::new(cfg)?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, n: usize) -> AudioClip {
        let s = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()).collect();
        AudioClip::new(s, 16_000).unwrap()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = LogMelConfig::default();
        let spec = logmel(&sine(440.0, 0.5, 160_000), cfg).unwrap();
        assert_eq!(spec.n_frames(), (160_000 - 1024) / 313 + 1);
        assert_eq!(spec.n_frames(), 508);
        assert_eq!(spec.n_mels(), 128);
        assert_eq!(logmel(&sine(1.0, 0.1, 1024), cfg).unwrap().n_frames(), 1);
    }

    #[test]
    fn short_clip_is_rejected() {
        let err = logmel(&sine(440.0, 0.5, 1023), LogMelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn silence_hits_the_floor() {
        let spec = logmel(&AudioClip::new(vec![0.0; 4000], 16_000).unwrap(), LogMelConfig::default()).unwrap();
        assert!(spec.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn htk_scale_round_trips() {
        for hz in [0.0, 100.0, 700.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filters_are_triangles_peaking_below_one() {
        let bank = MelFilterbank::new(&LogMelConfig::default()).unwrap();
        assert_eq!(bank.weights().len(), 128);
        assert!(bank.centers().windows(2).all(|w| w[0] < w[1]));
        for row in bank.weights() {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn resamples_other_rates() {
        let s: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.1).sin()).collect();
        let clip = AudioClip::new(s, 8000).unwrap();
        let spec = logmel(&clip, LogMelConfig::default()).unwrap();
        assert_eq!(spec.n_frames(), (16_000 - 1024) / 313 + 1);
    }
}
