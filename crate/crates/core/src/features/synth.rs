//! Deterministic synthetic corpus: class-specific templates mixed into white
//! noise at a randomized SNR, written as 16 kHz PCM-16 WAV files.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::audio::{save_wav, AudioClip, TARGET_RATE};
use super::index::{Annotation, ClipLabels, ClipRecord, DatasetIndex, Split, PRIVATE_FILE};
use crate::error::{Error, Result};

pub const CORPUS_META_FILE: &str = "corpus.json";
const FADE_SECONDS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

impl SplitCounts {
    pub fn uniform(n: usize) -> Self {
        Self { strong: n, weak: n, unlabeled: n, validation: n }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Strong => self.strong,
            Split::Weak => self.weak,
            Split::Unlabeled => self.unlabeled,
            Split::Validation => self.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    pub classes: usize,
    pub clip_seconds: f64,
    /// Inclusive range of event-to-background SNR in dB.
    pub snr_db: (f64, f64),
    pub events_per_clip: (usize, usize),
    pub event_seconds: (f64, f64),
    pub background_rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: SplitCounts::uniform(10),
            classes: 4,
            clip_seconds: 10.0,
            snr_db: (10.0, 20.0),
            events_per_clip: (1, 3),
            event_seconds: (0.5, 3.0),
            background_rms: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.classes == 0 {
            return bad("at least one class is required; zero classes rejected");
        }
        if !(self.clip_seconds * TARGET_RATE as f64 >= 1024.0) || !self.clip_seconds.is_finite() {
            return bad("clip length must cover at least one analysis window");
        }
        let (dmin, dmax) = self.event_seconds;
        if !(dmin > 0.0 && dmin <= dmax && dmin <= self.clip_seconds) {
            return bad("event duration range must be positive, ordered and fit the clip");
        }
        if self.events_per_clip.0 > self.events_per_clip.1 || !(self.snr_db.0 <= self.snr_db.1) {
            return bad("ranges must be ordered");
        }
        if !(self.background_rms > 0.0 && self.background_rms < 1.0) {
            return bad("background rms must be in (0, 1)");
        }
        Ok(())
    }
}

/// Sound template for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassTemplate {
    Tone { freq: f64 },
    Chirp { from: f64, to: f64 },
    NoiseBurst { low: f64, high: f64 },
    Harmonic { f0: f64 },
}

impl ClassTemplate {
    /// Tone, chirp, noise burst and harmonic stack in turn, each anchored
    /// at a class-specific frequency so that classes stay separable.
    pub fn for_class(class: usize) -> Self {
        let anchor = 300.0 * 1.3f64.powi((class % 12) as i32) * (1.0 + 0.04 * (class / 12) as f64);
        match class % 4 {
            0 => ClassTemplate::Tone { freq: anchor },
            1 => ClassTemplate::Chirp { from: anchor, to: (anchor * 1.8).min(7500.0) },
            2 => ClassTemplate::NoiseBurst { low: anchor, high: (anchor * 2.0).min(7500.0) },
            _ => ClassTemplate::Harmonic { f0: anchor / 2.0 },
        }
    }

    pub fn name(&self, class: usize) -> String {
        let kind = match self {
            ClassTemplate::Tone { .. } => "tone",
            ClassTemplate::Chirp { .. } => "chirp",
            ClassTemplate::NoiseBurst { .. } => "noise",
            ClassTemplate::Harmonic { .. } => "harmonic",
        };
        format!("{kind}_{class}")
    }

    /// Unit-RMS waveform of `n` samples.
    fn render(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let sr = TARGET_RATE as f64;
        let mut out = vec![0.0; n];
        match *self {
            ClassTemplate::Tone { freq } => {
                let phase = rng.gen_range(0.0..2.0 * PI);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (2.0 * PI * freq * i as f64 / sr + phase).sin();
                }
            }
            ClassTemplate::Chirp { from, to } => {
                let span = n.max(1) as f64 / sr;
                let rate = (to - from) / span;
                for (i, o) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *o = (2.0 * PI * (from * t + 0.5 * rate * t * t)).sin();
                }
            }
            ClassTemplate::NoiseBurst { low, high } => {
                for _ in 0..40 {
                    let f = rng.gen_range(low..high);
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += (2.0 * PI * f * i as f64 / sr + phase).sin();
                    }
                }
            }
            ClassTemplate::Harmonic { f0 } => {
                for h in 1..=4 {
                    let amp = 1.0 / h as f64;
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += amp * (2.0 * PI * f0 * h as f64 * i as f64 / sr).sin();
                    }
                }
            }
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v /= rms);
        }
        out
    }
}

/// One generated clip with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub audio: AudioClip,
    pub events: Vec<Annotation>,
    pub snr_db: Vec<f64>,
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| ClassTemplate::for_class(c).name(c)).collect()
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Strong => 1,
        Split::Weak => 2,
        Split::Unlabeled => 3,
        Split::Validation => 4,
    }
}

/// Renders clip `i` of `split`. Each clip draws from its own stream, so
/// changing the count of one split leaves every other clip untouched.
pub fn synth_clip(cfg: &SynthConfig, split: Split, i: usize) -> Result<SynthClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split_stream(split) << 40) | i as u64);
    let sr = TARGET_RATE as f64;
    let n = (cfg.clip_seconds * sr).round() as usize;
    let mut samples: Vec<f64> =
        (0..n).map(|_| cfg.background_rms * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();

    let names = class_names(cfg.classes);
    let n_events = rng.gen_range(cfg.events_per_clip.0..=cfg.events_per_clip.1);
    let mut events: Vec<(usize, usize, usize)> = Vec::new();
    let mut snrs = Vec::new();
    for _ in 0..n_events {
        let class = rng.gen_range(0..cfg.classes);
        let dur = rng.gen_range(cfg.event_seconds.0..=cfg.event_seconds.1).min(cfg.clip_seconds);
        let len = ((dur * sr).round() as usize).clamp(1, n);
        let start = rng.gen_range(0..=n - len);
        let snr = rng.gen_range(cfg.snr_db.0..=cfg.snr_db.1);
        let wave = ClassTemplate::for_class(class).render(len, &mut rng);
        // same-class events never overlap, so the annotation stays a clean set of intervals
        if events.iter().any(|&(c, s, l)| c == class && start < s + l && s < start + len) {
            continue;
        }
        let gain = cfg.background_rms * 10f64.powf(snr / 20.0);
        let fade = ((FADE_SECONDS * sr) as usize).min(len / 2).max(1);
        for (j, w) in wave.iter().enumerate() {
            let env = (j.min(len - 1 - j) as f64 / fade as f64).min(1.0);
            samples[start + j] += gain * env * w;
        }
        events.push((class, start, len));
        snrs.push(snr);
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&k| (events[k].1, events[k].0));
    Ok(SynthClip {
        audio: AudioClip::new(samples, TARGET_RATE)?,
        events: order
            .iter()
            .map(|&k| {
                let (c, s, l) = events[k];
                Annotation { onset: s as f64 / sr, offset: (s + l) as f64 / sr, class: names[c].clone() }
            })
            .collect(),
        snr_db: order.iter().map(|&k| snrs[k]).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub index: DatasetIndex,
    /// Hidden strong labels of the unlabeled split.
    pub private: DatasetIndex,
}

impl SynthSummary {
    pub fn describe(&self) -> String {
        let mut s = format!("classes: {}\n", self.index.classes.join(", "));
        for split in Split::ALL {
            let source = if split == Split::Unlabeled { &self.private } else { &self.index };
            let events: usize = source
                .in_split(split)
                .map(|r| match &r.labels {
                    ClipLabels::Strong(e) => e.len(),
                    _ => 0,
                })
                .sum();
            s += &format!("{split}: {} clips, {events} annotated events\n", self.index.count(split));
        }
        s
    }
}

/// Writes the corpus under `out` and returns the index.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let classes = class_names(cfg.classes);
    let mut records = Vec::new();
    let mut private = Vec::new();
    std::fs::create_dir_all(out)?;
    for split in Split::ALL {
        let n = cfg.counts.get(split);
        if n > 0 {
            std::fs::create_dir_all(out.join(split.as_str()))?;
        }
        for i in 0..n {
            let clip = synth_clip(cfg, split, i)?;
            let path = format!("{split}/{split}_{i:04}.wav");
            save_wav(out.join(&path), &clip.audio)?;
            let labels = match split {
                Split::Strong | Split::Validation => ClipLabels::Strong(clip.events),
                Split::Weak => {
                    let mut tags: Vec<String> = clip.events.into_iter().map(|e| e.class).collect();
                    tags.sort_by_key(|t| classes.iter().position(|c| c == t));
                    tags.dedup();
                    ClipLabels::Weak(tags)
                }
                Split::Unlabeled => {
                    private.push(ClipRecord { path: path.clone(), split, labels: ClipLabels::Strong(clip.events) });
                    ClipLabels::None
                }
            };
            records.push(ClipRecord { path, split, labels });
        }
    }
    let index = DatasetIndex::new(classes.clone(), records)?;
    let private = DatasetIndex::new(classes, private)?;
    index.write_dir(out)?;
    std::fs::write(out.join(PRIVATE_FILE), private.to_tsv())?;
    let meta = serde_json::json!({
        "synth": cfg,
        "sample_rate": TARGET_RATE,
        "templates": (0..cfg.classes).map(ClassTemplate::for_class).collect::<Vec<_>>(),
    });
    std::fs::write(out.join(CORPUS_META_FILE), serde_json::to_string_pretty(&meta).expect("plain json") + "\n")?;
    Ok(SynthSummary { index, private })
}

/// Reads the clip length recorded by [`synth_generate`], if present.
pub fn corpus_clip_seconds(dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(dir.join(CORPUS_META_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["synth"]["clip_seconds"].as_f64()
}
