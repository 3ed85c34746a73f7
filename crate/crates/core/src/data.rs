//! Loads a corpus into memory: log-mel features plus per-clip targets.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{encode_events, Event, EventList};
use crate::features::index::ClipLabels;
use crate::features::{load_wav, DatasetIndex, LogMelConfig, LogMelExtractor, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub path: String,
    pub split: Split,
    /// `T×n_mels` log-mel frames.
    pub features: Tensor,
    /// Frame labels at the feature rate, for strongly labeled clips.
    pub frame_labels: Option<Tensor>,
    /// Clip tags, for every labeled clip.
    pub tags: Option<Tensor>,
    /// Reference events with class ids, for strongly labeled clips.
    pub events: Option<EventList>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub features: LogMelConfig,
    pub clips: Vec<LoadedClip>,
}

impl Corpus {
    pub fn load(root: &Path, features: LogMelConfig) -> Result<Self> {
        let index = DatasetIndex::read_dir(root)?;
        Self::from_index(root, &index, features)
    }

    pub fn from_index(root: &Path, index: &DatasetIndex, features: LogMelConfig) -> Result<Self> {
        let ex = LogMelExtractor::new(features)?;
        let k = index.classes.len();
        let hop = features.hop_seconds();
        let clips = index
            .records
            .iter()
            .map(|r| {
                let audio = load_wav(root.join(&r.path))?;
                let spec = ex.extract(&audio)?;
                let t = spec.n_frames();
                let class_of = |name: &str| {
                    index.class_id(name).ok_or_else(|| Error::InvalidArgument(format!("unknown class {name}")))
                };
                let (frame_labels, events, tags) = match &r.labels {
                    ClipLabels::Strong(anns) => {
                        let events = EventList::new(
                            anns.iter()
                                .map(|a| Event::new(a.onset, a.offset.min(audio.duration()), class_of(&a.class)?))
                                .collect::<Result<_>>()?,
                        )?;
                        let frames = encode_events(&events, t, hop, k)?;
                        let mut tags = Tensor::zeros(&[k]);
                        for e in events.events() {
                            tags.data_mut()[e.class] = 1.0;
                        }
                        (Some(frames), Some(events), Some(tags))
                    }
                    ClipLabels::Weak(names) => {
                        let mut tags = Tensor::zeros(&[k]);
                        for n in names {
                            tags.data_mut()[class_of(n)?] = 1.0;
                        }
                        (None, None, Some(tags))
                    }
                    ClipLabels::None => (None, None, None),
                };
                Ok(LoadedClip { path: r.path.clone(), split: r.split, features: spec.frames, frame_labels, tags, events })
            })
            .collect::<Result<_>>()?;
        Ok(Self { classes: index.classes.clone(), features, clips })
    }

    pub fn split(&self, split: Split) -> Vec<&LoadedClip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    /// Keeps the first `limit` clips of every split.
    pub fn truncated(&self, limit: usize) -> Corpus {
        let mut seen = [0usize; 4];
        let clips = self
            .clips
            .iter()
            .filter(|c| {
                let i = Split::ALL.iter().position(|s| *s == c.split).unwrap_or(0);
                seen[i] += 1;
                seen[i] <= limit
            })
            .cloned()
            .collect();
        Corpus { classes: self.classes.clone(), features: self.features, clips }
    }

    /// Mean and standard deviation of all feature values in the training splits.
    pub fn feature_stats(&self) -> (f64, f64) {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for c in self.clips.iter().filter(|c| c.split != Split::Validation) {
            for &v in c.features.data() {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return (0.0, 1.0);
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        (mean, var.sqrt().max(1e-6))
    }
}
