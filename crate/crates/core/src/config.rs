//! Run configuration. The on-disk form is sectioned `key = value` text:
//!
//! ```text
//! # comment
//! [model]
//! variant = mfdconv
//! channels = 16,32,64
//! ```
//!
//! Any key can be overridden with `section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynconv::{ConvVariant, ConvVariantConfig};
use crate::error::{Error, Result};
use crate::eval::CollarParams;
use crate::features::LogMelConfig;
use crate::model::{ConvBlockConfig, CrnnConfig, WeakPooling};
use crate::ssl::{FrameGate, Thresholds};

/// Raw `section -> key -> value` text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigText {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("line {}: unterminated section header", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            if section.is_empty() {
                return Err(Error::Parse(format!("line {}: key outside any section", n + 1)));
            }
            out.set(&section, k.trim(), v.trim());
        }
        Ok(out)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override '{spec}' is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Parse(format!("override key '{path}' needs a section prefix")))?;
        self.set(section, key, value.trim());
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, keys) in &self.sections {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in keys {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslMode {
    Supervised,
    Mt,
    Cmt,
}

impl SslMode {
    pub const ALL: [SslMode; 3] = [SslMode::Supervised, SslMode::Mt, SslMode::Cmt];

    pub fn as_str(self) -> &'static str {
        match self {
            SslMode::Supervised => "supervised",
            SslMode::Mt => "mt",
            SslMode::Cmt => "cmt",
        }
    }
}

impl FromStr for SslMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SslMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown ssl mode '{s}' (supervised, mt, cmt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub conv: ConvVariantConfig,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// `(time, freq)` pooling per block.
    pub pools: Vec<(usize, usize)>,
    pub hidden: usize,
    pub weak_pooling: WeakPooling,
    /// Weight kept by the running batch-norm estimates at each update.
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslSection {
    pub mode: SslMode,
    pub thresholds: Thresholds,
    /// Median-filter length in seconds: one value for all classes or one per class.
    pub median_seconds: Vec<f64>,
    pub gate: FrameGate,
    pub lambda_max: f64,
    pub ramp_fraction: f64,
    pub ema_decay: f64,
    /// Standard deviation of Gaussian noise added to student and teacher
    /// inputs independently; 0 feeds both the same clean features.
    pub input_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub steps: usize,
    pub batch_strong: usize,
    pub batch_weak: usize,
    pub batch_unlabeled: usize,
    /// Validation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_model: EvalModel,
    /// Restricts training to the first `limit` clips of each split (0: all).
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub threshold: f64,
    pub collar: CollarParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub features: LogMelConfig,
    pub model: ModelSection,
    pub ssl: SslSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            features: LogMelConfig::default(),
            model: ModelSection {
                conv: ConvVariantConfig::mfdconv(4),
                channels: vec![16, 32, 64],
                kernel: 3,
                pools: vec![(2, 2), (2, 2), (1, 2)],
                hidden: 32,
                weak_pooling: WeakPooling::LinearSoftmax,
                bn_momentum: 0.9,
            },
            ssl: SslSection {
                mode: SslMode::Cmt,
                thresholds: Thresholds::default(),
                median_seconds: vec![0.45],
                gate: FrameGate::Clip,
                lambda_max: 2.0,
                ramp_fraction: 0.2,
                ema_decay: 0.999,
                input_noise: 0.0,
            },
            optim: OptimSection { lr: 0.01, momentum: 0.9, schedule: LrSchedule::Cosine },
            train: TrainSection {
                seed: 0,
                epochs: 10,
                steps: 0,
                batch_strong: 4,
                batch_weak: 4,
                batch_unlabeled: 8,
                eval_every: 0,
                eval_model: EvalModel::Teacher,
                limit: 0,
            },
            eval: EvalSection { threshold: 0.5, collar: CollarParams::default() },
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{section}.{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(section, key, p.trim())).collect()
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("{section}.{key}: expected a boolean, got '{v}'"))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = ConfigText::parse(text)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &ConfigText) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, keys) in &raw.sections {
            for (key, v) in keys {
                cfg.apply(section, key, v)?;
            }
        }
        cfg.model.conv = cfg.model.conv.clone().normalized()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let (s, k) = (section, key);
        match (s, k) {
            ("paths", "data") => self.data = PathBuf::from(v),
            ("paths", "out") => self.out = PathBuf::from(v),
            ("features", "win") => self.features.win = parse(s, k, v)?,
            ("features", "hop") => self.features.hop = parse(s, k, v)?,
            ("features", "n_mels") => self.features.n_mels = parse(s, k, v)?,
            ("features", "f_min") => self.features.f_min = parse(s, k, v)?,
            ("features", "f_max") => self.features.f_max = parse(s, k, v)?,
            ("model", "variant") => {
                let variant: ConvVariant = v.parse()?;
                let old = self.model.conv.clone();
                self.model.conv = ConvVariantConfig { variant, ..ConvVariantConfig::for_variant(variant, old.n) };
                self.model.conv.r = old.r;
                self.model.conv.temperature = old.temperature;
                self.model.conv.pooling = old.pooling;
                if variant == ConvVariant::MfdConv {
                    self.model.conv.enable_alpha_c = old.enable_alpha_c;
                    self.model.conv.enable_alpha_f = old.enable_alpha_f;
                    self.model.conv.enable_alpha_w = old.enable_alpha_w;
                }
            }
            ("model", "alpha_c") => self.model.conv.enable_alpha_c = parse_bool(s, k, v)?,
            ("model", "alpha_f") => self.model.conv.enable_alpha_f = parse_bool(s, k, v)?,
            ("model", "alpha_w") => self.model.conv.enable_alpha_w = parse_bool(s, k, v)?,
            ("model", "n") => self.model.conv.n = parse(s, k, v)?,
            ("model", "r") => self.model.conv.r = parse(s, k, v)?,
            ("model", "temperature") => self.model.conv.temperature = parse(s, k, v)?,
            ("model", "pooling") => self.model.conv.pooling = v.parse()?,
            ("model", "stem_kernel") => self.model.conv.stem_kernel = parse(s, k, v)?,
            ("model", "channels") => self.model.channels = parse_list(s, k, v)?,
            ("model", "kernel") => self.model.kernel = parse(s, k, v)?,
            ("model", "pools") => {
                self.model.pools = v
                    .split(',')
                    .map(|p| {
                        let (a, b) = p
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| Error::Parse(format!("model.pools: '{p}' is not TxF")))?;
                        Ok((parse(s, k, a)?, parse(s, k, b)?))
                    })
                    .collect::<Result<_>>()?
            }
            ("model", "hidden") => self.model.hidden = parse(s, k, v)?,
            ("model", "weak_pooling") => self.model.weak_pooling = v.parse()?,
            ("model", "bn_momentum") => self.model.bn_momentum = parse(s, k, v)?,
            ("ssl", "mode") => self.ssl.mode = v.parse()?,
            ("ssl", "phi_clip") => self.ssl.thresholds.phi_clip = parse(s, k, v)?,
            ("ssl", "phi_frame") => self.ssl.thresholds.phi_frame = parse(s, k, v)?,
            ("ssl", "median_seconds") => self.ssl.median_seconds = parse_list(s, k, v)?,
            ("ssl", "gate") => {
                self.ssl.gate = match v {
                    "clip" => FrameGate::Clip,
                    "clip-and-frame" => FrameGate::ClipAndFrame,
                    _ => return Err(Error::Parse(format!("ssl.gate: unknown gate '{v}'"))),
                }
            }
            ("ssl", "lambda_max") => self.ssl.lambda_max = parse(s, k, v)?,
            ("ssl", "ramp_fraction") => self.ssl.ramp_fraction = parse(s, k, v)?,
            ("ssl", "ema_decay") => self.ssl.ema_decay = parse(s, k, v)?,
            ("ssl", "input_noise") => self.ssl.input_noise = parse(s, k, v)?,
            ("optim", "lr") => self.optim.lr = parse(s, k, v)?,
            ("optim", "momentum") => self.optim.momentum = parse(s, k, v)?,
            ("optim", "schedule") => {
                self.optim.schedule = match v {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(Error::Parse(format!("optim.schedule: unknown schedule '{v}'"))),
                }
            }
            ("train", "seed") => self.train.seed = parse(s, k, v)?,
            ("train", "epochs") => self.train.epochs = parse(s, k, v)?,
            ("train", "steps") => self.train.steps = parse(s, k, v)?,
            ("train", "batch_strong") => self.train.batch_strong = parse(s, k, v)?,
            ("train", "batch_weak") => self.train.batch_weak = parse(s, k, v)?,
            ("train", "batch_unlabeled") => self.train.batch_unlabeled = parse(s, k, v)?,
            ("train", "eval_every") => self.train.eval_every = parse(s, k, v)?,
            ("train", "limit") => self.train.limit = parse(s, k, v)?,
            ("train", "eval_model") => {
                self.train.eval_model = match v {
                    "student" => EvalModel::Student,
                    "teacher" => EvalModel::Teacher,
                    _ => return Err(Error::Parse(format!("train.eval_model: unknown model '{v}'"))),
                }
            }
            ("eval", "threshold") => self.eval.threshold = parse(s, k, v)?,
            ("eval", "collar") => self.eval.collar.collar = parse(s, k, v)?,
            ("eval", "offset_fraction") => self.eval.collar.offset_fraction = parse(s, k, v)?,
            _ => return Err(Error::Parse(format!("unknown config key {s}.{k}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.features.validate()?;
        Thresholds::new(self.ssl.thresholds.phi_clip, self.ssl.thresholds.phi_frame)?;
        if self.model.channels.is_empty() || self.model.channels.len() != self.model.pools.len() {
            return bad(format!(
                "model.channels ({}) and model.pools ({}) must list the same number of blocks",
                self.model.channels.len(),
                self.model.pools.len()
            ));
        }
        if self.model.kernel.is_multiple_of(2) {
            return bad("model.kernel must be odd".into());
        }
        if self.ssl.median_seconds.is_empty() || self.ssl.median_seconds.iter().any(|&s| !(s >= 0.0)) {
            return bad("ssl.median_seconds must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ssl.ema_decay) || !(self.ssl.lambda_max >= 0.0) {
            return bad("ssl.ema_decay must be in [0,1) and ssl.lambda_max ≥ 0".into());
        }
        if !(self.ssl.input_noise >= 0.0) {
            return bad("ssl.input_noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ssl.ramp_fraction) {
            return bad("ssl.ramp_fraction must be in [0,1]".into());
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            return bad("optim.lr must be positive and optim.momentum in [0,1)".into());
        }
        if self.train.batch_strong + self.train.batch_weak == 0 {
            return bad("at least one labeled clip per batch is required".into());
        }
        if self.train.steps == 0 && self.train.epochs == 0 {
            return bad("train.epochs or train.steps must be positive".into());
        }
        if !(0.0 < self.eval.threshold && self.eval.threshold < 1.0) {
            return bad("eval.threshold must be in (0,1)".into());
        }
        Ok(())
    }

    /// Network configuration for `n_classes` classes.
    pub fn crnn(&self, n_classes: usize) -> CrnnConfig {
        let mut cfg = CrnnConfig::desk_default(n_classes);
        cfg.n_mels = self.features.n_mels;
        cfg.hidden = self.model.hidden;
        cfg.weak_pooling = self.model.weak_pooling;
        cfg.bn_momentum = self.model.bn_momentum;
        cfg.blocks = self
            .model
            .channels
            .iter()
            .zip(&self.model.pools)
            .map(|(&c_out, &pool)| ConvBlockConfig { c_out, k: self.model.kernel, pool, conv: self.model.conv.clone() })
            .collect();
        cfg
    }

    /// Text form that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let c = &self.model.conv;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut raw = ConfigText::default();
        let mut put = |s: &str, k: &str, v: String| raw.set(s, k, &v);
        put("paths", "data", self.data.display().to_string());
        put("paths", "out", self.out.display().to_string());
        put("features", "win", self.features.win.to_string());
        put("features", "hop", self.features.hop.to_string());
        put("features", "n_mels", self.features.n_mels.to_string());
        put("features", "f_min", self.features.f_min.to_string());
        put("features", "f_max", self.features.f_max.to_string());
        put("model", "variant", c.variant.to_string());
        put("model", "alpha_c", c.enable_alpha_c.to_string());
        put("model", "alpha_f", c.enable_alpha_f.to_string());
        put("model", "alpha_w", c.enable_alpha_w.to_string());
        put("model", "n", c.n.to_string());
        put("model", "r", c.r.to_string());
        put("model", "temperature", c.temperature.to_string());
        put("model", "pooling", c.pooling.to_string());
        put("model", "stem_kernel", c.stem_kernel.to_string());
        put("model", "channels", self.model.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        put("model", "kernel", self.model.kernel.to_string());
        put("model", "pools", self.model.pools.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(","));
        put("model", "hidden", self.model.hidden.to_string());
        put("model", "weak_pooling", self.model.weak_pooling.to_string());
        put("model", "bn_momentum", self.model.bn_momentum.to_string());
        put("ssl", "mode", self.ssl.mode.as_str().into());
        put("ssl", "phi_clip", self.ssl.thresholds.phi_clip.to_string());
        put("ssl", "phi_frame", self.ssl.thresholds.phi_frame.to_string());
        put("ssl", "median_seconds", join(&self.ssl.median_seconds));
        put("ssl", "gate", match self.ssl.gate { FrameGate::Clip => "clip", FrameGate::ClipAndFrame => "clip-and-frame" }.into());
        put("ssl", "lambda_max", self.ssl.lambda_max.to_string());
        put("ssl", "ramp_fraction", self.ssl.ramp_fraction.to_string());
        put("ssl", "ema_decay", self.ssl.ema_decay.to_string());
        put("ssl", "input_noise", self.ssl.input_noise.to_string());
        put("optim", "lr", self.optim.lr.to_string());
        put("optim", "momentum", self.optim.momentum.to_string());
        put("optim", "schedule", match self.optim.schedule { LrSchedule::Cosine => "cosine", LrSchedule::Constant => "constant" }.into());
        put("train", "seed", self.train.seed.to_string());
        put("train", "epochs", self.train.epochs.to_string());
        put("train", "steps", self.train.steps.to_string());
        put("train", "batch_strong", self.train.batch_strong.to_string());
        put("train", "batch_weak", self.train.batch_weak.to_string());
        put("train", "batch_unlabeled", self.train.batch_unlabeled.to_string());
        put("train", "eval_every", self.train.eval_every.to_string());
        put("train", "limit", self.train.limit.to_string());
        put("train", "eval_model", match self.train.eval_model { EvalModel::Student => "student", EvalModel::Teacher => "teacher" }.into());
        put("eval", "threshold", self.eval.threshold.to_string());
        put("eval", "collar", self.eval.collar.collar.to_string());
        put("eval", "offset_fraction", self.eval.collar.offset_fraction.to_string());
        raw.render()
    }
}
