//! Training loop: supervised, mean-teacher and confident-mean-teacher modes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalModel, LrSchedule, RunConfig, SslMode};
use crate::data::{Corpus, LoadedClip};
use crate::error::{Error, Result};
use crate::eval::{decode_events, CollarParams, EvaluationReport, EventList};
use crate::features::{load_wav, DatasetIndex, LogMelConfig, LogMelExtractor, Split};
use crate::model::{bce, read_model, write_model, BnMode, ClipTarget, Crnn, Prediction, supervised_loss};
use crate::ssl::{
    cmt_consistency_loss, consistency_weight, make_pseudo_labels, mt_consistency_loss, pseudo_label_batch,
    MedianFilterSpec, TeacherState,
};
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const NAN_DUMP_FILE: &str = "nan_batch.json";

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_w_con: f64,
    pub loss_s_con: f64,
    pub lambda: f64,
    pub pseudo_pos_rate_weak: f64,
    pub pseudo_pos_rate_strong: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub collar_f1: f64,
    pub psds1_like: f64,
    pub psds2_like: f64,
}

/// Median-filter windows at the model's output frame rate.
pub fn median_spec(seconds: &[f64], classes: usize, hop: f64) -> Result<MedianFilterSpec> {
    let per_class: Vec<f64> = match seconds.len() {
        1 => vec![seconds[0]; classes],
        n if n == classes => seconds.to_vec(),
        n => {
            return Err(Error::InvalidArgument(format!(
                "{n} median filter lengths for {classes} classes"
            )))
        }
    };
    let windows = per_class
        .iter()
        .map(|&s| Ok(MedianFilterSpec::from_duration(1, s, hop)?.windows()[0]))
        .collect::<Result<_>>()?;
    MedianFilterSpec::new(windows)
}

/// Cycles through a shuffled permutation of `0..n`, reshuffling on wrap.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// A training clip with its target at the output frame rate.
struct TrainClip<'c> {
    clip: &'c LoadedClip,
    target: ClipTarget,
}

fn targets_for<'c>(model: &Crnn, clips: &[&'c LoadedClip]) -> Result<Vec<TrainClip<'c>>> {
    clips
        .iter()
        .map(|c| {
            let target = match (&c.frame_labels, &c.tags) {
                (Some(frames), _) => ClipTarget::Strong(model.downsample_labels(frames)?),
                (None, Some(tags)) => ClipTarget::Weak(tags.clone()),
                _ => ClipTarget::Unlabeled,
            };
            Ok(TrainClip { clip: c, target })
        })
        .collect()
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Crnn,
    /// Parameters of the selected model (best on validation, else final).
    pub best: ParamStore,
    pub best_step: usize,
    pub best_report: Option<EvaluationReport>,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub metrics: Vec<StepMetrics>,
    pub validation: Vec<ValidationRecord>,
    pub total_steps: usize,
}

pub struct Trainer<'c> {
    cfg: RunConfig,
    pub model: Crnn,
    pub student: ParamStore,
    pub teacher: TeacherState,
    velocity: Vec<Vec<f64>>,
    strong: Vec<TrainClip<'c>>,
    weak: Vec<TrainClip<'c>>,
    unlabeled: Vec<TrainClip<'c>>,
    validation: Vec<&'c LoadedClip>,
    samplers: [Sampler; 3],
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    classes: Vec<String>,
    mf: MedianFilterSpec,
    out_hop: f64,
    pub total_steps: usize,
    step: usize,
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &RunConfig, corpus: &'c Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.features != cfg.features {
            return Err(Error::InvalidArgument("corpus features were extracted with a different configuration".into()));
        }
        let k = corpus.classes.len();
        let mut net_cfg = cfg.crnn(k);
        let (mean, std) = corpus.feature_stats();
        net_cfg.feature_mean = mean;
        net_cfg.feature_std = std;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (model, student) = Crnn::new(net_cfg, &mut init_rng)?;
        let teacher = TeacherState::from_student(&student, cfg.ssl.ema_decay)?;
        let velocity = student.iter().map(|(_, _, _, t)| vec![0.0; t.numel()]).collect();

        let strong = targets_for(&model, &corpus.split(Split::Strong))?;
        let weak = targets_for(&model, &corpus.split(Split::Weak))?;
        let unlabeled = targets_for(&model, &corpus.split(Split::Unlabeled))?;
        if strong.is_empty() && weak.is_empty() {
            return Err(Error::InvalidArgument("no labeled training clips".into()));
        }
        let total_steps = if cfg.train.steps > 0 {
            cfg.train.steps
        } else {
            let per_epoch = [
                (strong.len(), cfg.train.batch_strong),
                (weak.len(), cfg.train.batch_weak),
            ]
            .iter()
            .filter(|(n, b)| *n > 0 && *b > 0)
            .map(|(n, b)| n.div_ceil(*b))
            .max()
            .unwrap_or(1);
            per_epoch * cfg.train.epochs
        };
        let out_hop = cfg.features.hop_seconds() * model.cfg.time_factor() as f64;
        let mf = median_spec(&cfg.ssl.median_seconds, k, out_hop)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        noise_rng.set_stream(2);
        Ok(Self {
            cfg: cfg.clone(),
            samplers: [Sampler::new(strong.len()), Sampler::new(weak.len()), Sampler::new(unlabeled.len())],
            model,
            student,
            teacher,
            velocity,
            strong,
            weak,
            unlabeled,
            validation: corpus.split(Split::Validation),
            rng,
            noise_rng,
            classes: corpus.classes.clone(),
            mf,
            out_hop,
            total_steps,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn output_hop(&self) -> f64 {
        self.out_hop
    }

    pub fn median_filter(&self) -> &MedianFilterSpec {
        &self.mf
    }

    fn learning_rate(&self) -> f64 {
        match self.cfg.optim.schedule {
            LrSchedule::Constant => self.cfg.optim.lr,
            LrSchedule::Cosine => {
                let progress = self.step as f64 / self.total_steps.max(1) as f64;
                0.5 * self.cfg.optim.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Runs one optimization step and returns its log record.
    pub fn step(&mut self, dump_dir: Option<&Path>) -> Result<StepMetrics> {
        let t = &self.cfg.train;
        // indices are drawn for every split in every mode, so the batch
        // sequence does not depend on the training mode
        let picks = [
            self.samplers[0].draw(t.batch_strong, &mut self.rng),
            self.samplers[1].draw(t.batch_weak, &mut self.rng),
            self.samplers[2].draw(t.batch_unlabeled, &mut self.rng),
        ];
        let mode = self.cfg.ssl.mode;
        let mut batch: Vec<&TrainClip<'c>> = Vec::new();
        batch.extend(picks[0].iter().map(|&i| &self.strong[i]));
        batch.extend(picks[1].iter().map(|&i| &self.weak[i]));
        // unlabeled clips join every batch: they carry no supervised loss but
        // share the batch-norm statistics, whatever the mode
        batch.extend(picks[2].iter().map(|&i| &self.unlabeled[i]));
        let noise = self.cfg.ssl.input_noise;

        let tape = Tape::new();
        let vars = self.student.bind(&tape);
        let specs: Vec<_> = batch.iter().map(|c| tape.constant(perturb(&mut self.noise_rng, noise, &c.clip.features))).collect();
        let student_out = self.model.forward_batch(&vars, &specs, BnMode::Batch)?;
        let outputs = student_out.clips;
        let targets: Vec<ClipTarget> = batch.iter().map(|c| c.target.clone()).collect();
        let sup = supervised_loss(&tape, &outputs, &targets)?;

        let lambda = match mode {
            SslMode::Supervised => 0.0,
            _ => consistency_weight(self.step, self.total_steps, self.cfg.ssl.lambda_max, self.cfg.ssl.ramp_fraction),
        };
        let (mut w_con, mut s_con) = (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)));
        let (mut pos_w, mut pos_s) = (0.0, 0.0);
        if mode != SslMode::Supervised && !batch.is_empty() {
            let n = batch.len() as f64;
            let t_tape = Tape::new();
            let t_vars = self.teacher.params.bind(&t_tape);
            let t_specs: Vec<_> = batch.iter().map(|c| t_tape.constant(perturb(&mut self.noise_rng, noise, &c.clip.features))).collect();
            let t_out = self.model.forward_batch(&t_vars, &t_specs, BnMode::Batch)?;
            for (&(ts, tw), &(strong, weak)) in t_out.clips.iter().zip(&outputs) {
                let teacher = Prediction { strong: ts.detach(), weak: tw.detach() };
                let (lw, ls) = match mode {
                    SslMode::Cmt => {
                        let pl = pseudo_label_batch(&teacher, self.cfg.ssl.thresholds, &self.mf, self.cfg.ssl.gate)?;
                        pos_w += mean(&pl.y_tilde_w) / n;
                        pos_s += mean(&pl.y_tilde_s) / n;
                        cmt_consistency_loss(&tape, &pl, strong, weak)?
                    }
                    _ => {
                        let (yw, ys) = make_pseudo_labels(
                            &teacher.weak,
                            &teacher.strong,
                            self.cfg.ssl.thresholds,
                            &self.mf,
                            self.cfg.ssl.gate,
                        )?;
                        pos_w += mean(&yw) / n;
                        pos_s += mean(&ys) / n;
                        mt_consistency_loss(&tape, &teacher, strong, weak)?
                    }
                };
                w_con = w_con.add(lw.scale(1.0 / n))?;
                s_con = s_con.add(ls.scale(1.0 / n))?;
            }
        }
        let total = if lambda != 0.0 { sup.loss.add(w_con.add(s_con)?.scale(lambda))? } else { sup.loss };

        let metrics = StepMetrics {
            step: self.step,
            loss_total: total.item(),
            loss_sup: sup.loss.item(),
            loss_w_con: w_con.item(),
            loss_s_con: s_con.item(),
            lambda,
            pseudo_pos_rate_weak: pos_w,
            pseudo_pos_rate_strong: pos_s,
        };
        if ![metrics.loss_total, metrics.loss_sup, metrics.loss_w_con, metrics.loss_s_con]
            .iter()
            .all(|v| v.is_finite())
        {
            let paths: Vec<&str> = batch.iter().map(|c| c.clip.path.as_str()).collect();
            if let Some(dir) = dump_dir {
                let dump = serde_json::json!({ "step": self.step, "clips": paths, "metrics": metrics });
                std::fs::write(dir.join(NAN_DUMP_FILE), dump.to_string())?;
            }
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} (total {}, supervised {}); batch: {}",
                self.step,
                metrics.loss_total,
                metrics.loss_sup,
                paths.join(", ")
            )));
        }

        let grads = tape.backward(total)?;
        self.student.zero_grads();
        self.student.accumulate_grads(&vars, &grads)?;
        let lr = self.learning_rate();
        let momentum = self.cfg.optim.momentum;
        let ids: Vec<_> = self.student.ids().collect();
        for id in ids {
            if self.student.kind(id) != ParamKind::Trainable {
                continue;
            }
            let Some(g) = self.student.get(id).grad().map(<[f64]>::to_vec) else { continue };
            let v = &mut self.velocity[id.index()];
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = momentum * *vi + gi;
            }
            for (p, vi) in self.student.get_mut(id).data_mut().iter_mut().zip(v.iter()) {
                *p -= lr * vi;
            }
        }
        self.model.update_running_stats(&mut self.student, &[student_out.bn_stats]);
        self.teacher.update(&self.student, self.step)?;
        self.step += 1;
        Ok(metrics)
    }

    pub fn eval_store(&self) -> &ParamStore {
        match self.cfg.train.eval_model {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => &self.teacher.params,
        }
    }

    /// Scores `store` on the validation clips.
    pub fn validate(&self, store: &ParamStore) -> Result<Option<EvaluationReport>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        evaluate_clips(
            &self.model,
            store,
            &self.validation,
            &self.classes,
            self.cfg.eval.threshold,
            &self.mf,
            self.out_hop,
            self.cfg.eval.collar,
        )
        .map(Some)
    }

    /// Trains to completion, logging to `out` when given.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?))
            }
            None => None,
        };
        let mut val_log = match out {
            Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(dir.join(VALIDATION_FILE))?)),
            None => None,
        };
        let mut metrics = Vec::with_capacity(self.total_steps);
        let mut validation = Vec::new();
        let mut best: Option<(f64, usize, ParamStore, EvaluationReport)> = None;
        let every = self.cfg.train.eval_every;
        for _ in 0..self.total_steps {
            let m = self.step(out)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&m).map_err(|e| Error::Parse(e.to_string()))?)?;
            }
            metrics.push(m);
            let done = self.step == self.total_steps;
            if done || (every > 0 && self.step.is_multiple_of(every)) {
                if let Some(report) = self.validate(self.eval_store())? {
                    let (p1, p2, f1) = report.summary();
                    let rec = ValidationRecord { step: self.step, collar_f1: f1, psds1_like: p1, psds2_like: p2 };
                    if let Some(w) = val_log.as_mut() {
                        writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?)?;
                    }
                    validation.push(rec);
                    if best.as_ref().is_none_or(|b| f1 > b.0) {
                        best = Some((f1, self.step, self.eval_store().clone(), report));
                    }
                }
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        if let Some(mut w) = val_log {
            w.flush()?;
        }
        let (best_step, best_store, best_report) = match best {
            Some((_, s, p, r)) => (s, p, Some(r)),
            None => (self.step, self.eval_store().clone(), None),
        };
        let outcome = TrainOutcome {
            model: self.model.clone(),
            best: best_store,
            best_step,
            best_report,
            student: self.student,
            teacher: self.teacher.params,
            metrics,
            validation,
            total_steps: self.total_steps,
        };
        if let Some(dir) = out {
            let meta = checkpoint_meta(&self.cfg, &self.classes, outcome.best_step, outcome.best_report.as_ref());
            let file = std::fs::File::create(dir.join(CHECKPOINT_FILE))?;
            write_model(std::io::BufWriter::new(file), &outcome.model, &outcome.best, meta)?;
            std::fs::write(dir.join("config.txt"), self.cfg.to_text())?;
        }
        Ok(outcome)
    }
}

/// Adds Gaussian input noise drawn from its own stream, so batch sampling
/// is unaffected.
fn perturb(rng: &mut ChaCha8Rng, std: f64, features: &Tensor) -> Tensor {
    let mut out = features.clone();
    if std > 0.0 {
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
    out
}

fn mean(t: &Tensor) -> f64 {
    if t.numel() == 0 {
        0.0
    } else {
        t.data().iter().sum::<f64>() / t.numel() as f64
    }
}

fn checkpoint_meta(
    cfg: &RunConfig,
    classes: &[String],
    step: usize,
    report: Option<&EvaluationReport>,
) -> serde_json::Value {
    serde_json::json!({
        "classes": classes,
        "features": cfg.features,
        "median_seconds": cfg.ssl.median_seconds,
        "threshold": cfg.eval.threshold,
        "collar": cfg.eval.collar,
        "step": step,
        "validation": report.map(|r| r.summary()),
        "run": cfg,
    })
}

/// Loads the corpus named in `cfg` and trains, writing artifacts to `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let corpus = Corpus::load(&cfg.data, cfg.features)?;
    let corpus = if cfg.train.limit > 0 { corpus.truncated(cfg.train.limit) } else { corpus };
    Trainer::new(cfg, &corpus)?.run(Some(&cfg.out))
}

/// Runs inference with running statistics and scores the decoded events
/// against each clip's references.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clips(
    model: &Crnn,
    store: &ParamStore,
    clips: &[&LoadedClip],
    classes: &[String],
    threshold: f64,
    mf: &MedianFilterSpec,
    out_hop: f64,
    collar: CollarParams,
) -> Result<EvaluationReport> {
    if clips.is_empty() {
        return Err(Error::EmptySequence("no clips to evaluate".into()));
    }
    let pairs = clips
        .iter()
        .map(|c| {
            let reference = c
                .events
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no strong reference labels", c.path)))?;
            let pred = model.predict(store, &c.features)?;
            let hyp = decode_events(&pred.strong, threshold, mf, out_hop)?;
            Ok((reference, hyp))
        })
        .collect::<Result<Vec<(EventList, EventList)>>>()?;
    EvaluationReport::compute(&pairs, classes, collar)
}

/// Mean frame BCE of strongly labeled clips in inference mode.
pub fn strong_bce(model: &Crnn, store: &ParamStore, clips: &[&LoadedClip]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for c in clips {
        let Some(frames) = &c.frame_labels else { continue };
        let labels = model.downsample_labels(frames)?;
        let pred = model.predict(store, &c.features)?;
        let tape = Tape::new();
        total += bce(tape.constant(pred.strong), tape.constant(labels))?.mean().item();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySequence("no strongly labeled clips".into()));
    }
    Ok(total / n as f64)
}

/// A trained model plus the decoding settings it was validated with.
pub struct TrainedModel {
    pub model: Crnn,
    pub store: ParamStore,
    pub classes: Vec<String>,
    pub features: LogMelConfig,
    pub median_seconds: Vec<f64>,
    pub threshold: f64,
    pub collar: CollarParams,
}

impl TrainedModel {
    /// Reads a checkpoint written by a training run.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let (model, store, meta) = read_model(std::io::BufReader::new(file))?;
        let field = |name: &str| {
            meta.get(name)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks {:?}", name)))
        };
        let parse = |e: serde_json::Error| Error::Parse(format!("checkpoint metadata: {}", e));
        Ok(Self {
            classes: serde_json::from_value(field("classes")?).map_err(parse)?,
            features: serde_json::from_value(field("features")?).map_err(parse)?,
            median_seconds: serde_json::from_value(field("median_seconds")?).map_err(parse)?,
            threshold: serde_json::from_value(field("threshold")?).map_err(parse)?,
            collar: serde_json::from_value(field("collar")?).map_err(parse)?,
            model,
            store,
        })
    }

    /// Seconds per output frame.
    pub fn output_hop(&self) -> f64 {
        self.features.hop_seconds() * self.model.cfg.time_factor() as f64
    }

    /// Log-mel features of one audio file.
    pub fn clip_features(&self, path: &Path) -> Result<Tensor> {
        Ok(LogMelExtractor::new(self.features)?.extract(&load_wav(path)?)?.frames)
    }

    /// Scores the strongly labeled clips of `split` in the corpus at `data`.
    /// The corpus vocabulary must match the checkpoint's.
    pub fn evaluate(&self, data: &Path, split: Split) -> Result<EvaluationReport> {
        let index = DatasetIndex::read_dir(data)?;
        if index.classes != self.classes {
            return Err(Error::InvalidArgument(format!(
                "class vocabulary mismatch: checkpoint has [{}], corpus has [{}]",
                self.classes.join(", "),
                index.classes.join(", ")
            )));
        }
        let corpus = Corpus::from_index(data, &index, self.features)?;
        let clips = corpus.split(split);
        if clips.is_empty() {
            return Err(Error::EmptySequence(format!("the {} split of {} is empty", split, data.display())));
        }
        let hop = self.output_hop();
        let mf = median_spec(&self.median_seconds, self.classes.len(), hop)?;
        evaluate_clips(&self.model, &self.store, &clips, &self.classes, self.threshold, &mf, hop, self.collar)
    }
}
