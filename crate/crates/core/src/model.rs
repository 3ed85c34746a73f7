//! Convolutional recurrent network for sound event detection.
//!
//! `spec (T×F)` → conv blocks (any [`ConvVariant`], batch norm, ReLU,
//! average pooling) → mean over the remaining frequency bins → bidirectional
//! GRU → per-frame sigmoid head (strong) → pooled over time (weak).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynconv::{ConvVariant, ConvVariantConfig, DynConvLayer, FreqAttentionMaps};
use crate::error::{shape_err, Error, Result};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{gru_forward, BatchNormStats, GruCell, GruParams, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside every
/// cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeakPooling {
    /// `Σ p² / Σ p` per class.
    LinearSoftmax,
    Max,
    Mean,
}

impl FromStr for WeakPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear-softmax" => Ok(WeakPooling::LinearSoftmax),
            "max" => Ok(WeakPooling::Max),
            "mean" => Ok(WeakPooling::Mean),
            other => Err(Error::Parse(format!("unknown weak pooling {:?}", other))),
        }
    }
}

impl fmt::Display for WeakPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeakPooling::LinearSoftmax => "linear-softmax",
            WeakPooling::Max => "max",
            WeakPooling::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub c_out: usize,
    pub k: usize,
    /// Average-pool sizes `(time, frequency)` after the activation.
    pub pool: (usize, usize),
    pub conv: ConvVariantConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnnConfig {
    pub n_mels: usize,
    pub blocks: Vec<ConvBlockConfig>,
    /// GRU hidden size per direction.
    pub hidden: usize,
    pub n_classes: usize,
    pub weak_pooling: WeakPooling,
    pub batch_norm: bool,
    /// Running statistics keep this fraction of their old value per update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Global standardization applied to the input features.
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl CrnnConfig {
    /// Three blocks of 16/32/64 channels, 3×3 kernels, (2,2) pooling,
    /// GRU hidden 64, 128 mel bins, MFDConv with n = 4.
    pub fn desk_default(n_classes: usize) -> Self {
        let blocks = [16, 32, 64]
            .into_iter()
            .map(|c_out| ConvBlockConfig {
                c_out,
                k: 3,
                pool: (2, 2),
                conv: ConvVariantConfig::mfdconv(4),
            })
            .collect();
        Self {
            n_mels: 128,
            blocks,
            hidden: 64,
            n_classes,
            weak_pooling: WeakPooling::LinearSoftmax,
            batch_norm: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            feature_mean: 0.0,
            feature_std: 1.0,
        }
    }

    /// Uses `conv` in every block.
    pub fn with_conv(mut self, conv: ConvVariantConfig) -> Self {
        for b in &mut self.blocks {
            b.conv = conv.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("class count must be ≥ 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("at least one conv block is required".into()));
        }
        if self.hidden == 0 || self.n_mels == 0 {
            return Err(Error::InvalidArgument("hidden size and mel count must be positive".into()));
        }
        if self.blocks.iter().any(|b| b.pool.0 == 0 || b.pool.1 == 0 || b.c_out == 0) {
            return Err(Error::InvalidArgument("pool sizes and channel counts must be positive".into()));
        }
        if self.output_freqs() == 0 {
            return Err(Error::InvalidArgument(format!(
                "frequency pooling {:?} leaves no bins out of {}",
                self.blocks.iter().map(|b| b.pool.1).collect::<Vec<_>>(),
                self.n_mels
            )));
        }
        if !(self.feature_std > 0.0) || !self.feature_mean.is_finite() {
            return Err(Error::InvalidArgument("feature standardization must be finite with std > 0".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::InvalidArgument("bn_momentum must be in [0,1) and bn_eps positive".into()));
        }
        Ok(())
    }

    pub fn time_pools(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.pool.0).collect()
    }

    /// Frames at the output rate for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        self.blocks.iter().fold(t, |acc, b| acc / b.pool.0)
    }

    /// Frequency bins left before the recurrent stage averages them.
    pub fn output_freqs(&self) -> usize {
        self.blocks.iter().fold(self.n_mels, |acc, b| acc / b.pool.1)
    }

    /// Input frames per output frame.
    pub fn time_factor(&self) -> usize {
        self.time_pools().iter().product()
    }
}

/// Per-frame and per-clip probabilities of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `T×K`
    pub strong: Tensor,
    /// `K`
    pub weak: Tensor,
}

/// Whether batch norm uses the statistics of the current clip or the
/// running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

/// Forward result on a tape.
pub struct CrnnOutput<'t> {
    pub strong: Var<'t>,
    pub weak: Var<'t>,
    /// Batch statistics of every block (empty entries in running mode or
    /// without batch norm).
    pub bn_stats: Vec<Option<BatchNormStats>>,
}

/// Forward result of several clips on one tape.
pub struct BatchOutput<'t> {
    /// `(strong, weak)` per clip, in input order.
    pub clips: Vec<(Var<'t>, Var<'t>)>,
    /// Batch statistics of every block, pooled over the clips.
    pub bn_stats: Vec<Option<BatchNormStats>>,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv: DynConvLayer,
    bn: Option<BnIds>,
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

/// Trainable scalar counts split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub kernels: usize,
    pub attention: usize,
    pub other: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.kernels + self.attention + self.other
    }
}

#[derive(Debug, Clone)]
pub struct Crnn {
    pub cfg: CrnnConfig,
    blocks: Vec<Block>,
    gru: [GruIds; 2],
    head_w: ParamId,
    head_b: ParamId,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Crnn {
    /// Builds the network and registers freshly initialized parameters.
    pub fn new<R: Rng>(cfg: CrnnConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut c_in = 1;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let prefix = format!("block{}", i);
            let conv = DynConvLayer::new(&mut store, &format!("{}.conv", prefix), c_in, b.c_out, b.k, b.conv.clone(), rng)?;
            let bn = if cfg.batch_norm {
                let c = b.c_out;
                Some(BnIds {
                    gamma: store.add(format!("{}.bn.gamma", prefix), ParamKind::Trainable, Tensor::ones(&[c]))?,
                    beta: store.add(format!("{}.bn.beta", prefix), ParamKind::Trainable, Tensor::zeros(&[c]))?,
                    mean: store.add(format!("{}.bn.running_mean", prefix), ParamKind::Buffer, Tensor::zeros(&[c]))?,
                    var: store.add(format!("{}.bn.running_var", prefix), ParamKind::Buffer, Tensor::ones(&[c]))?,
                })
            } else {
                None
            };
            blocks.push(Block { conv, bn });
            c_in = b.c_out;
        }
        let h = cfg.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut gru_dir = |name: &str| -> Result<GruIds> {
            Ok(GruIds {
                w_ih: store.add(format!("gru.{}.w_ih", name), ParamKind::Trainable, uniform(rng, &[3 * h, c_in], bound))?,
                w_hh: store.add(format!("gru.{}.w_hh", name), ParamKind::Trainable, uniform(rng, &[3 * h, h], bound))?,
                b_ih: store.add(format!("gru.{}.b_ih", name), ParamKind::Trainable, uniform(rng, &[3 * h], bound))?,
                b_hh: store.add(format!("gru.{}.b_hh", name), ParamKind::Trainable, uniform(rng, &[3 * h], bound))?,
            })
        };
        let gru = [gru_dir("fwd")?, gru_dir("bwd")?];
        let head_bound = (1.0 / (2 * h) as f64).sqrt();
        let head_w = store.add("head.weight", ParamKind::Trainable, uniform(rng, &[cfg.n_classes, 2 * h], head_bound))?;
        let head_b = store.add("head.bias", ParamKind::Trainable, Tensor::zeros(&[cfg.n_classes]))?;
        Ok((Self { cfg, blocks, gru, head_w, head_b }, store))
    }

    /// Rebuilds the structure for `cfg` with placeholder values, ready for
    /// [`ParamStore::load_named`].
    pub fn skeleton(cfg: CrnnConfig) -> Result<(Self, ParamStore)> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &DynConvLayer> {
        self.blocks.iter().map(|b| &b.conv)
    }

    pub fn param_breakdown(&self, store: &ParamStore) -> ParamBreakdown {
        let kernels: usize = self
            .blocks
            .iter()
            .map(|b| store.get(b.conv.bank.kernels).numel())
            .sum();
        let attention: usize = self.blocks.iter().map(|b| b.conv.head_param_count(store)).sum();
        ParamBreakdown {
            kernels,
            attention,
            other: store.trainable_count() - kernels - attention,
        }
    }

    fn check_spec(&self, spec: &[usize]) -> Result<()> {
        if spec.len() != 2 || spec[1] != self.cfg.n_mels {
            return Err(shape_err!(
                "model expects T×{} features, got {:?}",
                self.cfg.n_mels,
                spec
            ));
        }
        if self.cfg.output_frames(spec[0]) == 0 {
            return Err(shape_err!(
                "{} frames vanish under time pooling by {}",
                spec[0],
                self.cfg.time_factor()
            ));
        }
        Ok(())
    }

    fn standardize<'t>(&self, spec: Var<'t>) -> Result<Var<'t>> {
        let s = spec.shape();
        spec
            .add_scalar(-self.cfg.feature_mean)
            .scale(1.0 / self.cfg.feature_std)
            .reshape(&[s[0], s[1], 1])
    }

    fn run_block<'t>(
        &self,
        block: &Block,
        h: Var<'t>,
        vars: &[Var<'t>],
        mode: BnMode,
        store: Option<&ParamStore>,
    ) -> Result<(Var<'t>, Option<BatchNormStats>)> {
        let mut h = block.conv.forward(h, vars)?;
        let mut stats = None;
        if let Some(bn) = block.bn {
            let (gamma, beta) = (vars[bn.gamma.index()], vars[bn.beta.index()]);
            let (out, s) = match mode {
                BnMode::Batch => h.batch_norm(gamma, beta, None, self.cfg.bn_eps)?,
                BnMode::Running => {
                    let (m, v) = match store {
                        Some(st) => (st.get(bn.mean).data().to_vec(), st.get(bn.var).data().to_vec()),
                        None => (
                            vars[bn.mean.index()].value().data().to_vec(),
                            vars[bn.var.index()].value().data().to_vec(),
                        ),
                    };
                    h.batch_norm(gamma, beta, Some((&m, &v)), self.cfg.bn_eps)?
                }
            };
            h = out;
            stats = s;
        }
        Ok((h.relu(), stats))
    }

    /// Full forward pass of one clip. `vars` comes from binding the
    /// parameter store on the same tape.
    pub fn forward<'t>(&self, vars: &[Var<'t>], spec: Var<'t>, mode: BnMode) -> Result<CrnnOutput<'t>> {
        let mut batch = self.forward_batch(vars, &[spec], mode)?;
        let (strong, weak) = batch.clips.pop().expect("one clip in, one clip out");
        Ok(CrnnOutput { strong, weak, bn_stats: batch.bn_stats })
    }

    /// Forward pass of several clips. In batch mode each block normalizes
    /// with statistics pooled over every frame of every clip, as if the
    /// clips were stacked along time; convolution and recurrence still see
    /// each clip on its own.
    pub fn forward_batch<'t>(&self, vars: &[Var<'t>], specs: &[Var<'t>], mode: BnMode) -> Result<BatchOutput<'t>> {
        if specs.is_empty() {
            return Err(Error::EmptySequence("forward pass over zero clips".into()));
        }
        let mut hs = specs
            .iter()
            .map(|s| {
                self.check_spec(&s.shape())?;
                self.standardize(*s)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bn_stats = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&self.cfg.blocks) {
            let conv: Vec<Var<'t>> = hs.iter().map(|h| block.conv.forward(*h, vars)).collect::<Result<_>>()?;
            let (normed, stats) = match (block.bn, mode) {
                (None, _) => (conv, None),
                (Some(bn), BnMode::Batch) => {
                    let (gamma, beta) = (vars[bn.gamma.index()], vars[bn.beta.index()]);
                    let lens: Vec<usize> = conv.iter().map(|c| c.shape()[0]).collect();
                    let stacked = if conv.len() == 1 { conv[0] } else { Var::concat(&conv, 0)? };
                    let (out, stats) = stacked.batch_norm(gamma, beta, None, self.cfg.bn_eps)?;
                    let parts = if lens.len() == 1 {
                        vec![out]
                    } else {
                        let mut at = 0;
                        lens.iter()
                            .map(|&l| {
                                at += l;
                                out.slice(0, at - l, at)
                            })
                            .collect::<Result<_>>()?
                    };
                    (parts, stats)
                }
                (Some(bn), BnMode::Running) => {
                    let (gamma, beta) = (vars[bn.gamma.index()], vars[bn.beta.index()]);
                    let m = vars[bn.mean.index()].value().data().to_vec();
                    let v = vars[bn.var.index()].value().data().to_vec();
                    let parts = conv
                        .iter()
                        .map(|c| Ok(c.batch_norm(gamma, beta, Some((&m, &v)), self.cfg.bn_eps)?.0))
                        .collect::<Result<_>>()?;
                    (parts, None)
                }
            };
            hs = normed.into_iter().map(|h| h.relu().avg_pool_2d(bc.pool)).collect::<Result<_>>()?;
            bn_stats.push(stats);
        }
        let clips = hs.into_iter().map(|h| self.head(vars, h)).collect::<Result<_>>()?;
        Ok(BatchOutput { clips, bn_stats })
    }

    fn head<'t>(&self, vars: &[Var<'t>], h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let seq = h.mean_axis(1)?;
        let cell = |g: &GruIds| GruCell {
            w_ih: vars[g.w_ih.index()],
            w_hh: vars[g.w_hh.index()],
            b_ih: vars[g.b_ih.index()],
            b_hh: vars[g.b_hh.index()],
        };
        let params = GruParams {
            forward: cell(&self.gru[0]),
            backward: Some(cell(&self.gru[1])),
        };
        let rnn = gru_forward(seq, &params, true)?;
        let logits = rnn
            .matmul(vars[self.head_w.index()].transpose()?)?
            .add(vars[self.head_b.index()])?;
        let strong = logits.sigmoid();
        let weak = pool_weak(strong, self.cfg.weak_pooling)?;
        Ok((strong, weak))
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, store: &ParamStore, spec: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let out = self.forward(&vars, tape.constant(spec.clone()), BnMode::Running)?;
        Ok(Prediction {
            strong: out.strong.detach(),
            weak: out.weak.detach(),
        })
    }

    /// Attention maps of conv block `layer` for one clip, computed in
    /// inference mode.
    pub fn attention_maps(&self, store: &ParamStore, spec: &Tensor, layer: usize) -> Result<FreqAttentionMaps> {
        let block = self.blocks.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {} out of range; the model has {} conv blocks", layer, self.blocks.len()))
        })?;
        if block.conv.cfg.variant == ConvVariant::Static {
            return Err(Error::InvalidArgument(format!(
                "layer {} is a static convolution and has no attention maps",
                layer
            )));
        }
        self.check_spec(spec.shape())?;
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let mut h = self.standardize(tape.constant(spec.clone()))?;
        for (b, bc) in self.blocks.iter().zip(&self.cfg.blocks).take(layer) {
            h = self.run_block(b, h, &vars, BnMode::Running, Some(store))?.0.avg_pool_2d(bc.pool)?;
        }
        Ok(block.conv.compute_attentions(h, &vars)?.values())
    }

    /// Folds batch statistics into the running estimates:
    /// `running ← m·running + (1−m)·mean(stats)`, averaging when several
    /// sets of statistics are given.
    pub fn update_running_stats(&self, store: &mut ParamStore, per_clip: &[Vec<Option<BatchNormStats>>]) {
        let m = self.cfg.bn_momentum;
        for (bi, block) in self.blocks.iter().enumerate() {
            let Some(bn) = block.bn else { continue };
            let stats: Vec<&BatchNormStats> = per_clip.iter().filter_map(|c| c.get(bi)?.as_ref()).collect();
            if stats.is_empty() {
                continue;
            }
            let n = stats.len() as f64;
            for (id, pick) in [(bn.mean, 0usize), (bn.var, 1)] {
                let t = store.get_mut(id);
                for (c, r) in t.data_mut().iter_mut().enumerate() {
                    let avg: f64 = stats
                        .iter()
                        .map(|s| if pick == 0 { s.mean[c] } else { s.var[c] })
                        .sum::<f64>()
                        / n;
                    *r = m * *r + (1.0 - m) * avg;
                }
            }
        }
    }

    /// Frame labels at input resolution, max-pooled to the output rate.
    pub fn downsample_labels(&self, labels: &Tensor) -> Result<Tensor> {
        downsample_labels(labels, &self.cfg.time_pools())
    }
}

/// Applies successive floor-sized max pools along time to a `T×K` label
/// matrix, mirroring the network's time pooling.
pub fn downsample_labels(labels: &Tensor, pools: &[usize]) -> Result<Tensor> {
    if labels.rank() != 2 {
        return Err(shape_err!("labels must be T×K, got {:?}", labels.shape()));
    }
    let k = labels.shape()[1];
    let mut cur = labels.clone();
    for &p in pools {
        let t = cur.shape()[0] / p;
        let mut out = vec![0.0f64; t * k];
        for (i, row) in out.chunks_mut(k).enumerate() {
            for j in 0..p {
                for (o, v) in row.iter_mut().zip(cur.row(i * p + j)) {
                    *o = (*o).max(*v);
                }
            }
        }
        cur = Tensor::new(&[t, k], out)?;
    }
    Ok(cur)
}

/// Clip probabilities from frame probabilities on the tape.
pub fn pool_weak(strong: Var<'_>, mode: WeakPooling) -> Result<Var<'_>> {
    let s = strong.shape();
    if s.len() != 2 {
        return Err(shape_err!("strong predictions must be T×K, got {:?}", s));
    }
    match mode {
        WeakPooling::Mean => strong.mean_axis(0),
        WeakPooling::Max => strong.reshape(&[s[0], s[1], 1])?.max_pool_2d((s[0], 1))?.reshape(&[s[1]]),
        WeakPooling::LinearSoftmax => {
            let num = strong.square().sum_axis(0)?;
            let den = strong.sum_axis(0)?.clamp(1e-300, f64::INFINITY);
            num.div(den)
        }
    }
}

/// Clip probabilities from a `T×K` matrix of frame probabilities.
pub fn weak_from_strong(strong: &Tensor, mode: WeakPooling) -> Result<Tensor> {
    if strong.rank() != 2 || strong.shape()[0] == 0 {
        return Err(shape_err!("strong predictions must be non-empty T×K, got {:?}", strong.shape()));
    }
    let (t, k) = (strong.shape()[0], strong.shape()[1]);
    let column = |c: usize| (0..t).map(move |i| strong.data()[i * k + c]);
    let out = (0..k)
        .map(|c| match mode {
            WeakPooling::Mean => column(c).sum::<f64>() / t as f64,
            WeakPooling::Max => column(c).fold(f64::NEG_INFINITY, f64::max),
            WeakPooling::LinearSoftmax => {
                let den: f64 = column(c).sum();
                if den == 0.0 {
                    0.0
                } else {
                    column(c).map(|p| p * p).sum::<f64>() / den
                }
            }
        })
        .collect();
    Tensor::new(&[k], out)
}

/// Elementwise binary cross-entropy with clamped predictions.
pub fn bce<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = target.mul(p.ln())?;
    let neg = target.one_minus().mul(p.one_minus().ln())?;
    Ok(pos.add(neg)?.neg())
}

/// Supervision available for one clip.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipTarget {
    /// Frame labels at the model's output rate (`T'×K`).
    Strong(Tensor),
    /// Clip tags (`K`).
    Weak(Tensor),
    Unlabeled,
}

impl ClipTarget {
    pub fn is_labeled(&self) -> bool {
        !matches!(self, ClipTarget::Unlabeled)
    }
}

pub struct SupervisedLoss<'t> {
    pub loss: Var<'t>,
    pub labeled: usize,
    /// Set when no clip carried labels; `loss` is then exactly 0.
    pub empty_mask: bool,
}

/// Mean over labeled clips of the mean BCE of each clip: strong clips are
/// scored frame by frame, weak clips on their clip probabilities.
pub fn supervised_loss<'t>(
    tape: &'t Tape,
    outputs: &[(Var<'t>, Var<'t>)],
    targets: &[ClipTarget],
) -> Result<SupervisedLoss<'t>> {
    if outputs.len() != targets.len() {
        return Err(shape_err!("{} predictions for {} targets", outputs.len(), targets.len()));
    }
    let mut terms = Vec::new();
    for (&(strong, weak), target) in outputs.iter().zip(targets) {
        let (pred, labels) = match target {
            ClipTarget::Strong(y) => (strong, y),
            ClipTarget::Weak(y) => (weak, y),
            ClipTarget::Unlabeled => continue,
        };
        if pred.shape() != labels.shape() {
            return Err(shape_err!(
                "prediction {:?} does not match labels {:?}",
                pred.shape(),
                labels.shape()
            ));
        }
        terms.push(bce(pred, tape.constant(labels.clone()))?.mean());
    }
    let labeled = terms.len();
    if labeled == 0 {
        return Ok(SupervisedLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            labeled,
            empty_mask: true,
        });
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(SupervisedLoss {
        loss: total.scale(1.0 / labeled as f64),
        labeled,
        empty_mask: false,
    })
}

/// Writes parameters plus a JSON trailer `{"model": cfg, ...extra}`.
pub fn write_model<W: Write>(w: W, model: &Crnn, store: &ParamStore, extra: serde_json::Value) -> Result<()> {
    let mut meta = match extra {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        _ => return Err(Error::InvalidArgument("checkpoint metadata must be a JSON object".into())),
    };
    meta.insert(
        "model".into(),
        serde_json::to_value(&model.cfg).map_err(|e| Error::Parse(e.to_string()))?,
    );
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    write_checkpoint(w, &store.named_tensors(), Some(&text))
}

/// Reads a checkpoint written by [`write_model`]. Returns the model, its
/// parameters and the remaining metadata.
pub fn read_model<R: Read>(r: R) -> Result<(Crnn, ParamStore, serde_json::Value)> {
    let ckpt = read_checkpoint(r)?;
    let text = ckpt
        .trailer
        .ok_or_else(|| Error::Parse("checkpoint has no model configuration".into()))?;
    let mut meta: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint metadata: {}", e)))?;
    let cfg: CrnnConfig = serde_json::from_value(
        meta.remove("model")
            .ok_or_else(|| Error::Parse("checkpoint metadata lacks \"model\"".into()))?,
    )
    .map_err(|e| Error::Parse(format!("model configuration: {}", e)))?;
    let (model, mut store) = Crnn::skeleton(cfg)?;
    store.load_named(&ckpt.tensors)?;
    Ok((model, store, serde_json::Value::Object(meta)))
}
