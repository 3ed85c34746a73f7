//! Mean-teacher machinery and the confident mean teacher.
//!
//! Pseudo-labels from teacher probabilities:
//!
//! ```text
//! clip:   y~_w(k)   = I(y^_w(k) > phi_clip)
//! frame:  y~_s(t,k) = MF_k( I(y^_w(k) > phi_clip) · I(y^_s(t,k) > phi_frame) )
//! ```
//!
//! Confidence weights `c_w = y^_w · y~_w` and `c_s = y^_s · y^_w · y~_s`
//! scale a per-entry BCE between pseudo-labels and student outputs.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{bce, Prediction};
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub phi_clip: f64,
    pub phi_frame: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { phi_clip: 0.5, phi_frame: 0.5 }
    }
}

impl Thresholds {
    pub fn new(phi_clip: f64, phi_frame: f64) -> Result<Self> {
        for (name, v) in [("phi_clip", phi_clip), ("phi_frame", phi_frame)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{} must lie in (0,1), got {}", name, v)));
            }
        }
        Ok(Self { phi_clip, phi_frame })
    }
}

/// Odd median-filter lengths, one per class, in frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianFilterSpec {
    windows: Vec<usize>,
}

impl MedianFilterSpec {
    pub fn new(windows: Vec<usize>) -> Result<Self> {
        if let Some(&w) = windows.iter().find(|&&w| w == 0 || w % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "median filter lengths must be odd and ≥ 1, got {}",
                w
            )));
        }
        Ok(Self { windows })
    }

    pub fn uniform(classes: usize, window: usize) -> Result<Self> {
        Self::new(vec![window; classes])
    }

    /// `round(seconds / frame_hop)`, bumped to the next odd number.
    pub fn from_duration(classes: usize, seconds: f64, frame_hop: f64) -> Result<Self> {
        if !(seconds >= 0.0 && frame_hop > 0.0) {
            return Err(Error::InvalidArgument("median filter duration and hop must be positive".into()));
        }
        let mut w = (seconds / frame_hop).round().max(1.0) as usize;
        if w.is_multiple_of(2) {
            w += 1;
        }
        Self::uniform(classes, w)
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn classes(&self) -> usize {
        self.windows.len()
    }
}

/// Binary median filter. The window is centred on each frame and shrinks
/// symmetrically near the ends, so it always has odd length and the
/// median is the majority vote.
pub fn median_filter(seq: &[u8], window: usize) -> Result<Vec<u8>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("median window must be odd, got {}", window)));
    }
    if seq.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("median filter input must be binary".into()));
    }
    let n = seq.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &v) in seq.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v as usize;
    }
    let half = window / 2;
    Ok((0..n)
        .map(|t| {
            let h = half.min(t).min(n - 1 - t);
            let ones = prefix[t + h + 1] - prefix[t - h];
            u8::from(ones > h)
        })
        .collect())
}

/// Applies each class's window to the matching column of a binary `T×K`
/// matrix.
pub fn median_filter_columns(binary: &Tensor, mf: &MedianFilterSpec) -> Result<Tensor> {
    if binary.rank() != 2 || binary.shape()[1] != mf.classes() {
        return Err(shape_err!(
            "median filter for {} classes applied to {:?}",
            mf.classes(),
            binary.shape()
        ));
    }
    let (t, k) = (binary.shape()[0], binary.shape()[1]);
    let mut out = binary.clone();
    for c in 0..k {
        let col: Vec<u8> = (0..t).map(|i| u8::from(binary.data()[i * k + c] > 0.5)).collect();
        for (i, v) in median_filter(&col, mf.windows()[c])?.into_iter().enumerate() {
            out.data_mut()[i * k + c] = v as f64;
        }
    }
    Ok(out)
}

/// How frame scores are gated before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameGate {
    /// Frames of classes whose clip score is at most `phi_clip` are zeroed.
    #[default]
    Clip,
    /// Additionally zero individual frame scores below `phi_clip`.
    ClipAndFrame,
}

/// Teacher outputs, pseudo-labels and confidence weights of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub y_hat_w: Tensor,
    pub y_hat_s: Tensor,
    pub y_tilde_w: Tensor,
    pub y_tilde_s: Tensor,
    pub c_w: Tensor,
    pub c_s: Tensor,
}

fn check_pair(y_hat_w: &Tensor, y_hat_s: &Tensor) -> Result<(usize, usize)> {
    if y_hat_w.rank() != 1 || y_hat_s.rank() != 2 || y_hat_s.shape()[1] != y_hat_w.shape()[0] {
        return Err(shape_err!(
            "clip scores {:?} and frame scores {:?} disagree",
            y_hat_w.shape(),
            y_hat_s.shape()
        ));
    }
    Ok((y_hat_s.shape()[0], y_hat_s.shape()[1]))
}

/// Clip and frame pseudo-labels from teacher probabilities.
pub fn make_pseudo_labels(
    y_hat_w: &Tensor,
    y_hat_s: &Tensor,
    th: Thresholds,
    mf: &MedianFilterSpec,
    gate: FrameGate,
) -> Result<(Tensor, Tensor)> {
    let (t, k) = check_pair(y_hat_w, y_hat_s)?;
    let clip: Vec<f64> = y_hat_w.data().iter().map(|&p| f64::from(u8::from(p > th.phi_clip))).collect();
    let frames = Tensor::from_fn(&[t, k], |i| {
        let c = i % k;
        let mut s = y_hat_s.data()[i];
        if gate == FrameGate::ClipAndFrame && s < th.phi_clip {
            s = 0.0;
        }
        clip[c] * f64::from(u8::from(s > th.phi_frame))
    });
    Ok((Tensor::new(&[k], clip)?, median_filter_columns(&frames, mf)?))
}

/// `c_w(k) = y^_w(k)·I(y~_w(k)=1)`, `c_s(t,k) = y^_s(t,k)·y^_w(k)·I(y~_s(t,k)=1)`.
pub fn confidence_weights(
    y_hat_w: &Tensor,
    y_hat_s: &Tensor,
    y_tilde_w: &Tensor,
    y_tilde_s: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (t, k) = check_pair(y_hat_w, y_hat_s)?;
    if y_tilde_w.shape() != y_hat_w.shape() || y_tilde_s.shape() != y_hat_s.shape() {
        return Err(shape_err!("pseudo-labels do not match prediction shapes"));
    }
    let on = |v: f64| v == 1.0;
    let c_w = Tensor::from_fn(&[k], |c| if on(y_tilde_w.data()[c]) { y_hat_w.data()[c] } else { 0.0 });
    let c_s = Tensor::from_fn(&[t, k], |i| {
        if on(y_tilde_s.data()[i]) {
            y_hat_s.data()[i] * y_hat_w.data()[i % k]
        } else {
            0.0
        }
    });
    Ok((c_w, c_s))
}

pub fn pseudo_label_batch(
    teacher: &Prediction,
    th: Thresholds,
    mf: &MedianFilterSpec,
    gate: FrameGate,
) -> Result<PseudoLabelBatch> {
    let (y_tilde_w, y_tilde_s) = make_pseudo_labels(&teacher.weak, &teacher.strong, th, mf, gate)?;
    let (c_w, c_s) = confidence_weights(&teacher.weak, &teacher.strong, &y_tilde_w, &y_tilde_s)?;
    Ok(PseudoLabelBatch {
        y_hat_w: teacher.weak.clone(),
        y_hat_s: teacher.strong.clone(),
        y_tilde_w,
        y_tilde_s,
        c_w,
        c_s,
    })
}

/// Confidence-weighted BCE between pseudo-labels and student outputs:
/// `(Σ c_w·BCE / K, Σ c_s·BCE / (T·K))`. Pseudo-labels and weights enter
/// as constants, so only the student receives gradients.
pub fn cmt_consistency_loss<'t>(
    tape: &'t Tape,
    batch: &PseudoLabelBatch,
    student_strong: Var<'t>,
    student_weak: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if student_strong.shape() != batch.y_tilde_s.shape() || student_weak.shape() != batch.y_tilde_w.shape() {
        return Err(shape_err!(
            "student outputs {:?}/{:?} vs pseudo-labels {:?}/{:?}",
            student_strong.shape(),
            student_weak.shape(),
            batch.y_tilde_s.shape(),
            batch.y_tilde_w.shape()
        ));
    }
    let weighted = |pred: Var<'t>, labels: &Tensor, weights: &Tensor| -> Result<Var<'t>> {
        let per_entry = bce(pred, tape.constant(labels.clone()))?;
        Ok(per_entry.mul(tape.constant(weights.clone()))?.mean())
    };
    Ok((
        weighted(student_weak, &batch.y_tilde_w, &batch.c_w)?,
        weighted(student_strong, &batch.y_tilde_s, &batch.c_s)?,
    ))
}

/// Mean squared error against detached teacher probabilities, weak and
/// strong separately.
pub fn mt_consistency_loss<'t>(
    tape: &'t Tape,
    teacher: &Prediction,
    student_strong: Var<'t>,
    student_weak: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if student_strong.shape() != teacher.strong.shape() || student_weak.shape() != teacher.weak.shape() {
        return Err(shape_err!("teacher and student predictions differ in shape"));
    }
    let mse = |s: Var<'t>, t: &Tensor| -> Result<Var<'t>> { Ok(s.sub(tape.constant(t.clone()))?.square().mean()) };
    Ok((mse(student_weak, &teacher.weak)?, mse(student_strong, &teacher.strong)?))
}

/// Exponential moving average of the student in the teacher:
/// `θ_t ← decay·θ_t + (1−decay)·θ_s`, buffers included.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay {} outside [0,1]", decay)));
    }
    if !teacher.same_layout(student) {
        return Err(shape_err!("teacher and student parameter layouts differ"));
    }
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.get(id).data();
        let t = teacher.get_mut(id);
        if decay == 0.0 {
            t.data_mut().copy_from_slice(s);
        } else if decay < 1.0 {
            t.data_mut()
                .iter_mut()
                .zip(s)
                .for_each(|(a, &b)| *a = decay * *a + (1.0 - decay) * b);
        }
    }
    Ok(())
}

/// Teacher parameters with the decay schedule that drives them.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamStore,
    pub max_decay: f64,
}

impl TeacherState {
    /// Starts as an exact copy of the student.
    pub fn from_student(student: &ParamStore, max_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&max_decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {} outside [0,1)", max_decay)));
        }
        let mut params = student.clone();
        params.zero_grads();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.kind(id) == ParamKind::Trainable {
                params.get_mut(id).set_requires_grad(false);
            }
        }
        Ok(Self { params, max_decay })
    }

    /// Warm-up schedule `min(max_decay, (step+1)/(step+10))`.
    pub fn decay_at(&self, step: usize) -> f64 {
        self.max_decay.min((step as f64 + 1.0) / (step as f64 + 10.0))
    }

    pub fn update(&mut self, student: &ParamStore, step: usize) -> Result<f64> {
        let decay = self.decay_at(step);
        ema_update(&mut self.params, student, decay)?;
        Ok(decay)
    }
}

/// Sigmoid ramp-up `λ_max·exp(−5(1 − s/R)²)` over the first
/// `ramp_fraction` of training, then constant `λ_max`.
pub fn consistency_weight(step: usize, total_steps: usize, lambda_max: f64, ramp_fraction: f64) -> f64 {
    let ramp = ramp_fraction * total_steps as f64;
    if ramp <= 0.0 {
        return lambda_max;
    }
    let s = (step as f64).min(ramp) / ramp;
    lambda_max * (-5.0 * (1.0 - s) * (1.0 - s)).exp()
}
