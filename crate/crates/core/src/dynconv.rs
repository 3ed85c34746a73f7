//! Dynamic convolution variants.
//!
//! Every variant shares the same building blocks: a bank of `n` basis
//! kernels `W_i` (`n×C_out×C_in×k×k`) and an SE-style attention head that
//! squeezes the input over time (and, for the frequency-agnostic variants,
//! over frequency too), passes it through a 1-D stem convolution with
//! channel reduction `r`, and splits into up to three branches:
//!
//! * kernel weights `alpha_w` (`F×n`, softmax over `n` by default),
//! * output-channel gates `alpha_f` (`F×C_out`, sigmoid),
//! * input-channel gates `alpha_c` (`F×C_in`, sigmoid).
//!
//! | variant  | pooling   | alpha_w | alpha_f | alpha_c |
//! |----------|-----------|---------|---------|---------|
//! | static   | -         | -       | -       | -       |
//! | dyconv   | global    | yes     | -       | -       |
//! | fdconv   | frequency | yes     | -       | -       |
//! | odconv   | global    | yes     | yes     | yes     |
//! | mfdconv  | frequency | switch  | switch  | switch  |
//!
//! The spatial `k×k` axis is never modulated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{freq_dynamic_conv2d, AttentionInputs, Padding, ParamId, ParamKind, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    Static,
    DyConv,
    FdConv,
    OdConv,
    MfdConv,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 5] = [
        ConvVariant::Static,
        ConvVariant::DyConv,
        ConvVariant::FdConv,
        ConvVariant::OdConv,
        ConvVariant::MfdConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConvVariant::Static => "static",
            ConvVariant::DyConv => "dyconv",
            ConvVariant::FdConv => "fdconv",
            ConvVariant::OdConv => "odconv",
            ConvVariant::MfdConv => "mfdconv",
        }
    }
}

impl fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown conv variant {:?}", s)))
    }
}

/// Normalization applied to a branch output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Softmax,
    Sigmoid,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "softmax" => Ok(Normalization::Softmax),
            "sigmoid" => Ok(Normalization::Sigmoid),
            other => Err(Error::Parse(format!("unknown normalization {:?}", other))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Softmax => "softmax",
            Normalization::Sigmoid => "sigmoid",
        })
    }
}

/// What the attention head averages over before the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPooling {
    /// Average over time only: attentions vary with frequency.
    Frequency,
    /// Average over time and frequency: one attention row for all bins.
    Global,
}

impl FromStr for AttentionPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "frequency" => Ok(AttentionPooling::Frequency),
            "global" => Ok(AttentionPooling::Global),
            other => Err(Error::Parse(format!("unknown attention pooling {:?}", other))),
        }
    }
}

impl fmt::Display for AttentionPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionPooling::Frequency => "frequency",
            AttentionPooling::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvVariantConfig {
    pub variant: ConvVariant,
    pub enable_alpha_c: bool,
    pub enable_alpha_f: bool,
    pub enable_alpha_w: bool,
    /// Number of basis kernels.
    pub n: usize,
    /// Channel reduction ratio of the attention stem.
    pub r: usize,
    /// Stem 1-D kernel size along frequency.
    pub stem_kernel: usize,
    /// Branch 1-D kernel size along frequency.
    pub branch_kernel: usize,
    pub temperature: f64,
    pub kernel_norm: Normalization,
    pub channel_norm: Normalization,
    /// Only consulted by `mfdconv`; the other variants fix their pooling.
    pub pooling: AttentionPooling,
}

impl Default for ConvVariantConfig {
    fn default() -> Self {
        Self::mfdconv(4)
    }
}

impl ConvVariantConfig {
    fn base(variant: ConvVariant, n: usize, w: bool, f: bool, c: bool) -> Self {
        Self {
            variant,
            enable_alpha_c: c,
            enable_alpha_f: f,
            enable_alpha_w: w,
            n,
            r: 4,
            stem_kernel: 3,
            branch_kernel: 1,
            temperature: 1.0,
            kernel_norm: Normalization::Softmax,
            channel_norm: Normalization::Sigmoid,
            pooling: AttentionPooling::Frequency,
        }
    }

    pub fn static_conv() -> Self {
        Self::base(ConvVariant::Static, 1, false, false, false)
    }

    pub fn dyconv(n: usize) -> Self {
        Self::base(ConvVariant::DyConv, n, true, false, false)
    }

    pub fn fdconv(n: usize) -> Self {
        Self::base(ConvVariant::FdConv, n, true, false, false)
    }

    pub fn odconv(n: usize) -> Self {
        Self::base(ConvVariant::OdConv, n, true, true, true)
    }

    pub fn mfdconv(n: usize) -> Self {
        Self::base(ConvVariant::MfdConv, n, true, true, true)
    }

    /// Default configuration of a variant.
    pub fn for_variant(variant: ConvVariant, n: usize) -> Self {
        match variant {
            ConvVariant::Static => Self::static_conv(),
            ConvVariant::DyConv => Self::dyconv(n),
            ConvVariant::FdConv => Self::fdconv(n),
            ConvVariant::OdConv => Self::odconv(n),
            ConvVariant::MfdConv => Self::mfdconv(n),
        }
    }

    /// Brings the switches in line with the variant and checks ranges.
    pub fn normalized(mut self) -> Result<Self> {
        match self.variant {
            ConvVariant::Static => {
                self.n = 1;
                self.enable_alpha_c = false;
                self.enable_alpha_f = false;
                self.enable_alpha_w = false;
            }
            ConvVariant::DyConv | ConvVariant::FdConv => {
                self.enable_alpha_w = true;
                self.enable_alpha_f = false;
                self.enable_alpha_c = false;
            }
            ConvVariant::OdConv => {
                self.enable_alpha_w = true;
                self.enable_alpha_f = true;
                self.enable_alpha_c = true;
            }
            ConvVariant::MfdConv => {}
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("kernel count n must be ≥ 1".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidArgument("reduction ratio r must be ≥ 1".into()));
        }
        if self.stem_kernel.is_multiple_of(2) || self.branch_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("attention kernel sizes must be odd".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(self)
    }

    pub fn effective_pooling(&self) -> AttentionPooling {
        match self.variant {
            ConvVariant::DyConv | ConvVariant::OdConv => AttentionPooling::Global,
            ConvVariant::FdConv | ConvVariant::Static => AttentionPooling::Frequency,
            ConvVariant::MfdConv => self.pooling,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        self.variant != ConvVariant::Static
    }

    /// Width of the stem output: `max(1, C_in / r)`.
    pub fn reduced_channels(&self, c_in: usize) -> usize {
        (c_in / self.r).max(1)
    }
}

/// Parameter ids of a basis-kernel bank.
#[derive(Debug, Clone, Copy)]
pub struct DynKernelBank {
    /// `n×C_out×C_in×k×k` (or `C_out×C_in×k×k` for the static variant).
    pub kernels: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter ids of the attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub stem: Conv1dParams,
    pub branch_w: Option<Conv1dParams>,
    pub branch_f: Option<Conv1dParams>,
    pub branch_c: Option<Conv1dParams>,
}

/// Attention maps on the tape. Disabled branches are all-ones constants.
#[derive(Clone, Copy)]
pub struct FreqAttention<'t> {
    pub alpha_w: Var<'t>,
    pub alpha_f: Var<'t>,
    pub alpha_c: Var<'t>,
    pub enabled: [bool; 3],
}

impl<'t> FreqAttention<'t> {
    fn as_inputs(&self) -> AttentionInputs<'t> {
        AttentionInputs {
            kernel: self.enabled[0].then_some(self.alpha_w),
            out_channel: self.enabled[1].then_some(self.alpha_f),
            in_channel: self.enabled[2].then_some(self.alpha_c),
        }
    }

    pub fn values(&self) -> FreqAttentionMaps {
        FreqAttentionMaps {
            alpha_w: self.alpha_w.detach(),
            alpha_f: self.alpha_f.detach(),
            alpha_c: self.alpha_c.detach(),
            enabled: self.enabled,
        }
    }
}

/// Detached attention maps (`F×n`, `F×C_out`, `F×C_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct FreqAttentionMaps {
    pub alpha_w: Tensor,
    pub alpha_f: Tensor,
    pub alpha_c: Tensor,
    pub enabled: [bool; 3],
}

impl FreqAttentionMaps {
    /// All-ones maps with `alpha_w` fixed to the given row.
    pub fn identity(freqs: usize, n: usize, c_out: usize, c_in: usize) -> Self {
        Self {
            alpha_w: Tensor::full(&[freqs, n], 1.0 / n as f64),
            alpha_f: Tensor::ones(&[freqs, c_out]),
            alpha_c: Tensor::ones(&[freqs, c_in]),
            enabled: [n > 1, false, false],
        }
    }

    pub fn freqs(&self) -> usize {
        self.alpha_w.shape()[0]
    }

    /// One row per frequency bin; columns labelled `alpha_w_<i>`,
    /// `alpha_f_<o>`, `alpha_c_<c>` for the enabled branches.
    pub fn to_csv(&self) -> String {
        let branches = [("alpha_w", &self.alpha_w), ("alpha_f", &self.alpha_f), ("alpha_c", &self.alpha_c)];
        let mut header = vec!["freq_bin".to_string()];
        for ((name, t), &on) in branches.iter().zip(&self.enabled) {
            if on {
                header.extend((0..t.shape()[1]).map(|i| format!("{}_{}", name, i)));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for f in 0..self.freqs() {
            let mut row = vec![f.to_string()];
            for ((_, t), &on) in branches.iter().zip(&self.enabled) {
                if on {
                    row.extend(t.row(f).iter().map(|v| format!("{:.12}", v)));
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Effective kernel for output frequency `f`:
/// `Σ_i alpha_w[f,i] · alpha_f[f,o] · alpha_c[f,c] · W_i[o,c,:,:]`.
pub fn assemble_effective_kernel(bank: &Tensor, attn: &FreqAttentionMaps, f: usize) -> Result<Tensor> {
    let s = bank.shape();
    if s.len() != 5 {
        return Err(shape_err!("kernel bank must be n×C_out×C_in×k×k, got {:?}", s));
    }
    let (n, co, ci, kk) = (s[0], s[1], s[2], s[3] * s[4]);
    if f >= attn.freqs() {
        return Err(Error::Index(format!(
            "frequency {} out of range for {} bins",
            f,
            attn.freqs()
        )));
    }
    if attn.alpha_w.shape()[1] != n || attn.alpha_f.shape()[1] != co || attn.alpha_c.shape()[1] != ci {
        return Err(shape_err!("attention maps do not match bank {:?}", s));
    }
    let aw = attn.alpha_w.row(f);
    let af = attn.alpha_f.row(f);
    let ac = attn.alpha_c.row(f);
    let mut out = vec![0.0; co * ci * kk];
    for i in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let scale = aw[i] * af[o] * ac[c];
                let src = &bank.data()[((i * co + o) * ci + c) * kk..((i * co + o) * ci + c + 1) * kk];
                let dst = &mut out[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                dst.iter_mut().zip(src).for_each(|(d, w)| *d += scale * w);
            }
        }
    }
    Tensor::new(&[co, ci, s[3], s[4]], out)
}

fn normalize(v: Var<'_>, norm: Normalization, temperature: f64) -> Result<Var<'_>> {
    match norm {
        Normalization::Softmax => v.scale(1.0 / temperature).softmax(1),
        Normalization::Sigmoid => Ok(v.sigmoid()),
    }
}

/// One convolution layer of any variant, with its parameters registered
/// in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DynConvLayer {
    pub cfg: ConvVariantConfig,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub bank: DynKernelBank,
    pub head: Option<AttentionHead>,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-s..s))
}

fn add_conv1d<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<Conv1dParams> {
    Ok(Conv1dParams {
        weight: store.add(
            format!("{}.weight", name),
            ParamKind::Trainable,
            uniform_tensor(rng, &[c_out, c_in, k], c_in * k),
        )?,
        bias: store.add(format!("{}.bias", name), ParamKind::Trainable, Tensor::zeros(&[c_out]))?,
    })
}

impl DynConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: ConvVariantConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = cfg.normalized()?;
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}", k)));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        let fan_in = c_in * k * k;
        let kernel_shape: Vec<usize> = if cfg.is_dynamic() {
            vec![cfg.n, c_out, c_in, k, k]
        } else {
            vec![c_out, c_in, k, k]
        };
        let bank = DynKernelBank {
            kernels: store.add(
                format!("{}.kernels", prefix),
                ParamKind::Trainable,
                uniform_tensor(rng, &kernel_shape, fan_in),
            )?,
            bias: store.add(format!("{}.bias", prefix), ParamKind::Trainable, Tensor::zeros(&[c_out]))?,
        };
        let head = if cfg.is_dynamic() {
            let cm = cfg.reduced_channels(c_in);
            let (ks, kb) = (cfg.stem_kernel, cfg.branch_kernel);
            let stem = add_conv1d(store, rng, &format!("{}.attn.stem", prefix), cm, c_in, ks)?;
            let branch_w = if cfg.enable_alpha_w {
                Some(add_conv1d(store, rng, &format!("{}.attn.w", prefix), cfg.n, cm, kb)?)
            } else {
                None
            };
            let branch_f = if cfg.enable_alpha_f {
                Some(add_conv1d(store, rng, &format!("{}.attn.f", prefix), c_out, cm, kb)?)
            } else {
                None
            };
            let branch_c = if cfg.enable_alpha_c {
                Some(add_conv1d(store, rng, &format!("{}.attn.c", prefix), c_in, cm, kb)?)
            } else {
                None
            };
            Some(AttentionHead { stem, branch_w, branch_f, branch_c })
        } else {
            None
        };
        Ok(Self { cfg, c_in, c_out, k, bank, head })
    }

    /// Number of trainable scalars owned by the attention head.
    pub fn head_param_count(&self, store: &ParamStore) -> usize {
        let Some(h) = &self.head else { return 0 };
        [Some(h.stem), h.branch_w, h.branch_f, h.branch_c]
            .into_iter()
            .flatten()
            .map(|p| store.get(p.weight).numel() + store.get(p.bias).numel())
            .sum()
    }

    fn check_input(&self, x: Var<'_>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(shape_err!("conv layer expects T×F×C input, got {:?}", s));
        }
        if s[2] != self.c_in {
            return Err(shape_err!(
                "input has {} channels, layer expects {}",
                s[2],
                self.c_in
            ));
        }
        if s[0] == 0 || s[1] == 0 {
            return Err(shape_err!("empty input {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    /// Runs the attention head on `x` (`T×F×C_in`). Maps are always
    /// `F×·`; frequency-agnostic variants broadcast one row to every bin.
    pub fn compute_attentions<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<FreqAttention<'t>> {
        let (_, freqs) = self.check_input(x)?;
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("static convolution has no attention head".into()))?;
        let tape = x.tape();
        let pooled = x.mean_axis(0)?;
        let (pooled, rows) = match self.cfg.effective_pooling() {
            AttentionPooling::Frequency => (pooled, freqs),
            AttentionPooling::Global => (pooled.mean_axis(0)?.reshape(&[1, self.c_in])?, 1),
        };
        let conv = |input: Var<'t>, p: &Conv1dParams| {
            input.conv1d(vars[p.weight.index()], Some(vars[p.bias.index()]), Padding::Same)
        };
        let squeezed = conv(pooled, &head.stem)?.relu();
        let widen = |v: Var<'t>| -> Result<Var<'t>> {
            if rows == freqs {
                Ok(v)
            } else {
                let w = v.shape()[1];
                v.broadcast_to(&[freqs, w])
            }
        };
        let branch = |p: Option<&Conv1dParams>, width: usize, norm: Normalization| -> Result<Var<'t>> {
            match p {
                Some(p) => widen(normalize(conv(squeezed, p)?, norm, self.cfg.temperature)?),
                None => Ok(tape.constant(Tensor::ones(&[freqs, width]))),
            }
        };
        Ok(FreqAttention {
            alpha_w: branch(head.branch_w.as_ref(), self.cfg.n, self.cfg.kernel_norm)?,
            alpha_f: branch(head.branch_f.as_ref(), self.c_out, self.cfg.channel_norm)?,
            alpha_c: branch(head.branch_c.as_ref(), self.c_in, self.cfg.channel_norm)?,
            enabled: [head.branch_w.is_some(), head.branch_f.is_some(), head.branch_c.is_some()],
        })
    }

    /// Forward pass of the configured variant.
    pub fn forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        match self.cfg.variant {
            ConvVariant::Static => self.static_forward(x, vars),
            ConvVariant::DyConv => self.dyconv_forward(x, vars),
            ConvVariant::FdConv => self.fdconv_forward(x, vars),
            ConvVariant::OdConv => self.odconv_forward(x, vars),
            ConvVariant::MfdConv => self.mfdconv_forward(x, vars),
        }
    }

    fn kernels<'t>(&self, vars: &[Var<'t>]) -> Var<'t> {
        vars[self.bank.kernels.index()]
    }

    fn bias<'t>(&self, vars: &[Var<'t>]) -> Var<'t> {
        vars[self.bank.bias.index()]
    }

    fn static_forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_input(x)?;
        let mut kernel = self.kernels(vars);
        if kernel.shape().len() == 5 {
            kernel = kernel.reshape(&[self.c_out, self.c_in, self.k, self.k])?;
        }
        x.conv2d(kernel, Some(self.bias(vars)), Padding::Same)
    }

    /// Fused frequency-dynamic path: per output frequency, the kernel is
    /// `Σ_i alpha_w(f)_i · alpha_f(f) ⊙ alpha_c(f) ⊙ W_i`.
    pub fn mfdconv_forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        if !self.cfg.is_dynamic() {
            return self.static_forward(x, vars);
        }
        let attn = self.compute_attentions(x, vars)?;
        freq_dynamic_conv2d(x, self.kernels(vars), Some(self.bias(vars)), attn.as_inputs())
    }

    /// Aggregates the basis kernels with one input-dependent weight per
    /// kernel, then runs a single convolution.
    pub fn dyconv_forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let attn = self.global_attention_rows(x, vars)?;
        let kernel = self.aggregate_kernel(vars, attn[0], None, None)?;
        x.conv2d(kernel, Some(self.bias(vars)), Padding::Same)
    }

    /// Runs every basis kernel separately and mixes the `n` responses with
    /// frequency-dependent weights.
    pub fn fdconv_forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let attn = self.compute_attentions(x, vars)?;
        if attn.enabled[1] || attn.enabled[2] {
            return Err(Error::InvalidArgument(
                "fdconv route only supports kernel attention".into(),
            ));
        }
        let bank = self.kernels(vars);
        let (n, co, ci, k) = (self.cfg.n, self.c_out, self.c_in, self.k);
        let mut acc: Option<Var<'t>> = None;
        for i in 0..n {
            let w_i = bank.slice(0, i, i + 1)?.reshape(&[co, ci, k, k])?;
            let y_i = x.conv2d(w_i, None, Padding::Same)?;
            let weighted = y_i.mul(attn.alpha_w.slice(1, i, i + 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(weighted)?,
                None => weighted,
            });
        }
        acc.expect("n ≥ 1").add(self.bias(vars))
    }

    /// Frequency-agnostic multi-dimensional attention: one kernel assembled
    /// from global attentions, then a single convolution.
    pub fn odconv_forward<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let [aw, af, ac] = self.global_attention_rows(x, vars)?;
        let kernel = self.aggregate_kernel(vars, aw, af, ac)?;
        x.conv2d(kernel, Some(self.bias(vars)), Padding::Same)
    }

    /// Attention rows for the frequency-agnostic routes; requires the
    /// layer to pool globally.
    fn global_attention_rows<'t>(&self, x: Var<'t>, vars: &[Var<'t>]) -> Result<[Option<Var<'t>>; 3]> {
        if self.cfg.effective_pooling() != AttentionPooling::Global {
            return Err(Error::InvalidArgument(format!(
                "{} layer does not pool globally",
                self.cfg.variant
            )));
        }
        let attn = self.compute_attentions(x, vars)?;
        let first = |v: Var<'t>| v.slice(0, 0, 1);
        Ok([
            attn.enabled[0].then(|| first(attn.alpha_w)).transpose()?,
            attn.enabled[1].then(|| first(attn.alpha_f)).transpose()?,
            attn.enabled[2].then(|| first(attn.alpha_c)).transpose()?,
        ])
    }

    /// `Σ_i aw_i · af ⊙ ac ⊙ W_i` with one attention row per dimension;
    /// a missing row counts as all ones.
    fn aggregate_kernel<'t>(
        &self,
        vars: &[Var<'t>],
        aw: Option<Var<'t>>,
        af: Option<Var<'t>>,
        ac: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let (n, co, ci) = (self.cfg.n, self.c_out, self.c_in);
        let mut bank = self.kernels(vars);
        if let Some(aw) = aw {
            bank = bank.mul(aw.reshape(&[n, 1, 1, 1, 1])?)?;
        }
        if let Some(af) = af {
            bank = bank.mul(af.reshape(&[1, co, 1, 1, 1])?)?;
        }
        if let Some(ac) = ac {
            bank = bank.mul(ac.reshape(&[1, 1, ci, 1, 1])?)?;
        }
        bank.sum_axis(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(cfg: ConvVariantConfig, c_in: usize, c_out: usize, k: usize) -> (ParamStore, DynConvLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = DynConvLayer::new(&mut store, "l", c_in, c_out, k, cfg, &mut rng).unwrap();
        (store, l)
    }

    fn zero_param(store: &mut ParamStore, p: Conv1dParams) {
        store.get_mut(p.weight).data_mut().fill(0.0);
        store.get_mut(p.bias).data_mut().fill(0.0);
    }

    #[test]
    fn zeroed_kernel_branch_gives_uniform_weights() {
        let (mut store, l) = layer(ConvVariantConfig::mfdconv(4), 3, 2, 3);
        zero_param(&mut store, l.head.unwrap().branch_w.unwrap());
        zero_param(&mut store, l.head.unwrap().branch_f.unwrap());
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let x = tape.constant(Tensor::from_fn(&[5, 6, 3], |i| (i as f64).sin()));
        let a = l.compute_attentions(x, &vars).unwrap();
        assert!(a.alpha_w.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(a.alpha_f.value().data().iter().all(|&v| v == 0.5));
        assert_eq!(a.alpha_c.shape(), vec![6, 3]);
    }

    #[test]
    fn disabled_branches_are_ones() {
        let mut cfg = ConvVariantConfig::mfdconv(2);
        cfg.enable_alpha_c = false;
        cfg.enable_alpha_f = false;
        let (store, l) = layer(cfg, 2, 3, 3);
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let x = tape.constant(Tensor::from_fn(&[4, 5, 2], |i| (i as f64 * 0.5).cos()));
        let a = l.compute_attentions(x, &vars).unwrap();
        assert_eq!(a.alpha_f.value().data(), Tensor::ones(&[5, 3]).data());
        assert_eq!(a.alpha_c.value().data(), Tensor::ones(&[5, 2]).data());
        assert_eq!(a.enabled, [true, false, false]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (store, l) = layer(ConvVariantConfig::mfdconv(2), 3, 2, 3);
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
        assert!(matches!(l.compute_attentions(x, &vars), Err(Error::Shape(_))));
        assert!(matches!(l.forward(x, &vars), Err(Error::Shape(_))));
    }

    #[test]
    fn assemble_identity_and_selection() {
        let bank = Tensor::from_fn(&[2, 2, 3, 3, 3], |i| i as f64 * 0.01 - 0.3);
        let mut attn = FreqAttentionMaps::identity(4, 2, 2, 3);
        attn.alpha_w = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let k = assemble_effective_kernel(&bank, &attn, 1).unwrap();
        assert_eq!(k.data(), &bank.data()[..2 * 3 * 9]);

        let single = Tensor::from_fn(&[1, 2, 3, 3, 3], |i| i as f64);
        let ones = FreqAttentionMaps::identity(2, 1, 2, 3);
        let k = assemble_effective_kernel(&single, &ones, 0).unwrap();
        assert_eq!(k.data(), single.data());
        assert!(matches!(assemble_effective_kernel(&single, &ones, 2), Err(Error::Index(_))));
    }

    #[test]
    fn assemble_hand_arithmetic() {
        let bank = Tensor::new(&[2, 1, 1, 1, 1], vec![2.0, 4.0]).unwrap();
        let attn = FreqAttentionMaps {
            alpha_w: Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap(),
            alpha_f: Tensor::new(&[1, 1], vec![0.5]).unwrap(),
            alpha_c: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            enabled: [true, true, true],
        };
        let k = assemble_effective_kernel(&bank, &attn, 0).unwrap();
        assert_eq!(k.shape(), &[1, 1, 1, 1]);
        assert!((k.data()[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn static_config_forces_single_kernel() {
        let mut cfg = ConvVariantConfig::static_conv();
        cfg.n = 4;
        cfg.enable_alpha_w = true;
        let cfg = cfg.normalized().unwrap();
        assert_eq!(cfg.n, 1);
        assert!(!cfg.enable_alpha_w);
    }

    #[test]
    fn csv_rows_and_labels() {
        let maps = FreqAttentionMaps {
            alpha_w: Tensor::new(&[2, 2], vec![0.5, 0.5, 0.25, 0.75]).unwrap(),
            alpha_f: Tensor::ones(&[2, 1]),
            alpha_c: Tensor::ones(&[2, 1]),
            enabled: [true, true, false],
        };
        let csv = maps.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "freq_bin,alpha_w_0,alpha_w_1,alpha_f_0");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,0.25"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ConvVariant::ALL {
            assert_eq!(v.as_str().parse::<ConvVariant>().unwrap(), v);
        }
        assert!("condconv".parse::<ConvVariant>().is_err());
    }
}
