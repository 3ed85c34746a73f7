//! Scalar-loop reference implementations used as independent oracles.
#![allow(dead_code)]

use mfdconv::dynconv::{Conv1dParams, ConvVariantConfig, DynConvLayer, Normalization};
use mfdconv::tensor::ParamStore;
use mfdconv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn build_layer(cfg: ConvVariantConfig, c_in: usize, c_out: usize, k: usize, seed: u64) -> (ParamStore, DynConvLayer) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = DynConvLayer::new(&mut store, "layer", c_in, c_out, k, cfg, &mut r).unwrap();
    (store, layer)
}

/// `Σ_i aw[i] · af[o] · ac[c] · W_i[o,c,:,:]` with plain loops.
pub fn naive_assemble(bank: &Tensor, aw: &[f64], af: &[f64], ac: &[f64]) -> Vec<f64> {
    let s = bank.shape();
    let (n, co, ci, kk) = (s[0], s[1], s[2], s[3] * s[4]);
    let mut out = vec![0.0; co * ci * kk];
    for i in 0..n {
        for o in 0..co {
            for c in 0..ci {
                for q in 0..kk {
                    out[(o * ci + c) * kk + q] +=
                        aw[i] * af[o] * ac[c] * bank.data()[((i * co + o) * ci + c) * kk + q];
                }
            }
        }
    }
    out
}

/// Same-padded cross-correlation where the kernel may change with the
/// output frequency row. `kernel_for(f)` returns `C_out×C_in×k×k`.
pub fn naive_conv_per_freq(
    x: &Tensor,
    c_out: usize,
    k: usize,
    bias: &[f64],
    kernel_for: impl Fn(usize) -> Vec<f64>,
) -> Tensor {
    let (t, f, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = (k - 1) as isize / 2;
    let mut y = vec![0.0; t * f * c_out];
    for fr in 0..f {
        let w = kernel_for(fr);
        for tt in 0..t {
            for o in 0..c_out {
                let mut acc = bias[o];
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let ti = tt as isize + a as isize - p;
                            let fi = fr as isize + b as isize - p;
                            if ti < 0 || fi < 0 || ti >= t as isize || fi >= f as isize {
                                continue;
                            }
                            let xv = x.data()[((ti as usize) * f + fi as usize) * ci + c];
                            acc += w[((o * ci + c) * k + a) * k + b] * xv;
                        }
                    }
                }
                y[(tt * f + fr) * c_out + o] = acc;
            }
        }
    }
    Tensor::new(&[t, f, c_out], y).unwrap()
}

fn naive_conv1d_same(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let len = x.len();
    let p = (k - 1) as isize / 2;
    (0..len)
        .map(|l| {
            (0..co)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for q in 0..k {
                            let src = l as isize + q as isize - p;
                            if src >= 0 && (src as usize) < len {
                                acc += w.data()[(o * ci + c) * k + q] * x[src as usize][c];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn normalize_rows(rows: Vec<Vec<f64>>, norm: Normalization, temperature: f64) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| match norm {
            Normalization::Sigmoid => r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            Normalization::Softmax => {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| ((v - m) / temperature).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

/// Straight-line attention head: pool → stem conv + ReLU → branches →
/// normalization. Returns `[alpha_w, alpha_f, alpha_c]` as `rows×width`
/// (rows = F, or 1 when `global`). Disabled branches come back as `None`.
pub fn naive_attention(
    x: &Tensor,
    store: &ParamStore,
    layer: &DynConvLayer,
    global: bool,
) -> [Option<Vec<Vec<f64>>>; 3] {
    let (t, f, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut pooled = vec![vec![0.0; ci]; f];
    for tt in 0..t {
        for fr in 0..f {
            for c in 0..ci {
                pooled[fr][c] += x.data()[(tt * f + fr) * ci + c] / t as f64;
            }
        }
    }
    if global {
        let mut g = vec![0.0; ci];
        for row in &pooled {
            for c in 0..ci {
                g[c] += row[c] / f as f64;
            }
        }
        pooled = vec![g];
    }
    let head = layer.head.as_ref().unwrap();
    let conv = |input: &[Vec<f64>], p: &Conv1dParams| naive_conv1d_same(input, store.get(p.weight), store.get(p.bias));
    let stem: Vec<Vec<f64>> = conv(&pooled, &head.stem)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let cfg = &layer.cfg;
    [
        head.branch_w.map(|p| normalize_rows(conv(&stem, &p), cfg.kernel_norm, cfg.temperature)),
        head.branch_f.map(|p| normalize_rows(conv(&stem, &p), cfg.channel_norm, cfg.temperature)),
        head.branch_c.map(|p| normalize_rows(conv(&stem, &p), cfg.channel_norm, cfg.temperature)),
    ]
}

/// Full per-output-frequency reference for a dynamic layer: naive
/// attentions, naive assembly, naive convolution.
pub fn naive_dynamic_layer(x: &Tensor, store: &ParamStore, layer: &DynConvLayer, global: bool) -> Tensor {
    let [aw, af, ac] = naive_attention(x, store, layer, global);
    let bank = store.get(layer.bank.kernels);
    let bias = store.get(layer.bank.bias).data().to_vec();
    let (n, co, ci) = (layer.cfg.n, layer.c_out, layer.c_in);
    let row = |m: &Option<Vec<Vec<f64>>>, fr: usize, width: usize| -> Vec<f64> {
        match m {
            Some(rows) => rows[if global { 0 } else { fr }].clone(),
            None => vec![1.0; width],
        }
    };
    naive_conv_per_freq(x, co, layer.k, &bias, |fr| {
        naive_assemble(bank, &row(&aw, fr, n), &row(&af, fr, co), &row(&ac, fr, ci))
    })
}
