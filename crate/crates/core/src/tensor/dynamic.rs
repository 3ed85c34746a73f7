//! Fused frequency-dynamic convolution.
//!
//! Computes, for every output frequency row `f`,
//!
//! ```text
//! y[t,f,o] = b[o] + a_f[f,o] · Σ_i a_w[f,i] · Σ_{c,dt,df} a_c[f,c] · W_i[o,c,dt,df] · x[t+dt, f+df, c]
//! ```
//!
//! The input-channel attention belongs to the output row `f`, so it scales
//! the unfolded patch of that row, never the raw input (a patch spans
//! neighbouring frequencies).

use super::conv::{ConvGeom, Padding};
use super::ops::{matmul_nn, matmul_nt, matmul_tn_acc};
use super::{Tensor, Var};
use crate::error::{shape_err, Result};

/// Frequency-indexed attention maps fed into [`freq_dynamic_conv2d`].
/// `None` stands for an all-ones map (with no kernel map the `n` basis
/// responses are summed).
#[derive(Clone, Copy, Default)]
pub struct AttentionInputs<'t> {
    /// `F×n` kernel mixture weights.
    pub kernel: Option<Var<'t>>,
    /// `F×C_out` output-channel gates.
    pub out_channel: Option<Var<'t>>,
    /// `F×C_in` input-channel gates.
    pub in_channel: Option<Var<'t>>,
}

fn check_map(v: Option<Var<'_>>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if let Some(v) = v {
        if v.shape() != [rows, cols] {
            return Err(shape_err!(
                "{} attention has shape {:?}, expected [{}, {}]",
                what,
                v.shape(),
                rows,
                cols
            ));
        }
    }
    Ok(())
}

/// Same-padded dynamic convolution of `x: T×F×C_in` with the basis bank
/// `n×C_out×C_in×k×k`, modulated per output frequency by `attn`.
pub fn freq_dynamic_conv2d<'t>(
    x: Var<'t>,
    bank: Var<'t>,
    bias: Option<Var<'t>>,
    attn: AttentionInputs<'t>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let ks = bank.shape();
    if xs.len() != 3 || ks.len() != 5 {
        return Err(shape_err!(
            "dynamic conv expects T×F×C input and n×C_out×C_in×k×k bank, got {:?} and {:?}",
            xs,
            ks
        ));
    }
    let (t, f, ci) = (xs[0], xs[1], xs[2]);
    let (n, co, k) = (ks[0], ks[1], ks[3]);
    if ks[2] != ci {
        return Err(shape_err!(
            "input has {} channels but kernels expect {}",
            ci,
            ks[2]
        ));
    }
    if ks[3] != ks[4] {
        return Err(shape_err!("kernels must be square, got {:?}", ks));
    }
    check_map(attn.kernel, f, n, "kernel")?;
    check_map(attn.out_channel, f, co, "output-channel")?;
    check_map(attn.in_channel, f, ci, "input-channel")?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(shape_err!("bias shape {:?}, expected [{}]", b.shape(), co));
        }
    }

    let geom = ConvGeom::new(t, f, ci, k, k, Padding::Same)?;
    let rows = geom.rows();
    let cols = geom.cols();
    let kk = k * k;
    let nco = n * co;

    let xv = x.value();
    let wv = bank.value();
    let aw = attn.kernel.map(|v| v.value());
    let af = attn.out_channel.map(|v| v.value());
    let ac = attn.in_channel.map(|v| v.value());

    let patches = geom.im2col(xv.data());
    let scaled = match &ac {
        Some(ac) => scale_patches(&patches, ac.data(), f, ci, kk, cols),
        None => patches.clone(),
    };
    let z = matmul_nt(&scaled, wv.data(), rows, cols, nco);

    let mut y = vec![0.0; rows * co];
    for r in 0..rows {
        let fr = r % f;
        let zr = &z[r * nco..(r + 1) * nco];
        let yr = &mut y[r * co..(r + 1) * co];
        for i in 0..n {
            let w = aw.as_ref().map_or(1.0, |a| a.data()[fr * n + i]);
            yr.iter_mut()
                .zip(&zr[i * co..(i + 1) * co])
                .for_each(|(a, b)| *a += w * b);
        }
        if let Some(af) = &af {
            yr.iter_mut()
                .zip(&af.data()[fr * co..(fr + 1) * co])
                .for_each(|(a, g)| *a *= g);
        }
        if let Some(b) = bias {
            yr.iter_mut()
                .zip(b.value().data())
                .for_each(|(a, b)| *a += b);
        }
    }

    let mut parents = vec![x, bank];
    let slot_bias = bias.map(|b| {
        parents.push(b);
        parents.len() - 1
    });
    let slot_aw = attn.kernel.map(|v| {
        parents.push(v);
        parents.len() - 1
    });
    let slot_af = attn.out_channel.map(|v| {
        parents.push(v);
        parents.len() - 1
    });
    let slot_ac = attn.in_channel.map(|v| {
        parents.push(v);
        parents.len() - 1
    });

    let value = Tensor::new(&[t, f, co], y)?;
    Ok(x.tape().record(value, &parents, move |g, need| {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; need.len()];
        let wants = |slot: Option<usize>| slot.is_some_and(|s| need[s]);
        let aw_at = |fr: usize, i: usize| aw.as_ref().map_or(1.0, |a| a.data()[fr * n + i]);
        let af_at = |fr: usize, o: usize| af.as_ref().map_or(1.0, |a| a.data()[fr * co + o]);

        if let Some(s) = slot_bias.filter(|&s| need[s]) {
            let mut gb = vec![0.0; co];
            for row in g.chunks(co) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            out[s] = Some(gb);
        }
        if let Some(s) = slot_af.filter(|&s| need[s]) {
            let mut gaf = vec![0.0; f * co];
            for r in 0..rows {
                let fr = r % f;
                for o in 0..co {
                    let mix: f64 = (0..n).map(|i| aw_at(fr, i) * z[r * nco + i * co + o]).sum();
                    gaf[fr * co + o] += g[r * co + o] * mix;
                }
            }
            out[s] = Some(gaf);
        }
        if let Some(s) = slot_aw.filter(|&s| need[s]) {
            let mut gaw = vec![0.0; f * n];
            for r in 0..rows {
                let fr = r % f;
                for i in 0..n {
                    let mut acc = 0.0;
                    for o in 0..co {
                        acc += g[r * co + o] * af_at(fr, o) * z[r * nco + i * co + o];
                    }
                    gaw[fr * n + i] += acc;
                }
            }
            out[s] = Some(gaw);
        }

        let need_x = need[0];
        let need_w = need[1];
        let need_ac = wants(slot_ac);
        if !(need_x || need_w || need_ac) {
            return out;
        }
        // gradient w.r.t. the pre-mixture responses z
        let mut gz = vec![0.0; rows * nco];
        for r in 0..rows {
            let fr = r % f;
            for i in 0..n {
                let w = aw_at(fr, i);
                for o in 0..co {
                    gz[r * nco + i * co + o] = g[r * co + o] * af_at(fr, o) * w;
                }
            }
        }
        if need_w {
            let mut gw = vec![0.0; nco * cols];
            matmul_tn_acc(&mut gw, &gz, &scaled, rows, nco, cols);
            out[1] = Some(gw);
        }
        if need_x || need_ac {
            let g_scaled = matmul_nn(&gz, wv.data(), rows, nco, cols);
            if let Some(s) = slot_ac.filter(|&s| need[s]) {
                let mut gac = vec![0.0; f * ci];
                for r in 0..rows {
                    let fr = r % f;
                    let gp = &g_scaled[r * cols..(r + 1) * cols];
                    let p = &patches[r * cols..(r + 1) * cols];
                    for c in 0..ci {
                        let mut acc = 0.0;
                        for q in c * kk..(c + 1) * kk {
                            acc += gp[q] * p[q];
                        }
                        gac[fr * ci + c] += acc;
                    }
                }
                out[s] = Some(gac);
            }
            if need_x {
                let g_patches = match &ac {
                    Some(ac) => scale_patches(&g_scaled, ac.data(), f, ci, kk, cols),
                    None => g_scaled,
                };
                out[0] = Some(geom.col2im(&g_patches));
            }
        }
        out
    }))
}

fn scale_patches(p: &[f64], ac: &[f64], f: usize, ci: usize, kk: usize, cols: usize) -> Vec<f64> {
    let mut out = p.to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let gate = &ac[(r % f) * ci..(r % f + 1) * ci];
        for (c, &a) in gate.iter().enumerate() {
            row[c * kk..(c + 1) * kk].iter_mut().for_each(|v| *v *= a);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn single_kernel_without_attention_is_plain_conv() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 5, 2], |i| (i as f64 * 0.3).sin()));
        let w = Tensor::from_fn(&[1, 3, 2, 3, 3], |i| (i as f64 * 0.7).cos());
        let b = tape.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let bank = tape.constant(w.clone());
        let kernel = tape.constant(w.reshape(&[3, 2, 3, 3]).unwrap());
        let dynamic = freq_dynamic_conv2d(x, bank, Some(b), AttentionInputs::default()).unwrap();
        let plain = x.conv2d(kernel, Some(b), Padding::Same).unwrap();
        assert!(dynamic.value().max_abs_diff(&plain.value()) <= 1e-12);
    }

    #[test]
    fn rejects_misshapen_attention() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 5, 2]));
        let bank = tape.constant(Tensor::zeros(&[2, 3, 2, 3, 3]));
        let aw = tape.constant(Tensor::zeros(&[4, 2]));
        let attn = AttentionInputs {
            kernel: Some(aw),
            ..Default::default()
        };
        assert!(freq_dynamic_conv2d(x, bank, None, attn).is_err());
    }
}
