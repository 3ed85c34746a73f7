use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{shape_err, Result};

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used to update running estimates.
    pub var: Vec<f64>,
}

impl<'t> Var<'t> {
    /// Batch normalization over every axis except the last (channel) one.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` normalize the input.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchNormStats>)> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| shape_err!("batch norm of a scalar"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!(
                "batch norm affine params {:?}/{:?} for {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ));
        }
        let rows = xv.numel() / c.max(1);
        if rows == 0 {
            return Err(shape_err!("batch norm of empty input {:?}", shape));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running stats do not match {} channels", c));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut ss = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for ((s, v), m) in ss.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let var: Vec<f64> = ss.iter().map(|s| s / rows as f64).collect();
                let unbiased = ss
                    .iter()
                    .map(|s| s / (rows.max(2) - 1) as f64)
                    .collect();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![0.0; xv.numel()];
        let mut y = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                y[r * c + ch] = gv.data()[ch] * h + bv.data()[ch];
            }
        }
        let xhat = Rc::new(xhat);
        let training = stats.is_some();
        let out = self.tape().record(
            Tensor::new(&shape, y)?,
            &[self, gamma, beta],
            move |g, need| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (r, grow) in g.chunks(c).enumerate() {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xhat[r * c + ch];
                    }
                }
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let nf = rows as f64;
                    for (r, grow) in g.chunks(c).enumerate() {
                        for ch in 0..c {
                            let scale = gv.data()[ch] * inv_std[ch];
                            gx[r * c + ch] = if training {
                                scale / nf
                                    * (nf * grow[ch] - sum_g[ch] - xhat[r * c + ch] * sum_gx[ch])
                            } else {
                                scale * grow[ch]
                            };
                        }
                    }
                    gx
                });
                vec![gx, need[1].then(|| sum_gx.clone()), need[2].then(|| sum_g.clone())]
            },
        );
        Ok((out, stats))
    }
}
