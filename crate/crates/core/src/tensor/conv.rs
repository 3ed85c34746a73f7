//! Cross-correlation via im2col.
//!
//! Inputs are channels-last (`T×F×C` for 2-D, `L×C` for 1-D); kernels are
//! `C_out×C_in×k×k` (2-D) or `C_out×C_in×k` (1-D). Patch columns are laid
//! out as `(c, dt, df)` so a kernel row flattens onto them directly.

use super::ops::{matmul_nn, matmul_nt, matmul_tn_acc};
use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Spatial padding mode. `Same` zero-pads `(k-1)/2` on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, ci: usize, kh: usize, kw: usize, padding: Padding) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}×{}",
                kh, kw
            )));
        }
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err!(
                "input {}×{} smaller than kernel {}×{}",
                h, w, kh, kw
            ));
        }
        Ok(Self {
            h,
            w,
            ci,
            kh,
            kw,
            ph,
            pw,
            ho: h + 2 * ph - kh + 1,
            wo: w + 2 * pw - kw + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.ho * self.wo
    }

    pub fn cols(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Input offset for output (i, j) and tap (a, b), if inside the image.
    #[inline]
    fn source(&self, i: usize, j: usize, a: usize, b: usize) -> Option<usize> {
        let y = (i + a).checked_sub(self.ph)?;
        let x = (j + b).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then(|| (y * self.w + x) * self.ci)
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut p = vec![0.0; self.rows() * cols];
        for i in 0..self.ho {
            for j in 0..self.wo {
                let row = &mut p[(i * self.wo + j) * cols..(i * self.wo + j + 1) * cols];
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some(src) = self.source(i, j, a, b) {
                            for c in 0..self.ci {
                                row[(c * self.kh + a) * self.kw + b] = x[src + c];
                            }
                        }
                    }
                }
            }
        }
        p
    }

    pub fn col2im(&self, gp: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut gx = vec![0.0; self.h * self.w * self.ci];
        for i in 0..self.ho {
            for j in 0..self.wo {
                let row = &gp[(i * self.wo + j) * cols..(i * self.wo + j + 1) * cols];
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some(src) = self.source(i, j, a, b) {
                            for c in 0..self.ci {
                                gx[src + c] += row[(c * self.kh + a) * self.kw + b];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

fn conv_general<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    geom: ConvGeom,
    co: usize,
    out_shape: Vec<usize>,
) -> Result<Var<'t>> {
    let xv = x.value();
    let kv = kernel.value();
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(shape_err!("bias shape {:?}, expected [{}]", b.shape(), co));
        }
    }
    let (n, j) = (geom.rows(), geom.cols());
    let patches = geom.im2col(xv.data());
    let mut y = matmul_nt(&patches, kv.data(), n, j, co);
    if let Some(b) = bias {
        let bv = b.value();
        for row in y.chunks_mut(co) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
    }
    let mut parents = vec![x, kernel];
    parents.extend(bias);
    let value = Tensor::new(&out_shape, y)?;
    Ok(x.tape().record(value, &parents, move |g, need| {
        let gx = need[0].then(|| geom.col2im(&matmul_nn(g, kv.data(), n, co, j)));
        let gk = need[1].then(|| {
            let mut gk = vec![0.0; co * j];
            matmul_tn_acc(&mut gk, g, &patches, n, co, j);
            gk
        });
        let mut out = vec![gx, gk];
        if need.len() > 2 {
            out.push(need[2].then(|| {
                let mut gb = vec![0.0; co];
                for row in g.chunks(co) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            }));
        }
        out
    }))
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of a `T×F×C_in` input with a
    /// `C_out×C_in×k×k` kernel.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, padding: Padding) -> Result<Var<'t>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(shape_err!("conv2d expects T×F×C input and 4-D kernel, got {:?} and {:?}", xs, ks));
        }
        if ks[2] != ks[3] {
            return Err(shape_err!("conv2d kernel must be square, got {:?}", ks));
        }
        if xs[2] != ks[1] {
            return Err(shape_err!(
                "input has {} channels but kernel expects {}",
                xs[2], ks[1]
            ));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[2], ks[3], padding)?;
        let out_shape = vec![geom.ho, geom.wo, ks[0]];
        conv_general(self, kernel, bias, geom, ks[0], out_shape)
    }

    /// 1-D cross-correlation of an `L×C_in` input with a `C_out×C_in×k`
    /// kernel.
    pub fn conv1d(self, kernel: Var<'t>, bias: Option<Var<'t>>, padding: Padding) -> Result<Var<'t>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 2 || ks.len() != 3 {
            return Err(shape_err!("conv1d expects L×C input and 3-D kernel, got {:?} and {:?}", xs, ks));
        }
        if xs[1] != ks[1] {
            return Err(shape_err!(
                "input has {} channels but kernel expects {}",
                xs[1], ks[1]
            ));
        }
        let geom = ConvGeom::new(xs[0], 1, xs[1], ks[2], 1, padding)?;
        let out_shape = vec![geom.ho, ks[0]];
        conv_general(self, kernel, bias, geom, ks[0], out_shape)
    }
}
