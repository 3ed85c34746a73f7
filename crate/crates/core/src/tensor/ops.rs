//! Differentiable primitive operations on [`Var`].

use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `src` that broadcasts onto it.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// out(m×n) = a(m×k) · b(k×n)
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// out(m×n) = a(m×k) · b(n×k)ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// out(m×n) += a(k×m)ᵀ · b(k×n)
pub(crate) fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {} invalid for shape {:?}", axis, shape));
    }
    Ok(())
}

/// (outer, dim, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let same = a.shape() == b.shape();
        let (ma, mb) = if same {
            (None, None)
        } else {
            (
                Some(broadcast_map(a.shape(), &out_shape)),
                Some(broadcast_map(b.shape(), &out_shape)),
            )
        };
        let n: usize = out_shape.iter().product();
        let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
        let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = (0..n)
            .map(|i| f(a.data()[ia(i)], b.data()[ib(i)]))
            .collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape().record(value, &[self, other], move |g, need| {
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; a.numel()];
                for (i, gi) in g.iter().enumerate() {
                    let (x, y) = (a.data()[ia(i)], b.data()[ib(i)]);
                    ga[ia(i)] += gi * da(x, y, *gi);
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; b.numel()];
                for (i, gi) in g.iter().enumerate() {
                    let (x, y) = (a.data()[ia(i)], b.data()[ib(i)]);
                    gb[ib(i)] += gi * db(x, y, *gi);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x / y, |_, y, _| 1.0 / y, |x, y, _| -x / (y * y))
    }

    /// Elementwise map whose derivative is expressed through input `x` and
    /// output `y`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let y = Rc::new(Tensor::new(x.shape(), data).expect("unary shape"));
        let y2 = Rc::clone(&y);
        self.tape().record((*y).clone(), &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(y2.data())
                .map(|((gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t> {
        self.unary(|x| 1.0 - x, |_, _| -1.0)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let s: f64 = x.data().iter().sum();
        self.tape()
            .record(Tensor::scalar(s), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Ok(self
            .tape()
            .record(Tensor::new(&out_shape, out)?, &[self], move |g, _| {
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// Average over `axis`, removing it from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis(&shape, axis)?;
        let dim = shape[axis];
        if dim == 0 {
            return Err(shape_err!("mean over empty axis {}", axis));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / dim as f64))
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let m = (0..dim).map(|d| x.data()[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for d in 0..dim {
                    let e = (x.data()[at(d)] - m).exp();
                    y[at(d)] = e;
                    s += e;
                }
                for d in 0..dim {
                    y[at(d)] /= s;
                }
            }
        }
        let y = Rc::new(Tensor::new(x.shape(), y)?);
        let y2 = Rc::clone(&y);
        Ok(self.tape().record((*y).clone(), &[self], move |g, _| {
            let y = y2.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let s: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                    for d in 0..dim {
                        gx[at(d)] = y[at(d)] * (g[at(d)] - s);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = matmul_nn(a.data(), b.data(), m, k, n);
        Ok(self
            .tape()
            .record(Tensor::new(&[m, n], out)?, &[self, other], move |g, need| {
                // ga = g·bᵀ, gb = aᵀ·g
                let ga = need[0].then(|| matmul_nt(g, b.data(), m, n, k));
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(&mut gb, a.data(), g, m, k, n);
                    gb
                });
                vec![ga, gb]
            }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self
            .tape()
            .record(Tensor::new(&[c, r], out)?, &[self], move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self
            .tape()
            .record(value, &[self], move |g, _| vec![Some(g.to_vec())]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        if start > end || end > dim {
            return Err(Error::Index(format!(
                "slice {}..{} on axis {} of size {}",
                start, end, axis, dim
            )));
        }
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self
            .tape()
            .record(Tensor::new(&shape, out)?, &[self], move |g, _| {
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    gx[(o * dim + start) * inner..(o * dim + end) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis(&base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat of {:?} with {:?} on axis {}", base, s, axis));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(first
            .tape()
            .record(Tensor::new(&shape, out)?, parts, move |g, need| {
                let mut grads: Vec<Option<Vec<f64>>> = dims
                    .iter()
                    .zip(need)
                    .map(|(&d, &n)| n.then(|| Vec::with_capacity(outer * d * inner)))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &d) in grads.iter_mut().zip(&dims) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[off..off + d * inner]);
                        }
                        off += d * inner;
                    }
                }
                grads
            }))
    }

    /// Broadcast to `shape` under the usual trailing-alignment rules.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = broadcast_shape(x.shape(), shape)?;
        if out != shape {
            return Err(shape_err!("cannot broadcast {:?} to {:?}", x.shape(), shape));
        }
        let map = broadcast_map(x.shape(), shape);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let n = x.numel();
        Ok(self
            .tape()
            .record(Tensor::new(shape, data)?, &[self], move |g, _| {
                let mut gx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&map) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            }))
    }

    fn pool_geometry(&self, pool: (usize, usize)) -> Result<(usize, usize, usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err!("2-D pooling expects T×F×C, got {:?}", s));
        }
        if pool.0 == 0 || pool.1 == 0 {
            return Err(Error::InvalidArgument("pool size must be positive".into()));
        }
        let (t, f, c) = (s[0], s[1], s[2]);
        let (to, fo) = (t / pool.0, f / pool.1);
        if to == 0 || fo == 0 {
            return Err(shape_err!("pool {:?} larger than input {:?}", pool, s));
        }
        Ok((t, f, c, to, fo))
    }

    /// Non-overlapping average pooling over the first two axes of a
    /// T×F×C tensor; trailing remainders are dropped.
    pub fn avg_pool_2d(self, pool: (usize, usize)) -> Result<Var<'t>> {
        let (_, f, c, to, fo) = self.pool_geometry(pool)?;
        let x = self.value();
        let (pt, pf) = pool;
        let norm = 1.0 / (pt * pf) as f64;
        let mut out = vec![0.0; to * fo * c];
        for i in 0..to {
            for j in 0..fo {
                let dst = &mut out[(i * fo + j) * c..(i * fo + j + 1) * c];
                for a in 0..pt {
                    for b in 0..pf {
                        let off = ((i * pt + a) * f + j * pf + b) * c;
                        dst.iter_mut()
                            .zip(&x.data()[off..off + c])
                            .for_each(|(d, v)| *d += v * norm);
                    }
                }
            }
        }
        let numel = x.numel();
        Ok(self
            .tape()
            .record(Tensor::new(&[to, fo, c], out)?, &[self], move |g, _| {
                let mut gx = vec![0.0; numel];
                for i in 0..to {
                    for j in 0..fo {
                        let src = &g[(i * fo + j) * c..(i * fo + j + 1) * c];
                        for a in 0..pt {
                            for b in 0..pf {
                                let off = ((i * pt + a) * f + j * pf + b) * c;
                                gx[off..off + c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, v)| *d += v * norm);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// Non-overlapping max pooling over the first two axes of T×F×C.
    pub fn max_pool_2d(self, pool: (usize, usize)) -> Result<Var<'t>> {
        let (_, f, c, to, fo) = self.pool_geometry(pool)?;
        let x = self.value();
        let (pt, pf) = pool;
        let mut out = vec![f64::NEG_INFINITY; to * fo * c];
        let mut arg = vec![0usize; to * fo * c];
        for i in 0..to {
            for j in 0..fo {
                for a in 0..pt {
                    for b in 0..pf {
                        let off = ((i * pt + a) * f + j * pf + b) * c;
                        for ch in 0..c {
                            let o = (i * fo + j) * c + ch;
                            if x.data()[off + ch] > out[o] {
                                out[o] = x.data()[off + ch];
                                arg[o] = off + ch;
                            }
                        }
                    }
                }
            }
        }
        let numel = x.numel();
        Ok(self
            .tape()
            .record(Tensor::new(&[to, fo, c], out)?, &[self], move |g, _| {
                let mut gx = vec![0.0; numel];
                for (gi, &a) in g.iter().zip(&arg) {
                    gx[a] += gi;
                }
                vec![Some(gx)]
            }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
