use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Weights of one GRU direction, gate order (reset, update, candidate).
#[derive(Clone, Copy)]
pub struct GruCell<'t> {
    /// `3H × d_in`
    pub w_ih: Var<'t>,
    /// `3H × H`
    pub w_hh: Var<'t>,
    /// `3H`
    pub b_ih: Var<'t>,
    /// `3H`
    pub b_hh: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct GruParams<'t> {
    pub forward: GruCell<'t>,
    pub backward: Option<GruCell<'t>>,
}

impl<'t> GruCell<'t> {
    fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn validate(&self, d_in: usize) -> Result<()> {
        let h = self.w_hh.shape();
        if h.len() != 2 || h[0] != 3 * h[1] {
            return Err(shape_err!("w_hh must be 3H×H, got {:?}", h));
        }
        let hid = h[1];
        if self.w_ih.shape() != [3 * hid, d_in] {
            return Err(shape_err!(
                "w_ih has shape {:?}, expected [{}, {}]",
                self.w_ih.shape(),
                3 * hid,
                d_in
            ));
        }
        if self.b_ih.shape() != [3 * hid] || self.b_hh.shape() != [3 * hid] {
            return Err(shape_err!("GRU biases must have length {}", 3 * hid));
        }
        Ok(())
    }

    fn run(&self, input: Var<'t>, reverse: bool) -> Result<Vec<Var<'t>>> {
        let tape = input.tape();
        let steps = input.shape()[0];
        let hid = self.hidden();
        let gi = input
            .matmul(self.w_ih.transpose()?)?
            .add(self.b_ih)?;
        let w_hh_t = self.w_hh.transpose()?;
        let mut h = tape.constant(Tensor::zeros(&[1, hid]));
        let mut out = Vec::with_capacity(steps);
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let x_t = gi.slice(0, t, t + 1)?;
            let h_t = h.matmul(w_hh_t)?.add(self.b_hh)?;
            let r = x_t
                .slice(1, 0, hid)?
                .add(h_t.slice(1, 0, hid)?)?
                .sigmoid();
            let z = x_t
                .slice(1, hid, 2 * hid)?
                .add(h_t.slice(1, hid, 2 * hid)?)?
                .sigmoid();
            let n = x_t
                .slice(1, 2 * hid, 3 * hid)?
                .add(r.mul(h_t.slice(1, 2 * hid, 3 * hid)?)?)?
                .tanh();
            // h' = (1 - z) n + z h = n + z (h - n)
            h = n.add(z.mul(h.sub(n)?)?)?;
            out.push(h);
        }
        if reverse {
            out.reverse();
        }
        Ok(out)
    }
}

/// Runs a (bi)directional GRU over a `T×d_in` sequence and returns the
/// `T×H` (or `T×2H`) hidden states. Built from tape primitives.
pub fn gru_forward<'t>(input: Var<'t>, params: &GruParams<'t>, bidirectional: bool) -> Result<Var<'t>> {
    let s = input.shape();
    if s.len() != 2 {
        return Err(shape_err!("GRU input must be T×d, got {:?}", s));
    }
    if s[0] == 0 {
        return Err(Error::EmptySequence("GRU over zero time steps".into()));
    }
    params.forward.validate(s[1])?;
    let fwd = params.forward.run(input, false)?;
    let fwd = Var::concat(&fwd, 0)?;
    if !bidirectional {
        return Ok(fwd);
    }
    let cell = params
        .backward
        .ok_or_else(|| Error::InvalidArgument("bidirectional GRU without backward weights".into()))?;
    cell.validate(s[1])?;
    let bwd = Var::concat(&cell.run(input, true)?, 0)?;
    Var::concat(&[fwd, bwd], 1)
}
