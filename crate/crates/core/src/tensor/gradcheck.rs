//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Gradients smaller than this are compared in absolute terms: below it a
/// central difference on an O(1) loss is dominated by round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let val = v.value();
    if val.numel() != 1 {
        return Err(shape_err!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            val.shape()
        ));
    }
    Ok(val.item())
}

/// Checks `f` at `point` against central differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|_, vars| f(vars[0]), std::slice::from_ref(point), eps)
}

/// Multi-input variant: every coordinate of every tensor in `points` is
/// perturbed, and the worst relative error over all of them is reported.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside (0, 1e-2]",
            eps
        )));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.get(v).map(Tensor::into_data).unwrap_or_default())
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let orig = point.data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].get(i).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (pi, i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

impl<'t> Var<'t> {
    /// Identity whose backward scales the gradient by `factor`. Only used to
    /// self-test gradient-check harnesses.
    #[doc(hidden)]
    pub fn with_faulty_backward(self, factor: f64) -> Var<'t> {
        let v = self.value();
        self.tape().record((*v).clone(), &[self], move |g, _| {
            vec![Some(g.iter().map(|x| x * factor).collect())]
        })
    }
}
