//! Central finite-difference gradient verification.
//!
//! The numeric side only ever runs forward passes on fresh tapes built from
//! constants, so it shares no backward code with the analytic side.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default relative-error floor: gradients smaller than this are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    /// Every checked coordinate, worst first.
    pub entries: Vec<GradMismatch>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Analytic gradients of the scalar `f(inputs)` with respect to every input.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
pub fn central_difference<F>(inputs: &[Tensor], input: usize, index: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut shifted = inputs.to_vec();
    let x0 = inputs[input].data()[index];
    shifted[input].data_mut()[index] = x0 + h;
    let plus = eval(&shifted, f)?;
    shifted[input].data_mut()[index] = x0 - h;
    let minus = eval(&shifted, f)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic and numeric gradients on the given coordinates
/// (`(input, index)` pairs). Pass `None` to check every coordinate.
pub fn check<F>(inputs: &[Tensor], coords: Option<&[(usize, usize)]>, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut entries = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        let numeric = central_difference(inputs, input, index, h, &f)?;
        let a = analytic[input][index];
        entries.push(GradMismatch {
            input,
            index,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    Ok(GradReport { entries })
}
