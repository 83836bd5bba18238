use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    /// Same maximum, per parameter tensor.
    pub per_param: Vec<f64>,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks `backward` against `(f(x+eps) − f(x−eps)) / (2·eps)` on every coordinate.
///
/// `f` builds the scalar objective on a fresh tape from leaves bound to
/// `params` (in order). Coordinates are evaluated in parallel.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let errors: Vec<Result<(usize, usize, f64)>> = coords
        .par_iter()
        .map(|&(p, i)| {
            let mut shifted = params.to_vec();
            shifted[p] = params[p].perturbed(i, eps)?;
            let plus = evaluate(&shifted)?;
            shifted[p] = params[p].perturbed(i, -eps)?;
            let minus = evaluate(&shifted)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            Ok((p, i, err))
        })
        .collect();

    let mut per_param = vec![0.0f64; params.len()];
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    for e in errors {
        let (p, i, err) = e?;
        per_param[p] = per_param[p].max(err);
        if err > max_rel_error {
            max_rel_error = err;
            worst = (p, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        worst,
        coordinates: coords.len(),
    })
}
