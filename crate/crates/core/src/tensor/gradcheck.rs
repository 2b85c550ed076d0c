//! Central finite-difference verification of reverse-mode gradients.

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
///
/// The relative error of one coordinate is `|analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-6)`; the floor keeps near-zero gradients
/// from dividing by round-off.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
}

const REL_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every coordinate of `x` for a scalar function `f`.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let picks: Vec<(usize, usize)> = (0..x.len()).map(|i| (0, i)).collect();
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, &picks)
}

/// Checks selected coordinates `(input, index)` of a function of several
/// inputs; every input is treated as trainable.
pub fn grad_check_multi<F>(f: F, inputs: &[Array], eps: f64, picks: &[(usize, usize)]) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|a| g.param(a.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::dim("grad_check", format!("function output {:?} is not scalar", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective".into() });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst: (0, 0) };
    let mut work: Vec<Array> = inputs.to_vec();
    for &(input, idx) in picks {
        let orig = work[input].data()[idx];
        work[input].data_mut()[idx] = orig + eps;
        let plus = eval(&work)?;
        work[input].data_mut()[idx] = orig - eps;
        let minus = eval(&work)?;
        work[input].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[input].data()[idx];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite { op: format!("grad_check at input {input} index {idx}") });
        }
        let err = rel_err(a, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (input, idx);
        }
        report.checked += 1;
    }
    Ok(report)
}
