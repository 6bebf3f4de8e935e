//! Finite-difference verification of the backward rules.

use super::{Element, Graph, OpKind, Tensor, Var};
use crate::error::{shape_err, Result};

/// A scalar-valued function of some parameter tensors, expressed against the
/// graph API so it can be evaluated at any precision.
pub trait Objective {
    fn eval<T: Element>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-6)` over every parameter element.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// Compares `f32` reverse-mode gradients of `objective` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// The perturbed evaluations run in `f64` so that rounding in the forward
/// pass does not swamp the difference quotient; the gradients under test are
/// the `f32` ones.
pub fn grad_check<O: Objective>(objective: &O, params: &[Tensor<f32>], eps: f64) -> Result<GradCheckReport> {
    run(objective, params, eps, None)
}

/// As [`grad_check`], with the backward rule of `fault` deliberately broken.
pub fn grad_check_with_fault<O: Objective>(
    objective: &O,
    params: &[Tensor<f32>],
    eps: f64,
    fault: OpKind,
) -> Result<GradCheckReport> {
    run(objective, params, eps, Some(fault))
}

fn run<O: Objective>(
    objective: &O,
    params: &[Tensor<f32>],
    eps: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let mut g = Graph::<f32>::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(&p.clone().with_grad()))
        .collect();
    let out = objective.eval(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(shape_err!("grad_check objective must be scalar, got {:?}", g.shape(out)));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.iter().map(|p| p.cast::<f64>()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval_f64(objective, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval_f64(objective, &work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei] as f64;
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            report.elements += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval_f64<O: Objective>(objective: &O, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let out = objective.eval(&mut g, &vars)?;
    Ok(g.value(out)[0])
}
