//! Central-difference gradient verification.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords: usize,
}

fn eval_value<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("objective returned shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Central-difference estimate of the gradient of `f` with respect to every
/// coordinate of every parameter. Uses only forward evaluations.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval_value(f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval_value(f, &work)?;
            work[p].data_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * eps));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`;
/// the report carries the maximum.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Input(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    g.backward(loss)?;
    let numeric = numeric_gradient(&f, params, eps)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    for (p, (&id, num)) in ids.iter().zip(&numeric).enumerate() {
        let zeros;
        let analytic = match g.grad(id) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        for (i, (&a, &n)) in analytic.iter().zip(num).enumerate() {
            let err = (a - n).abs() / n.abs().max(1.0);
            report.coords += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
