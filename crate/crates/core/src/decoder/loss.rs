use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Scalar, Tensor};

/// Sign applied to the entropy term in the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegSign {
    /// `+ lambda * sum(a log a)`, which pushes relevance towards uniform.
    #[default]
    AsWritten,
    /// `- lambda * sum(a log a)`, which pushes relevance towards one-hot.
    Sparsity,
}

impl RegSign {
    pub fn sign(self) -> f64 {
        match self {
            RegSign::AsWritten => 1.0,
            RegSign::Sparsity => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegSign::AsWritten => "as_written",
            RegSign::Sparsity => "sparsity",
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn loss_quart_nodes<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (t, v) = g.value(logits).dims2()?;
    if t == 0 || targets.len() != t {
        return Err(Error::Input(format!("{} targets for {t} logit rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Input(format!("target id {bad} outside vocabulary of {v}")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, targets)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -T::one()))
}

fn check_simplex<T: Scalar>(alpha: &[T]) -> Result<()> {
    let mut sum = 0.0;
    for &a in alpha {
        let a = a.as_f64();
        if !(a >= -1e-12) {
            return Err(Error::Contract(format!("relevance weight {a} is negative")));
        }
        sum += a;
    }
    if alpha.is_empty() || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("relevance weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `sum(a log a)` with `0 log 0 = 0`.
pub fn loss_reg_nodes<T: Scalar>(g: &mut Graph<T>, alpha: NodeId) -> Result<NodeId> {
    check_simplex(g.value(alpha).data())?;
    g.xlogx_sum(alpha)
}

/// `loss_quart + sign * lambda * loss_reg`; exactly `loss_quart` when
/// `lambda == 0` or there is no relevance term.
pub fn loss_total_nodes<T: Scalar>(
    g: &mut Graph<T>,
    loss_quart: NodeId,
    loss_reg: Option<NodeId>,
    lambda: f64,
    sign: RegSign,
) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    match loss_reg {
        Some(r) if lambda != 0.0 => {
            let w = g.scale(r, T::of(sign.sign() * lambda));
            g.add(loss_quart, w)
        }
        _ => Ok(loss_quart),
    }
}

pub fn loss_quart<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let id = loss_quart_nodes(&mut g, l, targets)?;
    Ok(g.value(id).item().as_f64())
}

pub fn loss_reg<T: Scalar>(alpha: &[T]) -> Result<f64> {
    check_simplex(alpha)?;
    Ok(alpha
        .iter()
        .map(|a| a.as_f64())
        .filter(|&a| a > 0.0)
        .map(|a| a * a.ln())
        .sum())
}

pub fn loss_total(loss_quart: f64, loss_reg: f64, lambda: f64, sign: RegSign) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(loss_quart);
    }
    Ok(loss_quart + sign.sign() * lambda * loss_reg)
}
