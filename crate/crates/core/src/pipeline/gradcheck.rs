use super::model::{encode_sample, Model, ModelConfig, ModalityMask};
use super::Group;
use crate::decoder::{decode_logits_nodes, loss_quart_nodes, loss_reg_nodes, loss_total_nodes, RegSign};
use crate::error::{Error, Result};
use crate::numcore::{grad_check, GradCheckReport, Tensor};
use crate::params::Params;
use crate::quart::ContextMode;
use crate::seed::rng_for;
use crate::streams::MultimodalSample;

/// Finite-difference check of the full training objective (task loss plus
/// `lambda` times the relevance term) over projections, gating, decoder and
/// adapters. Adapter `B` matrices are randomized so that every adapter
/// gradient is exercised.
pub fn objective_grad_check(
    config: &ModelConfig,
    seed: u64,
    samples: &[MultimodalSample],
    lambda: f64,
    sign: RegSign,
    eps: f64,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(Error::Input("grad check needs at least one sample".into()));
    }
    let mut model = Model::<f64>::init(config.clone(), seed)?;
    let mut r = rng_for(seed, "gradcheck.lora", 0);
    model.visit_mut(&mut |n, t| {
        if n.starts_with("lora.") && n.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.1, &mut r);
        }
    });
    let enc = samples
        .iter()
        .map(|s| encode_sample(&model, s))
        .collect::<Result<Vec<_>>>()?;
    let mut params = Vec::new();
    model.visit(&mut |n, t| {
        if Group::of(&n) != Some(Group::Encoder) {
            params.push(t.clone());
        }
    });
    let scale = 1.0 / enc.len() as f64;
    grad_check(
        |g, ids| {
            let b = model.bound_from_ids(ids)?;
            let mut sum = None;
            for s in &enc {
                let (ctx, alpha) =
                    model.context_nodes(g, &b, &s.feats, &s.query, ContextMode::Gated, &ModalityMask::default())?;
                let logits = decode_logits_nodes(g, ctx, &s.query, &s.answer, &b.dec, Some(&b.lora), &config.decoder)?
                    .ok_or_else(|| Error::Input("empty answer".into()))?;
                let lq = loss_quart_nodes(g, logits, &s.answer)?;
                let lr = alpha.map(|a| loss_reg_nodes(g, a)).transpose()?;
                let t = loss_total_nodes(g, lq, lr, lambda, sign)?;
                sum = Some(match sum {
                    None => t,
                    Some(p) => g.add(p, t)?,
                });
            }
            Ok(g.scale(sum.unwrap(), scale))
        },
        &params,
        eps,
    )
}
