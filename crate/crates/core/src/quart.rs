//! Query-aligned token gating.
//!
//! The query attends over the unified token matrix `Z` with multi-head
//! attention. A relevance head `W^R` (E x L) maps the pooled attention output
//! to one logit per token position; a softmax over all `L` positions gives
//! the relevance weights `alpha`, and `C = alpha^T Z` is the fused context.
//! The attention weights themselves never enter `alpha` except through the
//! attention output, so `W^R` can overrule them.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Scalar, Tensor};
use crate::params::Params;
use crate::streams::{assemble_nodes, BlockLayout, Modality, TokenSequence};

/// Reduction of the `L_q x L` score matrix to one logit per token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
    Max,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::config("quart.pooling", format!("unknown pooling `{s}`"))),
        }
    }
}

/// How the decoder is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// One fused row `C`.
    Gated,
    /// All `L` rows of `Z`, unweighted.
    Raw,
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(ContextMode::Gated),
            "raw" => Ok(ContextMode::Raw),
            _ => Err(Error::config("context_mode", format!("unknown context mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layout: BlockLayout,
    pub pooling: Pooling,
}

impl QuartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("quart.heads", "heads and head width must be positive"));
        }
        if self.heads * self.head_dim != self.embed_dim {
            return Err(Error::config(
                "quart.heads",
                format!(
                    "heads ({}) x head width ({}) must equal embedding width ({})",
                    self.heads, self.head_dim, self.embed_dim
                ),
            ));
        }
        if self.layout.lengths.iter().any(|&l| l == 0) {
            return Err(Error::config("model.tokens", "every modality needs at least one token"));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.layout.total()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuartParams<T> {
    pub config: QuartConfig,
    pub heads: Vec<HeadParams<T>>,
    /// `(H d_k) x E` output projection.
    pub w_o: Tensor<T>,
    /// `E x L` relevance head.
    pub w_r: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct QuartNodes {
    pub heads: Vec<[NodeId; 3]>,
    pub w_o: NodeId,
    pub w_r: NodeId,
}

impl<T: Scalar> QuartParams<T> {
    pub fn init<R: Rng + ?Sized>(config: QuartConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, dk, l) = (config.embed_dim, config.head_dim, config.total_tokens());
        let std = (1.0 / e as f64).sqrt();
        let heads = (0..config.heads)
            .map(|_| HeadParams {
                w_q: Tensor::randn(&[e, dk], std, rng),
                w_k: Tensor::randn(&[e, dk], std, rng),
                w_v: Tensor::randn(&[e, dk], std, rng),
            })
            .collect();
        Ok(QuartParams {
            w_o: Tensor::randn(&[config.heads * dk, e], std, rng),
            w_r: Tensor::randn(&[e, l], 0.02, rng),
            heads,
            config,
        })
    }

    /// Checks stored shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (e, dk, l) = (self.config.embed_dim, self.config.head_dim, self.config.total_tokens());
        if self.heads.len() != self.config.heads {
            return Err(Error::config("quart.heads", "stored head count differs from config"));
        }
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != [e, dk] {
                    return Err(Error::dim("quart head", w.shape(), &[e, dk]));
                }
            }
        }
        if self.w_o.shape() != [self.config.heads * dk, e] {
            return Err(Error::dim("quart w_o", self.w_o.shape(), &[self.config.heads * dk, e]));
        }
        if self.w_r.shape() != [e, l] {
            return Err(Error::config(
                "quart.w_r",
                format!("relevance head is {:?}, expected [{e}, {l}]", self.w_r.shape()),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> QuartNodes {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                [
                    g.param(&format!("quart.head{i}.w_q"), &h.w_q, trainable),
                    g.param(&format!("quart.head{i}.w_k"), &h.w_k, trainable),
                    g.param(&format!("quart.head{i}.w_v"), &h.w_v, trainable),
                ]
            })
            .collect();
        QuartNodes {
            heads,
            w_o: g.param("quart.w_o", &self.w_o, trainable),
            w_r: g.param("quart.w_r", &self.w_r, trainable),
        }
    }
}

impl<T: Scalar> Params<T> for QuartParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(format!("quart.head{i}.w_q"), &h.w_q);
            f(format!("quart.head{i}.w_k"), &h.w_k);
            f(format!("quart.head{i}.w_v"), &h.w_v);
        }
        f("quart.w_o".into(), &self.w_o);
        f("quart.w_r".into(), &self.w_r);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(format!("quart.head{i}.w_q"), &mut h.w_q);
            f(format!("quart.head{i}.w_k"), &mut h.w_k);
            f(format!("quart.head{i}.w_v"), &mut h.w_v);
        }
        f("quart.w_o".into(), &mut self.w_o);
        f("quart.w_r".into(), &mut self.w_r);
    }
}

/// Graph nodes produced by one attention pass.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub output: NodeId,
    /// Per-head `L_q x L` attention weights.
    pub weights: Vec<NodeId>,
}

/// Multi-head attention of query rows `zq` over token rows `z`.
pub fn attend_nodes<T: Scalar>(
    g: &mut Graph<T>,
    zq: NodeId,
    z: NodeId,
    p: &QuartNodes,
    cfg: &QuartConfig,
) -> Result<AttentionNodes> {
    let (lq, e) = match g.shape(zq) {
        [lq, e] => (*lq, *e),
        s => return Err(Error::Input(format!("query must be a matrix, got {s:?}"))),
    };
    if lq == 0 {
        return Err(Error::Input("empty query".into()));
    }
    if e != cfg.embed_dim || g.shape(z).get(1) != Some(&cfg.embed_dim) {
        return Err(Error::dim("attend", g.shape(zq), g.shape(z)));
    }
    let inv_sqrt = T::one() / T::of(cfg.head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for [wq, wk, wv] in &p.heads {
        let q = g.matmul(zq, *wq)?;
        let k = g.matmul(z, *wk)?;
        let v = g.matmul(z, *wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, inv_sqrt);
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, v)?);
        weights.push(a);
    }
    let cat = g.concat(&outs, 1)?;
    let output = g.matmul(cat, p.w_o)?;
    Ok(AttentionNodes { output, weights })
}

/// `alpha = softmax(pool(M W^R))` over the kept token positions.
///
/// Positions with `keep[j] == false` get exactly zero weight.
pub fn relevance_nodes<T: Scalar>(
    g: &mut Graph<T>,
    m: NodeId,
    w_r: NodeId,
    pooling: Pooling,
    keep: Option<&[bool]>,
) -> Result<NodeId> {
    let scores = g.matmul(m, w_r)?;
    let (lq, l) = g.value(scores).dims2()?;
    let pooled = match pooling {
        Pooling::Mean => g.mean(scores, 0)?,
        Pooling::Max => g.max(scores, 0)?,
        Pooling::Last => {
            let r = g.slice_rows(scores, lq - 1, lq)?;
            g.reshape(r, &[l])?
        }
    };
    let row = g.reshape(pooled, &[1, l])?;
    let alpha = match keep {
        Some(k) => g.masked_softmax(row, k)?,
        None => g.softmax(row, 1)?,
    };
    g.reshape(alpha, &[l])
}

/// `C = alpha^T Z` as a `1 x E` row.
pub fn fuse_nodes<T: Scalar>(g: &mut Graph<T>, alpha: NodeId, z: NodeId) -> Result<NodeId> {
    let l = g.value(alpha).numel();
    if g.shape(z).first() != Some(&l) {
        return Err(Error::dim("fuse", g.shape(alpha), g.shape(z)));
    }
    let row = g.reshape(alpha, &[1, l])?;
    g.matmul(row, z)
}

/// Relevance weights over the `L` concatenated tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores<T> {
    pub alpha: Vec<T>,
    pub layout: BlockLayout,
}

impl<T: Scalar> RelevanceScores<T> {
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        if self.alpha.len() != self.layout.total() {
            return Err(Error::Contract(format!(
                "alpha has {} entries, layout has {}",
                self.alpha.len(),
                self.layout.total()
            )));
        }
        if let Some(v) = self.alpha.iter().find(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::Contract(format!("alpha entry {v} is negative")));
        }
        let s: f64 = self.alpha.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Contract(format!("alpha sums to {s}")));
        }
        Ok(())
    }

    pub fn modality_mass(&self) -> [f64; 3] {
        modality_mass(&self.alpha, &self.layout)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.alpha)
    }
}

pub fn entropy<T: Scalar>(alpha: &[T]) -> f64 {
    -alpha
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Sum of `alpha` over each modality block.
pub fn modality_mass<T: Scalar>(alpha: &[T], layout: &BlockLayout) -> [f64; 3] {
    Modality::ALL.map(|m| alpha[layout.block(m)].iter().map(|v| v.as_f64()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedContext<T> {
    pub c: Vec<T>,
    pub alpha: RelevanceScores<T>,
}

/// Attention output `M` for query rows `zq` over `z`, with per-head weights.
pub fn attend<T: Scalar>(zq: &Tensor<T>, z: &Tensor<T>, params: &QuartParams<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    params.validate()?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let (q, zi) = (g.constant(zq.clone()), g.constant(z.clone()));
    let out = attend_nodes(&mut g, q, zi, &nodes, &params.config)?;
    let weights = out.weights.iter().map(|&w| g.value(w).clone()).collect();
    Ok((g.value(out.output).clone(), weights))
}

pub fn relevance<T: Scalar>(
    m: &Tensor<T>,
    w_r: &Tensor<T>,
    pooling: Pooling,
    layout: &BlockLayout,
) -> Result<RelevanceScores<T>> {
    let mut g = Graph::new();
    let (mi, wi) = (g.constant(m.clone()), g.constant(w_r.clone()));
    let a = relevance_nodes(&mut g, mi, wi, pooling, None)?;
    Ok(RelevanceScores {
        alpha: g.value(a).data().to_vec(),
        layout: *layout,
    })
}

pub fn fuse<T: Scalar>(alpha: &RelevanceScores<T>, z: &Tensor<T>) -> Result<FusedContext<T>> {
    alpha.check_simplex(1e-6)?;
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![alpha.alpha.len()], alpha.alpha.clone())?);
    let zi = g.constant(z.clone());
    let c = fuse_nodes(&mut g, a, zi)?;
    Ok(FusedContext {
        c: g.value(c).data().to_vec(),
        alpha: alpha.clone(),
    })
}

/// Output of a full gating pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QuartOutput<T> {
    /// `1 x E` in gated mode, `L x E` in raw mode.
    pub context: Tensor<T>,
    pub alpha: Option<RelevanceScores<T>>,
}

/// Node-level forward: assembles `Z` and produces the decoder context.
/// Returns `(context, Some(alpha))` in gated mode and `(Z, None)` in raw mode.
pub fn forward_nodes<T: Scalar>(
    g: &mut Graph<T>,
    zq: NodeId,
    blocks: [NodeId; 3],
    p: Option<&QuartNodes>,
    cfg: &QuartConfig,
    mode: ContextMode,
    keep: Option<&[bool]>,
) -> Result<(NodeId, Option<NodeId>)> {
    let z = assemble_nodes(g, blocks, &cfg.layout)?;
    match mode {
        ContextMode::Raw => Ok((z, None)),
        ContextMode::Gated => {
            let p = p.ok_or_else(|| Error::config("context_mode", "gated mode needs gating parameters"))?;
            let att = attend_nodes(g, zq, z, p, cfg)?;
            let alpha = relevance_nodes(g, att.output, p.w_r, cfg.pooling, keep)?;
            let c = fuse_nodes(g, alpha, z)?;
            Ok((c, Some(alpha)))
        }
    }
}

pub fn forward<T: Scalar>(
    zq: &Tensor<T>,
    zv: &TokenSequence<T>,
    za: &TokenSequence<T>,
    zs: &TokenSequence<T>,
    params: &QuartParams<T>,
    mode: ContextMode,
) -> Result<QuartOutput<T>> {
    params.validate()?;
    for (seq, m) in [zv, za, zs].into_iter().zip(Modality::ALL) {
        if seq.modality != m {
            return Err(Error::Input(format!("expected {m} block, got {}", seq.modality)));
        }
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let q = g.constant(zq.clone());
    let blocks = [zv, za, zs].map(|s| g.constant(s.tokens.clone()));
    let (ctx, alpha) = forward_nodes(&mut g, q, blocks, Some(&nodes), &params.config, mode, None)?;
    Ok(QuartOutput {
        context: g.value(ctx).clone(),
        alpha: alpha.map(|a| RelevanceScores {
            alpha: g.value(a).data().to_vec(),
            layout: params.config.layout,
        }),
    })
}
