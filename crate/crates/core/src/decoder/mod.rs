//! Tiny decoder-only transformer conditioned on prefix context rows, with
//! LoRA adapters on its attention projections and the training losses.

mod loss;
mod lora;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sinusoidal_positions, Graph, NodeId, Scalar, Tensor};
use crate::params::Params;
use crate::streams::vocab;

pub use loss::{loss_quart, loss_quart_nodes, loss_reg, loss_reg_nodes, loss_total, loss_total_nodes, RegSign};
pub use lora::{adapted_linear, lora_merge, LoraAdapter, LoraNodes};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub vocab: usize,
    pub mlp_hidden: usize,
    pub max_answer_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            heads: 2,
            embed_dim: 32,
            vocab: 64,
            mlp_hidden: 64,
            max_answer_len: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("decoder.layers", "need at least one layer"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "decoder.heads",
                format!("{} heads do not divide embed dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.vocab < 2 {
            return Err(Error::config("decoder.vocab", "vocabulary needs at least two tokens"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("decoder.mlp_hidden", "must be positive"));
        }
        if self.max_answer_len == 0 {
            return Err(Error::config("decoder.max_answer_len", "must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Which attention matrix an adapter targets.
pub const ATTN_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `w_q, w_k, w_v, w_o`, each `E x E`.
    pub attn: [Tensor<T>; 4],
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub config: DecoderConfig,
    /// `V x E`
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    /// `E x V`
    pub head: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub ln1: [NodeId; 2],
    pub attn: [NodeId; 4],
    pub ln2: [NodeId; 2],
    pub mlp: [NodeId; 4],
}

#[derive(Clone, Debug)]
pub struct DecoderNodes {
    pub embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub lnf: [NodeId; 2],
    pub head: NodeId,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, f, v) = (config.embed_dim, config.mlp_hidden, config.vocab);
        let std_e = (1.0 / e as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::ones(&[e]),
                ln1_bias: Tensor::zeros(&[e]),
                attn: std::array::from_fn(|_| Tensor::randn(&[e, e], std_e, rng)),
                ln2_gain: Tensor::ones(&[e]),
                ln2_bias: Tensor::zeros(&[e]),
                w1: Tensor::randn(&[e, f], (2.0 / e as f64).sqrt(), rng),
                b1: Tensor::zeros(&[f]),
                w2: Tensor::randn(&[f, e], (1.0 / f as f64).sqrt(), rng),
                b2: Tensor::zeros(&[e]),
            })
            .collect();
        Ok(DecoderParams {
            embed: Tensor::randn(&[v, e], 1.0, rng),
            layers,
            lnf_gain: Tensor::ones(&[e]),
            lnf_bias: Tensor::zeros(&[e]),
            head: Tensor::randn(&[e, v], std_e, rng),
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.head.shape() != [c.embed_dim, c.vocab] {
            return Err(Error::dim("decoder head", self.head.shape(), &[c.embed_dim, c.vocab]));
        }
        if self.embed.shape() != [c.vocab, c.embed_dim] {
            return Err(Error::dim("decoder embed", self.embed.shape(), &[c.vocab, c.embed_dim]));
        }
        if self.layers.len() != c.layers {
            return Err(Error::config("decoder.layers", "stored layer count differs from config"));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DecoderNodes {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = |g: &mut Graph<T>, n: &str, t: &Tensor<T>| g.param(&format!("decoder.layer{i}.{n}"), t, trainable);
                LayerNodes {
                    ln1: [p(g, "ln1.gain", &l.ln1_gain), p(g, "ln1.bias", &l.ln1_bias)],
                    attn: [
                        p(g, "w_q", &l.attn[0]),
                        p(g, "w_k", &l.attn[1]),
                        p(g, "w_v", &l.attn[2]),
                        p(g, "w_o", &l.attn[3]),
                    ],
                    ln2: [p(g, "ln2.gain", &l.ln2_gain), p(g, "ln2.bias", &l.ln2_bias)],
                    mlp: [p(g, "w1", &l.w1), p(g, "b1", &l.b1), p(g, "w2", &l.w2), p(g, "b2", &l.b2)],
                }
            })
            .collect();
        DecoderNodes {
            embed: g.param("decoder.embed", &self.embed, trainable),
            layers,
            lnf: [
                g.param("decoder.lnf.gain", &self.lnf_gain, trainable),
                g.param("decoder.lnf.bias", &self.lnf_bias, trainable),
            ],
            head: g.param("decoder.head", &self.head, trainable),
        }
    }

    /// Copy with every adapter folded into its base matrix.
    pub fn merged(&self, lora: &LoraSet<T>) -> Result<Self> {
        if lora.layers.len() != self.layers.len() {
            return Err(Error::config("lora", "adapter layer count differs from decoder"));
        }
        let mut out = self.clone();
        for (l, ad) in out.layers.iter_mut().zip(&lora.layers) {
            for (w, a) in l.attn.iter_mut().zip(ad) {
                *w = lora_merge(w, a)?;
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Params<T> for DecoderParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("decoder.embed".into(), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("decoder.layer{i}.{s}");
            f(n("ln1.gain"), &l.ln1_gain);
            f(n("ln1.bias"), &l.ln1_bias);
            for (t, w) in ATTN_TARGETS.iter().zip(&l.attn) {
                f(n(&format!("w_{t}")), w);
            }
            f(n("ln2.gain"), &l.ln2_gain);
            f(n("ln2.bias"), &l.ln2_bias);
            f(n("w1"), &l.w1);
            f(n("b1"), &l.b1);
            f(n("w2"), &l.w2);
            f(n("b2"), &l.b2);
        }
        f("decoder.lnf.gain".into(), &self.lnf_gain);
        f("decoder.lnf.bias".into(), &self.lnf_bias);
        f("decoder.head".into(), &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("decoder.embed".into(), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("decoder.layer{i}.{s}");
            f(n("ln1.gain"), &mut l.ln1_gain);
            f(n("ln1.bias"), &mut l.ln1_bias);
            for (t, w) in ATTN_TARGETS.iter().zip(&mut l.attn) {
                f(n(&format!("w_{t}")), w);
            }
            f(n("ln2.gain"), &mut l.ln2_gain);
            f(n("ln2.bias"), &mut l.ln2_bias);
            f(n("w1"), &mut l.w1);
            f(n("b1"), &mut l.b1);
            f(n("w2"), &mut l.w2);
            f(n("b2"), &mut l.b2);
        }
        f("decoder.lnf.gain".into(), &mut self.lnf_gain);
        f("decoder.lnf.bias".into(), &mut self.lnf_bias);
        f("decoder.head".into(), &mut self.head);
    }
}

/// Adapters for `w_q, w_k, w_v, w_o` of every decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T> {
    pub layers: Vec<[LoraAdapter<T>; 4]>,
}

impl<T: Scalar> LoraSet<T> {
    pub fn init<R: Rng + ?Sized>(config: &DecoderConfig, rank: usize, rng: &mut R) -> Result<Self> {
        let e = config.embed_dim;
        let layers = (0..config.layers)
            .map(|_| {
                let v: Vec<_> = (0..4).map(|_| LoraAdapter::init(e, e, rank, rng)).collect::<Result<_>>()?;
                Ok(v.try_into().unwrap())
            })
            .collect::<Result<_>>()?;
        Ok(LoraSet { layers })
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, |l| l[0].rank)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<[LoraNodes; 4]> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, ads)| {
                std::array::from_fn(|k| {
                    let t = ATTN_TARGETS[k];
                    LoraNodes {
                        a: g.param(&format!("lora.layer{i}.{t}.a"), &ads[k].a, trainable),
                        b: g.param(&format!("lora.layer{i}.{t}.b"), &ads[k].b, trainable),
                        scale: ads[k].scale,
                    }
                })
            })
            .collect()
    }
}

impl<T: Scalar> Params<T> for LoraSet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, ads) in self.layers.iter().enumerate() {
            for (t, a) in ATTN_TARGETS.iter().zip(ads) {
                f(format!("lora.layer{i}.{t}.a"), &a.a);
                f(format!("lora.layer{i}.{t}.b"), &a.b);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, ads) in self.layers.iter_mut().enumerate() {
            for (t, a) in ATTN_TARGETS.iter().zip(ads) {
                f(format!("lora.layer{i}.{t}.a"), &mut a.a);
                f(format!("lora.layer{i}.{t}.b"), &mut a.b);
            }
        }
    }
}

fn causal_keep(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    w: &[NodeId; 4],
    lora: Option<&[LoraNodes; 4]>,
    cfg: &DecoderConfig,
) -> Result<NodeId> {
    let n = g.shape(x)[0];
    let dk = cfg.head_dim();
    let ad = |k: usize| lora.map(|l| &l[k]);
    let q = adapted_linear(g, x, w[0], ad(0))?;
    let k = adapted_linear(g, x, w[1], ad(1))?;
    let v = adapted_linear(g, x, w[2], ad(2))?;
    let keep = causal_keep(n);
    let inv_sqrt = T::one() / T::of(dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, inv_sqrt);
        let a = g.masked_softmax(s, &keep)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    adapted_linear(g, cat, w[3], ad(3))
}

/// Teacher-forced logits for `answer` given context rows and the query.
///
/// The input is `[context rows] ++ embed(query) ++ embed(answer[..T-1])`
/// with positional codes over the whole sequence; the `T` returned rows are
/// the predictions for `answer[0..T]`. Returns `None` when `answer` is empty.
pub fn decode_logits_nodes<T: Scalar>(
    g: &mut Graph<T>,
    context: NodeId,
    query: &[usize],
    answer: &[usize],
    dec: &DecoderNodes,
    lora: Option<&[[LoraNodes; 4]]>,
    cfg: &DecoderConfig,
) -> Result<Option<NodeId>> {
    if answer.is_empty() {
        return Ok(None);
    }
    if query.is_empty() {
        return Err(Error::Input("query must have at least one token".into()));
    }
    let (ctx_rows, e) = match g.shape(context) {
        [r, e] => (*r, *e),
        s => return Err(Error::Input(format!("context must be a matrix, got {s:?}"))),
    };
    if e != cfg.embed_dim {
        return Err(Error::dim("decode context", &[ctx_rows, e], &[ctx_rows, cfg.embed_dim]));
    }
    if let Some(l) = lora {
        if l.len() != dec.layers.len() {
            return Err(Error::config("lora", "adapter layer count differs from decoder"));
        }
    }
    let fed: Vec<usize> = query.iter().chain(&answer[..answer.len() - 1]).copied().collect();
    let emb = g.embedding(dec.embed, &fed)?;
    let x = g.concat(&[context, emb], 0)?;
    let n = ctx_rows + fed.len();
    let positions: Vec<usize> = (0..n).collect();
    let pe = g.constant(sinusoidal_positions::<T>(&positions, e));
    let mut x = g.add(x, pe)?;
    let eps = T::of(LN_EPS);
    for (i, l) in dec.layers.iter().enumerate() {
        let h = g.layer_norm(x, l.ln1[0], l.ln1[1], eps)?;
        let a = self_attention(g, h, &l.attn, lora.map(|ls| &ls[i]), cfg)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, l.ln2[0], l.ln2[1], eps)?;
        let h = g.matmul(h, l.mlp[0])?;
        let h = g.add_bias(h, l.mlp[1])?;
        let h = g.relu(h);
        let h = g.matmul(h, l.mlp[2])?;
        let h = g.add_bias(h, l.mlp[3])?;
        x = g.add(x, h)?;
    }
    let x = g.layer_norm(x, dec.lnf[0], dec.lnf[1], eps)?;
    let start = ctx_rows + query.len() - 1;
    let rows = g.slice_rows(x, start, n)?;
    Ok(Some(g.matmul(rows, dec.head)?))
}

/// `T x V` teacher-forced logits on a fresh graph; `T = answer.len()`.
pub fn decode_logits<T: Scalar>(
    context: &Tensor<T>,
    query: &[usize],
    answer: &[usize],
    params: &DecoderParams<T>,
    lora: Option<&LoraSet<T>>,
) -> Result<Tensor<T>> {
    let v = params.config.vocab;
    let mut g = Graph::new();
    let ctx = g.constant(context.clone());
    let dec = params.bind(&mut g, false);
    let ln = lora.map(|l| l.bind(&mut g, false));
    match decode_logits_nodes(&mut g, ctx, query, answer, &dec, ln.as_deref(), &params.config)? {
        Some(id) => Ok(g.value(id).clone()),
        None => Ok(Tensor::raw(vec![0, v], Vec::new())),
    }
}

/// Restricts decoding to a closed set of token sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnswerSet {
    sequences: Vec<Vec<usize>>,
}

impl AnswerSet {
    pub fn new(sequences: Vec<Vec<usize>>) -> Self {
        AnswerSet { sequences }
    }

    /// Every `[answer word, EOA]` pair of the shared vocabulary.
    pub fn closed_answers() -> Self {
        AnswerSet::new(vocab::answer_tokens().into_iter().map(|t| vec![t, vocab::EOA]).collect())
    }

    /// Tokens that extend `prefix` towards some member; `None` when nothing
    /// matches, which leaves the step unconstrained.
    pub fn allowed(&self, prefix: &[usize]) -> Option<Vec<usize>> {
        let mut out: Vec<usize> = self
            .sequences
            .iter()
            .filter(|s| s.len() > prefix.len() && s.starts_with(prefix))
            .map(|s| s[prefix.len()])
            .collect();
        out.sort_unstable();
        out.dedup();
        (!out.is_empty()).then_some(out)
    }
}

/// Index of the largest value among `allowed` (all indices when `None`);
/// ties go to the lowest index.
pub fn argmax_lowest<T: Scalar>(row: &[T], allowed: Option<&[usize]>) -> usize {
    let mut best: Option<(usize, T)> = None;
    let mut consider = |i: usize| {
        let v = row[i];
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    };
    match allowed {
        Some(a) => a.iter().copied().filter(|&i| i < row.len()).for_each(&mut consider),
        None => (0..row.len()).for_each(&mut consider),
    }
    best.map_or(0, |(i, _)| i)
}

/// Greedy decoding driven by a next-token logit function.
pub fn greedy_decode_with<T: Scalar>(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<T>>,
    max_len: usize,
    constraint: Option<&AnswerSet>,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::config("decoder.max_answer_len", "must be at least 1"));
    }
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let row = next_logits(&out)?;
        let allowed = constraint.and_then(|c| c.allowed(&out));
        let tok = argmax_lowest(&row, allowed.as_deref());
        out.push(tok);
        if tok == vocab::EOA {
            break;
        }
    }
    Ok(out)
}

/// Greedy answer for one context and query.
pub fn greedy_decode<T: Scalar>(
    context: &Tensor<T>,
    query: &[usize],
    params: &DecoderParams<T>,
    lora: Option<&LoraSet<T>>,
    max_len: usize,
    constraint: Option<&AnswerSet>,
) -> Result<Vec<usize>> {
    greedy_decode_with(
        |prefix| {
            let mut fed = prefix.to_vec();
            fed.push(vocab::PAD);
            let logits = decode_logits(context, query, &fed, params, lora)?;
            Ok(logits.row(fed.len() - 1).to_vec())
        },
        max_len,
        constraint,
    )
}

impl FromStr for RegSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(RegSign::AsWritten),
            "sparsity" => Ok(RegSign::Sparsity),
            _ => Err(Error::config("train.reg_sign", format!("expected as_written or sparsity, got `{s}`"))),
        }
    }
}
