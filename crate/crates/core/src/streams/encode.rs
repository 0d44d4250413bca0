use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, RawStream};
use crate::error::{Error, Result};
use crate::numcore::{matmul_kernel, sinusoidal_positions, Graph, NodeId, Scalar, Tensor};
use crate::params::Params;

/// Fixed random linear+relu feature extractor for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub modality: Modality,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(modality: Modality, native_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        EncoderParams {
            modality,
            weight: Tensor::randn(&[native_dim, out_dim], (2.0 / native_dim as f64).sqrt(), rng),
            bias: Tensor::randn(&[out_dim], 0.1, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Scalar> Params<T> for EncoderParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("encoder.{}.weight", self.modality), &self.weight);
        f(format!("encoder.{}.bias", self.modality), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("encoder.{}.weight", self.modality), &mut self.weight);
        f(format!("encoder.{}.bias", self.modality), &mut self.bias);
    }
}

/// Splits a stream into `tokens` windows and encodes each window.
///
/// Video takes the frame at the center of each window; audio and sensor
/// average the frames of each window.
pub fn encode<T: Scalar>(stream: &RawStream, params: &EncoderParams<T>, tokens: usize) -> Result<Tensor<T>> {
    if stream.modality() != params.modality {
        return Err(Error::Input(format!(
            "{} stream given to {} encoder",
            stream.modality(),
            params.modality
        )));
    }
    if stream.dim() != params.weight.shape()[0] {
        return Err(Error::dim("encode", &[stream.len(), stream.dim()], params.weight.shape()));
    }
    let (len, dim) = (stream.len(), stream.dim());
    if tokens == 0 || len < tokens {
        return Err(Error::Input(format!(
            "{} stream of {len} frames is shorter than one window for {tokens} tokens",
            stream.modality()
        )));
    }
    let mut pooled = Vec::with_capacity(tokens * dim);
    for i in 0..tokens {
        match stream.modality() {
            Modality::Video => {
                let t = (2 * i + 1) * len / (2 * tokens);
                pooled.extend(stream.frame(t).iter().map(|&v| T::of(v)));
            }
            _ => {
                let (lo, hi) = (i * len / tokens, (i + 1) * len / tokens);
                let inv = 1.0 / (hi - lo) as f64;
                for d in 0..dim {
                    let s: f64 = (lo..hi).map(|t| stream.frame(t)[d]).sum();
                    pooled.push(T::of(s * inv));
                }
            }
        }
    }
    let out_dim = params.out_dim();
    let mut out = matmul_kernel(&pooled, params.weight.data(), tokens, dim, out_dim);
    for row in out.chunks_mut(out_dim) {
        for (v, &b) in row.iter_mut().zip(params.bias.data()) {
            let x = *v + b;
            *v = if x > T::zero() { x } else { T::zero() };
        }
    }
    Tensor::new(vec![tokens, out_dim], out)
}

/// Two-layer MLP mapping encoder features into the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    pub modality: Modality,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn init<R: Rng + ?Sized>(modality: Modality, in_dim: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        ProjectionParams {
            modality,
            w1: Tensor::randn(&[in_dim, hidden], (2.0 / in_dim as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, embed], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[embed]),
            trainable: true,
        }
    }

    /// Registers the weights on `g`. Gradients are tracked only when both
    /// `trainable` and the params' own flag are set.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ProjectionNodes {
        let on = trainable && self.trainable;
        let m = self.modality;
        ProjectionNodes {
            w1: g.param(&format!("projection.{m}.w1"), &self.w1, on),
            b1: g.param(&format!("projection.{m}.b1"), &self.b1, on),
            w2: g.param(&format!("projection.{m}.w2"), &self.w2, on),
            b2: g.param(&format!("projection.{m}.b2"), &self.b2, on),
        }
    }
}

impl<T: Scalar> Params<T> for ProjectionParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let m = self.modality;
        f(format!("projection.{m}.w1"), &self.w1);
        f(format!("projection.{m}.b1"), &self.b1);
        f(format!("projection.{m}.w2"), &self.w2);
        f(format!("projection.{m}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let m = self.modality;
        f(format!("projection.{m}.w1"), &mut self.w1);
        f(format!("projection.{m}.b1"), &mut self.b1);
        f(format!("projection.{m}.w2"), &mut self.w2);
        f(format!("projection.{m}.b2"), &mut self.b2);
    }
}

/// `relu(x W1 + b1) W2 + b2` on the graph.
pub fn project_nodes<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &ProjectionNodes) -> Result<NodeId> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.w2)?;
    g.add_bias(o, p.b2)
}

/// One modality's tokens in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub modality: Modality,
    pub tokens: Tensor<T>,
    pub global_positions: Vec<usize>,
}

pub fn project<T: Scalar>(encoded: &Tensor<T>, params: &ProjectionParams<T>) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let x = g.constant(encoded.clone());
    let nodes = params.bind(&mut g, false);
    let out = project_nodes(&mut g, x, &nodes)?;
    let rows = g.value(out).shape()[0];
    Ok(TokenSequence {
        modality: params.modality,
        tokens: g.value(out).clone(),
        global_positions: (0..rows).collect(),
    })
}

/// Token counts per modality block, in video, audio, sensor order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub lengths: [usize; 3],
}

impl BlockLayout {
    pub fn new(video: usize, audio: usize, sensor: usize) -> Self {
        BlockLayout {
            lengths: [video, audio, sensor],
        }
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn len(&self, m: Modality) -> usize {
        self.lengths[m.index()]
    }

    pub fn block(&self, m: Modality) -> Range<usize> {
        let start: usize = self.lengths[..m.index()].iter().sum();
        start..start + self.lengths[m.index()]
    }

    /// Row indices where the audio and sensor blocks begin.
    pub fn boundaries(&self) -> [usize; 2] {
        [self.block(Modality::Audio).start, self.block(Modality::Sensor).start]
    }

    pub fn modality_of(&self, row: usize) -> Modality {
        Modality::ALL
            .into_iter()
            .find(|&m| self.block(m).contains(&row))
            .unwrap_or(Modality::Sensor)
    }
}

/// Concatenates the three blocks (video, audio, sensor) on the graph and adds
/// sinusoidal codes of the global row index.
pub fn assemble_nodes<T: Scalar>(g: &mut Graph<T>, blocks: [NodeId; 3], layout: &BlockLayout) -> Result<NodeId> {
    let width = g.shape(blocks[0]).get(1).copied().unwrap_or(0);
    for m in Modality::ALL {
        let s = g.shape(blocks[m.index()]);
        if s.len() != 2 || s[0] != layout.len(m) || s[1] != width {
            return Err(Error::config(
                format!("model.{m}_tokens"),
                format!("{m} block has shape {s:?}, layout expects {} rows", layout.len(m)),
            ));
        }
    }
    let z = g.concat(&blocks, 0)?;
    let positions: Vec<usize> = (0..layout.total()).collect();
    let pe = g.constant(sinusoidal_positions(&positions, width));
    g.add(z, pe)
}

/// Builds the unified token matrix `Z` and its global positions.
pub fn assemble<T: Scalar>(
    zv: &TokenSequence<T>,
    za: &TokenSequence<T>,
    zs: &TokenSequence<T>,
    layout: &BlockLayout,
) -> Result<(Tensor<T>, Vec<usize>)> {
    for (seq, m) in [zv, za, zs].into_iter().zip(Modality::ALL) {
        if seq.modality != m {
            return Err(Error::Input(format!("expected {m} block, got {}", seq.modality)));
        }
    }
    let mut g = Graph::new();
    let blocks = [zv, za, zs].map(|s| g.constant(s.tokens.clone()));
    let z = assemble_nodes(&mut g, blocks, layout)?;
    Ok((g.value(z).clone(), (0..layout.total()).collect()))
}
