use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Group;
use crate::decoder::{greedy_decode, AnswerSet, DecoderConfig, DecoderNodes, DecoderParams, LoraNodes, LoraSet};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Scalar, Tensor};
use crate::params::Params;
use crate::quart::{attend_nodes, fuse_nodes, relevance_nodes, ContextMode, Pooling, QuartConfig, QuartNodes, QuartParams};
use crate::seed::rng_for;
use crate::streams::{
    assemble_nodes, encode, project_nodes, vocab, BlockLayout, EncoderParams, Modality, MultimodalSample,
    ProjectionNodes, ProjectionParams, Scenario, StreamConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub streams: StreamConfig,
    /// Tokens per modality block.
    pub tokens: BlockLayout,
    pub embed_dim: usize,
    pub encoder_dim: usize,
    pub projection_hidden: usize,
    pub quart_heads: usize,
    pub pooling: Pooling,
    pub decoder: DecoderConfig,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            streams: StreamConfig::default(),
            tokens: BlockLayout::new(8, 6, 4),
            embed_dim: 32,
            encoder_dim: 16,
            projection_hidden: 32,
            quart_heads: 2,
            pooling: Pooling::Mean,
            decoder: DecoderConfig::default(),
            lora_rank: 8,
        }
    }
}

impl ModelConfig {
    pub fn quart_config(&self) -> QuartConfig {
        QuartConfig {
            embed_dim: self.embed_dim,
            heads: self.quart_heads,
            head_dim: if self.quart_heads == 0 { 0 } else { self.embed_dim / self.quart_heads },
            layout: self.tokens,
            pooling: self.pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.streams.validate()?;
        self.decoder.validate()?;
        self.quart_config().validate()?;
        if self.decoder.embed_dim != self.embed_dim {
            return Err(Error::config(
                "model.embed_dim",
                format!("decoder width {} differs from {}", self.decoder.embed_dim, self.embed_dim),
            ));
        }
        if self.decoder.vocab < vocab::MIN_VOCAB {
            return Err(Error::config(
                "decoder.vocab",
                format!("needs at least {} tokens", vocab::MIN_VOCAB),
            ));
        }
        for m in Modality::ALL {
            if self.tokens.len(m) > self.streams.frames[m.index()] {
                return Err(Error::config(
                    format!("model.{m}_tokens"),
                    format!("{} tokens exceed {} frames", self.tokens.len(m), self.streams.frames[m.index()]),
                ));
            }
        }
        if self.encoder_dim == 0 || self.projection_hidden == 0 {
            return Err(Error::config("model.encoder_dim", "widths must be positive"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("model.lora_rank", "must be positive"));
        }
        Ok(())
    }
}

/// Which modality blocks are visible. Hidden blocks become zero tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub keep: [bool; 3],
    /// Renormalize relevance over the visible positions; otherwise the
    /// hidden positions' weight is simply dropped.
    pub renormalize: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask {
            keep: [true; 3],
            renormalize: true,
        }
    }
}

impl ModalityMask {
    pub fn only(mods: &[Modality]) -> Self {
        ModalityMask {
            keep: Modality::ALL.map(|m| mods.contains(&m)),
            renormalize: true,
        }
    }

    pub fn label(&self) -> String {
        let s: String = Modality::ALL
            .iter()
            .filter(|m| self.keep[m.index()])
            .map(|m| m.letter())
            .collect();
        if s.is_empty() {
            "none".into()
        } else {
            s
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoders: [EncoderParams<T>; 3],
    pub projections: [ProjectionParams<T>; 3],
    pub quart: QuartParams<T>,
    pub decoder: DecoderParams<T>,
    pub lora: LoraSet<T>,
}

/// Frozen encoder features of one sample plus its labels.
#[derive(Clone, Debug)]
pub struct EncodedSample<T> {
    pub sample_id: u64,
    pub feats: [Tensor<T>; 3],
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub stream_classes: [usize; 3],
    pub relevant: Vec<Modality>,
    pub scenario: Scenario,
}

pub fn encode_sample<T: Scalar>(model: &Model<T>, s: &MultimodalSample) -> Result<EncodedSample<T>> {
    let mut feats = Vec::with_capacity(3);
    for m in Modality::ALL {
        feats.push(encode(s.stream(m), &model.encoders[m.index()], model.config.tokens.len(m))?);
    }
    Ok(EncodedSample {
        sample_id: s.sample_id,
        feats: feats.try_into().unwrap(),
        query: s.query_tokens.clone(),
        answer: s.answer_tokens.clone(),
        stream_classes: s.stream_classes,
        relevant: s.relevant_modality.clone(),
        scenario: s.scenario,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: Vec<usize>,
    pub alpha: Option<Vec<f64>>,
}

pub(crate) struct Bound {
    pub proj: Vec<ProjectionNodes>,
    pub quart: QuartNodes,
    pub dec: DecoderNodes,
    pub lora: Vec<[LoraNodes; 4]>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, d) = (config.embed_dim, config.encoder_dim);
        let encoders = Modality::ALL.map(|m| {
            EncoderParams::init(
                m,
                config.streams.dims[m.index()],
                d,
                &mut rng_for(seed, "init.encoder", m.index() as u64),
            )
        });
        let projections = Modality::ALL.map(|m| {
            ProjectionParams::init(
                m,
                d,
                config.projection_hidden,
                e,
                &mut rng_for(seed, "init.projection", m.index() as u64),
            )
        });
        let quart = QuartParams::init(config.quart_config(), &mut rng_for(seed, "init.quart", 0))?;
        let decoder = DecoderParams::init(config.decoder, &mut rng_for(seed, "init.decoder", 0))?;
        let lora = LoraSet::init(&config.decoder, config.lora_rank, &mut rng_for(seed, "init.lora", 0))?;
        Ok(Model {
            config,
            encoders,
            projections,
            quart,
            decoder,
            lora,
        })
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: &BTreeSet<Group>) -> Bound {
        let on = |gr: Group| trainable.contains(&gr);
        Bound {
            proj: self.projections.iter().map(|p| p.bind(g, on(Group::Projection))).collect(),
            quart: self.quart.bind(g, on(Group::Quart)),
            dec: self.decoder.bind(g, on(Group::Decoder)),
            lora: self.lora.bind(g, on(Group::Lora)),
        }
    }

    /// Rebuilds the bound structure from node ids listed in visit order,
    /// encoders excluded.
    pub(crate) fn bound_from_ids(&self, ids: &[NodeId]) -> Result<Bound> {
        let heads = self.quart.heads.len();
        let layers = self.decoder.layers.len();
        let want = 12 + 3 * heads + 2 + 1 + 12 * layers + 3 + 8 * layers;
        if ids.len() != want {
            return Err(Error::Input(format!("expected {want} parameter nodes, got {}", ids.len())));
        }
        let (p, rest) = ids.split_at(12);
        let (q, rest) = rest.split_at(3 * heads + 2);
        let (d, l) = rest.split_at(1 + 12 * layers + 3);
        let proj = p
            .chunks(4)
            .map(|c| ProjectionNodes {
                w1: c[0],
                b1: c[1],
                w2: c[2],
                b2: c[3],
            })
            .collect();
        let quart = QuartNodes {
            heads: q[..3 * heads].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            w_o: q[3 * heads],
            w_r: q[3 * heads + 1],
        };
        let dec = DecoderNodes {
            embed: d[0],
            layers: d[1..1 + 12 * layers]
                .chunks(12)
                .map(|c| crate::decoder::LayerNodes {
                    ln1: [c[0], c[1]],
                    attn: [c[2], c[3], c[4], c[5]],
                    ln2: [c[6], c[7]],
                    mlp: [c[8], c[9], c[10], c[11]],
                })
                .collect(),
            lnf: [d[1 + 12 * layers], d[2 + 12 * layers]],
            head: d[3 + 12 * layers],
        };
        let lora = l
            .chunks(8)
            .zip(&self.lora.layers)
            .map(|(c, ads)| std::array::from_fn(|k| LoraNodes {
                a: c[2 * k],
                b: c[2 * k + 1],
                scale: ads[k].scale,
            }))
            .collect();
        Ok(Bound { proj, quart, dec, lora })
    }

    /// Decoder context rows and, in gated mode, the relevance weights.
    pub(crate) fn context_nodes(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        feats: &[Tensor<T>; 3],
        query: &[usize],
        mode: ContextMode,
        mask: &ModalityMask,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let e = self.config.embed_dim;
        let layout = self.config.tokens;
        let mut blocks = Vec::with_capacity(3);
        for m in Modality::ALL {
            let i = m.index();
            blocks.push(if mask.keep[i] {
                let x = g.constant(feats[i].clone());
                project_nodes(g, x, &b.proj[i])?
            } else {
                g.constant(Tensor::zeros(&[layout.len(m), e]))
            });
        }
        let z = assemble_nodes(g, [blocks[0], blocks[1], blocks[2]], &layout)?;
        if mode == ContextMode::Raw {
            return Ok((z, None));
        }
        let zq = g.embedding(b.dec.embed, query)?;
        let cfg = self.config.quart_config();
        let att = attend_nodes(g, zq, z, &b.quart, &cfg)?;
        let keep: Vec<bool> = (0..layout.total())
            .map(|j| mask.keep[layout.modality_of(j).index()])
            .collect();
        let partial = mask.keep.iter().any(|&k| k) && !mask.keep.iter().all(|&k| k);
        let alpha = if partial && mask.renormalize {
            relevance_nodes(g, att.output, b.quart.w_r, cfg.pooling, Some(&keep))?
        } else {
            let a = relevance_nodes(g, att.output, b.quart.w_r, cfg.pooling, None)?;
            if partial {
                let k = g.constant(Tensor::new(
                    vec![keep.len()],
                    keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect(),
                )?);
                g.mul(a, k)?
            } else {
                a
            }
        };
        let c = fuse_nodes(g, alpha, z)?;
        Ok((c, Some(alpha)))
    }

    /// Context and relevance weights for one encoded sample.
    pub fn context(
        &self,
        s: &EncodedSample<T>,
        mode: ContextMode,
        mask: &ModalityMask,
    ) -> Result<(Tensor<T>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &BTreeSet::new());
        let (c, a) = self.context_nodes(&mut g, &b, &s.feats, &s.query, mode, mask)?;
        let alpha = a.map(|a| g.value(a).data().iter().map(|v| v.as_f64()).collect());
        Ok((g.value(c).clone(), alpha))
    }

    /// Greedy answer, optionally restricted to the closed answer set.
    pub fn predict(
        &self,
        s: &EncodedSample<T>,
        mode: ContextMode,
        mask: &ModalityMask,
        closed_set: bool,
    ) -> Result<Prediction> {
        let (ctx, alpha) = self.context(s, mode, mask)?;
        let set = closed_set.then(AnswerSet::closed_answers);
        let answer = greedy_decode(
            &ctx,
            &s.query,
            &self.decoder,
            Some(&self.lora),
            self.config.decoder.max_answer_len,
            set.as_ref(),
        )?;
        Ok(Prediction { answer, alpha })
    }

    /// Hex SHA-256 over the names and bytes of every tensor in `group`.
    pub fn group_hash(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            if Group::of(&name) == Some(group) {
                h.update(name.as_bytes());
                let mut buf = Vec::new();
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                h.update(&buf);
            }
        });
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::init(self.config.clone(), 0)?;
        let mut src = std::collections::BTreeMap::new();
        self.visit(&mut |n, t| {
            src.insert(n, t.cast::<U>());
        });
        out.visit_mut(&mut |n, t| {
            if let Some(v) = src.remove(&n) {
                *t = v;
            }
        });
        Ok(out)
    }
}

impl<T: Scalar> Params<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.encoders.iter().for_each(|p| p.visit(f));
        self.projections.iter().for_each(|p| p.visit(f));
        self.quart.visit(f);
        self.decoder.visit(f);
        self.lora.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoders.iter_mut().for_each(|p| p.visit_mut(f));
        self.projections.iter_mut().for_each(|p| p.visit_mut(f));
        self.quart.visit_mut(f);
        self.decoder.visit_mut(f);
        self.lora.visit_mut(f);
    }
}
