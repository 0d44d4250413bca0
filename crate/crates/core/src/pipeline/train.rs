use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{dtype_name, Checkpoint, CheckpointHeader, RngState, StageRecord, CHECKPOINT_VERSION};
use super::model::{encode_sample, EncodedSample, Model, ModelConfig, ModalityMask};
use super::optim::AdamState;
use super::{Group, Stage, StageConfig};
use crate::decoder::{decode_logits_nodes, loss_quart_nodes, loss_reg_nodes, loss_total_nodes};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Scalar};
use crate::params::Params;
use crate::perturb::generate_mismatch;
use crate::quart::{entropy, modality_mass, ContextMode};
use crate::seed::derive_seed;
use crate::streams::{vocab, Dataset, Modality};

/// Batch-averaged losses and relevance statistics for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    pub step: usize,
    pub loss_quart: f64,
    pub loss_reg: Option<f64>,
    pub loss_total: f64,
    pub alpha_entropy: Option<f64>,
    pub modality_mass: Option<[f64; 3]>,
}

pub trait MetricsSink {
    fn record(&mut self, m: &StepMetrics) -> Result<()>;
}

impl MetricsSink for Vec<StepMetrics> {
    fn record(&mut self, m: &StepMetrics) -> Result<()> {
        self.push(m.clone());
        Ok(())
    }
}

impl MetricsSink for () {
    fn record(&mut self, _: &StepMetrics) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per step.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlSink { out: BufWriter::new(f) })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub enum Start<T> {
    Fresh { config: ModelConfig, seed: u64 },
    From(Checkpoint<T>),
}

/// Sample indices of batch `step`; a pure function of its arguments.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| (derive_seed(seed, "batch", (step * batch + b) as u64) % n as u64) as usize)
        .collect()
}

/// Modality captioned at `step` of stage I.
fn caption_modality(step: usize) -> Modality {
    Modality::ALL[step % 3]
}

struct Accum {
    lq: f64,
    lr: f64,
    total: f64,
    ent: f64,
    mass: [f64; 3],
    gated: usize,
}

fn example_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    b: &super::model::Bound,
    cfg: &StageConfig,
    s: &EncodedSample<T>,
    step: usize,
    acc: &mut Accum,
) -> Result<NodeId> {
    let dcfg = &model.config.decoder;
    let (ctx, alpha, query, target) = if cfg.stage == Stage::I {
        let m = caption_modality(step);
        let x = g.constant(s.feats[m.index()].clone());
        let ctx = crate::streams::project_nodes(g, x, &b.proj[m.index()])?;
        let target = vec![vocab::answer_token(s.stream_classes[m.index()]), vocab::EOA];
        (ctx, None, vec![vocab::CAPTION, vocab::modality_token(m)], target)
    } else {
        let (ctx, alpha) = model.context_nodes(g, b, &s.feats, &s.query, cfg.context_mode, &ModalityMask::default())?;
        (ctx, alpha, s.query.clone(), s.answer.clone())
    };
    let logits = decode_logits_nodes(g, ctx, &query, &target, &b.dec, Some(&b.lora), dcfg)?
        .ok_or_else(|| Error::Input(format!("sample {} has an empty answer", s.sample_id)))?;
    let lq = loss_quart_nodes(g, logits, &target)?;
    let lr = match alpha {
        Some(a) if g.value(a).is_finite() => Some(loss_reg_nodes(g, a)?),
        Some(_) => {
            return Err(Error::Evaluation(format!(
                "non-finite relevance weights (group quart) at step {step}"
            )))
        }
        None => None,
    };
    let total = loss_total_nodes(g, lq, lr, cfg.lambda, cfg.reg_sign)?;
    acc.lq += g.value(lq).item().as_f64();
    acc.total += g.value(total).item().as_f64();
    if let (Some(a), Some(r)) = (alpha, lr) {
        let av = g.value(a).data();
        acc.lr += g.value(r).item().as_f64();
        acc.ent += entropy(av);
        let mm = modality_mass(av, &model.config.tokens);
        for i in 0..3 {
            acc.mass[i] += mm[i];
        }
        acc.gated += 1;
    }
    Ok(total)
}

/// Runs one training stage and returns the resulting checkpoint.
///
/// Resuming from a checkpoint of the same stage continues at its step with
/// the optimizer state intact; a checkpoint from an earlier stage starts
/// this stage with fresh optimizer moments.
pub fn run_stage<T: Scalar>(
    cfg: &StageConfig,
    data: &Dataset,
    start: Start<T>,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let (mut model, mut optim, first, mut history) = match start {
        Start::Fresh { config, seed } => {
            if cfg.stage != Stage::I && !cfg.cold_start {
                return Err(Error::config(
                    "train.init",
                    format!("stage {} needs a checkpoint (or cold_start = true)", cfg.stage),
                ));
            }
            (Model::init(config, seed)?, AdamState::default(), 0, Vec::new())
        }
        Start::From(ck) => {
            let h = ck.header;
            if h.stage > cfg.stage {
                return Err(Error::config(
                    "train.init",
                    format!("cannot run stage {} from a stage {} checkpoint", cfg.stage, h.stage),
                ));
            }
            if h.stage == cfg.stage {
                let mut prev = h.stage_config.clone();
                prev.steps = cfg.steps;
                if prev != *cfg {
                    return Err(Error::config(
                        "train.init",
                        "resuming a stage requires the same stage configuration",
                    ));
                }
                let mut hist = h.history;
                if hist.last().map(|r| r.stage) == Some(cfg.stage) {
                    hist.pop();
                }
                (ck.model, ck.optim, h.step.min(cfg.steps), hist)
            } else {
                (ck.model, AdamState::default(), 0, h.history)
            }
        }
    };
    let sc = &data.meta.streams;
    if sc.dims != model.config.streams.dims || sc.frames != model.config.streams.frames {
        return Err(Error::config(
            "data",
            "dataset stream shapes differ from the model's stream configuration",
        ));
    }

    let frozen_before: Vec<(Group, String)> = cfg.frozen.iter().map(|&g| (g, model.group_hash(g))).collect();
    let clean: Vec<EncodedSample<T>> = data
        .samples
        .iter()
        .map(|s| encode_sample(&model, s))
        .collect::<Result<_>>()?;

    let mut last = None;
    for step in first..cfg.steps {
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.len());
        let batch: Vec<EncodedSample<T>> = match &cfg.perturb {
            Some(spec) => {
                let mut spec = spec.clone();
                spec.seed = derive_seed(spec.seed, "stage3.step", step as u64);
                idx.iter()
                    .map(|&i| {
                        let (p, _) = generate_mismatch(&data.samples[i], &data.samples, &spec)?;
                        encode_sample(&model, &p)
                    })
                    .collect::<Result<_>>()?
            }
            None => idx.iter().map(|&i| clean[i].clone()).collect(),
        };

        let mut g = Graph::new();
        let bound = model.bind(&mut g, &cfg.trainable);
        let mut acc = Accum {
            lq: 0.0,
            lr: 0.0,
            total: 0.0,
            ent: 0.0,
            mass: [0.0; 3],
            gated: 0,
        };
        let mut sum = None;
        for s in &batch {
            let t = example_loss(&mut g, &model, &bound, cfg, s, step, &mut acc)?;
            sum = Some(match sum {
                None => t,
                Some(prev) => g.add(prev, t)?,
            });
        }
        let loss = g.scale(sum.unwrap(), T::of(1.0 / batch.len() as f64));
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Evaluation(format!("loss is {lv} at stage {} step {step}", cfg.stage)));
        }
        g.backward(loss)?;

        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (name, gr) in g.named_grads() {
            let group = Group::of(name);
            if !group.is_some_and(|gp| cfg.trainable.contains(&gp)) {
                continue;
            }
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation(format!(
                    "non-finite gradient in group {} (`{name}`) at step {step}",
                    group.unwrap()
                )));
            }
            grads.insert(name.to_string(), gr.to_vec());
        }
        if let Some(clip) = cfg.clip_norm {
            let norm = grads
                .values()
                .flatten()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let f = T::of(clip / norm);
                grads.values_mut().flatten().for_each(|v| *v = *v * f);
            }
        }
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            if let Some(gr) = grads.get(&name) {
                let lr = cfg.lr_for(Group::of(&name).unwrap());
                if let Err(e) = optim.update(&name, t, gr, lr, &cfg.optimizer) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }

        let n = batch.len() as f64;
        let gated = acc.gated as f64;
        let m = StepMetrics {
            stage: cfg.stage,
            step,
            loss_quart: acc.lq / n,
            loss_reg: (acc.gated > 0).then(|| acc.lr / gated),
            loss_total: acc.total / n,
            alpha_entropy: (acc.gated > 0).then(|| acc.ent / gated),
            modality_mass: (acc.gated > 0).then(|| acc.mass.map(|v| v / gated)),
        };
        sink.record(&m)?;
        last = Some(m);
    }

    for (g, before) in frozen_before {
        if model.group_hash(g) != before {
            return Err(Error::Contract(format!("frozen group {g} changed during stage {}", cfg.stage)));
        }
    }
    if cfg.context_mode == ContextMode::Raw && last.as_ref().is_some_and(|m| m.alpha_entropy.is_some()) {
        return Err(Error::Contract("raw context produced relevance weights".into()));
    }

    history.push(StageRecord {
        stage: cfg.stage,
        steps: cfg.steps,
        seed: cfg.seed,
        lambda: cfg.lambda,
        final_loss: last.as_ref().map(|m| m.loss_total),
    });
    let group_hashes = Group::ALL.iter().map(|&g| (g, model.group_hash(g))).collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dtype: dtype_name::<T>(),
        stage: cfg.stage,
        step: cfg.steps,
        stage_config: cfg.clone(),
        model_config: model.config.clone(),
        rng: RngState {
            seed: cfg.seed,
            next_step: cfg.steps,
        },
        history,
        last_metrics: last,
        group_hashes,
        adam_steps: optim.steps.clone(),
        tensors: Vec::new(),
    };
    Ok(Checkpoint { header, model, optim })
}
