//! Exact-match evaluation, relevance diagnostics, and controlled
//! comparisons between training configurations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Scalar;
use crate::perturb::{perturb_dataset, PerturbationSpec};
use crate::pipeline::{encode_sample, run_stage, Checkpoint, ModalityMask, Model, Prediction, StageConfig, Start};
use crate::quart::{entropy, modality_mass, ContextMode};
use crate::streams::{rule_answer, vocab, BlockLayout, Dataset, Modality, MultimodalSample};

/// Anything that answers a sample's query.
pub trait Predictor {
    fn predict(&self, sample: &MultimodalSample, mask: &ModalityMask) -> Result<Prediction>;

    /// Token layout used to read per-modality relevance mass.
    fn layout(&self) -> Option<BlockLayout> {
        None
    }

    fn id(&self) -> String;

    /// Checked before evaluating; rejects datasets the predictor cannot read.
    fn check(&self, _data: &Dataset) -> Result<()> {
        Ok(())
    }
}

/// A trained model run in one context mode.
pub struct ModelPredictor<'a, T> {
    pub model: &'a Model<T>,
    pub mode: ContextMode,
    pub closed_set: bool,
    pub id: String,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    pub fn new(model: &'a Model<T>, mode: ContextMode) -> Self {
        let id = model_id(model);
        ModelPredictor {
            model,
            mode,
            closed_set: true,
            id,
        }
    }
}

/// Short content hash of every parameter.
pub fn model_id<T: Scalar>(model: &Model<T>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for g in crate::pipeline::Group::ALL {
        h.update(model.group_hash(g).as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&self, sample: &MultimodalSample, mask: &ModalityMask) -> Result<Prediction> {
        let enc = encode_sample(self.model, sample)?;
        self.model.predict(&enc, self.mode, mask, self.closed_set)
    }

    fn layout(&self) -> Option<BlockLayout> {
        Some(self.model.config.tokens)
    }

    fn id(&self) -> String {
        self.id.clone()
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        let (a, b) = (&data.meta.streams, &self.model.config.streams);
        if a.dims != b.dims {
            return Err(Error::config(
                "data",
                format!("stream widths {:?} do not match the model's {:?}", a.dims, b.dims),
            ));
        }
        let t = self.model.config.tokens;
        for m in Modality::ALL {
            if a.frames[m.index()] < t.len(m) {
                return Err(Error::config(
                    "data",
                    format!("{m} streams have {} frames, the model needs {}", a.frames[m.index()], t.len(m)),
                ));
            }
        }
        Ok(())
    }
}

/// Reads the answer straight off the relevant streams.
pub struct RuleOracle;

impl Predictor for RuleOracle {
    fn predict(&self, sample: &MultimodalSample, _mask: &ModalityMask) -> Result<Prediction> {
        Ok(Prediction {
            answer: vec![vocab::answer_token(rule_answer(sample)), vocab::EOA],
            alpha: None,
        })
    }

    fn id(&self) -> String {
        "rule-oracle".into()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub samples: usize,
    pub accuracy: f64,
    pub relevance_hit_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub mask: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Fraction of samples whose heaviest modality block is a relevant one;
    /// absent without relevance weights.
    pub relevance_hit_rate: Option<f64>,
    pub modality_mass: Option<[f64; 3]>,
    pub alpha_entropy: Option<f64>,
    pub per_scenario: BTreeMap<String, ScenarioReport>,
    /// The same metrics on perturbed copies of the data.
    pub robustness: Option<Box<EvalReport>>,
}

pub fn dataset_id(data: &Dataset) -> String {
    format!(
        "seed{}-n{}{}",
        data.meta.master_seed,
        data.meta.count,
        if data.meta.perturbed { "-perturbed" } else { "" }
    )
}

/// Modality with the largest mass; ties go to the earlier block.
fn heaviest(mass: &[f64; 3]) -> Modality {
    let mut best = 0;
    for i in 1..3 {
        if mass[i] > mass[best] {
            best = i;
        }
    }
    Modality::ALL[best]
}

fn score(pred: &dyn Predictor, data: &Dataset, mask: &ModalityMask) -> Result<EvalReport> {
    let layout = pred.layout();
    let mut correct = 0usize;
    let mut hits = 0usize;
    let mut weighted = 0usize;
    let mut mass_sum = [0.0; 3];
    let mut ent_sum = 0.0;
    let mut per: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let full = mask.keep.iter().all(|&k| k) || mask.renormalize;
    for s in &data.samples {
        let p = pred.predict(s, mask)?;
        let ok = p.answer == s.answer_tokens;
        correct += ok as usize;
        let e = per.entry(s.scenario.id().to_string()).or_default();
        e.0 += 1;
        e.1 += ok as usize;
        if let (Some(alpha), Some(layout)) = (&p.alpha, layout) {
            let mass = modality_mass(alpha, &layout);
            let total: f64 = mass.iter().sum();
            if full && (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "relevance masses of sample {} sum to {total}",
                    s.sample_id
                )));
            }
            for i in 0..3 {
                mass_sum[i] += mass[i];
            }
            ent_sum += entropy(alpha);
            weighted += 1;
            if s.relevant_modality.contains(&heaviest(&mass)) {
                hits += 1;
                e.2 += 1;
            }
        }
    }
    let n = data.samples.len();
    if n == 0 {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let gated = weighted == n;
    let per_scenario = per
        .into_iter()
        .map(|(k, (cnt, ok, hit))| {
            (
                k,
                ScenarioReport {
                    samples: cnt,
                    accuracy: ok as f64 / cnt as f64,
                    relevance_hit_rate: gated.then(|| hit as f64 / cnt as f64),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        dataset_id: dataset_id(data),
        checkpoint_id: pred.id(),
        mask: mask.label(),
        samples: n,
        accuracy: correct as f64 / n as f64,
        relevance_hit_rate: gated.then(|| hits as f64 / n as f64),
        modality_mass: gated.then(|| mass_sum.map(|v| v / n as f64)),
        alpha_entropy: gated.then(|| ent_sum / n as f64),
        per_scenario,
        robustness: None,
    })
}

/// Scores `pred` on `data`, and on perturbed copies when `perturb` is given.
pub fn evaluate(pred: &dyn Predictor, data: &Dataset, perturb: Option<&PerturbationSpec>) -> Result<EvalReport> {
    evaluate_masked(pred, data, perturb, &ModalityMask::default())
}

pub fn evaluate_masked(
    pred: &dyn Predictor,
    data: &Dataset,
    perturb: Option<&PerturbationSpec>,
    mask: &ModalityMask,
) -> Result<EvalReport> {
    pred.check(data)?;
    let mut report = score(pred, data, mask)?;
    if let Some(spec) = perturb {
        let (pd, _) = perturb_dataset(data, spec)?;
        report.robustness = Some(Box::new(score(pred, &pd, mask)?));
    }
    Ok(report)
}

/// One report per modality subset; hidden blocks become zero tokens.
pub fn modality_contribution(
    pred: &dyn Predictor,
    data: &Dataset,
    masks: &[ModalityMask],
) -> Result<Vec<EvalReport>> {
    pred.check(data)?;
    masks.iter().map(|m| score(pred, data, m)).collect()
}

/// The subsets V, A+V and A+V+S.
pub fn standard_subsets() -> Vec<ModalityMask> {
    use Modality::*;
    vec![
        ModalityMask::only(&[Video]),
        ModalityMask::only(&[Video, Audio]),
        ModalityMask::only(&[Video, Audio, Sensor]),
    ]
}

/// Hit rate of uniform relevance: the largest block always carries the
/// most mass, so a sample is a hit iff that block is relevant.
pub fn uniform_hit_rate(data: &Dataset, layout: &BlockLayout) -> f64 {
    let uniform = vec![1.0 / layout.total() as f64; layout.total()];
    let top = heaviest(&modality_mass(&uniform, layout));
    let hits = data.samples.iter().filter(|s| s.relevant_modality.contains(&top)).count();
    hits as f64 / data.samples.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: StageConfig,
    pub report: EvalReport,
}

/// Trains every config from the shared checkpoint and evaluates each result.
pub fn ablation_matrix<T: Scalar>(
    base: &Checkpoint<T>,
    configs: &[(String, StageConfig)],
    train: &Dataset,
    eval: &Dataset,
    perturb: Option<&PerturbationSpec>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let ck = run_stage(cfg, train, Start::From(base.clone()), &mut ())?;
        let pred = ModelPredictor::new(&ck.model, cfg.context_mode);
        let report = evaluate(&pred, eval, perturb)?;
        rows.push(AblationRow {
            label: label.clone(),
            config: cfg.clone(),
            report,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    stage: String,
    lambda: f64,
    reg_sign: &'a str,
    context_mode: String,
    loss_conditioning: &'a str,
    steps: usize,
    seed: u64,
    accuracy: f64,
    relevance_hit_rate: Option<f64>,
    alpha_entropy: Option<f64>,
    mass_video: Option<f64>,
    mass_audio: Option<f64>,
    mass_sensor: Option<f64>,
    perturbed_accuracy: Option<f64>,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        let mass = r.report.modality_mass;
        w.serialize(CsvRow {
            label: &r.label,
            stage: r.config.stage.to_string(),
            lambda: r.config.lambda,
            reg_sign: r.config.reg_sign.name(),
            context_mode: format!("{:?}", r.config.context_mode).to_lowercase(),
            loss_conditioning: r.config.loss_conditioning.name(),
            steps: r.config.steps,
            seed: r.config.seed,
            accuracy: r.report.accuracy,
            relevance_hit_rate: r.report.relevance_hit_rate,
            alpha_entropy: r.report.alpha_entropy,
            mass_video: mass.map(|m| m[0]),
            mass_audio: mass.map(|m| m[1]),
            mass_sensor: mass.map(|m| m[2]),
            perturbed_accuracy: r.report.robustness.as_ref().map(|p| p.accuracy),
        })?;
    }
    w.flush()?;
    Ok(())
}
