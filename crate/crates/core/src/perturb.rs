//! Cross-modal mismatch generation.
//!
//! For every modality an independent fair coin decides whether to touch the
//! stream; on heads one operation is drawn uniformly from that modality's op
//! set, which itself contains a no-op.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::streams::{Dataset, Modality, MultimodalSample, RawStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbOp {
    AddNoise,
    Reverse,
    ReplaceWithIrrelevant,
    AddJitter,
    NoPerturbation,
    /// Zeroes a random quarter of the frames. Not in the default sets.
    DropFrames,
}

impl PerturbOp {
    pub fn name(self) -> &'static str {
        match self {
            PerturbOp::AddNoise => "add_noise",
            PerturbOp::Reverse => "reverse",
            PerturbOp::ReplaceWithIrrelevant => "replace",
            PerturbOp::AddJitter => "add_jitter",
            PerturbOp::NoPerturbation => "none",
            PerturbOp::DropFrames => "drop_frames",
        }
    }
}

impl FromStr for PerturbOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PerturbOp::AddNoise,
            PerturbOp::Reverse,
            PerturbOp::ReplaceWithIrrelevant,
            PerturbOp::AddJitter,
            PerturbOp::NoPerturbation,
            PerturbOp::DropFrames,
        ]
        .into_iter()
        .find(|op| op.name() == s)
        .ok_or_else(|| Error::config("perturb.ops", format!("unknown op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Op sets in `Modality::ALL` order.
    pub ops: [Vec<PerturbOp>; 3],
    /// Noise std as a multiple of each channel's empirical std.
    pub sigma_rel: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(seed: u64) -> Self {
        use PerturbOp::*;
        PerturbationSpec {
            ops: [
                vec![AddNoise, Reverse, ReplaceWithIrrelevant, NoPerturbation],
                vec![AddNoise, Reverse, ReplaceWithIrrelevant, NoPerturbation],
                vec![AddJitter, ReplaceWithIrrelevant, NoPerturbation],
            ],
            sigma_rel: 1.0,
            seed,
        }
    }

    pub fn ops_for(&self, m: Modality) -> &[PerturbOp] {
        &self.ops[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_rel > 0.0 && self.sigma_rel.is_finite()) {
            return Err(Error::config("perturb.sigma_rel", "must be positive"));
        }
        for m in Modality::ALL {
            if self.ops_for(m).is_empty() {
                return Err(Error::config(format!("perturb.{m}_ops"), "op set is empty"));
            }
        }
        Ok(())
    }
}

/// What happened to one modality of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecord {
    pub modality: Modality,
    pub coin: bool,
    /// Present only when the coin came up heads.
    pub op: Option<PerturbOp>,
    pub op_seed: u64,
    pub sigma_rel: Option<f64>,
    pub replacement_source: Option<u64>,
}

impl ModalityRecord {
    /// Heads and an op other than the no-op.
    pub fn perturbed(&self) -> bool {
        self.coin && !matches!(self.op, None | Some(PerturbOp::NoPerturbation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub sample_id: u64,
    pub master_seed: u64,
    pub modalities: Vec<ModalityRecord>,
}

impl PerturbationRecord {
    pub fn get(&self, m: Modality) -> &ModalityRecord {
        &self.modalities[m.index()]
    }

    pub fn any_perturbed(&self) -> bool {
        self.modalities.iter().any(ModalityRecord::perturbed)
    }
}

fn channel_std(stream: &RawStream) -> Vec<f64> {
    let (len, dim) = (stream.len(), stream.dim());
    (0..dim)
        .map(|d| {
            let mean = (0..len).map(|t| stream.frame(t)[d]).sum::<f64>() / len as f64;
            let var = (0..len).map(|t| (stream.frame(t)[d] - mean).powi(2)).sum::<f64>() / len as f64;
            var.sqrt()
        })
        .collect()
}

/// Adds `N(0, (sigma_rel * std_c)^2)` to every value of channel `c`.
pub fn add_noise(stream: &RawStream, sigma_rel: f64, seed: u64) -> Result<RawStream> {
    if !(sigma_rel > 0.0) {
        return Err(Error::config("perturb.sigma_rel", "must be positive"));
    }
    let std = channel_std(stream);
    let mut rng = rng_for(seed, "noise", 0);
    let mut frames = stream.frames().to_vec();
    for row in frames.chunks_mut(stream.dim()) {
        for (v, s) in row.iter_mut().zip(&std) {
            let n: f64 = rng.sample(StandardNormal);
            if *s > 0.0 {
                *v += sigma_rel * s * n;
            }
        }
    }
    stream.with_frames(frames)
}

/// `add_noise` restricted to sensor streams.
pub fn add_jitter(stream: &RawStream, sigma_rel: f64, seed: u64) -> Result<RawStream> {
    if stream.modality() != Modality::Sensor {
        return Err(Error::Input(format!("jitter applies to sensor streams, got {}", stream.modality())));
    }
    add_noise(stream, sigma_rel, seed)
}

pub fn reverse(stream: &RawStream) -> RawStream {
    let frames: Vec<f64> = (0..stream.len()).rev().flat_map(|t| stream.frame(t).to_vec()).collect();
    stream.with_frames(frames).expect("same geometry")
}

pub fn drop_frames(stream: &RawStream, seed: u64) -> RawStream {
    let mut rng = rng_for(seed, "drop", 0);
    let mut frames = stream.frames().to_vec();
    for row in frames.chunks_mut(stream.dim()) {
        if rng.gen_bool(0.25) {
            row.fill(0.0);
        }
    }
    stream.with_frames(frames).expect("same geometry")
}

/// Picks a pool index uniformly among entries whose id differs from `self_id`.
pub fn pick_replacement(pool: &[MultimodalSample], self_id: u64, seed: u64) -> Result<usize> {
    let others: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].sample_id != self_id).collect();
    if others.is_empty() {
        return Err(Error::Input("replacement needs at least one other sample".into()));
    }
    let mut rng = rng_for(seed, "replace", 0);
    Ok(others[rng.gen_range(0..others.len())])
}

/// The same-modality stream of another pool sample.
pub fn replace_with_irrelevant(
    sample: &MultimodalSample,
    m: Modality,
    pool: &[MultimodalSample],
    seed: u64,
) -> Result<(RawStream, u64)> {
    let idx = pick_replacement(pool, sample.sample_id, seed)?;
    let src = pool[idx].stream(m);
    let own = sample.stream(m);
    if (src.len(), src.dim()) != (own.len(), own.dim()) {
        return Err(Error::Input(format!(
            "{m} replacement from sample {} has shape {}x{}, expected {}x{}",
            pool[idx].sample_id,
            src.len(),
            src.dim(),
            own.len(),
            own.dim()
        )));
    }
    Ok((src.clone(), pool[idx].sample_id))
}

fn apply(
    sample: &MultimodalSample,
    m: Modality,
    op: PerturbOp,
    pool: &[MultimodalSample],
    sigma_rel: f64,
    op_seed: u64,
) -> Result<(RawStream, Option<u64>)> {
    let s = sample.stream(m);
    Ok(match op {
        PerturbOp::AddNoise => (add_noise(s, sigma_rel, op_seed)?, None),
        PerturbOp::AddJitter => (add_jitter(s, sigma_rel, op_seed)?, None),
        PerturbOp::Reverse => (reverse(s), None),
        PerturbOp::DropFrames => (drop_frames(s, op_seed), None),
        PerturbOp::NoPerturbation => (s.clone(), None),
        PerturbOp::ReplaceWithIrrelevant => {
            let (r, src) = replace_with_irrelevant(sample, m, pool, op_seed)?;
            (r, Some(src))
        }
    })
}

/// Applies the coin-then-op procedure to every modality of `sample`.
/// `pool` supplies replacement streams.
pub fn generate_mismatch(
    sample: &MultimodalSample,
    pool: &[MultimodalSample],
    spec: &PerturbationSpec,
) -> Result<(MultimodalSample, PerturbationRecord)> {
    spec.validate()?;
    let sample_seed = derive_seed(spec.seed, "perturb.sample", sample.sample_id);
    let mut out = sample.clone();
    let mut modalities = Vec::with_capacity(3);
    for m in Modality::ALL {
        let coin_seed = derive_seed(sample_seed, "coin", m.index() as u64);
        let op_seed = derive_seed(coin_seed, "op", 0);
        let mut rng = rng_for(coin_seed, "draw", 0);
        let coin = rng.gen_bool(0.5);
        let mut rec = ModalityRecord {
            modality: m,
            coin,
            op: None,
            op_seed,
            sigma_rel: None,
            replacement_source: None,
        };
        if coin {
            let ops = spec.ops_for(m);
            let op = ops[rng.gen_range(0..ops.len())];
            let (stream, src) = apply(sample, m, op, pool, spec.sigma_rel, op_seed)?;
            *out.stream_mut(m) = stream;
            rec.op = Some(op);
            rec.replacement_source = src;
            if matches!(op, PerturbOp::AddNoise | PerturbOp::AddJitter) {
                rec.sigma_rel = Some(spec.sigma_rel);
            }
        }
        modalities.push(rec);
    }
    Ok((
        out,
        PerturbationRecord {
            sample_id: sample.sample_id,
            master_seed: spec.seed,
            modalities,
        },
    ))
}

/// Rebuilds a perturbed sample from its record and the clean pool.
pub fn replay(sample: &MultimodalSample, pool: &[MultimodalSample], record: &PerturbationRecord) -> Result<MultimodalSample> {
    let mut out = sample.clone();
    for rec in &record.modalities {
        let m = rec.modality;
        match rec.op {
            None => {}
            Some(PerturbOp::ReplaceWithIrrelevant) => {
                let src = rec
                    .replacement_source
                    .ok_or_else(|| Error::Integrity(format!("{m} replacement lacks a source id")))?;
                let donor = pool
                    .iter()
                    .find(|s| s.sample_id == src)
                    .ok_or_else(|| Error::Integrity(format!("replacement source {src} not in pool")))?;
                *out.stream_mut(m) = donor.stream(m).clone();
            }
            Some(op) => {
                let sigma = rec.sigma_rel.unwrap_or(1.0);
                *out.stream_mut(m) = apply(sample, m, op, pool, sigma, rec.op_seed)?.0;
            }
        }
    }
    Ok(out)
}

/// Perturbs every sample, drawing replacements from the clean dataset.
pub fn perturb_dataset(ds: &Dataset, spec: &PerturbationSpec) -> Result<(Dataset, Vec<PerturbationRecord>)> {
    let mut samples = Vec::with_capacity(ds.len());
    let mut records = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let (p, r) = generate_mismatch(s, &ds.samples, spec)?;
        samples.push(p);
        records.push(r);
    }
    let mut meta = ds.meta.clone();
    meta.perturbed = true;
    Ok((Dataset { meta, samples }, records))
}

pub fn write_records(path: &Path, records: &[PerturbationRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PerturbationRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
