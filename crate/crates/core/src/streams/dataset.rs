//! Dataset directories: `dataset.json`, `manifest.jsonl`, and one `QTNS`
//! blob file per modality. Blobs are a cache; every clean sample can be
//! regenerated bit-identically from its manifest seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Modality, MultimodalSample, RawStream, Scenario, StreamConfig};
use crate::error::{Error, Result};
use crate::numcore::{decode_tensor, encode_tensor, Tensor};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub master_seed: u64,
    pub count: usize,
    pub streams: StreamConfig,
    /// `true` when streams were altered after generation.
    pub perturbed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub seed: u64,
    pub scenario_id: Scenario,
    pub relevant_modality: Vec<Modality>,
    pub query_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub stream_classes: [usize; 3],
    pub blobs: BTreeMap<Modality, BlobRef>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn new(master_seed: u64, streams: StreamConfig, samples: Vec<MultimodalSample>) -> Self {
        Dataset {
            meta: DatasetMeta {
                format_version: DATASET_VERSION,
                master_seed,
                count: samples.len(),
                streams,
                perturbed: false,
            },
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn blob_name(m: Modality) -> String {
    format!("{m}.qtns")
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blobs: BTreeMap<Modality, Vec<u8>> = Modality::ALL.iter().map(|&m| (m, Vec::new())).collect();
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for s in &ds.samples {
        let mut refs = BTreeMap::new();
        for m in Modality::ALL {
            let buf = blobs.get_mut(&m).unwrap();
            let st = s.stream(m);
            let t = Tensor::new(vec![st.len(), st.dim()], st.frames().to_vec())?;
            let offset = buf.len() as u64;
            encode_tensor(&t, buf);
            refs.insert(
                m,
                BlobRef {
                    offset,
                    length: buf.len() as u64 - offset,
                },
            );
        }
        let rec = ManifestRecord {
            sample_id: s.sample_id,
            seed: s.seed,
            scenario_id: s.scenario,
            relevant_modality: s.relevant_modality.clone(),
            query_tokens: s.query_tokens.clone(),
            answer_tokens: s.answer_tokens.clone(),
            stream_classes: s.stream_classes,
            blobs: refs,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    for (m, buf) in blobs {
        fs::write(dir.join(blob_name(m)), buf)?;
    }
    let mut meta = ds.meta.clone();
    meta.count = ds.samples.len();
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    if meta.format_version != DATASET_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: DATASET_VERSION,
        });
    }
    let blobs: BTreeMap<Modality, Vec<u8>> = Modality::ALL
        .iter()
        .map(|&m| Ok((m, fs::read(dir.join(blob_name(m)))?)))
        .collect::<Result<_>>()?;
    let records = read_manifest(dir)?;
    if records.len() != meta.count {
        return Err(Error::Integrity(format!(
            "manifest has {} records, dataset.json says {}",
            records.len(),
            meta.count
        )));
    }
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let mut streams = Vec::with_capacity(3);
        for m in Modality::ALL {
            let r = rec
                .blobs
                .get(&m)
                .ok_or_else(|| Error::Integrity(format!("sample {} lacks a {m} blob", rec.sample_id)))?;
            let buf = &blobs[&m];
            let (lo, hi) = (r.offset as usize, (r.offset + r.length) as usize);
            if hi > buf.len() {
                return Err(Error::Integrity(format!("{m} blob truncated")));
            }
            let (t, _) = decode_tensor::<f64>(&buf[lo..hi])?;
            let (len, dim) = t.dims2()?;
            let rate = meta.streams.sample_rates[m.index()];
            streams.push(RawStream::new(m, len, dim, t.into_data(), rate)?);
        }
        let sensor = streams.pop().unwrap();
        let audio = streams.pop().unwrap();
        let video = streams.pop().unwrap();
        samples.push(MultimodalSample {
            sample_id: rec.sample_id,
            video,
            audio,
            sensor,
            query_tokens: rec.query_tokens,
            answer_tokens: rec.answer_tokens,
            relevant_modality: rec.relevant_modality,
            scenario: rec.scenario_id,
            seed: rec.seed,
            stream_classes: rec.stream_classes,
        });
    }
    Ok(Dataset { meta, samples })
}
