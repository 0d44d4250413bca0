use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{vocab, Modality, MultimodalSample, RawStream, Scenario};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Frame geometry and signal levels of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Frames per stream, `[video, audio, sensor]`.
    pub frames: [usize; 3],
    /// Native channels per frame.
    pub dims: [usize; 3],
    pub sample_rates: [f64; 3],
    pub noise_std: f64,
    pub signal_amp: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            frames: [16, 48, 32],
            dims: [24, 16, 6],
            sample_rates: [8.0, 24.0, 16.0],
            noise_std: 0.3,
            signal_amp: 1.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let i = m.index();
            if self.frames[i] == 0 {
                return Err(Error::config(format!("streams.{m}_frames"), "must be positive"));
            }
            if self.dims[i] < vocab::NUM_ANSWERS {
                return Err(Error::config(
                    format!("streams.{m}_dim"),
                    format!("needs at least {} channels", vocab::NUM_ANSWERS),
                ));
            }
        }
        if !(self.noise_std >= 0.0 && self.signal_amp > 0.0) {
            return Err(Error::config("streams.noise_std", "noise must be >= 0 and amplitude > 0"));
        }
        Ok(())
    }
}

/// Temporal envelope of the planted signal for one modality.
fn envelope(m: Modality, t: usize, len: usize, phase: f64) -> f64 {
    let x = t as f64 / len as f64;
    match m {
        Modality::Video => 1.0 + 0.3 * (std::f64::consts::TAU * x + phase).sin(),
        Modality::Audio => 1.0 + 0.5 * (std::f64::consts::TAU * 3.0 * x + phase).sin(),
        // periodic bursts
        Modality::Sensor => {
            let offset = (phase * 8.0 / std::f64::consts::TAU) as usize;
            if (t + offset) % 8 < 3 {
                1.6
            } else {
                0.5
            }
        }
    }
}

fn plant(m: Modality, class: usize, cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Result<RawStream> {
    let (len, dim) = (cfg.frames[m.index()], cfg.dims[m.index()]);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut frames = Vec::with_capacity(len * dim);
    for t in 0..len {
        let env = envelope(m, t, len, phase);
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            let signal = if d % vocab::NUM_ANSWERS == class {
                cfg.signal_amp * env
            } else {
                0.0
            };
            frames.push(signal + cfg.noise_std * noise);
        }
    }
    RawStream::new(m, len, dim, frames, cfg.sample_rates[m.index()])
}

/// Deterministically generates one sample from `seed`.
pub fn gen_sample(seed: u64, scenario: Scenario, cfg: &StreamConfig) -> Result<MultimodalSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answer = rng.gen_range(0..vocab::NUM_ANSWERS);
    let phrasing = rng.gen_range(0..vocab::PHRASINGS);
    let filler = rng.gen_range(0..vocab::FILLERS);

    let mut classes = [answer; 3];
    for m in Modality::ALL {
        if !scenario.depends_on(m) {
            let others: Vec<usize> = (0..vocab::NUM_ANSWERS).filter(|&c| c != answer).collect();
            classes[m.index()] = *others.choose(&mut rng).unwrap();
        }
    }
    let video = plant(Modality::Video, classes[0], cfg, &mut rng)?;
    let audio = plant(Modality::Audio, classes[1], cfg, &mut rng)?;
    let sensor = plant(Modality::Sensor, classes[2], cfg, &mut rng)?;

    Ok(MultimodalSample {
        sample_id: 0,
        video,
        audio,
        sensor,
        query_tokens: vec![
            vocab::ASK,
            vocab::topic_token(scenario, phrasing),
            vocab::filler_token(filler),
        ],
        answer_tokens: vec![vocab::answer_token(answer), vocab::EOA],
        relevant_modality: scenario.relevant().to_vec(),
        scenario,
        seed,
        stream_classes: classes,
    })
}

/// `n` samples cycling through `scenarios`, each with a seed derived from
/// `master_seed` and its index.
pub fn generate_dataset(
    master_seed: u64,
    n: usize,
    scenarios: &[Scenario],
    cfg: &StreamConfig,
) -> Result<Vec<MultimodalSample>> {
    if scenarios.is_empty() {
        return Err(Error::config("scenarios", "empty scenario list"));
    }
    (0..n)
        .map(|i| {
            let seed = derive_seed(master_seed, "sample", i as u64);
            let mut s = gen_sample(seed, scenarios[i % scenarios.len()], cfg)?;
            s.sample_id = i as u64;
            Ok(s)
        })
        .collect()
}

/// Hand-written decoder of the planted class: the channel group with the
/// highest mean value.
pub fn stream_class(stream: &RawStream) -> usize {
    let mut sums = [0.0f64; vocab::NUM_ANSWERS];
    for t in 0..stream.len() {
        for (d, v) in stream.frame(t).iter().enumerate() {
            sums[d % vocab::NUM_ANSWERS] += v;
        }
    }
    let counts: Vec<usize> = (0..vocab::NUM_ANSWERS)
        .map(|c| (0..stream.dim()).filter(|d| d % vocab::NUM_ANSWERS == c).count())
        .collect();
    (0..vocab::NUM_ANSWERS)
        .map(|c| sums[c] / counts[c] as f64)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
        .0
}

/// Answer class read from the sample's relevant streams only.
pub fn rule_answer(sample: &MultimodalSample) -> usize {
    stream_class(sample.stream(sample.relevant_modality[0]))
}
