//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::Instant;

use quart_core::decoder::{decode_logits, RegSign};
use quart_core::evalkit::{evaluate, modality_contribution, standard_subsets, uniform_hit_rate, EvalReport, ModelPredictor};
use quart_core::perturb::{generate_mismatch, PerturbationSpec};
use quart_core::pipeline::{
    checkpoint_load, checkpoint_save, objective_grad_check, run_stage, Checkpoint, Group, Model, ModelConfig, Stage,
    StageConfig, Start,
};
use quart_core::quart::{forward, ContextMode, Pooling, QuartConfig, QuartParams};
use quart_core::seed::rng_for;
use quart_core::streams::{
    assemble, generate_dataset, save_dataset, BlockLayout, Dataset, Modality, Scenario, StreamConfig, TokenSequence,
};
use quart_core::{Params, Scalar, Tensor};
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn data(seed: u64, n: usize) -> Dataset {
    let cfg = StreamConfig::default();
    Dataset::new(seed, cfg.clone(), generate_dataset(seed, n, &Scenario::ALL, &cfg).unwrap())
}

// ---- criterion 1

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let samples = data(7, 2).samples;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for sign in [RegSign::AsWritten, RegSign::Sparsity] {
        let r = objective_grad_check(&ModelConfig::default(), 7, &samples, 0.1, sign, 1e-5).unwrap();
        worst = worst.max(r.max_rel_err);
        coords = r.coords;
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 300.0,
        format!("max rel err {worst:.2e} over {coords} coordinates, both signs, {secs:.1}s"),
    )
}

// ---- criteria 2 and 3

fn to_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = t.cast::<f64>();
    (0..c.shape()[0]).map(|i| c.row(i).to_vec()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Relevance weights and fused context written out as plain loops.
fn direct<T: Scalar>(zq: &Tensor<T>, z: &Tensor<T>, p: &QuartParams<T>) -> (Vec<f64>, Vec<f64>) {
    let (q, zr) = (to_rows(zq), to_rows(z));
    let scale = (p.config.head_dim as f64).sqrt();
    let mut heads_out = vec![Vec::new(); q.len()];
    for h in &p.heads {
        let (qh, kh, vh) = (mm(&q, &to_rows(&h.w_q)), mm(&zr, &to_rows(&h.w_k)), mm(&zr, &to_rows(&h.w_v)));
        for (i, qi) in qh.iter().enumerate() {
            let s: Vec<f64> = kh.iter().map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
            let w = softmax(&s);
            for c in 0..vh[0].len() {
                heads_out[i].push(w.iter().zip(&vh).map(|(a, v)| a * v[c]).sum());
            }
        }
    }
    let scores = mm(&mm(&heads_out, &to_rows(&p.w_o)), &to_rows(&p.w_r));
    let l = scores[0].len();
    let pooled: Vec<f64> = (0..l).map(|j| scores.iter().map(|r| r[j]).sum::<f64>() / scores.len() as f64).collect();
    let alpha = softmax(&pooled);
    let ctx = (0..zr[0].len())
        .map(|c| alpha.iter().zip(&zr).map(|(a, r)| a * r[c]).sum())
        .collect();
    (alpha, ctx)
}

struct Toy<T> {
    params: QuartParams<T>,
    query: Tensor<T>,
    blocks: [TokenSequence<T>; 3],
}

fn toy<T: Scalar>(seed: u64, w_r_std: f64) -> Toy<T> {
    let layout = BlockLayout::new(4, 3, 2);
    let cfg = QuartConfig {
        embed_dim: 8,
        heads: 2,
        head_dim: 4,
        layout,
        pooling: Pooling::Mean,
    };
    let mut params = QuartParams::<T>::init(cfg, &mut rng_for(seed, "acc.quart", 0)).unwrap();
    let mut r = rng_for(seed, "acc.tokens", 0);
    params.w_r = Tensor::randn(&[8, layout.total()], w_r_std, &mut r);
    let query = Tensor::randn(&[3, 8], 1.0, &mut r);
    let blocks = Modality::ALL.map(|m| TokenSequence {
        modality: m,
        tokens: Tensor::randn(&[layout.len(m), 8], 1.0, &mut r),
        global_positions: layout.block(m).collect(),
    });
    Toy { params, query, blocks }
}

fn oracle_gap<T: Scalar>(seed: u64) -> f64 {
    let t = toy::<T>(seed, 1.0);
    let [zv, za, zs] = &t.blocks;
    let out = forward(&t.query, zv, za, zs, &t.params, ContextMode::Gated).unwrap();
    let (z, _) = assemble(zv, za, zs, &t.params.config.layout).unwrap();
    let (alpha, ctx) = direct(&t.query, &z, &t.params);
    let got_a = out.alpha.unwrap().alpha;
    let a = got_a.iter().zip(&alpha).map(|(x, y)| (x.as_f64() - y).abs());
    let c = out.context.data().iter().zip(&ctx).map(|(x, y)| (x.as_f64() - y).abs());
    a.chain(c).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let g32 = (0..10).map(oracle_gap::<f32>).fold(0.0, f64::max);
    let g64 = (0..10).map(oracle_gap::<f64>).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        g32 < 1e-6 && g64 < 1e-9,
        format!("10 instances, max |diff| f32 {g32:.2e}, f64 {g64:.2e}, {secs:.2}s"),
    )
}

fn simplex_and_convexity() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut min_alpha = f64::INFINITY;
    let mut hull_violations = 0;
    for seed in 0..1000 {
        let t = toy::<f64>(10_000 + seed, 3.0);
        let [zv, za, zs] = &t.blocks;
        let out = forward(&t.query, zv, za, zs, &t.params, ContextMode::Gated).unwrap();
        let alpha = out.alpha.unwrap().alpha;
        worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
        min_alpha = alpha.iter().cloned().fold(min_alpha, f64::min);
        let (z, _) = assemble(zv, za, zs, &t.params.config.layout).unwrap();
        let rows = to_rows(&z);
        for (col, &c) in out.context.data().iter().enumerate() {
            let lo = rows.iter().map(|r| r[col]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[col]).fold(f64::NEG_INFINITY, f64::max);
            if c < lo - 1e-12 || c > hi + 1e-12 {
                hull_violations += 1;
            }
        }
    }
    outcome(
        worst_sum <= 1e-6 && min_alpha >= 0.0 && hull_violations == 0,
        format!("1000 forwards, max |sum-1| {worst_sum:.1e}, min alpha {min_alpha:.2e}, {hull_violations} hull violations"),
    )
}

// ---- criterion 4

fn mismatch_rates() -> Outcome {
    let pool = data(5, 16).samples;
    let n = 100_000u64;
    let mut hits = [0u64; 3];
    let mut identity_ok = true;
    let mut all_false = 0;
    for seed in 0..n {
        let s = &pool[(seed % 16) as usize];
        let (out, rec) = generate_mismatch(s, &pool, &PerturbationSpec::new(seed)).unwrap();
        for m in Modality::ALL {
            hits[m.index()] += rec.get(m).perturbed() as u64;
        }
        if rec.modalities.iter().all(|r| !r.coin) {
            all_false += 1;
            identity_ok &= out.bit_eq(s);
        }
    }
    let rate = hits.map(|h| h as f64 / n as f64);
    let want = [3.0 / 8.0, 3.0 / 8.0, 1.0 / 3.0];
    let ok = rate.iter().zip(want).all(|(r, w)| (r - w).abs() <= 0.01);
    outcome(
        ok && identity_ok && all_false > 0,
        format!(
            "rates video {:.4} audio {:.4} sensor {:.4}; identity on {all_false} all-false draws: {identity_ok}",
            rate[0], rate[1], rate[2]
        ),
    )
}

// ---- criteria 5 to 9

struct SeedRun {
    gated: EvalReport,
    raw: EvalReport,
    uniform_hit: f64,
    stage3: EvalReport,
    stage2_entropy: f64,
    sweep: Vec<(f64, EvalReport)>,
    subsets: Vec<EvalReport>,
}

fn run_seed(seed: u64) -> SeedRun {
    let train = data(100 + seed, 1000);
    let test = data(200 + seed, 1000);
    let pspec = PerturbationSpec::new(300 + seed);
    let ck1: Checkpoint<f32> = run_stage(
        &StageConfig::for_stage(Stage::I, seed),
        &train,
        Start::Fresh {
            config: ModelConfig::default(),
            seed,
        },
        &mut (),
    )
    .unwrap();
    let s2 = StageConfig::for_stage(Stage::II, seed);
    let ck2 = run_stage(&s2, &train, Start::From(ck1.clone()), &mut ()).unwrap();
    let ck2_raw = run_stage(&s2.clone().with_mode(ContextMode::Raw), &train, Start::From(ck1), &mut ()).unwrap();
    let gated = evaluate(&ModelPredictor::new(&ck2.model, ContextMode::Gated), &test, Some(&pspec)).unwrap();
    let raw = evaluate(&ModelPredictor::new(&ck2_raw.model, ContextMode::Raw), &test, None).unwrap();
    let uniform_hit = uniform_hit_rate(&test, &ck2.model.config.tokens);

    let ck3 = run_stage(&StageConfig::for_stage(Stage::III, seed), &train, Start::From(ck2.clone()), &mut ()).unwrap();
    let p3 = ModelPredictor::new(&ck3.model, ContextMode::Gated);
    let stage3 = evaluate(&p3, &test, Some(&pspec)).unwrap();

    let mut sensor = test.clone();
    sensor.samples.retain(|s| s.scenario.depends_on(Modality::Sensor));
    sensor.meta.count = sensor.samples.len();
    let subsets = modality_contribution(&p3, &sensor, &standard_subsets()).unwrap();

    let mut sweep = Vec::new();
    for lambda in [1.0, 0.1, 0.01, 0.001] {
        let mut c = StageConfig::for_stage(Stage::III, seed);
        c.lambda = lambda;
        c.reg_sign = RegSign::Sparsity;
        let ck = run_stage(&c, &train, Start::From(ck2.clone()), &mut ()).unwrap();
        sweep.push((lambda, evaluate(&ModelPredictor::new(&ck.model, ContextMode::Gated), &test, None).unwrap()));
    }
    SeedRun {
        stage2_entropy: gated.alpha_entropy.unwrap(),
        gated,
        raw,
        uniform_hit,
        stage3,
        sweep,
        subsets,
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn gated_beats_raw(runs: &[SeedRun], secs: f64) -> Outcome {
    let g = mean(runs.iter().map(|r| r.gated.accuracy));
    let r = mean(runs.iter().map(|r| r.raw.accuracy));
    let hit = mean(runs.iter().map(|r| r.gated.relevance_hit_rate.unwrap()));
    let base = mean(runs.iter().map(|r| r.uniform_hit));
    outcome(
        g > r && hit >= base + 0.15 && secs < 1800.0,
        format!(
            "accuracy gated {g:.3} vs raw {r:.3}; hit rate {hit:.3} vs uniform {base:.3}; experiments {secs:.0}s"
        ),
    )
}

fn stage3_robustness(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (s, r) in SEEDS.iter().zip(runs) {
        let p2 = r.gated.robustness.as_ref().unwrap().accuracy;
        let p3 = r.stage3.robustness.as_ref().unwrap().accuracy;
        let drop = r.gated.accuracy - r.stage3.accuracy;
        ok &= p3 >= p2 && drop < 0.05;
        parts.push(format!("seed {s}: perturbed {p2:.3}->{p3:.3}, clean drop {drop:+.3}"));
    }
    outcome(ok, parts.join("; "))
}

fn lambda_sweep(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (s, r) in SEEDS.iter().zip(runs) {
        let acc: Vec<f64> = r.sweep.iter().map(|(_, e)| e.accuracy).collect();
        let best_other = acc[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lambda1_not_best = acc[0] < best_other;
        let above_small = acc.iter().filter(|&&a| a > acc[3]).count();
        ok &= lambda1_not_best && above_small <= 1;
        let list: Vec<String> = r.sweep.iter().map(|(l, e)| format!("{l}:{:.3}", e.accuracy)).collect();
        parts.push(format!("seed {s}: {}", list.join(" ")));
    }
    outcome(ok, parts.join("; "))
}

fn entropy_direction(runs: &[SeedRun]) -> Outcome {
    let before = mean(runs.iter().map(|r| r.stage2_entropy));
    let as_written = mean(runs.iter().map(|r| r.stage3.alpha_entropy.unwrap()));
    let sparsity = mean(runs.iter().map(|r| r.sweep[3].1.alpha_entropy.unwrap()));
    // reported only; the check uses the default stage III weight
    let strong = mean(runs.iter().map(|r| r.sweep[0].1.alpha_entropy.unwrap()));
    outcome(
        as_written >= before && sparsity < before,
        format!(
            "mean entropy stage II {before:.4}; stage III lambda 0.001 as_written {as_written:.4}, sparsity {sparsity:.4}; sparsity at lambda 1: {strong:.4}"
        ),
    )
}

fn modality_ordering(runs: &[SeedRun]) -> Outcome {
    let acc = |i: usize| mean(runs.iter().map(|r| r.subsets[i].accuracy));
    let (v, va, vas) = (acc(0), acc(1), acc(2));
    outcome(vas > va && va > v, format!("sensor-dependent accuracy V {v:.3}, VA {va:.3}, VAS {vas:.3}"))
}

// ---- criterion 10

fn dir_hash(dir: &std::path::Path) -> String {
    let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update(std::fs::read(dir.join(&n)).unwrap());
    }
    hex::encode(h.finalize())
}

fn params_bit_eq<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
    let mut x = Vec::new();
    a.visit(&mut |n, t| x.push((n, t.clone())));
    let mut same = true;
    let mut i = 0;
    b.visit(&mut |n, t| {
        same &= x.get(i).is_some_and(|(m, u)| *m == n && u.bit_eq(t));
        i += 1;
    });
    same && i == x.len()
}

fn engineering() -> Outcome {
    let ds = data(9, 24);
    let short = |stage, steps| {
        let mut c = StageConfig::for_stage(stage, 9);
        c.steps = steps;
        c.batch_size = 4;
        c
    };
    let ck1: Checkpoint<f64> = run_stage(
        &short(Stage::I, 3),
        &ds,
        Start::Fresh {
            config: ModelConfig::default(),
            seed: 9,
        },
        &mut (),
    )
    .unwrap();
    let ck2 = run_stage(&short(Stage::II, 3), &ds, Start::From(ck1.clone()), &mut ()).unwrap();

    let bytes = checkpoint_save(&ck2).unwrap();
    let back: Checkpoint<f64> = checkpoint_load(&bytes).unwrap();
    let roundtrip = back.optim == ck2.optim && params_bit_eq(&back.model, &ck2.model) && checkpoint_save(&back).unwrap() == bytes;

    let full = run_stage(&short(Stage::III, 6), &ds, Start::From(ck2.clone()), &mut ()).unwrap();
    let half = run_stage(&short(Stage::III, 3), &ds, Start::From(ck2.clone()), &mut ()).unwrap();
    let half = checkpoint_load::<f64>(&checkpoint_save(&half).unwrap()).unwrap();
    let resumed = run_stage(&short(Stage::III, 6), &ds, Start::From(half), &mut ()).unwrap();
    let resume = checkpoint_save(&full).unwrap() == checkpoint_save(&resumed).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_dataset(&a, &data(42, 30)).unwrap();
    save_dataset(&b, &data(42, 30)).unwrap();
    let gen = dir_hash(&a) == dir_hash(&b);

    let model = Model::<f64>::init(ModelConfig::default(), 3).unwrap();
    let ctx = Tensor::randn(&[1, 32], 1.0, &mut rng_for(3, "acc.ctx", 0));
    let q = &ds.samples[0].query_tokens;
    let ans = &ds.samples[0].answer_tokens;
    let plain = decode_logits(&ctx, q, ans, &model.decoder, None).unwrap();
    let adapted = decode_logits(&ctx, q, ans, &model.decoder, Some(&model.lora)).unwrap();
    let neutral = plain.bit_eq(&adapted);

    let mut frozen_ok = true;
    for (before, after) in [(&ck1, &ck2), (&ck2, &full)] {
        for g in &after.header.stage_config.frozen {
            frozen_ok &= before.model.group_hash(*g) == after.model.group_hash(*g);
            frozen_ok &= after.header.group_hashes.get(g) == Some(&after.model.group_hash(*g));
        }
    }
    let stage1_frozen = [Group::Encoder, Group::Quart, Group::Decoder, Group::Lora];
    let fresh = Model::<f64>::init(ModelConfig::default(), 9).unwrap();
    for g in stage1_frozen {
        frozen_ok &= fresh.group_hash(g) == ck1.model.group_hash(g);
    }

    outcome(
        roundtrip && resume && gen && neutral && frozen_ok,
        format!(
            "checkpoint round-trip {roundtrip}, resume bit-identical {resume}, dataset hash stable {gen}, zero-init adapters neutral {neutral}, frozen hashes unchanged {frozen_ok}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", gradient_correctness()));
    results.push((2, "gating oracle equivalence", oracle_equivalence()));
    results.push((3, "simplex and convexity", simplex_and_convexity()));
    results.push((4, "perturbation rates", mismatch_rates()));

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let secs = t.elapsed().as_secs_f64();
    results.push((5, "gated beats raw", gated_beats_raw(&runs, secs)));
    results.push((6, "stage III robustness", stage3_robustness(&runs)));
    results.push((7, "lambda sweep ordering", lambda_sweep(&runs)));
    results.push((8, "entropy direction", entropy_direction(&runs)));
    results.push((9, "modality contribution", modality_ordering(&runs)));
    results.push((10, "engineering invariants", engineering()));

    for (id, name, o) in &results {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
