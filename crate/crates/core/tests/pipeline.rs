use quart_core::pipeline::{
    adamw_step, batch_indices, checkpoint_load, checkpoint_save, run_stage, AdamState, AdamW, Checkpoint, Group,
    JsonlSink, LossConditioning, ModelConfig, Stage, StageConfig, Start, StepMetrics, CHECKPOINT_VERSION,
};
use quart_core::quart::ContextMode;
use quart_core::streams::{generate_dataset, Dataset, Scenario, StreamConfig};
use quart_core::{Error, Params, Tensor};
use sha2::{Digest, Sha256};

fn data(n: usize) -> Dataset {
    let cfg = StreamConfig::default();
    Dataset::new(11, cfg.clone(), generate_dataset(11, n, &Scenario::ALL, &cfg).unwrap())
}

fn short(stage: Stage, steps: usize) -> StageConfig {
    let mut c = StageConfig::for_stage(stage, 5);
    c.steps = steps;
    c.batch_size = 3;
    c
}

fn stage_one<T: quart_core::Scalar>(ds: &Dataset, steps: usize) -> Checkpoint<T> {
    run_stage(
        &short(Stage::I, steps),
        ds,
        Start::Fresh {
            config: ModelConfig::default(),
            seed: 5,
        },
        &mut (),
    )
    .unwrap()
}

fn params_bit_eq<T: quart_core::Scalar>(a: &Checkpoint<T>, b: &Checkpoint<T>) -> bool {
    let (pa, pb) = (a.model.named(), b.model.named());
    pa.len() == pb.len() && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

#[test]
fn adamw_zero_gradient_is_identity() {
    let hp = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut p = vec![0.3, -1.5, 2.0];
    let orig = p.clone();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for t in 1..=5 {
        adamw_step(&mut p, &[0.0; 3], &mut m, &mut v, t, 1e-2, &hp).unwrap();
    }
    assert_eq!(p, orig);
    assert_eq!(AdamW::default().weight_decay, 0.03);
    assert!(matches!(
        adamw_step(&mut p, &[0.0; 3], &mut m, &mut v, 1, 0.0, &hp),
        Err(Error::Config { .. })
    ));
}

#[test]
fn adamw_scalar_trajectory_matches_oracle() {
    let hp = AdamW::default();
    let grads = [0.5, -1.2, 0.3, 2.0, -0.7, 0.05, 1.1, -0.4];
    let lr = 0.01;
    let (mut p, mut m, mut v) = ([0.8f64], [0.0f64], [0.0f64]);
    let (mut op, mut om, mut ov) = (0.8f64, 0.0f64, 0.0f64);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        adamw_step(&mut p, &[g], &mut m, &mut v, t as u64, lr, &hp).unwrap();
        om = 0.9 * om + 0.1 * g;
        ov = 0.999 * ov + 0.001 * g * g;
        let mh = om / (1.0 - 0.9f64.powi(t));
        let vh = ov / (1.0 - 0.999f64.powi(t));
        op -= lr * 0.03 * op + lr * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - op).abs() < 1e-10, "step {t}: {} vs {op}", p[0]);
    }
}

#[test]
fn adam_state_counts_steps_per_parameter() {
    let mut st = AdamState::<f64>::default();
    let mut a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut b = Tensor::new(vec![1], vec![1.0]).unwrap();
    for _ in 0..3 {
        st.update("a", &mut a, &[0.1, 0.2], 1e-3, &AdamW::default()).unwrap();
    }
    st.update("b", &mut b, &[0.1], 1e-3, &AdamW::default()).unwrap();
    assert_eq!(st.steps["a"], 3);
    assert_eq!(st.steps["b"], 1);
}

#[test]
fn batches_are_stateless_and_in_range() {
    let a = batch_indices(3, 7, 16, 50);
    assert_eq!(a, batch_indices(3, 7, 16, 50));
    assert_ne!(a, batch_indices(3, 8, 16, 50));
    assert!(a.iter().all(|&i| i < 50));
}

#[test]
fn stage_config_invariants() {
    for s in [Stage::I, Stage::II, Stage::III] {
        StageConfig::for_stage(s, 0).validate().unwrap();
    }
    let mut c = StageConfig::for_stage(Stage::II, 0);
    c.lambda = 0.1;
    assert!(matches!(c.validate(), Err(Error::Config { .. })));
    let mut c = StageConfig::for_stage(Stage::I, 0);
    c.frozen.insert(Group::Projection);
    assert!(c.validate().is_err());
    let mut c = StageConfig::for_stage(Stage::II, 0);
    c.trainable.insert(Group::Decoder);
    c.frozen.remove(&Group::Decoder);
    assert!(c.validate().is_err());
    let mut c = StageConfig::for_stage(Stage::II, 0);
    c.loss_conditioning = LossConditioning::OnZ;
    assert!(c.validate().is_err());
    let c = StageConfig::for_stage(Stage::II, 0).with_mode(ContextMode::Raw);
    assert_eq!(c.loss_conditioning, LossConditioning::OnZ);
    c.validate().unwrap();
    let mut c = StageConfig::for_stage(Stage::III, 0);
    c.perturb = None;
    assert!(c.validate().is_err());
    assert_eq!(StageConfig::for_stage(Stage::III, 0).lambda, 0.001);
}

#[test]
fn later_stages_need_a_checkpoint() {
    let ds = data(10);
    let fresh = || Start::<f64>::Fresh {
        config: ModelConfig::default(),
        seed: 1,
    };
    let c = short(Stage::II, 1);
    assert!(matches!(run_stage(&c, &ds, fresh(), &mut ()), Err(Error::Config { .. })));
    let mut c = c;
    c.cold_start = true;
    run_stage(&c, &ds, fresh(), &mut ()).unwrap();
    let ck3 = run_stage(&short(Stage::III, 1), &ds, Start::From(stage_one::<f64>(&ds, 1)), &mut ()).unwrap();
    assert!(run_stage(&short(Stage::I, 1), &ds, Start::From(ck3), &mut ()).is_err());
}

#[test]
fn zero_steps_leave_parameters_bit_equal() {
    let ds = data(12);
    let ck1 = stage_one::<f64>(&ds, 3);
    let ck2 = run_stage(&short(Stage::II, 0), &ds, Start::From(ck1.clone()), &mut ()).unwrap();
    assert!(params_bit_eq(&ck1, &ck2));
}

#[test]
fn stage_one_respects_freeze_contract() {
    let ds = data(12);
    let cfg = ModelConfig::default();
    let init = quart_core::pipeline::Model::<f64>::init(cfg.clone(), 5).unwrap();
    let ck = stage_one::<f64>(&ds, 3);
    for g in [Group::Encoder, Group::Quart, Group::Decoder, Group::Lora] {
        assert_eq!(init.group_hash(g), ck.model.group_hash(g), "{g}");
        assert_eq!(ck.header.group_hashes[&g], init.group_hash(g));
    }
    assert_ne!(init.group_hash(Group::Projection), ck.model.group_hash(Group::Projection));
    // one step per modality: every projection head moved
    for (a, b) in init.projections.iter().zip(&ck.model.projections) {
        assert!(!a.w2.bit_eq(&b.w2), "{}", a.modality);
    }
}

#[test]
fn lambda_schedule_per_stage() {
    let ds = data(12);
    let mut log: Vec<StepMetrics> = Vec::new();
    let ck1 = run_stage(
        &short(Stage::I, 3),
        &ds,
        Start::<f64>::Fresh {
            config: ModelConfig::default(),
            seed: 5,
        },
        &mut log,
    )
    .unwrap();
    let ck2 = run_stage(&short(Stage::II, 3), &ds, Start::From(ck1), &mut log).unwrap();
    assert_eq!(log.len(), 6);
    for m in &log {
        assert_eq!(m.loss_total, m.loss_quart);
    }
    assert!(log[..3].iter().all(|m| m.alpha_entropy.is_none()));
    assert!(log[3..].iter().all(|m| m.alpha_entropy.is_some() && m.loss_reg.is_some()));

    let mut log3 = Vec::new();
    let c3 = short(Stage::III, 3);
    let ck3 = run_stage(&c3, &ds, Start::From(ck2), &mut log3).unwrap();
    assert_eq!(ck3.header.stage_config.lambda, 0.001);
    for m in &log3 {
        let want = m.loss_quart + 0.001 * m.loss_reg.unwrap();
        assert!((m.loss_total - want).abs() < 1e-12);
        assert!(m.loss_total != m.loss_quart);
        let mass = m.modality_mass.unwrap();
        assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(ck3.header.history.len(), 3);
}

#[test]
fn raw_mode_reports_no_relevance() {
    let ds = data(12);
    let c = short(Stage::II, 2).with_mode(ContextMode::Raw);
    let mut log = Vec::new();
    let ck = run_stage(&c, &ds, Start::From(stage_one::<f64>(&ds, 1)), &mut log).unwrap();
    assert!(log.iter().all(|m| m.alpha_entropy.is_none() && m.modality_mass.is_none()));
    // the relevance head never receives a gradient in raw mode
    let base = stage_one::<f64>(&ds, 1);
    assert!(base.model.quart.w_r.bit_eq(&ck.model.quart.w_r));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let ds = data(12);
    let ck1 = stage_one::<f64>(&ds, 2);
    let ck = run_stage(&short(Stage::II, 2), &ds, Start::From(ck1), &mut ()).unwrap();
    let bytes = checkpoint_save(&ck).unwrap();
    let back: Checkpoint<f64> = checkpoint_load(&bytes).unwrap();
    assert!(params_bit_eq(&ck, &back));
    assert_eq!(back.optim, ck.optim);
    assert_eq!(back.header.stage_config, ck.header.stage_config);
    assert_eq!(checkpoint_save(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoints/stageII.ckpt");
    quart_core::pipeline::save_checkpoint_file(&path, &ck).unwrap();
    let from_file: Checkpoint<f64> = quart_core::pipeline::load_checkpoint_file(&path).unwrap();
    assert_eq!(checkpoint_save(&from_file).unwrap(), bytes);
}

fn reseal(bytes: &mut Vec<u8>) {
    let n = bytes.len() - 32;
    let d = Sha256::digest(&bytes[..n]);
    bytes[n..].copy_from_slice(&d);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let ds = data(8);
    let ck = stage_one::<f64>(&ds, 1);
    let bytes = checkpoint_save(&ck).unwrap();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint_load::<f64>(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let k = bytes.len() - 100;
    flipped[k] ^= 1;
    assert!(matches!(checkpoint_load::<f64>(&flipped), Err(Error::Integrity(_))));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    reseal(&mut newer);
    assert!(matches!(
        checkpoint_load::<f64>(&newer),
        Err(Error::Version { found, expected }) if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
    ));
    assert!(matches!(checkpoint_load::<f32>(&bytes), Err(Error::Input(_))));
}

#[test]
fn resumed_training_continues_bit_identically() {
    let ds = data(16);
    let ck1 = stage_one::<f64>(&ds, 2);
    for stage in [Stage::II, Stage::III] {
        let base = if stage == Stage::II {
            ck1.clone()
        } else {
            run_stage(&short(Stage::II, 2), &ds, Start::From(ck1.clone()), &mut ()).unwrap()
        };
        let mut straight = Vec::new();
        let full = run_stage(&short(stage, 6), &ds, Start::From(base.clone()), &mut straight).unwrap();

        let mut split = Vec::new();
        let half = run_stage(&short(stage, 3), &ds, Start::From(base), &mut split).unwrap();
        let reloaded: Checkpoint<f64> = checkpoint_load(&checkpoint_save(&half).unwrap()).unwrap();
        let resumed = run_stage(&short(stage, 6), &ds, Start::From(reloaded), &mut split).unwrap();

        assert_eq!(straight, split, "stage {stage}");
        assert!(params_bit_eq(&full, &resumed));
        assert_eq!(full.optim, resumed.optim);
        assert_eq!(full.header.history, resumed.header.history);
    }
}

#[test]
fn resuming_with_a_different_config_is_rejected() {
    let ds = data(8);
    let ck1 = stage_one::<f64>(&ds, 1);
    let half = run_stage(&short(Stage::II, 1), &ds, Start::From(ck1), &mut ()).unwrap();
    let mut other = short(Stage::II, 4);
    other.seed = 99;
    assert!(matches!(run_stage(&other, &ds, Start::From(half), &mut ()), Err(Error::Config { .. })));
}

#[test]
fn three_stage_runs_are_deterministic() {
    let ds = data(12);
    let run = || {
        let mut log = Vec::new();
        let ck = stage_one::<f64>(&ds, 2);
        let ck = run_stage(&short(Stage::II, 2), &ds, Start::From(ck), &mut log).unwrap();
        let ck = run_stage(&short(Stage::III, 2), &ds, Start::From(ck), &mut log).unwrap();
        (log, checkpoint_save(&ck).unwrap())
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
}

#[test]
fn non_finite_loss_aborts() {
    let ds = data(8);
    let mut ck = stage_one::<f64>(&ds, 1);
    ck.model.quart.w_r.data_mut()[0] = f64::NAN;
    let err = run_stage(&short(Stage::II, 1), &ds, Start::From(ck), &mut ()).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)), "{err}");
}

#[test]
fn jsonl_sink_writes_one_record_per_step() {
    let ds = data(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut sink = JsonlSink::append(&path).unwrap();
    let ck1 = stage_one::<f64>(&ds, 1);
    run_stage(&short(Stage::II, 2), &ds, Start::From(ck1), &mut sink).unwrap();
    drop(sink);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["step", "loss_quart", "loss_reg", "loss_total", "alpha_entropy", "modality_mass"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(lines[1]["step"], 1);
    assert_eq!(lines[0]["modality_mass"].as_array().unwrap().len(), 3);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let mut cfg = StreamConfig::default();
    cfg.dims[2] += 1;
    let ds = Dataset::new(1, cfg.clone(), generate_dataset(1, 4, &Scenario::ALL, &cfg).unwrap());
    let r = run_stage::<f64>(
        &short(Stage::I, 1),
        &ds,
        Start::Fresh {
            config: ModelConfig::default(),
            seed: 0,
        },
        &mut (),
    );
    assert!(matches!(r, Err(Error::Config { .. })));
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::default();
    cfg.tokens = quart_core::streams::BlockLayout::new(3, 2, 2);
    cfg.embed_dim = 8;
    cfg.encoder_dim = 4;
    cfg.projection_hidden = 6;
    cfg.decoder.embed_dim = 8;
    cfg.decoder.mlp_hidden = 8;
    cfg.decoder.layers = 1;
    cfg.lora_rank = 2;
    let ds = data(2);
    for sign in [quart_core::decoder::RegSign::AsWritten, quart_core::decoder::RegSign::Sparsity] {
        let r = quart_core::pipeline::objective_grad_check(&cfg, 3, &ds.samples, 0.5, sign, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "{sign:?}: {}", r.max_rel_err);
        assert!(r.coords > 1000);
    }
}
