use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::unroll::{clip_grads, clip_loss};
use super::*;
use crate::backbone::Mode;
use crate::data::synth::{ground_truth, SynthSpec};
use crate::data::FrameSource;
use crate::filtergen::{generate_filter, init_state};
use crate::response::correlate;
use crate::supervision::loss_and_grad;
use crate::tensor::Tensor;

fn synth_seq(seed: u64, length: usize) -> SequenceRecord {
    let spec = SynthSpec {
        seed,
        length,
        ..SynthSpec::default()
    };
    SequenceRecord {
        name: format!("synth-{seed}"),
        boxes: ground_truth(&spec),
        frames: FrameSource::Synth(spec),
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        clip_len: 2,
        total_iters: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn tiny_batch(
    cfg: &TrainConfig,
    iter: u64,
) -> (
    Vec<Tensor<f32>>,
    Vec<Tensor<f32>>,
    Vec<Vec<crate::supervision::LabelMap>>,
) {
    let seqs = vec![synth_seq(5, 12), synth_seq(6, 12)];
    let (clips, _) = sample_training_batch(cfg, &seqs, iter).unwrap();
    assemble_batch(&clips, DEFAULT_ALPHA).unwrap()
}

#[test]
fn learning_rate_steps_down_by_fixed_factor() {
    let cfg = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    assert!(close(learning_rate(&cfg, 0), 1e-4));
    assert!(close(learning_rate(&cfg, 4999), 1e-4));
    assert!(close(learning_rate(&cfg, 5000), 8e-5));
    assert!(close(learning_rate(&cfg, 9999), 8e-5));
    assert!(close(learning_rate(&cfg, 10000), 6.4e-5));
}

#[test]
fn single_step_clip_loss_matches_manual_pipeline() {
    let cfg = TrainConfig {
        clip_len: 1,
        ..tiny_cfg()
    };
    let (ex, se, lb) = tiny_batch(&cfg, 0);
    let model = RflModel::<f32>::new(&mut rng_from_seed(3), &cfg.variant);
    let mut scratch = Scratch::new();
    let got = clip_loss(&model, &ex, &se, &lb, false, &mut scratch).unwrap();

    let (e_feat, _) = model
        .exemplar_features(&ex[0], Mode::Train, &mut scratch)
        .unwrap();
    let state = init_state(&e_feat, &model.lstm, &mut scratch);
    let filter = generate_filter(&state.h, &model.lstm, &mut scratch);
    let (s_feat, _) = model
        .search_features(&se[0], Mode::Train, &mut scratch)
        .unwrap();
    let logits = correlate(&s_feat, &filter, &mut scratch);
    let (want, _) = loss_and_grad(&logits, &lb[0], false).unwrap();
    assert_eq!(got, want);
}

#[test]
fn clip_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let (ex32, se32, lb) = tiny_batch(&cfg, 0);
    let ex: Vec<Tensor<f64>> = ex32.iter().map(|t| t.cast()).collect();
    let se: Vec<Tensor<f64>> = se32.iter().map(|t| t.cast()).collect();
    let mut model = RflModel::<f64>::new(&mut rng_from_seed(9), &cfg.variant);
    let mut scratch = Scratch::new();
    let mut grads = ModelGrads::zeros_like(&model);
    clip_grads(
        &mut model,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut grads,
        &mut scratch,
    )
    .unwrap();

    // One parameter tensor from each functional group: first/last exemplar
    // conv block, a search conv block, the LSTM gate and output layers, and
    // the memory-initialization net (order matches the trainable listing).
    for idx in [0usize, 18, 24, 40, 43, 44] {
        let elem = grads.flat()[idx].numel() / 3;
        let analytic = grads.flat()[idx].data()[elem];
        let orig = model.trainable_mut()[idx].data()[elem];
        let h = 1e-4 * orig.abs().max(1.0);
        model.trainable_mut()[idx].data_mut()[elem] = orig + h;
        let up = clip_loss(&model, &ex, &se, &lb, false, &mut scratch).unwrap();
        model.trainable_mut()[idx].data_mut()[elem] = orig - h;
        let down = clip_loss(&model, &ex, &se, &lb, false, &mut scratch).unwrap();
        model.trainable_mut()[idx].data_mut()[elem] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        assert!(
            (analytic - fd).abs() / denom < 1e-3 || (analytic - fd).abs() < 1e-9,
            "param tensor {idx}: analytic {analytic}, fd {fd}"
        );
    }
}

#[test]
fn zero_init_variant_never_trains_the_init_net() {
    let cfg = TrainConfig {
        variant: VariantConfig {
            zero_init: true,
            ..VariantConfig::default()
        },
        ..tiny_cfg()
    };
    let all_zero = |t: &Tensor<f32>| t.data().iter().all(|&v| v == 0.0);
    let mut model = RflModel::<f32>::new(&mut rng_from_seed(4), &cfg.variant);
    let mut scratch = Scratch::new();

    // Single step: state and output bias start at zero, so the filter is
    // identically zero and nothing upstream of the output bias can receive
    // gradient; only db_out is nonzero.
    let (ex, se, lb) = {
        let c = TrainConfig {
            clip_len: 1,
            ..cfg.clone()
        };
        tiny_batch(&c, 0)
    };
    let mut grads = ModelGrads::zeros_like(&model);
    clip_grads(
        &mut model,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut grads,
        &mut scratch,
    )
    .unwrap();
    assert!(!all_zero(&grads.lstm.db_out));
    for t in grads.flat() {
        if !std::ptr::eq(t, &grads.lstm.db_out) {
            assert!(all_zero(t));
        }
    }

    // Two steps: the second step trains backbones and gates, but the unused
    // memory-initialization net still gets exactly zero gradient.
    let (ex, se, lb) = tiny_batch(&cfg, 0);
    let mut grads = ModelGrads::zeros_like(&model);
    clip_grads(
        &mut model,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut grads,
        &mut scratch,
    )
    .unwrap();
    for t in [
        &grads.lstm.dw_init_h,
        &grads.lstm.db_init_h,
        &grads.lstm.dw_init_c,
        &grads.lstm.db_init_c,
    ] {
        assert!(all_zero(t));
    }
    assert!(!all_zero(&grads.lstm.dw_gates));
    assert!(!all_zero(&grads.ecnn.dw[0]));
    assert!(!all_zero(&grads.scnn.as_ref().unwrap().dw[0]));
}

#[test]
fn shared_backbone_gradient_is_sum_of_split_branches() {
    let cfg = TrainConfig {
        clip_len: 1,
        ..tiny_cfg()
    };
    let (ex32, se32, lb) = tiny_batch(&cfg, 0);
    let ex: Vec<Tensor<f64>> = ex32.iter().map(|t| t.cast()).collect();
    let se: Vec<Tensor<f64>> = se32.iter().map(|t| t.cast()).collect();

    let mut split = RflModel::<f64>::new(&mut rng_from_seed(21), &VariantConfig::default());
    split.scnn = Some(split.ecnn.clone());
    let mut shared = RflModel {
        ecnn: split.ecnn.clone(),
        scnn: None,
        lstm: split.lstm.clone(),
        variant: VariantConfig {
            shared_backbone: true,
            ..VariantConfig::default()
        },
    };
    let mut scratch = Scratch::new();
    let mut g_split = ModelGrads::zeros_like(&split);
    let l_split = clip_grads(
        &mut split,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut g_split,
        &mut scratch,
    )
    .unwrap();
    let mut g_shared = ModelGrads::zeros_like(&shared);
    let l_shared = clip_grads(
        &mut shared,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut g_shared,
        &mut scratch,
    )
    .unwrap();

    assert_eq!(l_split.mean, l_shared.mean);
    let scnn = g_split.scnn.as_ref().unwrap();
    for li in 0..5 {
        for (a, (b, c)) in g_shared.ecnn.dw[li]
            .data()
            .iter()
            .zip(g_split.ecnn.dw[li].data().iter().zip(scnn.dw[li].data()))
        {
            let want = *b + *c;
            assert!(
                (*a - want).abs() <= 1e-10 * want.abs().max(1.0),
                "layer {li}: {a} vs {want}"
            );
        }
    }
}

#[test]
fn one_small_step_on_a_fixed_batch_decreases_loss() {
    // The first optimizer step moves each parameter by roughly -lr against
    // its gradient sign, so for a small enough lr the loss on the same
    // batch must go down. Run in f64 so the decrease is not lost to
    // rounding.
    let cfg = TrainConfig {
        augment: false,
        ..tiny_cfg()
    };
    let (ex32, se32, lb) = tiny_batch(&cfg, 0);
    let ex: Vec<Tensor<f64>> = ex32.iter().map(|t| t.cast()).collect();
    let se: Vec<Tensor<f64>> = se32.iter().map(|t| t.cast()).collect();
    let mut model = RflModel::<f64>::new(&mut rng_from_seed(17), &cfg.variant);
    let mut adam = Adam::new(&model.trainable_dims());
    let mut scratch = Scratch::new();
    let mut grads = ModelGrads::zeros_like(&model);
    let before = clip_grads(
        &mut model,
        &ex,
        &se,
        &lb,
        false,
        false,
        &mut grads,
        &mut scratch,
    )
    .unwrap()
    .mean;
    adam.step(&mut model.trainable_mut(), &grads.flat(), 1e-6);
    let after = clip_loss(&model, &ex, &se, &lb, false, &mut scratch).unwrap();
    assert!(after < before, "loss did not decrease: {before} -> {after}");
}

#[test]
fn same_seed_reproduces_loss_history_and_parameters() {
    let cfg = tiny_cfg();
    let seqs = vec![synth_seq(5, 12), synth_seq(6, 12)];
    let run = || {
        let mut state = TrainState::new(&cfg);
        let rows = train(&mut state, &cfg, &seqs, |_, _| Ok(())).unwrap();
        (rows, state.model.param_checksum())
    };
    let (rows_a, sum_a) = run();
    let (rows_b, sum_b) = run();
    assert_eq!(rows_a, rows_b);
    assert_eq!(sum_a, sum_b);
    assert_eq!(rows_a.len(), 2);
    assert!(rows_a.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn non_finite_loss_aborts_with_batch_seeds() {
    let cfg = TrainConfig {
        total_iters: 1,
        ..tiny_cfg()
    };
    let seqs = vec![synth_seq(5, 12)];
    let mut state = TrainState::new(&cfg);
    state.model.ecnn.layers[0].w.fill(f32::NAN);
    let err = train(&mut state, &cfg, &seqs, |_, _| Ok(())).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("seeds"), "diagnostic: {msg}"),
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

fn small_variant_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        clip_len: 2,
        total_iters: 1,
        seed: 23,
        variant: VariantConfig {
            shared_backbone: true,
            zero_init: false,
            gate_kernel: 1,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_restores_everything() {
    let cfg = small_variant_cfg();
    let seqs = vec![synth_seq(5, 12)];
    let mut state = TrainState::new(&cfg);
    train(&mut state, &cfg, &seqs, |_, _| Ok(())).unwrap();

    let mut scratch = Scratch::new();
    let probe = tiny_batch(&cfg, 7).0.remove(0);
    let (before, _) = state
        .model
        .exemplar_features(&probe, Mode::Infer, &mut scratch)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &state.model, Some(&state.adam), state.iter).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();

    assert_eq!(loaded.iter, 1);
    assert_eq!(loaded.model.variant, state.model.variant);
    let mut pairs: Vec<(String, Tensor<f32>)> = Vec::new();
    loaded
        .model
        .visit_all(|n, t| pairs.push((n.to_string(), t.clone())));
    let mut i = 0;
    state.model.visit_all(|n, t| {
        assert_eq!(pairs[i].0, n);
        assert_eq!(pairs[i].1.dims(), t.dims());
        assert_eq!(pairs[i].1.data(), t.data(), "tensor {n} drifted");
        i += 1;
    });
    assert_eq!(i, pairs.len());
    let restored = loaded.adam.unwrap();
    assert_eq!(restored.t, state.adam.t);
    for (a, b) in restored.m.iter().zip(&state.adam.m) {
        assert_eq!(a.data(), b.data());
    }
    for (a, b) in restored.v.iter().zip(&state.adam.v) {
        assert_eq!(a.data(), b.data());
    }

    // Infer-mode behavior (which exercises BN running stats) survives too.
    let (after, _) = loaded
        .model
        .exemplar_features(&probe, Mode::Infer, &mut scratch)
        .unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let mut cfg = small_variant_cfg();
    cfg.total_iters = 2;
    let seqs = vec![synth_seq(5, 12), synth_seq(6, 12)];

    let mut straight = TrainState::new(&cfg);
    let rows_straight = train(&mut straight, &cfg, &seqs, |_, _| Ok(())).unwrap();

    let mut cfg_half = cfg.clone();
    cfg_half.total_iters = 1;
    let mut part = TrainState::new(&cfg_half);
    let mut rows = train(&mut part, &cfg_half, &seqs, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &part.model, Some(&part.adam), part.iter).unwrap();

    let mut resumed = TrainState::from_checkpoint(load_checkpoint::<f32>(&path).unwrap());
    assert_eq!(resumed.iter, 1);
    rows.extend(train(&mut resumed, &cfg, &seqs, |_, _| Ok(())).unwrap());

    assert_eq!(rows, rows_straight);
    assert_eq!(
        resumed.model.param_checksum(),
        straight.model.param_checksum()
    );
}

#[test]
fn unknown_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("old.ckpt");
    let mut bytes = b"rfl-ckpt-v0\n".to_vec();
    bytes.extend_from_slice(&[0u8; 64]);
    std::fs::write(&path, bytes).unwrap();
    match load_checkpoint::<f32>(&path).unwrap_err() {
        Error::CheckpointVersion { found, expected } => {
            assert_eq!(found, "rfl-ckpt-v0");
            assert_eq!(expected, "rfl-ckpt-v1");
        }
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn corruption_is_detected() {
    let cfg = small_variant_cfg();
    let model = RflModel::<f32>::new(&mut rng_from_seed(31), &cfg.variant);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, None, 0).unwrap();

    let good = std::fs::read(&path).unwrap();
    let mut flipped = good.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&path),
        Err(Error::CheckpointCorrupt(_))
    ));

    std::fs::write(&path, &good[..good.len() - 40]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
