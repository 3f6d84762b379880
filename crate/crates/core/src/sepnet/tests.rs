use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check_normwise;
use crate::objectives::{LossConfig, Objective};
use crate::scene::render_scene;

fn small() -> SepModel {
    SepModel::new(ModelConfig { encoder_dim: 8, separator_layers: 2, seed: 3, ..ModelConfig::default() }).unwrap()
}

fn noise(seed: u64, n: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new(SAMPLE_RATE, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

/// Runs the streaming path over a whole signal.
fn stream_all(model: &SepModel, x: &AudioBuffer) -> ([Vec<f64>; 2], Vec<Vec<f64>>) {
    let (frame, hop) = (model.config.frame(), model.config.hop());
    let frames = frame_signal(&x.samples, frame, hop).unwrap();
    let mut st = SepStreamer::new(model);
    let mut ola = [OverlapAdd::new(hop), OverlapAdd::new(hop)];
    let mut out = [Vec::new(), Vec::new()];
    let mut masks = Vec::new();
    for row in frames.data().chunks(frame) {
        let f = st.step(row).unwrap();
        for c in 0..2 {
            out[c].extend(ola[c].push(&f.frames[c]));
        }
        masks.push(f.mask);
    }
    out.iter_mut().for_each(|o| o.truncate(x.len()));
    (out, masks)
}

#[test]
fn config_defaults_give_three_ms_latency() {
    let c = ModelConfig::default();
    assert_eq!((c.frame(), c.hop(), c.latency()), (32, 16, 48));
    assert!(ModelConfig { encoder_dim: 4, ..c.clone() }.validate().is_err());
}

#[test]
fn framing_examples() {
    let f = frame_signal(&[1.0; 10], 4, 2).unwrap();
    assert_eq!(f.shape(), &[5, 4]);
    for row in f.data().chunks(4).take(4) {
        assert_eq!(row, &[1.0; 4]);
    }
    let mut x = vec![0.0; 12];
    x[0] = 1.0;
    let f = frame_signal(&x, 4, 2).unwrap();
    let hot: Vec<usize> = f.data().chunks(4).enumerate().filter(|(_, r)| r.iter().any(|v| *v != 0.0)).map(|(i, _)| i).collect();
    assert_eq!(hot, vec![0]);
    assert!(frame_signal(&[1.0; 3], 4, 2).is_err());
}

#[test]
fn analysis_synthesis_round_trip() {
    let x = noise(1, 1000).samples;
    let w = sqrt_hann(32);
    let frames = frame_signal(&x, 32, 16).unwrap();
    let windowed: Vec<f64> = frames.data().chunks(32).flat_map(|r| r.iter().zip(&w).map(|(a, b)| a * b * b).collect::<Vec<_>>()).collect();
    let y = overlap_add(&windowed, 16, x.len());
    for i in 16..x.len() {
        assert!((x[i] - y[i]).abs() < 1e-6);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let m = small();
    let s = m.forward(&AudioBuffer::zeros(SAMPLE_RATE, 200)).unwrap();
    assert!(s.estimates.iter().all(|e| e.samples.iter().all(|v| *v == 0.0)));
}

#[test]
fn masks_are_probabilities() {
    let s = small().forward(&noise(2, 400)).unwrap();
    assert_eq!(s.masks.shape(), &[25, 16]);
    assert!(s.masks.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn forward_is_causal() {
    let m = small();
    let x = noise(3, 480);
    let base = m.forward(&x).unwrap();
    let lat = m.config.latency();
    for t in [0usize, 50, 200, 400] {
        let mut y = x.clone();
        for v in &mut y.samples[t + lat..] {
            *v += 1.0;
        }
        let out = m.forward(&y).unwrap();
        for c in 0..2 {
            assert_eq!(&out.estimates[c].samples[..=t], &base.estimates[c].samples[..=t], "t {t}");
        }
    }
}

#[test]
fn streaming_matches_batch() {
    let m = SepModel::new(ModelConfig::default()).unwrap();
    let x = noise(4, 16_000);
    let batch = m.forward(&x).unwrap();
    let (stream, masks) = stream_all(&m, &x);
    let mut worst = 0.0f64;
    for c in 0..2 {
        for (a, b) in stream[c].iter().zip(&batch.estimates[c].samples) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "{worst}");
    let flat: Vec<f64> = masks.concat();
    assert_eq!(flat.len(), batch.masks.numel());
    assert!(flat.iter().zip(batch.masks.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    let frames: Vec<f64> = batch.frames[1].data().to_vec();
    assert!((overlap_add(&frames, 16, x.len()).iter().zip(&batch.estimates[1].samples)).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn reset_restores_initial_state() {
    let m = small();
    let x = noise(5, 64);
    let frames = frame_signal(&x.samples, 32, 16).unwrap();
    let mut st = SepStreamer::new(&m);
    let first = st.step(&frames.data()[..32]).unwrap();
    st.step(&frames.data()[32..64]).unwrap();
    st.reset();
    assert_eq!(st.step(&frames.data()[..32]).unwrap(), first);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let model = small();
    let mix = noise(6, 48).samples;
    let s1: Vec<f64> = noise(7, 48).samples;
    let s2: Vec<f64> = noise(8, 48).samples;
    let targets = crate::objectives::TargetSet::new(
        vec![AudioBuffer::new(SAMPLE_RATE, s1), AudioBuffer::new(SAMPLE_RATE, s2)],
        2,
    )
    .unwrap();
    let cfg = LossConfig { objective: Objective::Proposed, ..LossConfig::default() };
    for (i, name) in model.params.names.iter().enumerate() {
        let err = finite_diff_check_normwise(
            |g, x| {
                let mut leaves: Vec<NodeId> = model.params.tensors.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
                leaves[i] = x;
                let out = model.forward_graph(g, &leaves, &[&mix])?;
                crate::objectives::objective_dispatch(g, &cfg, &targets, &out.estimates[0])
            },
            &model.params.tensors[i],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn lr_schedule_is_exact() {
    let mut st = TrainState::new(small());
    let cfg = TrainConfig::default();
    st.epoch = 2;
    assert_eq!(st.learning_rate(&cfg), 1e-3 * 0.98 * 0.98);
}

#[test]
fn overfits_one_batch() {
    let data: Vec<_> = (0..4).map(|s| render_scene(s, 0.25).unwrap()).collect();
    let mut st = TrainState::new(SepModel::new(ModelConfig { encoder_dim: 16, seed: 1, ..ModelConfig::default() }).unwrap());
    let cfg = TrainConfig { batch_size: 4, crop_frames: 0, learning_rate: 1e-2, lr_decay: 1.0, ..TrainConfig::default() };
    let loss_cfg = LossConfig::default();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_epoch(&mut st, &data, &loss_cfg, &cfg).unwrap().mean_loss);
    }
    assert!(losses[49] < losses[0] - 1.0, "{} -> {}", losses[0], losses[49]);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let data: Vec<_> = (10..14).map(|s| render_scene(s, 0.2).unwrap()).collect();
    let cfg = TrainConfig { batch_size: 2, crop_frames: 100, ..TrainConfig::default() };
    let loss_cfg = LossConfig::default();
    let fresh = || TrainState::new(SepModel::new(ModelConfig { encoder_dim: 8, ..ModelConfig::default() }).unwrap());
    let mut a = fresh();
    let ra: Vec<_> = (0..2).map(|_| train_epoch(&mut a, &data, &loss_cfg, &cfg).unwrap()).collect();
    let mut b = fresh();
    train_epoch(&mut b, &data, &loss_cfg, &cfg).unwrap();
    let mut resumed = TrainState {
        model: SepModel::from_params(b.model.config.clone(), b.model.params.clone()).unwrap(),
        adam: b.adam.clone(),
        epoch: b.epoch,
    };
    let rb = train_epoch(&mut resumed, &data, &loss_cfg, &cfg).unwrap();
    assert_eq!(ra[1], rb);
    assert_eq!(a.model.params, resumed.model.params);
}

#[test]
fn incompatible_objective_is_rejected_up_front() {
    let data: Vec<_> = (0..6).map(|s| render_scene(s, 0.1).unwrap()).collect();
    assert!(data.iter().any(|b| b.targets.talker_count == 1));
    let mut st = TrainState::new(small());
    let loss_cfg = LossConfig { objective: Objective::SsPit, ..LossConfig::default() };
    assert!(matches!(train_epoch(&mut st, &data, &loss_cfg, &TrainConfig::default()), Err(Error::Config(_))));
}
