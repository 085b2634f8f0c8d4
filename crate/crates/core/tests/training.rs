use physmamba_core::synth::generate_dataset;
use physmamba_core::train::{evaluate, fresh_checkpoint, prepare_dataset, train, PreparedClip};
use physmamba_core::{Checkpoint, ModelConfig, SynthConfig, TrainConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 1,
        d_state: 4,
        ca_ratio: 2,
        head_width: 4,
        frames: 8,
        height: 8,
        width: 8,
        ..ModelConfig::default()
    }
}

fn clips(model: &ModelConfig, count: usize, seconds: f64, seed: u64) -> Vec<PreparedClip> {
    let synth = SynthConfig { clips: count, height: 16, width: 16, duration_s: seconds, seed, ..SynthConfig::default() };
    prepare_dataset(&generate_dataset(&synth).unwrap(), model).unwrap()
}

fn run(model: &ModelConfig, cfg: &TrainConfig, data: &[PreparedClip]) -> (Vec<f64>, Checkpoint) {
    let out = train(model, cfg, data, None, None).unwrap();
    (out.losses.iter().map(|r| r.loss).collect(), out.checkpoint)
}

#[test]
fn identical_seeds_give_identical_runs() {
    let model = tiny_model();
    let data = clips(&model, 4, 2.0, 1);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
    let (la, ca) = run(&model, &cfg, &data);
    let (lb, cb) = run(&model, &cfg, &data);
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    let (lc, _) = run(&model, &TrainConfig { seed: 1, ..cfg }, &data);
    assert_ne!(la, lc);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let model = tiny_model();
    // one clip exactly one window long, so every epoch sees the same batch
    let data = clips(&model, 1, 0.3, 2);
    assert_eq!(data[0].len(), model.frames);
    let cfg = TrainConfig { epochs: 3, batch_size: 2, lr: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut start = fresh_checkpoint(&model, &cfg).unwrap();
    // start from stored precision, as every epoch boundary does
    start.params.round_to_f32();
    let out = train(&model, &cfg, &data, None, Some(start.clone())).unwrap();
    let (losses, end): (Vec<f64>, _) = (out.losses.iter().map(|r| r.loss).collect(), out.checkpoint);
    for ((_, a), (_, b)) in start.params.iter().zip(end.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let model = tiny_model();
    let data = clips(&model, 3, 2.0, 3);
    let full = TrainConfig { epochs: 5, batch_size: 2, ..TrainConfig::default() };
    let (full_losses, full_ck) = run(&model, &full, &data);

    let dir = tempfile::tempdir().unwrap();
    let first = TrainConfig { epochs: 3, ..full.clone() };
    train(&model, &first, &data, Some(dir.path()), None).unwrap();
    let saved = Checkpoint::load(&dir.path().join("checkpoints/epoch_003")).unwrap();
    assert_eq!(saved.epoch, 3);
    let rest = train(&model, &full, &data, Some(dir.path()), Some(saved)).unwrap();

    let tail: Vec<f64> = rest.losses.iter().map(|r| r.loss).collect();
    assert_eq!(&full_losses[full_losses.len() - tail.len()..], &tail[..]);
    assert_eq!(rest.checkpoint, full_ck);
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + full_losses.len());
}

#[test]
fn a_single_clip_can_be_fitted() {
    let model = tiny_model();
    let data = clips(&model, 1, 1.0, 4);
    // 29 differenced steps, 8-step windows: 8 windows per epoch, 2 steps of 4
    let cfg = TrainConfig { epochs: 100, batch_size: 4, windows_per_clip: 8, weight_decay: 0.0, ..TrainConfig::default() };
    let out = train(&model, &cfg, &data, None, None).unwrap();
    assert_eq!(out.losses.len(), 200);
    let last = out.epoch_means().last().unwrap().1;
    assert!(last < 0.1, "final epoch loss {last}");
}

#[test]
fn toy_run_makes_progress() {
    let model = ModelConfig { channels: 32, blocks: 2, head_width: 8, frames: 32, height: 16, width: 16, ..ModelConfig::default() };
    let data = clips(&model, 30, 10.0, 0);
    let cfg = TrainConfig { epochs: 5, batch_size: 4, ..TrainConfig::default() };
    let means = train(&model, &cfg, &data, None, None).unwrap().epoch_means();
    assert_eq!(means.len(), 5);
    assert!(means[4].1 < means[0].1, "{means:?}");
}

#[test]
fn evaluation_tiles_whole_clips() {
    let model = ModelConfig { frames: 128, height: 8, width: 8, ..tiny_model() };
    let data = clips(&model, 1, 10.0, 5);
    assert_eq!(data[0].len(), 299);
    let mut params = fresh_checkpoint(&model, &TrainConfig::default()).unwrap().params;
    let report = evaluate(&model, &mut params, &data).unwrap();
    let clip = &report.clips[0];
    assert_eq!(clip.pred_trace.len(), 256);
    assert_eq!(clip.gt_trace, data[0].target[..256]);
    assert!(clip.pred_trace.iter().all(|v| v.is_finite()));
}

#[test]
fn training_without_a_full_window_is_rejected() {
    let model = ModelConfig { frames: 64, ..tiny_model() };
    let data = clips(&model, 2, 1.0, 6);
    let err = train(&model, &TrainConfig::default(), &data, None, None).unwrap_err();
    assert!(matches!(err, physmamba_core::Error::InsufficientData(_)), "{err}");
}
