use adc_core::actor::{Actor, ModelDims};
use adc_core::nn::{AdamConfig, Checkpoint, RngState};
use adc_core::synth::{self, SynthConfig};
use adc_core::text::{self, Dataset, LoadOptions, END};
use adc_core::trainer::{self, read_reward_log, Models, TrainConfig, TrainOutputs};

fn tiny_dataset() -> Dataset {
    let cfg = SynthConfig {
        num_classes: 2,
        images_per_class: 5,
        captions_per_image: 2,
        feature_dim: 16,
        seed: 4,
        ..Default::default()
    };
    text::build_dataset(synth::generate(&cfg).unwrap(), &LoadOptions::default()).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        total_epochs: 4,
        episodes_per_epoch: 5,
        pretrain_epochs_actor: 2,
        pretrain_epochs_critics: 1,
        hidden_size: 8,
        checkpoint_every: 1,
        seed: 21,
        ..Default::default()
    }
}

fn stores_equal(a: &Models, b: &Models) -> bool {
    a.actor.store == b.actor.store && a.value.store == b.value.store && a.encdec.store == b.encdec.store
}

#[test]
fn single_pair_is_memorized() {
    let dims = ModelDims { feature_dim: 6, hidden: 16, vocab: 9 };
    let mut rng = RngState::new(2).rng();
    let mut actor = Actor::new(dims, 0.0, &mut rng).unwrap();
    let features = vec![0.4, -0.1, 0.9, 0.0, -0.7, 0.2];
    let caption = vec![5, 7, 4, 8, END];
    let adam = AdamConfig::with_lr(1e-2);
    let mut loss = f64::INFINITY;
    for _ in 0..300 {
        loss = actor.pretrain_step(&features, &caption, &adam, 0, &mut rng).unwrap();
    }
    assert!(loss < 0.01, "final NLL {loss}");
    assert_eq!(actor.greedy_tokens(&features, 10).unwrap(), caption);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset();
    let cfg = tiny_config();
    let a = trainer::run_training(&data, &cfg, None, &TrainOutputs::default()).unwrap();
    let b = trainer::run_training(&data, &cfg, None, &TrainOutputs::default()).unwrap();
    assert!(stores_equal(&a.models, &b.models));
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.rewards.len(), cfg.total_epochs * cfg.episodes_per_epoch);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_dataset();
    let cfg = tiny_config();
    let full = trainer::run_training(&data, &cfg, None, &TrainOutputs::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        checkpoint: Some(dir.path().join("ck.adc")),
        reward_log: Some(dir.path().join("rewards.csv")),
        stop_after_epochs: Some(2),
    };
    let first = trainer::run_training(&data, &cfg, None, &outputs).unwrap();
    assert_eq!(first.progress.epochs_completed, 2);
    let start = Models::from_checkpoint(&Checkpoint::load(&dir.path().join("ck.adc")).unwrap()).unwrap();
    assert_eq!(start.1, first.progress);

    let resumed_out = TrainOutputs { stop_after_epochs: None, ..outputs };
    let resumed = trainer::run_training(&data, &cfg, Some(start), &resumed_out).unwrap();
    assert!(stores_equal(&full.models, &resumed.models));
    assert_eq!(full.rewards, resumed.rewards);

    let logged = read_reward_log(&dir.path().join("rewards.csv")).unwrap();
    assert_eq!(logged.len(), cfg.total_epochs * cfg.episodes_per_epoch);
    for (a, b) in logged.iter().zip(&full.rewards) {
        assert_eq!(a.episode, b.episode);
        assert!((a.r_t - b.r_t).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_preserves_captions() {
    let data = tiny_dataset();
    let cfg = tiny_config();
    let out = trainer::run_training(&data, &cfg, None, &TrainOutputs::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.adc");
    out.models.to_checkpoint(out.progress).save(&path).unwrap();
    let (back, progress) = Models::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(progress, out.progress);
    assert!(stores_equal(&out.models, &back));
    for e in &data.examples {
        assert_eq!(
            out.models.actor.greedy_tokens(&e.features, cfg.t_max).unwrap(),
            back.actor.greedy_tokens(&e.features, cfg.t_max).unwrap()
        );
    }
}

#[test]
fn checkpoint_rejects_other_dataset() {
    let data = tiny_dataset();
    let cfg = tiny_config();
    let models = Models::for_dataset(&data, &cfg).unwrap();
    let other_cfg = SynthConfig { feature_dim: 12, ..Default::default() };
    let other = text::build_dataset(synth::generate(&other_cfg).unwrap(), &LoadOptions::default()).unwrap();
    assert!(models.check_dataset(&other).is_err());
}
