use std::num::NonZeroUsize;

use hbformer::encoder::ModelConfig;
use hbformer::model::HbFormer;
use hbformer::train::{
    argmax_classes, predict_masks, synth_dataset, train_loop, train_seed, RunStatus, SegmentationSample, SynthConfig,
    TrainConfig,
};

fn data(n: usize, seed: u64) -> Vec<SegmentationSample> {
    let cfg = SynthConfig {
        size: 32,
        min_tumors: 1,
        ..SynthConfig::default()
    };
    synth_dataset(n, &cfg, seed).unwrap()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_steps: steps,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seed_gives_identical_run() {
    let model = HbFormer::new(ModelConfig::micro()).unwrap();
    let train = data(4, 1);
    let a = train_seed(&model, &short(6), &train, &train, 5).unwrap();
    let b = train_seed(&model, &short(6), &train, &train, 5).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!((a.final_loss().unwrap() - b.final_loss().unwrap()).abs() < 1e-7);
    let c = train_seed(&model, &short(6), &train, &train, 6).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn loss_falls_on_a_tiny_set() {
    let model = HbFormer::new(ModelConfig::micro()).unwrap();
    let train = data(2, 3);
    let cfg = TrainConfig {
        augment: false,
        ..short(40)
    };
    let run = train_seed(&model, &cfg, &train, &train, 1).unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    let head: f64 = run.losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = run.losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn divergence_stops_with_last_good_parameters() {
    let model = HbFormer::new(ModelConfig::micro()).unwrap();
    let train = data(2, 4);
    let cfg = TrainConfig {
        lr: 1e30,
        lr_min: 1e30,
        ..short(20)
    };
    let run = train_seed(&model, &cfg, &train, &train, 2).unwrap();
    assert!(matches!(run.status, RunStatus::Diverged { .. }));
    assert!(run.params.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn prediction_ignores_thread_count() {
    let model = HbFormer::new(ModelConfig::micro()).unwrap();
    let params = model.init_params(3);
    let samples = data(5, 7);
    let one = predict_masks(&model, &params, &samples, NonZeroUsize::MIN).unwrap();
    let three = predict_masks(&model, &params, &samples, NonZeroUsize::new(3).unwrap()).unwrap();
    assert_eq!(one, three);
}

#[test]
fn seeds_are_aggregated() {
    let model = HbFormer::new(ModelConfig::micro()).unwrap();
    let train = data(2, 8);
    let summary = train_loop(&model, &short(2), &train, &train, &[1, 2]).unwrap();
    assert_eq!(summary.aggregate.seeds, vec![1, 2]);
    let m: Vec<f64> = summary.runs.iter().map(|r| r.report.mean_dsc).collect();
    assert!((summary.aggregate.mean_dsc.0 - (m[0] + m[1]) / 2.0).abs() < 1e-15);
    assert!(train_loop(&model, &short(2), &train, &train, &[]).is_err());
}

#[test]
fn argmax_breaks_ties_towards_lower_class() {
    let logits = [0.5f32, 1.0, 0.5, 2.0, 0.2, 1.0];
    let m = argmax_classes(&logits, 3, 1, 2);
    assert_eq!(m.labels, vec![0, 1]);
}
