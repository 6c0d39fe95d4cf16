use guidedseg_core::episodes::{generate_shapes_world, Dataset, Points, ShapesConfig, TaskMode};
use guidedseg_core::model::{segment, AnnotationSet, Fusion, Head, Label, Point};
use guidedseg_core::train::{
    baseline_finetune, benchmark_timing, eval_fewshot, sample_tensor, timing_episode, train_fgbg, train_guided, EvalConfig,
    FinetuneConfig, TaskClasses, TrainConfig,
};
use guidedseg_core::{Error, GuidanceConfig, ModelParams};

fn world() -> Dataset {
    let cfg = ShapesConfig { still_images: 80, sequences: 8, sequence_length: 6, ..Default::default() };
    generate_shapes_world(&cfg, 21).unwrap()
}

fn short(episodes: usize) -> TrainConfig {
    TrainConfig { episodes, log_every: 10, ..Default::default() }
}

#[test]
fn first_episode_loss_is_near_chance() {
    let data = world();
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..short(1) };
        let out = train_guided::<f32>(&data, &cfg, |_| {}).unwrap();
        let l = out.losses[0];
        assert!((l - std::f64::consts::LN_2).abs() < 0.2, "seed {seed}: {l}");
    }
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let data = world();
    let a = train_guided::<f32>(&data, &short(400), |_| {}).unwrap();
    let b = train_guided::<f32>(&data, &short(400), |_| {}).unwrap();
    assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
    assert_eq!(a.losses, b.losses);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&a.losses[300..]) < mean(&a.losses[..100]), "loss did not fall");
    let other = train_guided::<f32>(&data, &TrainConfig { seed: 1, ..short(20) }, |_| {}).unwrap();
    let same = train_guided::<f32>(&data, &short(20), |_| {}).unwrap();
    assert_ne!(other.params.to_bytes().unwrap(), same.params.to_bytes().unwrap());
}

#[test]
fn progress_reports_arrive_every_log_interval() {
    let data = world();
    let mut seen = Vec::new();
    train_guided::<f32>(&data, &short(35), |p| seen.push((p.episode, p.running_loss.is_finite()))).unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [10, 20, 30]);
    assert!(seen.iter().all(|s| s.1));
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = world();
    let bad = [
        TrainConfig { episodes: 0, ..Default::default() },
        TrainConfig { local_fraction: 1.5, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { model: GuidanceConfig::default().with_head(Head::Prototype), local_fraction: 0.5, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(train_guided::<f32>(&data, &cfg, |_| {}), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn finetune_without_steps_is_the_base_model() {
    let data = world();
    let fgbg = train_fgbg::<f32>(&data, &short(30), |_| {}).unwrap().params;
    let stride = fgbg.config.feature_stride;
    let support = sample_tensor::<f32>(&data.samples[0], stride).unwrap();
    let query = sample_tensor::<f32>(&data.samples[1], stride).unwrap();
    let ann = AnnotationSet::from_points(64, 64, [Point::new(5, 5, Label::Positive)]).unwrap();
    let cfg = FinetuneConfig { steps: 0, ..FinetuneConfig::from_training(&short(1)) };
    let tuned = baseline_finetune(&fgbg, &[(&support, &ann)], &query, &cfg).unwrap();
    assert_eq!(tuned.final_loss, None);
    let base = segment(&fgbg, &[], &query).unwrap();
    assert_eq!(tuned.mask, base.mask);
    let cfg = FinetuneConfig { steps: 3, ..cfg };
    assert!(baseline_finetune(&fgbg, &[(&support, &ann)], &query, &cfg).unwrap().final_loss.is_some());
    let guided = ModelParams::<f32>::init(GuidanceConfig::default(), 0).unwrap();
    assert!(matches!(baseline_finetune(&guided, &[(&support, &ann)], &query, &cfg), Err(Error::Unsupported(_))));
}

#[test]
fn evaluation_is_reproducible_and_scores_baselines_on_the_same_episodes() {
    let data = world();
    let guided = train_guided::<f32>(&data, &short(300), |_| {}).unwrap().params;
    let cfg = EvalConfig { episodes: 20, points: vec![Points::Count(2), Points::Dense], classes: TaskClasses::All, ..Default::default() };
    let a = eval_fewshot(&guided, &[("self", &guided)], &data, &cfg).unwrap();
    let b = eval_fewshot(&guided, &[("self", &guided)], &data, &cfg).unwrap();
    let scores = |r: &guidedseg_core::train::EvalReport| r.cells.iter().map(|c| c.scores.clone()).collect::<Vec<_>>();
    assert_eq!(scores(&a), scores(&b));
    for (c, s) in a.cells.iter().zip(&a.baselines["self"]) {
        assert_eq!(c.scores, s.scores);
        assert_eq!(c.n, 20);
        assert!((0.0..=1.0).contains(&c.mean_iu));
    }
    assert!(a.cells.iter().any(|c| c.mean_iu > 0.0));
    let bad = EvalConfig { shots: vec![0], ..cfg };
    assert!(matches!(eval_fewshot(&guided, &[], &data, &bad), Err(Error::Config(_))));
}

#[test]
fn guidance_update_beats_a_full_forward() {
    let data = world();
    let params = ModelParams::<f32>::init(GuidanceConfig::default(), 0).unwrap();
    let ep = timing_episode(&data, 0).unwrap();
    assert_eq!(ep.mode, TaskMode::Video);
    let report = benchmark_timing(&params, &data, &ep, 20).unwrap();
    assert!(!report.support_is_query);
    assert!(report.ratio > 1.0, "{report:?}");
    assert!(matches!(benchmark_timing(&params, &data, &ep, 5), Err(Error::Config(_))));
    let early = ModelParams::<f32>::init(GuidanceConfig::default().with_fusion(Fusion::Early), 0).unwrap();
    assert!(matches!(benchmark_timing(&early, &data, &ep, 20), Err(Error::Unsupported(_))));
}
