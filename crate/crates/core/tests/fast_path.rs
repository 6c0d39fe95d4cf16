use guidedseg_core::episodes::{generate_shapes_world, Dataset, Points, Sampler, SamplerOptions, ShapesConfig, TaskMode};
use guidedseg_core::model::{
    guidance_from_frames, guide_late, infer, rasterize, segment_with, update_guidance, AnnotationDelta, AnnotationSet,
    Head, Label, Locality, ModelParams, Point, QueryCache, SupportFrame,
};
use guidedseg_core::train::{predict, sample_tensor};
use guidedseg_core::tensor::Tensor;
use guidedseg_core::GuidanceConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_world() -> Dataset {
    let cfg = ShapesConfig { still_images: 24, sequences: 3, sequence_length: 4, ..Default::default() };
    generate_shapes_world(&cfg, 11).unwrap()
}

fn random_delta(rng: &mut ChaCha8Rng, ann: &AnnotationSet) -> AnnotationDelta {
    let (h, w) = ann.image_size();
    let mut delta = AnnotationDelta::default();
    match rng.gen_range(0..10) {
        0 => delta.clear = true,
        1..=3 => {
            if let Some(p) = ann.points().nth(rng.gen_range(0..ann.len().max(1))) {
                delta.remove.push((p.row, p.col));
            }
        }
        _ => {
            for _ in 0..rng.gen_range(1..4) {
                let label = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
                delta.add.push(Point::new(rng.gen_range(0..h), rng.gen_range(0..w), label));
            }
        }
    }
    delta
}

/// The incremental guidance path must agree bit for bit with recomputing
/// guidance from scratch after every edit.
#[test]
fn update_guidance_matches_fresh_guidance() {
    let data = small_world();
    let params = ModelParams::<f64>::init(GuidanceConfig::default(), 3).unwrap();
    let stride = params.config.feature_stride;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for locality in [Locality::GlobalPool, Locality::Identity] {
        let n_frames = if locality == Locality::Identity { 1 } else { 3 };
        let mut frames: Vec<SupportFrame<f64>> = (0..n_frames)
            .map(|i| {
                let s = &data.samples[i];
                let img = sample_tensor(s, stride).unwrap();
                SupportFrame::new(&params, &img, AnnotationSet::new(s.image.height(), s.image.width())).unwrap()
            })
            .collect();
        let mut rep = guidance_from_frames(stride, locality, &frames).unwrap();
        for _ in 0..60 {
            let frame = rng.gen_range(0..n_frames);
            let delta = random_delta(&mut rng, &frames[frame].annotations);
            rep = update_guidance(&params, locality, &mut frames, &rep, frame, &delta).unwrap();
            let fresh = guidance_from_frames(stride, locality, &frames).unwrap();
            assert_eq!(rep.to_json(), fresh.to_json());
            if let [only] = &frames[..] {
                if !only.annotations.is_empty() {
                    let (_, h, w) = only.features.dims3().unwrap();
                    let (pos, neg) = rasterize(&only.annotations, (h, w), stride).unwrap();
                    let direct = guide_late(&only.features, &pos, &neg, locality).unwrap();
                    assert_eq!(rep.to_json(), direct.to_json());
                }
            }
        }
    }
}

#[test]
fn add_then_remove_restores_guidance() {
    let data = small_world();
    let params = ModelParams::<f32>::init(GuidanceConfig::default(), 5).unwrap();
    let stride = params.config.feature_stride;
    let s = &data.samples[0];
    let img = sample_tensor(s, stride).unwrap();
    let ann = AnnotationSet::from_points(64, 64, [Point::new(10, 12, Label::Positive), Point::new(40, 3, Label::Negative)])
        .unwrap();
    let mut frames = vec![SupportFrame::new(&params, &img, ann).unwrap()];
    let before = guidance_from_frames(stride, Locality::GlobalPool, &frames).unwrap();
    let add = AnnotationDelta { add: vec![Point::new(33, 33, Label::Negative)], ..Default::default() };
    let remove = AnnotationDelta { remove: vec![(33, 33)], ..Default::default() };
    let mid = update_guidance(&params, Locality::GlobalPool, &mut frames, &before, 0, &add).unwrap();
    assert_ne!(mid.to_json(), before.to_json());
    let after = update_guidance(&params, Locality::GlobalPool, &mut frames, &mid, 0, &remove).unwrap();
    assert_eq!(after.to_json(), before.to_json());
}

/// Cached-feature inference against a full forward pass, for every late
/// head across the three task modes.
#[test]
fn cached_inference_is_bit_identical_to_full_forward() {
    let data = small_world();
    for head in [Head::FeatureFusion, Head::ParamRegression, Head::Prototype] {
        let cfg = GuidanceConfig::default().with_head(head);
        let params = ModelParams::<f32>::init(cfg, 9).unwrap();
        let stride = params.config.feature_stride;
        let mut sampler = Sampler::new(&data, SamplerOptions::default(), 4);
        for k in 0..6 {
            let (mode, locality) = match k % 3 {
                0 => (TaskMode::Semantic, Locality::GlobalPool),
                1 => (TaskMode::Video, Locality::GlobalPool),
                _ => (TaskMode::Interactive, if head == Head::FeatureFusion { Locality::Identity } else { Locality::GlobalPool }),
            };
            let ep = sampler.sample(mode, 1 + k % 2, Points::Count(2 + k)).unwrap();
            let images: Vec<Tensor<f32>> =
                ep.support.iter().map(|s| sample_tensor(&data.samples[s.sample], stride).unwrap()).collect();
            if locality == Locality::Identity && images.len() > 1 {
                continue;
            }
            let support: Vec<_> = images.iter().zip(&ep.support).map(|(t, s)| (t, &s.annotations)).collect();
            let query = sample_tensor(&data.samples[ep.query], stride).unwrap();
            let full = segment_with(&params, locality, &support, &query).unwrap();
            let rep = full.representation.clone().unwrap();
            let cache = QueryCache::new(&params, &query).unwrap();
            let fast = infer(&params, &cache, Some(&rep)).unwrap();
            assert!(fast.data().iter().zip(full.logits.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{head:?} {k}");
            let pred = predict(&params, locality, &support, &query, (64, 64)).unwrap();
            assert_eq!(pred.mask, full.mask.crop(64, 64).unwrap());
        }
    }
}
