use guidedseg_core::episodes::{
    binarize, generate_shapes_world, load_dataset, save_dataset, Dataset, Episode, Points, Sampler, SamplerOptions,
    ShapesConfig, Task, TaskMode,
};
use guidedseg_core::model::Label;
use guidedseg_core::train::positive_iu;
use guidedseg_core::labels::LabelMap;
use guidedseg_core::Error;

fn world(seed: u64) -> Dataset {
    let cfg = ShapesConfig { still_images: 60, sequences: 6, sequence_length: 6, ..Default::default() };
    generate_shapes_world(&cfg, seed).unwrap()
}

fn check_annotations(data: &Dataset, ep: &Episode) {
    for (item, &budget) in ep.support.iter().zip(&ep.points) {
        let s = &data.samples[item.sample];
        let target = binarize(&s.labels, &s.instance_classes, ep.task);
        let (npos, nneg) = (target.count(1), target.count(0));
        for p in item.annotations.points() {
            let want = if p.label == Label::Positive { 1 } else { 0 };
            assert_eq!(target.get(p.row, p.col), want);
        }
        let (got_pos, got_neg) = (item.annotations.count(Label::Positive), item.annotations.count(Label::Negative));
        match budget {
            Points::Count(p) => {
                assert_eq!(got_pos, p.div_ceil(2).min(npos));
                assert_eq!(got_neg, (p / 2).min(nneg));
            }
            Points::Dense => assert_eq!((got_pos, got_neg), (npos, nneg)),
        }
    }
}

#[test]
fn semantic_episodes_share_the_class_and_never_reuse_the_query() {
    let data = world(1);
    let mut sampler = Sampler::new(&data, SamplerOptions::default(), 7);
    for k in 0..200 {
        let shots = 1 + k % 3;
        let ep = sampler.sample(TaskMode::Semantic, shots, Points::Count(1 + k % 6)).unwrap();
        let Task::Class(c) = ep.task else { panic!("semantic task is a class") };
        assert_eq!(ep.shots(), shots);
        assert!(data.samples[ep.query].has_class(c));
        assert!(data.samples[ep.query].sequence.is_none());
        let mut seen = std::collections::BTreeSet::new();
        for item in &ep.support {
            assert_ne!(item.sample, ep.query);
            assert!(seen.insert(item.sample), "support images are distinct");
            assert!(data.samples[item.sample].has_class(c));
        }
        assert!(ep.query_target.count(1) > 0);
        check_annotations(&data, &ep);
    }
}

#[test]
fn interactive_support_is_the_query() {
    let data = world(2);
    let mut sampler = Sampler::new(&data, SamplerOptions::default(), 3);
    for k in 0..100 {
        let ep = sampler.sample(TaskMode::Interactive, 1, Points::Count(1 + k % 10)).unwrap();
        assert!(matches!(ep.task, Task::Instance(_)));
        assert_eq!(ep.support[0].sample, ep.query);
        check_annotations(&data, &ep);
    }
}

#[test]
fn video_support_frames_precede_the_query_in_one_sequence() {
    let data = world(3);
    let mut sampler = Sampler::new(&data, SamplerOptions::default(), 5);
    for k in 0..150 {
        let shots = 1 + k % 3;
        let ep = sampler.sample(TaskMode::Video, shots, Points::Dense).unwrap();
        let Task::Instance(id) = ep.task else { panic!("video task is an instance") };
        let q = &data.samples[ep.query];
        let seq = q.sequence.expect("query is a video frame");
        assert!(q.labels.count(id) > 0);
        let mut last = None;
        for item in &ep.support {
            let s = &data.samples[item.sample];
            assert_eq!(s.sequence, Some(seq));
            assert!(s.frame < q.frame);
            assert!(s.frame > last, "support frames are in order");
            last = s.frame;
            assert!(s.labels.count(id) > 0);
        }
        check_annotations(&data, &ep);
    }
}

#[test]
fn class_filter_and_query_class_minimum() {
    let data = world(4);
    let heldout = data.split.heldout.clone();
    let options = SamplerOptions { classes: Some(heldout.clone()), min_query_classes: 2 };
    let mut sampler = Sampler::new(&data, options, 1);
    for _ in 0..100 {
        let ep = sampler.sample(TaskMode::Semantic, 1, Points::Count(2)).unwrap();
        let Task::Class(c) = ep.task else { unreachable!() };
        assert!(heldout.contains(&c));
        let classes: std::collections::BTreeSet<_> = data.samples[ep.query].instance_classes.values().collect();
        assert!(classes.len() >= 2);
    }
    let options = SamplerOptions { classes: Some(vec![9999]), min_query_classes: 0 };
    let err = Sampler::new(&data, options, 1).sample(TaskMode::Semantic, 1, Points::Count(1)).unwrap_err();
    assert!(matches!(err, Error::DatasetTooSmall(_)));
}

#[test]
fn episode_stream_depends_only_on_the_seed() {
    let data = world(5);
    let draw = |seed| {
        let mut s = Sampler::new(&data, SamplerOptions::default(), seed);
        (0..30).map(|k| s.sample(TaskMode::Semantic, 1 + k % 2, Points::Count(5)).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn dataset_generation_and_files_are_deterministic() {
    assert_eq!(world(6), world(6));
    assert_ne!(world(6), world(7));
    let data = world(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&data, a.path()).unwrap();
    save_dataset(&data, b.path()).unwrap();
    for name in ["index.json", "images/000000.png", "labels/000007.png"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    assert_eq!(load_dataset(a.path()).unwrap(), data);
}

#[test]
fn corrupt_dataset_files_are_format_errors() {
    let data = world(8);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    std::fs::write(dir.path().join("labels/000003.png"), b"not a png").unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Format { path, .. } => assert!(path.ends_with("labels/000003.png")),
        e => panic!("expected a format error, got {e:?}"),
    }
    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(missing.path()).unwrap_err(), Error::Format { .. }));
}

fn map(rows: &[&str]) -> LabelMap {
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| match b {
        b'1' => 1,
        b'x' => 255,
        _ => 0,
    })).collect();
    LabelMap::new(rows.len(), rows[0].len(), data).unwrap()
}

#[test]
fn positive_iu_hand_cases() {
    // intersection 2, union 4
    assert_eq!(positive_iu(&map(&["110", "010"]), &map(&["011", "010"])).unwrap(), 0.5);
    assert_eq!(positive_iu(&map(&["000"]), &map(&["000"])).unwrap(), 1.0);
    assert_eq!(positive_iu(&map(&["111"]), &map(&["000"])).unwrap(), 0.0);
    assert_eq!(positive_iu(&map(&["1100"]), &map(&["1001"])).unwrap(), 1.0 / 3.0);
    assert_eq!(positive_iu(&map(&["000"]), &map(&["010"])).unwrap(), 0.0);
    // the ignored pixel counts for neither side
    assert_eq!(positive_iu(&map(&["11"]), &map(&["1x"])).unwrap(), 1.0);
    assert!(positive_iu(&map(&["1"]), &map(&["1", "1"])).is_err());
}
