mod common;

use std::sync::Arc;
use std::thread;

use guidedseg_core::image::RgbImage;
use guidedseg_core::model::{AnnotationDelta, AnnotationSet, Label, Locality, Point};
use guidedseg_service::{Click, Limits, LocalityMode, Polarity, ServiceError, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn click(x: usize, y: usize, positive: bool) -> Click {
    Click { x, y, label: if positive { Polarity::Positive } else { Polarity::Negative } }
}

/// Replays random edits against a store and a plain annotation model, and
/// compares every frame's mask with a full forward pass after each edit.
/// Returns how many compared masks were neither empty nor full.
fn shadow_run(store: &Store, images: &[RgbImage], mode: LocalityMode, seed: u64, steps: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(1..=2.min(images.len()));
    let id = store.create("shapes", &images[..start], mode).unwrap().session_id;
    let (h, w) = images[0].size();
    let mut anns: Vec<AnnotationSet> = vec![AnnotationSet::new(h, w); start];
    let mut mixed = 0;
    for step in 0..steps {
        let frames = anns.len();
        let locality = match mode {
            LocalityMode::Auto if frames == 1 => Locality::Identity,
            LocalityMode::Identity => Locality::Identity,
            _ => Locality::GlobalPool,
        };
        let frame = rng.gen_range(0..frames);
        match rng.gen_range(0..10) {
            0 if frames < images.len() => {
                assert_eq!(store.append_frame(&id, &images[frames]).unwrap(), frames);
                anns.push(AnnotationSet::new(h, w));
            }
            1 => {
                store.clear(&id, Some(frame)).unwrap();
                anns[frame].clear();
            }
            2 => {
                store.clear(&id, None).unwrap();
                anns.iter_mut().for_each(AnnotationSet::clear);
            }
            3 | 4 => {
                let existing: Vec<Point> = anns[frame].points().collect();
                let remove: Vec<(usize, usize)> = existing.iter().filter(|_| rng.gen_bool(0.5)).map(|p| (p.row, p.col)).collect();
                let delta = AnnotationDelta { remove, ..Default::default() };
                let mut next = anns[frame].clone();
                delta.apply(&mut next).unwrap();
                store.edit(&id, frame, &delta).unwrap();
                anns[frame] = next;
            }
            _ => {
                let n = rng.gen_range(1..4);
                let oob = rng.gen_bool(0.1);
                let clicks: Vec<Click> = (0..n)
                    .map(|k| {
                        let x = if oob && k == n - 1 { w + rng.gen_range(0..3) } else { rng.gen_range(0..w) };
                        click(x, rng.gen_range(0..h), rng.gen_bool(0.5))
                    })
                    .collect();
                let mut next = anns[frame].clone();
                for c in clicks.iter().filter(|c| c.x < w) {
                    next.insert(Point::new(c.y, c.x, c.label.into())).unwrap();
                }
                let others = anns.iter().enumerate().any(|(i, a)| i != frame && !a.is_empty());
                match store.annotate(&id, frame, &clicks) {
                    Ok(_) => {
                        assert!(!oob);
                        assert!(locality == Locality::GlobalPool || !others);
                        anns[frame] = next;
                    }
                    Err(ServiceError::BadRequest { point: Some(i), .. }) => assert!(oob && i == n - 1),
                    Err(ServiceError::BadRequest { point: None, .. }) => assert!(locality == Locality::Identity && others),
                    Err(e) => panic!("step {step}: {e}"),
                }
            }
        }
        for (k, _) in anns.iter().enumerate() {
            let got = store.mask(&id, k).unwrap();
            match common::shadow_mask(store.params(), locality_now(store, &id), &images[..anns.len()], &anns, k) {
                Some((expected, unannotated)) => {
                    assert_eq!(got.mask, expected, "seed {seed} step {step} frame {k}");
                    assert_eq!(got.degenerate, unannotated);
                    let on = expected.count(1);
                    mixed += usize::from(on > 0 && on < h * w);
                }
                None => {
                    assert!(got.degenerate);
                    assert!(got.mask.data().iter().all(|&v| v == 0));
                }
            }
        }
    }
    mixed
}

fn locality_now(store: &Store, id: &str) -> Locality {
    store.summary(id).unwrap().locality
}

#[test]
fn masks_match_full_forward_under_random_edits() {
    let data = common::world();
    let store = common::store(Limits { max_frames: 5, max_sessions: 64 });
    let frames = common::frames(&data);
    let mut mixed = 0;
    for seed in 0..12 {
        let mode = [LocalityMode::Auto, LocalityMode::Global, LocalityMode::Identity][seed as usize % 3];
        mixed += shadow_run(&store, &frames, mode, seed, 12);
    }
    assert!(mixed > 0, "every compared mask was uniform");
}

#[test]
fn add_then_remove_restores_the_representation_exactly() {
    let data = common::world();
    let store = common::store(Limits::default());
    let images = common::frames(&data);
    let id = store.create("shapes", &images[..2], LocalityMode::Auto).unwrap().session_id;
    store.annotate(&id, 0, &[click(10, 10, true), click(50, 50, false)]).unwrap();
    store.annotate(&id, 1, &[click(30, 12, true)]).unwrap();
    let session = store.session(&id).unwrap();
    let before = session.read().unwrap().representation().to_json();
    let mask_before = store.mask(&id, 1).unwrap().rle.clone();
    store.annotate(&id, 1, &[click(40, 40, false)]).unwrap();
    assert_ne!(session.read().unwrap().representation().to_json(), before);
    store.edit(&id, 1, &AnnotationDelta { remove: vec![(40, 40)], ..Default::default() }).unwrap();
    assert_eq!(session.read().unwrap().representation().to_json(), before);
    assert_eq!(store.mask(&id, 1).unwrap().rle, mask_before);
}

#[test]
fn a_repeated_pixel_takes_the_new_label() {
    let data = common::world();
    let store = common::store(Limits::default());
    let id = store.create("shapes", &[data.samples[0].image.clone()], LocalityMode::Auto).unwrap().session_id;
    store.annotate(&id, 0, &[click(5, 6, true)]).unwrap();
    store.annotate(&id, 0, &[click(5, 6, false)]).unwrap();
    let s = store.session(&id).unwrap();
    assert_eq!(s.read().unwrap().annotations(0).unwrap().get(6, 5), Some(Label::Negative));
}

#[test]
fn interleaved_sessions_do_not_interact() {
    let data = common::world();
    let store = Arc::new(common::store(Limits::default()));
    let images: Vec<RgbImage> = data.samples[..4].iter().map(|s| s.image.clone()).collect();
    let edits = |seed: u64| -> Vec<Vec<Click>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8).map(|_| (0..2).map(|_| click(rng.gen_range(0..64), rng.gen_range(0..64), rng.gen_bool(0.5))).collect()).collect()
    };
    // reference: each session alone
    let alone: Vec<Vec<Vec<u32>>> = (0..4)
        .map(|k| {
            let id = store.create("shapes", &images[k..=k], LocalityMode::Global).unwrap().session_id;
            edits(k as u64).iter().map(|e| store.annotate(&id, 0, e).unwrap().mask_rle).collect()
        })
        .collect();
    let ids: Vec<String> =
        (0..4).map(|k| store.create("shapes", &images[k..=k], LocalityMode::Global).unwrap().session_id).collect();
    let handles: Vec<_> = ids
        .into_iter()
        .enumerate()
        .map(|(k, id)| {
            let store = store.clone();
            thread::spawn(move || edits(k as u64).iter().map(|e| store.annotate(&id, 0, e).unwrap().mask_rle).collect::<Vec<_>>())
        })
        .collect();
    for (k, h) in handles.into_iter().enumerate() {
        assert_eq!(h.join().unwrap(), alone[k], "session {k}");
    }
}

#[test]
fn identity_sessions_take_annotations_on_one_frame() {
    let data = common::world();
    let store = common::store(Limits::default());
    let images = common::frames(&data);
    let id = store.create("shapes", &images[..2], LocalityMode::Identity).unwrap().session_id;
    store.annotate(&id, 0, &[click(3, 3, true)]).unwrap();
    let err = store.annotate(&id, 1, &[click(3, 3, true)]).unwrap_err();
    assert!(matches!(err, ServiceError::BadRequest { point: None, .. }));
    assert!(store.session(&id).unwrap().read().unwrap().annotations(1).unwrap().is_empty());
    store.clear(&id, Some(0)).unwrap();
    store.annotate(&id, 1, &[click(3, 3, true)]).unwrap();
}

#[test]
fn mismatched_frame_sizes_and_checkpoints_are_rejected() {
    let data = common::world();
    let store = common::store(Limits::default());
    let id = store.create("shapes", &[data.samples[0].image.clone()], LocalityMode::Auto).unwrap().session_id;
    let small = RgbImage::new(8, 8, vec![0; 8 * 8 * 3]).unwrap();
    assert!(matches!(store.append_frame(&id, &small), Err(ServiceError::BadRequest { .. })));
    assert_eq!(store.summary(&id).unwrap().frames, 1);
    let early = guidedseg_core::ModelParams::<f32>::init(
        guidedseg_core::GuidanceConfig::default().with_fusion(guidedseg_core::model::Fusion::Early),
        0,
    )
    .unwrap();
    assert!(Store::new(early, "early", Limits::default()).is_err());
}
