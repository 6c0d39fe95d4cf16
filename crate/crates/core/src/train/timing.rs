use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{median, sample_tensor, variance};
use crate::episodes::{Dataset, Episode, Points, Sampler, SamplerOptions, TaskMode};
use crate::error::{Error, Result};
use crate::model::{
    guidance_from_frames, infer, segment, update_guidance, AnnotationDelta, AnnotationSet, Fusion, Label, ModelParams,
    Point, QueryCache, SupportFrame,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub repetitions: usize,
    pub full_forward_ms: f64,
    pub full_forward_var: f64,
    pub update_ms: f64,
    pub update_var: f64,
    /// `full_forward_ms / update_ms`.
    pub ratio: f64,
    pub image_size: (usize, usize),
    pub support_is_query: bool,
}

/// A cross-image episode: video mode when the dataset has sequences,
/// semantic otherwise, one support image with two points.
pub fn timing_episode(dataset: &Dataset, seed: u64) -> Result<Episode> {
    let mut sampler = Sampler::new(dataset, SamplerOptions::default(), seed);
    let mode = if dataset.sequences().is_empty() { TaskMode::Semantic } else { TaskMode::Video };
    sampler.sample(mode, 1, Points::Count(2))
}

fn ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn load<T: Scalar>(params: &ModelParams<T>, dataset: &Dataset, episode: &Episode) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let stride = params.config.feature_stride;
    let support =
        episode.support.iter().map(|s| sample_tensor(&dataset.samples[s.sample], stride)).collect::<Result<_>>()?;
    Ok((support, sample_tensor(&dataset.samples[episode.query], stride)?))
}

/// Median full `segment` time over `reps` runs after a short warm-up.
pub fn time_full_forward<T: Scalar>(params: &ModelParams<T>, dataset: &Dataset, episode: &Episode, reps: usize) -> Result<Vec<f64>> {
    let (images, query) = load(params, dataset, episode)?;
    let support: Vec<(&Tensor<T>, &AnnotationSet)> =
        images.iter().zip(&episode.support).map(|(t, s)| (t, &s.annotations)).collect();
    for _ in 0..3 {
        black_box(segment(params, &support, &query)?);
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut r = Ok(());
        out.push(ms(|| r = segment(params, &support, &query).map(|s| drop(black_box(s)))));
        r?;
    }
    Ok(out)
}

/// Full forward against one guidance edit plus head-only re-inference on
/// cached features. Each edit adds or removes one negative point, so every
/// update recomputes guidance. The first run of every block is a warm-up.
pub fn benchmark_timing<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    episode: &Episode,
    reps: usize,
) -> Result<TimingReport> {
    if params.config.fusion == Fusion::Early {
        return Err(Error::Unsupported("early fusion has no guidance-only update path".into()));
    }
    if reps < 20 {
        return Err(Error::Config("timing needs at least 20 repetitions".into()));
    }
    let (images, query) = load(params, dataset, episode)?;
    let support: Vec<(&Tensor<T>, &AnnotationSet)> =
        images.iter().zip(&episode.support).map(|(t, s)| (t, &s.annotations)).collect();
    let locality = params.config.locality;
    let mut frames = support
        .iter()
        .map(|&(img, ann)| SupportFrame::new(params, img, ann.clone()))
        .collect::<Result<Vec<_>>>()?;
    let cache = QueryCache::new(params, &query)?;
    let mut rep = guidance_from_frames(params.config.feature_stride, locality, &frames)?;

    let ann = &episode.support[0].annotations;
    let (h, w) = ann.image_size();
    let free = (0..h * w).map(|i| (i / w, i % w)).find(|&(r, c)| ann.get(r, c).is_none());
    let (r, c) = free.ok_or_else(|| Error::contract("support image is fully annotated"))?;
    let add = AnnotationDelta { add: vec![Point::new(r, c, Label::Negative)], ..Default::default() };
    let remove = AnnotationDelta { remove: vec![(r, c)], ..Default::default() };

    // Each path runs in its own block of repetitions, so both are timed in
    // steady state; blocks alternate to spread clock drift over both.
    const BLOCK: usize = 10;
    let mut full = Vec::with_capacity(reps);
    let mut update = Vec::with_capacity(reps);
    let mut edits = 0usize;
    while update.len() < reps {
        let n = BLOCK.min(reps - update.len());
        for i in 0..=n {
            let delta = if edits % 2 == 0 { &add } else { &remove };
            edits += 1;
            let mut res = Ok(());
            let u = ms(|| {
                res = update_guidance(params, locality, &mut frames, &rep, 0, delta)
                    .and_then(|next| infer(params, &cache, Some(&next)).map(|l| (next, l)))
                    .map(|(next, l)| {
                        black_box(l);
                        rep = next;
                    })
            });
            res?;
            if i > 0 {
                update.push(u);
            }
        }
        for i in 0..=n {
            let mut res = Ok(());
            let f = ms(|| res = segment(params, &support, &query).map(|s| drop(black_box(s))));
            res?;
            if i > 0 {
                full.push(f);
            }
        }
    }
    let (full_ms, update_ms) = (median(&full), median(&update));
    Ok(TimingReport {
        repetitions: reps,
        full_forward_ms: full_ms,
        full_forward_var: variance(&full),
        update_ms,
        update_var: variance(&update),
        ratio: full_ms / update_ms,
        image_size: (query.shape()[1], query.shape()[2]),
        support_is_query: episode.support.iter().any(|s| s.sample == episode.query),
    })
}
