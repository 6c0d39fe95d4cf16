use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{mean_std, positive_iu, sample_tensor};
use crate::episodes::{ClassId, Dataset, Episode, Points, Sampler, SamplerOptions, TaskMode};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::{
    argmax_mask, guidance_from_frames, guide_early, infer, merge_shots, AnnotationSet, Fusion, Locality, ModelParams,
    QueryCache, SupportFrame,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which classes evaluation tasks come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskClasses {
    /// The dataset's held-out split (every class when it has none).
    #[default]
    Heldout,
    Train,
    All,
}

impl TaskClasses {
    fn resolve(self, dataset: &Dataset) -> Option<Vec<ClassId>> {
        let pick = |v: &Vec<ClassId>| (!v.is_empty()).then(|| v.clone());
        match self {
            TaskClasses::Heldout => pick(&dataset.split.heldout),
            TaskClasses::Train => pick(&dataset.split.train),
            TaskClasses::All => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: TaskMode,
    pub shots: Vec<usize>,
    pub points: Vec<Points>,
    pub episodes: usize,
    pub seed: u64,
    pub classes: TaskClasses,
    /// Restricts queries to images showing at least this many classes.
    pub min_query_classes: usize,
    /// Overrides the checkpoint's locality.
    pub locality: Option<Locality>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Semantic,
            shots: vec![1],
            points: vec![Points::Count(1), Points::Count(2), Points::Count(5), Points::Count(10), Points::Dense],
            episodes: 200,
            seed: 0,
            classes: TaskClasses::Heldout,
            min_query_classes: 0,
            locality: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(rename = "S")]
    pub shots: usize,
    #[serde(rename = "P")]
    pub points: Points,
    pub mean_iu: f64,
    pub std_iu: f64,
    pub n: usize,
    /// Mean wall-clock of building the task representation, per episode.
    pub guidance_ms: f64,
    /// Mean wall-clock of segmenting the query given the representation.
    pub infer_ms: f64,
    pub seed: u64,
    /// Per-episode IU, in episode order.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub cells: Vec<Cell>,
    pub baselines: BTreeMap<String, Vec<Cell>>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub mask: LabelMap,
    pub guidance_ms: f64,
    pub infer_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Segments `query` from `support` through the cached-feature path and
/// crops the mask to `size`. Unguided models ignore the support.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    locality: Locality,
    support: &[(&Tensor<T>, &AnnotationSet)],
    query: &Tensor<T>,
    size: (usize, usize),
) -> Result<Prediction> {
    let cfg = &params.config;
    let start = Instant::now();
    let rep = if !cfg.is_guided() {
        None
    } else if cfg.fusion == Fusion::Early {
        let reps = support.iter().map(|&(img, ann)| guide_early(img, ann, params)).collect::<Result<Vec<_>>>()?;
        Some(merge_shots(&reps)?)
    } else {
        let frames = support
            .iter()
            .map(|&(img, ann)| SupportFrame::new(params, img, ann.clone()))
            .collect::<Result<Vec<_>>>()?;
        Some(guidance_from_frames(cfg.feature_stride, locality, &frames)?)
    };
    let guidance_ms = if rep.is_some() { ms(start) } else { 0.0 };
    let start = Instant::now();
    let cache = QueryCache::new(params, query)?;
    let logits = infer(params, &cache, rep.as_ref())?;
    let mask = argmax_mask(&logits)?.crop(size.0, size.1)?;
    Ok(Prediction { mask, guidance_ms, infer_ms: ms(start) })
}

/// Runs `episode` through `params` and scores the query.
pub(crate) fn score_episode<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    locality: Locality,
    episode: &Episode,
) -> Result<(f64, Prediction)> {
    let stride = params.config.feature_stride;
    let images: Vec<Tensor<T>> =
        episode.support.iter().map(|s| sample_tensor(&dataset.samples[s.sample], stride)).collect::<Result<_>>()?;
    let support: Vec<_> = images.iter().zip(&episode.support).map(|(t, s)| (t, &s.annotations)).collect();
    let query = sample_tensor::<T>(&dataset.samples[episode.query], stride)?;
    let pred = predict(params, locality, &support, &query, episode.query_target.size())?;
    Ok((positive_iu(&pred.mask, &episode.query_target)?, pred))
}

/// Mean IU of each model over the same `cfg.episodes` episodes at one
/// `(S, P)`. The episode stream depends only on `cfg.seed`.
pub fn evaluate_cell<T: Scalar>(
    models: &[&ModelParams<T>],
    dataset: &Dataset,
    cfg: &EvalConfig,
    shots: usize,
    points: Points,
) -> Result<Vec<Cell>> {
    let options = SamplerOptions { classes: cfg.classes.resolve(dataset), min_query_classes: cfg.min_query_classes };
    let mut sampler = Sampler::new(dataset, options, cfg.seed);
    let mut scores = vec![Vec::with_capacity(cfg.episodes); models.len()];
    let mut times = vec![(0.0, 0.0); models.len()];
    for _ in 0..cfg.episodes {
        let ep = sampler.sample(cfg.mode, shots, points)?;
        for (k, m) in models.iter().enumerate() {
            let (iu, pred) = score_episode(m, dataset, cfg.locality.unwrap_or(m.config.locality), &ep)?;
            scores[k].push(iu);
            times[k].0 += pred.guidance_ms;
            times[k].1 += pred.infer_ms;
        }
    }
    let n = cfg.episodes;
    Ok(scores
        .into_iter()
        .zip(times)
        .map(|(scores, (g, i))| {
            let (mean_iu, std_iu) = mean_std(&scores);
            Cell {
                shots,
                points,
                mean_iu,
                std_iu,
                n,
                guidance_ms: g / n as f64,
                infer_ms: i / n as f64,
                seed: cfg.seed,
                scores,
            }
        })
        .collect())
}

/// Evaluates `params` over the `shots x points` grid; each named baseline
/// is scored on exactly the same episodes.
pub fn eval_fewshot<T: Scalar>(
    params: &ModelParams<T>,
    baselines: &[(&str, &ModelParams<T>)],
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.episodes == 0 || cfg.shots.is_empty() || cfg.points.is_empty() || cfg.shots.contains(&0) {
        return Err(Error::Config("evaluation needs episodes, shot counts >= 1, and point budgets".into()));
    }
    let mut models = vec![params];
    models.extend(baselines.iter().map(|(_, m)| *m));
    let mut cells = Vec::new();
    let mut base: BTreeMap<String, Vec<Cell>> = baselines.iter().map(|(n, _)| (n.to_string(), Vec::new())).collect();
    for &s in &cfg.shots {
        for &p in &cfg.points {
            let mut row = evaluate_cell(&models, dataset, cfg, s, p)?.into_iter();
            cells.push(row.next().expect("guided cell"));
            for ((name, _), cell) in baselines.iter().zip(row) {
                base.get_mut(*name).expect("named").push(cell);
            }
        }
    }
    let config = serde_json::json!({
        "model": params.config,
        "eval": cfg,
        "baselines": baselines.iter().map(|(n, m)| (n.to_string(), &m.config)).collect::<BTreeMap<_, _>>(),
    });
    Ok(EvalReport { config, cells, baselines: base })
}
