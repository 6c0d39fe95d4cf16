use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{padded_target, sample_tensor};
use crate::autodiff::Tape;
use crate::episodes::{ClassId, Dataset, Points, Sampler, SamplerOptions, TaskMode};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::{forward, AnnotationSet, Fusion, GuidanceConfig, Head, Locality, ModelParams};
use crate::optim::{SgdConfig, SgdMomentum};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TaskMode,
    pub shots: usize,
    /// Each episode draws its annotation budget uniformly from this list.
    pub points: Vec<Points>,
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: GuidanceConfig,
    /// Probability that an interactive episode uses spatial guidance, so
    /// one model serves both localities.
    pub local_fraction: f64,
    /// Rescales each episode's gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Semantic,
            shots: 1,
            points: vec![Points::Count(1), Points::Count(2), Points::Count(5), Points::Count(10), Points::Dense],
            episodes: 5000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            model: GuidanceConfig::default(),
            local_fraction: 0.0,
            clip_norm: Some(0.5),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.episodes == 0 {
            return bad("training needs at least one episode");
        }
        if self.shots == 0 || self.points.is_empty() {
            return bad("training needs at least one support image and one point budget");
        }
        if !(0.0..=1.0).contains(&self.local_fraction) {
            return bad("local_fraction must lie in [0, 1]");
        }
        if self.local_fraction > 0.0 && (self.model.head != Head::FeatureFusion || self.model.fusion != Fusion::Late) {
            return bad("spatial guidance needs the late-fusion feature head");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        self.sgd().validate()?;
        self.model.validate()
    }

    /// Task classes training may draw from: the dataset's training split, or
    /// every class when the dataset has no split.
    pub fn classes(dataset: &Dataset) -> Option<Vec<ClassId>> {
        (!dataset.split.train.is_empty()).then(|| dataset.split.train.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Progress<'a, T> {
    pub episode: usize,
    /// Mean loss over the episodes since the previous report.
    pub running_loss: f64,
    pub params: &'a ModelParams<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Loss of every episode, in order.
    pub losses: Vec<f64>,
}

/// One training example drawn from the dataset.
pub(crate) struct Draw {
    pub support: Vec<(usize, AnnotationSet)>,
    pub query: usize,
    pub target: LabelMap,
    pub locality: Locality,
    pub description: String,
}

/// Serial SGD over `cfg.episodes` draws.
pub(crate) fn fit<T: Scalar>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    model: GuidanceConfig,
    mut on_progress: impl FnMut(&Progress<'_, T>),
    mut draw: impl FnMut(&mut Sampler<'_>) -> Result<Draw>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let sgd = cfg.sgd();
    let stride = model.feature_stride;
    let mut params = ModelParams::<T>::init(model, cfg.seed)?;
    let options = SamplerOptions { classes: TrainConfig::classes(dataset), min_query_classes: 0 };
    let mut sampler = Sampler::new(dataset, options, cfg.seed.wrapping_add(1));
    let mut opt = SgdMomentum::new();
    let mut losses = Vec::with_capacity(cfg.episodes);
    for episode in 1..=cfg.episodes {
        let d = draw(&mut sampler)?;
        let images: Vec<Tensor<T>> =
            d.support.iter().map(|(i, _)| sample_tensor(&dataset.samples[*i], stride)).collect::<Result<_>>()?;
        let query = sample_tensor::<T>(&dataset.samples[d.query], stride)?;
        let (_, h, w) = query.dims3()?;
        let target = padded_target(&d.target, (h, w));
        let support: Vec<(&Tensor<T>, &AnnotationSet)> = images.iter().zip(&d.support).map(|(t, (_, a))| (t, a)).collect();
        let step = {
            let mut tape = Tape::new();
            let pv = params.attach(&mut tape, true);
            let sup: Vec<_> = support.iter().map(|&(img, ann)| (tape.constant(img), ann)).collect();
            let q = tape.constant(&query);
            let fwd = forward(&mut tape, &pv, &params, &sup, q, d.locality)?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &target)?;
            let value = tape.value(loss).item().as_f64();
            if value.is_finite() {
                let mut grads = tape.backward(loss)?;
                Some((value, pv.gradients(&mut grads)?))
            } else {
                None
            }
        };
        let Some((loss, mut grads)) = step else {
            return Err(Error::NonFiniteLoss { episode, task: d.description, norms: params.norms() });
        };
        if let Some(clip) = cfg.clip_norm {
            clip_gradients(&mut grads, clip);
        }
        opt.step(&sgd, &mut params.tensors_mut(), &grads)?;
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { episode, task: d.description, norms: params.norms() });
        }
        losses.push(loss);
        if episode % cfg.log_every == 0 {
            let recent = &losses[episode - cfg.log_every..];
            on_progress(&Progress { episode, running_loss: recent.iter().sum::<f64>() / recent.len() as f64, params: &params });
        }
    }
    Ok(TrainOutcome { params, losses })
}

fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Episodic training of a guided network: sample, segment the query, take
/// dense cross-entropy on its target, step.
pub fn train_guided<T: Scalar>(dataset: &Dataset, cfg: &TrainConfig, on_progress: impl FnMut(&Progress<'_, T>)) -> Result<TrainOutcome<T>> {
    if !cfg.model.is_guided() {
        return Err(Error::Config("train_guided needs a guided head".into()));
    }
    fit(dataset, cfg, cfg.model.clone(), on_progress, |sampler| {
        let points = *cfg.points.choose(sampler.rng()).expect("validated non-empty");
        let local = cfg.local_fraction > 0.0 && cfg.mode == TaskMode::Interactive && sampler.rng().gen_bool(cfg.local_fraction);
        let ep = sampler.sample(cfg.mode, cfg.shots, points)?;
        Ok(Draw {
            description: format!("{:?} task {:?}, S={}, P={points}, query sample {}", ep.mode, ep.task, ep.shots(), ep.query),
            support: ep.support.into_iter().map(|s| (s.sample, s.annotations)).collect(),
            query: ep.query,
            target: ep.query_target,
            locality: if local { Locality::Identity } else { cfg.model.locality },
        })
    })
}
