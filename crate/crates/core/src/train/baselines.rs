use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::trainer::{fit, Draw};
use super::{Progress, TrainConfig, TrainOutcome};
use crate::autodiff::{Tape, IGNORE};
use crate::episodes::{Dataset, Points};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::{argmax_mask, forward, AnnotationSet, Head, Label, ModelParams};
use crate::optim::{SgdConfig, SgdMomentum};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trains the unguided foreground-background segmentor on the same query
/// images the guided sampler would draw, with every instance as foreground.
pub fn train_fgbg<T: Scalar>(dataset: &Dataset, cfg: &TrainConfig, on_progress: impl FnMut(&Progress<'_, T>)) -> Result<TrainOutcome<T>> {
    let model = cfg.model.clone().with_head(Head::Unguided);
    fit(dataset, cfg, model, on_progress, |sampler| {
        let ep = sampler.sample(cfg.mode, cfg.shots, Points::Count(1))?;
        let labels = &sampler.dataset().samples[ep.query].labels;
        let data = labels.data().iter().map(|&v| u8::from(v != 0)).collect();
        Ok(Draw {
            support: Vec::new(),
            query: ep.query,
            target: LabelMap::new(labels.height(), labels.width(), data)?,
            locality: cfg.model.locality,
            description: format!("foreground of sample {}", ep.query),
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl FinetuneConfig {
    /// A tenth of the training rate for 100 steps.
    pub fn from_training(cfg: &TrainConfig) -> Self {
        Self { steps: 100, lr: 0.1 * cfg.lr, momentum: cfg.momentum }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub mask: LabelMap,
    /// Support loss after the last step, `None` when `steps == 0`.
    pub final_loss: Option<f64>,
    pub elapsed_ms: f64,
}

fn point_target(ann: &AnnotationSet, size: (usize, usize)) -> Vec<u8> {
    let mut t = vec![IGNORE; size.0 * size.1];
    for p in ann.points() {
        t[p.row * size.1 + p.col] = u8::from(p.label == Label::Positive);
    }
    t
}

/// Copies an unguided model, fits it to the support's annotated pixels only,
/// and segments `query` with the result. Images must be stride multiples.
pub fn baseline_finetune<T: Scalar>(
    params: &ModelParams<T>,
    support: &[(&Tensor<T>, &AnnotationSet)],
    query: &Tensor<T>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    if params.config.head != Head::Unguided {
        return Err(Error::Unsupported("fine-tuning baseline starts from the unguided model".into()));
    }
    if support.iter().all(|(_, a)| a.is_empty()) {
        return Err(Error::contract("fine-tuning needs at least one annotated point"));
    }
    let sgd = SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: 0.0 };
    let start = Instant::now();
    let mut tuned = params.clone();
    let mut opt = SgdMomentum::new();
    let targets: Vec<Vec<u8>> = support
        .iter()
        .map(|(img, ann)| img.dims3().map(|(_, h, w)| point_target(ann, (h, w))))
        .collect::<Result<_>>()?;
    let mut final_loss = None;
    for _ in 0..cfg.steps {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let pv = tuned.attach(&mut tape, true);
            let mut parts = Vec::new();
            for ((img, ann), target) in support.iter().zip(&targets) {
                if ann.is_empty() {
                    continue;
                }
                let x = tape.constant(img);
                let fwd = forward(&mut tape, &pv, &tuned, &[], x, tuned.config.locality)?;
                parts.push(tape.softmax_cross_entropy(fwd.logits, target)?);
            }
            let weight = T::one() / T::from_count(parts.len());
            let weighted: Vec<_> = parts.into_iter().map(|p| (p, weight)).collect();
            let loss = tape.weighted_sum(&weighted)?;
            let value = tape.value(loss).item().as_f64();
            let mut g = tape.backward(loss)?;
            (value, pv.gradients(&mut g)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { episode: 0, task: "fine-tuning on support".into(), norms: tuned.norms() });
        }
        opt.step(&sgd, &mut tuned.tensors_mut(), &grads)?;
        final_loss = Some(loss);
    }
    let logits = {
        let mut tape = Tape::new();
        let pv = tuned.attach(&mut tape, false);
        let q = tape.constant(query);
        let fwd = forward(&mut tape, &pv, &tuned, &[], q, tuned.config.locality)?;
        tape.value(fwd.logits).clone()
    };
    Ok(FinetuneResult { mask: argmax_mask(&logits)?, final_loss, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 })
}
