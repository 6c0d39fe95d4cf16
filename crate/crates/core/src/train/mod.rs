//! Episodic training, the baselines, the positive-IU metric and the
//! accuracy and timing benchmarks.

mod baselines;
mod eval;
mod metrics;
mod timing;
mod trainer;

pub use baselines::{baseline_finetune, train_fgbg, FinetuneConfig, FinetuneResult};
pub use eval::{eval_fewshot, evaluate_cell, predict, Cell, EvalConfig, EvalReport, Prediction, TaskClasses};
pub use metrics::{mean_std, median, positive_iu, variance};
pub use timing::{benchmark_timing, time_full_forward, timing_episode, TimingReport};
pub use trainer::{train_guided, Progress, TrainConfig, TrainOutcome};

use crate::autodiff::IGNORE;
use crate::episodes::DenseSample;
use crate::error::Result;
use crate::labels::LabelMap;
use crate::model::input_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The sample's image as network input, padded to a stride multiple.
pub fn sample_tensor<T: Scalar>(sample: &DenseSample, stride: usize) -> Result<Tensor<T>> {
    input_tensor(&sample.image, stride)
}

/// `target` padded with [`IGNORE`] on the bottom and right to `size`.
pub(crate) fn padded_target(target: &LabelMap, size: (usize, usize)) -> Vec<u8> {
    let (h, w) = target.size();
    if (h, w) == size {
        return target.data().to_vec();
    }
    let mut out = vec![IGNORE; size.0 * size.1];
    for r in 0..h {
        out[r * size.1..r * size.1 + w].copy_from_slice(&target.data()[r * w..(r + 1) * w]);
    }
    out
}
