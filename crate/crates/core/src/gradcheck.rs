//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the backward rules it verifies. Perturbations that flip the
//! sign of any ReLU input are reported as kinks and excluded: a central
//! difference straddling a kink does not estimate a derivative.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, IGNORE};
use crate::error::Result;
use crate::model::{forward, AnnotationSet, GuidanceConfig, Label, ModelParams, Point};
use crate::tensor::Tensor;

/// Relative error with a small floor so near-zero pairs compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because the stencil crossed a ReLU kink.
    pub kinks: usize,
    /// `(input index, flat entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `backward` against central differences with step `eps`.
///
/// `loss` builds a scalar from the leaves it receives (one per `inputs`
/// entry, all trainable). `per_input` caps the entries sampled from each
/// input; `None` checks every entry.
pub fn check<F, R>(inputs: &[Tensor<f64>], loss: F, eps: f64, per_input: Option<usize>, rng: &mut R) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t)).collect();
        let l = loss(&mut tape, &vars)?;
        Ok((tape.value(l).item(), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let l = loss(&mut tape, &vars)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(l)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("trainable leaf").clone();
        let n = inputs[i].len();
        let entries: Vec<usize> = match per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (lp, pp) = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let (lm, pm) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant_owned(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Every differentiable tape operation on random shapes drawn from `seed`,
/// each checked on all entries with step `1e-3`.
pub fn primitives(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6));
    let x = uniform(&mut rng, &[c, h, w]);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        out.push((name, check(&inputs, f, 1e-3, None, &mut r)?));
        Ok(())
    };

    let k = uniform(&mut rng, &[2, c, 3, 3]);
    let b = uniform(&mut rng, &[2]);
    let stride = rng.gen_range(1..3);
    run("conv2d", vec![x.clone(), k, b], &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
        project(t, y, seed)
    })?;
    // inputs near zero would put the stencil across the kink
    let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    run("relu", vec![xr], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })?;
    let m = Tensor::from_fn([1, h, w], |_| rng.gen_range(0.0..1.0));
    run("mul", vec![x.clone(), m.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })?;
    let other = uniform(&mut rng, &[2, h, w]);
    run("concat", vec![x.clone(), other], &|t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y, seed)
    })?;
    let (h2, w2) = (rng.gen_range(1..9), rng.gen_range(1..9));
    run("bilinear_resize", vec![x.clone()], &|t, v| {
        let y = t.bilinear_resize(v[0], h2, w2)?;
        project(t, y, seed)
    })?;
    run("masked_average", vec![x.clone()], &|t, v| {
        let mv = t.constant_owned(m.clone());
        let (z, _) = t.masked_average(v[0], mv)?;
        project(t, z, seed)
    })?;
    let logits = uniform(&mut rng, &[2, h, w]);
    let target: Vec<u8> = (0..h * w).map(|i| if i % 5 == 4 { IGNORE } else { rng.gen_range(0..2) }).collect();
    run("softmax_cross_entropy", vec![logits], &|t, v| t.softmax_cross_entropy(v[0], &target))?;
    let z = uniform(&mut rng, &[c]);
    let kz = uniform(&mut rng, &[2, c + 2, 3, 3]);
    run("tiled_conv", vec![z, kz], &|t, v| {
        let y = t.tiled_conv(v[0], v[1], 1, h, w)?;
        project(t, y, seed)
    })?;
    let (pos, neg) = (uniform(&mut rng, &[c]), uniform(&mut rng, &[c]));
    run("prototype_logits", vec![x.clone(), pos, neg], &|t, v| {
        let y = t.prototype_logits(v[0], v[1], v[2], 0.7)?;
        project(t, y, seed)
    })?;
    let xin = uniform(&mut rng, &[5]);
    let wl = uniform(&mut rng, &[4, 5]);
    let bl = uniform(&mut rng, &[4]);
    run("linear+narrow+reshape", vec![xin, wl, bl], &|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        let head = t.narrow(y, 0, 1, 2)?;
        let r = t.reshape(head, &[2, 1, 1])?;
        project(t, r, seed)
    })?;
    let (p1, p2) = (uniform(&mut rng, &[3]), uniform(&mut rng, &[3]));
    run("weighted_sum+add", vec![p1, p2], &|t, v| {
        let y = t.weighted_sum(&[(v[0], 0.25), (v[1], 0.75)])?;
        let s = t.add(y, v[0])?;
        project(t, s, seed)
    })?;
    Ok(out)
}

/// The whole network, support image and query image included, under
/// `config` on `size`-pixel images: one support with a few points, a random
/// query target, and cross-entropy loss. At most `per_input` entries of each
/// tensor are sampled.
pub fn network(config: GuidanceConfig, seed: u64, size: usize, per_input: usize) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = params.config.image_channels;
    let support = Tensor::from_fn([c, size, size], |_| rng.gen_range(-0.5..0.5));
    let query = Tensor::from_fn([c, size, size], |_| rng.gen_range(-0.5..0.5));
    let mut ann = AnnotationSet::new(size, size);
    for label in [Label::Positive, Label::Positive, Label::Negative, Label::Negative] {
        ann.insert(Point::new(rng.gen_range(0..size), rng.gen_range(0..size), label))?;
    }
    let target: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..2)).collect();
    let locality = params.config.locality;
    let n = params.tensors().len();
    let mut inputs: Vec<Tensor<f64>> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.extend([support, query]);
    let loss = |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
        let pv = params.bind(&v[..n])?;
        let fwd = forward(t, &pv, &params, &[(v[n], &ann)], v[n + 1], locality)?;
        t.softmax_cross_entropy(fwd.logits, &target)
    };
    check(&inputs, loss, 1e-4, Some(per_input), &mut rng)
}
