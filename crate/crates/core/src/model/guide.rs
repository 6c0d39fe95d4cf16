//! Guidance: turning annotated support features into a task representation.

use super::annotations::{point_maps, rasterize, AnnotationSet, Point};
use super::config::{Fusion, Locality};
use super::network::{encode, run_encoder};
use super::params::{ModelParams, ParamVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pooled (`Global`) or spatial (`Local`) guidance, generic over the slot
/// type so the same shape serves plain tensors and tape handles.
#[derive(Clone, Debug, PartialEq)]
pub enum Guidance<V, T> {
    /// A zero count implies the matching vector is all zeros.
    Global { z_pos: V, z_neg: V, pos_count: T, neg_count: T },
    Local { g_pos: V, g_neg: V },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Representation<V, T> {
    pub guidance: Guidance<V, T>,
    pub feature_size: (usize, usize),
    pub shots_merged: usize,
}

pub type TaskRepresentation<T> = Representation<Tensor<T>, T>;
pub type GuideVars<T> = Representation<Var, T>;

impl<T: Scalar> TaskRepresentation<T> {
    /// Zero guidance for a support with no annotations at all.
    pub fn empty(channels: usize, feature_size: (usize, usize), locality: Locality) -> Self {
        let (h, w) = feature_size;
        let guidance = match locality {
            Locality::GlobalPool => Guidance::Global {
                z_pos: Tensor::zeros([channels]),
                z_neg: Tensor::zeros([channels]),
                pos_count: T::zero(),
                neg_count: T::zero(),
            },
            Locality::Identity => {
                Guidance::Local { g_pos: Tensor::zeros([channels, h, w]), g_neg: Tensor::zeros([channels, h, w]) }
            }
        };
        Self { guidance, feature_size, shots_merged: 0 }
    }

    pub fn locality(&self) -> Locality {
        match self.guidance {
            Guidance::Global { .. } => Locality::GlobalPool,
            Guidance::Local { .. } => Locality::Identity,
        }
    }

    /// Puts the tensors on `tape` as constants.
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a, T>) -> GuideVars<T> {
        let guidance = match &self.guidance {
            Guidance::Global { z_pos, z_neg, pos_count, neg_count } => Guidance::Global {
                z_pos: tape.constant(z_pos),
                z_neg: tape.constant(z_neg),
                pos_count: *pos_count,
                neg_count: *neg_count,
            },
            Guidance::Local { g_pos, g_neg } => Guidance::Local { g_pos: tape.constant(g_pos), g_neg: tape.constant(g_neg) },
        };
        Representation { guidance, feature_size: self.feature_size, shots_merged: self.shots_merged }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let vec = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        match &self.guidance {
            Guidance::Global { z_pos, z_neg, pos_count, neg_count } => serde_json::json!({
                "kind": "global",
                "z_pos": vec(z_pos),
                "z_neg": vec(z_neg),
                "pos_count": pos_count.as_f64(),
                "neg_count": neg_count.as_f64(),
                "feature_size": [self.feature_size.0, self.feature_size.1],
                "shots_merged": self.shots_merged,
            }),
            Guidance::Local { g_pos, .. } => serde_json::json!({
                "kind": "local",
                "channels": g_pos.shape()[0],
                "feature_size": [self.feature_size.0, self.feature_size.1],
                "shots_merged": self.shots_merged,
            }),
        }
    }
}

impl<T: Scalar> GuideVars<T> {
    pub fn detach(&self, tape: &Tape<'_, T>) -> TaskRepresentation<T> {
        let guidance = match self.guidance {
            Guidance::Global { z_pos, z_neg, pos_count, neg_count } => Guidance::Global {
                z_pos: tape.value(z_pos).clone(),
                z_neg: tape.value(z_neg).clone(),
                pos_count,
                neg_count,
            },
            Guidance::Local { g_pos, g_neg } => {
                Guidance::Local { g_pos: tape.value(g_pos).clone(), g_neg: tape.value(g_neg).clone() }
            }
        };
        Representation { guidance, feature_size: self.feature_size, shots_merged: self.shots_merged }
    }
}

/// Fuses features with both polarity masks by product, then pools
/// (`GlobalPool`) or keeps the spatial maps (`Identity`).
pub fn guide_late_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    features: Var,
    mask_pos: Var,
    mask_neg: Var,
    locality: Locality,
) -> Result<GuideVars<T>> {
    let (_, h, w) = tape.value(features).dims3()?;
    for m in [mask_pos, mask_neg] {
        if tape.value(m).shape() != [1, h, w] {
            return Err(Error::shape(format!("mask {:?} for {h}x{w} features", tape.value(m).shape())));
        }
    }
    let guidance = match locality {
        Locality::GlobalPool => {
            let (z_pos, pos_count) = tape.masked_average(features, mask_pos)?;
            let (z_neg, neg_count) = tape.masked_average(features, mask_neg)?;
            Guidance::Global { z_pos, z_neg, pos_count, neg_count }
        }
        Locality::Identity => Guidance::Local { g_pos: tape.mul(features, mask_pos)?, g_neg: tape.mul(features, mask_neg)? },
    };
    Ok(Representation { guidance, feature_size: (h, w), shots_merged: 1 })
}

pub fn guide_late<T: Scalar>(
    features: &Tensor<T>,
    mask_pos: &Tensor<T>,
    mask_neg: &Tensor<T>,
    locality: Locality,
) -> Result<TaskRepresentation<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(features);
    let (p, n) = (tape.constant(mask_pos), tape.constant(mask_neg));
    Ok(guide_late_var(&mut tape, f, p, n, locality)?.detach(&tape))
}

/// Early fusion: encodes the image stacked with its point planes through
/// φ_S and pools over all cells. Both polarity slots carry the same vector.
pub fn guide_early_var<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    pv: &ParamVars,
    params: &ModelParams<T>,
    image: Var,
    ann: &AnnotationSet,
) -> Result<GuideVars<T>> {
    let layers = pv
        .early_encoder
        .as_ref()
        .ok_or_else(|| Error::Config("guide_early needs an early encoder".into()))?;
    let (_, ih, iw) = tape.value(image).dims3()?;
    let (pos, neg) = point_maps(ann, (ih, iw))?;
    let (pos, neg) = (tape.constant_owned(pos), tape.constant_owned(neg));
    let stacked = tape.concat(&[image, pos, neg])?;
    let features = run_encoder(tape, stacked, layers, params.config.feature_stride)?;
    let (_, h, w) = tape.value(features).dims3()?;
    let ones = tape.constant_owned(Tensor::ones([1, h, w]));
    let (z, count) = tape.masked_average(features, ones)?;
    Ok(Representation {
        guidance: Guidance::Global { z_pos: z, z_neg: z, pos_count: count, neg_count: count },
        feature_size: (h, w),
        shots_merged: 1,
    })
}

pub fn guide_early<T: Scalar>(image: &Tensor<T>, ann: &AnnotationSet, params: &ModelParams<T>) -> Result<TaskRepresentation<T>> {
    if params.config.fusion != Fusion::Early {
        return Err(Error::Config("guide_early needs an early-fusion model".into()));
    }
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, false);
    let x = tape.constant(image);
    Ok(guide_early_var(&mut tape, &pv, params, x, ann)?.detach(&tape))
}

fn merge_polarity<T: Scalar>(tape: &mut Tape<'_, T>, parts: &[(Var, T)]) -> Result<(Var, T)> {
    let total = parts.iter().fold(T::zero(), |acc, &(_, c)| acc + c);
    if total == T::zero() {
        let c = tape.value(parts[0].0).len();
        return Ok((tape.constant_owned(Tensor::zeros([c])), total));
    }
    let weighted: Vec<(Var, T)> = parts.iter().filter(|p| p.1 > T::zero()).map(|&(v, c)| (v, c / total)).collect();
    Ok((tape.weighted_sum(&weighted)?, total))
}

/// Count-weighted mean per polarity; a single representation passes through.
pub fn merge_var<T: Scalar>(tape: &mut Tape<'_, T>, reps: &[GuideVars<T>]) -> Result<GuideVars<T>> {
    match reps {
        [] => Err(Error::contract("merge of no representations")),
        [one] => Ok(one.clone()),
        _ => {
            let mut pos = Vec::with_capacity(reps.len());
            let mut neg = Vec::with_capacity(reps.len());
            for r in reps {
                match r.guidance {
                    Guidance::Global { z_pos, z_neg, pos_count, neg_count } => {
                        pos.push((z_pos, pos_count));
                        neg.push((z_neg, neg_count));
                    }
                    Guidance::Local { .. } => return Err(Error::contract("spatial guidance cannot be merged across shots")),
                }
            }
            let c = tape.value(pos[0].0).len();
            if pos.iter().chain(&neg).any(|&(v, _)| tape.value(v).shape() != [c]) {
                return Err(Error::shape("merged representations differ in channel width"));
            }
            let (z_pos, pos_count) = merge_polarity(tape, &pos)?;
            let (z_neg, neg_count) = merge_polarity(tape, &neg)?;
            Ok(Representation {
                guidance: Guidance::Global { z_pos, z_neg, pos_count, neg_count },
                feature_size: reps[0].feature_size,
                shots_merged: reps.iter().map(|r| r.shots_merged).sum(),
            })
        }
    }
}

pub fn merge_shots<T: Scalar>(reps: &[TaskRepresentation<T>]) -> Result<TaskRepresentation<T>> {
    let mut tape = Tape::new();
    let vars: Vec<GuideVars<T>> = reps.iter().map(|r| r.attach(&mut tape)).collect();
    Ok(merge_var(&mut tape, &vars)?.detach(&tape))
}

/// Cached encoder output of one support image with its live annotations.
#[derive(Clone, Debug)]
pub struct SupportFrame<T> {
    pub features: Tensor<T>,
    pub annotations: AnnotationSet,
}

impl<T: Scalar> SupportFrame<T> {
    pub fn new(params: &ModelParams<T>, image: &Tensor<T>, annotations: AnnotationSet) -> Result<Self> {
        let mut tape = Tape::new();
        let pv = params.attach(&mut tape, false);
        let x = tape.constant(image);
        let f = encode(&mut tape, &pv, params, x)?;
        Ok(Self { features: tape.value(f).clone(), annotations })
    }
}

/// Edits to one frame's annotations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationDelta {
    pub clear: bool,
    pub remove: Vec<(usize, usize)>,
    pub add: Vec<Point>,
}

impl AnnotationDelta {
    pub fn is_empty(&self) -> bool {
        !self.clear && self.remove.is_empty() && self.add.is_empty()
    }

    /// Applies `clear`, then removals, then additions.
    pub fn apply(&self, ann: &mut AnnotationSet) -> Result<()> {
        let mut next = ann.clone();
        if self.clear {
            next.clear();
        }
        for &(r, c) in &self.remove {
            next.remove(r, c);
        }
        for &p in &self.add {
            next.insert(p)?;
        }
        *ann = next;
        Ok(())
    }
}

/// Guidance from cached features and the full current annotations of every
/// frame. Frames without annotations are skipped; with none left the result
/// is [`TaskRepresentation::empty`].
pub fn guidance_from_frames<T: Scalar>(
    stride: usize,
    locality: Locality,
    frames: &[SupportFrame<T>],
) -> Result<TaskRepresentation<T>> {
    let first = frames.first().ok_or_else(|| Error::contract("no support frames"))?;
    let (c, h, w) = first.features.dims3()?;
    let mut reps = Vec::new();
    for f in frames.iter().filter(|f| !f.annotations.is_empty()) {
        let (_, fh, fw) = f.features.dims3()?;
        let (pos, neg) = rasterize(&f.annotations, (fh, fw), stride)?;
        reps.push(guide_late(&f.features, &pos, &neg, locality)?);
    }
    if reps.is_empty() {
        return Ok(TaskRepresentation::empty(c, (h, w), locality));
    }
    merge_shots(&reps)
}

/// Applies `delta` to `frames[frame]` and recomputes guidance from the
/// cached features, without touching the encoder.
pub fn update_guidance<T: Scalar>(
    params: &ModelParams<T>,
    locality: Locality,
    frames: &mut [SupportFrame<T>],
    previous: &TaskRepresentation<T>,
    frame: usize,
    delta: &AnnotationDelta,
) -> Result<TaskRepresentation<T>> {
    if params.config.fusion == Fusion::Early {
        return Err(Error::Unsupported("early fusion needs a full forward pass per guidance change".into()));
    }
    let n = frames.len();
    let target = frames.get_mut(frame).ok_or_else(|| Error::contract(format!("frame {frame} of {n}")))?;
    if delta.is_empty() {
        return Ok(previous.clone());
    }
    delta.apply(&mut target.annotations)?;
    guidance_from_frames(params.config.feature_stride, locality, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(z_pos: Vec<f64>, pc: f64, z_neg: Vec<f64>, nc: f64) -> TaskRepresentation<f64> {
        Representation {
            guidance: Guidance::Global {
                z_pos: Tensor::vector(z_pos),
                z_neg: Tensor::vector(z_neg),
                pos_count: pc,
                neg_count: nc,
            },
            feature_size: (2, 2),
            shots_merged: 1,
        }
    }

    fn z(rep: &TaskRepresentation<f64>) -> (&[f64], &[f64], f64, f64) {
        match &rep.guidance {
            Guidance::Global { z_pos, z_neg, pos_count, neg_count } => (z_pos.data(), z_neg.data(), *pos_count, *neg_count),
            Guidance::Local { .. } => panic!("expected global"),
        }
    }

    #[test]
    fn late_global_pooling() {
        let f = Tensor::new([1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let pos = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let neg = Tensor::new([1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let rep = guide_late(&f, &pos, &neg, Locality::GlobalPool).unwrap();
        assert_eq!(z(&rep), (&[4.0][..], &[3.0][..], 2.0, 1.0));
        assert_eq!(rep.shots_merged, 1);

        let none = Tensor::zeros([1, 2, 2]);
        let rep = guide_late(&f, &pos, &none, Locality::GlobalPool).unwrap();
        assert_eq!(z(&rep).1, &[0.0]);
        assert_eq!(z(&rep).3, 0.0);
    }

    #[test]
    fn late_identity_selects_column() {
        let f = Tensor::from_fn([2, 2, 2], |i| i as f64 + 1.0);
        let pos = Tensor::new([1, 2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let rep = guide_late(&f, &pos, &Tensor::zeros([1, 2, 2]), Locality::Identity).unwrap();
        let Guidance::Local { g_pos, g_neg } = &rep.guidance else { panic!() };
        assert_eq!(g_pos.data(), &[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
        assert_eq!(g_neg.sum(), 0.0);
    }

    #[test]
    fn merge_is_count_weighted() {
        let m = merge_shots(&[global(vec![2.0, 4.0], 1.0, vec![0.0, 0.0], 0.0), global(vec![4.0, 8.0], 1.0, vec![0.0, 0.0], 0.0)])
            .unwrap();
        assert_eq!(z(&m).0, &[3.0, 6.0]);
        assert_eq!(m.shots_merged, 2);
        let m = merge_shots(&[global(vec![2.0], 3.0, vec![1.0], 1.0), global(vec![6.0], 1.0, vec![0.0], 0.0)]).unwrap();
        assert_eq!(z(&m), (&[3.0][..], &[1.0][..], 4.0, 1.0));
        let a = global(vec![1.5, -2.0], 2.0, vec![0.5, 0.25], 3.0);
        assert_eq!(merge_shots(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn merge_rejects_local() {
        let local = Representation {
            guidance: Guidance::Local { g_pos: Tensor::zeros([1, 2, 2]), g_neg: Tensor::zeros([1, 2, 2]) },
            feature_size: (2, 2),
            shots_merged: 1,
        };
        let g = global(vec![1.0], 1.0, vec![1.0], 1.0);
        assert!(matches!(merge_shots(&[g, local]), Err(Error::Contract(_))));
    }

    #[test]
    fn delta_apply_is_atomic() {
        let mut ann = AnnotationSet::new(4, 4);
        let bad = AnnotationDelta {
            add: vec![Point::new(0, 0, super::super::annotations::Label::Positive), Point::new(9, 9, super::super::annotations::Label::Positive)],
            ..Default::default()
        };
        assert!(bad.apply(&mut ann).is_err());
        assert!(ann.is_empty());
    }
}
