//! Encoder, heads and the composed guided forward pass.
//!
//! The first decoder layer splits into a query term `conv(features, W[:, :C])`
//! and a guidance term: a tiled-vector convolution for pooled guidance, a
//! sparse convolution of the masked maps for spatial guidance. The query term (the decoder "prefix") depends only on the query
//! image, so interactive sessions compute it once per frame and every later
//! guidance change reruns only the guidance term and the decoder tail.

use super::annotations::{rasterize, AnnotationSet};
use super::config::{Fusion, Head, Locality};
use super::guide::{guide_early_var, guide_late_var, merge_var, GuideVars, Guidance, TaskRepresentation};
use super::params::{ConvVars, ModelParams, ParamVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// conv + relu per layer. Input extents must be multiples of `stride`.
pub(crate) fn run_encoder<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, layers: &[ConvVars], stride: usize) -> Result<Var> {
    let (_, h, w) = tape.value(x).dims3()?;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::contract(format!("{h}x{w} input is not a multiple of feature stride {stride}; pad first")));
    }
    let mut x = x;
    for l in layers {
        let y = tape.conv2d(x, l.weight, Some(l.bias), l.stride, l.pad)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// φ applied to a `[image_channels, H, W]` image.
pub fn encode<T: Scalar>(tape: &mut Tape<'_, T>, pv: &ParamVars, params: &ModelParams<T>, image: Var) -> Result<Var> {
    let c = tape.value(image).dims3()?.0;
    if c != params.config.image_channels {
        return Err(Error::shape(format!("{c}-channel image for a {}-channel encoder", params.config.image_channels)));
    }
    run_encoder(tape, image, &pv.encoder, params.config.feature_stride)
}

pub fn extract_features<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, false);
    let x = tape.constant(image);
    let f = encode(&mut tape, &pv, params, x)?;
    Ok(tape.value(f).clone())
}

/// Zero-pads bottom and right up to multiples of `stride`.
pub fn pad_to_multiple<T: Scalar>(image: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    let (h2, w2) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    if (h2, w2) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros([c, h2, w2]);
    for ch in 0..c {
        for r in 0..h {
            let src = &image.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
            out.data_mut()[(ch * h2 + r) * w2..(ch * h2 + r) * w2 + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Network input for an image: pixel values mapped to `[-0.5, 0.5]`, then
/// zero-padded to stride multiples.
pub fn input_tensor<T: Scalar>(image: &RgbImage, stride: usize) -> Result<Tensor<T>> {
    let mut t = image.to_tensor::<T>();
    let half = T::lit(0.5);
    t.data_mut().iter_mut().for_each(|v| *v -= half);
    pad_to_multiple(&t, stride)
}

/// Whether the head has a query-only first decoder layer to cache.
pub fn uses_prefix(head: Head) -> bool {
    matches!(head, Head::Unguided | Head::FeatureFusion)
}

/// Query-only part of the first decoder layer, bias included.
pub fn decoder_prefix<T: Scalar>(tape: &mut Tape<'_, T>, pv: &ParamVars, params: &ModelParams<T>, features: Var) -> Result<Var> {
    let l0 = pv.decoder.first().ok_or_else(|| Error::contract("head has no decoder"))?;
    let weight = match params.config.head {
        Head::Unguided => l0.weight,
        Head::FeatureFusion => tape.narrow(l0.weight, 1, 0, params.config.channels())?,
        h => return Err(Error::contract(format!("{h:?} head has no decoder"))),
    };
    tape.conv2d(features, weight, Some(l0.bias), l0.stride, l0.pad)
}

fn decoder_tail<T: Scalar>(tape: &mut Tape<'_, T>, pv: &ParamVars, first: Var) -> Result<Var> {
    let mut x = tape.relu(first);
    let n = pv.decoder.len();
    for (i, l) in pv.decoder.iter().enumerate().skip(1) {
        x = tape.conv2d(x, l.weight, Some(l.bias), l.stride, l.pad)?;
        if i + 1 < n {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

fn global_parts<T: Scalar>(rep: &GuideVars<T>) -> Result<(Var, Var, T, T)> {
    match rep.guidance {
        Guidance::Global { z_pos, z_neg, pos_count, neg_count } => Ok((z_pos, z_neg, pos_count, neg_count)),
        Guidance::Local { .. } => Err(Error::contract("this head needs pooled guidance")),
    }
}

/// Query-side inputs of a head.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub features: Var,
    pub prefix: Option<Var>,
    pub out_size: (usize, usize),
}

/// Two-channel logits at `q.out_size` (channel 1 is the task).
pub fn head_logits<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    params: &ModelParams<T>,
    q: &QueryVars,
    rep: Option<&GuideVars<T>>,
) -> Result<Var> {
    let cfg = &params.config;
    let (c, h, w) = tape.value(q.features).dims3()?;
    if c != cfg.channels() {
        return Err(Error::shape(format!("{c}-channel features for a {}-channel head", cfg.channels())));
    }
    let need_rep = || rep.ok_or_else(|| Error::contract("guided head needs a task representation"));
    let prefix = |tape: &mut Tape<'_, T>| match q.prefix {
        Some(p) => Ok(p),
        None => decoder_prefix(tape, pv, params, q.features),
    };
    let logits = match cfg.head {
        Head::Unguided => {
            let a = prefix(tape)?;
            decoder_tail(tape, pv, a)?
        }
        Head::FeatureFusion => match need_rep()?.guidance {
            Guidance::Global { z_pos, z_neg, .. } => {
                let a = prefix(tape)?;
                let z = match cfg.fusion {
                    Fusion::Early => z_pos,
                    Fusion::Late => tape.concat(&[z_pos, z_neg])?,
                };
                let b = tape.tiled_conv(z, pv.decoder[0].weight, c, h, w)?;
                let first = tape.add(a, b)?;
                decoder_tail(tape, pv, first)?
            }
            Guidance::Local { g_pos, g_neg } => {
                if cfg.fusion == Fusion::Early {
                    return Err(Error::contract("early fusion has no spatial guidance"));
                }
                for g in [g_pos, g_neg] {
                    if tape.value(g).shape() != [c, h, w] {
                        return Err(Error::contract(format!(
                            "spatial guidance {:?} against {c}x{h}x{w} query features",
                            tape.value(g).shape()
                        )));
                    }
                }
                // Same layer as a convolution over [features; g_pos; g_neg],
                // split so the dense feature term can come from the cache.
                let a = prefix(tape)?;
                let g = tape.concat(&[g_pos, g_neg])?;
                let l0 = pv.decoder[0];
                let wg = tape.narrow(l0.weight, 1, c, 2 * c)?;
                let b = tape.conv2d(g, wg, None, l0.stride, l0.pad)?;
                let first = tape.add(a, b)?;
                decoder_tail(tape, pv, first)?
            }
        },
        Head::ParamRegression => {
            let (z_pos, z_neg, pc, nc) = global_parts(need_rep()?)?;
            let r = pv.regressor.ok_or_else(|| Error::Config("regression head without regressor".into()))?;
            let counts = tape.constant_owned(Tensor::vector(vec![pc.ln_1p(), nc.ln_1p()]));
            let v = tape.concat(&[z_pos, z_neg, counts])?;
            let hidden = tape.linear(v, r.hidden_weight, r.hidden_bias)?;
            let hidden = tape.relu(hidden);
            let out = tape.linear(hidden, r.out_weight, r.out_bias)?;
            let kernel = tape.narrow(out, 0, 0, 2 * c)?;
            let kernel = tape.reshape(kernel, &[2, c, 1, 1])?;
            let bias = tape.narrow(out, 0, 2 * c, 2)?;
            tape.conv2d(q.features, kernel, Some(bias), 1, 0)?
        }
        Head::Prototype => {
            let (z_pos, z_neg, pc, nc) = global_parts(need_rep()?)?;
            if pc == T::zero() || nc == T::zero() {
                return Err(Error::DegenerateSupport("prototype head needs both positive and negative annotations".into()));
            }
            tape.prototype_logits(q.features, z_pos, z_neg, T::lit(cfg.temperature))?
        }
    };
    tape.bilinear_resize(logits, q.out_size.0, q.out_size.1)
}

/// Tape handles of one guided forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Var,
    pub guide: Option<GuideVars<T>>,
    pub query_features: Var,
}

/// Guides from the annotated support images and segments the query.
/// Support images equal to the query reuse its features.
pub fn forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    params: &ModelParams<T>,
    support: &[(Var, &AnnotationSet)],
    query: Var,
    locality: Locality,
) -> Result<Forward<T>> {
    let cfg = &params.config;
    let (_, qh, qw) = tape.value(query).dims3()?;
    let query_features = encode(tape, pv, params, query)?;
    let guide = if cfg.is_guided() {
        if support.is_empty() {
            return Err(Error::contract("segmentation needs at least one support item"));
        }
        let mut reps = Vec::with_capacity(support.len());
        for &(image, ann) in support {
            let rep = match cfg.fusion {
                Fusion::Early => guide_early_var(tape, pv, params, image, ann)?,
                Fusion::Late => {
                    let features = if tape.value(image) == tape.value(query) {
                        query_features
                    } else {
                        encode(tape, pv, params, image)?
                    };
                    let (_, h, w) = tape.value(features).dims3()?;
                    let (pos, neg) = rasterize(ann, (h, w), cfg.feature_stride)?;
                    let (pos, neg) = (tape.constant_owned(pos), tape.constant_owned(neg));
                    guide_late_var(tape, features, pos, neg, locality)?
                }
            };
            reps.push(rep);
        }
        Some(merge_var(tape, &reps)?)
    } else {
        None
    };
    let q = QueryVars { features: query_features, prefix: None, out_size: (qh, qw) };
    let logits = head_logits(tape, pv, params, &q, guide.as_ref())?;
    Ok(Forward { logits, guide, query_features })
}

/// Per-pixel argmax of `[2,H,W]` logits; ties go to the negative class.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (k, h, w) = logits.dims3()?;
    if k != 2 {
        return Err(Error::shape(format!("{k}-channel logits, expected 2")));
    }
    let data = logits.plane(0).iter().zip(logits.plane(1)).map(|(n, p)| u8::from(p > n)).collect();
    LabelMap::new(h, w, data)
}

#[derive(Clone, Debug)]
pub struct Segmentation<T> {
    pub mask: LabelMap,
    pub logits: Tensor<T>,
    pub representation: Option<TaskRepresentation<T>>,
}

/// Segments `query` guided by `support`, with the configured locality.
pub fn segment<T: Scalar>(params: &ModelParams<T>, support: &[(&Tensor<T>, &AnnotationSet)], query: &Tensor<T>) -> Result<Segmentation<T>> {
    segment_with(params, params.config.locality, support, query)
}

pub fn segment_with<T: Scalar>(
    params: &ModelParams<T>,
    locality: Locality,
    support: &[(&Tensor<T>, &AnnotationSet)],
    query: &Tensor<T>,
) -> Result<Segmentation<T>> {
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, false);
    let support: Vec<(Var, &AnnotationSet)> = support.iter().map(|&(img, ann)| (tape.constant(img), ann)).collect();
    let q = tape.constant(query);
    let fwd = forward(&mut tape, &pv, params, &support, q, locality)?;
    let logits = tape.value(fwd.logits).clone();
    Ok(Segmentation {
        mask: argmax_mask(&logits)?,
        logits,
        representation: fwd.guide.map(|g| g.detach(&tape)),
    })
}

/// Everything about a query image that does not depend on guidance.
#[derive(Clone, Debug)]
pub struct QueryCache<T> {
    pub features: Tensor<T>,
    pub prefix: Option<Tensor<T>>,
    pub image_size: (usize, usize),
}

impl<T: Scalar> QueryCache<T> {
    /// `image` must already be padded to a stride multiple.
    pub fn new(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        let mut tape = Tape::new();
        let pv = params.attach(&mut tape, false);
        let x = tape.constant(image);
        let f = encode(&mut tape, &pv, params, x)?;
        let cfg = &params.config;
        let prefix = if uses_prefix(cfg.head) {
            let p = decoder_prefix(&mut tape, &pv, params, f)?;
            Some(tape.value(p).clone())
        } else {
            None
        };
        Ok(Self { features: tape.value(f).clone(), prefix, image_size: (h, w) })
    }
}

/// Logits for a cached query under `rep`, reusing the cached prefix.
pub fn infer<T: Scalar>(params: &ModelParams<T>, cache: &QueryCache<T>, rep: Option<&TaskRepresentation<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, false);
    let features = tape.constant(&cache.features);
    let prefix = cache.prefix.as_ref().map(|p| tape.constant(p));
    let rep = rep.map(|r| r.attach(&mut tape));
    let q = QueryVars { features, prefix, out_size: cache.image_size };
    let logits = head_logits(&mut tape, &pv, params, &q, rep.as_ref())?;
    Ok(tape.value(logits).clone())
}

/// Nearest-prototype logits from `query_features`, resized to `out_size`.
pub fn infer_prototype<T: Scalar>(
    query_features: &Tensor<T>,
    rep: &TaskRepresentation<T>,
    temperature: T,
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(query_features);
    let rep = rep.attach(&mut tape);
    let (z_pos, z_neg, pc, nc) = global_parts(&rep)?;
    if pc == T::zero() || nc == T::zero() {
        return Err(Error::DegenerateSupport("prototype head needs both positive and negative annotations".into()));
    }
    let l = tape.prototype_logits(f, z_pos, z_neg, temperature)?;
    let l = tape.bilinear_resize(l, out_size.0, out_size.1)?;
    Ok(tape.value(l).clone())
}
