#![allow(dead_code)]

use base64::Engine;
use guidedseg_core::episodes::{generate_shapes_world, Dataset, ShapesConfig};
use guidedseg_core::image::RgbImage;
use guidedseg_core::labels::LabelMap;
use guidedseg_core::model::{input_tensor, segment_with, AnnotationSet, Locality, ModelParams};
use guidedseg_core::Error;
use guidedseg_service::{Limits, Store};

pub fn world() -> Dataset {
    let cfg = ShapesConfig { still_images: 12, sequences: 2, sequence_length: 5, ..Default::default() };
    generate_shapes_world(&cfg, 17).unwrap()
}

pub fn params() -> ModelParams<f32> {
    ModelParams::init(Default::default(), 23).unwrap()
}

pub fn store(limits: Limits) -> Store {
    Store::new(params(), "shapes", limits).unwrap()
}

/// Frames of the first video sequence.
pub fn frames(data: &Dataset) -> Vec<RgbImage> {
    let seqs = data.sequences();
    seqs.values().next().unwrap().iter().map(|&i| data.samples[i].image.clone()).collect()
}

pub fn b64_png(image: &RgbImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(image.to_png().unwrap())
}

/// The mask a full forward pass gives for `query`, guided by every
/// annotated frame, and whether no frame is annotated. With no annotations
/// the query guides itself with an empty set. `None` marks a support the
/// head rejects as degenerate.
pub fn shadow_mask(
    params: &ModelParams<f32>,
    locality: Locality,
    images: &[RgbImage],
    annotations: &[AnnotationSet],
    query: usize,
) -> Option<(LabelMap, bool)> {
    let stride = params.config.feature_stride;
    let tensors: Vec<_> = images.iter().map(|i| input_tensor::<f32>(i, stride).unwrap()).collect();
    let (h, w) = images[query].size();
    let empty = AnnotationSet::new(h, w);
    let mut support: Vec<_> =
        tensors.iter().zip(annotations).filter(|(_, a)| !a.is_empty()).map(|(t, a)| (t, a)).collect();
    let unannotated = support.is_empty();
    if unannotated {
        support.push((&tensors[query], &empty));
    }
    match segment_with(params, locality, &support, &tensors[query]) {
        Ok(s) => Some((s.mask.crop(h, w).unwrap(), unannotated)),
        Err(Error::DegenerateSupport(_)) => None,
        Err(e) => panic!("shadow forward failed: {e}"),
    }
}
