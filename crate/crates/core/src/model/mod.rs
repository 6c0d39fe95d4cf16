//! The guided segmentation network.

pub mod annotations;
pub mod config;
pub mod guide;
pub mod network;
pub mod params;

pub use annotations::{point_maps, rasterize, AnnotationSet, Label, Point};
pub use config::{Fusion, GuidanceConfig, Head, LayerSpec, Locality};
pub use guide::{
    guidance_from_frames, guide_early, guide_late, merge_shots, update_guidance, AnnotationDelta, Guidance, GuideVars,
    Representation, SupportFrame, TaskRepresentation,
};
pub use network::{
    argmax_mask, extract_features, forward, infer, infer_prototype, input_tensor, pad_to_multiple, segment, segment_with, Forward,
    QueryCache, Segmentation,
};
pub use params::{ModelParams, ParamVars};
