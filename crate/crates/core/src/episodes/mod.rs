//! Densely labelled datasets and the few-shot episodes synthesized from them.

mod io;
mod sampler;
mod shapes;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset};
pub use sampler::{binarize, sparsify, sparsify_quota, Sampler, SamplerOptions};
pub use shapes::{generate_shapes_world, Shape, ShapeClass, ShapesConfig, HUE_BINS};

use crate::image::RgbImage;
use crate::labels::LabelMap;
use crate::model::AnnotationSet;

pub type ClassId = u16;
pub type InstanceId = u8;

/// One image with exact instance labels (`0` is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseSample {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub instance_classes: BTreeMap<InstanceId, ClassId>,
    pub sequence: Option<u32>,
    pub frame: Option<u32>,
}

impl DenseSample {
    pub fn instances(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.instance_classes.keys().copied()
    }

    pub fn has_class(&self, class: ClassId) -> bool {
        self.instance_classes.values().any(|&c| c == class)
    }
}

/// Which classes training may see and which are reserved for evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<ClassId>,
    pub heldout: Vec<ClassId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<DenseSample>,
    pub split: ClassSplit,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per sequence id, in frame order.
    pub fn sequences(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut seqs: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(id) = s.sequence {
                seqs.entry(id).or_default().push(i);
            }
        }
        for frames in seqs.values_mut() {
            frames.sort_by_key(|&i| self.samples[i].frame);
        }
        seqs
    }

    /// Indices of samples that are not video frames.
    pub fn stills(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].sequence.is_none()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Semantic,
    Interactive,
    Video,
}

impl std::str::FromStr for TaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "interactive" => Ok(Self::Interactive),
            "video" => Ok(Self::Video),
            _ => Err(format!("unknown mode {s:?} (semantic, interactive, video)")),
        }
    }
}

/// Annotated pixels per support image. Serialized as the count or `"dense"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Points {
    Count(usize),
    Dense,
}

impl std::fmt::Display for Points {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Points::Count(n) => write!(f, "{n}"),
            Points::Dense => f.write_str("dense"),
        }
    }
}

impl std::str::FromStr for Points {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "dense" {
            return Ok(Points::Dense);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Points::Count(n)),
            _ => Err(format!("points must be a positive integer or \"dense\", got {s:?}")),
        }
    }
}

impl Serialize for Points {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Points::Count(n) => s.serialize_u64(*n as u64),
            Points::Dense => s.serialize_str("dense"),
        }
    }
}

impl<'de> Deserialize<'de> for Points {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) if n >= 1 => Ok(Points::Count(n)),
            Raw::Count(n) => Err(serde::de::Error::custom(format!("points must be positive, got {n}"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The binary task: a class (semantic) or an instance (interactive, video).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Class(ClassId),
    Instance(InstanceId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportItem {
    pub sample: usize,
    pub annotations: AnnotationSet,
}

/// Support and query refer to samples of the dataset they were drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub mode: TaskMode,
    pub task: Task,
    pub support: Vec<SupportItem>,
    pub query: usize,
    /// `1` on task pixels, `0` elsewhere.
    pub query_target: LabelMap,
    /// Annotation budget of each support item, in support order.
    pub points: Vec<Points>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}
