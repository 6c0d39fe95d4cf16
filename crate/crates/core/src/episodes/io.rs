//! Dataset directories: `index.json` plus one RGB PNG and one label PNG per sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassId, ClassSplit, Dataset, DenseSample, InstanceId};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::LabelMap;

const INDEX: &str = "index.json";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    samples: Vec<IndexEntry>,
    #[serde(default)]
    split: ClassSplit,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    image: String,
    labels: String,
    sequence: Option<u32>,
    frame: Option<u32>,
    instance_classes: BTreeMap<InstanceId, ClassId>,
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let entry = IndexEntry {
            image: format!("images/{i:06}.png"),
            labels: format!("labels/{i:06}.png"),
            sequence: s.sequence,
            frame: s.frame,
            instance_classes: s.instance_classes.clone(),
        };
        fs::write(dir.join(&entry.image), s.image.to_png()?)?;
        fs::write(dir.join(&entry.labels), s.labels.to_png()?)?;
        samples.push(entry);
    }
    let index = IndexFile { version: VERSION, samples, split: dataset.split.clone() };
    fs::write(dir.join(INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX);
    let index: IndexFile =
        serde_json::from_slice(&read(&index_path)?).map_err(|e| Error::format(&index_path, e.to_string()))?;
    if index.version != VERSION {
        return Err(Error::format(&index_path, format!("unsupported version {}", index.version)));
    }
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in index.samples {
        let image_path: PathBuf = dir.join(&entry.image);
        let labels_path: PathBuf = dir.join(&entry.labels);
        let image = RgbImage::from_png(&read(&image_path)?).map_err(|e| Error::format(&image_path, e.to_string()))?;
        let labels = LabelMap::from_png(&read(&labels_path)?).map_err(|e| Error::format(&labels_path, e.to_string()))?;
        if image.size() != labels.size() {
            return Err(Error::format(&labels_path, format!("size {:?} differs from its image {:?}", labels.size(), image.size())));
        }
        if let Some(v) = labels.data().iter().find(|&&v| v != 0 && !entry.instance_classes.contains_key(&v)) {
            return Err(Error::format(&labels_path, format!("instance {v} has no class entry")));
        }
        if entry.instance_classes.contains_key(&0) {
            return Err(Error::format(&index_path, "instance id 0 is reserved for background"));
        }
        samples.push(DenseSample {
            image,
            labels,
            instance_classes: entry.instance_classes,
            sequence: entry.sequence,
            frame: entry.frame,
        });
    }
    Ok(Dataset { samples, split: index.split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_shapes_world, ShapesConfig};

    #[test]
    fn round_trip() {
        let cfg = ShapesConfig { still_images: 6, sequences: 1, sequence_length: 3, ..Default::default() };
        let d = generate_shapes_world(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with(INDEX)),
            other => panic!("{other:?}"),
        }
        fs::write(
            dir.path().join(INDEX),
            r#"{"version":1,"samples":[{"image":"a.png","labels":"b.png","sequence":null,"frame":null,"instance_classes":{}}]}"#,
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with("a.png")),
            other => panic!("{other:?}"),
        }
    }
}
