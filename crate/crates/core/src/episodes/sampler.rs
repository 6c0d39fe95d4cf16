use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassId, Dataset, Episode, InstanceId, Points, SupportItem, Task, TaskMode};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::{AnnotationSet, Label, Point};

/// `1` where the pixel belongs to the task, `0` elsewhere.
pub fn binarize(labels: &LabelMap, instance_classes: &BTreeMap<InstanceId, ClassId>, task: Task) -> LabelMap {
    let hit: [bool; 256] = std::array::from_fn(|v| {
        let v = v as InstanceId;
        v != 0
            && match task {
                Task::Instance(id) => v == id,
                Task::Class(c) => instance_classes.get(&v) == Some(&c),
            }
    });
    let data = labels.data().iter().map(|&v| hit[v as usize] as u8).collect();
    LabelMap::new(labels.height(), labels.width(), data).expect("same size")
}

/// Splits `P` points `ceil(P/2)` positive and `floor(P/2)` negative.
pub fn sparsify(target: &LabelMap, points: Points, rng: &mut impl Rng) -> Result<AnnotationSet> {
    match points {
        Points::Count(p) => sparsify_quota(target, p.div_ceil(2), p / 2, rng),
        Points::Dense => sparsify_quota(target, usize::MAX, usize::MAX, rng),
    }
}

/// Draws up to `positives` points from the `1` region and up to `negatives`
/// from the `0` region, uniformly without replacement. Other values are
/// never annotated.
pub fn sparsify_quota(target: &LabelMap, positives: usize, negatives: usize, rng: &mut impl Rng) -> Result<AnnotationSet> {
    let w = target.width();
    let region = |v: u8| -> Vec<usize> { (0..target.size().0 * w).filter(|&i| target.data()[i] == v).collect() };
    let (pos, neg) = (region(1), region(0));
    if pos.is_empty() {
        return Err(Error::NoPositiveRegion);
    }
    let mut set = AnnotationSet::new(target.height(), w);
    for (cells, quota, label) in [(&pos, positives, Label::Positive), (&neg, negatives, Label::Negative)] {
        let chosen: Vec<usize> = if quota >= cells.len() {
            cells.clone()
        } else {
            index::sample(rng, cells.len(), quota).into_iter().map(|k| cells[k]).collect()
        };
        for i in chosen {
            set.insert(Point::new(i / w, i % w, label))?;
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Only these classes (or instances of these classes) become tasks; all when `None`.
    pub classes: Option<Vec<ClassId>>,
    /// Query images must show at least this many distinct classes.
    pub min_query_classes: usize,
}

/// Eligible tasks, precomputed once per dataset and options.
#[derive(Debug)]
struct Index {
    /// Per class, the still images that contain it.
    class_images: BTreeMap<ClassId, Vec<usize>>,
    /// `(image, instance)` pairs over still images.
    still_instances: Vec<(usize, InstanceId)>,
    /// Per `(sequence, instance)`, the frames showing the instance, in order.
    tracks: Vec<Vec<usize>>,
    track_ids: Vec<InstanceId>,
}

/// A deterministic episode stream over one dataset.
pub struct Sampler<'a> {
    dataset: &'a Dataset,
    options: SamplerOptions,
    index: Index,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &'a Dataset, options: SamplerOptions, seed: u64) -> Self {
        let allowed = |c: ClassId| options.classes.as_ref().is_none_or(|cs| cs.contains(&c));
        let samples = &dataset.samples;
        let mut class_images: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        let mut still_instances = Vec::new();
        for i in dataset.stills() {
            let classes: BTreeSet<ClassId> = samples[i].instance_classes.values().copied().collect();
            for c in classes.into_iter().filter(|&c| allowed(c)) {
                class_images.entry(c).or_default().push(i);
            }
            for (&id, &c) in &samples[i].instance_classes {
                if allowed(c) && samples[i].labels.count(id) > 0 {
                    still_instances.push((i, id));
                }
            }
        }
        let mut tracks = Vec::new();
        let mut track_ids = Vec::new();
        for frames in dataset.sequences().values() {
            let ids: BTreeMap<InstanceId, ClassId> =
                frames.iter().flat_map(|&f| samples[f].instance_classes.iter().map(|(&k, &v)| (k, v))).collect();
            for (id, _) in ids.into_iter().filter(|&(_, c)| allowed(c)) {
                let visible: Vec<usize> = frames
                    .iter()
                    .copied()
                    .filter(|&f| samples[f].instance_classes.contains_key(&id) && samples[f].labels.count(id) > 0)
                    .collect();
                if visible.len() >= 2 {
                    tracks.push(visible);
                    track_ids.push(id);
                }
            }
        }
        let index = Index { class_images, still_instances, tracks, track_ids };
        Self { dataset, options, index, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// The stream's generator, for callers that draw per-episode settings.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn query_ok(&self, i: usize) -> bool {
        let classes: BTreeSet<ClassId> = self.dataset.samples[i].instance_classes.values().copied().collect();
        classes.len() >= self.options.min_query_classes
    }

    pub fn sample(&mut self, mode: TaskMode, shots: usize, points: Points) -> Result<Episode> {
        self.sample_mixed(mode, &vec![points; shots])
    }

    /// One support item per entry of `points`, each with its own budget.
    pub fn sample_mixed(&mut self, mode: TaskMode, points: &[Points]) -> Result<Episode> {
        let shots = points.len();
        if shots == 0 {
            return Err(Error::contract("an episode needs at least one support image"));
        }
        let (task, support, query) = match mode {
            TaskMode::Semantic => self.draw_semantic(shots)?,
            TaskMode::Interactive => self.draw_interactive(shots)?,
            TaskMode::Video => self.draw_video(shots)?,
        };
        let samples = &self.dataset.samples;
        let mut items = Vec::with_capacity(shots);
        for (&s, &p) in support.iter().zip(points) {
            let target = binarize(&samples[s].labels, &samples[s].instance_classes, task);
            let annotations = sparsify(&target, p, &mut self.rng)?;
            items.push(SupportItem { sample: s, annotations });
        }
        let q = &samples[query];
        Ok(Episode {
            mode,
            task,
            support: items,
            query,
            query_target: binarize(&q.labels, &q.instance_classes, task),
            points: points.to_vec(),
        })
    }

    fn draw_semantic(&mut self, shots: usize) -> Result<(Task, Vec<usize>, usize)> {
        let eligible: Vec<ClassId> = self
            .index
            .class_images
            .iter()
            .filter(|(_, imgs)| imgs.len() > shots && imgs.iter().any(|&i| self.query_ok(i)))
            .map(|(&c, _)| c)
            .collect();
        let &class = eligible
            .choose(&mut self.rng)
            .ok_or_else(|| Error::DatasetTooSmall(format!("no class appears in {} still images", shots + 1)))?;
        let imgs = &self.index.class_images[&class];
        let queries: Vec<usize> = imgs.iter().copied().filter(|&i| self.query_ok(i)).collect();
        let query = *queries.choose(&mut self.rng).expect("eligible class has a query");
        let rest: Vec<usize> = imgs.iter().copied().filter(|&i| i != query).collect();
        let support = rest.choose_multiple(&mut self.rng, shots).copied().collect();
        Ok((Task::Class(class), support, query))
    }

    fn draw_interactive(&mut self, shots: usize) -> Result<(Task, Vec<usize>, usize)> {
        let pairs: Vec<(usize, InstanceId)> =
            self.index.still_instances.iter().copied().filter(|&(i, _)| self.query_ok(i)).collect();
        let &(image, id) = pairs
            .choose(&mut self.rng)
            .ok_or_else(|| Error::DatasetTooSmall("no still image holds an eligible instance".into()))?;
        Ok((Task::Instance(id), vec![image; shots], image))
    }

    fn draw_video(&mut self, shots: usize) -> Result<(Task, Vec<usize>, usize)> {
        let eligible: Vec<usize> = (0..self.index.tracks.len())
            .filter(|&t| {
                let frames = &self.index.tracks[t];
                frames.len() > shots && frames[shots..].iter().any(|&f| self.query_ok(f))
            })
            .collect();
        let &t = eligible
            .choose(&mut self.rng)
            .ok_or_else(|| Error::DatasetTooSmall(format!("no sequence shows an instance in {} frames", shots + 1)))?;
        let frames = &self.index.tracks[t];
        let positions: Vec<usize> = (shots..frames.len()).filter(|&k| self.query_ok(frames[k])).collect();
        let q = *positions.choose(&mut self.rng).expect("eligible track has a query");
        let mut picked = index::sample(&mut self.rng, q, shots).into_vec();
        picked.sort_unstable();
        let support = picked.into_iter().map(|k| frames[k]).collect();
        Ok((Task::Instance(self.index.track_ids[t]), support, frames[q]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn binarize_class_and_instance() {
        let labels = map(1, 4, &[0, 1, 2, 1]);
        let classes = BTreeMap::from([(1, 0), (2, 8)]);
        assert_eq!(binarize(&labels, &classes, Task::Class(0)).data(), &[0, 1, 0, 1]);
        assert_eq!(binarize(&labels, &classes, Task::Instance(2)).data(), &[0, 0, 1, 0]);
        assert_eq!(binarize(&labels, &classes, Task::Class(5)).data(), &[0; 4]);
    }

    #[test]
    fn quota_split() {
        let t = map(2, 3, &[1, 1, 0, 0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sparsify(&t, Points::Count(1), &mut rng).unwrap();
        assert_eq!((one.count(Label::Positive), one.count(Label::Negative)), (1, 0));
        let two = sparsify(&t, Points::Count(2), &mut rng).unwrap();
        assert_eq!((two.count(Label::Positive), two.count(Label::Negative)), (1, 1));
        let many = sparsify(&t, Points::Count(100), &mut rng).unwrap();
        assert_eq!(many.len(), 6);
        for p in many.points() {
            assert_eq!(p.label == Label::Positive, t.get(p.row, p.col) == 1);
        }
        assert_eq!(sparsify(&t, Points::Dense, &mut rng).unwrap(), many);
        assert!(matches!(sparsify(&map(1, 2, &[0, 0]), Points::Count(2), &mut rng), Err(Error::NoPositiveRegion)));
    }

    #[test]
    fn ignore_pixels_are_never_annotated() {
        let t = map(1, 3, &[1, crate::autodiff::IGNORE, 0]);
        let set = sparsify(&t, Points::Dense, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.get(0, 1), None);
    }
}
