//! Procedural "shapes world": colored circles, squares and triangles on a
//! noisy gray background, as still images and as short video sequences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, ClassSplit, Dataset, DenseSample, InstanceId};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::LabelMap;

pub const HUE_BINS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeClass {
    pub shape: Shape,
    pub hue_bin: u8,
}

impl ShapeClass {
    /// `shape * 8 + hue_bin`, so 3 shapes x 8 hues give ids `0..24`.
    pub fn id(&self) -> ClassId {
        self.shape as ClassId * HUE_BINS as ClassId + self.hue_bin as ClassId
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    pub height: usize,
    pub width: usize,
    /// Classes in split order: the last `heldout` are reserved for evaluation.
    pub classes: Vec<ShapeClass>,
    pub heldout: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_pixels: usize,
    pub still_images: usize,
    pub sequences: usize,
    pub sequence_length: usize,
    pub max_speed: f64,
    pub jitter: f64,
    /// Per-pixel uniform noise amplitude on the background, in `[0, 1]` units.
    pub noise: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        use Shape::*;
        // Every held-out class pairs a hue and a shape that training shows
        // separately; used hues are two bins apart.
        let classes = [
            (Circle, 0),
            (Square, 2),
            (Triangle, 4),
            (Circle, 6),
            (Square, 4),
            (Triangle, 2),
            (Circle, 2),
            (Square, 6),
            (Triangle, 0),
            (Circle, 4),
        ]
        .into_iter()
        .map(|(shape, hue_bin)| ShapeClass { shape, hue_bin })
        .collect();
        Self {
            height: 64,
            width: 64,
            classes,
            heldout: 2,
            min_instances: 1,
            max_instances: 4,
            min_radius: 7.0,
            max_radius: 14.0,
            min_pixels: 20,
            still_images: 1000,
            sequences: 100,
            sequence_length: 8,
            max_speed: 4.0,
            jitter: 1.0,
            noise: 0.08,
        }
    }
}

impl ShapesConfig {
    /// Every shape and hue combination.
    pub fn all_classes() -> Vec<ShapeClass> {
        [Shape::Circle, Shape::Square, Shape::Triangle]
            .into_iter()
            .flat_map(|shape| (0..HUE_BINS).map(move |hue_bin| ShapeClass { shape, hue_bin }))
            .collect()
    }

    pub fn split(&self) -> ClassSplit {
        let cut = self.classes.len() - self.heldout;
        ClassSplit {
            train: self.classes[..cut].iter().map(ShapeClass::id).collect(),
            heldout: self.classes[cut..].iter().map(ShapeClass::id).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad("need 0 < min_radius <= max_radius");
        }
        if 2.0 * self.max_radius > self.height.min(self.width) as f64 {
            return bad("shape radius does not fit the image");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("need 1 <= min_instances <= max_instances");
        }
        if self.max_instances > self.classes.len() || self.max_instances > InstanceId::MAX as usize {
            return bad("instances per image are limited by the number of distinct classes");
        }
        if self.heldout >= self.classes.len() {
            return bad("at least one class must remain for training");
        }
        let mut ids: Vec<ClassId> = self.classes.iter().map(ShapeClass::id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.classes.len() || self.classes.iter().any(|c| c.hue_bin >= HUE_BINS) {
            return bad("classes must be distinct shape/hue pairs with hue_bin < 8");
        }
        if self.sequences > 0 && self.sequence_length < 2 {
            return bad("sequences need at least two frames");
        }
        if self.max_speed < 0.0 || self.jitter < 0.0 || !(0.0..=0.5).contains(&self.noise) {
            return bad("speed and jitter must be non-negative and noise within [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Instance {
    class: ShapeClass,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
}

impl Instance {
    /// Pixel-center membership test.
    fn contains(&self, row: usize, col: usize) -> bool {
        let (dy, dx) = (row as f64 + 0.5 - self.cy, col as f64 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        match self.class.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => {
                // Equilateral, circumradius r, one vertex along -v.
                let h = 0.5 * r;
                let slope = 3f64.sqrt();
                v <= h && slope * u - v <= r && -slope * u - v <= r
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_instance(cfg: &ShapesConfig, class: ShapeClass, rng: &mut ChaCha8Rng) -> Instance {
    let radius = rng.gen_range(cfg.min_radius..=cfg.max_radius);
    let hue = (class.hue_bin as f64 + rng.gen_range(0.25..0.75)) / HUE_BINS as f64;
    let color = hsv_to_rgb(hue, rng.gen_range(0.65..0.95), rng.gen_range(0.65..0.95));
    Instance {
        class,
        cy: rng.gen_range(radius * 0.5..cfg.height as f64 - radius * 0.5),
        cx: rng.gen_range(radius * 0.5..cfg.width as f64 - radius * 0.5),
        radius,
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        color,
    }
}

/// Renders instances in id order (later ids on top). Returns `None` when
/// an instance ends up with fewer than `min_pixels` visible pixels.
fn render(cfg: &ShapesConfig, instances: &[Instance], gray: f64, rng: &mut ChaCha8Rng) -> Option<(RgbImage, LabelMap)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = LabelMap::filled(h, w, 0);
    for (k, inst) in instances.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                if inst.contains(r, c) {
                    labels.set(r, c, (k + 1) as u8);
                }
            }
        }
    }
    for k in 1..=instances.len() {
        if labels.count(k as u8) < cfg.min_pixels {
            return None;
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for &id in labels.data() {
        let base = match id {
            0 => [gray; 3],
            k => instances[k as usize - 1].color,
        };
        let amp = if id == 0 { cfg.noise } else { 0.25 * cfg.noise };
        for ch in base {
            let v = ch + rng.gen_range(-1.0..=1.0) * amp;
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Some((RgbImage::new(h, w, data).expect("rendered size"), labels))
}

fn pick_classes(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeClass> {
    let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    cfg.classes.choose_multiple(rng, n).copied().collect()
}

fn class_map(instances: &[Instance]) -> BTreeMap<InstanceId, ClassId> {
    instances.iter().enumerate().map(|(k, i)| ((k + 1) as InstanceId, i.class.id())).collect()
}

const MAX_ATTEMPTS: usize = 1000;

fn still(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Result<DenseSample> {
    for _ in 0..MAX_ATTEMPTS {
        let instances: Vec<Instance> = pick_classes(cfg, rng).into_iter().map(|c| random_instance(cfg, c, rng)).collect();
        let gray = rng.gen_range(0.3..0.6);
        if let Some((image, labels)) = render(cfg, &instances, gray, rng) {
            let instance_classes = class_map(&instances);
            return Ok(DenseSample { image, labels, instance_classes, sequence: None, frame: None });
        }
    }
    Err(Error::Config(format!("no layout met the {}-pixel minimum in {MAX_ATTEMPTS} attempts", cfg.min_pixels)))
}

fn sequence(cfg: &ShapesConfig, id: u32, rng: &mut ChaCha8Rng) -> Result<Vec<DenseSample>> {
    let steps = (cfg.sequence_length - 1) as f64;
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let classes = pick_classes(cfg, rng);
        let gray = rng.gen_range(0.3..0.6);
        let mut tracks = Vec::with_capacity(classes.len());
        for class in classes {
            let inst = random_instance(cfg, class, rng);
            let speed = rng.gen_range(0.0..=cfg.max_speed);
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let (vy, vx) = (speed * heading.sin(), speed * heading.cos());
            // Start so the whole trajectory keeps the center inside the frame.
            let margin = inst.radius * 0.5 + cfg.jitter;
            let span = |v: f64, extent: usize| {
                let lo = margin - (v * steps).min(0.0);
                let hi = extent as f64 - margin - (v * steps).max(0.0);
                (lo < hi).then_some((lo, hi))
            };
            let (Some((ylo, yhi)), Some((xlo, xhi))) = (span(vy, cfg.height), span(vx, cfg.width)) else {
                continue 'attempt;
            };
            let start = Instance { cy: rng.gen_range(ylo..yhi), cx: rng.gen_range(xlo..xhi), ..inst };
            tracks.push((start, vy, vx));
        }
        let mut frames = Vec::with_capacity(cfg.sequence_length);
        for t in 0..cfg.sequence_length {
            let instances: Vec<Instance> = tracks
                .iter()
                .map(|&(s, vy, vx)| {
                    let jy = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
                    let jx = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
                    Instance { cy: s.cy + vy * t as f64 + jy, cx: s.cx + vx * t as f64 + jx, ..s }
                })
                .collect();
            let Some((image, labels)) = render(cfg, &instances, gray, rng) else {
                continue 'attempt;
            };
            frames.push(DenseSample {
                image,
                labels,
                instance_classes: class_map(&instances),
                sequence: Some(id),
                frame: Some(t as u32),
            });
        }
        return Ok(frames);
    }
    Err(Error::Config(format!("no sequence met the {}-pixel minimum in {MAX_ATTEMPTS} attempts", cfg.min_pixels)))
}

/// Deterministic in `(cfg, seed)`: still images first, then sequences.
pub fn generate_shapes_world(cfg: &ShapesConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(cfg.still_images + cfg.sequences * cfg.sequence_length);
    for _ in 0..cfg.still_images {
        samples.push(still(cfg, &mut rng)?);
    }
    for id in 0..cfg.sequences {
        samples.extend(sequence(cfg, id as u32, &mut rng)?);
    }
    Ok(Dataset { samples, split: cfg.split() })
}
