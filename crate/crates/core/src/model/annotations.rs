use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub label: Label,
}

impl Point {
    pub fn new(row: usize, col: usize, label: Label) -> Self {
        Self { row, col, label }
    }
}

/// Point labels on one image; at most one label per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationSet {
    height: usize,
    width: usize,
    points: BTreeMap<(usize, usize), Label>,
}

impl AnnotationSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, points: BTreeMap::new() }
    }

    pub fn from_points(height: usize, width: usize, points: impl IntoIterator<Item = Point>) -> Result<Self> {
        let mut set = Self::new(height, width);
        for p in points {
            set.insert(p)?;
        }
        Ok(set)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Adds or relabels a point; returns the label it replaced.
    pub fn insert(&mut self, p: Point) -> Result<Option<Label>> {
        if p.row >= self.height || p.col >= self.width {
            return Err(Error::contract(format!(
                "point ({}, {}) outside {}x{} image",
                p.row, p.col, self.height, self.width
            )));
        }
        Ok(self.points.insert((p.row, p.col), p.label))
    }

    pub fn remove(&mut self, row: usize, col: usize) -> Option<Label> {
        self.points.remove(&(row, col))
    }

    pub fn clear(&mut self) {
        self.points.clear();
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Label> {
        self.points.get(&(row, col)).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.points.values().filter(|&&l| l == label).count()
    }

    /// Points in row-major order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().map(|(&(row, col), &label)| Point { row, col, label })
    }
}

/// Nearest-cell rasterization: point `(r, c)` marks cell
/// `(r / stride, c / stride)` of its polarity's mask with 1.
///
/// The grid must be `ceil(H / stride)` × `ceil(W / stride)`, which also
/// admits features computed from an image padded up to a stride multiple.
pub fn rasterize<T: Scalar>(
    ann: &AnnotationSet,
    feature_size: (usize, usize),
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = feature_size;
    let (ih, iw) = ann.image_size();
    if stride == 0 || ih.div_ceil(stride) != h || iw.div_ceil(stride) != w {
        return Err(Error::contract(format!(
            "{ih}x{iw} annotations do not map onto a {h}x{w} grid at stride {stride}"
        )));
    }
    let mut pos = Tensor::zeros([1, h, w]);
    let mut neg = Tensor::zeros([1, h, w]);
    for p in ann.points() {
        let target = match p.label {
            Label::Positive => &mut pos,
            Label::Negative => &mut neg,
        };
        target.data_mut()[(p.row / stride) * w + p.col / stride] = T::one();
    }
    Ok((pos, neg))
}

/// Input-resolution point planes `[1,H,W]` per polarity (early fusion).
/// `size` may exceed the annotated image size when the image was padded.
pub fn point_maps<T: Scalar>(ann: &AnnotationSet, size: (usize, usize)) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = size;
    let (ih, iw) = ann.image_size();
    if ih > h || iw > w {
        return Err(Error::contract(format!("{ih}x{iw} annotations on a {h}x{w} image")));
    }
    let mut pos = Tensor::zeros([1, h, w]);
    let mut neg = Tensor::zeros([1, h, w]);
    for p in ann.points() {
        let target = match p.label {
            Label::Positive => &mut pos,
            Label::Negative => &mut neg,
        };
        target.data_mut()[p.row * w + p.col] = T::one();
    }
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_rule_selects_cell() {
        let ann = AnnotationSet::from_points(8, 8, [Point::new(2, 5, Label::Positive)]).unwrap();
        let (pos, neg) = rasterize::<f32>(&ann, (2, 2), 4).unwrap();
        assert_eq!(pos.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_set_gives_zero_masks() {
        let (pos, neg) = rasterize::<f32>(&AnnotationSet::new(8, 8), (2, 2), 4).unwrap();
        assert_eq!(pos.sum() + neg.sum(), 0.0);
    }

    #[test]
    fn shared_cell_is_binary() {
        let pts = [Point::new(0, 0, Label::Positive), Point::new(3, 3, Label::Positive)];
        let ann = AnnotationSet::from_points(8, 8, pts).unwrap();
        let (pos, _) = rasterize::<f32>(&ann, (2, 2), 4).unwrap();
        assert_eq!(pos.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_must_match() {
        assert!(rasterize::<f32>(&AnnotationSet::new(8, 8), (3, 2), 4).is_err());
        assert!(rasterize::<f32>(&AnnotationSet::new(7, 9), (2, 3), 4).is_ok());
    }

    #[test]
    fn one_label_per_pixel() {
        let mut ann = AnnotationSet::new(4, 4);
        assert_eq!(ann.insert(Point::new(1, 1, Label::Positive)).unwrap(), None);
        assert_eq!(ann.insert(Point::new(1, 1, Label::Negative)).unwrap(), Some(Label::Positive));
        assert_eq!(ann.len(), 1);
        assert!(ann.insert(Point::new(4, 0, Label::Negative)).is_err());
    }
}
