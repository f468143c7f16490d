//! Scalar metrics against the oracle and ground-truth labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Image, SegMap};
use crate::losses::{canny_relative, BinaryMap};
use crate::models::ProbMap;
use crate::{Error, Result};

/// Per-class sums of absolute error, accumulated over images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassErrors {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl ClassErrors {
    pub fn new(classes: usize) -> Self {
        Self {
            sums: vec![0.0; classes],
            counts: vec![0; classes],
        }
    }

    /// Adds the channel-mean absolute error of every pixel to its class.
    pub fn add(&mut self, a: &Image, b: &Image, segmap: &SegMap) -> Result<()> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!(
                "compared images differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        if segmap.dims() != a.dims() {
            return Err(Error::DimensionMismatch {
                image: a.dims(),
                segmap: segmap.dims(),
            });
        }
        if segmap.num_classes() > self.sums.len() {
            self.sums.resize(segmap.num_classes(), 0.0);
            self.counts.resize(segmap.num_classes(), 0);
        }
        let plane = a.height() * a.width();
        let (da, db) = (a.data(), b.data());
        for (i, &c) in segmap.labels().iter().enumerate() {
            let e: f64 = (0..3)
                .map(|ch| (da[ch * plane + i] - db[ch * plane + i]).abs() as f64)
                .sum();
            self.sums[c as usize] += e / 3.0;
            self.counts[c as usize] += 1;
        }
        Ok(())
    }

    /// Mean error per class name; classes without pixels are omitted.
    pub fn finish(&self, class_names: &[String]) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .zip(&self.counts)
            .enumerate()
            .filter(|(_, (_, &n))| n > 0)
            .map(|(c, (&s, &n))| (class_names[c].clone(), s / n as f64))
            .collect()
    }
}

/// Mean absolute error restricted to each class's pixels.
pub fn per_class_mae(translated: &Image, oracle: &Image, segmap: &SegMap) -> Result<BTreeMap<String, f64>> {
    let mut acc = ClassErrors::new(segmap.num_classes());
    acc.add(translated, oracle, segmap)?;
    Ok(acc.finish(segmap.class_names()))
}

/// Unweighted mean over the reported classes.
pub fn mean_of(map: &BTreeMap<String, f64>) -> f64 {
    if map.is_empty() {
        0.0
    } else {
        map.values().sum::<f64>() / map.len() as f64
    }
}

/// Confusion counts `[gt][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    /// IoU of every class whose union is non-empty.
    pub iou: BTreeMap<String, f64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch("prediction and label sizes differ".into()));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::ClassOutOfRange {
                    class: p.max(g),
                    classes: self.classes,
                });
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn scores(&self, class_names: &[String]) -> SegScores {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        let mut iou = BTreeMap::new();
        for c in 0..k {
            let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let inter = self.counts[c * k + c];
            let union = gt + pred - inter;
            if union > 0 {
                iou.insert(class_names[c].clone(), inter as f64 / union as f64);
            }
        }
        SegScores {
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_iou: mean_of(&iou),
            iou,
        }
    }
}

/// Pixel accuracy and mean IoU of the argmax of `probmap`.
pub fn seg_accuracy(probmap: &ProbMap, gt: &SegMap) -> Result<SegScores> {
    if probmap.dims() != gt.dims() {
        return Err(Error::ShapeMismatch("probability map and labels differ in size".into()));
    }
    if probmap.classes() != gt.num_classes() {
        return Err(Error::ShapeMismatch("probability map and labels differ in class count".into()));
    }
    let mut c = Confusion::new(gt.num_classes());
    c.add(&probmap.argmax(), gt.labels())?;
    Ok(c.scores(gt.class_names()))
}

/// Canny thresholds as fractions of each image's maximum gradient magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeThresholds {
    pub low: f32,
    pub high: f32,
}

impl Default for EdgeThresholds {
    fn default() -> Self {
        Self { low: 0.1, high: 0.2 }
    }
}

/// Edge matches with a one-pixel (8-neighbourhood) tolerance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub reference: u64,
    pub reference_matched: u64,
    pub predicted: u64,
    pub predicted_matched: u64,
}

fn near(map: &BinaryMap, y: usize, x: usize) -> bool {
    let (y0, x0) = (y.saturating_sub(1), x.saturating_sub(1));
    let (y1, x1) = ((y + 1).min(map.height - 1), (x + 1).min(map.width - 1));
    (y0..=y1).any(|yy| (x0..=x1).any(|xx| map.get(yy, xx)))
}

impl EdgeCounts {
    pub fn between(reference: &BinaryMap, predicted: &BinaryMap) -> Result<Self> {
        if (reference.height, reference.width) != (predicted.height, predicted.width) {
            return Err(Error::ShapeMismatch("edge maps differ in size".into()));
        }
        let mut c = Self::default();
        for y in 0..reference.height {
            for x in 0..reference.width {
                if reference.get(y, x) {
                    c.reference += 1;
                    c.reference_matched += near(predicted, y, x) as u64;
                }
                if predicted.get(y, x) {
                    c.predicted += 1;
                    c.predicted_matched += near(reference, y, x) as u64;
                }
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        self.reference += other.reference;
        self.reference_matched += other.reference_matched;
        self.predicted += other.predicted;
        self.predicted_matched += other.predicted_matched;
    }

    /// F1 of precision and recall; two empty edge sets agree perfectly.
    pub fn f1(&self) -> f64 {
        if self.reference == 0 && self.predicted == 0 {
            return 1.0;
        }
        if self.reference == 0 || self.predicted == 0 {
            return 0.0;
        }
        let p = self.predicted_matched as f64 / self.predicted as f64;
        let r = self.reference_matched as f64 / self.reference as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn edge_counts(x: &Image, gx: &Image, t: EdgeThresholds) -> Result<EdgeCounts> {
    if x.dims() != gx.dims() {
        return Err(Error::ShapeMismatch("edge comparison needs equal sizes".into()));
    }
    EdgeCounts::between(&canny_relative(x, t.low, t.high)?, &canny_relative(gx, t.low, t.high)?)
}

/// F1 overlap between the exact Canny edges of the input and the output.
pub fn edge_preservation(x: &Image, gx: &Image, t: EdgeThresholds) -> Result<f64> {
    Ok(edge_counts(x, gx, t)?.f1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_class_names, ROAD};
    use proptest::prelude::*;

    fn seg(h: usize, w: usize, labels: Vec<u8>) -> SegMap {
        SegMap::new(h, w, labels, default_class_names()).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let data = (0..3 * h * w)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn equal_images_have_zero_error() {
        let img = random_image(8, 8, 1);
        let s = seg(8, 8, (0..64).map(|i| (i % 5) as u8).collect());
        let e = per_class_mae(&img, &img, &s).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.values().all(|&v| v == 0.0));
    }

    #[test]
    fn road_only_difference() {
        let a = Image::filled(4, 4, [0.1, 0.2, 0.3]).unwrap();
        let labels: Vec<u8> = (0..16).map(|i| if i < 8 { ROAD } else { 0 }).collect();
        let s = seg(4, 4, labels.clone());
        let mut b = a.clone();
        for (i, &l) in labels.iter().enumerate() {
            if l == ROAD {
                for c in 0..3 {
                    b.set(c, i / 4, i % 4, a.get(c, i / 4, i % 4) + 0.2);
                }
            }
        }
        let e = per_class_mae(&b, &a, &s).unwrap();
        assert!((e["road"] - 0.2).abs() < 1e-6);
        assert_eq!(e["sky"], 0.0);
        assert_eq!(e.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mae_matches_loop_and_is_symmetric(
            s1 in 0u64..1000, s2 in 0u64..1000, labels in proptest::collection::vec(0u8..5, 36)
        ) {
            let (a, b) = (random_image(6, 6, s1), random_image(6, 6, s2));
            let s = seg(6, 6, labels.clone());
            let e = per_class_mae(&a, &b, &s).unwrap();
            prop_assert_eq!(&e, &per_class_mae(&b, &a, &s).unwrap());
            for c in 0..5u8 {
                let mut sum = 0.0f64;
                let mut n = 0;
                for y in 0..6 {
                    for x in 0..6 {
                        if labels[y * 6 + x] == c {
                            for ch in 0..3 {
                                sum += (a.get(ch, y, x) as f64 - b.get(ch, y, x) as f64).abs() / 3.0;
                            }
                            n += 1;
                        }
                    }
                }
                let name = &default_class_names()[c as usize];
                if n == 0 {
                    prop_assert!(!e.contains_key(name));
                } else {
                    let want = sum / n as f64;
                    prop_assert!((e[name] - want).abs() <= 1e-6 * want.max(1e-12));
                }
            }
        }

        #[test]
        fn seg_scores_match_loop(pred in proptest::collection::vec(0u8..5, 30), gt in proptest::collection::vec(0u8..5, 30)) {
            let mut c = Confusion::new(5);
            c.add(&pred, &gt).unwrap();
            let s = c.scores(&default_class_names());
            let acc = pred.iter().zip(&gt).filter(|(p, g)| p == g).count() as f64 / 30.0;
            prop_assert!((s.pixel_accuracy - acc).abs() < 1e-12);
            let mut ious = Vec::new();
            for k in 0..5u8 {
                let inter = pred.iter().zip(&gt).filter(|(p, g)| **p == k && **g == k).count();
                let union = pred.iter().zip(&gt).filter(|(p, g)| **p == k || **g == k).count();
                if union > 0 {
                    ious.push(inter as f64 / union as f64);
                }
            }
            let miou = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((s.mean_iou - miou).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_segmentation() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 5) as u8).collect();
        let gt = seg(4, 4, labels.clone());
        let mut data = vec![0.0f32; 5 * 16];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * 16 + i] = 1.0;
        }
        let s = seg_accuracy(&ProbMap::new(5, 4, 4, data).unwrap(), &gt).unwrap();
        assert_eq!((s.pixel_accuracy, s.mean_iou), (1.0, 1.0));
    }

    #[test]
    fn uniform_probmap_predicts_the_tie_break_class() {
        // histogram oracle: accuracy is the frequency of class 0 in the labels
        let labels: Vec<u8> = vec![0, 0, 1, 2, 2, 2, 3, 4, 0, 1, 1, 4, 0, 3, 2, 2];
        let gt = seg(4, 4, labels.clone());
        let s = seg_accuracy(&ProbMap::uniform(5, 4, 4).unwrap(), &gt).unwrap();
        let freq = gt.histogram()[0] as f64 / 16.0;
        assert!((s.pixel_accuracy - freq).abs() < 1e-12);
        // class 0: intersection 4, union 16; all other classes have IoU 0
        assert!((s.iou["sky"] - 0.25).abs() < 1e-12);
        assert!((s.mean_iou - 0.25 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_ground_truth() {
        let gt = seg(4, 4, vec![ROAD; 16]);
        let mut data = vec![0.0f32; 5 * 16];
        data[ROAD as usize * 16..(ROAD as usize + 1) * 16].fill(1.0);
        let s = seg_accuracy(&ProbMap::new(5, 4, 4, data).unwrap(), &gt).unwrap();
        assert_eq!(s.mean_iou, 1.0);
        assert_eq!(s.iou.len(), 1);
    }

    fn step_image(h: usize, w: usize, col: usize) -> Image {
        let mut img = Image::filled(h, w, [-0.8; 3]).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in col..w {
                    img.set(c, y, x, 0.8);
                }
            }
        }
        img
    }

    #[test]
    fn identical_and_constant_outputs() {
        let x = step_image(16, 24, 10);
        let t = EdgeThresholds::default();
        assert_eq!(edge_preservation(&x, &x, t).unwrap(), 1.0);
        let flat = Image::filled(16, 24, [0.3; 3]).unwrap();
        assert_eq!(edge_preservation(&x, &flat, t).unwrap(), 0.0);
    }

    #[test]
    fn displaced_step_edge() {
        let (h, w, col) = (16, 32, 12);
        let t = EdgeThresholds::default();
        let base = canny_relative(&step_image(h, w, col), t.low, t.high).unwrap();
        // the edge of a full-height step is a set of whole columns
        let cols: Vec<usize> = (0..w).filter(|&x| base.get(h / 2, x)).collect();
        assert!(!cols.is_empty());
        for x in 0..w {
            assert!((0..h).all(|y| base.get(y, x) == cols.contains(&x)));
        }
        for d in 0..6usize {
            let shifted: Vec<usize> = cols.iter().map(|c| c + d).collect();
            let hit = |a: &[usize], b: &[usize]| a.iter().filter(|&&c| b.iter().any(|&e| c.abs_diff(e) <= 1)).count();
            let p = hit(&shifted, &cols) as f64 / shifted.len() as f64;
            let r = hit(&cols, &shifted) as f64 / cols.len() as f64;
            let want = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let got = edge_preservation(&step_image(h, w, col), &step_image(h, w, col + d), t).unwrap();
            assert!((got - want).abs() < 1e-12, "d={d}: {got} vs {want}");
        }
    }
}
