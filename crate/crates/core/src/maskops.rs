//! Segmentation maps to stream masks, and the masked per-stream inputs of the
//! multi-stream generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Image, SegMap};
use crate::{Error, Result};

/// Grouping of classes into generator streams, keyed by class name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub streams: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl Default for StreamSpec {
    /// Vehicles, road surface (road and markings), everything else.
    fn default() -> Self {
        let assignment = [
            ("vehicle", 0),
            ("road", 1),
            ("marking", 1),
            ("sky", 2),
            ("building", 2),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            streams: 3,
            assignment,
        }
    }
}

impl StreamSpec {
    /// Every class routed to a single stream.
    pub fn single(class_names: &[String]) -> Self {
        Self {
            streams: 1,
            assignment: class_names.iter().map(|n| (n.clone(), 0)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::Config("stream count must be at least 1".into()));
        }
        let mut used = vec![false; self.streams];
        for (name, &s) in &self.assignment {
            if s >= self.streams {
                return Err(Error::Config(format!(
                    "class `{name}` assigned to stream {s} but only {} streams exist",
                    self.streams
                )));
            }
            used[s] = true;
        }
        if let Some(unused) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!("stream {unused} has no classes")));
        }
        Ok(())
    }

    /// Class id to stream index table for the given palette.
    pub fn resolve(&self, class_names: &[String]) -> Result<Vec<usize>> {
        self.validate()?;
        class_names
            .iter()
            .enumerate()
            .map(|(id, name)| {
                self.assignment
                    .get(name)
                    .copied()
                    .ok_or(Error::UnassignedClass { class: id })
            })
            .collect()
    }

    /// Index of the stream holding the most classes, used as the catch-all
    /// "everything else" stream. Ties go to the highest index.
    pub fn fallback_stream(&self) -> usize {
        let mut counts = vec![0usize; self.streams];
        for &s in self.assignment.values() {
            counts[s] += 1;
        }
        counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (s, &n)| if n >= acc.1 { (s, n) } else { acc })
            .0
    }
}

/// K binary masks over an HxW grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    masks: Vec<Vec<u8>>,
}

impl MaskSet {
    /// Builds a mask set, rejecting anything that is not an exact partition.
    pub fn new(height: usize, width: usize, masks: Vec<Vec<u8>>) -> Result<Self> {
        let set = Self::from_raw(height, width, masks)?;
        set.check_partition()?;
        Ok(set)
    }

    fn from_raw(height: usize, width: usize, masks: Vec<Vec<u8>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidInput("mask set needs at least one mask".into()));
        }
        if masks.iter().any(|m| m.len() != height * width) {
            return Err(Error::ShapeMismatch(format!(
                "every mask must hold {} values",
                height * width
            )));
        }
        if masks.iter().flatten().any(|&v| v > 1) {
            return Err(Error::InvalidInput("masks must be binary".into()));
        }
        Ok(Self {
            height,
            width,
            masks,
        })
    }

    /// Masks from a per-pixel stream index.
    pub fn from_stream_indices(
        height: usize,
        width: usize,
        streams: usize,
        index: &[usize],
    ) -> Result<Self> {
        if index.len() != height * width {
            return Err(Error::ShapeMismatch("stream index length".into()));
        }
        let mut masks = vec![vec![0u8; height * width]; streams];
        for (p, &s) in index.iter().enumerate() {
            if s >= streams {
                return Err(Error::IndexOutOfRange {
                    index: s,
                    len: streams,
                });
            }
            masks[s][p] = 1;
        }
        Self::new(height, width, masks)
    }

    /// Routes every pixel to stream `k`.
    pub fn all_in_stream(height: usize, width: usize, streams: usize, k: usize) -> Result<Self> {
        Self::from_stream_indices(height, width, streams, &vec![k; height * width])
    }

    pub fn streams(&self) -> usize {
        self.masks.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self, k: usize) -> &[u8] {
        &self.masks[k]
    }

    pub fn masks(&self) -> &[Vec<u8>] {
        &self.masks
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| m.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn is_partition(&self) -> bool {
        self.check_partition().is_ok()
    }

    fn check_partition(&self) -> Result<()> {
        for p in 0..self.height * self.width {
            let sum: u32 = self.masks.iter().map(|m| m[p] as u32).sum();
            if sum != 1 {
                return Err(Error::InvalidInput(format!(
                    "masks are not a partition: pixel {p} covered {sum} times"
                )));
            }
        }
        Ok(())
    }

    /// Stream index per pixel. Only meaningful for partitions.
    pub fn stream_indices(&self) -> Vec<usize> {
        (0..self.height * self.width)
            .map(|p| self.masks.iter().position(|m| m[p] == 1).unwrap_or(0))
            .collect()
    }
}

/// K masked copies of one image; part k is zero wherever mask k is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBundle {
    parts: Vec<Image>,
}

impl StreamBundle {
    pub fn new(parts: Vec<Image>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("empty stream bundle".into()))?
            .dims();
        if parts.iter().any(|p| p.dims() != first) {
            return Err(Error::ShapeMismatch("bundle parts differ in size".into()));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[Image] {
        &self.parts
    }

    pub fn streams(&self) -> usize {
        self.parts.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.parts[0].dims()
    }

    /// Channel-stacked values, stream-major: `[stream][channel][y][x]`.
    pub fn stacked(&self) -> Vec<f32> {
        self.parts.iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

pub fn masks_from_segmap(segmap: &SegMap, spec: &StreamSpec) -> Result<MaskSet> {
    let table = spec.resolve(segmap.class_names())?;
    let index: Vec<usize> = segmap.labels().iter().map(|&c| table[c as usize]).collect();
    MaskSet::from_stream_indices(segmap.height(), segmap.width(), spec.streams, &index)
}

/// Masks the image once per stream; masked-out pixels take the value 0.
pub fn split(image: &Image, maskset: &MaskSet) -> Result<StreamBundle> {
    if image.dims() != maskset.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs masks {:?}",
            image.dims(),
            maskset.dims()
        )));
    }
    let (h, w) = image.dims();
    let parts = maskset
        .masks
        .iter()
        .map(|m| {
            let data = (0..3 * h * w)
                .map(|i| if m[i % (h * w)] == 1 { image.data()[i] } else { 0.0 })
                .collect();
            Image::new(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    StreamBundle::new(parts)
}

/// Pixelwise sum of the parts.
pub fn recombine(bundle: &StreamBundle) -> Result<Image> {
    let (h, w) = bundle.dims();
    let mut acc = vec![0f32; 3 * h * w];
    for part in &bundle.parts {
        for (a, v) in acc.iter_mut().zip(part.data()) {
            *a += v;
        }
    }
    Image::new(h, w, acc)
}

/// Exchanges masks `i` and `j`, routing each group's pixels into the other
/// group's stream.
pub fn swap_streams(maskset: &MaskSet, i: usize, j: usize) -> Result<MaskSet> {
    let k = maskset.streams();
    for idx in [i, j] {
        if idx >= k {
            return Err(Error::IndexOutOfRange { index: idx, len: k });
        }
    }
    let mut out = maskset.clone();
    out.masks.swap(i, j);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{default_class_names, synth_scene, SceneSpec, ROAD, VEHICLE};

    fn names() -> Vec<String> {
        default_class_names()
    }

    #[test]
    fn single_class_routes_to_its_stream() {
        let mut spec = StreamSpec::default();
        spec.assignment.insert("road".into(), 2);
        spec.assignment.insert("sky".into(), 1);
        let seg = SegMap::filled(4, 4, ROAD, names()).unwrap();
        let m = masks_from_segmap(&seg, &spec).unwrap();
        assert!(m.mask(2).iter().all(|&v| v == 1));
        assert!(m.mask(0).iter().all(|&v| v == 0));
        assert!(m.mask(1).iter().all(|&v| v == 0));
    }

    #[test]
    fn stream_counts_match_grouped_histogram() {
        let spec = StreamSpec::default();
        for seed in 0..5 {
            let seg = synth_scene(&SceneSpec::default(), seed).unwrap().segmap.unwrap();
            let hist = seg.histogram();
            let counts = masks_from_segmap(&seg, &spec).unwrap().pixel_counts();
            // vehicle | road + marking | sky + building
            assert_eq!(counts, vec![hist[3], hist[2] + hist[4], hist[0] + hist[1]]);
        }
    }

    #[test]
    fn unassigned_class_is_rejected() {
        let mut spec = StreamSpec::default();
        spec.assignment.remove("marking");
        let seg = SegMap::filled(2, 2, 0, names()).unwrap();
        assert!(matches!(
            masks_from_segmap(&seg, &spec),
            Err(Error::UnassignedClass { class: 4 })
        ));
    }

    #[test]
    fn sparse_stream_indices_are_rejected() {
        let mut spec = StreamSpec::default();
        spec.assignment.insert("vehicle".into(), 2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn full_mask_passes_image_through() {
        let img = Image::new(2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let m = MaskSet::all_in_stream(2, 2, 3, 0).unwrap();
        let b = split(&img, &m).unwrap();
        assert_eq!(b.parts()[0], img);
        assert!(b.parts()[1].data().iter().all(|&v| v == 0.0));
        assert!(b.parts()[2].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_split_hand_computed() {
        // channel c, pixel p holds (c * 16 + p) / 64
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 64.0).collect();
        let img = Image::new(4, 4, data).unwrap();
        let index: Vec<usize> = (0..16).map(|p| (p / 4 + p % 4) % 2).collect();
        let m = MaskSet::from_stream_indices(4, 4, 2, &index).unwrap();
        let b = split(&img, &m).unwrap();
        // pixel (0,0) is even -> stream 0; pixel (0,1) odd -> stream 1
        assert_eq!(b.parts()[0].get(0, 0, 0), 0.0 / 64.0);
        assert_eq!(b.parts()[1].get(0, 0, 0), 0.0);
        assert_eq!(b.parts()[0].get(1, 0, 1), 0.0);
        assert_eq!(b.parts()[1].get(1, 0, 1), 17.0 / 64.0);
        assert_eq!(b.parts()[0].get(2, 3, 3), 47.0 / 64.0);
        assert_eq!(b.parts()[1].get(2, 3, 2), 46.0 / 64.0);
        assert_eq!(b.parts()[1].get(2, 3, 3), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = Image::zeros(4, 4).unwrap();
        let m = MaskSet::all_in_stream(2, 2, 1, 0).unwrap();
        assert!(matches!(split(&img, &m), Err(Error::ShapeMismatch(_))));
        let b = StreamBundle::new(vec![Image::zeros(4, 4).unwrap(), Image::zeros(2, 4).unwrap()]);
        assert!(b.is_err());
    }

    #[test]
    fn zero_bundle_recombines_to_zero() {
        let b = StreamBundle::new(vec![Image::zeros(4, 8).unwrap(); 3]).unwrap();
        assert_eq!(recombine(&b).unwrap(), Image::zeros(4, 8).unwrap());
    }

    #[test]
    fn overlapping_masks_break_the_identity() {
        let img = Image::filled(2, 2, [0.25, -0.25, 0.5]).unwrap();
        let raw = MaskSet::from_raw(2, 2, vec![vec![1, 1, 0, 0], vec![1, 0, 1, 1]]).unwrap();
        assert!(!raw.is_partition());
        assert!(MaskSet::new(2, 2, raw.masks().to_vec()).is_err());
        let back = recombine(&split(&img, &raw).unwrap()).unwrap();
        assert_ne!(back, img);
        assert_eq!(back.get(0, 0, 0), 0.5);
    }

    #[test]
    fn swap_routes_vehicles_into_road_stream() {
        let seg = synth_scene(&SceneSpec::default(), 4).unwrap().segmap.unwrap();
        let m = masks_from_segmap(&seg, &StreamSpec::default()).unwrap();
        let s = swap_streams(&m, 0, 1).unwrap();
        for (p, &l) in seg.labels().iter().enumerate() {
            if l == VEHICLE {
                assert_eq!(s.mask(1)[p], 1);
            }
            if l == ROAD {
                assert_eq!(s.mask(0)[p], 1);
            }
        }
        assert!(swap_streams(&m, 0, 3).is_err());
    }

    fn partition_strategy() -> impl Strategy<Value = (Image, MaskSet)> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, k)| {
            (
                prop::collection::vec(-1.0f32..=1.0, 3 * h * w),
                prop::collection::vec(0..k, h * w),
            )
                .prop_map(move |(data, idx)| {
                    (
                        Image::new(h, w, data).unwrap(),
                        MaskSet::from_stream_indices(h, w, k, &idx).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn partition_holds((_img, m) in partition_strategy()) {
            prop_assert!(m.is_partition());
            let (h, w) = m.dims();
            prop_assert_eq!(m.pixel_counts().iter().sum::<usize>(), h * w);
        }

        #[test]
        fn split_recombine_is_exact((img, m) in partition_strategy()) {
            prop_assert_eq!(recombine(&split(&img, &m).unwrap()).unwrap(), img);
        }

        #[test]
        fn masking_is_idempotent((img, m) in partition_strategy()) {
            let once = split(&img, &m).unwrap();
            let twice = split(&recombine(&once).unwrap(), &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn swap_is_an_involution((_img, m) in partition_strategy(), a in 0usize..4, b in 0usize..4) {
            let k = m.streams();
            let (i, j) = (a % k, b % k);
            let s = swap_streams(&m, i, j).unwrap();
            prop_assert!(s.is_partition());
            let mut before = m.pixel_counts();
            let mut after = s.pixel_counts();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
            prop_assert_eq!(swap_streams(&s, i, j).unwrap(), m);
        }
    }
}
