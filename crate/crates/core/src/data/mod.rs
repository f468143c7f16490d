//! Dataset model: images, segmentation maps, samples, the procedural scene
//! generator with its day-to-night oracle, resampling and file I/O.

pub(crate) mod io;
pub(crate) mod resample;
mod scene;

pub use io::{
    load_image, load_manifest, load_sample, load_segmap, save_image, save_sample, save_segmap,
    synth_dataset, DatasetManifest, ManifestRecord, MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use resample::{downsample, gaussian_blur, upsample_nearest};
pub use scene::{
    day_to_night_oracle, synth_scene, vehicle_components, ClassTransform, ColoredRect,
    LightSpec, Rect, SceneLayout, SceneSpec,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const MARKING: u8 = 4;

/// Class names of the synthetic palette, indexed by class id.
pub const CLASS_NAMES: [&str; 5] = ["sky", "building", "road", "vehicle", "marking"];

/// Display colours for the indexed segmap files.
pub const CLASS_COLORS: [[u8; 3]; 5] = [
    [70, 130, 180],
    [70, 70, 70],
    [128, 64, 128],
    [0, 0, 142],
    [255, 255, 255],
];

pub fn default_class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// A 3-channel image in the canonical [-1, 1] range, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {height}x{width} image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "image value {v} outside the canonical range [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping every value into [-1, 1]. Non-finite
    /// values are rejected.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "image".into(),
            });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self::new(height, width, data)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sets a value, clamping it into range.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = v.clamp(-1.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Pipeline images must be at least 8x8 with both sides divisible by 4.
    pub fn check_pipeline_dims(&self) -> Result<()> {
        check_pipeline_dims(self.height, self.width)
    }

    pub fn horizontal_flip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] =
                        self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }
}

pub(crate) fn check_pipeline_dims(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "resolution {height}x{width} must be at least 8x8 and divisible by 4"
        )));
    }
    Ok(())
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

impl SegMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                labels.len()
            )));
        }
        if class_names.is_empty() || class_names.len() > 256 {
            return Err(Error::InvalidInput("segmap needs 1..=256 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            class_names,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8, class_names: Vec<String>) -> Result<Self> {
        Self::new(height, width, vec![class; height * width], class_names)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// Block-majority downsampling; ties go to the lowest class id.
    pub fn downsample(&self, factor: usize) -> Result<SegMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidInput(format!(
                "factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(oh * ow);
        let mut counts = vec![0usize; self.class_names.len()];
        for oy in 0..oh {
            for ox in 0..ow {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .fold((0usize, 0usize), |acc, (c, &n)| if n > acc.1 { (c, n) } else { acc });
                out.push(best.0 as u8);
            }
        }
        SegMap::new(oh, ow, out, self.class_names.clone())
    }

    pub fn horizontal_flip(&self) -> SegMap {
        let mut labels = self.labels.clone();
        for y in 0..self.height {
            labels[y * self.width..(y + 1) * self.width].reverse();
        }
        SegMap {
            labels,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::A => f.write_str("A"),
            Domain::B => f.write_str("B"),
        }
    }
}

/// An image with its optional segmentation map and domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub segmap: Option<SegMap>,
    pub domain: Domain,
}

impl Sample {
    pub fn new(image: Image, segmap: Option<SegMap>, domain: Domain) -> Result<Self> {
        if let Some(seg) = &segmap {
            if seg.dims() != image.dims() {
                return Err(Error::DimensionMismatch {
                    image: image.dims(),
                    segmap: seg.dims(),
                });
            }
        } else if domain == Domain::A {
            return Err(Error::InvalidInput(
                "domain-A samples must carry a segmap".into(),
            ));
        }
        Ok(Self {
            image,
            segmap,
            domain,
        })
    }

    pub fn segmap(&self) -> Result<&SegMap> {
        self.segmap
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("sample has no segmap".into()))
    }
}
