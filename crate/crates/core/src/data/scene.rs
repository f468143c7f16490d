use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_pipeline_dims, default_class_names, Domain, Image, Sample, SegMap, BUILDING, MARKING,
    ROAD, SKY, VEHICLE,
};
use crate::{Error, Result};

/// Per-channel affine map applied to one class by the night oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTransform {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
}

impl ClassTransform {
    pub const IDENTITY: ClassTransform = ClassTransform {
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    pub fn uniform(gain: f32, bias: f32) -> Self {
        Self {
            gain: [gain; 3],
            bias: [bias; 3],
        }
    }

    #[inline]
    pub fn apply(&self, c: usize, v: f32) -> f32 {
        self.gain[c] * v + self.bias[c]
    }

    /// An affine map sends [-1, 1] into [-1, 1] iff |gain| + |bias| <= 1.
    pub fn preserves_range(&self) -> bool {
        (0..3).all(|c| self.gain[c].abs() + self.bias[c].abs() <= 1.0 + 1e-6)
    }
}

/// Emission added by the oracle near the lower corners of each vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    /// Gaussian radius as a fraction of the image width.
    pub radius: f32,
    /// Inset of the blob centres from the vehicle's lower corners, as a
    /// fraction of the image width.
    pub inset: f32,
    pub color: [f32; 3],
    pub intensity: f32,
}

impl LightSpec {
    pub const OFF: LightSpec = LightSpec {
        radius: 0.02,
        inset: 0.03,
        color: [0.0; 3],
        intensity: 0.0,
    };
}

/// Parameters of the procedural urban-scene generator.
///
/// Lengths are fractions of the image height or width so the same spec
/// renders at any resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Range of the horizon row as a fraction of the height.
    pub horizon: [f32; 2],
    pub buildings: [usize; 2],
    pub building_width: [f32; 2],
    pub building_height: [f32; 2],
    pub vehicles: [usize; 2],
    pub vehicle_width: [f32; 2],
    pub vehicle_height: [f32; 2],
    /// Dash length and gap of the lane marking, as fractions of the width.
    pub marking_dash: [f32; 2],
    pub pixel_noise: f32,
    /// Night transform per class id (sky, building, road, vehicle, marking).
    pub night: Vec<ClassTransform>,
    pub lights: LightSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::desk(64, 64)
    }
}

impl SceneSpec {
    /// The default desk-scale scene at the given resolution.
    pub fn desk(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            horizon: [0.40, 0.52],
            buildings: [2, 4],
            building_width: [0.14, 0.30],
            building_height: [0.15, 0.34],
            vehicles: [1, 3],
            vehicle_width: [0.16, 0.28],
            vehicle_height: [0.10, 0.17],
            marking_dash: [0.12, 0.08],
            pixel_noise: 0.02,
            night: vec![
                // sky: near-black, blue tint
                ClassTransform {
                    gain: [0.15, 0.15, 0.2],
                    bias: [-0.8, -0.75, -0.55],
                },
                // building: dark
                ClassTransform::uniform(0.25, -0.65),
                // road: dark
                ClassTransform::uniform(0.3, -0.6),
                // vehicle: lit, keeps its colour
                ClassTransform::uniform(0.7, -0.1),
                // marking: shines, warm tint
                ClassTransform {
                    gain: [0.35, 0.35, 0.3],
                    bias: [0.55, 0.5, 0.2],
                },
            ],
            lights: LightSpec {
                radius: 0.025,
                inset: 0.03,
                color: [1.0, 0.25, 0.1],
                intensity: 1.2,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        super::CLASS_NAMES.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_pipeline_dims(self.height, self.width)?;
        if self.night.len() != self.num_classes() {
            return Err(Error::Config(format!(
                "scene spec needs {} night transforms, got {}",
                self.num_classes(),
                self.night.len()
            )));
        }
        if let Some(i) = self.night.iter().position(|t| !t.preserves_range()) {
            return Err(Error::Config(format!(
                "night transform for class {i} does not map [-1,1] into [-1,1]"
            )));
        }
        let frac_ranges = [
            ("horizon", self.horizon),
            ("building_width", self.building_width),
            ("building_height", self.building_height),
            ("vehicle_width", self.vehicle_width),
            ("vehicle_height", self.vehicle_height),
        ];
        for (name, [lo, hi]) in frac_ranges {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("invalid range {name} = [{lo}, {hi}]")));
            }
        }
        if self.buildings[0] > self.buildings[1] || self.vehicles[0] > self.vehicles[1] {
            return Err(Error::Config("count range with min > max".into()));
        }
        if self.marking_dash.iter().any(|v| *v <= 0.0) {
            return Err(Error::Config("marking dash and gap must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.pixel_noise) {
            return Err(Error::Config("pixel_noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredRect {
    pub rect: Rect,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Building {
    pub body: ColoredRect,
    pub window_color: [f32; 3],
}

/// The primitives of one scene, sampled from a [`SceneSpec`] and a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub horizon: usize,
    pub sky_top: [f32; 3],
    pub sky_bottom: [f32; 3],
    pub road: [f32; 3],
    pub buildings: Vec<Building>,
    pub markings: Vec<ColoredRect>,
    pub vehicles: Vec<ColoredRect>,
    pub noise_seed: u64,
    pub pixel_noise: f32,
}

const VEHICLE_PALETTE: [[f32; 3]; 7] = [
    [0.8, 0.8, 0.8],
    [0.25, 0.25, 0.3],
    [-0.6, -0.6, -0.6],
    [0.6, -0.55, -0.55],
    [-0.5, -0.3, 0.6],
    [-0.35, -0.35, -0.35],
    [0.55, 0.45, -0.4],
];

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let shift = rng.random_range(-amount..=amount);
    base.map(|v| (v + shift + rng.random_range(-amount..=amount) * 0.3).clamp(-1.0, 1.0))
}

fn frac_len(rng: &mut ChaCha8Rng, range: [f32; 2], extent: usize) -> usize {
    let f = if range[0] < range[1] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    };
    ((f * extent as f32).round() as usize).clamp(1, extent)
}

impl SceneLayout {
    pub fn sample(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (h, w) = (spec.height, spec.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let hz = rng.random_range(spec.horizon[0]..=spec.horizon[1]);
        let horizon = ((hz * h as f32).round() as usize).clamp(2, h - 2);

        let sky_top = jitter(&mut rng, [-0.2, 0.2, 0.8], 0.1);
        let sky_bottom = jitter(&mut rng, [0.4, 0.6, 0.85], 0.08);
        let road_level = rng.random_range(-0.5..-0.3);
        let road = [road_level, road_level, road_level + 0.03];

        let n_buildings = rng.random_range(spec.buildings[0]..=spec.buildings[1]);
        let mut buildings = Vec::with_capacity(n_buildings);
        for _ in 0..n_buildings {
            let bw = frac_len(&mut rng, spec.building_width, w);
            let bh = frac_len(&mut rng, spec.building_height, h).min(horizon);
            let x0 = rng.random_range(0..=w - bw);
            let level = rng.random_range(-0.3..0.6);
            let tint = rng.random_range(-0.1..0.1);
            buildings.push(Building {
                body: ColoredRect {
                    rect: Rect {
                        y0: horizon - bh,
                        x0,
                        y1: horizon,
                        x1: x0 + bw,
                    },
                    color: [level + tint, level, level - tint],
                },
                window_color: jitter(&mut rng, [-0.45, -0.4, -0.2], 0.1),
            });
        }

        let road_rows = h - horizon;
        let thickness = (h / 32).max(1);
        let my = horizon + (road_rows * 11) / 20;
        let my = my.min(h - thickness);
        let dash = ((spec.marking_dash[0] * w as f32).round() as usize).max(1);
        let gap = ((spec.marking_dash[1] * w as f32).round() as usize).max(1);
        let phase = rng.random_range(0..dash + gap);
        let marking_color = jitter(&mut rng, [0.85, 0.85, 0.8], 0.05);
        let mut markings = Vec::new();
        let mut start = -(phase as isize);
        while start < w as isize {
            let x0 = start.max(0) as usize;
            let x1 = ((start + dash as isize).max(0) as usize).min(w);
            if x1 > x0 {
                markings.push(ColoredRect {
                    rect: Rect {
                        y0: my,
                        x0,
                        y1: my + thickness,
                        x1,
                    },
                    color: marking_color,
                });
            }
            start += (dash + gap) as isize;
        }

        let n_vehicles = rng.random_range(spec.vehicles[0]..=spec.vehicles[1]);
        let mut vehicles = Vec::with_capacity(n_vehicles);
        for _ in 0..n_vehicles {
            let vw = frac_len(&mut rng, spec.vehicle_width, w);
            let vh = frac_len(&mut rng, spec.vehicle_height, h).min(road_rows);
            let x0 = rng.random_range(0..=w - vw);
            let y0 = rng.random_range(horizon..=h - vh);
            let base = VEHICLE_PALETTE[rng.random_range(0..VEHICLE_PALETTE.len())];
            vehicles.push(ColoredRect {
                rect: Rect {
                    y0,
                    x0,
                    y1: y0 + vh,
                    x1: x0 + vw,
                },
                color: jitter(&mut rng, base, 0.08),
            });
        }

        Ok(Self {
            height: h,
            width: w,
            horizon,
            sky_top,
            sky_bottom,
            road,
            buildings,
            markings,
            vehicles,
            noise_seed: rng.random(),
            pixel_noise: spec.pixel_noise,
        })
    }

    /// Rasterises the layout into a domain-A sample. Paint order is sky,
    /// road, markings, buildings, vehicles; later primitives occlude earlier
    /// ones in both the image and the segmap.
    pub fn render(&self) -> Result<Sample> {
        let (h, w) = (self.height, self.width);
        let mut rgb = vec![[0f32; 3]; h * w];
        let mut labels = vec![SKY; h * w];

        for y in 0..h {
            let (color, class) = if y < self.horizon {
                let t = y as f32 / (self.horizon.max(2) - 1) as f32;
                let c = [0, 1, 2].map(|i| self.sky_top[i] * (1.0 - t) + self.sky_bottom[i] * t);
                (c, SKY)
            } else {
                (self.road, ROAD)
            };
            for x in 0..w {
                rgb[y * w + x] = color;
                labels[y * w + x] = class;
            }
        }
        let mut paint = |r: &Rect, color: [f32; 3], class: u8| {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    rgb[y * w + x] = color;
                    labels[y * w + x] = class;
                }
            }
        };
        for m in &self.markings {
            paint(&m.rect, m.color, MARKING);
        }
        for b in &self.buildings {
            paint(&b.body.rect, b.body.color, BUILDING);
            let r = b.body.rect;
            // 2x2 windows on a pitch of 4 pixels, inset by one pixel
            let mut y = r.y0 + 1;
            while y + 2 < r.y1 {
                let mut x = r.x0 + 1;
                while x + 2 < r.x1 {
                    let win = Rect {
                        y0: y,
                        x0: x,
                        y1: y + 2,
                        x1: x + 2,
                    };
                    paint(&win, b.window_color, BUILDING);
                    x += 4;
                }
                y += 4;
            }
        }
        for v in &self.vehicles {
            paint(&v.rect, v.color, VEHICLE);
        }

        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut data = vec![0f32; 3 * h * w];
        for (p, px) in rgb.iter().enumerate() {
            for c in 0..3 {
                let n = if self.pixel_noise > 0.0 {
                    noise_rng.random_range(-self.pixel_noise..=self.pixel_noise)
                } else {
                    0.0
                };
                data[c * h * w + p] = (px[c] + n).clamp(-1.0, 1.0);
            }
        }
        let image = Image::new(h, w, data)?;
        let segmap = SegMap::new(h, w, labels, default_class_names())?;
        Sample::new(image, Some(segmap), Domain::A)
    }
}

/// Generates a deterministic domain-A day scene.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    SceneLayout::sample(spec, seed)?.render()
}

/// Bounding boxes (half-open) and pixel lists of the 4-connected vehicle
/// components of a segmap, in raster order of their first pixel.
pub fn vehicle_components(segmap: &SegMap) -> Vec<(Rect, Vec<(usize, usize)>)> {
    let (h, w) = segmap.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || segmap.get(sy, sx) != VEHICLE {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(sy, sx)]);
            seen[sy * w + sx] = true;
            let mut bbox = Rect {
                y0: sy,
                x0: sx,
                y1: sy + 1,
                x1: sx + 1,
            };
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                bbox.y0 = bbox.y0.min(y);
                bbox.x0 = bbox.x0.min(x);
                bbox.y1 = bbox.y1.max(y + 1);
                bbox.x1 = bbox.x1.max(x + 1);
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && !seen[ny * w + nx] && segmap.get(ny, nx) == VEHICLE {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push((bbox, pixels));
        }
    }
    out
}

/// Ground-truth night rendering of a day sample: each pixel gets its class's
/// affine transform, vehicles additionally receive two light blobs near the
/// lower corners of their connected component; the result is clamped.
pub fn day_to_night_oracle(sample: &Sample, spec: &SceneSpec) -> Result<Image> {
    let segmap = sample
        .segmap
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("night oracle requires a segmap".into()))?;
    let image = &sample.image;
    if segmap.dims() != image.dims() {
        return Err(Error::DimensionMismatch {
            image: image.dims(),
            segmap: segmap.dims(),
        });
    }
    if spec.night.len() < segmap.num_classes() {
        return Err(Error::Config("missing night transforms for some classes".into()));
    }
    let (h, w) = image.dims();
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = &spec.night[segmap.get(y, x) as usize];
            for c in 0..3 {
                out[(c * h + y) * w + x] = t.apply(c, image.get(c, y, x));
            }
        }
    }

    let lights = &spec.lights;
    if lights.intensity != 0.0 {
        let radius = (lights.radius * w as f32).max(1e-3);
        let inset = lights.inset * w as f32;
        for (bbox, pixels) in vehicle_components(segmap) {
            let half_w = (bbox.x1 - bbox.x0) as f32 / 2.0;
            let half_h = (bbox.y1 - bbox.y0) as f32 / 2.0;
            let ix = inset.min(half_w - 0.5).max(0.0);
            let iy = inset.min(half_h - 0.5).max(0.0);
            let cy = (bbox.y1 - 1) as f32 - iy;
            let centres = [(cy, bbox.x0 as f32 + ix), (cy, (bbox.x1 - 1) as f32 - ix)];
            for (y, x) in pixels {
                let glow: f32 = centres
                    .iter()
                    .map(|&(by, bx)| {
                        let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                        (-d2 / (2.0 * radius * radius)).exp()
                    })
                    .sum();
                for c in 0..3 {
                    out[(c * h + y) * w + x] += lights.color[c] * lights.intensity * glow;
                }
            }
        }
    }
    Image::from_clamped(h, w, out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn empty_scene_has_only_sky_road_marking() {
        let mut spec = SceneSpec::default();
        spec.buildings = [0, 0];
        spec.vehicles = [0, 0];
        for seed in 0..5 {
            let s = synth_scene(&spec, seed).unwrap();
            let hist = s.segmap.unwrap().histogram();
            assert_eq!(hist[BUILDING as usize], 0);
            assert_eq!(hist[VEHICLE as usize], 0);
            assert!(hist[SKY as usize] > 0 && hist[ROAD as usize] > 0 && hist[MARKING as usize] > 0);
        }
    }

    #[test]
    fn synth_scene_is_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(synth_scene(&spec, 42).unwrap(), synth_scene(&spec, 42).unwrap());
        assert_ne!(synth_scene(&spec, 42).unwrap(), synth_scene(&spec, 43).unwrap());
    }

    #[test]
    fn vehicle_pixels_match_independent_rasterisation() {
        let mut spec = SceneSpec::default();
        spec.vehicles = [3, 3];
        let layout = SceneLayout::sample(&spec, 7).unwrap();
        assert_eq!(layout.vehicles.len(), 3);
        // oracle: brute-force union of the three rectangles
        let mut covered = HashSet::new();
        for v in &layout.vehicles {
            for y in v.rect.y0..v.rect.y1 {
                for x in v.rect.x0..v.rect.x1 {
                    covered.insert((y, x));
                }
            }
        }
        let sum_areas: usize = layout.vehicles.iter().map(|v| v.rect.area()).sum();
        assert!(covered.len() <= sum_areas);
        let seg = layout.render().unwrap().segmap.unwrap();
        assert_eq!(seg.histogram()[VEHICLE as usize], covered.len());
        for &(y, x) in &covered {
            assert_eq!(seg.get(y, x), VEHICLE);
        }
    }

    #[test]
    fn segmap_partitions_every_pixel() {
        let spec = SceneSpec::desk(32, 48);
        for seed in 0..10 {
            let seg = synth_scene(&spec, seed).unwrap().segmap.unwrap();
            assert_eq!(seg.histogram().iter().sum::<usize>(), 32 * 48);
        }
    }

    #[test]
    fn rejects_tiny_resolution() {
        assert!(synth_scene(&SceneSpec::desk(4, 4), 0).is_err());
        assert!(synth_scene(&SceneSpec::desk(8, 8), 0).is_ok());
    }

    fn identity_spec() -> SceneSpec {
        let mut spec = SceneSpec::default();
        spec.night = vec![ClassTransform::IDENTITY; 5];
        spec.lights = LightSpec::OFF;
        spec
    }

    #[test]
    fn identity_oracle_is_identity() {
        let spec = identity_spec();
        let s = synth_scene(&SceneSpec::default(), 3).unwrap();
        assert_eq!(day_to_night_oracle(&s, &spec).unwrap(), s.image);
    }

    #[test]
    fn single_class_affine() {
        let mut spec = identity_spec();
        spec.night[ROAD as usize] = ClassTransform::uniform(0.5, -0.4);
        let data: Vec<f32> = (0..3 * 64).map(|i| (i as f32 / 96.0) - 1.0).collect();
        let image = Image::new(8, 8, data.clone()).unwrap();
        let seg = SegMap::filled(8, 8, ROAD, default_class_names()).unwrap();
        let sample = Sample::new(image, Some(seg), Domain::A).unwrap();
        let out = day_to_night_oracle(&sample, &spec).unwrap();
        for (o, i) in out.data().iter().zip(&data) {
            assert!((o - (0.5 * i - 0.4)).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_scene_matches_masked_sum_loop() {
        let mut spec = SceneSpec::default();
        spec.lights = LightSpec::OFF;
        let s = synth_scene(&spec, 11).unwrap();
        let seg = s.segmap.clone().unwrap();
        let out = day_to_night_oracle(&s, &spec).unwrap();
        // per-class masked transform, summed over classes
        let (h, w) = s.image.dims();
        let mut expected = vec![0f32; 3 * h * w];
        for class in 0..5u8 {
            for y in 0..h {
                for x in 0..w {
                    let m = if seg.get(y, x) == class { 1.0 } else { 0.0 };
                    for c in 0..3 {
                        let v = spec.night[class as usize].apply(c, s.image.get(c, y, x));
                        expected[(c * h + y) * w + x] += m * v;
                    }
                }
            }
        }
        for (o, e) in out.data().iter().zip(&expected) {
            assert!((o - e.clamp(-1.0, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_requires_segmap() {
        let img = Image::zeros(8, 8).unwrap();
        let s = Sample::new(img, None, Domain::B).unwrap();
        assert!(day_to_night_oracle(&s, &SceneSpec::default()).is_err());
    }

    #[test]
    fn oracle_is_local() {
        let spec = SceneSpec::default();
        let s = synth_scene(&spec, 5).unwrap();
        let base = day_to_night_oracle(&s, &spec).unwrap();
        let seg = s.segmap.clone().unwrap();
        // perturb one sky pixel far from any vehicle
        let (y, x) = (1, 1);
        assert_eq!(seg.get(y, x), SKY);
        let mut perturbed = s.clone();
        for c in 0..3 {
            let v = perturbed.image.get(c, y, x);
            perturbed.image.set(c, y, x, -v * 0.5);
        }
        let out = day_to_night_oracle(&perturbed, &spec).unwrap();
        let (h, w) = s.image.dims();
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    if (yy, xx) != (y, x) {
                        assert_eq!(out.get(c, yy, xx), base.get(c, yy, xx));
                    }
                }
            }
        }
        assert_ne!(out.pixel(y, x), base.pixel(y, x));
    }

    #[test]
    fn default_night_transforms_preserve_range() {
        SceneSpec::default().validate().unwrap();
        let mut spec = SceneSpec::default();
        spec.night[0] = ClassTransform::uniform(0.9, 0.3);
        assert!(spec.validate().is_err());
    }
}
