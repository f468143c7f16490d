use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    day_to_night_oracle, default_class_names, synth_scene, Domain, Image, Sample, SceneSpec,
    SegMap, CLASS_COLORS,
};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "v1";
pub const MANIFEST_FILE: &str = "manifest.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: Domain,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmap: Option<String>,
    pub scene_seed: u64,
}

/// Index of a generated dataset. Paths are relative to `root`, the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub scene: SceneSpec,
    pub samples: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Result<&ManifestRecord> {
        self.samples
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("no sample with id `{id}`")))
    }

    pub fn ids(&self, domain: Domain) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|r| r.domain == domain)
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn load_domain(&self, domain: Domain) -> Result<Vec<Sample>> {
        self.ids(domain)
            .into_iter()
            .map(|id| load_sample(self, id))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::format(
            path,
            format!("unsupported manifest schema `{}`", manifest.schema),
        ));
    }
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut ids = HashSet::new();
    for rec in &manifest.samples {
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::format(path, format!("duplicate sample id `{}`", rec.id)));
        }
        let files = std::iter::once(&rec.image).chain(rec.segmap.iter());
        for f in files {
            let p = manifest.root.join(f);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
    }
    Ok(manifest)
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    let rec = manifest.record(id)?;
    let image = load_image(&manifest.root.join(&rec.image))?;
    let segmap = rec
        .segmap
        .as_ref()
        .map(|p| load_segmap(&manifest.root.join(p), &manifest.class_names))
        .transpose()?;
    Sample::new(image, segmap, rec.domain)
}

/// Writes the image and, when both are present, the segmap.
pub fn save_sample(sample: &Sample, image_path: &Path, segmap_path: Option<&Path>) -> Result<()> {
    save_image(&sample.image, image_path)?;
    if let (Some(seg), Some(path)) = (&sample.segmap, segmap_path) {
        save_segmap(seg, path)?;
    }
    Ok(())
}

#[inline]
fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[inline]
fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

impl Image {
    /// The image as it reads back after an 8-bit save.
    pub fn quantized(&self) -> Image {
        let (h, w) = self.dims();
        let data = self.data().iter().map(|&v| dequantize(quantize(v))).collect();
        Image::new(h, w, data).expect("dequantized values lie in [-1, 1]")
    }
}

/// 8-bit RGB PNG; values map linearly from [-1, 1] to [0, 255].
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            bytes.extend(image.pixel(y, x).map(quantize));
        }
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit RGB image"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = dequantize(row[3 * x + c]);
            }
        }
    }
    Image::new(h, w, data)
}

/// Indexed 8-bit PNG whose palette holds the class display colours.
pub fn save_segmap(segmap: &SegMap, path: &Path) -> Result<()> {
    let (h, w) = segmap.dims();
    let mut palette = Vec::with_capacity(3 * segmap.num_classes());
    for c in 0..segmap.num_classes() {
        let rgb = CLASS_COLORS.get(c).copied().unwrap_or([c as u8; 3]);
        palette.extend(rgb);
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(segmap.labels())
        .map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn load_segmap(path: &Path, class_names: &[String]) -> Result<SegMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit indexed segmap"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        labels.extend_from_slice(&buf[y * info.line_size..y * info.line_size + w]);
    }
    SegMap::new(h, w, labels, class_names.to_vec()).map_err(|e| match e {
        Error::ClassOutOfRange { .. } => Error::format(path, e.to_string()),
        other => other,
    })
}

/// SplitMix64 finaliser; a bijection on u64.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hands out scene seeds from interleaved counters, never repeating a seed
/// across domains. Seeds are kept below 2^63 so they fit the manifest's
/// integer type.
struct SeedStreams {
    base: u64,
    counters: [u64; 2],
    used: HashSet<u64>,
}

impl SeedStreams {
    fn new(seed: u64) -> Self {
        Self {
            base: mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            counters: [0, 1],
            used: HashSet::new(),
        }
    }

    fn next(&mut self, domain: Domain) -> u64 {
        let slot = domain as usize;
        loop {
            let k = self.counters[slot];
            self.counters[slot] += 2;
            let s = mix64(self.base.wrapping_add(k)) >> 1;
            if self.used.insert(s) {
                return s;
            }
        }
    }
}

/// Writes `n` domain-A day scenes and `n` unpaired domain-B night scenes
/// (oracle translations of independently seeded scenes) plus the manifest.
pub fn synth_dataset(
    n: usize,
    spec: &SceneSpec,
    seed: u64,
    out_dir: &Path,
    emit_b_segmaps: bool,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be at least 1".into()));
    }
    if seed > i64::MAX as u64 {
        return Err(Error::InvalidInput("seed must be below 2^63".into()));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut seeds = SeedStreams::new(seed);
    let mut samples = Vec::with_capacity(2 * n);
    for i in 0..n {
        let scene_seed = seeds.next(Domain::A);
        let sample = synth_scene(spec, scene_seed)?;
        let image = format!("A/{i:06}.png");
        let segmap = format!("A/{i:06}.seg.png");
        save_sample(&sample, &out_dir.join(&image), Some(&out_dir.join(&segmap)))?;
        samples.push(ManifestRecord {
            id: format!("A{i:06}"),
            domain: Domain::A,
            image,
            segmap: Some(segmap),
            scene_seed,
        });
    }
    for i in 0..n {
        let scene_seed = seeds.next(Domain::B);
        let day = synth_scene(spec, scene_seed)?;
        let night = Sample::new(
            day_to_night_oracle(&day, spec)?,
            day.segmap.clone(),
            Domain::B,
        )?;
        let image = format!("B/{i:06}.png");
        let segmap = emit_b_segmaps.then(|| format!("B/{i:06}.seg.png"));
        save_sample(
            &night,
            &out_dir.join(&image),
            segmap.as_ref().map(|s| out_dir.join(s)).as_deref(),
        )?;
        samples.push(ManifestRecord {
            id: format!("B{i:06}"),
            domain: Domain::B,
            image,
            segmap,
            scene_seed,
        });
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        seed,
        class_names: default_class_names(),
        palette: CLASS_COLORS.to_vec(),
        scene: spec.clone(),
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
