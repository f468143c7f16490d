//! Two-phase alternating adversarial optimisation with checkpoints.
//!
//! Phase 1 trains the low-resolution translators `g_xy` (source to target)
//! and `g_yx`, the segmenter and two discriminator trios. Phase 2 freezes the
//! phase-1 networks and trains the full-resolution upscalers, which receive
//! the phase-1 translation as guidance.

mod adam;
pub mod checkpoint;
mod config;
mod pool;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{lr_at, Adam};
pub use config::{
    DataCfg, DebugCfg, GuidanceSource, IdentityMasks, ModelCfg, OptimCfg, Phase2Cfg, ReverseCfg,
    TrainConfig, CONFIG_SCHEMA,
};
pub use pool::ImagePool;

use crate::data::{downsample, gaussian_blur, load_manifest, Domain, Image, Sample, SegMap};
use crate::losses::{
    discriminator_loss, one_hot, semseg_loss_tensor, total_generator_loss, DirectionTerms, LossAccumulator,
    LossReport,
};
use crate::maskops::MaskSet;
use crate::models::layers::downsample_mean;
use crate::models::{
    images_to_tensor, tensor_to_images, DiscCfg, DiscScale, GeneratorCfg, Initializer, Params, SegmenterCfg,
    SingleStreamGenCfg, UpscaleGenCfg,
};
use crate::{Error, Result};

pub const G_XY: &str = "g_xy";
pub const G_YX: &str = "g_yx";
pub const SEG: &str = "seg";
pub const UP_XY: &str = "up_xy";
pub const UP_YX: &str = "up_yx";
/// Prefix of the frozen phase-1 networks inside a phase-2 state.
pub const P1: &str = "p1.";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

const TRAIN_DTYPE: DType = DType::F32;
const INFER_CHUNK: usize = 16;

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Discriminator trio names, e.g. `d_y.local`.
pub fn disc_names(prefix: &str) -> [String; 3] {
    DiscScale::ALL.map(|s| format!("{prefix}.{s}"))
}

/// Network shapes resolved from a config and the data resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub generator: GeneratorCfg,
    pub reverse: SingleStreamGenCfg,
    pub segmenter: SegmenterCfg,
    pub discs: [DiscCfg; 3],
    pub upscaler: UpscaleGenCfg,
    pub discs2: [DiscCfg; 3],
    pub full: (usize, usize),
    pub low: (usize, usize),
    /// Class id to stream index.
    pub stream_table: Vec<usize>,
    pub streams: usize,
    pub classes: usize,
}

impl Arch {
    pub fn new(cfg: &TrainConfig, full: (usize, usize), class_names: &[String]) -> Result<Self> {
        let f = cfg.low_res_factor;
        let (h, w) = full;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("low_res_factor {f} does not divide {h}x{w}")));
        }
        let low = (h / f, w / f);
        if low.0 < 8 || low.1 < 8 || low.0 % 4 != 0 || low.1 % 4 != 0 {
            return Err(Error::Config(format!(
                "low resolution {}x{} must be at least 8 and divisible by 4",
                low.0, low.1
            )));
        }
        if cfg.model.segmenter.classes != class_names.len() {
            return Err(Error::Config(format!(
                "segmenter predicts {} classes but the dataset has {}",
                cfg.model.segmenter.classes,
                class_names.len()
            )));
        }
        if let GeneratorCfg::SemsegHead { classes, .. } = cfg.model.generator {
            if classes != class_names.len() {
                return Err(Error::Config("semseg head class count differs from the dataset".into()));
            }
        }
        Ok(Self {
            generator: cfg.model.generator.clone(),
            reverse: cfg.model.reverse.generator(),
            segmenter: cfg.model.segmenter.clone(),
            discs: cfg.disc_trio(low.0.min(low.1), 1),
            upscaler: cfg.model.upscaler.clone(),
            discs2: cfg.disc_trio(h.min(w), 2),
            full,
            low,
            stream_table: cfg.streams.resolve(class_names)?,
            streams: cfg.streams.streams,
            classes: class_names.len(),
        })
    }
}

/// In-memory training set at both resolutions.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub class_names: Vec<String>,
    pub a: Vec<Sample>,
    pub b: Vec<Sample>,
    pub a_low: Vec<Image>,
    pub a_low_seg: Vec<SegMap>,
    pub b_low: Vec<Image>,
    /// Blurred then downsampled images: the reconstruction guidance of phase 2.
    pub a_blur_low: Vec<Image>,
    pub b_blur_low: Vec<Image>,
}

impl TrainData {
    pub fn from_samples(a: Vec<Sample>, b: Vec<Sample>, cfg: &TrainConfig) -> Result<Self> {
        if a.len() < cfg.batch_size || b.len() < cfg.batch_size {
            return Err(Error::DatasetUnderflow(format!(
                "need at least {} samples per domain, have {} (A) and {} (B)",
                cfg.batch_size,
                a.len(),
                b.len()
            )));
        }
        let dims = a[0].image.dims();
        if a.iter().chain(&b).any(|s| s.image.dims() != dims) {
            return Err(Error::InvalidInput("all training images must share one size".into()));
        }
        let class_names = a[0].segmap()?.class_names().to_vec();
        let f = cfg.low_res_factor;
        let sigma = cfg.phase2.blur_sigma;
        let low = |s: &Sample| downsample(&s.image, f);
        let blur_low = |s: &Sample| downsample(&gaussian_blur(&s.image, sigma)?, f);
        Ok(Self {
            a_low: a.iter().map(low).collect::<Result<_>>()?,
            a_low_seg: a.iter().map(|s| s.segmap()?.downsample(f)).collect::<Result<_>>()?,
            b_low: b.iter().map(low).collect::<Result<_>>()?,
            a_blur_low: a.iter().map(blur_low).collect::<Result<_>>()?,
            b_blur_low: b.iter().map(blur_low).collect::<Result<_>>()?,
            class_names,
            a,
            b,
        })
    }

    /// Loads the manifest named in the config, keeping at most `data.limit`
    /// samples per domain.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        if cfg.data.manifest.is_empty() {
            return Err(Error::Config("data.manifest is not set".into()));
        }
        let manifest = load_manifest(Path::new(&cfg.data.manifest))?;
        let mut a = manifest.load_domain(Domain::A)?;
        let mut b = manifest.load_domain(Domain::B)?;
        if cfg.data.limit > 0 {
            a.truncate(cfg.data.limit);
            b.truncate(cfg.data.limit);
        }
        Self::from_samples(a, b, cfg)
    }

    pub fn full_dims(&self) -> (usize, usize) {
        self.a[0].image.dims()
    }
}

/// One-hot stream masks `(N, K, H, W)` for label maps.
pub fn stream_masks(segs: &[&SegMap], table: &[usize], streams: usize, dtype: DType) -> Result<Tensor> {
    let (h, w) = segs
        .first()
        .ok_or_else(|| Error::InvalidInput("empty segmap batch".into()))?
        .dims();
    let stream_labels: Vec<Vec<u8>> = segs
        .iter()
        .map(|s| s.labels().iter().map(|&c| table[c as usize] as u8).collect())
        .collect();
    let refs: Vec<&[u8]> = stream_labels.iter().map(Vec::as_slice).collect();
    one_hot(&refs, streams, h, w, dtype)
}

/// Stream masks from the argmax of class probabilities `(N, C, H, W)`; ties
/// go to the lowest class id.
pub fn masks_from_probs(probs: &Tensor, table: &[usize], streams: usize) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    let flat = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut labels = vec![vec![0u8; h * w]; n];
    for (b, lab) in labels.iter_mut().enumerate() {
        for (i, l) in lab.iter_mut().enumerate() {
            let mut best = 0;
            for k in 1..c {
                if flat[(b * c + k) * h * w + i] > flat[(b * c + best) * h * w + i] {
                    best = k;
                }
            }
            *l = table[best] as u8;
        }
    }
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    one_hot(&refs, streams, h, w, probs.dtype())
}

/// Every pixel in `stream`.
pub fn constant_masks(n: usize, streams: usize, stream: usize, dims: (usize, usize), dtype: DType) -> Result<Tensor> {
    let labels = vec![vec![stream as u8; dims.0 * dims.1]; n];
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    one_hot(&refs, streams, dims.0, dims.1, dtype)
}

pub fn maskset_tensor(masks: &[&MaskSet], dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::InvalidInput("empty mask batch".into()))?;
    let (h, w) = first.dims();
    let k = first.streams();
    let mut data = Vec::with_capacity(masks.len() * k * h * w);
    for m in masks {
        if m.dims() != (h, w) || m.streams() != k {
            return Err(Error::ShapeMismatch("mask sets in a batch differ".into()));
        }
        for mask in m.masks() {
            data.extend(mask.iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), k, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Loss reports of one alternating update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    pub g: LossReport,
    pub d: LossReport,
}

pub struct Phase1Batch {
    pub xa: Tensor,
    pub seg_a: Vec<SegMap>,
    pub masks_a: Tensor,
    pub target_a: Tensor,
    pub yb: Tensor,
}

impl Phase1Batch {
    pub fn new(arch: &Arch, data: &TrainData, ia: &[usize], ib: &[usize], dtype: DType) -> Result<Self> {
        let xa = images_to_tensor(&ia.iter().map(|&i| &data.a_low[i]).collect::<Vec<_>>(), dtype)?;
        let yb = images_to_tensor(&ib.iter().map(|&i| &data.b_low[i]).collect::<Vec<_>>(), dtype)?;
        let seg_a: Vec<SegMap> = ia.iter().map(|&i| data.a_low_seg[i].clone()).collect();
        Self::from_parts(arch, xa, seg_a, yb)
    }

    pub fn from_parts(arch: &Arch, xa: Tensor, seg_a: Vec<SegMap>, yb: Tensor) -> Result<Self> {
        let dtype = xa.dtype();
        let refs: Vec<&SegMap> = seg_a.iter().collect();
        let masks_a = stream_masks(&refs, &arch.stream_table, arch.streams, dtype)?;
        let labels: Vec<&[u8]> = seg_a.iter().map(SegMap::labels).collect();
        let (h, w) = seg_a[0].dims();
        let target_a = one_hot(&labels, arch.classes, h, w, dtype)?;
        Ok(Self {
            xa,
            seg_a,
            masks_a,
            target_a,
            yb,
        })
    }
}

pub struct Phase1Fakes {
    pub fake_y: Tensor,
    pub head_probs: Option<Tensor>,
    pub fake_x: Tensor,
}

fn net<'a>(nets: &'a BTreeMap<String, Params>, name: &str) -> Result<&'a Params> {
    nets.get(name)
        .ok_or_else(|| Error::InvalidInput(format!("state has no network `{name}`")))
}

fn trio<'a>(arch_discs: &'a [DiscCfg; 3], nets: &'a BTreeMap<String, Params>, prefix: &str) -> Result<[(&'a DiscCfg, &'a Params); 3]> {
    let names = disc_names(prefix);
    Ok([
        (&arch_discs[0], net(nets, &names[0])?),
        (&arch_discs[1], net(nets, &names[1])?),
        (&arch_discs[2], net(nets, &names[2])?),
    ])
}

pub fn phase1_fakes(arch: &Arch, nets: &BTreeMap<String, Params>, batch: &Phase1Batch) -> Result<Phase1Fakes> {
    let out = arch.generator.forward(net(nets, G_XY)?, &batch.xa, Some(&batch.masks_a))?;
    let fake_x = arch.reverse.forward(net(nets, G_YX)?, &batch.yb)?;
    Ok(Phase1Fakes {
        fake_y: out.image,
        head_probs: out.probs,
        fake_x,
    })
}

/// Discriminator objective of both directions on (possibly pooled) fakes.
pub fn phase1_d_loss(
    cfg: &TrainConfig,
    arch: &Arch,
    nets: &BTreeMap<String, Params>,
    batch: &Phase1Batch,
    fake_x: &Tensor,
    fake_y: &Tensor,
) -> Result<(Option<Tensor>, LossReport)> {
    let mut acc = LossAccumulator::new();
    discriminator_loss(&trio(&arch.discs, nets, "d_y")?, &batch.yb, fake_y, &cfg.loss, "d_y", &mut acc)?;
    discriminator_loss(&trio(&arch.discs, nets, "d_x")?, &batch.xa, fake_x, &cfg.loss, "d_x", &mut acc)?;
    Ok(acc.finish())
}

/// Stream masks for target-domain images fed to a mask-consuming generator.
fn target_masks(
    cfg: &TrainConfig,
    arch: &Arch,
    seg: &Params,
    images: &Tensor,
) -> Result<Option<Tensor>> {
    if !arch.generator.needs_masks() {
        return Ok(None);
    }
    let (n, _, h, w) = images.dims4()?;
    Ok(Some(match cfg.identity_masks {
        IdentityMasks::Segmenter => {
            let probs = arch.segmenter.forward(&seg.frozen(), images)?;
            masks_from_probs(&probs, &arch.stream_table, arch.streams)?
        }
        IdentityMasks::Fallback => constant_masks(
            n,
            arch.streams,
            cfg.streams.fallback_stream(),
            (h, w),
            images.dtype(),
        )?,
    }))
}

/// Generator objective of both directions. Discriminators enter as frozen
/// views; the segmenter is trained by the same objective.
pub fn phase1_g_loss(
    cfg: &TrainConfig,
    arch: &Arch,
    nets: &BTreeMap<String, Params>,
    batch: &Phase1Batch,
    fakes: &Phase1Fakes,
) -> Result<(Option<Tensor>, LossReport)> {
    let w = &cfg.loss;
    let (g_xy, g_yx, seg) = (net(nets, G_XY)?, net(nets, G_YX)?, net(nets, SEG)?);
    let frozen: BTreeMap<String, Params> = disc_names("d_y")
        .into_iter()
        .chain(disc_names("d_x"))
        .map(|n| Ok((n.clone(), net(nets, &n)?.frozen())))
        .collect::<Result<_>>()?;
    let masks_b = target_masks(cfg, arch, seg, &batch.yb)?;
    let placeholder = &batch.xa;
    let rec_x = if w.lambda_cyc > 0.0 { Some(arch.reverse.forward(g_yx, &fakes.fake_y)?) } else { None };
    let rec_y = if w.lambda_cyc > 0.0 {
        Some(arch.generator.forward(g_xy, &fakes.fake_x, masks_b.as_ref())?.image)
    } else {
        None
    };
    let idn_y = if w.lambda_idn > 0.0 {
        Some(arch.generator.forward(g_xy, &batch.yb, masks_b.as_ref())?.image)
    } else {
        None
    };
    let idn_x = if w.lambda_idn > 0.0 { Some(arch.reverse.forward(g_yx, &batch.xa)?) } else { None };
    let probs = if w.lambda_semseg > 0.0 {
        Some(arch.segmenter.forward(seg, &fakes.fake_y)?)
    } else {
        None
    };
    let dirs = [
        DirectionTerms {
            name: "xy",
            source: &batch.xa,
            translated: &fakes.fake_y,
            reconstructed: rec_x.as_ref().unwrap_or(placeholder),
            target_real: &batch.yb,
            identity: idn_y.as_ref().unwrap_or(placeholder),
            discs: trio(&arch.discs, &frozen, "d_y")?,
            semseg: Some((probs.as_ref().unwrap_or(&batch.target_a), &batch.target_a)),
        },
        DirectionTerms {
            name: "yx",
            source: &batch.yb,
            translated: &fakes.fake_x,
            reconstructed: rec_y.as_ref().unwrap_or(placeholder),
            target_real: &batch.xa,
            identity: idn_x.as_ref().unwrap_or(placeholder),
            discs: trio(&arch.discs, &frozen, "d_x")?,
            semseg: None,
        },
    ];
    let mut acc = LossAccumulator::new();
    total_generator_loss(&dirs, w, &mut acc)?;
    if let Some(hp) = &fakes.head_probs {
        acc.add("head_seg", w.lambda_semseg, || semseg_loss_tensor(hp, &batch.target_a))?;
    }
    let masks_in_use = w.lambda_cyc > 0.0 || w.lambda_idn > 0.0;
    if w.lambda_semseg == 0.0
        && masks_in_use
        && arch.generator.needs_masks()
        && cfg.identity_masks == IdentityMasks::Segmenter
    {
        // keeps the segmenter usable for target-domain masks without any
        // gradient reaching the generator
        acc.add("seg_fit", 1.0, || {
            semseg_loss_tensor(&arch.segmenter.forward(seg, &fakes.fake_y.detach())?, &batch.target_a)
        })?;
    }
    Ok(acc.finish())
}

pub struct Phase2Batch {
    pub xa: Tensor,
    pub yb: Tensor,
    pub seg_a_low: Vec<SegMap>,
    pub masks_a_low: Tensor,
    pub target_a_low: Tensor,
    pub xa_low: Tensor,
    pub yb_low: Tensor,
    pub xa_blur_low: Tensor,
    pub yb_blur_low: Tensor,
}

impl Phase2Batch {
    pub fn new(arch: &Arch, data: &TrainData, ia: &[usize], ib: &[usize], dtype: DType) -> Result<Self> {
        let pick = |v: &[Image], idx: &[usize]| images_to_tensor(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>(), dtype);
        let full_a: Vec<&Image> = ia.iter().map(|&i| &data.a[i].image).collect();
        let full_b: Vec<&Image> = ib.iter().map(|&i| &data.b[i].image).collect();
        let seg_a_low: Vec<SegMap> = ia.iter().map(|&i| data.a_low_seg[i].clone()).collect();
        let refs: Vec<&SegMap> = seg_a_low.iter().collect();
        let labels: Vec<&[u8]> = seg_a_low.iter().map(SegMap::labels).collect();
        Ok(Self {
            xa: images_to_tensor(&full_a, dtype)?,
            yb: images_to_tensor(&full_b, dtype)?,
            masks_a_low: stream_masks(&refs, &arch.stream_table, arch.streams, dtype)?,
            target_a_low: one_hot(&labels, arch.classes, arch.low.0, arch.low.1, dtype)?,
            xa_low: pick(&data.a_low, ia)?,
            yb_low: pick(&data.b_low, ib)?,
            xa_blur_low: pick(&data.a_blur_low, ia)?,
            yb_blur_low: pick(&data.b_blur_low, ib)?,
            seg_a_low,
        })
    }
}

fn p1(name: &str) -> String {
    format!("{P1}{name}")
}

/// Low-resolution guidance for full-resolution inputs.
fn guidance(
    cfg: &TrainConfig,
    arch: &Arch,
    nets: &BTreeMap<String, Params>,
    forward: bool,
    low: &Tensor,
    blur_low: &Tensor,
    masks: Option<&Tensor>,
) -> Result<Tensor> {
    match cfg.phase2.guidance {
        GuidanceSource::Identity => Ok(blur_low.clone()),
        GuidanceSource::Phase1 if forward => Ok(arch
            .generator
            .forward(&net(nets, &p1(G_XY))?.frozen(), low, masks)?
            .image
            .detach()),
        GuidanceSource::Phase1 => Ok(arch.reverse.forward(&net(nets, &p1(G_YX))?.frozen(), low)?.detach()),
    }
}

pub struct Phase2Fakes {
    pub guide_y: Tensor,
    pub fake_y: Tensor,
    pub guide_x: Tensor,
    pub fake_x: Tensor,
}

pub fn phase2_fakes(cfg: &TrainConfig, arch: &Arch, nets: &BTreeMap<String, Params>, batch: &Phase2Batch) -> Result<Phase2Fakes> {
    let guide_y = guidance(cfg, arch, nets, true, &batch.xa_low, &batch.xa_blur_low, Some(&batch.masks_a_low))?;
    let guide_x = guidance(cfg, arch, nets, false, &batch.yb_low, &batch.yb_blur_low, None)?;
    Ok(Phase2Fakes {
        fake_y: arch.upscaler.forward(net(nets, UP_XY)?, &batch.xa, &guide_y)?,
        fake_x: arch.upscaler.forward(net(nets, UP_YX)?, &batch.yb, &guide_x)?,
        guide_y,
        guide_x,
    })
}

pub fn phase2_d_loss(
    cfg: &TrainConfig,
    arch: &Arch,
    nets: &BTreeMap<String, Params>,
    batch: &Phase2Batch,
    fake_x: &Tensor,
    fake_y: &Tensor,
) -> Result<(Option<Tensor>, LossReport)> {
    let mut acc = LossAccumulator::new();
    discriminator_loss(&trio(&arch.discs2, nets, "d2_y")?, &batch.yb, fake_y, &cfg.loss, "d2_y", &mut acc)?;
    discriminator_loss(&trio(&arch.discs2, nets, "d2_x")?, &batch.xa, fake_x, &cfg.loss, "d2_x", &mut acc)?;
    Ok(acc.finish())
}

/// Upscaler objective. Cycle reconstructions are guided by the blurred
/// original, identity mappings by the full phase-1 pipeline.
pub fn phase2_g_loss(
    cfg: &TrainConfig,
    arch: &Arch,
    nets: &BTreeMap<String, Params>,
    batch: &Phase2Batch,
    fakes: &Phase2Fakes,
) -> Result<(Option<Tensor>, LossReport)> {
    let w = &cfg.loss;
    let (up_xy, up_yx) = (net(nets, UP_XY)?, net(nets, UP_YX)?);
    let frozen: BTreeMap<String, Params> = disc_names("d2_y")
        .into_iter()
        .chain(disc_names("d2_x"))
        .map(|n| Ok((n.clone(), net(nets, &n)?.frozen())))
        .collect::<Result<_>>()?;
    let placeholder = &batch.xa;
    let (rec_x, rec_y) = if w.lambda_cyc > 0.0 {
        (
            Some(arch.upscaler.forward(up_yx, &fakes.fake_y, &batch.xa_blur_low)?),
            Some(arch.upscaler.forward(up_xy, &fakes.fake_x, &batch.yb_blur_low)?),
        )
    } else {
        (None, None)
    };
    let (idn_y, idn_x) = if w.lambda_idn > 0.0 {
        let seg_p1 = match cfg.phase2.guidance {
            GuidanceSource::Phase1 => Some(net(nets, &p1(SEG))?),
            GuidanceSource::Identity => None,
        };
        let masks_b = match seg_p1 {
            Some(seg) => target_masks(cfg, arch, seg, &batch.yb_low)?,
            None => None,
        };
        let gy = guidance(cfg, arch, nets, true, &batch.yb_low, &batch.yb_blur_low, masks_b.as_ref())?;
        let gx = guidance(cfg, arch, nets, false, &batch.xa_low, &batch.xa_blur_low, None)?;
        (
            Some(arch.upscaler.forward(up_xy, &batch.yb, &gy)?),
            Some(arch.upscaler.forward(up_yx, &batch.xa, &gx)?),
        )
    } else {
        (None, None)
    };
    let use_seg = cfg.phase2.semseg && w.lambda_semseg > 0.0;
    let probs = if use_seg {
        let seg = net(nets, &p1(SEG))?.frozen();
        Some(arch.segmenter.forward(&seg, &downsample_mean(&fakes.fake_y, cfg.low_res_factor)?)?)
    } else {
        None
    };
    let dirs = [
        DirectionTerms {
            name: "xy",
            source: &batch.xa,
            translated: &fakes.fake_y,
            reconstructed: rec_x.as_ref().unwrap_or(placeholder),
            target_real: &batch.yb,
            identity: idn_y.as_ref().unwrap_or(placeholder),
            discs: trio(&arch.discs2, &frozen, "d2_y")?,
            semseg: probs.as_ref().map(|p| (p, &batch.target_a_low)),
        },
        DirectionTerms {
            name: "yx",
            source: &batch.yb,
            translated: &fakes.fake_x,
            reconstructed: rec_y.as_ref().unwrap_or(placeholder),
            target_real: &batch.xa,
            identity: idn_x.as_ref().unwrap_or(placeholder),
            discs: trio(&arch.discs2, &frozen, "d2_x")?,
            semseg: None,
        },
    ];
    let mut acc = LossAccumulator::new();
    total_generator_loss(&dirs, w, &mut acc)?;
    Ok(acc.finish())
}

/// Everything needed to continue training bit-identically.
pub struct TrainState {
    pub config: TrainConfig,
    pub arch: Arch,
    pub class_names: Vec<String>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub nets: BTreeMap<String, Params>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub pools: BTreeMap<String, ImagePool>,
}

fn new_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn new_pools(cfg: &TrainConfig) -> BTreeMap<String, ImagePool> {
    ["x", "y"]
        .into_iter()
        .map(|k| (k.to_string(), ImagePool::new(cfg.pool_size)))
        .collect()
}

/// Freshly initialised phase-1 networks.
pub fn init_phase1_nets(arch: &Arch, seed: u64, dtype: DType) -> Result<BTreeMap<String, Params>> {
    let mut init = Initializer::new(seed, dtype);
    let mut nets = BTreeMap::new();
    nets.insert(G_XY.to_string(), arch.generator.init(&mut init)?);
    nets.insert(G_YX.to_string(), arch.reverse.init(&mut init)?);
    nets.insert(SEG.to_string(), arch.segmenter.init(&mut init)?);
    for prefix in ["d_y", "d_x"] {
        for (name, d) in disc_names(prefix).iter().zip(&arch.discs) {
            nets.insert(name.clone(), d.init(&mut init)?);
        }
    }
    Ok(nets)
}

impl TrainState {
    pub fn new_phase1(cfg: &TrainConfig, full: (usize, usize), class_names: &[String]) -> Result<Self> {
        cfg.validate()?;
        let arch = Arch::new(cfg, full, class_names)?;
        let nets = init_phase1_nets(&arch, cfg.seed, TRAIN_DTYPE)?;
        Ok(Self {
            config: cfg.clone(),
            arch,
            class_names: class_names.to_vec(),
            step: 0,
            rng: new_rng(cfg.seed),
            nets,
            opt_g: Adam::new(cfg.optim),
            opt_d: Adam::new(cfg.optim),
            pools: new_pools(cfg),
        })
    }

    /// Phase-2 state around frozen copies of a phase-1 state's translators and
    /// segmenter. The phase-1 architecture fields override those of `cfg`.
    pub fn new_phase2(cfg: &TrainConfig, phase1: &TrainState) -> Result<Self> {
        if phase1.config.phase != 1 {
            return Err(Error::Config("phase 2 needs a phase-1 checkpoint".into()));
        }
        let mut cfg = cfg.clone();
        cfg.phase = 2;
        cfg.model.generator = phase1.config.model.generator.clone();
        cfg.model.reverse = phase1.config.model.reverse;
        cfg.model.segmenter = phase1.config.model.segmenter.clone();
        cfg.streams = phase1.config.streams.clone();
        cfg.low_res_factor = phase1.config.low_res_factor;
        cfg.validate()?;
        let arch = Arch::new(&cfg, phase1.arch.full, &phase1.class_names)?;
        let mut init = Initializer::new(cfg.seed, TRAIN_DTYPE);
        let mut nets = BTreeMap::new();
        nets.insert(UP_XY.to_string(), arch.upscaler.init(&mut init)?);
        nets.insert(UP_YX.to_string(), arch.upscaler.init(&mut init)?);
        for prefix in ["d2_y", "d2_x"] {
            for (name, d) in disc_names(prefix).iter().zip(&arch.discs2) {
                nets.insert(name.clone(), d.init(&mut init)?);
            }
        }
        for name in [G_XY, G_YX, SEG] {
            nets.insert(p1(name), net(&phase1.nets, name)?.deep_copy(TRAIN_DTYPE)?);
        }
        Ok(Self {
            arch,
            class_names: phase1.class_names.clone(),
            step: 0,
            rng: new_rng(cfg.seed),
            nets,
            opt_g: Adam::new(cfg.optim),
            opt_d: Adam::new(cfg.optim),
            pools: new_pools(&cfg),
            config: cfg,
        })
    }

    pub fn phase(&self) -> u8 {
        self.config.phase
    }

    pub fn net(&self, name: &str) -> Result<&Params> {
        net(&self.nets, name)
    }

    fn sample_indices(&mut self, n: usize, len: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.random_range(0..len)).collect()
    }

    /// One D update followed by one G update.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepReport> {
        if data.full_dims() != self.arch.full {
            return Err(Error::ShapeMismatch(format!(
                "state was built for {:?} images, data is {:?}",
                self.arch.full,
                data.full_dims()
            )));
        }
        let bs = self.config.batch_size;
        let ia = self.sample_indices(bs, data.a.len());
        let ib = self.sample_indices(bs, data.b.len());
        let lr = lr_at(&self.config.optim, self.step, self.config.steps);
        let poison = self.config.debug.inject_nan_at_step == Some(self.step + 1);
        let (g, d) = if self.phase() == 1 {
            let batch = Phase1Batch::new(&self.arch, data, &ia, &ib, TRAIN_DTYPE)?;
            self.phase1_update(&batch, lr, poison)?
        } else {
            let batch = Phase2Batch::new(&self.arch, data, &ia, &ib, TRAIN_DTYPE)?;
            self.phase2_update(&batch, lr, poison)?
        };
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            phase: self.phase(),
            lr,
            g,
            d,
        })
    }

    fn d_nets(&self, prefixes: [&str; 2]) -> Vec<String> {
        prefixes.iter().flat_map(|p| disc_names(p)).collect()
    }

    fn apply(&mut self, loss: Option<Tensor>, names: &[String], generator: bool, lr: f64) -> Result<()> {
        let Some(loss) = loss else {
            return Ok(());
        };
        let grads = loss.backward()?;
        let group: Vec<(&str, &Params)> = names
            .iter()
            .map(|n| Ok((n.as_str(), net(&self.nets, n)?)))
            .collect::<Result<_>>()?;
        let opt = if generator { &mut self.opt_g } else { &mut self.opt_d };
        opt.step(&group, &grads, lr)
    }

    pub fn phase1_update(&mut self, batch: &Phase1Batch, lr: f64, poison: bool) -> Result<(LossReport, LossReport)> {
        let mut fakes = phase1_fakes(&self.arch, &self.nets, batch)?;
        if poison {
            fakes.fake_y = (fakes.fake_y * f64::NAN)?;
        }
        let pooled_y = self.pools.get_mut("y").expect("pool").query(&fakes.fake_y, &mut self.rng)?;
        let pooled_x = self.pools.get_mut("x").expect("pool").query(&fakes.fake_x, &mut self.rng)?;
        let (d_loss, d_report) = phase1_d_loss(&self.config, &self.arch, &self.nets, batch, &pooled_x, &pooled_y)?;
        let d_names = self.d_nets(["d_y", "d_x"]);
        self.apply(d_loss, &d_names, false, lr)?;
        let (g_loss, g_report) = phase1_g_loss(&self.config, &self.arch, &self.nets, batch, &fakes)?;
        let g_names = [G_XY, G_YX, SEG].map(String::from);
        self.apply(g_loss, &g_names, true, lr)?;
        Ok((g_report, d_report))
    }

    pub fn phase2_update(&mut self, batch: &Phase2Batch, lr: f64, poison: bool) -> Result<(LossReport, LossReport)> {
        let mut fakes = phase2_fakes(&self.config, &self.arch, &self.nets, batch)?;
        if poison {
            fakes.fake_y = (fakes.fake_y * f64::NAN)?;
        }
        let pooled_y = self.pools.get_mut("y").expect("pool").query(&fakes.fake_y, &mut self.rng)?;
        let pooled_x = self.pools.get_mut("x").expect("pool").query(&fakes.fake_x, &mut self.rng)?;
        let (d_loss, d_report) = phase2_d_loss(&self.config, &self.arch, &self.nets, batch, &pooled_x, &pooled_y)?;
        let d_names = self.d_nets(["d2_y", "d2_x"]);
        self.apply(d_loss, &d_names, false, lr)?;
        let (g_loss, g_report) = phase2_g_loss(&self.config, &self.arch, &self.nets, batch, &fakes)?;
        let g_names = [UP_XY, UP_YX].map(String::from);
        self.apply(g_loss, &g_names, true, lr)?;
        Ok((g_report, d_report))
    }

    fn low_generator(&self) -> Result<&Params> {
        self.net(if self.phase() == 1 { G_XY } else { "p1.g_xy" })
    }

    fn low_segmenter(&self) -> Result<&Params> {
        self.net(if self.phase() == 1 { SEG } else { "p1.seg" })
    }

    /// Source-to-target translation at low resolution with explicit stream
    /// masks (ignored by generators that take none).
    pub fn translate_low(&self, images: &[&Image], masks: &[&MaskSet]) -> Result<Vec<Image>> {
        let p = self.low_generator()?.frozen();
        let mut out = Vec::with_capacity(images.len());
        for (ic, mc) in images.chunks(INFER_CHUNK).zip(masks.chunks(INFER_CHUNK)) {
            let x = images_to_tensor(ic, TRAIN_DTYPE)?;
            let m = maskset_tensor(mc, TRAIN_DTYPE)?;
            let y = self.arch.generator.forward(&p, &x, Some(&m))?;
            out.extend(tensor_to_images(&y.image)?);
        }
        Ok(out)
    }

    /// Stream masks of low-resolution segmaps.
    pub fn masks_for(&self, segmap: &SegMap) -> Result<MaskSet> {
        let idx: Vec<usize> = segmap.labels().iter().map(|&c| self.arch.stream_table[c as usize]).collect();
        let (h, w) = segmap.dims();
        MaskSet::from_stream_indices(h, w, self.arch.streams, &idx)
    }

    /// Class probabilities of the jointly trained segmenter.
    pub fn segment_low(&self, images: &[&Image]) -> Result<Vec<crate::models::ProbMap>> {
        let p = self.low_segmenter()?.frozen();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let probs = self.arch.segmenter.forward(&p, &images_to_tensor(chunk, TRAIN_DTYPE)?)?;
            out.extend(crate::models::ProbMap::from_tensor(&probs)?);
        }
        Ok(out)
    }

    /// Full-resolution output of the phase-2 upscaler.
    pub fn upscale(&self, full: &[&Image], guidance: &[&Image]) -> Result<Vec<Image>> {
        let p = self.net(UP_XY)?.frozen();
        let mut out = Vec::with_capacity(full.len());
        for (fc, gc) in full.chunks(INFER_CHUNK).zip(guidance.chunks(INFER_CHUNK)) {
            let y = self.arch.upscaler.forward(
                &p,
                &images_to_tensor(fc, TRAIN_DTYPE)?,
                &images_to_tensor(gc, TRAIN_DTYPE)?,
            )?;
            out.extend(tensor_to_images(&y)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        for (n, p) in &self.nets {
            for (pn, v) in p.iter() {
                tensors.insert(format!("net/{n}/{pn}"), v.as_tensor().clone());
            }
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (k, t) in &opt.m {
                tensors.insert(format!("{tag}/m/{k}"), t.clone());
            }
            for (k, t) in &opt.v {
                tensors.insert(format!("{tag}/v/{k}"), t.clone());
            }
        }
        for (name, pool) in &self.pools {
            for (i, t) in pool.images().iter().enumerate() {
                tensors.insert(format!("pool/{name}/{i:06}"), t.clone());
            }
        }
        let meta = serde_json::json!({
            "step": self.step,
            "config": self.config,
            "class_names": self.class_names,
            "full": [self.arch.full.0, self.arch.full.1],
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "adam_g_t": self.opt_g.t,
            "adam_d_t": self.opt_d.t,
        });
        checkpoint::encode(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode(bytes)?;
        let bad = |what: &str| Error::Integrity(format!("checkpoint header lacks a valid `{what}`"));
        let config: TrainConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Integrity(format!("config: {e}")))?;
        let class_names: Vec<String> =
            serde_json::from_value(meta["class_names"].clone()).map_err(|_| bad("class_names"))?;
        let full: (usize, usize) = serde_json::from_value(meta["full"].clone()).map_err(|_| bad("full"))?;
        let step = meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        let seed_bytes: [u8; 32] = meta["rng"]["seed"]
            .as_str()
            .and_then(|s| hex::decode(s).ok())
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("rng.seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(meta["rng"]["stream"].as_u64().ok_or_else(|| bad("rng.stream"))?);
        rng.set_word_pos(
            meta["rng"]["word_pos"]
                .as_str()
                .and_then(|s| s.parse::<u128>().ok())
                .ok_or_else(|| bad("rng.word_pos"))?,
        );
        let arch = Arch::new(&config, full, &class_names)?;
        let mut nets: BTreeMap<String, Params> = BTreeMap::new();
        let mut opt_g = Adam::new(config.optim);
        let mut opt_d = Adam::new(config.optim);
        opt_g.t = meta["adam_g_t"].as_u64().ok_or_else(|| bad("adam_g_t"))?;
        opt_d.t = meta["adam_d_t"].as_u64().ok_or_else(|| bad("adam_d_t"))?;
        let mut pool_images: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for (key, t) in tensors {
            let (kind, rest) = key.split_once('/').ok_or_else(|| bad(&key))?;
            match kind {
                "net" => {
                    let (n, pn) = rest.split_once('/').ok_or_else(|| bad(&key))?;
                    nets.entry(n.to_string())
                        .or_insert_with(|| Params::new(TRAIN_DTYPE))
                        .insert(pn, t)?;
                }
                "adam_g" | "adam_d" => {
                    let opt = if kind == "adam_g" { &mut opt_g } else { &mut opt_d };
                    match rest.split_once('/') {
                        Some(("m", k)) => opt.m.insert(k.to_string(), t),
                        Some(("v", k)) => opt.v.insert(k.to_string(), t),
                        _ => return Err(bad(&key)),
                    };
                }
                "pool" => {
                    let (n, _) = rest.split_once('/').ok_or_else(|| bad(&key))?;
                    pool_images.entry(n.to_string()).or_default().push(t);
                }
                _ => return Err(bad(&key)),
            }
        }
        let mut pools = new_pools(&config);
        for (n, imgs) in pool_images {
            pools.insert(n, ImagePool::from_images(config.pool_size, imgs));
        }
        Ok(Self {
            config,
            arch,
            class_names,
            step,
            rng,
            nets,
            opt_g,
            opt_d,
            pools,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One JSON object per step.
pub fn metrics_record(report: &StepReport, wall_time: Option<f64>) -> serde_json::Value {
    let mut terms = serde_json::Map::new();
    let mut weights = serde_json::Map::new();
    for t in report.g.terms.iter().chain(&report.d.terms) {
        terms.insert(t.name.clone(), t.value.into());
        weights.insert(t.name.clone(), t.weight.into());
    }
    let mut rec = serde_json::json!({
        "step": report.step,
        "phase": report.phase,
        "lr": report.lr,
        "total_g": report.g.total,
        "total_d": report.d.total,
        "terms": terms,
        "weights": weights,
    });
    if let Some(t) = wall_time {
        rec["wall_time"] = t.into();
    }
    rec
}

/// Where a training run writes and whence it starts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub phase1_ckpt: Option<PathBuf>,
    /// Omit wall-clock times from the metrics log.
    pub deterministic: bool,
    /// Write nothing to disk.
    pub dry: bool,
    /// Print a progress line to stderr every this many steps (0 = silent).
    pub log_every: u64,
}

fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v["step"].as_u64());
        if step.is_some_and(|s| s <= upto) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Builds or restores the state, then trains until `config.steps`.
pub fn train(cfg: &TrainConfig, data: &TrainData, opts: &RunOptions) -> Result<(TrainState, Vec<StepReport>)> {
    let mut state = if let Some(path) = &opts.resume {
        let mut s = TrainState::load(path)?;
        // only the budget may change on resume
        s.config.steps = cfg.steps;
        s
    } else if cfg.phase == 2 {
        let path = opts
            .phase1_ckpt
            .as_ref()
            .ok_or_else(|| Error::Config("phase 2 requires a phase-1 checkpoint".into()))?;
        TrainState::new_phase2(cfg, &TrainState::load(path)?)?
    } else {
        TrainState::new_phase1(cfg, data.full_dims(), &data.class_names)?
    };
    let mut log = None;
    if !opts.dry {
        fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
        let snapshot = opts.out_dir.join(CONFIG_SNAPSHOT);
        fs::write(&snapshot, state.config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
        let path = opts.out_dir.join(METRICS_FILE);
        if opts.resume.is_some() {
            truncate_metrics(&path, state.step)?;
        } else if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        log = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?,
        );
    }
    let start = Instant::now();
    let mut reports = Vec::new();
    while state.step < state.config.steps {
        let report = state.train_step(data)?;
        if let Some(f) = log.as_mut() {
            let wall = (!opts.deterministic).then(|| start.elapsed().as_secs_f64());
            let line = metrics_record(&report, wall).to_string();
            writeln!(f, "{line}").map_err(|e| Error::io(opts.out_dir.join(METRICS_FILE), e))?;
        }
        if opts.log_every > 0 && state.step % opts.log_every == 0 {
            eprintln!(
                "phase {} step {}/{}: total_g {:.4} total_d {:.4}",
                report.phase, report.step, state.config.steps, report.g.total, report.d.total
            );
        }
        let every = state.config.checkpoint_every;
        if !opts.dry && every > 0 && state.step % every == 0 {
            state.save(&opts.out_dir.join(checkpoint_name(state.step)))?;
        }
        reports.push(report);
    }
    if !opts.dry {
        state.save(&opts.out_dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((state, reports))
}
