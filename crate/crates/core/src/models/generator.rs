use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{bounded, conv2d, instance_norm, softmax_channels, upsample_nearest};
use super::{image_to_tensor, tensor_to_images, Initializer, Params, ProbMap};
use crate::data::{Image, SegMap};
use crate::maskops::{masks_from_segmap, StreamBundle, StreamSpec};
use crate::{Error, Result};

/// Number of encoder blocks: one 7x7 full-resolution block and two stride-2
/// downsampling blocks.
pub const ENCODER_BLOCKS: usize = 3;

fn enc_out(width: usize, block: usize) -> usize {
    width << block
}

pub(crate) fn init_encoder_block(
    init: &mut Initializer,
    p: &mut Params,
    name: &str,
    in_ch: usize,
    width: usize,
    block: usize,
) -> Result<()> {
    let k = if block == 0 { 7 } else { 3 };
    init.conv(p, name, enc_out(width, block), in_ch, k)
}

pub(crate) fn encoder_block(p: &Params, name: &str, x: &Tensor, block: usize) -> Result<Tensor> {
    let y = if block == 0 {
        conv2d(p, name, x, 1, 3)?
    } else {
        conv2d(p, name, x, 2, 1)?
    };
    Ok(instance_norm(&y)?.relu()?)
}

pub(crate) fn init_fusion(
    init: &mut Initializer,
    p: &mut Params,
    paths: usize,
    channels: usize,
) -> Result<()> {
    init.conv(p, "fuse", channels, paths * channels, 1)
}

pub(crate) fn fusion(p: &Params, feats: &[Tensor]) -> Result<Tensor> {
    let cat = Tensor::cat(feats, 1)?;
    Ok(instance_norm(&conv2d(p, "fuse", &cat, 1, 0)?)?.relu()?)
}

/// Residual trunk, two upsampling blocks and the bounded 7x7 output head.
pub(crate) fn init_tail(
    init: &mut Initializer,
    p: &mut Params,
    width: usize,
    trunk_blocks: usize,
) -> Result<()> {
    let c = enc_out(width, ENCODER_BLOCKS - 1);
    for i in 0..trunk_blocks {
        init.conv(p, &format!("trunk{i}.a"), c, c, 3)?;
        init.conv(p, &format!("trunk{i}.b"), c, c, 3)?;
    }
    init.conv(p, "dec0", 2 * width, c, 3)?;
    init.conv(p, "dec1", width, 2 * width, 3)?;
    init.conv(p, "out", 3, width, 7)
}

/// Returns the bounded image and the last decoder feature map.
pub(crate) fn tail(p: &Params, x: &Tensor, trunk_blocks: usize) -> Result<(Tensor, Tensor)> {
    let mut h = x.clone();
    for i in 0..trunk_blocks {
        let r = instance_norm(&conv2d(p, &format!("trunk{i}.a"), &h, 1, 1)?)?.relu()?;
        let r = instance_norm(&conv2d(p, &format!("trunk{i}.b"), &r, 1, 1)?)?;
        h = (h + r)?;
    }
    for name in ["dec0", "dec1"] {
        h = upsample_nearest(&h, 2)?;
        h = instance_norm(&conv2d(p, name, &h, 1, 1)?)?.relu()?;
    }
    let out = bounded(&conv2d(p, "out", &h, 1, 3)?)?;
    Ok((out, h))
}

fn check_spatial(x: &Tensor) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
        return Err(Error::ShapeMismatch(format!(
            "generator input {h}x{w} must have sides divisible by 4"
        )));
    }
    Ok(())
}

/// Plain encoder / residual trunk / decoder generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleStreamGenCfg {
    pub in_channels: usize,
    pub width: usize,
    pub trunk_blocks: usize,
}

impl SingleStreamGenCfg {
    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        let mut p = Params::new(init.dtype());
        let mut in_ch = self.in_channels;
        for b in 0..ENCODER_BLOCKS {
            init_encoder_block(init, &mut p, &format!("enc{b}"), in_ch, self.width, b)?;
            in_ch = enc_out(self.width, b);
        }
        init_tail(init, &mut p, self.width, self.trunk_blocks)?;
        Ok(p)
    }

    /// `(N, in_channels, H, W)` to `(image, last decoder features)`.
    pub fn forward_features(&self, p: &Params, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_spatial(x)?;
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "generator expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut h = x.clone();
        for b in 0..ENCODER_BLOCKS {
            h = encoder_block(p, &format!("enc{b}"), &h, b)?;
        }
        tail(p, &h, self.trunk_blocks)
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(p, x)?.0)
    }
}

/// Generator whose first `stem_blocks` encoder blocks are duplicated per
/// stream; stream outputs are concatenated and mixed by a 1x1 block before
/// the shared remainder. With one stream there is no mixing block and the
/// network is exactly the single-stream generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiStreamGenCfg {
    pub streams: usize,
    pub stem_blocks: usize,
    pub width: usize,
    pub trunk_blocks: usize,
}

impl MultiStreamGenCfg {
    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::Config("multi-stream generator needs K >= 1".into()));
        }
        if !(1..=ENCODER_BLOCKS).contains(&self.stem_blocks) {
            return Err(Error::Config(format!(
                "stem_blocks must lie in 1..={ENCODER_BLOCKS}"
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("generator width must be positive".into()));
        }
        Ok(())
    }

    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        self.validate()?;
        let mut p = Params::new(init.dtype());
        for k in 0..self.streams {
            let mut in_ch = 3;
            for b in 0..self.stem_blocks {
                init_encoder_block(init, &mut p, &format!("stream{k}.enc{b}"), in_ch, self.width, b)?;
                in_ch = enc_out(self.width, b);
            }
        }
        let merged = enc_out(self.width, self.stem_blocks - 1);
        if self.streams > 1 {
            init_fusion(init, &mut p, self.streams, merged)?;
        }
        let mut in_ch = merged;
        for b in self.stem_blocks..ENCODER_BLOCKS {
            init_encoder_block(init, &mut p, &format!("enc{b}"), in_ch, self.width, b)?;
            in_ch = enc_out(self.width, b);
        }
        init_tail(init, &mut p, self.width, self.trunk_blocks)?;
        Ok(p)
    }

    /// `bundle` is `(N, 3K, H, W)`, stream-major along the channel axis.
    pub fn forward_features(&self, p: &Params, bundle: &Tensor) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        check_spatial(bundle)?;
        let c = bundle.dim(1)?;
        if c != 3 * self.streams {
            return Err(Error::ShapeMismatch(format!(
                "multi-stream generator expects {} streams, got {c} channels",
                self.streams
            )));
        }
        let mut feats = Vec::with_capacity(self.streams);
        for k in 0..self.streams {
            let mut h = bundle.narrow(1, 3 * k, 3)?;
            for b in 0..self.stem_blocks {
                h = encoder_block(p, &format!("stream{k}.enc{b}"), &h, b)?;
            }
            feats.push(h);
        }
        let mut h = if self.streams > 1 {
            fusion(p, &feats)?
        } else {
            feats.pop().expect("one stream")
        };
        for b in self.stem_blocks..ENCODER_BLOCKS {
            h = encoder_block(p, &format!("enc{b}"), &h, b)?;
        }
        tail(p, &h, self.trunk_blocks)
    }

    pub fn forward(&self, p: &Params, bundle: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(p, bundle)?.0)
    }
}

/// Builds the `(N, 3K, H, W)` masked bundle from images and one-hot stream
/// masks `(N, K, H, W)`.
pub fn bundle_from_masks(images: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let (mn, k, mh, mw) = masks.dims4()?;
    if (mn, mh, mw) != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?} do not match images {:?}",
            masks.dims(),
            images.dims()
        )));
    }
    let masked = images
        .unsqueeze(1)?
        .broadcast_mul(&masks.unsqueeze(2)?.to_dtype(images.dtype())?)?;
    Ok(masked.reshape((n, k * c, h, w))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SemsegChannels,
    SemsegHead,
}

/// Any of the generators usable as the source-to-target translator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorCfg {
    MultiStream {
        streams: usize,
        stem_blocks: usize,
        width: usize,
        trunk_blocks: usize,
    },
    SingleStream {
        width: usize,
        trunk_blocks: usize,
    },
    /// Single stream with the K one-hot stream masks appended as input channels.
    SemsegChannels {
        streams: usize,
        width: usize,
        trunk_blocks: usize,
    },
    /// Single stream with an auxiliary per-pixel class head predicting the
    /// input's segmentation.
    SemsegHead {
        classes: usize,
        width: usize,
        trunk_blocks: usize,
    },
}

/// Translated image plus the auxiliary class probabilities of the
/// semseg-head variant.
pub struct GenOutput {
    pub image: Tensor,
    pub probs: Option<Tensor>,
}

impl GeneratorCfg {
    pub fn multi_stream(&self) -> Option<MultiStreamGenCfg> {
        match *self {
            GeneratorCfg::MultiStream {
                streams,
                stem_blocks,
                width,
                trunk_blocks,
            } => Some(MultiStreamGenCfg {
                streams,
                stem_blocks,
                width,
                trunk_blocks,
            }),
            _ => None,
        }
    }

    /// The single-stream backbone of every non-multi-stream kind.
    pub fn backbone(&self) -> Option<SingleStreamGenCfg> {
        match *self {
            GeneratorCfg::MultiStream { .. } => None,
            GeneratorCfg::SingleStream {
                width,
                trunk_blocks,
            }
            | GeneratorCfg::SemsegHead {
                width,
                trunk_blocks,
                ..
            } => Some(SingleStreamGenCfg {
                in_channels: 3,
                width,
                trunk_blocks,
            }),
            GeneratorCfg::SemsegChannels {
                streams,
                width,
                trunk_blocks,
            } => Some(SingleStreamGenCfg {
                in_channels: 3 + streams,
                width,
                trunk_blocks,
            }),
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        match self {
            GeneratorCfg::SemsegChannels { .. } => Some(Variant::SemsegChannels),
            GeneratorCfg::SemsegHead { .. } => Some(Variant::SemsegHead),
            _ => None,
        }
    }

    /// Stream count when the generator consumes stream masks.
    pub fn mask_streams(&self) -> Option<usize> {
        match *self {
            GeneratorCfg::MultiStream { streams, .. } | GeneratorCfg::SemsegChannels { streams, .. } => {
                Some(streams)
            }
            _ => None,
        }
    }

    pub fn needs_masks(&self) -> bool {
        self.mask_streams().is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ms) = self.multi_stream() {
            return ms.validate();
        }
        let b = self.backbone().expect("non multi-stream has a backbone");
        if b.width == 0 {
            return Err(Error::Config("generator width must be positive".into()));
        }
        if let GeneratorCfg::SemsegHead { classes: 0, .. } = self {
            return Err(Error::Config("semseg head needs at least one class".into()));
        }
        Ok(())
    }

    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        self.validate()?;
        if let Some(ms) = self.multi_stream() {
            return ms.init(init);
        }
        let backbone = self.backbone().expect("backbone");
        let mut p = backbone.init(init)?;
        if let GeneratorCfg::SemsegHead { classes, width, .. } = *self {
            init.conv(&mut p, "seg_head", classes, width, 1)?;
        }
        Ok(p)
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.init(&mut Initializer::new(0, DType::F32))?.num_elements())
    }

    /// `images` is `(N, 3, H, W)`; `masks` is `(N, K, H, W)` one-hot and is
    /// required by mask-consuming generators.
    pub fn forward(&self, p: &Params, images: &Tensor, masks: Option<&Tensor>) -> Result<GenOutput> {
        let need_masks = || {
            masks.ok_or_else(|| {
                Error::InvalidInput("this generator requires stream masks".into())
            })
        };
        match self {
            GeneratorCfg::MultiStream { .. } => {
                let cfg = self.multi_stream().expect("multi-stream");
                let m = need_masks()?;
                if m.dim(1)? != cfg.streams {
                    return Err(Error::ShapeMismatch(format!(
                        "expected {} stream masks, got {}",
                        cfg.streams,
                        m.dim(1)?
                    )));
                }
                let image = cfg.forward(p, &bundle_from_masks(images, m)?)?;
                Ok(GenOutput { image, probs: None })
            }
            GeneratorCfg::SingleStream { .. } => Ok(GenOutput {
                image: self.backbone().expect("backbone").forward(p, images)?,
                probs: None,
            }),
            GeneratorCfg::SemsegChannels { streams, .. } => {
                let m = need_masks()?;
                if m.dim(1)? != *streams {
                    return Err(Error::ShapeMismatch("stream mask count".into()));
                }
                let x = Tensor::cat(&[images, &m.to_dtype(images.dtype())?], 1)?;
                Ok(GenOutput {
                    image: self.backbone().expect("backbone").forward(p, &x)?,
                    probs: None,
                })
            }
            GeneratorCfg::SemsegHead { .. } => {
                let (image, feats) = self
                    .backbone()
                    .expect("backbone")
                    .forward_features(p, images)?;
                let logits = conv2d(p, "seg_head", &feats, 1, 0)?;
                Ok(GenOutput {
                    image,
                    probs: Some(softmax_channels(&logits)?),
                })
            }
        }
    }
}

/// Translates one stream bundle with the multi-stream generator.
pub fn msgen_forward(params: &Params, cfg: &MultiStreamGenCfg, bundle: &StreamBundle) -> Result<Image> {
    if bundle.streams() != cfg.streams {
        return Err(Error::ShapeMismatch(format!(
            "bundle has {} streams, generator expects {}",
            bundle.streams(),
            cfg.streams
        )));
    }
    let (h, w) = bundle.dims();
    let x = Tensor::from_vec(bundle.stacked(), (1, 3 * cfg.streams, h, w), &candle_core::Device::Cpu)?
        .to_dtype(params.dtype())?;
    let out = cfg.forward(params, &x)?;
    Ok(tensor_to_images(&out)?.remove(0))
}

/// Translates one image with the single-stream generator.
pub fn ssgen_forward(params: &Params, cfg: &SingleStreamGenCfg, image: &Image) -> Result<Image> {
    let x = image_to_tensor(image, params.dtype())?;
    Ok(tensor_to_images(&cfg.forward(params, &x)?)?.remove(0))
}

/// One-hot stream masks `(1, K, H, W)` for a segmap.
pub fn stream_mask_tensor(segmap: &SegMap, streams: &StreamSpec, dtype: DType) -> Result<Tensor> {
    let masks = masks_from_segmap(segmap, streams)?;
    let (h, w) = masks.dims();
    let data: Vec<f32> = masks
        .masks()
        .iter()
        .flat_map(|m| m.iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (1, masks.streams(), h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs one of the appendix generator variants on a single image.
pub fn variant_forward(
    params: &Params,
    cfg: &GeneratorCfg,
    image: &Image,
    segmap: &SegMap,
    streams: &StreamSpec,
) -> Result<(Image, Option<ProbMap>)> {
    if cfg.variant().is_none() {
        return Err(Error::InvalidInput(
            "variant_forward expects semseg_channels or semseg_head".into(),
        ));
    }
    let x = image_to_tensor(image, params.dtype())?;
    let masks = match cfg.mask_streams() {
        Some(_) => Some(stream_mask_tensor(segmap, streams, params.dtype())?),
        None => None,
    };
    let out = cfg.forward(params, &x, masks.as_ref())?;
    let img = tensor_to_images(&out.image)?.remove(0);
    let probs = out
        .probs
        .map(|p| ProbMap::from_tensor(&p).map(|mut v| v.remove(0)))
        .transpose()?;
    Ok((img, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneSpec};
    use crate::maskops::split;

    fn ramp(h: usize, w: usize, k: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * k % 97) as f32 / 48.5) - 1.0).collect();
        Image::new(h, w, data).unwrap()
    }

    fn ss() -> SingleStreamGenCfg {
        SingleStreamGenCfg {
            in_channels: 3,
            width: 4,
            trunk_blocks: 2,
        }
    }

    fn ms(streams: usize) -> MultiStreamGenCfg {
        MultiStreamGenCfg {
            streams,
            stem_blocks: 3,
            width: 4,
            trunk_blocks: 2,
        }
    }

    #[test]
    fn single_stream_preserves_shape_and_bounds() {
        let cfg = ss();
        let p = cfg.init(&mut Initializer::with_std(0, DType::F32, 0.5)).unwrap();
        for s in [16, 32, 64] {
            let out = ssgen_forward(&p, &cfg, &ramp(s, s, 13)).unwrap();
            assert_eq!(out.dims(), (s, s));
            assert!(out.data().iter().all(|v| v.abs() < 1.0));
        }
        assert!(ssgen_forward(&p, &cfg, &ramp(18, 16, 13)).is_err());
    }

    #[test]
    fn doubling_input_doubles_output() {
        let cfg = ss();
        let p = cfg.init(&mut Initializer::with_std(2, DType::F32, 0.5)).unwrap();
        let a = ssgen_forward(&p, &cfg, &ramp(16, 16, 5)).unwrap();
        let b = ssgen_forward(&p, &cfg, &ramp(32, 32, 5)).unwrap();
        assert_eq!(b.dims(), (2 * a.dims().0, 2 * a.dims().1));
    }

    #[test]
    fn one_stream_equals_single_stream_after_transplant() {
        let scfg = ss();
        let sp = scfg.init(&mut Initializer::with_std(9, DType::F32, 0.3)).unwrap();
        let mp = sp
            .renamed(|n| match n.strip_prefix("enc") {
                Some(rest) => format!("stream0.enc{rest}"),
                None => n.to_string(),
            })
            .unwrap();
        let img = ramp(16, 16, 31);
        let seg = crate::data::SegMap::filled(16, 16, 0, crate::data::default_class_names()).unwrap();
        let masks = masks_from_segmap(&seg, &StreamSpec::single(&crate::data::default_class_names())).unwrap();
        let bundle = split(&img, &masks).unwrap();
        let a = msgen_forward(&mp, &ms(1), &bundle).unwrap();
        let b = ssgen_forward(&sp, &scfg, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_streams_with_their_parameters_is_invisible() {
        let cfg = ms(3);
        let p = cfg.init(&mut Initializer::with_std(4, DType::F64, 0.3)).unwrap();
        let sample = synth_scene(&SceneSpec::desk(16, 16), 7).unwrap();
        let masks = masks_from_segmap(sample.segmap().unwrap(), &StreamSpec::default()).unwrap();
        let bundle = split(&sample.image, &masks).unwrap();
        let (i, j) = (0usize, 2usize);
        let mut parts = bundle.parts().to_vec();
        parts.swap(i, j);
        let swapped_bundle = StreamBundle::new(parts).unwrap();
        let q = p
            .renamed(|n| {
                let swap = |k: usize| if k == i { j } else if k == j { i } else { k };
                for k in 0..3 {
                    if let Some(rest) = n.strip_prefix(&format!("stream{k}.")) {
                        return format!("stream{}.{rest}", swap(k));
                    }
                }
                n.to_string()
            })
            .unwrap();
        // permute the fusion weight's input-channel blocks accordingly
        let w = p.get("fuse.weight").unwrap();
        let c = w.dim(1).unwrap() / 3;
        let blocks: Vec<Tensor> = (0..3).map(|k| w.narrow(1, k * c, c).unwrap()).collect();
        let order = [j, 1, i];
        let permuted = Tensor::cat(&order.map(|k| blocks[k].clone()), 1).unwrap();
        q.set("fuse.weight", &permuted).unwrap();
        let a = cfg
            .forward(&p, &Tensor::from_vec(bundle.stacked(), (1, 9, 16, 16), &candle_core::Device::Cpu).unwrap().to_dtype(DType::F64).unwrap())
            .unwrap();
        let b = cfg
            .forward(&q, &Tensor::from_vec(swapped_bundle.stacked(), (1, 9, 16, 16), &candle_core::Device::Cpu).unwrap().to_dtype(DType::F64).unwrap())
            .unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn mismatched_stream_count_is_rejected() {
        let cfg = ms(3);
        let p = cfg.init(&mut Initializer::new(0, DType::F32)).unwrap();
        let img = ramp(16, 16, 3);
        let masks = crate::maskops::MaskSet::all_in_stream(16, 16, 2, 0).unwrap();
        let bundle = split(&img, &masks).unwrap();
        assert!(matches!(msgen_forward(&p, &cfg, &bundle), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn variants_shapes_and_outputs() {
        let names = crate::data::default_class_names();
        let sample = synth_scene(&SceneSpec::desk(16, 16), 3).unwrap();
        let seg = sample.segmap().unwrap();
        let ch = GeneratorCfg::SemsegChannels {
            streams: 3,
            width: 4,
            trunk_blocks: 1,
        };
        assert_eq!(ch.backbone().unwrap().in_channels, 6);
        let p = ch.init(&mut Initializer::new(1, DType::F32)).unwrap();
        assert_eq!(p.get("enc0.weight").unwrap().dim(1).unwrap(), 6);
        let (img, probs) = variant_forward(&p, &ch, &sample.image, seg, &StreamSpec::default()).unwrap();
        assert_eq!(img.dims(), (16, 16));
        assert!(probs.is_none());

        let head = GeneratorCfg::SemsegHead {
            classes: names.len(),
            width: 4,
            trunk_blocks: 1,
        };
        let p = head.init(&mut Initializer::new(1, DType::F32)).unwrap();
        let (img, probs) = variant_forward(&p, &head, &sample.image, seg, &StreamSpec::default()).unwrap();
        assert_eq!(img.dims(), (16, 16));
        let probs = probs.unwrap();
        assert_eq!((probs.classes(), probs.dims()), (names.len(), (16, 16)));

        let single = GeneratorCfg::SingleStream {
            width: 4,
            trunk_blocks: 1,
        };
        let p = single.init(&mut Initializer::new(1, DType::F32)).unwrap();
        assert!(variant_forward(&p, &single, &sample.image, seg, &StreamSpec::default()).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = GeneratorCfg::SemsegHead {
            classes: 5,
            width: 12,
            trunk_blocks: 4,
        };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("kind = \"semseg_head\""));
        assert_eq!(toml::from_str::<GeneratorCfg>(&text).unwrap(), cfg);
        assert!(toml::from_str::<GeneratorCfg>("kind = \"single_stream\"\nwidth = 4\ntrunk_blocks = 1\nextra = 2").is_err());
    }
}
