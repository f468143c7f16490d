use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, instance_norm, leaky_relu};
use super::{image_to_tensor, Initializer, Params};
use crate::data::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscScale {
    Local,
    Medium,
    Global,
}

impl DiscScale {
    pub const ALL: [DiscScale; 3] = [DiscScale::Local, DiscScale::Medium, DiscScale::Global];

    pub fn name(self) -> &'static str {
        match self {
            DiscScale::Local => "local",
            DiscScale::Medium => "medium",
            DiscScale::Global => "global",
        }
    }
}

impl std::fmt::Display for DiscScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One convolution of a patch discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm: bool,
    pub activation: bool,
}

/// PatchGAN-style discriminator: `stages` 4x4 stride-2 convolutions followed
/// by a 3x3 stride-1 scoring convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscCfg {
    pub scale: DiscScale,
    pub width: usize,
    pub stages: usize,
    pub norm: bool,
}

pub const LEAKY_SLOPE: f64 = 0.2;
const MAX_WIDTH_MULT: usize = 8;
/// Instance statistics over fewer positions than this erase the signal (a
/// 1x1 map normalises to zero), so such layers skip normalisation.
pub const MIN_NORM_AREA: usize = 16;

/// Receptive field of `stages` 4x4/2 convolutions and a final 3x3/1 one.
pub fn receptive_field(stages: usize) -> usize {
    let mut r = 3;
    for _ in 0..stages {
        r = (r - 1) * 2 + 4;
    }
    r
}

impl DiscCfg {
    /// The default trio for square inputs of side `size`: the global
    /// discriminator gets the fewest stages whose receptive field covers the
    /// image (at least three), the medium one a stage less at a quarter of the
    /// width, the local one two stages less. Only the local one normalises:
    /// instance statistics would hide the image-wide brightness and colour
    /// the global one judges, and the medium one stays plain for stability.
    pub fn for_scale(scale: DiscScale, size: usize, width: usize) -> Self {
        let mut global = 3;
        while receptive_field(global) < size {
            global += 1;
        }
        let (stages, width, norm) = match scale {
            DiscScale::Global => (global, width, false),
            DiscScale::Medium => (global - 1, (width / 4).max(1), false),
            DiscScale::Local => ((global - 2).max(1), width, true),
        };
        DiscCfg {
            scale,
            width,
            stages,
            norm,
        }
    }

    pub fn trio(size: usize, width: usize) -> [DiscCfg; 3] {
        DiscScale::ALL.map(|s| DiscCfg::for_scale(s, size, width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.stages == 0 {
            return Err(Error::Config(format!(
                "{} discriminator needs positive width and stage count",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<DiscLayer> {
        let mut out = Vec::with_capacity(self.stages + 1);
        let mut in_ch = 3;
        for i in 0..self.stages {
            let out_ch = self.width * (1usize << i).min(MAX_WIDTH_MULT);
            out.push(DiscLayer {
                in_ch,
                out_ch,
                kernel: 4,
                stride: 2,
                padding: 1,
                norm: self.norm && i > 0,
                activation: true,
            });
            in_ch = out_ch;
        }
        out.push(DiscLayer {
            in_ch,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
            norm: false,
            activation: false,
        });
        out
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.stages)
    }

    /// Smallest input side that still yields a score map of at least 1x1.
    pub fn min_input(&self) -> usize {
        1 << self.stages
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height >> self.stages, width >> self.stages)
    }

    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        self.validate()?;
        let mut p = Params::new(init.dtype());
        for (i, l) in self.layers().iter().enumerate() {
            init.conv(&mut p, &format!("conv{i}"), l.out_ch, l.in_ch, l.kernel)?;
        }
        Ok(p)
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.init(&mut Initializer::new(0, DType::F32))?.num_elements())
    }

    /// `(N, 3, H, W)` to raw scores `(N, 1, H / 2^stages, W / 2^stages)`.
    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let min = self.min_input();
        if h < min || w < min || h % min != 0 || w % min != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} discriminator needs sides that are multiples of {min}, got {h}x{w}",
                self.scale
            )));
        }
        let mut y = x.clone();
        for (i, l) in self.layers().iter().enumerate() {
            y = conv2d(p, &format!("conv{i}"), &y, l.stride, l.padding)?;
            let (_, _, oh, ow) = y.dims4()?;
            if l.norm && oh * ow >= MIN_NORM_AREA {
                y = instance_norm(&y)?;
            }
            if l.activation {
                y = leaky_relu(&y, LEAKY_SLOPE)?;
            }
        }
        Ok(y)
    }
}

/// Real-valued patch scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
}

pub fn disc_forward(params: &Params, cfg: &DiscCfg, image: &Image) -> Result<ScoreMap> {
    let y = cfg.forward(params, &image_to_tensor(image, params.dtype())?)?;
    let (_, _, height, width) = y.dims4()?;
    let scores = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("{} discriminator", cfg.scale),
        });
    }
    Ok(ScoreMap {
        height,
        width,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_rf(cfg: &DiscCfg) -> usize {
        // walk the layer stack backwards from one output pixel
        let (mut lo, mut hi) = (0isize, 0isize);
        for l in cfg.layers().iter().rev() {
            lo = lo * l.stride as isize - l.padding as isize;
            hi = hi * l.stride as isize - l.padding as isize + l.kernel as isize - 1;
        }
        (hi - lo + 1) as usize
    }

    #[test]
    fn receptive_fields_match_layer_walk() {
        for stages in 1..6 {
            let cfg = DiscCfg {
                scale: DiscScale::Local,
                width: 4,
                stages,
                norm: true,
            };
            assert_eq!(cfg.receptive_field(), brute_force_rf(&cfg));
        }
        assert_eq!(
            (1..6).map(receptive_field).collect::<Vec<_>>(),
            vec![8, 18, 38, 78, 158]
        );
    }

    #[test]
    fn trio_orders_receptive_fields_and_capacity() {
        for size in [16, 32, 64] {
            let [l, m, g] = DiscCfg::trio(size, 16);
            assert!(l.receptive_field() < m.receptive_field());
            assert!(m.receptive_field() < g.receptive_field());
            assert!(g.receptive_field() >= size);
            let (pl, pm, pg) = (l.num_params().unwrap(), m.num_params().unwrap(), g.num_params().unwrap());
            assert!(pm < pl && pl < pg, "{pm} {pl} {pg}");
            assert!(l.norm && !m.norm && !g.norm);
        }
    }

    #[test]
    fn local_scores_are_strided_patches() {
        let cfg = DiscCfg::for_scale(DiscScale::Local, 64, 8);
        let p = cfg.init(&mut Initializer::new(3, DType::F32)).unwrap();
        let img = Image::filled(64, 64, [0.1, -0.2, 0.3]).unwrap();
        let s = disc_forward(&p, &cfg, &img).unwrap();
        assert!(s.height < 64 && s.width < 64 && s.height > 1);
        assert_eq!(s.scores.len(), s.height * s.width);
    }

    #[test]
    fn global_scores_depend_on_input_at_small_sides() {
        let cfg = DiscCfg::for_scale(DiscScale::Global, 8, 4);
        let p = cfg.init(&mut Initializer::new(3, DType::F32)).unwrap();
        let a = disc_forward(&p, &cfg, &Image::filled(8, 8, [0.5, 0.0, -0.5]).unwrap()).unwrap();
        let b = disc_forward(&p, &cfg, &Image::filled(8, 8, [-0.5, 0.2, 0.5]).unwrap()).unwrap();
        assert_eq!((a.height, a.width), (1, 1));
        assert_ne!(a.scores, b.scores);
    }

    #[test]
    fn undersized_input_is_rejected() {
        let cfg = DiscCfg::for_scale(DiscScale::Global, 64, 8);
        let p = cfg.init(&mut Initializer::new(3, DType::F32)).unwrap();
        let img = Image::zeros(8, 8).unwrap();
        assert!(matches!(
            disc_forward(&p, &cfg, &img),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
