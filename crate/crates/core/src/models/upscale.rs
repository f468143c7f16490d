use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::generator::{encoder_block, fusion, init_encoder_block, init_fusion, init_tail, tail, ENCODER_BLOCKS};
use super::layers::upsample_nearest;
use super::{image_to_tensor, tensor_to_images, Initializer, Params};
use crate::data::Image;
use crate::{Error, Result};

/// Two-path generator: the full-resolution source and the nearest-upsampled
/// low-resolution guidance each pass through their own encoder, then are
/// concatenated, mixed and decoded by a shared trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpscaleGenCfg {
    pub factor: usize,
    pub width: usize,
    pub trunk_blocks: usize,
    #[serde(default = "default_true")]
    pub use_guidance: bool,
}

fn default_true() -> bool {
    true
}

pub const PATHS: [&str; 2] = ["src", "guide"];

impl UpscaleGenCfg {
    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        if self.factor == 0 || self.width == 0 {
            return Err(Error::Config("upscaler needs positive factor and width".into()));
        }
        let mut p = Params::new(init.dtype());
        for path in PATHS {
            let mut in_ch = 3;
            for b in 0..ENCODER_BLOCKS {
                init_encoder_block(init, &mut p, &format!("{path}.enc{b}"), in_ch, self.width, b)?;
                in_ch = self.width << b;
            }
        }
        init_fusion(init, &mut p, PATHS.len(), self.width << (ENCODER_BLOCKS - 1))?;
        init_tail(init, &mut p, self.width, self.trunk_blocks)?;
        Ok(p)
    }

    /// `full` is `(N, 3, H, W)`, `guidance` `(N, 3, H / factor, W / factor)`.
    pub fn forward(&self, p: &Params, full: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = full.dims4()?;
        let (gn, _, gh, gw) = guidance.dims4()?;
        if gn != n || gh * self.factor != h || gw * self.factor != w {
            return Err(Error::ShapeMismatch(format!(
                "guidance {gh}x{gw} is not the {h}x{w} input divided by {}",
                self.factor
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "upscaler input {h}x{w} must have sides divisible by 4"
            )));
        }
        let guide = if self.use_guidance {
            upsample_nearest(guidance, self.factor)?
        } else {
            full.zeros_like()?
        };
        let mut feats = Vec::with_capacity(2);
        for (path, x) in PATHS.iter().zip([full, &guide]) {
            let mut hcur = x.clone();
            for b in 0..ENCODER_BLOCKS {
                hcur = encoder_block(p, &format!("{path}.enc{b}"), &hcur, b)?;
            }
            feats.push(hcur);
        }
        Ok(tail(p, &fusion(p, &feats)?, self.trunk_blocks)?.0)
    }
}

pub fn upscale_forward(params: &Params, cfg: &UpscaleGenCfg, full_image: &Image, guidance: &Image) -> Result<Image> {
    let dt = params.dtype();
    let out = cfg.forward(params, &image_to_tensor(full_image, dt)?, &image_to_tensor(guidance, dt)?)?;
    Ok(tensor_to_images(&out)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn ramp(h: usize, w: usize, k: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * k % 97) as f32 / 48.5) - 1.0).collect();
        Image::new(h, w, data).unwrap()
    }

    fn cfg(use_guidance: bool) -> UpscaleGenCfg {
        UpscaleGenCfg {
            factor: 4,
            width: 4,
            trunk_blocks: 1,
            use_guidance,
        }
    }

    #[test]
    fn output_matches_full_resolution() {
        let c = cfg(true);
        let p = c.init(&mut Initializer::with_std(0, DType::F32, 0.2)).unwrap();
        let out = upscale_forward(&p, &c, &ramp(32, 32, 7), &ramp(8, 8, 11)).unwrap();
        assert_eq!(out.dims(), (32, 32));
        assert!(upscale_forward(&p, &c, &ramp(32, 32, 7), &ramp(16, 16, 11)).is_err());
    }

    #[test]
    fn disabled_guidance_still_produces_images() {
        let c = cfg(false);
        let p = c.init(&mut Initializer::with_std(0, DType::F32, 0.2)).unwrap();
        let a = upscale_forward(&p, &c, &ramp(16, 16, 7), &ramp(4, 4, 11)).unwrap();
        let b = upscale_forward(&p, &c, &ramp(16, 16, 7), &ramp(4, 4, 13)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
    }

    #[test]
    fn paths_are_not_interchangeable() {
        let c = cfg(true);
        let p = c.init(&mut Initializer::with_std(5, DType::F32, 0.2)).unwrap();
        let swapped = p
            .renamed(|n| {
                if let Some(rest) = n.strip_prefix("src.") {
                    format!("guide.{rest}")
                } else if let Some(rest) = n.strip_prefix("guide.") {
                    format!("src.{rest}")
                } else {
                    n.to_string()
                }
            })
            .unwrap();
        let (full, guide) = (ramp(16, 16, 7), ramp(4, 4, 11));
        let a = upscale_forward(&p, &c, &full, &guide).unwrap();
        let b = upscale_forward(&swapped, &c, &full, &guide).unwrap();
        assert_ne!(a, b);
    }
}
