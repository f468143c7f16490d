use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, instance_norm, softmax_channels, upsample_nearest};
use super::{image_to_tensor, Initializer, Params, ProbMap};
use crate::data::Image;
use crate::{Error, Result};

/// Small pyramid-pooling segmenter: two encoder convolutions (the second
/// stride 2), pooled context at several bin grids, a 3x3 fusion convolution
/// and a 1x1 class head upsampled back to the input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterCfg {
    pub classes: usize,
    pub width: usize,
    pub bins: Vec<usize>,
}

impl SegmenterCfg {
    pub fn new(classes: usize, width: usize) -> Self {
        Self {
            classes,
            width,
            bins: vec![1, 2, 3, 6],
        }
    }

    fn branch_width(&self) -> usize {
        (self.width / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.width == 0 || self.bins.is_empty() || self.bins.contains(&0) {
            return Err(Error::Config(
                "segmenter needs classes, width and non-empty positive bins".into(),
            ));
        }
        Ok(())
    }

    pub fn init(&self, init: &mut Initializer) -> Result<Params> {
        self.validate()?;
        let mut p = Params::new(init.dtype());
        let w = self.width;
        init.conv(&mut p, "enc0", w, 3, 3)?;
        init.conv(&mut p, "enc1", 2 * w, w, 3)?;
        for b in &self.bins {
            init.conv(&mut p, &format!("ppm{b}"), self.branch_width(), 2 * w, 1)?;
        }
        let cat = 2 * w + self.bins.len() * self.branch_width();
        init.conv(&mut p, "fuse", w, cat, 3)?;
        init.conv(&mut p, "head", self.classes, w, 1)?;
        Ok(p)
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.init(&mut Initializer::new(0, DType::F32))?.num_elements())
    }

    /// `(N, 3, H, W)` to class logits `(N, C, H, W)`.
    pub fn logits(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "segmenter input {h}x{w} must have even sides"
            )));
        }
        let dtype = x.dtype();
        let f = instance_norm(&conv2d(p, "enc0", x, 1, 1)?)?.relu()?;
        let f = instance_norm(&conv2d(p, "enc1", &f, 2, 1)?)?.relu()?;
        let (fh, fw) = (h / 2, w / 2);
        let mut parts = vec![f.clone()];
        for &b in &self.bins {
            let pooled = pool_matrix(b, fh, dtype)?
                .broadcast_matmul(&f)?
                .broadcast_matmul(&pool_matrix(b, fw, dtype)?.t()?)?;
            let z = conv2d(p, &format!("ppm{b}"), &pooled, 1, 0)?.relu()?;
            let up = bilinear_matrix(fh, b, dtype)?
                .broadcast_matmul(&z)?
                .broadcast_matmul(&bilinear_matrix(fw, b, dtype)?.t()?)?;
            parts.push(up);
        }
        let y = instance_norm(&conv2d(p, "fuse", &Tensor::cat(&parts, 1)?, 1, 1)?)?.relu()?;
        let logits = conv2d(p, "head", &y, 1, 0)?;
        upsample_nearest(&logits, 2)
    }

    /// Per-pixel class probabilities `(N, C, H, W)`.
    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        softmax_channels(&self.logits(p, x)?)
    }
}

/// `(bins, n)` adaptive average pooling matrix: bin `i` averages
/// `[floor(i n / bins), ceil((i + 1) n / bins))`.
pub(crate) fn pool_matrix(bins: usize, n: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; bins * n];
    for i in 0..bins {
        let start = i * n / bins;
        let end = ((i + 1) * n).div_ceil(bins);
        let len = (end - start) as f64;
        for j in start..end {
            m[i * n + j] = 1.0 / len;
        }
    }
    Ok(Tensor::from_vec(m, (bins, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(n, bins)` bilinear interpolation matrix with half-pixel centres.
pub(crate) fn bilinear_matrix(n: usize, bins: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; n * bins];
    let scale = bins as f64 / n as f64;
    for i in 0..n {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (bins - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(bins - 1);
        let t = src - lo as f64;
        m[i * bins + lo] += 1.0 - t;
        m[i * bins + hi] += t;
    }
    Ok(Tensor::from_vec(m, (n, bins), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn seg_forward(params: &Params, cfg: &SegmenterCfg, image: &Image) -> Result<ProbMap> {
    let probs = cfg.forward(params, &image_to_tensor(image, params.dtype())?)?;
    Ok(ProbMap::from_tensor(&probs)?.remove(0))
}
