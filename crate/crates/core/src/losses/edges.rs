use candle_core::{DType, Device, Tensor};

use crate::data::resample::gaussian_kernel;
use crate::data::Image;
use crate::models::image_to_tensor;
use crate::models::layers::conv2d_raw;
use crate::{Error, Result};

/// Smoothing scale of the training-time edge operator.
pub const EDGE_SIGMA: f32 = 1.0;
/// Added under the square root so the magnitude is differentiable at zero.
pub const EDGE_EPS: f64 = 1e-8;

/// Per-channel gradient magnitude, `[c][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EdgeMap {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

fn pad_same(x: &Tensor, dim: usize, r: usize) -> Result<Tensor> {
    Ok(x.pad_with_same(dim, r, r)?)
}

/// Smooth edge strength of `(N, C, H, W)`: Gaussian blur with replicate
/// padding, central differences, then `sqrt(gx^2 + gy^2 + eps) - sqrt(eps)`
/// so that flat regions map to exactly zero.
pub fn edge_map_tensor(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!("edge map needs at least 2x2, got {h}x{w}")));
    }
    let k: Vec<f64> = gaussian_kernel(EDGE_SIGMA).iter().map(|&v| v as f64).collect();
    let r = k.len() / 2;
    let dt = x.dtype();
    let planes = x.reshape((n * c, 1, h, w))?;
    let kx = Tensor::from_vec(k.clone(), (1, 1, 1, k.len()), &Device::Cpu)?.to_dtype(dt)?;
    let ky = Tensor::from_vec(k.clone(), (1, 1, k.len(), 1), &Device::Cpu)?.to_dtype(dt)?;
    let s = conv2d_raw(&pad_same(&planes, 3, r)?, &kx, 1, 0)?;
    let s = conv2d_raw(&pad_same(&s, 2, r)?, &ky, 1, 0)?;
    let sx = pad_same(&s, 3, 1)?;
    let gx = ((sx.narrow(3, 2, w)? - sx.narrow(3, 0, w)?)? * 0.5)?;
    let sy = pad_same(&s, 2, 1)?;
    let gy = ((sy.narrow(2, 2, h)? - sy.narrow(2, 0, h)?)? * 0.5)?;
    let mag = ((gx.sqr()? + gy.sqr()?)? + EDGE_EPS)?.sqrt()?;
    Ok((mag - EDGE_EPS.sqrt())?.reshape((n, c, h, w))?)
}

pub fn edge_map(image: &Image) -> Result<EdgeMap> {
    let t = edge_map_tensor(&image_to_tensor(image, DType::F64)?)?;
    let (height, width) = image.dims();
    Ok(EdgeMap {
        height,
        width,
        data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
    })
}

/// Mean absolute difference between the edge maps of two batches.
pub fn canny_loss_tensor(x: &Tensor, gx: &Tensor) -> Result<Tensor> {
    Ok((edge_map_tensor(gx)? - edge_map_tensor(x)?)?.abs()?.mean_all()?)
}

pub fn canny_loss(x: &Image, gx: &Image) -> Result<f64> {
    if x.dims() != gx.dims() {
        return Err(Error::ShapeMismatch("canny loss inputs differ in size".into()));
    }
    let t = canny_loss_tensor(&image_to_tensor(x, DType::F64)?, &image_to_tensor(gx, DType::F64)?)?;
    Ok(t.to_scalar::<f64>()?)
}
