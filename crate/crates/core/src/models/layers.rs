//! Functional building blocks shared by all networks.

use candle_core::{Tensor, D};

pub use super::conv::conv2d_raw;
use super::Params;
use crate::Result;

pub const NORM_EPS: f64 = 1e-5;

/// 2-D convolution with bias; weights `{name}.weight`, `{name}.bias`.
pub fn conv2d(p: &Params, name: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = conv2d_raw(x, &w, stride, padding)?;
    Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?)
}

/// Per-sample, per-channel normalisation over the spatial dims, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Nearest-neighbour upsampling built from broadcast + reshape so that its
/// gradient accumulates correctly.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// Area-average downsampling.
pub fn downsample_mean(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

/// Softmax over the channel axis.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Saturating odd output head.
pub fn bounded(x: &Tensor) -> Result<Tensor> {
    Ok((x.tanh()? * super::OUTPUT_SCALE)?)
}
