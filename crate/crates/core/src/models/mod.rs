//! Network forward passes over named parameter collections.
//!
//! Every network is a config record plus a [`Params`] map; forward passes are
//! pure functions of both, so the same parameters can be evaluated in f32 for
//! training or in f64 for gradient checks.

mod conv;
mod disc;
mod generator;
pub mod layers;
mod segmenter;
mod upscale;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use disc::{disc_forward, receptive_field, DiscCfg, DiscLayer, DiscScale, ScoreMap};
pub use generator::{
    bundle_from_masks, msgen_forward, ssgen_forward, stream_mask_tensor, variant_forward, GenOutput, GeneratorCfg, MultiStreamGenCfg,
    SingleStreamGenCfg, Variant,
};
pub use segmenter::{seg_forward, SegmenterCfg};
pub use upscale::{upscale_forward, UpscaleGenCfg};

use crate::data::Image;
use crate::{Error, Result};

/// Generator outputs are `OUTPUT_SCALE * tanh(.)`, which keeps them strictly
/// inside (-1, 1) even when tanh saturates in f32.
pub const OUTPUT_SCALE: f64 = 1.0 - 1e-6;

/// Named tensors of one network. Names are hierarchical (`stream0.enc1.weight`).
#[derive(Clone, Debug)]
pub struct Params {
    dtype: DType,
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl Params {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
            frozen: false,
        }
    }

    /// A view sharing the same storage whose tensors are detached from the
    /// autodiff graph, so no gradient reaches these parameters.
    pub fn frozen(&self) -> Params {
        Params {
            dtype: self.dtype,
            vars: self.vars.clone(),
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let tensor = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name, Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every tensor into fresh storage, optionally changing dtype.
    pub fn deep_copy(&self, dtype: DType) -> Result<Params> {
        let mut out = Params::new(dtype);
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?.to_dtype(dtype)?)?;
        }
        Ok(out)
    }

    /// Renames every parameter through `f`.
    pub fn renamed(&self, f: impl Fn(&str) -> String) -> Result<Params> {
        let mut out = Params::new(self.dtype);
        for (name, var) in &self.vars {
            out.insert(f(name), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Overwrites the values of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let bad = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .any(|v| !v.is_finite());
            if bad {
                return Err(Error::NonFinite {
                    term: format!("{what}.{name}"),
                });
            }
        }
        Ok(())
    }

    /// Exact equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &Params) -> Result<bool> {
        if self.dtype != other.dtype || self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for ((na, va), (nb, vb)) in self.vars.iter().zip(&other.vars) {
            if na != nb || va.dims() != vb.dims() {
                return Ok(false);
            }
            let a = va.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let b = vb.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Deterministic parameter initialiser: conv weights ~ N(0, std), biases 0.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f32,
    dtype: DType,
}

impl Initializer {
    pub const DEFAULT_STD: f32 = 0.02;

    pub fn new(seed: u64, dtype: DType) -> Self {
        Self::with_std(seed, dtype, Self::DEFAULT_STD)
    }

    pub fn with_std(seed: u64, dtype: DType, std: f32) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0f32, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn conv(
        &mut self,
        params: &mut Params,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
    ) -> Result<()> {
        let w = self.normal(&[out_ch, in_ch, kernel, kernel], self.std)?;
        params.insert(format!("{name}.weight"), w)?;
        params.insert(
            format!("{name}.bias"),
            Tensor::zeros(out_ch, self.dtype, &Device::Cpu)?,
        )?;
        Ok(())
    }
}

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = first.dims();
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn image_to_tensor(image: &Image, dtype: DType) -> Result<Tensor> {
    images_to_tensor(&[image], dtype)
}

/// Splits an `(N, 3, H, W)` tensor into images; values are clamped into range
/// and non-finite values are reported.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks(3 * h * w)
        .take(n)
        .map(|chunk| Image::from_clamped(h, w, chunk.to_vec()))
        .collect()
}

/// Per-pixel class probabilities, `[class][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * height * width || classes == 0 {
            return Err(Error::ShapeMismatch("probability map size".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "probmap".into(),
            });
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// Uniform distribution over `classes` at every pixel.
    pub fn uniform(classes: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            classes,
            height,
            width,
            vec![1.0 / classes as f32; classes * height * width],
        )
    }

    /// Splits an `(N, C, H, W)` probability tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<ProbMap>> {
        let (n, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(c * h * w)
            .take(n)
            .map(|chunk| ProbMap::new(c, h, w, chunk.to_vec()))
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, class: usize, y: usize, x: usize) -> f32 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Most probable class per pixel; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.get(c, y, x) > self.get(best, y, x) {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}
