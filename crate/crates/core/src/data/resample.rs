use super::Image;
use crate::{Error, Result};

/// Area-average pooling by an integer factor.
pub fn downsample(image: &Image, factor: usize) -> Result<Image> {
    let (h, w) = image.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = vec![0f32; 3 * oh * ow];
    for c in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f32;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += image.get(c, y, x);
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    Image::from_clamped(oh, ow, out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::InvalidInput("upsample factor must be positive".into()));
    }
    let (h, w) = image.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0f32; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                out[(c * oh + y) * ow + x] = image.get(c, y / factor, x / factor);
            }
        }
    }
    Image::new(oh, ow, out)
}

/// Separable Gaussian blur with reflective (mirror, edge not repeated) padding.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Result<Image> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("blur sigma must be > 0, got {sigma}")));
    }
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        out.extend(blur_plane(plane, h, w, sigma));
    }
    Image::from_clamped(h, w, out)
}

pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (t, kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + t as isize - r, w);
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (t, kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + t as isize - r, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(12, 8, [0.3, -0.7, 0.9]).unwrap();
        for sigma in [0.3, 1.0, 2.5, 7.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_rejects_non_positive_sigma() {
        let img = Image::zeros(8, 8).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn downsample_hand_computed() {
        // channel 0: 4x4 values 0..16 scaled by 1/16; channels 1, 2 zero
        let mut data = vec![0f32; 48];
        for i in 0..16 {
            data[i] = i as f32 / 16.0;
        }
        let img = Image::new(4, 4, data).unwrap();
        let out = downsample(&img, 2).unwrap();
        // block means: (0+1+4+5)/4, (2+3+6+7)/4, (8+9+12+13)/4, (10+11+14+15)/4
        let expected = [2.5, 4.5, 10.5, 12.5].map(|v: f32| v / 16.0);
        for (i, e) in expected.iter().enumerate() {
            assert!((out.data()[i] - e).abs() < 1e-7);
        }
        assert!(out.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_rejects_non_divisible_factor() {
        let img = Image::zeros(12, 12).unwrap();
        assert!(downsample(&img, 5).is_err());
        assert!(downsample(&img, 0).is_err());
    }

    #[test]
    fn block_constant_round_trip() {
        let low = Image::new(2, 2, (0..12).map(|i| i as f32 / 16.0 - 0.5).collect()).unwrap();
        let block = upsample_nearest(&low, 4).unwrap();
        let back = upsample_nearest(&downsample(&block, 4).unwrap(), 4).unwrap();
        assert_eq!(back, block);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-9, 3), 1);
        assert_eq!(reflect(3, 1), 0);
    }
}
