use std::collections::VecDeque;

use crate::data::resample::{blur_plane, reflect};
use crate::data::Image;
use crate::{Error, Result};

/// Smoothing scale applied before the Sobel operator.
pub const CANNY_SIGMA: f32 = 1.0;

/// Row-major boolean edge map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMap) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Channel mean, the intensity the edge detector works on.
pub fn intensity(image: &Image) -> Vec<f32> {
    let (h, w) = image.dims();
    (0..h * w)
        .map(|i| (image.data()[i] + image.data()[h * w + i] + image.data()[2 * h * w + i]) / 3.0)
        .collect()
}

/// Smoothed Sobel gradient magnitude and direction of the image intensity.
pub fn sobel_gradients(image: &Image) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (h, w) = image.dims();
    let s = blur_plane(&intensity(image), h, w, CANNY_SIGMA);
    let at = |y: isize, x: isize| s[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0f32; h * w];
    let mut gy = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    let mag = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    (mag, gx, gy)
}

/// Neighbour offsets `(dy, dx)` along the gradient direction quantised to
/// 0, 45, 90 or 135 degrees.
fn direction_offset(gx: f32, gy: f32) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Classical Canny: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression along the quantised gradient direction, and hysteresis with
/// 8-connectivity. Thresholds apply to the Sobel magnitude; a pixel needs a
/// positive magnitude to be an edge.
pub fn canny_reference(image: &Image, low: f32, high: f32) -> Result<BinaryMap> {
    if !(low >= 0.0 && high >= low) {
        return Err(Error::InvalidInput(format!(
            "canny thresholds must satisfy 0 <= low <= high, got ({low}, {high})"
        )));
    }
    let (h, w) = image.dims();
    let (mag, gx, gy) = sobel_gradients(image);
    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mag[i] <= 0.0 {
                continue;
            }
            let (dy, dx) = direction_offset(gx[i], gy[i]);
            let (yy, xx) = (y as isize, x as isize);
            if mag[i] >= m(yy + dy, xx + dx) && mag[i] >= m(yy - dy, xx - dx) {
                thin[i] = mag[i];
            }
        }
    }
    let mut edges = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v > 0.0 && v >= high {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] > 0.0 && thin[j] >= low {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(BinaryMap {
        height: h,
        width: w,
        data: edges,
    })
}

/// Canny with thresholds given as fractions of the image's maximum gradient.
pub fn canny_relative(image: &Image, low_frac: f32, high_frac: f32) -> Result<BinaryMap> {
    let (mag, _, _) = sobel_gradients(image);
    let max = mag.iter().cloned().fold(0f32, f32::max);
    canny_reference(image, low_frac * max, high_frac * max)
}
