use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Buffer of past generated images shown to the discriminators. Until full,
/// every image is stored and passed through; afterwards each query returns,
/// with probability 1/2, a stored image (replacing it with the new one) and
/// otherwise the new image.
#[derive(Clone, Debug)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn from_images(capacity: usize, images: Vec<Tensor>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// `batch` is `(N, 3, H, W)`; the result has the same shape and carries
    /// no gradient.
    pub fn query(&mut self, batch: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let batch = batch.detach();
        if self.capacity == 0 {
            return Ok(batch);
        }
        let n = batch.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = batch.narrow(0, i, 1)?.copy()?;
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random::<f64>() > 0.5 {
                let j = rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn batch(n: usize, tag: f32) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * 2 * 2).map(|i| tag + (i / 12) as f32).collect();
        Tensor::from_vec(data, (n, 3, 2, 2), &Device::Cpu).unwrap()
    }

    fn first_values(t: &Tensor) -> Vec<f32> {
        let n = t.dim(0).unwrap();
        (0..n)
            .map(|i| t.get(i).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0])
            .collect()
    }

    #[test]
    fn zero_capacity_is_passthrough() {
        let mut pool = ImagePool::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch(3, 10.0);
        let out = pool.query(&b, &mut rng).unwrap();
        assert_eq!(first_values(&out), first_values(&b));
        assert!(pool.is_empty());
        let mut fresh = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut fresh));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stays_bounded_and_returns_seen_images(cap in 1usize..6, sizes in proptest::collection::vec(1usize..4, 1..12), seed in 0u64..1000) {
            let mut pool = ImagePool::new(cap);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = Vec::new();
            for (k, &n) in sizes.iter().enumerate() {
                let b = batch(n, 100.0 * k as f32);
                seen.extend(first_values(&b));
                let out = pool.query(&b, &mut rng).unwrap();
                prop_assert!(pool.len() <= cap);
                prop_assert_eq!(out.dims(), b.dims());
                prop_assert_eq!(out.dtype(), DType::F32);
                for v in first_values(&out) {
                    prop_assert!(seen.contains(&v));
                }
            }
        }
    }
}
