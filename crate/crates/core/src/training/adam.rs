use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::OptimCfg;
use crate::models::Params;
use crate::Result;

/// Adam with bias correction. Moments are keyed `net/param`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: OptimCfg,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimCfg) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter of `nets` that received a gradient.
    pub fn step(&mut self, nets: &[(&str, &Params)], grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (net, params) in nets {
            for (name, var) in params.iter() {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let key = format!("{net}/{name}");
                let m = match self.m.get(&key) {
                    Some(m) => ((m * b1)? + (g * (1.0 - b1))?)?,
                    None => (g * (1.0 - b1))?,
                };
                let v = match self.v.get(&key) {
                    Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                    None => (g.sqr()? * (1.0 - b2))?,
                };
                let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
                let update = ((&m / denom)? * (lr / c1))?;
                var.set(&(var.as_tensor() - update)?.detach())?;
                self.m.insert(key.clone(), m.detach());
                self.v.insert(key, v.detach());
            }
        }
        Ok(())
    }
}

/// Constant step size for the first `decay_start` fraction of training, then
/// linear decay towards zero.
pub fn lr_at(cfg: &OptimCfg, step: u64, total: u64) -> f64 {
    let start = (cfg.decay_start * total as f64).floor() as u64;
    if step < start || total <= start {
        return cfg.lr;
    }
    cfg.lr * (total - step) as f64 / (total - start + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn matches_scalar_adam() {
        let cfg = OptimCfg::default();
        let mut p = Params::new(DType::F64);
        p.insert("w", Tensor::new(&[0.5f64, -1.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(cfg);
        let (mut w, mut m, mut v) = ([0.5f64, -1.0], [0.0; 2], [0.0; 2]);
        for t in 1..=5 {
            let x = p.get("w").unwrap();
            let loss = (x.sqr().unwrap().sum_all().unwrap() * 3.0).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[("n", &p)], &grads, 1e-2).unwrap();
            for i in 0..2 {
                let g = 6.0 * w[i];
                m[i] = 0.5 * m[i] + 0.5 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.5f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = p.get("w").unwrap().to_vec1::<f64>().unwrap();
        for i in 0..2 {
            assert!((got[i] - w[i]).abs() < 1e-12, "{} vs {}", got[i], w[i]);
        }
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut p = Params::new(DType::F32);
        p.insert("a", Tensor::ones(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let other = Var::new(&[1f32, 2.0], &Device::Cpu).unwrap();
        let grads = other.as_tensor().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(OptimCfg::default());
        opt.step(&[("n", &p)], &grads, 0.1).unwrap();
        assert_eq!(p.get("a").unwrap().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
        assert!(opt.m.is_empty());
    }

    #[test]
    fn step_size_schedule() {
        let cfg = OptimCfg::default();
        assert_eq!(lr_at(&cfg, 0, 100), 2e-4);
        assert_eq!(lr_at(&cfg, 49, 100), 2e-4);
        assert!((lr_at(&cfg, 50, 100) - 2e-4 * 50.0 / 51.0).abs() < 1e-18);
        assert!(lr_at(&cfg, 99, 100) > 0.0);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = lr_at(&cfg, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
