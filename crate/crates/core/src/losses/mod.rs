//! Adversarial, reconstruction, edge and segmentation objectives.
//!
//! Tensor-level functions build autodiff graphs for training; the
//! image-level wrappers evaluate the same expressions in f64.

mod canny;
mod edges;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use canny::{canny_reference, canny_relative, intensity, sobel_gradients, BinaryMap, CANNY_SIGMA};
pub use edges::{canny_loss, canny_loss_tensor, edge_map, edge_map_tensor, EdgeMap, EDGE_EPS, EDGE_SIGMA};

use crate::data::{Image, SegMap};
use crate::models::{image_to_tensor, DiscCfg, DiscScale, Params, ProbMap};
use crate::{Error, Result};

/// Lower clamp on probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Global (high receptive field) discriminator.
    pub lambda_h: f64,
    pub lambda_m: f64,
    /// Local (low receptive field) discriminator.
    pub lambda_l: f64,
    pub lambda_cyc: f64,
    pub lambda_idn: f64,
    pub lambda_canny: f64,
    pub lambda_semseg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_m: 1.0,
            lambda_l: 1.0,
            lambda_cyc: 10.0,
            lambda_idn: 5.0,
            lambda_canny: 1.0,
            lambda_semseg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_h", self.lambda_h),
            ("lambda_m", self.lambda_m),
            ("lambda_l", self.lambda_l),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_idn", self.lambda_idn),
            ("lambda_canny", self.lambda_canny),
            ("lambda_semseg", self.lambda_semseg),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn adversarial(&self, scale: DiscScale) -> f64 {
        match scale {
            DiscScale::Global => self.lambda_h,
            DiscScale::Medium => self.lambda_m,
            DiscScale::Local => self.lambda_l,
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let bad = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .any(|v| !v.is_finite());
    if bad {
        return Err(Error::NonFinite { term: what.into() });
    }
    Ok(())
}

/// `0.5 mean((real - 1)^2) + 0.5 mean(fake^2)`.
pub fn lsgan_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_finite(real_scores, "real scores")?;
    check_finite(fake_scores, "fake scores")?;
    let r = (real_scores - 1.0)?.sqr()?.mean_all()?;
    let f = fake_scores.sqr()?.mean_all()?;
    Ok(((r + f)? * 0.5)?)
}

/// `0.5 mean((fake - 1)^2)`.
pub fn lsgan_g(fake_scores: &Tensor) -> Result<Tensor> {
    check_finite(fake_scores, "fake scores")?;
    Ok(((fake_scores - 1.0)?.sqr()?.mean_all()? * 0.5)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    D,
    G,
}

/// Scores of the three discriminators on one batch, in [`DiscScale::ALL`] order.
pub struct ScaleScores<'a> {
    pub real: [Option<&'a Tensor>; 3],
    pub fake: [Option<&'a Tensor>; 3],
}

/// `lambda_h * term_global + lambda_m * term_medium + lambda_l * term_local`.
pub fn adv_total(scores: &ScaleScores, weights: &LossWeights, side: Side) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (i, scale) in DiscScale::ALL.iter().enumerate() {
        let missing = || Error::InvalidInput(format!("missing {scale} discriminator scores"));
        let fake = scores.fake[i].ok_or_else(missing)?;
        let term = match side {
            Side::D => lsgan_d(scores.real[i].ok_or_else(missing)?, fake)?,
            Side::G => lsgan_g(fake)?,
        };
        let term = (term * weights.adversarial(*scale))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

/// Mean absolute error.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

fn image_l1(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch("images differ in size".into()));
    }
    let t = l1(&image_to_tensor(a, DType::F64)?, &image_to_tensor(b, DType::F64)?)?;
    Ok(t.to_scalar::<f64>()?)
}

pub fn cycle_loss(x: &Image, x_reconstructed: &Image) -> Result<f64> {
    image_l1(x, x_reconstructed)
}

pub fn identity_loss(y: &Image, y_mapped: &Image) -> Result<f64> {
    image_l1(y, y_mapped)
}

/// One-hot `(N, C, H, W)` encoding of label maps.
pub fn one_hot(labels: &[&[u8]], classes: usize, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes * height * width];
    for (n, lab) in labels.iter().enumerate() {
        if lab.len() != height * width {
            return Err(Error::ShapeMismatch("label map size".into()));
        }
        for (i, &c) in lab.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(Error::ClassOutOfRange { class: c, classes });
            }
            data[(n * classes + c) * height * width + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over pixels of `-log max(p[target], 1e-7)`; `target` is one-hot.
pub fn semseg_loss_tensor(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    if probs.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs target {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    let (n, _, h, w) = probs.dims4()?;
    let logp = probs.clamp(PROB_FLOOR, 1.0)?.log()?;
    let picked = (logp * target)?.sum_all()?;
    Ok((picked.neg()? / (n * h * w) as f64)?)
}

pub fn semseg_loss(probmap: &ProbMap, target: &SegMap) -> Result<f64> {
    let (h, w) = probmap.dims();
    if target.dims() != (h, w) {
        return Err(Error::ShapeMismatch("probability map and segmap differ in size".into()));
    }
    let c = probmap.classes();
    let mut data = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                data.push(probmap.get(k, y, x) as f64);
            }
        }
    }
    let probs = Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?;
    let target = one_hot(&[target.labels()], c, h, w, DType::F64)?;
    Ok(semseg_loss_tensor(&probs, &target)?.to_scalar::<f64>()?)
}

/// One named, weighted loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Itemised loss values with their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).map(|t| t.value)
    }

    /// Weighted sum recomputed from the itemised terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

/// Accumulates weighted loss tensors and their report. Terms with zero weight
/// are recorded as 0 and never evaluated.
#[derive(Default)]
pub struct LossAccumulator {
    total: Option<Tensor>,
    report: LossReport,
}

impl LossAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, weight: f64, term: impl FnOnce() -> Result<Tensor>) -> Result<()> {
        let name = name.into();
        if weight == 0.0 {
            self.report.terms.push(LossTerm { name, value: 0.0, weight });
            return Ok(());
        }
        let t = term().map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { term: name.clone() },
            other => other,
        })?;
        let value = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: name });
        }
        let weighted = (t * weight)?;
        self.total = Some(match self.total.take() {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
        self.report.terms.push(LossTerm { name, value, weight });
        Ok(())
    }

    /// Total as a differentiable scalar (None when every term was skipped)
    /// and the report.
    pub fn finish(mut self) -> (Option<Tensor>, LossReport) {
        self.report.total = self.report.weighted_sum();
        (self.total, self.report)
    }
}

/// Discriminator objective of one direction: `adv_total` on the D side with the
/// fake batch detached, so no gradient reaches the generator.
pub fn discriminator_loss(
    discs: &[(&DiscCfg, &Params); 3],
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    prefix: &str,
    acc: &mut LossAccumulator,
) -> Result<()> {
    let fake = fake.detach();
    for (cfg, params) in discs {
        acc.add(format!("{prefix}.{}", cfg.scale), weights.adversarial(cfg.scale), || {
            lsgan_d(&cfg.forward(params, real)?, &cfg.forward(params, &fake)?)
        })?;
    }
    Ok(())
}

/// Tensors of one translation direction needed by the generator objective.
pub struct DirectionTerms<'a> {
    /// Direction tag used in term names, e.g. `xy`.
    pub name: &'a str,
    pub source: &'a Tensor,
    pub translated: &'a Tensor,
    pub reconstructed: &'a Tensor,
    /// Real target-domain batch and its image under the same generator.
    pub target_real: &'a Tensor,
    pub identity: &'a Tensor,
    /// Target-domain discriminators, evaluated on `translated`; should be
    /// frozen views so the generator step leaves them untouched.
    pub discs: [(&'a DiscCfg, &'a Params); 3],
    /// Segmenter probabilities on `translated` and the one-hot source segmap.
    pub semseg: Option<(&'a Tensor, &'a Tensor)>,
}

/// Generator objective summed over directions: adversarial terms per
/// discriminator, cycle, identity, edge and segmentation terms.
pub fn total_generator_loss(dirs: &[DirectionTerms], weights: &LossWeights, acc: &mut LossAccumulator) -> Result<()> {
    weights.validate()?;
    for d in dirs {
        for (cfg, params) in &d.discs {
            acc.add(format!("adv_{}.{}", d.name, cfg.scale), weights.adversarial(cfg.scale), || {
                lsgan_g(&cfg.forward(params, d.translated)?)
            })?;
        }
        acc.add(format!("cycle_{}", d.name), weights.lambda_cyc, || l1(d.reconstructed, d.source))?;
        acc.add(format!("idn_{}", d.name), weights.lambda_idn, || l1(d.identity, d.target_real))?;
        acc.add(format!("canny_{}", d.name), weights.lambda_canny, || {
            canny_loss_tensor(d.source, d.translated)
        })?;
        if let Some((probs, target)) = d.semseg {
            acc.add(format!("semseg_{}", d.name), weights.lambda_semseg, || {
                semseg_loss_tensor(probs, target)
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::layers::{conv2d, softmax_channels};
    use crate::models::Initializer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn t(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn lsgan_hand_values() {
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let half = (&ones * 0.5).unwrap();
        assert_eq!(s(lsgan_d(&ones, &zeros).unwrap()), 0.0);
        assert!((s(lsgan_d(&half, &half).unwrap()) - 0.25).abs() < 1e-15);
        assert_eq!(s(lsgan_g(&ones).unwrap()), 0.0);
        assert!((s(lsgan_g(&zeros).unwrap()) - 0.5).abs() < 1e-15);
        let nan = (&ones * f64::NAN).unwrap();
        assert!(matches!(lsgan_g(&nan), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn lsgan_matches_loops() {
        let r = rand_vec(30, 1, -2.0, 2.0);
        let f = rand_vec(30, 2, -2.0, 2.0);
        let (rt, ft) = (t(r.clone(), (2, 1, 3, 5)), t(f.clone(), (2, 1, 3, 5)));
        let mut dr = 0.0;
        let mut df = 0.0;
        let mut g = 0.0;
        for i in 0..30 {
            dr += (r[i] - 1.0) * (r[i] - 1.0);
            df += f[i] * f[i];
            g += (f[i] - 1.0) * (f[i] - 1.0);
        }
        assert!(close(s(lsgan_d(&rt, &ft).unwrap()), 0.5 * dr / 30.0 + 0.5 * df / 30.0));
        assert!(close(s(lsgan_g(&ft).unwrap()), 0.5 * g / 30.0));
    }

    #[test]
    fn adv_total_weighting() {
        let maps: Vec<Tensor> = (0..6).map(|i| t(rand_vec(16, 10 + i, -1.0, 2.0), (1, 1, 4, 4))).collect();
        let scores = ScaleScores {
            real: [Some(&maps[0]), Some(&maps[1]), Some(&maps[2])],
            fake: [Some(&maps[3]), Some(&maps[4]), Some(&maps[5])],
        };
        let zero = LossWeights {
            lambda_h: 0.0,
            lambda_m: 0.0,
            lambda_l: 0.0,
            ..Default::default()
        };
        assert_eq!(s(adv_total(&scores, &zero, Side::G).unwrap()), 0.0);
        let only_h = LossWeights { lambda_h: 1.0, ..zero };
        // global is the third entry of DiscScale::ALL
        assert_eq!(
            s(adv_total(&scores, &only_h, Side::D).unwrap()),
            s(lsgan_d(&maps[2], &maps[5]).unwrap())
        );
        let w = LossWeights {
            lambda_h: 1.0,
            lambda_m: 0.5,
            lambda_l: 0.25,
            ..zero
        };
        let loop_g = |m: &Tensor| {
            let v = m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            0.5 * v.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / v.len() as f64
        };
        let expected = 0.25 * loop_g(&maps[3]) + 0.5 * loop_g(&maps[4]) + loop_g(&maps[5]);
        assert!(close(s(adv_total(&scores, &w, Side::G).unwrap()), expected));
        let missing = ScaleScores {
            real: [None, None, None],
            fake: [Some(&maps[3]), None, Some(&maps[5])],
        };
        assert!(adv_total(&missing, &w, Side::G).is_err());
    }

    fn img(seed: u64, h: usize, w: usize) -> Image {
        Image::new(h, w, rand_vec(3 * h * w, seed, -1.0, 1.0).iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn reconstruction_losses() {
        let zero = Image::zeros(4, 4).unwrap();
        let half = Image::filled(4, 4, [0.5; 3]).unwrap();
        assert_eq!(cycle_loss(&half, &half).unwrap(), 0.0);
        assert!((cycle_loss(&zero, &half).unwrap() - 0.5).abs() < 1e-12);
        assert!((identity_loss(&zero, &half).unwrap() - 0.5).abs() < 1e-12);
        let (a, b) = (img(3, 5, 6), img(4, 5, 6));
        let oracle: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / 90.0;
        assert!(close(cycle_loss(&a, &b).unwrap(), oracle));
        assert!(close(identity_loss(&a, &b).unwrap(), oracle));
        assert!(cycle_loss(&a, &img(4, 6, 6)).is_err());
    }

    fn names() -> Vec<String> {
        crate::data::default_class_names()
    }

    #[test]
    fn semseg_closed_forms_and_loop() {
        let target = SegMap::new(2, 2, vec![0, 3, 4, 1], names()).unwrap();
        let uniform = ProbMap::uniform(5, 2, 2).unwrap();
        assert!((semseg_loss(&uniform, &target).unwrap() - 5f64.ln()).abs() < 1e-6);
        let mut sharp = vec![0f32; 20];
        for (i, &c) in target.labels().iter().enumerate() {
            sharp[c as usize * 4 + i] = 1.0;
        }
        assert!(semseg_loss(&ProbMap::new(5, 2, 2, sharp).unwrap(), &target).unwrap().abs() < 1e-12);
        let raw = rand_vec(20, 8, 0.0, 1.0);
        let mut p = vec![0f32; 20];
        for i in 0..4 {
            let z: f64 = (0..5).map(|c| raw[c * 4 + i]).sum();
            for c in 0..5 {
                p[c * 4 + i] = (raw[c * 4 + i] / z) as f32;
            }
        }
        let pm = ProbMap::new(5, 2, 2, p.clone()).unwrap();
        let oracle: f64 = target
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &c)| -(p[c as usize * 4 + i] as f64).max(PROB_FLOOR).ln())
            .sum::<f64>()
            / 4.0;
        assert!(close(semseg_loss(&pm, &target).unwrap(), oracle));
        let small = ProbMap::uniform(3, 2, 2).unwrap();
        assert!(matches!(semseg_loss(&small, &target), Err(Error::ClassOutOfRange { .. })));
    }

    /// Central finite differences on `samples` random scalar parameters.
    fn grad_check(p: &Params, loss: impl Fn(&Params) -> Result<Tensor>, seed: u64) {
        let value = loss(p).unwrap();
        let grads = value.backward().unwrap();
        let names: Vec<String> = p.names().map(String::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-3;
        for _ in 0..24 {
            let name = &names[rng.random_range(0..names.len())];
            let var = p.var(name).unwrap();
            let shape = var.dims().to_vec();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let idx = rng.random_range(0..base.len());
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
                .unwrap_or(0.0);
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                p.set(name, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                s(loss(p).unwrap())
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            p.set(name, &Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            let err = (analytic - numeric).abs();
            assert!(
                err <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-9,
                "{name}[{idx}]: analytic {analytic} numeric {numeric}"
            );
        }
    }

    fn tiny_gen(seed: u64) -> Params {
        let mut init = Initializer::with_std(seed, DType::F64, 0.3);
        let mut p = Params::new(DType::F64);
        init.conv(&mut p, "g", 3, 3, 3).unwrap();
        init.conv(&mut p, "d", 1, 3, 3).unwrap();
        p
    }

    fn gen(p: &Params, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(p, "g", x, 1, 1)?.tanh()?)
    }

    fn input(seed: u64) -> Tensor {
        t(rand_vec(2 * 3 * 8 * 8, seed, -1.0, 1.0), (2, 3, 8, 8))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = input(20);
        let y = input(21);
        let p = tiny_gen(5);
        grad_check(&p, |p| lsgan_d(&conv2d(p, "d", &y, 2, 1)?, &conv2d(p, "d", &gen(p, &x)?, 2, 1)?), 1);
        grad_check(&p, |p| lsgan_g(&conv2d(p, "d", &gen(p, &x)?, 2, 1)?), 2);
        // keep every residual well away from the kink of |.|
        let signs = t(rand_vec(2 * 3 * 64, 22, -1.0, 1.0).iter().map(|v| 0.3 * v.signum()).collect(), (2, 3, 8, 8));
        let target = (gen(&p, &x).unwrap().detach() + signs).unwrap();
        grad_check(&p, |p| l1(&gen(p, &x)?, &target), 3);
        grad_check(&p, |p| canny_loss_tensor(&x, &gen(p, &x)?), 4);
        let mut sp = Params::new(DType::F64);
        Initializer::with_std(2, DType::F64, 0.3).conv(&mut sp, "s", 5, 3, 3).unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i * 7 % 5) as u8).collect();
        let target = one_hot(&[&labels, &labels], 5, 8, 8, DType::F64).unwrap();
        grad_check(&sp, |sp| semseg_loss_tensor(&softmax_channels(&conv2d(sp, "s", &x, 1, 1)?)?, &target), 5);
    }

    #[test]
    fn discriminator_and_generator_steps_are_isolated() {
        let x = input(30);
        let y = input(31);
        let mut init = Initializer::with_std(1, DType::F64, 0.3);
        let mut g = Params::new(DType::F64);
        init.conv(&mut g, "g", 3, 3, 3).unwrap();
        let cfgs = crate::models::DiscCfg::trio(8, 4);
        let ds: Vec<Params> = cfgs.iter().map(|c| c.init(&mut init).unwrap()).collect();
        let fake = gen(&g, &x).unwrap();

        let discs = [(&cfgs[0], &ds[0]), (&cfgs[1], &ds[1]), (&cfgs[2], &ds[2])];
        let mut acc = LossAccumulator::new();
        discriminator_loss(&discs, &y, &fake, &LossWeights::default(), "d_y", &mut acc).unwrap();
        let grads = acc.finish().0.unwrap().backward().unwrap();
        assert!(g.iter().all(|(_, v)| grads.get(v.as_tensor()).is_none()));
        assert!(ds.iter().all(|d| d.iter().all(|(_, v)| grads.get(v.as_tensor()).is_some())));

        let frozen: Vec<Params> = ds.iter().map(Params::frozen).collect();
        let loss = lsgan_g(&cfgs[2].forward(&frozen[2], &fake).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        assert!(g.iter().all(|(_, v)| grads.get(v.as_tensor()).is_some()));
        assert!(ds.iter().all(|d| d.iter().all(|(_, v)| grads.get(v.as_tensor()).is_none())));
    }

    #[test]
    fn generator_total_matches_itemised_recomputation() {
        let mut init = Initializer::with_std(3, DType::F64, 0.3);
        let cfgs = crate::models::DiscCfg::trio(8, 4);
        let ds: Vec<Params> = cfgs.iter().map(|c| c.init(&mut init).unwrap()).collect();
        let discs = [(&cfgs[0], &ds[0]), (&cfgs[1], &ds[1]), (&cfgs[2], &ds[2])];
        let ims: Vec<Tensor> = (40..45).map(input).collect();
        let probs = softmax_channels(&t(rand_vec(2 * 5 * 64, 9, -2.0, 2.0), (2, 5, 8, 8))).unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
        let target = one_hot(&[&labels, &labels], 5, 8, 8, DType::F64).unwrap();
        let dir = DirectionTerms {
            name: "xy",
            source: &ims[0],
            translated: &ims[1],
            reconstructed: &ims[2],
            target_real: &ims[3],
            identity: &ims[4],
            discs,
            semseg: Some((&probs, &target)),
        };
        let w = LossWeights {
            lambda_h: 1.0,
            lambda_m: 0.5,
            lambda_l: 0.25,
            lambda_cyc: 10.0,
            lambda_idn: 5.0,
            lambda_canny: 2.0,
            lambda_semseg: 3.0,
        };
        let mut acc = LossAccumulator::new();
        total_generator_loss(&[dir], &w, &mut acc).unwrap();
        let (total, report) = acc.finish();
        let total = s(total.unwrap());
        assert!(close(total, report.total));

        let to_imgs = |x: &Tensor| crate::models::tensor_to_images(x).unwrap();
        let (src, tr, rec, real, idn) = (to_imgs(&ims[0]), to_imgs(&ims[1]), to_imgs(&ims[2]), to_imgs(&ims[3]), to_imgs(&ims[4]));
        let mut expected = 0.0;
        for (cfg, p) in &discs {
            let scores = cfg.forward(p, &ims[1]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let g = 0.5 * scores.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / scores.len() as f64;
            assert!(close(report.value(&format!("adv_xy.{}", cfg.scale)).unwrap(), g));
            expected += w.adversarial(cfg.scale) * g;
        }
        let mean = |f: &dyn Fn(usize) -> f64| (0..2).map(f).sum::<f64>() / 2.0;
        let cyc = mean(&|i| cycle_loss(&src[i], &rec[i]).unwrap());
        let idt = mean(&|i| identity_loss(&real[i], &idn[i]).unwrap());
        let edge = mean(&|i| canny_loss(&src[i], &tr[i]).unwrap());
        let pm = ProbMap::from_tensor(&probs).unwrap();
        let seg = SegMap::new(8, 8, labels.clone(), names()).unwrap();
        let ce = mean(&|i| semseg_loss(&pm[i], &seg).unwrap());
        for (name, v) in [("cycle_xy", cyc), ("idn_xy", idt), ("canny_xy", edge), ("semseg_xy", ce)] {
            assert!((report.value(name).unwrap() - v).abs() <= 1e-6 * v.abs().max(1e-9), "{name}");
        }
        expected += 10.0 * cyc + 5.0 * idt + 2.0 * edge + 3.0 * ce;
        assert!((total - expected).abs() <= 1e-6 * expected);

        let adv_only = LossWeights {
            lambda_cyc: 0.0,
            lambda_idn: 0.0,
            lambda_canny: 0.0,
            lambda_semseg: 0.0,
            ..w
        };
        let dir = DirectionTerms {
            name: "xy",
            source: &ims[0],
            translated: &ims[1],
            reconstructed: &ims[2],
            target_real: &ims[3],
            identity: &ims[4],
            discs,
            semseg: Some((&probs, &target)),
        };
        let mut acc = LossAccumulator::new();
        total_generator_loss(&[dir], &adv_only, &mut acc).unwrap();
        let (_, r) = acc.finish();
        let adv: f64 = r.terms.iter().filter(|t| t.name.starts_with("adv_")).map(|t| t.weight * t.value).sum();
        assert_eq!(r.total, adv);
        assert!(r.terms.iter().all(|t| t.value >= 0.0));
    }
}
