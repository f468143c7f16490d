//! Stream-swap and ablation experiments, and the held-out reference segmenter.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, score, translate_set, EvalOptions, EvalReport, EvalSet};
use crate::data::{Image, SegMap};
use crate::losses::{one_hot, semseg_loss_tensor};
use crate::maskops::swap_streams;
use crate::models::{images_to_tensor, GeneratorCfg, Initializer, Params, ProbMap, SegmenterCfg};
use crate::training::{train, Adam, OptimCfg, RunOptions, TrainConfig, TrainData, TrainState};
use crate::{Error, Result};

/// Correct-mask and swapped-mask evaluations of one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub swap: [usize; 2],
    pub correct: EvalReport,
    pub swapped: EvalReport,
    /// Swapped over correct per-class error.
    pub ratio: BTreeMap<String, f64>,
}

/// Evaluates with the correct stream masks and with streams `i` and `j`
/// exchanged.
pub fn stream_swap_experiment(
    state: &TrainState,
    set: &EvalSet,
    swap: (usize, usize),
    opts: &EvalOptions,
) -> Result<SwapReport> {
    let (i, j) = swap;
    let correct = evaluate(state, set, opts)?;
    let tr = translate_set(state, set, &|m| swap_streams(&m, i, j))?;
    let mut swapped = score(state, set, &tr, opts)?;
    swapped.meta.insert("swap".into(), format!("{i},{j}"));
    let ratio = correct
        .per_class_mae
        .iter()
        .map(|(k, &c)| (k.clone(), swapped.per_class_mae[k] / c.max(1e-12)))
        .collect();
    Ok(SwapReport {
        swap: [i, j],
        correct,
        swapped,
        ratio,
    })
}

/// Config diffs compared against the full framework.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Single-stream generator, all losses.
    SingleStream,
    /// Multi-stream generator without the edge and segmentation terms and
    /// without the global and medium discriminators.
    NoExtraLosses,
    /// Stream masks as extra input channels of a wider single-stream generator.
    SemsegChannels,
    /// Wider single-stream generator with an auxiliary class head.
    SemsegHead,
    NoSemseg,
}

/// Minimum parameter ratio of the wide single-stream variants over the
/// multi-stream generator.
pub const WIDE_VARIANT_RATIO: f64 = 1.4;

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::SingleStream,
        AblationVariant::NoExtraLosses,
        AblationVariant::SemsegChannels,
        AblationVariant::SemsegHead,
        AblationVariant::NoSemseg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::SingleStream => "single_stream",
            AblationVariant::NoExtraLosses => "no_extra_losses",
            AblationVariant::SemsegChannels => "semseg_channels",
            AblationVariant::SemsegHead => "semseg_head",
            AblationVariant::NoSemseg => "no_semseg",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{name}`, expected one of {}", names.join(", ")))
            })
    }

    /// The variant's training config derived from a multi-stream base.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let GeneratorCfg::MultiStream {
            streams,
            width,
            trunk_blocks,
            ..
        } = base.model.generator
        else {
            return Err(Error::Config("ablations start from a multi-stream generator".into()));
        };
        let base_params = base.model.generator.num_params()? as f64;
        let widen = |make: &dyn Fn(usize) -> GeneratorCfg| -> Result<GeneratorCfg> {
            let mut w = width;
            loop {
                let g = make(w);
                if g.num_params()? as f64 >= WIDE_VARIANT_RATIO * base_params {
                    return Ok(g);
                }
                w += 1;
            }
        };
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::SingleStream => {
                cfg.model.generator = GeneratorCfg::SingleStream { width, trunk_blocks };
            }
            AblationVariant::NoExtraLosses => {
                cfg.loss.lambda_h = 0.0;
                cfg.loss.lambda_m = 0.0;
                cfg.loss.lambda_canny = 0.0;
                cfg.loss.lambda_semseg = 0.0;
            }
            AblationVariant::SemsegChannels => {
                cfg.model.generator = widen(&|w| GeneratorCfg::SemsegChannels {
                    streams,
                    width: w,
                    trunk_blocks,
                })?;
            }
            AblationVariant::SemsegHead => {
                let classes = base.model.segmenter.classes;
                cfg.model.generator = widen(&|w| GeneratorCfg::SemsegHead {
                    classes,
                    width: w,
                    trunk_blocks,
                })?;
            }
            AblationVariant::NoSemseg => cfg.loss.lambda_semseg = 0.0,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub generator_params: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }
}

/// Trains the base config and every variant under the same seed and budget,
/// then evaluates each. Checkpoints go to `out_dir/<variant>` when given.
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[AblationVariant],
    data: &TrainData,
    set: &EvalSet,
    out_dir: Option<PathBuf>,
    opts: &EvalOptions,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len() + 1);
    for v in std::iter::once(AblationVariant::Full).chain(variants.iter().copied()) {
        let cfg = v.apply(base)?;
        let run = RunOptions {
            out_dir: out_dir.as_ref().map(|d| d.join(v.name())).unwrap_or_default(),
            dry: out_dir.is_none(),
            deterministic: true,
            ..Default::default()
        };
        let (state, _) = train(&cfg, data, &run)?;
        let mut report = evaluate(&state, set, opts)?;
        report.meta.insert("variant".into(), v.name().into());
        rows.push(AblationRow {
            variant: v.name().into(),
            seed: cfg.seed,
            generator_params: cfg.model.generator.num_params()?,
            report,
        });
    }
    Ok(AblationReport { rows })
}

/// Segmenter trained on oracle target-domain images only, used to score
/// translations without the jointly trained segmenter's bias.
#[derive(Clone, Debug)]
pub struct ReferenceSegmenter {
    pub cfg: SegmenterCfg,
    pub params: Params,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceTraining {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReferenceTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl ReferenceSegmenter {
    pub fn train(cfg: SegmenterCfg, images: &[Image], segmaps: &[SegMap], t: ReferenceTraining) -> Result<Self> {
        if images.is_empty() || images.len() != segmaps.len() {
            return Err(Error::DatasetUnderflow("reference segmenter needs labelled images".into()));
        }
        cfg.validate()?;
        let params = cfg.init(&mut Initializer::new(t.seed, DType::F32))?;
        let mut opt = Adam::new(OptimCfg {
            lr: t.lr,
            beta1: 0.9,
            ..OptimCfg::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let (h, w) = images[0].dims();
        for _ in 0..t.steps {
            let idx: Vec<usize> = (0..t.batch_size).map(|_| rng.random_range(0..images.len())).collect();
            let x = images_to_tensor(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>(), DType::F32)?;
            let labels: Vec<&[u8]> = idx.iter().map(|&i| segmaps[i].labels()).collect();
            let target = one_hot(&labels, cfg.classes, h, w, DType::F32)?;
            let loss = semseg_loss_tensor(&cfg.forward(&params, &x)?, &target)?;
            opt.step(&[("ref", &params)], &loss.backward()?, t.lr)?;
        }
        Ok(Self { cfg, params })
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<ProbMap>> {
        let p = self.params.frozen();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(ProbMap::from_tensor(&self.cfg.forward(&p, &images_to_tensor(chunk, DType::F32)?)?)?);
        }
        Ok(out)
    }
}
