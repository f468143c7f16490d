//! Translation quality against the synthetic oracle, the stream-swap and
//! ablation experiments, and image grids.

mod experiments;
mod grid;
mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use experiments::{
    ablation_run, stream_swap_experiment, AblationReport, AblationRow, AblationVariant, ReferenceSegmenter,
    ReferenceTraining, SwapReport,
};
pub use grid::{hconcat, render_grid};
pub use metrics::{
    edge_counts, edge_preservation, mean_of, per_class_mae, seg_accuracy, ClassErrors, Confusion, EdgeCounts,
    EdgeThresholds, SegScores,
};

use crate::data::{day_to_night_oracle, downsample, load_manifest, Domain, Image, Sample, SceneSpec, SegMap};
use crate::maskops::MaskSet;
use crate::models::ProbMap;
use crate::training::checkpoint::sha256_hex;
use crate::training::TrainState;
use crate::{Error, Result};

/// Domain-A samples with their oracle translations, held at the 8-bit
/// precision of stored images.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub oracle: Vec<Image>,
}

impl EvalSet {
    pub fn from_samples(samples: Vec<Sample>, spec: &SceneSpec) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::DatasetUnderflow("evaluation needs at least one sample".into()))?;
        let class_names = first.segmap()?.class_names().to_vec();
        let oracle = samples
            .iter()
            .map(|s| Ok(day_to_night_oracle(s, spec)?.quantized()))
            .collect::<Result<_>>()?;
        Ok(Self {
            class_names,
            samples,
            oracle,
        })
    }

    /// Domain-A samples of a manifest, skipping the first `skip`, at most
    /// `limit` (0 = all).
    pub fn from_manifest(path: &Path, skip: usize, limit: usize) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let mut samples: Vec<Sample> = manifest.load_domain(Domain::A)?.into_iter().skip(skip).collect();
        if limit > 0 {
            samples.truncate(limit);
        }
        Self::from_samples(samples, &manifest.scene)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Hashes identifying the evaluated state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_sha256: String,
    pub config_sha256: String,
    pub step: u64,
    pub phase: u8,
}

impl Provenance {
    /// The checkpoint hash equals the hash of the file `state.save` writes.
    pub fn of(state: &TrainState) -> Result<Self> {
        Ok(Self {
            checkpoint_sha256: sha256_hex(&state.to_bytes()?),
            config_sha256: sha256_hex(state.config.to_toml()?.as_bytes()),
            step: state.step,
            phase: state.phase(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub samples: usize,
    /// "low" for phase-1 translations, "full" for the upscaled pipeline.
    pub resolution: String,
    pub per_class_mae: BTreeMap<String, f64>,
    pub mean_class_mae: f64,
    /// Scores of `segmenter` on the translated images.
    pub segmentation: SegScores,
    pub segmenter: String,
    pub edge_f1: f64,
    pub meta: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn check_finite(&self) -> Result<()> {
        let values = self
            .per_class_mae
            .values()
            .chain(self.segmentation.iou.values())
            .chain([
                &self.mean_class_mae,
                &self.segmentation.pixel_accuracy,
                &self.segmentation.mean_iou,
                &self.edge_f1,
            ]);
        for v in values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: "eval report".into(),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions<'a> {
    pub thresholds: EdgeThresholds,
    /// Segmenter scored on the translations; the state's own when absent.
    pub reference: Option<&'a ReferenceSegmenter>,
}

/// Translations of an evaluation set by one state.
#[derive(Clone, Debug)]
pub struct Translations {
    pub factor: usize,
    pub full: bool,
    pub low_inputs: Vec<Image>,
    pub low_segmaps: Vec<SegMap>,
    /// Phase-1 output at low resolution, the guidance of phase 2.
    pub guidance: Vec<Image>,
    /// Final output: the guidance itself for phase-1 states.
    pub outputs: Vec<Image>,
}

/// Runs the state's pipeline on every sample. `remap` may alter the stream
/// masks fed to the low-resolution generator.
pub fn translate_set(
    state: &TrainState,
    set: &EvalSet,
    remap: &dyn Fn(MaskSet) -> Result<MaskSet>,
) -> Result<Translations> {
    let f = state.config.low_res_factor;
    let low_inputs: Vec<Image> = set.samples.iter().map(|s| downsample(&s.image, f)).collect::<Result<_>>()?;
    let low_segmaps: Vec<SegMap> = set
        .samples
        .iter()
        .map(|s| s.segmap()?.downsample(f))
        .collect::<Result<_>>()?;
    let masks: Vec<MaskSet> = low_segmaps
        .iter()
        .map(|s| remap(state.masks_for(s)?))
        .collect::<Result<_>>()?;
    let guidance = state.translate_low(&low_inputs.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>())?;
    let full = state.phase() == 2;
    let outputs = if full {
        let inputs: Vec<&Image> = set.samples.iter().map(|s| &s.image).collect();
        state.upscale(&inputs, &guidance.iter().collect::<Vec<_>>())?
    } else {
        guidance.clone()
    };
    Ok(Translations {
        factor: f,
        full,
        low_inputs,
        low_segmaps,
        guidance,
        outputs,
    })
}

/// Scores translations against the oracle.
pub fn score(
    state: &TrainState,
    set: &EvalSet,
    tr: &Translations,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut errors = ClassErrors::new(set.class_names.len());
    let mut edges = EdgeCounts::default();
    let low_outputs: Vec<Image> = if tr.full {
        tr.outputs.iter().map(|o| downsample(o, tr.factor)).collect::<Result<_>>()?
    } else {
        tr.outputs.clone()
    };
    for (i, out) in tr.outputs.iter().enumerate() {
        let (input, oracle, segmap) = if tr.full {
            (
                set.samples[i].image.clone(),
                set.oracle[i].clone(),
                set.samples[i].segmap()?.clone(),
            )
        } else {
            (
                tr.low_inputs[i].clone(),
                downsample(&set.oracle[i], tr.factor)?,
                tr.low_segmaps[i].clone(),
            )
        };
        errors.add(out, &oracle, &segmap)?;
        edges.merge(&edge_counts(&input, out, opts.thresholds)?);
    }
    let refs: Vec<&Image> = low_outputs.iter().collect();
    let (probs, segmenter): (Vec<ProbMap>, &str) = match opts.reference {
        Some(r) => (r.predict(&refs)?, "reference"),
        None => (state.segment_low(&refs)?, "joint"),
    };
    let mut confusion = Confusion::new(set.class_names.len());
    for (p, gt) in probs.iter().zip(&tr.low_segmaps) {
        confusion.add(&p.argmax(), gt.labels())?;
    }
    let per_class_mae = errors.finish(&set.class_names);
    let report = EvalReport {
        provenance: Provenance::of(state)?,
        samples: set.len(),
        resolution: if tr.full { "full" } else { "low" }.into(),
        mean_class_mae: mean_of(&per_class_mae),
        per_class_mae,
        segmentation: confusion.scores(&set.class_names),
        segmenter: segmenter.into(),
        edge_f1: edges.f1(),
        meta: BTreeMap::new(),
    };
    report.check_finite()?;
    Ok(report)
}

/// Translates and scores an evaluation set with the correct stream masks.
pub fn evaluate(state: &TrainState, set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport> {
    let tr = translate_set(state, set, &Ok)?;
    score(state, set, &tr, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::tests::{synth_samples, tiny_cfg};
    use crate::training::{train, RunOptions, TrainData};

    pub(crate) fn tiny_state(factor: usize, size: usize, steps: u64) -> (TrainState, EvalSet) {
        let mut cfg = tiny_cfg(factor);
        cfg.steps = steps;
        let (a, b) = synth_samples(4, size, 3);
        let data = TrainData::from_samples(a, b, &cfg).unwrap();
        let (state, _) = train(
            &cfg,
            &data,
            &RunOptions {
                dry: true,
                ..Default::default()
            },
        )
        .unwrap();
        let (held_out, _) = synth_samples(3, size, 500);
        let set = EvalSet::from_samples(held_out, &SceneSpec::desk(size, size)).unwrap();
        (state, set)
    }

    #[test]
    fn report_embeds_hashes_and_is_finite() {
        let (state, set) = tiny_state(2, 16, 2);
        let r = evaluate(&state, &set, &EvalOptions::default()).unwrap();
        assert_eq!(r.samples, 3);
        assert_eq!(r.resolution, "low");
        assert_eq!(r.provenance.checkpoint_sha256.len(), 64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();
        assert_eq!(
            r.provenance.checkpoint_sha256,
            crate::training::checkpoint::file_sha256(&path).unwrap()
        );
        assert!(r.per_class_mae.keys().all(|k| set.class_names.contains(k)));
        // deterministic
        assert_eq!(r, evaluate(&state, &set, &EvalOptions::default()).unwrap());
    }

    #[test]
    fn oracle_outputs_score_zero_error() {
        let (state, set) = tiny_state(2, 16, 1);
        let mut tr = translate_set(&state, &set, &Ok).unwrap();
        tr.outputs = set.oracle.iter().map(|o| downsample(o, 2).unwrap()).collect();
        let r = score(&state, &set, &tr, &EvalOptions::default()).unwrap();
        assert!(r.per_class_mae.values().all(|&v| v == 0.0));
        assert_eq!(r.mean_class_mae, 0.0);
    }
}
