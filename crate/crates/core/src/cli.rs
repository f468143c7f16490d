//! The `msui2i` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error (nothing written),
//! 3 runtime fault. Every command validates its inputs before touching the
//! output location.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    downsample, load_image, load_manifest, load_sample, load_segmap, save_image, synth_dataset, Domain,
    Image, SceneSpec, SegMap, MANIFEST_FILE,
};
use crate::eval::{
    ablation_run, hconcat, render_grid, score, stream_swap_experiment, translate_set, write_json,
    AblationVariant, EvalOptions, EvalSet, Translations,
};
use crate::maskops::MaskSet;
use crate::training::{train, Arch, RunOptions, TrainConfig, TrainData, TrainState, FINAL_CHECKPOINT};
use crate::{deterministic_mode, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const EVAL_REPORT: &str = "eval.json";
pub const EVAL_GRID: &str = "grid.png";
pub const SWAP_REPORT: &str = "swap.json";
pub const ABLATION_REPORT: &str = "ablation.json";
/// Samples shown in the evaluation grid.
const GRID_ROWS: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "msui2i", version, about = "Multi-stream unpaired image-to-image translation")]
pub struct Cli {
    /// Increase progress output on stderr (-v, -vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic day (A) / night (B) dataset with a manifest.
    SynthData(SynthArgs),
    /// Run phase 1 (low-resolution translation) or phase 2 (upscaling).
    Train(TrainArgs),
    /// Translate source-domain images with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint against the oracle on held-out samples.
    Eval(EvalArgs),
    /// Compare correct-mask and stream-swapped evaluations.
    StreamSwap(SwapArgs),
    /// Train and evaluate the full model and config-diff variants.
    Ablate(AblateArgs),
    /// Write the default training config.
    GenConfig(GenConfigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Samples per domain.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Square image side.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Also write segmaps for the domain-B images.
    #[arg(long)]
    pub b_segmaps: bool,
}

/// Config file plus `key=value` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config; the built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set loss.lambda_cyc=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: Option<u8>,
    /// Phase-1 checkpoint whose networks phase 2 freezes.
    #[arg(long)]
    pub phase1_ckpt: Option<PathBuf>,
    /// Continue from a checkpoint of this run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Dataset manifest (sets `data.manifest`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Translate the domain-A samples of this manifest.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub data: Option<PathBuf>,
    /// Input images; the segmap of `x.png` is read from `x.seg.png`.
    #[arg(long, num_args = 1..)]
    pub image: Vec<PathBuf>,
    /// Use at most this many manifest samples (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the low-resolution guidance images.
    #[arg(long)]
    pub emit_guidance: bool,
}

/// Held-out domain-A samples of a manifest.
#[derive(Debug, Args)]
pub struct EvalDataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Skip the first samples of the manifest.
    #[arg(long, default_value_t = 0)]
    pub skip: usize,
    /// Use at most this many samples (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: EvalDataArgs,
    /// Score existing outputs `<dir>/<id>.png` instead of translating.
    #[arg(long)]
    pub translations: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an input | output | oracle grid.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: EvalDataArgs,
    /// Stream pair to exchange, e.g. `0,1`.
    #[arg(long, value_parser = parse_pair)]
    pub swap: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated variants, compared against `full`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variants: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation manifest; the training manifest when absent.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub eval_skip: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenConfigArgs {
    /// Destination file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `i,j`")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// A failed command: usage failures happen before anything is written.
#[derive(Debug)]
enum Failure {
    Usage(Error),
    Runtime(Error),
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Classifies an error raised while validating inputs. Bad paths and
/// malformed input files count as usage errors.
fn prep(e: Error) -> Failure {
    let usage = e.is_usage()
        || matches!(e, Error::Format { .. } | Error::DatasetUnderflow(_))
        || matches!(&e, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
    if usage {
        Failure::Usage(e)
    } else {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(Error::InvalidInput(msg.into()))
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a, cli.verbose),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::StreamSwap(a) => cmd_stream_swap(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GenConfig(a) => cmd_gen_config(a),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))
}

fn cmd_synth_data(a: &SynthArgs) -> CmdResult {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.seed > i64::MAX as u64 {
        return Err(usage("--seed must be below 2^63"));
    }
    let spec = SceneSpec::desk(a.size, a.size);
    spec.validate().map_err(prep)?;
    synth_dataset(a.n, &spec, a.seed, &a.out, a.b_segmaps).map_err(runtime)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Loads the config and applies `--set` overrides, then the dedicated flags.
fn resolve_config(c: &ConfigArgs, extra: &[String]) -> CmdResult<TrainConfig> {
    let base = match &c.config {
        Some(p) => TrainConfig::load(p).map_err(prep)?,
        None => TrainConfig::default(),
    };
    let all: Vec<String> = c.overrides.iter().cloned().chain(extra.iter().cloned()).collect();
    base.with_overrides(&all).map_err(prep)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn cmd_train(a: &TrainArgs, verbose: u8) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(p) = a.phase {
        extra.push(format!("phase={p}"));
    }
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(s) = a.steps {
        extra.push(format!("steps={s}"));
    }
    if let Some(d) = &a.data {
        extra.push(format!("data.manifest={}", toml_string(&d.to_string_lossy())));
    }
    let cfg = resolve_config(&a.config, &extra)?;
    if cfg.phase == 2 && a.phase1_ckpt.is_none() && a.resume.is_none() {
        return Err(Failure::Usage(Error::Config("phase 2 requires --phase1-ckpt".into())));
    }
    let data = TrainData::load(&cfg).map_err(prep)?;
    // Build the architecture up front so shape errors surface before any write.
    if let Some(path) = &a.resume {
        let s = TrainState::load(path).map_err(prep)?;
        if s.arch.full != data.full_dims() {
            return Err(usage(format!(
                "checkpoint expects {:?} images, data has {:?}",
                s.arch.full,
                data.full_dims()
            )));
        }
    } else if cfg.phase == 2 {
        let p1 = TrainState::load(a.phase1_ckpt.as_deref().expect("checked above")).map_err(prep)?;
        if p1.phase() != 1 {
            return Err(usage("--phase1-ckpt is not a phase-1 checkpoint"));
        }
        if p1.arch.full != data.full_dims() {
            return Err(usage(format!(
                "phase-1 checkpoint expects {:?} images, data has {:?}",
                p1.arch.full,
                data.full_dims()
            )));
        }
        TrainState::new_phase2(&cfg, &p1).map_err(prep)?;
    } else {
        Arch::new(&cfg, data.full_dims(), &data.class_names).map_err(prep)?;
    }
    let log_every = match verbose {
        0 => 0,
        1 => (cfg.steps / 10).max(1),
        _ => 1,
    };
    let opts = RunOptions {
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
        phase1_ckpt: a.phase1_ckpt.clone(),
        deterministic: deterministic_mode(),
        dry: false,
        log_every,
    };
    train(&cfg, &data, &opts).map_err(runtime)?;
    println!("{}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

/// One image to translate.
struct Input {
    id: String,
    image: Image,
    segmap: Option<SegMap>,
}

fn translate_inputs(a: &TranslateArgs, state: &TrainState) -> CmdResult<Vec<Input>> {
    let mut inputs = Vec::new();
    if let Some(path) = &a.data {
        let manifest = load_manifest(path).map_err(prep)?;
        let mut ids = manifest.ids(Domain::A);
        if a.limit > 0 {
            ids.truncate(a.limit);
        }
        for id in ids {
            let s = load_sample(&manifest, id).map_err(prep)?;
            inputs.push(Input {
                id: id.to_string(),
                image: s.image,
                segmap: s.segmap,
            });
        }
    } else {
        let mut seen = HashSet::new();
        for p in &a.image {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| usage(format!("{}: not a file name", p.display())))?;
            if !seen.insert(stem.clone()) {
                return Err(usage(format!("two inputs share the name `{stem}`")));
            }
            let image = load_image(p).map_err(prep)?;
            let seg_path = p.with_file_name(format!("{stem}.seg.png"));
            let segmap = seg_path
                .is_file()
                .then(|| load_segmap(&seg_path, &state.class_names))
                .transpose()
                .map_err(prep)?;
            inputs.push(Input { id: stem, image, segmap });
        }
    }
    if inputs.is_empty() {
        return Err(usage("no inputs to translate"));
    }
    let needs_masks = state.arch.generator.needs_masks();
    for inp in &inputs {
        if inp.image.dims() != state.arch.full {
            return Err(usage(format!(
                "`{}` is {:?}, the checkpoint expects {:?}",
                inp.id,
                inp.image.dims(),
                state.arch.full
            )));
        }
        match &inp.segmap {
            None if needs_masks => {
                return Err(usage(format!(
                    "`{}` has no segmap; the multi-stream generator needs stream masks",
                    inp.id
                )))
            }
            Some(s) if s.dims() != inp.image.dims() => {
                return Err(Failure::Usage(Error::DimensionMismatch {
                    image: inp.image.dims(),
                    segmap: s.dims(),
                }))
            }
            Some(s) if s.class_names() != state.class_names.as_slice() => {
                return Err(usage(format!("`{}`: segmap classes differ from the checkpoint's", inp.id)))
            }
            _ => {}
        }
    }
    Ok(inputs)
}

fn cmd_translate(a: &TranslateArgs) -> CmdResult {
    let state = TrainState::load(&a.ckpt).map_err(prep)?;
    let inputs = translate_inputs(a, &state)?;
    let f = state.config.low_res_factor;
    let (lh, lw) = state.arch.low;
    let fallback = state.config.streams.fallback_stream();
    let mut low = Vec::with_capacity(inputs.len());
    let mut masks = Vec::with_capacity(inputs.len());
    for inp in &inputs {
        low.push(downsample(&inp.image, f).map_err(runtime)?);
        masks.push(match &inp.segmap {
            Some(s) => state.masks_for(&s.downsample(f).map_err(runtime)?),
            None => MaskSet::all_in_stream(lh, lw, state.arch.streams, fallback),
        }
        .map_err(runtime)?);
    }
    let guidance = state
        .translate_low(&low.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>())
        .map_err(runtime)?;
    let outputs = if state.phase() == 2 {
        let full: Vec<&Image> = inputs.iter().map(|i| &i.image).collect();
        state.upscale(&full, &guidance.iter().collect::<Vec<_>>()).map_err(runtime)?
    } else {
        guidance.clone()
    };
    create_dir(&a.out)?;
    for ((inp, out), g) in inputs.iter().zip(&outputs).zip(&guidance) {
        save_image(out, &a.out.join(format!("{}.png", inp.id))).map_err(runtime)?;
        if a.emit_guidance {
            save_image(g, &a.out.join(format!("{}.guidance.png", inp.id))).map_err(runtime)?;
        }
    }
    println!("{} outputs in {}", outputs.len(), a.out.display());
    Ok(())
}

fn eval_ids(a: &EvalDataArgs) -> CmdResult<Vec<String>> {
    let manifest = load_manifest(&a.data).map_err(prep)?;
    let mut ids: Vec<String> = manifest.ids(Domain::A).into_iter().skip(a.skip).map(String::from).collect();
    if a.limit > 0 {
        ids.truncate(a.limit);
    }
    Ok(ids)
}

fn load_eval(ckpt: &Path, a: &EvalDataArgs) -> CmdResult<(TrainState, EvalSet)> {
    let state = TrainState::load(ckpt).map_err(prep)?;
    let set = EvalSet::from_manifest(&a.data, a.skip, a.limit).map_err(prep)?;
    if set.class_names != state.class_names {
        return Err(usage("evaluation classes differ from the checkpoint's"));
    }
    if let Some(s) = set.samples.iter().find(|s| s.image.dims() != state.arch.full) {
        return Err(usage(format!(
            "evaluation image is {:?}, the checkpoint expects {:?}",
            s.image.dims(),
            state.arch.full
        )));
    }
    Ok((state, set))
}

/// Wraps stored outputs so they can be scored like fresh translations.
fn stored_translations(dir: &Path, ids: &[String], state: &TrainState, set: &EvalSet) -> CmdResult<Translations> {
    let f = state.config.low_res_factor;
    let mut outputs = Vec::with_capacity(ids.len());
    for id in ids {
        outputs.push(load_image(&dir.join(format!("{id}.png"))).map_err(prep)?);
    }
    let full = state.arch.full;
    let is_full = outputs.iter().all(|o| o.dims() == full);
    if !is_full && outputs.iter().any(|o| o.dims() != state.arch.low) {
        return Err(usage(format!(
            "stored translations must all be {:?} or all {:?}",
            full, state.arch.low
        )));
    }
    let low_inputs = set.samples.iter().map(|s| downsample(&s.image, f)).collect::<Result<_, _>>().map_err(runtime)?;
    let low_segmaps = set
        .samples
        .iter()
        .map(|s| s.segmap()?.downsample(f))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let guidance = if is_full {
        outputs.iter().map(|o| downsample(o, f)).collect::<Result<_, _>>().map_err(runtime)?
    } else {
        outputs.clone()
    };
    Ok(Translations {
        factor: f,
        full: is_full,
        low_inputs,
        low_segmaps,
        guidance,
        outputs,
    })
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let (state, set) = load_eval(&a.ckpt, &a.data)?;
    let tr = match &a.translations {
        Some(dir) => {
            let ids = eval_ids(&a.data)?;
            stored_translations(dir, &ids, &state, &set)?
        }
        None => translate_set(&state, &set, &Ok).map_err(runtime)?,
    };
    let report = score(&state, &set, &tr, &EvalOptions::default()).map_err(runtime)?;
    create_dir(&a.out)?;
    report.write(&a.out.join(EVAL_REPORT)).map_err(runtime)?;
    if a.grid {
        let rows = set
            .samples
            .iter()
            .zip(&tr.outputs)
            .zip(&set.oracle)
            .take(GRID_ROWS)
            .map(|((s, o), g)| hconcat(&[&s.image, o, g]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        render_grid(&rows, 1, &a.out.join(EVAL_GRID)).map_err(runtime)?;
    }
    println!(
        "mean per-class MAE {:.4}, edge F1 {:.4}",
        report.mean_class_mae, report.edge_f1
    );
    Ok(())
}

fn cmd_stream_swap(a: &SwapArgs) -> CmdResult {
    let (state, set) = load_eval(&a.ckpt, &a.data)?;
    let (i, j) = a.swap;
    let k = state.arch.streams;
    if i >= k || j >= k {
        return Err(Failure::Usage(Error::IndexOutOfRange { index: i.max(j), len: k }));
    }
    let report = stream_swap_experiment(&state, &set, (i, j), &EvalOptions::default()).map_err(runtime)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(SWAP_REPORT), &report).map_err(runtime)?;
    for (class, r) in &report.ratio {
        println!("{class}: swapped/correct MAE {r:.3}");
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let mut extra = vec![format!("data.manifest={}", toml_string(&a.data.to_string_lossy()))];
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(s) = a.steps {
        extra.push(format!("steps={s}"));
    }
    let cfg = resolve_config(&a.config, &extra)?;
    if cfg.phase != 1 {
        return Err(usage("ablations run phase 1 only"));
    }
    let variants = a
        .variants
        .iter()
        .map(|v| AblationVariant::from_name(v.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(prep)?;
    let data = TrainData::load(&cfg).map_err(prep)?;
    for v in std::iter::once(AblationVariant::Full).chain(variants.iter().copied()) {
        let vc = v.apply(&cfg).map_err(prep)?;
        Arch::new(&vc, data.full_dims(), &data.class_names).map_err(prep)?;
    }
    let eval_data = EvalDataArgs {
        data: a.eval_data.clone().unwrap_or_else(|| a.data.clone()),
        skip: a.eval_skip,
        limit: a.eval_limit,
    };
    let set = EvalSet::from_manifest(&eval_data.data, eval_data.skip, eval_data.limit).map_err(prep)?;
    if set.class_names != data.class_names {
        return Err(usage("evaluation classes differ from the training data's"));
    }
    create_dir(&a.out)?;
    let report = ablation_run(&cfg, &variants, &data, &set, Some(a.out.clone()), &EvalOptions::default())
        .map_err(runtime)?;
    write_json(&a.out.join(ABLATION_REPORT), &report).map_err(runtime)?;
    for row in &report.rows {
        println!(
            "{}: mean per-class MAE {:.4}, edge F1 {:.4}, seg acc {:.4}",
            row.variant, row.report.mean_class_mae, row.report.edge_f1, row.report.segmentation.pixel_accuracy
        );
    }
    Ok(())
}

fn cmd_gen_config(a: &GenConfigArgs) -> CmdResult {
    let text = TrainConfig::default().to_toml().map_err(runtime)?;
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| runtime(Error::io(p, e))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parser() {
        assert_eq!(parse_pair("0,1"), Ok((0, 1)));
        assert_eq!(parse_pair(" 2 , 0 "), Ok((2, 0)));
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("a,1").is_err());
    }

    #[test]
    fn parse_errors_are_usage() {
        assert_eq!(run(["msui2i", "synth-data", "--n", "2", "--seed", "1"]), EXIT_USAGE);
        assert_eq!(run(["msui2i", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["msui2i", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_override_is_usage_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = run([
            "msui2i",
            "train",
            "--set",
            "loss.no_such_term=1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists());
    }

    #[test]
    fn mistyped_override_is_usage() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = run(["msui2i", "train", "--set", "steps=\"many\"", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists());
    }

    #[test]
    fn prep_classification() {
        assert!(matches!(prep(Error::Config("x".into())), Failure::Usage(_)));
        let missing = Error::io("nope", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert!(matches!(prep(missing), Failure::Usage(_)));
        let denied = Error::io("nope", std::io::Error::from(std::io::ErrorKind::PermissionDenied));
        assert!(matches!(prep(denied), Failure::Runtime(_)));
        assert!(matches!(prep(Error::NonFinite { term: "t".into() }), Failure::Runtime(_)));
    }
}
