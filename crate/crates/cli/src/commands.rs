//! Argument parsing and one function per subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use lesion_core::diffusion::{harmonic_inpaint, InpaintMode};
use lesion_core::field::{exp_velocity, warp, FieldSidecar, Interp, DEFAULT_EXP_STEPS};
use lesion_core::metrics::volume_fraction;
use lesion_core::nifti::{read_nifti, NiftiVolume};
use lesion_core::registration::{register, register_masks, RegMode};
use lesion_core::reversal::{
    label_baseline, label_groundtruth, label_proposed, reverse_pipeline, segment_lesion, Inpainter, Labeling, ReversalResult,
};
use lesion_core::rng::hash3;
use lesion_core::synthesis::{
    brain_mask, build_normative_pool, innermost_mask, make_cohort, make_phantom, make_subject, synthesize_lesion, CaseParams,
    NormativeJacobianPool, SynthCase,
};
use lesion_core::{FieldKind, LabelVolume, Mask, ScalarVolume, VectorField};

use crate::config::RunConfig;
use crate::experiment::{run_experiment, CaseOutcome};
use crate::output::OutDir;
use crate::CliError;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "LESIONREV_THREADS";

fn triple<T: std::str::FromStr + Copy>(s: &str) -> Result<[T; 3], String> {
    let v: Vec<T> = s.split(',').map(|x| x.trim().parse().map_err(|_| format!("{x:?} is not a number"))).collect::<Result<_, _>>()?;
    <[T; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

#[derive(Debug, Parser)]
#[command(name = "lesionrev", version, about = "Lesion growth simulation and reversal")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, replaced atomically.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default from LESIONREV_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Grid size of generated phantoms, e.g. 48,48,40.
    #[arg(long, global = true, value_parser = triple::<usize>)]
    pub dims: Option<[usize; 3]>,
    /// Print a JSON summary to stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Atlas image and labels.
    Phantom,
    /// Atlas plus randomly deformed subjects.
    Cohort {
        #[arg(long)]
        n: Option<usize>,
    },
    /// One synthetic lesion case.
    Synth(SynthArgs),
    /// Normative Jacobian pool from healthy subjects.
    Normative(NormativeArgs),
    /// Registers a moving image onto a fixed one.
    Register(RegisterArgs),
    /// Fills a masked region of an image.
    Inpaint(InpaintArgs),
    /// Jacobian-based lesion segmentation.
    Segment(SegmentArgs),
    /// Full reversal: segmentation, core estimate, healthy estimate.
    Reverse(ReverseArgs),
    /// Transfers atlas labels onto a lesioned image.
    Label(LabelArgs),
    /// The complete synthetic labeling experiment.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Healthy image; a phantom subject is generated when absent.
    #[arg(long, requires = "labels")]
    pub healthy: Option<PathBuf>,
    /// Phantom-style labels of the healthy image.
    #[arg(long, requires = "healthy")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub severity: Option<f64>,
    /// Lesion center in voxels, e.g. 24,24,20.
    #[arg(long, value_parser = triple::<f64>)]
    pub center: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct NormativeArgs {
    /// Atlas image; the phantom is generated when absent.
    #[arg(long, requires = "subject")]
    pub atlas: Option<PathBuf>,
    /// Healthy subject image (repeat, at least 5).
    #[arg(long, requires = "atlas")]
    pub subject: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Intensity,
    /// Inputs are masks, registered through their signed distance maps.
    Sdf,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub lambda_bend: Option<f64>,
    #[arg(long)]
    pub lambda_div: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub fluid_sigma: Option<f64>,
    #[arg(long)]
    pub diffusion_sigma: Option<f64>,
    #[arg(long)]
    pub pyramid_levels: Option<usize>,
    #[arg(long)]
    pub exp_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InpaintMethod {
    Diffusion,
    Harmonic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InpaintModeArg {
    PaperCleanKnown,
    RepaintNoisedKnown,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Replaces the configured inpainter with its defaults for this method.
    #[arg(long, value_enum)]
    pub method: Option<InpaintMethod>,
    #[arg(long, value_enum)]
    pub mode: Option<InpaintModeArg>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Denoiser neighborhood radius.
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub resample_jumps: Option<usize>,
    /// Sampler seed (defaults to the configured one).
    #[arg(long)]
    pub sampler_seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub lesioned: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    /// Pool stem or directory holding pool.bin and pool.json.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub lower_pct: Option<f64>,
    #[arg(long)]
    pub upper_pct: Option<f64>,
    #[arg(long)]
    pub min_component: Option<usize>,
    #[arg(long)]
    pub closing_radius: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReverseArgs {
    #[arg(long)]
    pub lesioned: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMethod {
    /// Register the atlas straight onto the lesioned image.
    Baseline,
    /// Through a `reverse` output directory.
    Proposed,
    /// Through the known growth of a `synth` case directory.
    Groundtruth,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, value_enum)]
    pub method: LabelMethod,
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub atlas_labels: PathBuf,
    /// Lesioned image (baseline).
    #[arg(long, required_if_eq("method", "baseline"))]
    pub lesioned: Option<PathBuf>,
    /// Output directory of `reverse` (proposed).
    #[arg(long, required_if_eq("method", "proposed"))]
    pub reversal: Option<PathBuf>,
    /// Output directory of `synth` (groundtruth).
    #[arg(long, required_if_eq("method", "groundtruth"))]
    pub case: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub pool_subjects: Option<usize>,
    #[arg(long)]
    pub holdout_subjects: Option<usize>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Cohort { .. } => "cohort",
            Command::Synth(_) => "synth",
            Command::Normative(_) => "normative",
            Command::Register(_) => "register",
            Command::Inpaint(_) => "inpaint",
            Command::Segment(_) => "segment",
            Command::Reverse(_) => "reverse",
            Command::Label(_) => "label",
            Command::Eval(_) => "eval",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::Phantom | Command::Cohort { .. } | Command::Eval(_) => {}
            Command::Synth(a) => v.extend(a.healthy.iter().chain(&a.labels).map(PathBuf::as_path)),
            Command::Normative(a) => v.extend(a.atlas.iter().chain(&a.subject).map(PathBuf::as_path)),
            Command::Register(a) => v.extend([a.moving.as_path(), a.fixed.as_path()]),
            Command::Inpaint(a) => v.extend([a.image.as_path(), a.mask.as_path()]),
            Command::Segment(a) => v.extend([a.lesioned.as_path(), a.atlas.as_path(), a.pool.as_path()]),
            Command::Reverse(a) => v.extend([a.lesioned.as_path(), a.atlas.as_path(), a.pool.as_path()]),
            Command::Label(a) => {
                v.extend([a.atlas.as_path(), a.atlas_labels.as_path()]);
                v.extend(a.lesioned.iter().chain(&a.reversal).chain(&a.case).map(PathBuf::as_path));
            }
        }
        v
    }
}

/// What a finished command reports.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: &'static str,
    pub out: PathBuf,
    pub files: Vec<String>,
    pub seconds: f64,
    pub details: serde_json::Value,
}

fn progress(msg: &str) {
    eprintln!("[lesionrev] {msg}");
}

/// Loads the config, applies flag overrides and validates the result.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = g.threads {
        cfg.threads = Some(t);
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            let n = v.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
            cfg.threads = Some(n);
        }
    }
    if cfg.threads == Some(0) {
        return Err(CliError::Config("threads must be >= 1".into()));
    }
    if let Some(d) = &g.dims {
        cfg.phantom.dims = *d;
    }
    match &cli.command {
        Command::Cohort { n: Some(n) } => cfg.cohort_size = *n,
        Command::Synth(a) => {
            if let Some(s) = a.severity {
                cfg.lesion.severity = s;
            }
            if let Some(c) = &a.center {
                cfg.lesion.p_lesion = Some(*c);
            }
        }
        Command::Register(a) => {
            let r = &mut cfg.registration;
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(x) = a.$f { r.$f = x; })* };
            }
            set!(lambda_bend, lambda_div, iterations, step, fluid_sigma, diffusion_sigma, pyramid_levels, exp_steps);
            if let Some(m) = a.mode {
                r.mode = match m {
                    ModeArg::Intensity => RegMode::Intensity,
                    ModeArg::Sdf => RegMode::Sdf,
                };
            }
        }
        Command::Inpaint(a) => apply_inpaint_overrides(&mut cfg.inpainter, a, cfg.seed)?,
        Command::Segment(a) => {
            let s = &mut cfg.reversal.segmentation;
            if let Some(x) = a.lower_pct {
                s.lower_pct = x;
            }
            if let Some(x) = a.upper_pct {
                s.upper_pct = x;
            }
            if let Some(x) = a.min_component {
                s.min_component = x;
            }
            if let Some(x) = a.closing_radius {
                s.closing_radius = x;
            }
        }
        Command::Eval(a) => {
            if let Some(x) = a.cases {
                cfg.cases = x;
            }
            if let Some(x) = a.pool_subjects {
                cfg.pool_subjects = x;
            }
            if let Some(x) = a.holdout_subjects {
                cfg.holdout_subjects = x;
            }
        }
        _ => {}
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn apply_inpaint_overrides(inp: &mut Inpainter, a: &InpaintArgs, seed: u64) -> Result<(), CliError> {
    match a.method {
        Some(InpaintMethod::Diffusion) if !matches!(inp, Inpainter::Diffusion { .. }) => *inp = Inpainter::default(),
        Some(InpaintMethod::Harmonic) if !matches!(inp, Inpainter::Harmonic { .. }) => *inp = Inpainter::harmonic(),
        _ => {}
    }
    match inp {
        Inpainter::Diffusion { steps, radius, mode, resample_jumps, seed: s } => {
            if a.tol.is_some() || a.max_iter.is_some() {
                return Err(CliError::Config("--tol and --max-iter apply to harmonic inpainting only".into()));
            }
            if let Some(m) = a.mode {
                *mode = match m {
                    InpaintModeArg::PaperCleanKnown => InpaintMode::PaperCleanKnown,
                    InpaintModeArg::RepaintNoisedKnown => InpaintMode::RepaintNoisedKnown,
                };
            }
            *steps = a.steps.unwrap_or(*steps);
            *radius = a.radius.unwrap_or(*radius);
            *resample_jumps = a.resample_jumps.unwrap_or(*resample_jumps);
            *s = a.sampler_seed.unwrap_or(seed);
        }
        Inpainter::Harmonic { tol, max_iter } => {
            if a.mode.is_some() || a.steps.is_some() || a.radius.is_some() || a.resample_jumps.is_some() || a.sampler_seed.is_some() {
                return Err(CliError::Config("diffusion options given for harmonic inpainting".into()));
            }
            *tol = a.tol.unwrap_or(*tol);
            *max_iter = a.max_iter.unwrap_or(*max_iter);
        }
    }
    Ok(())
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let bad = |e: lesion_core::Error| CliError::Config(e.to_string());
    cfg.phantom.validate().map_err(bad)?;
    cfg.registration.validate().map_err(bad)?;
    cfg.lesion.growth_registration.validate().map_err(bad)?;
    cfg.reversal.segmentation.validate().map_err(bad)?;
    cfg.reversal.segmentation_registration.validate().map_err(bad)?;
    cfg.reversal.core_registration.validate().map_err(bad)?;
    if !(0.0..=1.0).contains(&cfg.lesion.severity) {
        return Err(CliError::Config(format!("lesion.severity must be in [0, 1], got {}", cfg.lesion.severity)));
    }
    if cfg.cohort_size == 0 {
        return Err(CliError::Config("cohort_size must be >= 1".into()));
    }
    if cfg.pool_subjects < 5 {
        return Err(CliError::Config(format!("pool_subjects must be >= 5, got {}", cfg.pool_subjects)));
    }
    if !(cfg.perilesional_distance > 0.0) {
        return Err(CliError::Config("perilesional_distance must be > 0".into()));
    }
    match &cfg.inpainter {
        Inpainter::Diffusion { steps, .. } if *steps == 0 => Err(CliError::Config("inpainter.steps must be >= 1".into())),
        Inpainter::Harmonic { tol, max_iter } if !(*tol > 0.0) || *max_iter == 0 => {
            Err(CliError::Config("harmonic inpainting needs tol > 0 and max_iter >= 1".into()))
        }
        _ => Ok(()),
    }
}

fn set_threads(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Refuses an output directory that contains one of the inputs, since the
/// commit would replace it.
fn guard_inputs(out: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    let Ok(out) = std::fs::canonicalize(out) else { return Ok(()) };
    for i in inputs {
        if let Ok(p) = std::fs::canonicalize(i) {
            if p.starts_with(&out) {
                return Err(CliError::Input(format!("output directory {} contains input {}", out.display(), i.display())));
            }
        }
    }
    Ok(())
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<Summary, CliError> {
    let cfg = resolve_config(cli)?;
    set_threads(cfg.threads);
    let name = cli.command.name();
    let target = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    guard_inputs(&target, &cli.command.inputs())?;
    let t = Instant::now();
    let mut out = OutDir::create(&target)?;
    progress(&format!("{name}: writing {}", target.display()));
    let details = match &cli.command {
        Command::Phantom => cmd_phantom(&cfg, &mut out)?,
        Command::Cohort { .. } => cmd_cohort(&cfg, &mut out)?,
        Command::Synth(a) => cmd_synth(&cfg, a, &mut out)?,
        Command::Normative(a) => cmd_normative(&cfg, a, &mut out)?,
        Command::Register(a) => cmd_register(&cfg, a, &mut out)?,
        Command::Inpaint(a) => cmd_inpaint(&cfg, a, &mut out)?,
        Command::Segment(a) => cmd_segment(&cfg, a, &mut out)?,
        Command::Reverse(a) => cmd_reverse(&cfg, a, &mut out)?,
        Command::Label(a) => cmd_label(&cfg, a, &mut out)?,
        Command::Eval(_) => cmd_eval(&cfg, &mut out)?,
    };
    if name != "synth" {
        out.json("config", &cfg)?;
    }
    let files = out.commit()?;
    let seconds = t.elapsed().as_secs_f64();
    progress(&format!("{name}: done in {seconds:.1} s"));
    Ok(Summary { command: name, out: target, files, seconds, details })
}

fn read(path: &Path) -> Result<NiftiVolume, CliError> {
    read_nifti(path).map_err(|e| CliError::Input(e.to_string()))
}

fn read_scalar(path: &Path) -> Result<ScalarVolume, CliError> {
    Ok(read(path)?.into_scalar())
}

fn read_mask(path: &Path) -> Result<Mask, CliError> {
    read(path)?.into_mask().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path) -> Result<LabelVolume, CliError> {
    read(path)?.into_labels().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_components(dir: &Path, name: &str, kind: FieldKind) -> Result<VectorField, CliError> {
    let c: Vec<ScalarVolume> =
        ["dx", "dy", "dz"].iter().map(|a| read_scalar(&dir.join(format!("{name}_{a}.nii")))).collect::<Result<_, _>>()?;
    Ok(VectorField::from_components(kind, [&c[0], &c[1], &c[2]])?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_pool(path: &Path) -> Result<NormativeJacobianPool, CliError> {
    let stem = if path.is_dir() { path.join("pool") } else { path.with_extension("") };
    NormativeJacobianPool::load(&stem).map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_phantom(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let (atlas, labels) = make_phantom(&cfg.phantom)?;
    out.volume("atlas", &atlas)?;
    out.volume("atlas_labels", &labels)?;
    Ok(json!({ "dims": atlas.dims(), "labels": labels.labels() }))
}

fn cmd_cohort(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let (atlas, labels) = make_phantom(&cfg.phantom)?;
    out.volume("atlas", &atlas)?;
    out.volume("atlas_labels", &labels)?;
    let subjects = make_cohort(&atlas, &labels, &cfg.subject, cfg.cohort_size, cfg.seed)?;
    for (k, s) in subjects.iter().enumerate() {
        out.volume(&format!("subject_{k:02}"), &s.image)?;
        out.volume(&format!("subject_{k:02}_labels"), &s.labels)?;
        out.field(&format!("subject_{k:02}_velocity"), &s.velocity, Some(DEFAULT_EXP_STEPS))?;
    }
    Ok(json!({ "subjects": subjects.len() }))
}

/// Contents of a synth case's `params.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CaseFile {
    pub case: CaseParams,
    pub gt_velocity: FieldSidecar,
    pub config: RunConfig,
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let (healthy, labels) = match (&a.healthy, &a.labels) {
        (Some(h), Some(l)) => (read_scalar(h)?, read_labels(l)?),
        _ => {
            let (atlas, atlas_labels) = make_phantom(&cfg.phantom)?;
            let s = make_subject(&atlas, &atlas_labels, &cfg.subject, hash3(cfg.seed, 4, 0))?;
            (s.image, s.labels)
        }
    };
    healthy.geometry().ensure_same(labels.geometry())?;
    let region = innermost_mask(&labels, &cfg.phantom);
    if !region.any() {
        return Err(CliError::Input("the labels contain no innermost-tissue voxels".into()));
    }
    let case = synthesize_lesion(&healthy, &region, &brain_mask(&labels), &cfg.lesion, cfg.seed)?;
    out.volume("healthy", &case.healthy)?;
    out.volume("core", &case.core_image)?;
    out.volume("lesioned", &case.lesioned)?;
    out.volume("core_mask", &case.core_mask)?;
    out.volume("final_mask", &case.final_mask)?;
    out.components("gt_velocity", &case.gt_velocity)?;
    let side = FieldSidecar { kind: FieldKind::Velocity, steps: Some(DEFAULT_EXP_STEPS), dims: case.gt_velocity.geometry().dims };
    out.json("params", &CaseFile { case: case.params.clone(), gt_velocity: side, config: cfg.clone() })?;
    Ok(json!({
        "center": case.params.p_lesion,
        "core_volume": case.core_mask.count(),
        "final_volume": case.final_mask.count(),
        "growth_dice": case.params.growth_dice,
    }))
}

/// Reads a case directory written by `synth`.
pub fn load_case(dir: &Path) -> Result<SynthCase, CliError> {
    let meta: CaseFile = read_json(&dir.join("params.json"))?;
    let gt_velocity = read_components(dir, "gt_velocity", FieldKind::Velocity)?;
    let gt_displacement = exp_velocity(&gt_velocity, meta.gt_velocity.steps.unwrap_or(DEFAULT_EXP_STEPS))?;
    Ok(SynthCase {
        healthy: read_scalar(&dir.join("healthy.nii"))?,
        core_image: read_scalar(&dir.join("core.nii"))?,
        lesioned: read_scalar(&dir.join("lesioned.nii"))?,
        core_mask: read_mask(&dir.join("core_mask.nii"))?,
        final_mask: read_mask(&dir.join("final_mask.nii"))?,
        gt_velocity,
        gt_displacement,
        params: meta.case,
    })
}

fn cmd_normative(cfg: &RunConfig, a: &NormativeArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let reg = &cfg.reversal.segmentation_registration;
    let pool = match &a.atlas {
        Some(atlas) => {
            let atlas = read_scalar(atlas)?;
            let subjects: Vec<ScalarVolume> = a.subject.iter().map(|p| read_scalar(p)).collect::<Result<_, _>>()?;
            if subjects.len() < 5 {
                return Err(CliError::Input(format!("a normative pool needs at least 5 subjects, got {}", subjects.len())));
            }
            build_normative_pool(&atlas, &subjects, Vec::new(), reg)?
        }
        None => {
            let (atlas, labels) = make_phantom(&cfg.phantom)?;
            let subjects = make_cohort(&atlas, &labels, &cfg.subject, cfg.pool_subjects, cfg.seed)?;
            progress(&format!("registering {} subjects", subjects.len()));
            let images: Vec<ScalarVolume> = subjects.into_iter().map(|s| s.image).collect();
            let seeds = (0..cfg.pool_subjects as u64).map(|k| hash3(cfg.seed, 4, k)).collect();
            build_normative_pool(&atlas, &images, seeds, reg)?
        }
    };
    out.pool("pool", &pool)?;
    Ok(json!({
        "samples": pool.len(),
        "subjects": pool.meta.subjects,
        "p5": pool.percentile(5.0)?,
        "p95": pool.percentile(95.0)?,
    }))
}

fn cmd_register(cfg: &RunConfig, a: &RegisterArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let p = &cfg.registration;
    let (r, warped) = match p.mode {
        RegMode::Intensity => {
            let (moving, fixed) = (read_scalar(&a.moving)?, read_scalar(&a.fixed)?);
            let r = register(&moving, &fixed, p)?;
            let warped = warp(&moving, &r.displacement, Interp::Linear)?;
            (r, warped)
        }
        RegMode::Sdf => {
            let (moving, fixed) = (read_mask(&a.moving)?, read_mask(&a.fixed)?);
            let r = register_masks(&moving, &fixed, p)?;
            let warped = warp(&moving, &r.displacement, Interp::Nearest)?.to_scalar();
            (r, warped)
        }
    };
    out.field("velocity", &r.velocity, Some(p.exp_steps))?;
    out.field("displacement", &r.displacement, None)?;
    out.volume("warped", &warped)?;
    out.json("loss_trace", &json!({ "converged": r.converged, "mask_dice": r.mask_dice, "trace": r.loss_trace }))?;
    let last = r.final_loss();
    Ok(json!({ "final_loss": last.total, "data": last.data, "iterations": r.loss_trace.len(), "mask_dice": r.mask_dice }))
}

fn cmd_inpaint(cfg: &RunConfig, a: &InpaintArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let image = read_scalar(&a.image)?;
    let mask = read_mask(&a.mask)?;
    image.geometry().ensure_same(mask.geometry())?;
    let (result, meta) = match &cfg.inpainter {
        Inpainter::Harmonic { tol, max_iter } => {
            let h = harmonic_inpaint(&image, &mask, *tol, *max_iter)?;
            let meta = json!({ "method": "harmonic", "tol": tol, "iterations": h.iterations, "residual": h.residual });
            (h.volume, meta)
        }
        inp @ Inpainter::Diffusion { steps, radius, mode, resample_jumps, seed } => {
            let v = inp.inpaint(&image, &mask)?;
            let meta = json!({
                "method": "diffusion", "mode": mode, "steps": steps, "radius": radius,
                "resample_jumps": resample_jumps, "seed": seed,
            });
            (v, meta)
        }
    };
    let known_max_change = image
        .data()
        .iter()
        .zip(result.data())
        .zip(mask.data())
        .filter(|(_, &m)| !m)
        .map(|((x, y), _)| (x - y).abs())
        .fold(0.0, f64::max);
    let mut meta = meta;
    meta["masked_voxels"] = json!(mask.count());
    meta["known_max_change"] = json!(known_max_change);
    out.volume("inpainted", &result)?;
    out.json("inpaint", &meta)?;
    Ok(meta)
}

fn cmd_segment(cfg: &RunConfig, a: &SegmentArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let lesioned = read_scalar(&a.lesioned)?;
    let atlas = read_scalar(&a.atlas)?;
    let pool = load_pool(&a.pool)?;
    let seg = segment_lesion(&lesioned, &atlas, &pool, &cfg.reversal.segmentation, &cfg.reversal.segmentation_registration)?;
    out.volume("lesion_mask", &seg.mask)?;
    out.volume("jacobian", seg.jacobian.volume())?;
    let meta = json!({
        "empty": seg.empty,
        "thresholds": seg.thresholds,
        "raw_flagged": seg.raw_flagged,
        "lesion_voxels": seg.mask.count(),
        "volume_fraction": volume_fraction(&seg.mask),
        "final_loss": seg.registration.final_loss().total,
    });
    out.json("segmentation", &meta)?;
    Ok(meta)
}

#[derive(Debug, Serialize, Deserialize)]
struct ReversalFile {
    empty_segmentation: bool,
    /// Stage names and final registration losses (timings go to stderr).
    stages: Vec<(String, Option<f64>)>,
}

fn cmd_reverse(cfg: &RunConfig, a: &ReverseArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let lesioned = read_scalar(&a.lesioned)?;
    let atlas = read_scalar(&a.atlas)?;
    let pool = load_pool(&a.pool)?;
    let r = reverse_pipeline(&lesioned, &atlas, &pool, &cfg.reversal)?;
    for s in &r.stages {
        progress(&format!("{}: {:.1} s", s.stage, s.seconds));
    }
    out.volume("lesion_mask", &r.lesion_mask)?;
    out.volume("inpainted_lesioned", &r.inpainted_lesioned)?;
    out.volume("core", &r.core_image)?;
    out.volume("core_mask", &r.core_mask)?;
    out.field("velocity_b", &r.velocity_b, Some(cfg.reversal.core_registration.exp_steps))?;
    out.volume("healthy_estimate", &r.healthy_estimate)?;
    let file = ReversalFile {
        empty_segmentation: r.empty_segmentation,
        stages: r.stages.iter().map(|s| (s.stage.clone(), s.final_loss)).collect(),
    };
    out.json("reversal", &file)?;
    Ok(json!({
        "empty_segmentation": r.empty_segmentation,
        "lesion_voxels": r.lesion_mask.count(),
        "core_voxels": r.core_mask.count(),
    }))
}

/// Reads an output directory written by `reverse`.
pub fn load_reversal(dir: &Path) -> Result<ReversalResult, CliError> {
    let meta: ReversalFile = read_json(&dir.join("reversal.json"))?;
    Ok(ReversalResult {
        lesion_mask: read_mask(&dir.join("lesion_mask.nii"))?,
        empty_segmentation: meta.empty_segmentation,
        inpainted_lesioned: read_scalar(&dir.join("inpainted_lesioned.nii"))?,
        core_image: read_scalar(&dir.join("core.nii"))?,
        core_mask: read_mask(&dir.join("core_mask.nii"))?,
        velocity_b: read_components(dir, "velocity_b", FieldKind::Velocity)?,
        healthy_estimate: read_scalar(&dir.join("healthy_estimate.nii"))?,
        stages: Vec::new(),
    })
}

fn cmd_label(cfg: &RunConfig, a: &LabelArgs, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let atlas = read_scalar(&a.atlas)?;
    let atlas_labels = read_labels(&a.atlas_labels)?;
    let reg = &cfg.registration;
    let missing = |flag: &str| CliError::Input(format!("--{flag} is required for this method"));
    let l: Labeling = match a.method {
        LabelMethod::Baseline => label_baseline(&read_scalar(a.lesioned.as_deref().ok_or_else(|| missing("lesioned"))?)?, &atlas, &atlas_labels, reg)?,
        LabelMethod::Proposed => label_proposed(&load_reversal(a.reversal.as_deref().ok_or_else(|| missing("reversal"))?)?, &atlas, &atlas_labels, reg)?,
        LabelMethod::Groundtruth => label_groundtruth(&load_case(a.case.as_deref().ok_or_else(|| missing("case"))?)?, &atlas, &atlas_labels, reg)?,
    };
    out.volume("labels", &l.labels)?;
    out.field("chain", &l.chain, None)?;
    let meta = json!({ "method": a.method, "labels": l.labels.labels() });
    out.json("label", &meta)?;
    Ok(meta)
}

fn cmd_eval(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let exp = cfg.experiment();
    let res = run_experiment(&exp, cfg.seed, &|m: &str| progress(m))?;
    out.text("report.csv", &res.report.to_csv())?;
    out.json("report", &res.report)?;
    out.json("outcomes", &res.outcomes)?;
    out.pool("pool", &res.pool)?;
    Ok(eval_summary(&res.outcomes, &res.holdout_fp))
}

fn eval_summary(o: &[CaseOutcome], holdout_fp: &[f64]) -> serde_json::Value {
    let n = o.len();
    let count = |f: &dyn Fn(&CaseOutcome) -> bool| o.iter().filter(|c| f(c)).count();
    let avg = |f: &dyn Fn(&CaseOutcome) -> f64| o.iter().map(f).sum::<f64>() / n.max(1) as f64;
    json!({
        "cases": n,
        "holdout_fp": holdout_fp,
        "segmentation_dice_mean": avg(&|c| c.segmentation_dice),
        "estimate_beats_lesioned_nmse": count(&|c| c.nmse_estimate <= c.nmse_lesioned),
        "core_dice_at_least_half": count(&|c| c.core_dice >= 0.5),
        "proposed_whole_at_least_baseline": count(&|c| c.whole_proposed >= c.whole_baseline),
        "proposed_field_at_most_baseline": count(&|c| c.field_nmse_proposed <= c.field_nmse_baseline),
        "whole_improvement_mean": avg(&|c| c.whole_proposed - c.whole_baseline),
        "peri_improvement_mean": avg(&|c| c.peri_proposed - c.peri_baseline),
    })
}
