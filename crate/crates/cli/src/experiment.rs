//! The synthetic labeling experiment: cohort, normative pool, lesion cases,
//! reversal, three labelings and the evaluation report.

use serde::{Deserialize, Serialize};

use lesion_core::metrics::{dice, field_nmse, label_dice_table, mean, nmse, perilesional_region, ssim3d, volume_fraction, EvalReport, SsimParams};
use lesion_core::par;
use lesion_core::reversal::{
    label_baseline, label_groundtruth, label_proposed, lesion_label, pipeline_reg_params, reverse_pipeline, segment_lesion,
    Labeling, ReversalConfig, ReversalResult,
};
use lesion_core::rng::hash3;
use lesion_core::synthesis::{
    brain_mask, build_normative_pool, innermost_mask, make_cohort, make_phantom, synthesize_lesion, LesionParams,
    NormativeJacobianPool, PhantomSpec, Subject, SubjectSpec, SynthCase,
};
use lesion_core::{LabelVolume, Mask, Result, ScalarVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub subject: SubjectSpec,
    pub pool_subjects: usize,
    /// Healthy subjects kept out of the pool for the false-positive check.
    pub holdout_subjects: usize,
    pub cases: usize,
    pub lesion: LesionParams,
    pub reversal: ReversalConfig,
    pub labeling_registration: lesion_core::registration::RegParams,
    pub perilesional_distance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            subject: SubjectSpec::default(),
            pool_subjects: 20,
            holdout_subjects: 3,
            cases: 10,
            lesion: LesionParams::default(),
            reversal: ReversalConfig::default(),
            labeling_registration: pipeline_reg_params(),
            perilesional_distance: 10.0,
        }
    }
}

/// Per-case numbers behind the report rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: String,
    pub segmentation_dice: f64,
    pub lesion_volume: usize,
    pub final_volume: usize,
    pub nmse_lesioned: f64,
    pub nmse_estimate: f64,
    pub ssim_lesioned: f64,
    pub ssim_estimate: f64,
    pub core_dice: f64,
    pub whole_baseline: f64,
    pub whole_proposed: f64,
    pub peri_baseline: f64,
    pub peri_proposed: f64,
    pub field_nmse_baseline: f64,
    pub field_nmse_proposed: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub outcomes: Vec<CaseOutcome>,
    /// Flagged volume fraction on each held-out healthy subject.
    pub holdout_fp: Vec<f64>,
    pub pool: NormativeJacobianPool,
}

pub struct Cohort {
    pub atlas: ScalarVolume,
    pub atlas_labels: LabelVolume,
    pub subjects: Vec<Subject>,
}

pub fn make_experiment_cohort(cfg: &ExperimentConfig, seed: u64) -> Result<Cohort> {
    let (atlas, atlas_labels) = make_phantom(&cfg.phantom)?;
    let n = cfg.pool_subjects + cfg.holdout_subjects + cfg.cases;
    let subjects = make_cohort(&atlas, &atlas_labels, &cfg.subject, n, seed)?;
    Ok(Cohort { atlas, atlas_labels, subjects })
}

pub fn case_seed(seed: u64, k: usize) -> u64 {
    hash3(seed, 7, k as u64)
}

pub fn make_case(cohort: &Cohort, cfg: &ExperimentConfig, subject: &Subject, seed: u64) -> Result<SynthCase> {
    synthesize_lesion(&subject.image, &innermost_mask(&subject.labels, &cfg.phantom), &brain_mask(&subject.labels), &cfg.lesion, seed)
        .inspect(|c| debug_assert!(c.healthy.geometry() == cohort.atlas.geometry()))
}

fn roi_labels(atlas_labels: &LabelVolume) -> Vec<u16> {
    let lesion = lesion_label(atlas_labels);
    atlas_labels.labels().into_iter().filter(|&l| l != lesion).collect()
}

/// Mean Dice over ROIs; within `region`, only ROIs present in the reference.
fn mean_roi_dice(pred: &LabelVolume, reference: &LabelVolume, rois: &[u16], region: Option<&Mask>) -> Result<f64> {
    let present: Vec<u16> = match region {
        None => rois.to_vec(),
        Some(r) => rois
            .iter()
            .copied()
            .filter(|&l| reference.data().iter().zip(r.data()).any(|(&x, &m)| m && x == l))
            .collect(),
    };
    let table = label_dice_table(pred, reference, &present, region)?;
    Ok(mean(&table.iter().map(|t| t.1).collect::<Vec<_>>()))
}

struct CaseRun {
    outcome: CaseOutcome,
    roi_rows: Vec<(String, f64, f64)>,
}

fn run_case(name: String, case: &SynthCase, cohort: &Cohort, pool: &NormativeJacobianPool, cfg: &ExperimentConfig) -> Result<CaseRun> {
    let (atlas, atlas_labels) = (&cohort.atlas, &cohort.atlas_labels);
    let result: ReversalResult = reverse_pipeline(&case.lesioned, atlas, pool, &cfg.reversal)?;
    let reg = &cfg.labeling_registration;
    let gt: Labeling = label_groundtruth(case, atlas, atlas_labels, reg)?;
    let base = label_baseline(&case.lesioned, atlas, atlas_labels, reg)?;
    let prop = label_proposed(&result, atlas, atlas_labels, reg)?;
    let rois = roi_labels(atlas_labels);
    let peri = perilesional_region(&case.final_mask, cfg.perilesional_distance)?;
    let ssim = SsimParams::default();
    let roi_rows = label_dice_table(&base.labels, &gt.labels, &rois, None)?
        .into_iter()
        .zip(label_dice_table(&prop.labels, &gt.labels, &rois, None)?)
        .map(|((l, b), (_, p))| (format!("roi:{l}"), b, p))
        .collect();
    let outcome = CaseOutcome {
        segmentation_dice: dice(&result.lesion_mask, &case.final_mask)?,
        lesion_volume: result.lesion_mask.count(),
        final_volume: case.final_mask.count(),
        nmse_lesioned: nmse(&case.lesioned, &case.healthy)?,
        nmse_estimate: nmse(&result.healthy_estimate, &case.healthy)?,
        ssim_lesioned: ssim3d(&case.lesioned, &case.healthy, ssim)?,
        ssim_estimate: ssim3d(&result.healthy_estimate, &case.healthy, ssim)?,
        core_dice: dice(&result.core_mask, &case.core_mask)?,
        whole_baseline: mean_roi_dice(&base.labels, &gt.labels, &rois, None)?,
        whole_proposed: mean_roi_dice(&prop.labels, &gt.labels, &rois, None)?,
        peri_baseline: mean_roi_dice(&base.labels, &gt.labels, &rois, Some(&peri))?,
        peri_proposed: mean_roi_dice(&prop.labels, &gt.labels, &rois, Some(&peri))?,
        field_nmse_baseline: field_nmse(&base.chain, &gt.chain)?,
        field_nmse_proposed: field_nmse(&prop.chain, &gt.chain)?,
        case: name,
    };
    Ok(CaseRun { outcome, roi_rows })
}

/// Runs everything from one seed. `progress` receives short status lines.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, progress: &(dyn Fn(&str) + Sync)) -> Result<ExperimentOutput> {
    let cohort = make_experiment_cohort(cfg, seed)?;
    progress(&format!("cohort: {} subjects", cohort.subjects.len()));
    let (pool_set, rest) = cohort.subjects.split_at(cfg.pool_subjects);
    let (holdout, case_subjects) = rest.split_at(cfg.holdout_subjects);
    let pool_images: Vec<ScalarVolume> = pool_set.iter().map(|s| s.image.clone()).collect();
    let pool_seeds = (0..cfg.pool_subjects as u64).map(|k| hash3(seed, 4, k)).collect();
    let pool = build_normative_pool(&cohort.atlas, &pool_images, pool_seeds, &cfg.reversal.segmentation_registration)?;
    progress(&format!("pool: {} samples", pool.len()));

    let mut report = EvalReport::new(seed, serde_json::to_value(cfg)?);
    let holdout_fp: Vec<f64> = par::map_jobs(holdout.iter().collect(), |s| {
        segment_lesion(&s.image, &cohort.atlas, &pool, &cfg.reversal.segmentation, &cfg.reversal.segmentation_registration)
            .map(|seg| volume_fraction(&seg.mask))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    for (k, fp) in holdout_fp.iter().enumerate() {
        report.push(&format!("holdout{k:02}:segmentation"), "fp_fraction", "whole", *fp)?;
    }
    progress("holdout segmentation done");

    let jobs: Vec<(usize, &Subject)> = case_subjects.iter().enumerate().collect();
    let runs: Vec<Result<CaseRun>> = par::map_jobs(jobs, |(k, s)| {
        let name = format!("case{k:02}");
        let case = make_case(&cohort, cfg, s, case_seed(seed, k))?;
        let run = run_case(name, &case, &cohort, &pool, cfg);
        if let Ok(r) = &run {
            progress(&format!("{} done", r.outcome.case));
        }
        run
    });
    let mut outcomes = Vec::new();
    for run in runs {
        let run = run?;
        let o = &run.outcome;
        let c = o.case.as_str();
        let tag = |suffix: &str| format!("{c}:{suffix}");
        report.push(&tag("segmentation"), "dice", "whole", o.segmentation_dice)?;
        report.push(&tag("segmentation"), "volume", "whole", o.lesion_volume as f64)?;
        report.push(&tag("lesioned"), "nmse", "whole", o.nmse_lesioned)?;
        report.push(&tag("estimate"), "nmse", "whole", o.nmse_estimate)?;
        report.push(&tag("lesioned"), "ssim", "whole", o.ssim_lesioned)?;
        report.push(&tag("estimate"), "ssim", "whole", o.ssim_estimate)?;
        report.push(&tag("core"), "core_dice", "whole", o.core_dice)?;
        report.push(&tag("baseline"), "dice_mean", "whole", o.whole_baseline)?;
        report.push(&tag("proposed"), "dice_mean", "whole", o.whole_proposed)?;
        report.push(&tag("baseline"), "dice_mean", "perilesional", o.peri_baseline)?;
        report.push(&tag("proposed"), "dice_mean", "perilesional", o.peri_proposed)?;
        report.push(&tag("baseline"), "field_nmse", "whole", o.field_nmse_baseline)?;
        report.push(&tag("proposed"), "field_nmse", "whole", o.field_nmse_proposed)?;
        for (scope, b, p) in &run.roi_rows {
            report.push(&tag("baseline"), "dice", scope, *b)?;
            report.push(&tag("proposed"), "dice", scope, *p)?;
        }
        outcomes.push(run.outcome);
    }
    Ok(ExperimentOutput { report, outcomes, holdout_fp, pool })
}
