//! Lesion reversal and the three labeling pipelines.
//!
//! Reversal runs in three stages: a Jacobian-threshold segmentation of the
//! lesion, a registration of the lesioned image onto an inpainted copy (which
//! shrinks the lesion back toward its core), and a final inpainting of the core.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{harmonic_inpaint, inpaint_sample, neighborhood_denoiser, InpaintConfig, InpaintMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{compose, exp_velocity, jacobian_determinant, Interp, JacobianMap, Warp};
use crate::morphology::{close, remove_small_components};
use crate::registration::{register, RegParams, RegResult};
use crate::synthesis::{NormativeJacobianPool, SynthCase};
use crate::volume::{LabelVolume, Mask, ScalarVolume};
use crate::VectorField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub min_component: usize,
    pub closing_radius: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { lower_pct: 5.0, upper_pct: 95.0, min_component: 20, closing_radius: 1 }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lower_pct && self.lower_pct < self.upper_pct && self.upper_pct < 100.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < lower_pct < upper_pct < 100, got {} and {}",
                self.lower_pct, self.upper_pct
            )));
        }
        Ok(())
    }
}

/// Intensity registration settings used by the reversal and labeling stages.
pub fn pipeline_reg_params() -> RegParams {
    RegParams { fluid_sigma: 3.0, diffusion_sigma: 2.0, iterations: 100, ..RegParams::default() }
}

/// Registration settings of the core estimate. Shrinking the lesion back to
/// its core needs a much weaker bending penalty than anatomical registration.
pub fn core_reg_params() -> RegParams {
    RegParams { lambda_bend: 0.01, ..RegParams::default() }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: Mask,
    /// Set when nothing survived the cleanup.
    pub empty: bool,
    pub thresholds: [f64; 2],
    /// Voxels flagged before morphology.
    pub raw_flagged: usize,
    pub jacobian: JacobianMap,
    pub registration: RegResult,
}

/// Flags voxels whose atlas-to-image Jacobian falls outside the pool's
/// percentile band, then closes the mask and drops small components.
pub fn segment_lesion(
    lesioned: &ScalarVolume,
    atlas: &ScalarVolume,
    pool: &NormativeJacobianPool,
    params: &SegmentationParams,
    reg: &RegParams,
) -> Result<Segmentation> {
    params.validate()?;
    lesioned.geometry().ensure_same(atlas.geometry())?;
    if pool.meta.reg_params != *reg {
        return Err(Error::InvalidArgument("the pool was built with different registration parameters".into()));
    }
    let lo = pool.percentile(params.lower_pct)?;
    let hi = pool.percentile(params.upper_pct)?;
    let registration = register(atlas, lesioned, reg)?;
    let jacobian = jacobian_determinant(&registration.displacement)?;
    let g = *lesioned.geometry();
    // boundary voxels carry no determinant and are never flagged
    let flagged: Mask = crate::Volume::from_fn(g, |c| {
        let d = jacobian.volume().data()[g.index(c[0], c[1], c[2])];
        g.is_interior(c) && (d < lo || d > hi)
    });
    let raw_flagged = flagged.count();
    let mask = remove_small_components(&close(&flagged, params.closing_radius as f64), params.min_component)?;
    Ok(Segmentation { empty: !mask.any(), mask, thresholds: [lo, hi], raw_flagged, jacobian, registration })
}

/// How missing tissue is filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Inpainter {
    /// Masked reverse diffusion with the local-mean denoiser.
    Diffusion { steps: usize, radius: usize, mode: InpaintMode, resample_jumps: usize, seed: u64 },
    Harmonic { tol: f64, max_iter: usize },
}

impl Default for Inpainter {
    fn default() -> Self {
        Inpainter::Diffusion { steps: 50, radius: 1, mode: InpaintMode::PaperCleanKnown, resample_jumps: 0, seed: 0 }
    }
}

impl Inpainter {
    pub fn harmonic() -> Self {
        Inpainter::Harmonic { tol: 1e-6, max_iter: 20_000 }
    }

    /// Fills `vol` inside `m`; voxels outside `m` are returned unchanged.
    pub fn inpaint(&self, vol: &ScalarVolume, m: &Mask) -> Result<ScalarVolume> {
        match self {
            Inpainter::Diffusion { steps, radius, mode, resample_jumps, seed } => {
                let cfg = InpaintConfig {
                    mode: *mode,
                    schedule: NoiseSchedule::scaled_default(*steps)?,
                    seed: *seed,
                    resample_jumps: *resample_jumps,
                };
                inpaint_sample(vol, m, &neighborhood_denoiser(*radius)?, &cfg)
            }
            Inpainter::Harmonic { tol, max_iter } => Ok(harmonic_inpaint(vol, m, *tol, *max_iter)?.volume),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoreEstimate {
    pub inpainted: ScalarVolume,
    pub core_image: ScalarVolume,
    pub core_mask: Mask,
    pub velocity_b: VectorField,
    pub registration: RegResult,
}

/// Registers the lesioned image onto a copy with the lesion inpainted; the
/// resulting deformation shrinks the lesion toward its core.
pub fn estimate_core(lesioned: &ScalarVolume, lesion_mask: &Mask, inpainter: &Inpainter, reg: &RegParams) -> Result<CoreEstimate> {
    lesioned.geometry().ensure_same(lesion_mask.geometry())?;
    if !lesion_mask.any() {
        return Err(Error::EmptyMask("lesion mask for core estimation".into()));
    }
    let inpainted = inpainter.inpaint(lesioned, lesion_mask)?;
    let registration = register(lesioned, &inpainted, reg)?;
    let core_image = lesioned.warp(&registration.displacement, Interp::Linear)?;
    let core_mask = lesion_mask.warp(&registration.displacement, Interp::Nearest)?;
    Ok(CoreEstimate { inpainted, core_image, core_mask, velocity_b: registration.velocity.clone(), registration })
}

/// Inpaints the estimated core; an empty core mask returns the input.
pub fn estimate_healthy(core_image: &ScalarVolume, core_mask: &Mask, inpainter: &Inpainter) -> Result<ScalarVolume> {
    core_image.geometry().ensure_same(core_mask.geometry())?;
    if !core_mask.any() {
        return Ok(core_image.clone());
    }
    inpainter.inpaint(core_image, core_mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReversalConfig {
    pub segmentation: SegmentationParams,
    /// Registration for segmentation; must match the pool's.
    pub segmentation_registration: RegParams,
    pub core_registration: RegParams,
    pub inpainter: Inpainter,
}

impl Default for ReversalConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationParams::default(),
            segmentation_registration: pipeline_reg_params(),
            core_registration: core_reg_params(),
            inpainter: Inpainter::harmonic(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage: String,
    pub seconds: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReversalResult {
    pub lesion_mask: Mask,
    /// The segmentation came back empty; later stages are identities.
    pub empty_segmentation: bool,
    pub inpainted_lesioned: ScalarVolume,
    pub core_image: ScalarVolume,
    pub core_mask: Mask,
    pub velocity_b: VectorField,
    pub healthy_estimate: ScalarVolume,
    pub stages: Vec<StageInfo>,
}

impl ReversalResult {
    /// Estimated growth deformation, core space to lesioned space.
    pub fn growth_displacement(&self) -> Result<VectorField> {
        exp_velocity(&self.velocity_b.negated(), crate::field::DEFAULT_EXP_STEPS)
    }
}

pub fn reverse_pipeline(lesioned: &ScalarVolume, atlas: &ScalarVolume, pool: &NormativeJacobianPool, cfg: &ReversalConfig) -> Result<ReversalResult> {
    lesioned.geometry().ensure_same(atlas.geometry())?;
    let mut stages = Vec::new();
    let t = Instant::now();
    let seg = segment_lesion(lesioned, atlas, pool, &cfg.segmentation, &cfg.segmentation_registration)
        .map_err(Error::stage("segmentation"))?;
    stages.push(StageInfo { stage: "segmentation".into(), seconds: t.elapsed().as_secs_f64(), final_loss: Some(seg.registration.final_loss().total) });
    let g = *lesioned.geometry();
    if seg.empty {
        return Ok(ReversalResult {
            lesion_mask: seg.mask.clone(),
            empty_segmentation: true,
            inpainted_lesioned: lesioned.clone(),
            core_image: lesioned.clone(),
            core_mask: seg.mask,
            velocity_b: VectorField::zeros(g, crate::FieldKind::Velocity),
            healthy_estimate: lesioned.clone(),
            stages,
        });
    }
    let t = Instant::now();
    let core = estimate_core(lesioned, &seg.mask, &cfg.inpainter, &cfg.core_registration).map_err(Error::stage("core estimation"))?;
    stages.push(StageInfo { stage: "core estimation".into(), seconds: t.elapsed().as_secs_f64(), final_loss: Some(core.registration.final_loss().total) });
    let t = Instant::now();
    let healthy_estimate = estimate_healthy(&core.core_image, &core.core_mask, &cfg.inpainter).map_err(Error::stage("healthy estimation"))?;
    stages.push(StageInfo { stage: "healthy estimation".into(), seconds: t.elapsed().as_secs_f64(), final_loss: None });
    Ok(ReversalResult {
        lesion_mask: seg.mask,
        empty_segmentation: false,
        inpainted_lesioned: core.inpainted,
        core_image: core.core_image,
        core_mask: core.core_mask,
        velocity_b: core.velocity_b,
        healthy_estimate,
        stages,
    })
}

/// Labels of a lesioned image plus the accumulated atlas-to-lesioned
/// displacement that carried them there.
#[derive(Clone, Debug)]
pub struct Labeling {
    pub labels: LabelVolume,
    /// `labels(x) = atlas_labels(x + chain(x))` outside the lesion label.
    pub chain: VectorField,
}

/// Label reserved for lesions: one above the largest atlas label.
pub fn lesion_label(atlas_labels: &LabelVolume) -> u16 {
    atlas_labels.data().iter().copied().max().unwrap_or(0) + 1
}

fn overwrite(labels: LabelVolume, lesion: &Mask, label: u16) -> Result<LabelVolume> {
    labels.geometry().ensure_same(lesion.geometry())?;
    let data = labels.data().iter().zip(lesion.data()).map(|(&l, &m)| if m { label } else { l }).collect();
    crate::Volume::new(*labels.geometry(), data)
}

fn transfer_through(atlas: &ScalarVolume, atlas_labels: &LabelVolume, target: &ScalarVolume, to_lesioned: &VectorField, reg: &RegParams) -> Result<Labeling> {
    atlas.geometry().ensure_same(atlas_labels.geometry())?;
    let r = register(atlas, target, reg)?;
    let chain = compose(&r.displacement, to_lesioned)?;
    Ok(Labeling { labels: atlas_labels.warp(&chain, Interp::Nearest)?, chain })
}

/// Groundtruth: atlas to the healthy image, then through the known growth.
pub fn label_groundtruth(case: &SynthCase, atlas: &ScalarVolume, atlas_labels: &LabelVolume, reg: &RegParams) -> Result<Labeling> {
    let mut l = transfer_through(atlas, atlas_labels, &case.healthy, &case.growth_displacement()?, reg)?;
    l.labels = overwrite(l.labels, &case.final_mask, lesion_label(atlas_labels))?;
    Ok(l)
}

/// Classic labeling: one registration straight onto the lesioned image.
pub fn label_baseline(lesioned: &ScalarVolume, atlas: &ScalarVolume, atlas_labels: &LabelVolume, reg: &RegParams) -> Result<Labeling> {
    atlas.geometry().ensure_same(atlas_labels.geometry())?;
    let r = register(atlas, lesioned, reg)?;
    Ok(Labeling { labels: atlas_labels.warp(&r.displacement, Interp::Nearest)?, chain: r.displacement })
}

/// Atlas to the healthy estimate, then through the estimated growth.
pub fn label_proposed(result: &ReversalResult, atlas: &ScalarVolume, atlas_labels: &LabelVolume, reg: &RegParams) -> Result<Labeling> {
    let mut l = transfer_through(atlas, atlas_labels, &result.healthy_estimate, &result.growth_displacement()?, reg)?;
    l.labels = overwrite(l.labels, &result.lesion_mask, lesion_label(atlas_labels))?;
    Ok(l)
}
