//! Synthetic anatomy and the forward lesion model.
//!
//! A phantom is a set of nested star-shaped tissue shells. Subjects are the
//! phantom warped by a smooth random velocity field. A lesion case grows a
//! small dark core into a larger blob through a mask-to-mask registration,
//! scaled by a severity factor and confined by a smooth spatial window.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{exp_velocity, jacobian_determinant, FieldKind, Interp, VectorField, Warp};
use crate::morphology::dilate;
use crate::noise::{distance_to, make_blob_mesh, perlin3, squared_edt, voxelize_blob, BlobParams, PerlinTable};
use crate::par;
use crate::registration::{register, register_masks, RegParams};
use crate::rng::{hash3, CounterRng};
use crate::volume::{GridGeometry, LabelVolume, Mask, ScalarVolume, Volume};

/// Nested-shell phantom description. Tissue 0 is the outermost shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Semi-axes of the outer brain surface, in voxels.
    pub brain_radii: [f64; 3],
    /// Outer boundary of each tissue as a fraction of the brain surface,
    /// strictly decreasing, starting at 1.
    pub shell_fractions: Vec<f64>,
    /// Mean intensity of each tissue; background is 0.
    pub intensities: Vec<f64>,
    pub boundary_amplitude: f64,
    pub boundary_frequency: f64,
    /// Relative amplitude of the multiplicative intensity texture.
    pub texture_amplitude: f64,
    /// Texture frequency in cycles per voxel.
    pub texture_frequency: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: crate::volume::DEFAULT_DIMS,
            brain_radii: [20.0, 20.0, 16.5],
            shell_fractions: vec![1.0, 0.85, 0.65],
            intensities: vec![0.25, 0.6, 1.0],
            boundary_amplitude: 0.06,
            boundary_frequency: 1.5,
            texture_amplitude: 0.05,
            texture_frequency: 0.12,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::with_dims(self.dims)
    }

    pub fn tissue_count(&self) -> usize {
        self.shell_fractions.len()
    }

    /// Label of the first innermost-tissue parcel; parcels use the next 8.
    pub fn parcel_base(&self) -> u16 {
        self.tissue_count() as u16
    }

    /// Label reserved for lesions in labeling experiments.
    pub fn lesion_label(&self) -> u16 {
        self.parcel_base() + 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let n = self.tissue_count();
        if n < 2 {
            return bad("a phantom needs at least two tissue shells plus background".into());
        }
        if self.intensities.len() != n {
            return bad(format!("{} intensities for {n} shells", self.intensities.len()));
        }
        if self.shell_fractions[0] != 1.0 || self.shell_fractions.windows(2).any(|w| w[1] >= w[0] || w[1] <= 0.0) {
            return bad("shell fractions must start at 1 and strictly decrease to a positive value".into());
        }
        let mut levels: Vec<f64> = self.intensities.clone();
        levels.push(0.0);
        if levels.iter().any(|v| !v.is_finite()) || self.intensities.iter().any(|&v| v <= 0.0) {
            return bad("tissue intensities must be positive and finite".into());
        }
        levels.sort_by(f64::total_cmp);
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return bad("tissue intensities must be distinct".into());
        }
        if !(0.0..0.5).contains(&self.boundary_amplitude) || !(0.0..1.0).contains(&self.texture_amplitude) {
            return bad("boundary amplitude must be in [0, 0.5) and texture amplitude in [0, 1)".into());
        }
        // nesting must survive the worst-case perturbation
        let a = self.boundary_amplitude;
        if self.shell_fractions.windows(2).any(|w| w[1] * (1.0 + a) >= w[0] * (1.0 - a)) {
            return bad("boundary amplitude too large for the shell spacing".into());
        }
        let geom = self.geometry()?;
        let c = geom.center();
        for ax in 0..3 {
            let reach = self.brain_radii[ax] * (1.0 + a);
            if self.brain_radii[ax] <= 0.0 || c[ax] - reach < 1.0 {
                return Err(Error::Geometry(format!(
                    "brain radius {} (+{:.0}% boundary noise) does not fit axis {ax} of {:?}",
                    self.brain_radii[ax],
                    a * 100.0,
                    self.dims
                )));
            }
        }
        Ok(())
    }
}

/// Builds the phantom image and its labels: 0 background, `1..n-1` for the
/// outer tissues and 8 octant parcels of the innermost tissue.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let c = geom.center();
    let n = spec.tissue_count();
    let shell_tables: Vec<PerlinTable> = (0..n).map(|k| PerlinTable::new(hash3(spec.seed, 1, k as u64))).collect();
    let texture = PerlinTable::new(hash3(spec.seed, 2, 0));
    let base = spec.parcel_base();
    let cells: Vec<(u16, f64)> = par::map_indices(geom.len(), |i| {
        let p = geom.coords_f64(i);
        let q = [(p[0] - c[0]) / spec.brain_radii[0], (p[1] - c[1]) / spec.brain_radii[1], (p[2] - c[2]) / spec.brain_radii[2]];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let dir = if rho > 0.0 { q.map(|x| x / rho) } else { [0.0, 0.0, 1.0] };
        let mut tissue = None;
        for k in 0..n {
            let bump = spec.boundary_amplitude * perlin3(&shell_tables[k], dir, spec.boundary_frequency);
            if rho <= spec.shell_fractions[k] * (1.0 + bump) {
                tissue = Some(k);
            } else {
                break;
            }
        }
        match tissue {
            None => (0, 0.0),
            Some(k) => {
                let label = if k + 1 == n {
                    let octant = (p[0] >= c[0]) as u16 | ((p[1] >= c[1]) as u16) << 1 | ((p[2] >= c[2]) as u16) << 2;
                    base + octant
                } else {
                    k as u16 + 1
                };
                let t = 1.0 + spec.texture_amplitude * perlin3(&texture, p, spec.texture_frequency);
                (label, spec.intensities[k] * t)
            }
        }
    });
    let labels = Volume::new(geom, cells.iter().map(|c| c.0).collect())?;
    let image = Volume::new(geom, cells.iter().map(|c| c.1).collect())?;
    Ok((image, labels))
}

pub fn brain_mask(labels: &LabelVolume) -> Mask {
    labels.map(|l| l != 0)
}

/// Voxels of the innermost tissue (all parcels).
pub fn innermost_mask(labels: &LabelVolume, spec: &PhantomSpec) -> Mask {
    let base = spec.parcel_base();
    labels.map(move |l| l >= base && l < base + 8)
}

/// Smooth random deformation applied to the atlas to create a subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectSpec {
    /// Largest velocity norm in voxels; capped at 3.
    pub max_velocity: f64,
    /// Noise frequency in cycles per voxel.
    pub frequency: f64,
}

impl Default for SubjectSpec {
    fn default() -> Self {
        Self { max_velocity: 2.5, frequency: 0.05 }
    }
}

pub const SUBJECT_VELOCITY_CAP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    /// Groundtruth velocity: `image = warp(atlas, exp(velocity))`.
    pub velocity: VectorField,
}

pub fn subject_velocity(geom: GridGeometry, spec: &SubjectSpec, seed: u64) -> Result<VectorField> {
    if !(spec.max_velocity >= 0.0 && spec.max_velocity <= SUBJECT_VELOCITY_CAP) {
        return Err(Error::InvalidArgument(format!("max_velocity must be in [0, 3], got {}", spec.max_velocity)));
    }
    if !(spec.frequency > 0.0) {
        return Err(Error::InvalidArgument("subject field frequency must be positive".into()));
    }
    let tables: Vec<PerlinTable> = (0..3).map(|a| PerlinTable::new(hash3(seed, 3, a))).collect();
    let raw = VectorField::from_fn(geom, FieldKind::Velocity, |p| std::array::from_fn(|a| perlin3(&tables[a], p, spec.frequency)));
    let peak = raw.max_norm();
    Ok(if peak > 0.0 { raw.scaled(spec.max_velocity / peak) } else { raw })
}

pub fn make_subject(atlas: &ScalarVolume, atlas_labels: &LabelVolume, spec: &SubjectSpec, seed: u64) -> Result<Subject> {
    atlas.geometry().ensure_same(atlas_labels.geometry())?;
    let velocity = subject_velocity(*atlas.geometry(), spec, seed)?;
    let u = exp_velocity(&velocity, crate::field::DEFAULT_EXP_STEPS)?;
    Ok(Subject { image: atlas.warp(&u, Interp::Linear)?, labels: atlas_labels.warp(&u, Interp::Nearest)?, velocity })
}

/// `n` subjects with seeds derived from `seed`, generated in parallel.
pub fn make_cohort(atlas: &ScalarVolume, atlas_labels: &LabelVolume, spec: &SubjectSpec, n: usize, seed: u64) -> Result<Vec<Subject>> {
    let jobs: Vec<u64> = (0..n as u64).map(|k| hash3(seed, 4, k)).collect();
    par::map_jobs(jobs, |s| make_subject(atlas, atlas_labels, spec, s)).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionParams {
    /// Core center in voxel coordinates; drawn inside the innermost tissue
    /// when absent.
    pub p_lesion: Option<[f64; 3]>,
    pub core_radius: f64,
    /// Base radius of the final blob.
    pub s_final: f64,
    pub severity: f64,
    /// Core intensity relative to the surrounding tissue mean.
    pub contrast: f64,
    pub blob: BlobParams,
    /// Registration settings of the growth field; `lambda_div` must be > 0.
    pub growth_registration: RegParams,
    /// The velocity is untouched within `window_inner` voxels of the final
    /// blob and zero beyond `window_outer`.
    pub window_inner: f64,
    pub window_outer: f64,
}

impl Default for LesionParams {
    fn default() -> Self {
        Self {
            p_lesion: None,
            core_radius: 2.5,
            s_final: 5.5,
            severity: 1.0,
            contrast: 0.5,
            blob: BlobParams { amplitude: 0.2, ..BlobParams::default() },
            growth_registration: RegParams { lambda_bend: 0.1, lambda_div: 0.01, ..RegParams::default() },
            window_inner: 5.0,
            window_outer: 10.0,
        }
    }
}

/// Minimum depth of both blobs inside the brain, in voxels.
pub const BRAIN_MARGIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseParams {
    pub p_lesion: [f64; 3],
    pub core_radius: f64,
    pub s_final: f64,
    pub severity: f64,
    pub contrast: f64,
    pub seed: u64,
    /// Dice of the growth registration (final warped onto core).
    pub growth_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub healthy: ScalarVolume,
    pub core_image: ScalarVolume,
    pub lesioned: ScalarVolume,
    pub core_mask: Mask,
    pub final_mask: Mask,
    /// Maps final-lesion geometry onto core geometry:
    /// `warp(final_mask, gt_displacement) ≈ core_mask`.
    pub gt_velocity: VectorField,
    pub gt_displacement: VectorField,
    pub params: CaseParams,
}

impl SynthCase {
    /// Deformation that grows the core: `lesioned = warp(core_image, growth)`.
    pub fn growth_displacement(&self) -> Result<VectorField> {
        exp_velocity(&self.gt_velocity.negated(), crate::field::DEFAULT_EXP_STEPS)
    }
}

fn smooth_window(distance: &ScalarVolume, inner: f64, outer: f64) -> ScalarVolume {
    distance.map(move |d| {
        if d <= inner {
            1.0
        } else if d >= outer {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (d - inner) / (outer - inner)).cos())
        }
    })
}

fn pick_center(region: &Mask, brain: &Mask, reach: f64, seed: u64) -> Result<[f64; 3]> {
    let g = *region.geometry();
    let depth = squared_edt(&brain.not());
    let need = (reach + BRAIN_MARGIN).powi(2);
    let candidates: Vec<usize> = (0..g.len()).filter(|&i| region.data()[i] && depth[i] >= need).collect();
    if candidates.is_empty() {
        return Err(Error::PlacementInfeasible(format!("no innermost-tissue voxel lies {:.1} voxels inside the brain", reach + BRAIN_MARGIN)));
    }
    let mut rng = CounterRng::new(seed, 5);
    Ok(g.coords_f64(candidates[rng.below(candidates.len() as u64) as usize]))
}

/// Forward lesion model. `region` is where the lesion center may lie (the
/// innermost tissue) and `brain` the tissue mask both blobs must stay inside.
pub fn synthesize_lesion(healthy: &ScalarVolume, region: &Mask, brain: &Mask, params: &LesionParams, seed: u64) -> Result<SynthCase> {
    let g = *healthy.geometry();
    g.ensure_same(region.geometry())?;
    g.ensure_same(brain.geometry())?;
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if !(params.core_radius > 0.0 && params.s_final > params.core_radius) {
        return bad(format!("need 0 < core_radius < s_final, got {} and {}", params.core_radius, params.s_final));
    }
    if !(0.0..=1.0).contains(&params.severity) {
        return bad(format!("severity must be in [0, 1], got {}", params.severity));
    }
    if !(params.contrast >= 0.0) {
        return bad(format!("contrast must be >= 0, got {}", params.contrast));
    }
    if !(params.window_inner >= 0.0 && params.window_outer > params.window_inner) {
        return bad("need 0 <= window_inner < window_outer".into());
    }
    let a = params.blob.amplitude;
    let reach = params.s_final * (1.0 + a);
    let center = match params.p_lesion {
        Some(p) => {
            if !g.contains(p) || !region.sample_nearest(p) {
                return Err(Error::PlacementInfeasible(format!("lesion center {p:?} is not inside the innermost tissue")));
            }
            p
        }
        None => pick_center(region, brain, reach, seed)?,
    };
    let core_mesh = make_blob_mesh(center, params.core_radius, a, params.blob.frequency, hash3(seed, 6, 0), params.blob.subdivisions)?;
    let final_mesh = make_blob_mesh(center, params.s_final, a, params.blob.frequency, hash3(seed, 6, 1), params.blob.subdivisions)?;
    let core_mask = voxelize_blob(&core_mesh, &g)?;
    let final_mask = voxelize_blob(&final_mesh, &g)?;
    if !core_mask.any() {
        return Err(Error::PlacementInfeasible("core blob covers no voxel".into()));
    }
    let depth = squared_edt(&brain.not());
    let margin2 = BRAIN_MARGIN * BRAIN_MARGIN;
    for (name, m) in [("core", &core_mask), ("final", &final_mask)] {
        if m.data().iter().zip(&depth).any(|(&inside, &d)| inside && d < margin2) {
            return Err(Error::PlacementInfeasible(format!("{name} blob is closer than {BRAIN_MARGIN} voxels to the brain surface")));
        }
    }

    // darker core blended into the surrounding tissue
    let ring = dilate(&core_mask, 2.0).and(&core_mask.not())?;
    let ring_n = ring.count().max(1) as f64;
    let ring_mean = healthy.data().iter().zip(ring.data()).filter(|(_, &r)| r).map(|(v, _)| v).sum::<f64>() / ring_n;
    let target = params.contrast * ring_mean;
    let weight = core_mask.to_scalar().gaussian_smooth(CORE_EDGE_SIGMA)?;
    let core_image = Volume::new(g, par::map_indices(g.len(), |i| {
        let w = weight.data()[i];
        healthy.data()[i] + w * (target - healthy.data()[i])
    }))?;

    let growth = register_masks(&final_mask, &core_mask, &params.growth_registration)?;
    let window = smooth_window(&distance_to(&final_mask), params.window_inner, params.window_outer);
    let gt_velocity = growth.velocity.weighted(&window)?.scaled(params.severity);
    let gt_displacement = exp_velocity(&gt_velocity, crate::field::DEFAULT_EXP_STEPS)?;
    let grow = exp_velocity(&gt_velocity.negated(), crate::field::DEFAULT_EXP_STEPS)?;
    let lesioned = core_image.warp(&grow, Interp::Linear)?;
    Ok(SynthCase {
        healthy: healthy.clone(),
        core_image,
        lesioned,
        core_mask,
        final_mask,
        gt_velocity,
        gt_displacement,
        params: CaseParams {
            p_lesion: center,
            core_radius: params.core_radius,
            s_final: params.s_final,
            severity: params.severity,
            contrast: params.contrast,
            seed,
            growth_dice: growth.mask_dice,
        },
    })
}

/// Width of the Gaussian edge blending the core into healthy tissue.
pub const CORE_EDGE_SIGMA: f64 = 0.7;

/// Jacobian determinants pooled from healthy registrations.
#[derive(Clone, Debug, PartialEq)]
pub struct NormativeJacobianPool {
    /// Sorted ascending.
    samples: Vec<f32>,
    pub meta: PoolMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub subjects: usize,
    pub interior_voxels: usize,
    pub seeds: Vec<u64>,
    pub reg_params: RegParams,
    /// Percentiles 1 through 99.
    pub percentiles: Vec<f64>,
}

impl NormativeJacobianPool {
    pub fn from_samples(mut samples: Vec<f32>, subjects: usize, interior_voxels: usize, seeds: Vec<u64>, reg_params: RegParams) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("pool samples must be finite and nonempty".into()));
        }
        if samples.len() != subjects * interior_voxels {
            return Err(Error::InvalidArgument(format!(
                "pool holds {} samples, expected {subjects} x {interior_voxels}",
                samples.len()
            )));
        }
        samples.sort_by(f32::total_cmp);
        let percentiles = (1..=99).map(|p| percentile_sorted(&samples, p as f64)).collect();
        Ok(Self { samples, meta: PoolMeta { subjects, interior_voxels, seeds, reg_params, percentiles } })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// Linear-interpolated percentile, `0 <= p <= 100`.
    pub fn percentile(&self, p: f64) -> Result<f64> {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
        }
        Ok(percentile_sorted(&self.samples, p))
    }

    /// Writes `<stem>.bin` (little-endian float32 samples) and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let bytes: Vec<u8> = self.samples.iter().flat_map(|s| s.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let meta: PoolMeta = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::TruncatedPayload { expected: bytes.len().div_ceil(4) * 4, found: bytes.len() });
        }
        let samples = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::from_samples(samples, meta.subjects, meta.interior_voxels, meta.seeds, meta.reg_params)
    }
}

fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - f) + sorted[hi] as f64 * f
}

/// Registers the atlas onto every subject and pools interior Jacobian
/// determinants. Registrations run in parallel; pooling keeps subject order.
pub fn build_normative_pool(atlas: &ScalarVolume, subjects: &[ScalarVolume], seeds: Vec<u64>, reg: &RegParams) -> Result<NormativeJacobianPool> {
    if subjects.len() < 5 {
        return Err(Error::InvalidArgument(format!("a normative pool needs at least 5 subjects, got {}", subjects.len())));
    }
    for s in subjects {
        atlas.geometry().ensure_same(s.geometry())?;
    }
    let per_subject: Vec<Result<Vec<f64>>> = par::map_jobs(subjects.iter().collect(), |s| {
        let r = register(atlas, s, reg)?;
        Ok(jacobian_determinant(&r.displacement)?.interior_values())
    });
    let mut samples = Vec::new();
    for r in per_subject {
        samples.extend(r?.into_iter().map(|v| v as f32));
    }
    NormativeJacobianPool::from_samples(samples, subjects.len(), atlas.geometry().interior_count(), seeds, reg.clone())
}
