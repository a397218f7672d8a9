//! Pairwise deformable registration with a stationary velocity field.
//!
//! The optimizer is log-domain demons: a Thirion force on the warped image is
//! clamped, fluid-smoothed and subtracted from the velocity, followed by a
//! diffusion smoothing pass and explicit gradient steps on the bending and
//! divergence penalties. Two or more pyramid levels run coarse to fine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    self, bending_energy, bending_gradient, divergence_penalty_gradient, exp_velocity, jacobian_determinant,
    mean_sq_divergence, smooth_field, FieldKind, Interp, VectorField, Warp, BENDING_LIPSCHITZ, DIVERGENCE_LIPSCHITZ,
};
use crate::metrics::dice;
use crate::noise::signed_distance;
use crate::par;
use crate::volume::{Mask, ScalarVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegMode {
    #[default]
    Intensity,
    /// Inputs are signed distance maps of masks.
    Sdf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegParams {
    pub lambda_bend: f64,
    pub lambda_div: f64,
    /// Iteration budget per pyramid level.
    pub iterations: usize,
    /// Max force norm per iteration, in voxels.
    pub step: f64,
    pub fluid_sigma: f64,
    pub diffusion_sigma: f64,
    pub pyramid_levels: usize,
    pub exp_steps: usize,
    pub mode: RegMode,
    pub seed: u64,
}

impl Default for RegParams {
    fn default() -> Self {
        Self {
            lambda_bend: 1.0,
            lambda_div: 0.0,
            iterations: 300,
            step: 0.5,
            fluid_sigma: 1.5,
            diffusion_sigma: 1.0,
            pyramid_levels: 2,
            exp_steps: field::DEFAULT_EXP_STEPS,
            mode: RegMode::Intensity,
            seed: 0,
        }
    }
}

impl RegParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda_bend >= 0.0 && self.lambda_bend.is_finite()) {
            return bad(format!("lambda_bend must be >= 0, got {}", self.lambda_bend));
        }
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return bad(format!("lambda_div must be >= 0, got {}", self.lambda_div));
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad(format!("step must be > 0, got {}", self.step));
        }
        if !(self.fluid_sigma >= 0.0 && self.diffusion_sigma >= 0.0) {
            return bad("smoothing sigmas must be >= 0".into());
        }
        if !(1..=4).contains(&self.pyramid_levels) {
            return bad(format!("pyramid_levels must be in 1..=4, got {}", self.pyramid_levels));
        }
        if !(1..=12).contains(&self.exp_steps) {
            return bad(format!("exp_steps must be in 1..=12, got {}", self.exp_steps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub bend: f64,
    pub div: f64,
}

/// One optimizer iteration. Level 0 is the finest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    pub data: f64,
    pub bend: f64,
    pub div: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegResult {
    pub velocity: VectorField,
    pub displacement: VectorField,
    pub loss_trace: Vec<LossRecord>,
    pub converged: bool,
    /// Dice between the warped moving mask and the fixed mask (mask mode).
    pub mask_dice: Option<f64>,
}

impl RegResult {
    pub fn final_loss(&self) -> &LossRecord {
        self.loss_trace.last().expect("trace is never empty")
    }

    /// Records of one pyramid level in iteration order.
    pub fn level_trace(&self, level: usize) -> Vec<LossRecord> {
        self.loss_trace.iter().filter(|r| r.level == level).copied().collect()
    }
}

fn mse(a: &ScalarVolume, b: &ScalarVolume) -> f64 {
    let (x, y) = (a.data(), b.data());
    par::sum_indices(x.len(), |i| (x[i] - y[i]).powi(2)) / x.len() as f64
}

fn terms(v: &VectorField, u: &VectorField, warped: &ScalarVolume, fixed: &ScalarVolume, p: &RegParams) -> Result<LossTerms> {
    let data = mse(warped, fixed);
    let bend = bending_energy(u)?;
    let div = mean_sq_divergence(v)?;
    let total = data + p.lambda_bend * bend + p.lambda_div * div;
    if !total.is_finite() {
        return Err(Error::NonFinite("registration loss".into()));
    }
    Ok(LossTerms { total, data, bend, div })
}

/// Total loss of velocity `v` and its parts.
pub fn registration_loss(v: &VectorField, moving: &ScalarVolume, fixed: &ScalarVolume, params: &RegParams) -> Result<LossTerms> {
    moving.geometry().ensure_same(fixed.geometry())?;
    v.geometry().ensure_same(fixed.geometry())?;
    let u = exp_velocity(v, params.exp_steps)?;
    let warped = moving.warp(&u, Interp::Linear)?;
    terms(v, &u, &warped, fixed, params)
}

/// Gradient of the mean squared data term with respect to a displacement
/// used directly (no exponential): `2 (m(x+u) - f) ∇m(x+u) / N`.
pub fn loss_gradient_smalldisp(u: &VectorField, moving: &ScalarVolume, fixed: &ScalarVolume) -> Result<VectorField> {
    moving.geometry().ensure_same(fixed.geometry())?;
    u.geometry().ensure_same(fixed.geometry())?;
    let g = *fixed.geometry();
    let n = g.len() as f64;
    let (ud, fd) = (u.data(), fixed.data());
    let data = par::map_indices(g.len(), |i| {
        let x = g.coords_f64(i);
        let p = [x[0] + ud[i][0], x[1] + ud[i][1], x[2] + ud[i][2]];
        let r = 2.0 * (moving.sample(p) - fd[i]) / n;
        moving.sample_gradient(p).map(|d| r * d)
    });
    VectorField::new(g, u.kind(), data)
}

/// Clamped Thirion force on the current warp.
fn demons_force(it: &Iterate, fixed: &ScalarVolume, max_norm: f64) -> Result<VectorField> {
    let grad = it.warped.spatial_gradient()?;
    let (w, f) = (it.warped.data(), fixed.data());
    let data = par::map_indices(w.len(), |i| {
        let diff = w[i] - f[i];
        let gv = [grad[0].data()[i], grad[1].data()[i], grad[2].data()[i]];
        let g2 = gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2];
        let denom = g2 + diff * diff;
        if denom < 1e-12 {
            return [0.0; 3];
        }
        let mut force = gv.map(|c| diff * c / denom);
        let n = field::norm(force);
        if n > max_norm {
            force = force.map(|c| c * max_norm / n);
        }
        force
    });
    VectorField::new(*fixed.geometry(), FieldKind::Velocity, data)
}

const CONVERGENCE_WINDOW: usize = 20;
const CONVERGENCE_TOL: f64 = 1e-5;

fn plateaued(trace: &[LossRecord]) -> bool {
    if trace.len() <= CONVERGENCE_WINDOW {
        return false;
    }
    let now = trace[trace.len() - 1].total;
    let then = trace[trace.len() - 1 - CONVERGENCE_WINDOW].total;
    (then - now) <= CONVERGENCE_TOL * then.abs().max(1e-300)
}

struct Iterate {
    v: VectorField,
    warped: ScalarVolume,
    terms: LossTerms,
}

fn evaluate(v: VectorField, moving: &ScalarVolume, fixed: &ScalarVolume, p: &RegParams) -> Result<Iterate> {
    let u = exp_velocity(&v, p.exp_steps)?;
    let warped = moving.warp(&u, Interp::Linear)?;
    let terms = terms(&v, &u, &warped, fixed, p)?;
    Ok(Iterate { v, warped, terms })
}

/// Optional diffusion smoothing followed by one explicit step on the
/// regularizers.
fn regularize(v: &VectorField, p: &RegParams, tau: f64, smooth: bool) -> Result<VectorField> {
    let v = if smooth { smooth_field(v, p.diffusion_sigma)? } else { v.clone() };
    if p.lambda_bend == 0.0 && p.lambda_div == 0.0 {
        return Ok(v);
    }
    // the velocity stands in for its exponential here; acceptance is still
    // judged on the exact loss
    let gb = if p.lambda_bend > 0.0 { Some(bending_gradient(&v)?) } else { None };
    let gd = if p.lambda_div > 0.0 { Some(divergence_penalty_gradient(&v)?) } else { None };
    let (lb, ld) = (p.lambda_bend, p.lambda_div);
    let vd = v.data();
    let data = par::map_indices(vd.len(), |i| {
        let mut s = vd[i];
        for (a, c) in s.iter_mut().enumerate() {
            let b = gb.as_ref().map_or(0.0, |g| g.data()[i][a]);
            let d = gd.as_ref().map_or(0.0, |g| g.data()[i][a]);
            *c -= tau * (lb * b + ld * d);
        }
        s
    });
    VectorField::new(*v.geometry(), FieldKind::Velocity, data)
}

// Force scales tried before falling back to a regularizer-only step.
const FORCE_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

/// Runs one pyramid level. Candidate updates are accepted only when they
/// lower the total loss, so the recorded trace is nonincreasing.
fn run_level(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    v: VectorField,
    level: usize,
    p: &RegParams,
    trace: &mut Vec<LossRecord>,
) -> Result<(VectorField, bool)> {
    let tau = 1.0f64.min(1.0 / (p.lambda_bend * BENDING_LIPSCHITZ + p.lambda_div * DIVERGENCE_LIPSCHITZ).max(1e-300));
    let start = trace.len();
    let diverged = |it: usize| move |_| Error::RegistrationDiverged(it);
    let mut cur = evaluate(v, moving, fixed, p).map_err(diverged(0))?;
    let record = |trace: &mut Vec<LossRecord>, it: usize, t: &LossTerms| {
        trace.push(LossRecord { level, iteration: it, total: t.total, data: t.data, bend: t.bend, div: t.div })
    };
    record(trace, 0, &cur.terms);
    let mut converged = false;
    let mut smoothing = true;
    for it in 1..=p.iterations {
        if plateaued(&trace[start..]) {
            converged = true;
            break;
        }
        let force = smooth_field(&demons_force(&cur, fixed, p.step)?, p.fluid_sigma)?;
        let mut next = None;
        // smoothing is not a descent step on the loss, so once it stalls the
        // plain gradient steps take over for the rest of the level
        let modes: &[bool] = if smoothing { &[true, false] } else { &[false] };
        'search: for &smooth in modes {
            for s in FORCE_SCALES {
                let cand = regularize(&field::add(&cur.v, &force.scaled(-s))?, p, tau, smooth).map_err(diverged(it))?;
                let eval = evaluate(cand, moving, fixed, p).map_err(diverged(it))?;
                if eval.terms.total < cur.terms.total {
                    next = Some(eval);
                    smoothing = smooth;
                    break 'search;
                }
            }
        }
        match next {
            Some(n) => cur = n,
            None => {
                // the force no longer helps: take a last regularizer step if
                // it lowers the loss, then stop
                let eval = evaluate(regularize(&cur.v, p, tau, false)?, moving, fixed, p).map_err(diverged(it))?;
                if eval.terms.total < cur.terms.total {
                    cur = eval;
                    record(trace, it, &cur.terms);
                }
                converged = true;
                break;
            }
        }
        record(trace, it, &cur.terms);
    }
    Ok((cur.v, converged))
}

/// Registers `moving` onto `fixed`: the returned displacement `u` makes
/// `moving(x + u(x))` match `fixed(x)`.
pub fn register(moving: &ScalarVolume, fixed: &ScalarVolume, params: &RegParams) -> Result<RegResult> {
    params.validate()?;
    moving.geometry().ensure_same(fixed.geometry())?;
    for (name, vol) in [("moving", moving), ("fixed", fixed)] {
        if vol.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} image")));
        }
    }
    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    while pyramid.len() < params.pyramid_levels {
        let (m, f) = pyramid.last().unwrap();
        if m.dims().iter().any(|&d| d < 16) {
            break;
        }
        pyramid.push((m.downsample2(), f.downsample2()));
    }
    let mut trace = Vec::new();
    let coarsest = pyramid.len() - 1;
    let mut v = VectorField::zeros(*pyramid[coarsest].0.geometry(), FieldKind::Velocity);
    let mut converged = false;
    for level in (0..=coarsest).rev() {
        let (m, f) = &pyramid[level];
        if v.geometry() != m.geometry() {
            v = field::upsample2(&v, *m.geometry());
        }
        let (next, c) = run_level(m, f, v, level, params, &mut trace)?;
        v = next;
        converged = c;
    }
    let displacement = exp_velocity(&v, params.exp_steps)?;
    Ok(RegResult { velocity: v, displacement, loss_trace: trace, converged, mask_dice: None })
}

/// Signed distances are clamped to this many voxels before mask registration,
/// so the far field, which no smooth map can match, exerts no force.
pub const SDF_BAND: f64 = 4.0;

/// Registers the signed distance map of `moving` onto that of `fixed` with
/// the divergence penalty active. `mask_dice` is filled with
/// `Dice(warp(moving, u), fixed)`.
pub fn register_masks(moving: &Mask, fixed: &Mask, params: &RegParams) -> Result<RegResult> {
    moving.geometry().ensure_same(fixed.geometry())?;
    if !moving.any() || !fixed.any() {
        return Err(Error::EmptyMask("mask registration input".into()));
    }
    if params.lambda_div <= 0.0 {
        return Err(Error::InvalidArgument("mask registration needs lambda_div > 0".into()));
    }
    register_mask_distances(moving, fixed, params)
}

/// [`register_masks`] without the incompressibility requirement; used for
/// ablation runs.
pub fn register_mask_distances(moving: &Mask, fixed: &Mask, params: &RegParams) -> Result<RegResult> {
    moving.geometry().ensure_same(fixed.geometry())?;
    if !moving.any() || !fixed.any() {
        return Err(Error::EmptyMask("mask registration input".into()));
    }
    let p = RegParams { mode: RegMode::Sdf, ..params.clone() };
    let band = |m: &Mask| -> Result<ScalarVolume> { Ok(signed_distance(m)?.map(|d| d.clamp(-SDF_BAND, SDF_BAND))) };
    let mut r = register(&band(moving)?, &band(fixed)?, &p)?;
    r.mask_dice = Some(dice(&moving.warp(&r.displacement, Interp::Nearest)?, fixed)?);
    Ok(r)
}

/// Minimum interior Jacobian determinant of a result's displacement.
pub fn min_jacobian(r: &RegResult) -> Result<f64> {
    Ok(jacobian_determinant(&r.displacement)?.min_interior())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;
    use crate::volume::{GridGeometry, Volume};

    fn g(n: usize) -> GridGeometry {
        GridGeometry::with_dims([n, n, n]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let geom = g(8);
        let f = ScalarVolume::from_fn(geom, |c| (c[0] as f64 * 0.3).sin() + c[2] as f64 * 0.1);
        let v0 = VectorField::zeros(geom, FieldKind::Velocity);
        let p = RegParams::default();
        assert_eq!(registration_loss(&v0, &f, &f, &p).unwrap().total, 0.0);
        let shifted = f.map(|x| x + 1.0);
        let t = registration_loss(&v0, &shifted, &f, &p).unwrap();
        assert!((t.data - 1.0).abs() < 1e-12 && t.bend == 0.0 && t.div == 0.0);
        let v = VectorField::from_fn(geom, FieldKind::Velocity, |c| {
            [0.3 * (c[1] * 0.7).sin(), 0.2 * (c[0] * 0.5).cos(), 0.0]
        });
        let t = registration_loss(&v, &f, &f, &p).unwrap();
        assert!(t.data > 0.0 && t.bend > 0.0 && t.total > 0.0);
        let other = ScalarVolume::zeros(g(9));
        assert!(registration_loss(&v0, &f, &other, &p).is_err());
    }

    #[test]
    fn smalldisp_gradient_matches_finite_differences() {
        let geom = g(8);
        let m = ScalarVolume::from_fn(geom, |c| uniform(4, 0, geom.index(c[0], c[1], c[2]) as u64));
        let f = ScalarVolume::from_fn(geom, |c| uniform(5, 0, geom.index(c[0], c[1], c[2]) as u64));
        let u = VectorField::from_fn(geom, FieldKind::Displacement, |c| {
            let i = geom.index(c[0] as usize, c[1] as usize, c[2] as usize) as u64;
            [0.8 * uniform(6, 0, i) - 0.4, 0.8 * uniform(6, 1, i) - 0.4, 0.8 * uniform(6, 2, i) - 0.4]
        });
        let grad = loss_gradient_smalldisp(&u, &m, &f).unwrap();
        let data_loss = |u: &VectorField| mse(&m.warp(u, Interp::Linear).unwrap(), &f);
        let h = 1e-6;
        for k in 0..20u64 {
            let i = (uniform(7, 0, k) * geom.len() as f64) as usize;
            for a in 0..3 {
                let bump = |s: f64| {
                    let mut d = u.data().to_vec();
                    d[i][a] += s;
                    VectorField::new(geom, FieldKind::Displacement, d).unwrap()
                };
                let fd = (data_loss(&bump(h)) - data_loss(&bump(-h))) / (2.0 * h);
                let an = grad.data()[i][a];
                assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "voxel {i} axis {a}: {fd} vs {an}");
            }
        }
        assert!(loss_gradient_smalldisp(&VectorField::zeros(geom, FieldKind::Displacement), &m, &m)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == [0.0; 3]));
        let flat = ScalarVolume::filled(geom, 0.3);
        assert!(loss_gradient_smalldisp(&u, &flat, &f).unwrap().data().iter().all(|v| v.iter().all(|c| c.abs() < 1e-15)));
    }

    fn blob_image(geom: GridGeometry, shift: [f64; 3]) -> ScalarVolume {
        let c = geom.center();
        Volume::from_fn(geom, |p| {
            let x = [p[0] as f64 + shift[0] - c[0], p[1] as f64 + shift[1] - c[1], p[2] as f64 + shift[2] - c[2]];
            let r2 = x[0] * x[0] / 30.0 + x[1] * x[1] / 20.0 + x[2] * x[2] / 25.0;
            (-r2).exp() + 0.5 * (-((x[0] - 3.0).powi(2) + (x[1] + 2.0).powi(2) + x[2].powi(2)) / 6.0).exp()
        })
    }

    #[test]
    fn identical_images_give_near_zero_field() {
        let geom = g(20);
        let f = blob_image(geom, [0.0; 3]);
        let r = register(&f, &f, &RegParams { iterations: 40, ..Default::default() }).unwrap();
        assert!(r.displacement.max_norm() <= 0.1);
        assert!(!r.loss_trace.is_empty());
    }

    #[test]
    fn recovers_translation() {
        let geom = GridGeometry::default();
        let fixed = shells(geom, [0.0; 3]);
        let moving = shells(geom, [2.0, 0.0, 0.0]);
        let p = RegParams { iterations: 80, fluid_sigma: 3.0, diffusion_sigma: 2.0, ..Default::default() };
        let r = register(&moving, &fixed, &p).unwrap();
        let interior: Mask = fixed.map(|x| x > 0.2);
        let mean = r.displacement.mean_over(&interior).unwrap();
        assert!((mean[0] + 2.0).abs() < 0.5 && mean[1].abs() < 0.5 && mean[2].abs() < 0.5, "{mean:?}");
        for level in 0..2 {
            let t = r.level_trace(level);
            assert!(t.last().unwrap().total <= t[0].total, "level {level}");
        }
        let initial = registration_loss(&VectorField::zeros(geom, FieldKind::Velocity), &moving, &fixed, &p).unwrap();
        assert!(r.final_loss().data <= 0.2 * initial.data);
        assert!(min_jacobian(&r).unwrap() > 0.0);

        let back = register(&fixed, &moving, &p).unwrap();
        let m2 = back.displacement.mean_over(&interior).unwrap();
        assert!((m2[0] + mean[0]).abs() < 0.5, "{m2:?} vs {mean:?}");
    }

    fn shells(geom: GridGeometry, shift: [f64; 3]) -> ScalarVolume {
        let c = geom.center();
        Volume::from_fn(geom, |p| {
            let x = [p[0] as f64 + shift[0] - c[0], p[1] as f64 + shift[1] - c[1], p[2] as f64 + shift[2] - c[2]];
            let r = (x[0] * x[0] / 1.2 + x[1] * x[1] + x[2] * x[2] / 0.8).sqrt() + 1.5 * (x[0] * 0.3).sin() * (x[1] * 0.25).cos();
            if r < 9.0 { 1.0 } else if r < 13.0 { 0.6 } else if r < 16.0 { 0.3 } else { 0.0 }
        })
        .gaussian_smooth(0.8)
        .unwrap()
    }

    #[test]
    fn concentric_spheres() {
        let geom = g(24);
        let c = geom.center();
        let ball = |r: f64| -> Mask {
            Volume::from_fn(geom, |p| {
                let d = [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= r
            })
        };
        let (core, fin) = (ball(3.0), ball(6.0));
        let p = RegParams { lambda_div: 0.1, iterations: 300, ..Default::default() };
        let r = register_masks(&fin, &core, &p).unwrap();
        assert!(r.mask_dice.unwrap() >= 0.9, "{:?}", r.mask_dice);
        assert!(min_jacobian(&r).unwrap() > 0.0);
        let same = register_masks(&core, &core, &p).unwrap();
        assert!(same.displacement.max_norm() <= 0.1);
        assert!(register_masks(&Volume::filled(geom, false), &core, &p).is_err());
        assert!(register_masks(&fin, &core, &RegParams::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let geom = g(16);
        let fixed = blob_image(geom, [0.0; 3]);
        let moving = blob_image(geom, [1.0, -0.5, 0.0]);
        let p = RegParams { iterations: 20, ..Default::default() };
        assert_eq!(register(&moving, &fixed, &p).unwrap(), register(&moving, &fixed, &p).unwrap());
    }

    #[test]
    fn params_validation() {
        assert!(RegParams { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(RegParams { fluid_sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(RegParams { lambda_bend: -1.0, ..Default::default() }.validate().is_err());
        assert!(RegParams::default().validate().is_ok());
    }
}
