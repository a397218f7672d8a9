//! Velocity and displacement fields in voxel units.
//!
//! Displacements follow the pull-back convention: warping `vol` by `d` gives
//! `out(x) = vol(x + d(x))`. Velocities are stationary and become
//! displacements through scaling and squaring.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{read_nifti, write_nifti};
use crate::par;
use crate::volume::{nearest_index, GridGeometry, LabelVolume, Mask, ScalarVolume, Trilinear, Volume};

pub const DEFAULT_EXP_STEPS: usize = 6;
const INVERT_MAX_ITER: usize = 50;
const INVERT_TOL: f64 = 1e-3;

/// Bound on the operator norm of the bending-energy density gradient.
pub const BENDING_LIPSCHITZ: f64 = 108.0;
/// Bound on the operator norm of the squared-divergence density gradient.
pub const DIVERGENCE_LIPSCHITZ: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FieldKind {
    Velocity,
    Displacement,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Velocity => "VELOCITY",
            FieldKind::Displacement => "DISPLACEMENT",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    geom: GridGeometry,
    kind: FieldKind,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(geom: GridGeometry, kind: FieldKind, data: Vec<[f64; 3]>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Geometry(format!("field length {} does not match dims {:?}", data.len(), geom.dims)));
        }
        if data.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite("vector field component".into()));
        }
        Ok(Self { geom, kind, data })
    }

    pub fn zeros(geom: GridGeometry, kind: FieldKind) -> Self {
        Self { geom, kind, data: vec![[0.0; 3]; geom.len()] }
    }

    pub fn from_fn<F>(geom: GridGeometry, kind: FieldKind, f: F) -> Self
    where
        F: Fn([f64; 3]) -> [f64; 3] + Sync + Send,
    {
        let data = par::map_indices(geom.len(), |i| f(geom.coords_f64(i)));
        Self { geom, kind, data }
    }

    pub fn from_components(kind: FieldKind, comps: [&ScalarVolume; 3]) -> Result<Self> {
        let geom = *comps[0].geometry();
        comps[1].geometry().ensure_same(&geom)?;
        comps[2].geometry().ensure_same(&geom)?;
        let data = (0..geom.len()).map(|i| [comps[0].data()[i], comps[1].data()[i], comps[2].data()[i]]).collect();
        Self::new(geom, kind, data)
    }

    #[inline]
    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    #[inline]
    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    #[inline]
    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn component(&self, axis: usize) -> ScalarVolume {
        Volume::new(self.geom, self.data.iter().map(|v| v[axis]).collect()).expect("same geometry")
    }

    /// Trilinear sample with edge clamping.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        Trilinear::new(&self.geom, p).apply3(&self.data)
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    /// Mean vector over voxels selected by `mask`.
    pub fn mean_over(&self, mask: &Mask) -> Option<[f64; 3]> {
        let mut s = [0.0; 3];
        let mut n = 0usize;
        for (v, &m) in self.data.iter().zip(mask.data()) {
            if m {
                for a in 0..3 {
                    s[a] += v[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| s.map(|x| x / n as f64))
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        let data = par::map_slice(&self.data, |v| [v[0] * s, v[1] * s, v[2] * s]);
        Self { geom: self.geom, kind: self.kind, data }
    }

    pub fn negated(&self) -> VectorField {
        self.scaled(-1.0)
    }

    /// Same data, new kind tag.
    pub fn retagged(self, kind: FieldKind) -> VectorField {
        Self { kind, ..self }
    }

    /// Voxelwise multiplication by a scalar weight map.
    pub fn weighted(&self, w: &ScalarVolume) -> Result<VectorField> {
        self.geom.ensure_same(w.geometry())?;
        let wd = w.data();
        let data = par::map_indices(self.data.len(), |i| self.data[i].map(|c| c * wd[i]));
        Ok(Self { geom: self.geom, kind: self.kind, data })
    }

    fn expect_kind(&self, kind: FieldKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::FieldKind { expected: kind.name(), got: self.kind.name() })
        }
    }
}

#[inline]
pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `(d1 ∘ d2)(x) = d2(x) + d1(x + d2(x))`.
pub fn compose(d1: &VectorField, d2: &VectorField) -> Result<VectorField> {
    d1.expect_kind(FieldKind::Displacement)?;
    d2.expect_kind(FieldKind::Displacement)?;
    d1.geom.ensure_same(&d2.geom)?;
    Ok(compose_unchecked(d1, d2))
}

fn compose_unchecked(d1: &VectorField, d2: &VectorField) -> VectorField {
    let g = d1.geom;
    let data = par::map_indices(g.len(), |i| {
        let x = g.coords_f64(i);
        let u = d2.data[i];
        let w = d1.sample([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
        [u[0] + w[0], u[1] + w[1], u[2] + w[2]]
    });
    VectorField { geom: g, kind: FieldKind::Displacement, data }
}

/// Scaling and squaring: `u = v / 2^steps`, then `u <- u ∘ u` `steps` times.
pub fn exp_velocity(v: &VectorField, steps: usize) -> Result<VectorField> {
    v.expect_kind(FieldKind::Velocity)?;
    if steps < 1 {
        return Err(Error::InvalidArgument("exp_velocity needs steps >= 1".into()));
    }
    let mut u = v.scaled(1.0 / (1u64 << steps) as f64).retagged(FieldKind::Displacement);
    for _ in 0..steps {
        u = compose_unchecked(&u, &u);
    }
    Ok(u)
}

/// Inverse deformation as a displacement field.
///
/// Velocities invert exactly as `exp(-v)`. Displacements solve the fixed point
/// `w(x) = -u(x + w(x))` voxel by voxel with a damped Newton iteration; points
/// that cannot be matched (folds, or targets outside the warped grid) report
/// [`Error::InversionDiverged`].
pub fn invert(f: &VectorField) -> Result<VectorField> {
    match f.kind {
        FieldKind::Velocity => exp_velocity(&f.negated(), DEFAULT_EXP_STEPS),
        FieldKind::Displacement => invert_displacement(f),
    }
}

fn invert_displacement(u: &VectorField) -> Result<VectorField> {
    let g = u.geom;
    let comps = [u.component(0), u.component(1), u.component(2)];
    // per voxel, solve y + u(y) = x by Newton's method starting from x - u(x)
    let solved: Vec<([f64; 3], f64)> = par::map_indices(g.len(), |i| {
        let x = g.coords_f64(i);
        let ux = u.data[i];
        let mut y = [x[0] - ux[0], x[1] - ux[1], x[2] - ux[2]];
        let residual = |y: [f64; 3]| {
            let s = u.sample(y);
            [y[0] + s[0] - x[0], y[1] + s[1] - x[1], y[2] + s[2] - x[2]]
        };
        let mut r = residual(y);
        for _ in 0..INVERT_MAX_ITER {
            let rn = norm(r);
            if rn < INVERT_TOL {
                break;
            }
            let mut jac = [[0.0; 3]; 3];
            for (a, row) in jac.iter_mut().enumerate() {
                *row = comps[a].sample_gradient(y);
                row[a] += 1.0;
            }
            let Some(step) = solve3(jac, r) else { break };
            // halve the step until the residual shrinks
            let mut t = 1.0;
            loop {
                let cand = [y[0] - t * step[0], y[1] - t * step[1], y[2] - t * step[2]];
                let rc = residual(cand);
                if norm(rc) < rn || t < 1e-3 {
                    y = cand;
                    r = rc;
                    break;
                }
                t *= 0.5;
            }
        }
        ([y[0] - x[0], y[1] - x[1], y[2] - x[2]], norm(r))
    });
    let worst = solved.iter().map(|s| s.1).fold(0.0, f64::max);
    if worst >= INVERT_TOL {
        return Err(Error::InversionDiverged { iterations: INVERT_MAX_ITER, last_update: worst });
    }
    Ok(VectorField { geom: g, kind: u.kind, data: solved.into_iter().map(|s| s.0).collect() })
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let col = |k: usize| {
        let mut c = m;
        for r in 0..3 {
            c[r][k] = b[r];
        }
        c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
            + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
    };
    Some([col(0) / det, col(1) / det, col(2) / det])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Interp {
    Linear,
    Nearest,
}

/// Pull-back resampling through a displacement field.
pub trait Warp: Sized {
    fn warp(&self, d: &VectorField, interp: Interp) -> Result<Self>;
}

fn check_warp(geom: &GridGeometry, d: &VectorField) -> Result<()> {
    d.expect_kind(FieldKind::Displacement)?;
    geom.ensure_same(&d.geom)
}

impl Warp for ScalarVolume {
    fn warp(&self, d: &VectorField, interp: Interp) -> Result<Self> {
        check_warp(self.geometry(), d)?;
        let g = *self.geometry();
        Ok(match interp {
            Interp::Linear => Volume::from_fn(g, |c| {
                let u = d.data[g.index(c[0], c[1], c[2])];
                self.sample([c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]])
            }),
            Interp::Nearest => warp_nearest(self, d),
        })
    }
}

fn warp_nearest<T: Copy + Send + Sync>(vol: &Volume<T>, d: &VectorField) -> Volume<T> {
    let g = *vol.geometry();
    Volume::from_fn(g, |c| {
        let u = d.data[g.index(c[0], c[1], c[2])];
        vol.data()[nearest_index(&g, [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]])]
    })
}

impl Warp for LabelVolume {
    fn warp(&self, d: &VectorField, interp: Interp) -> Result<Self> {
        check_warp(self.geometry(), d)?;
        match interp {
            Interp::Nearest => Ok(warp_nearest(self, d)),
            Interp::Linear => Err(Error::InvalidArgument("linear interpolation is not defined for labels".into())),
        }
    }
}

impl Warp for Mask {
    fn warp(&self, d: &VectorField, interp: Interp) -> Result<Self> {
        check_warp(self.geometry(), d)?;
        match interp {
            Interp::Nearest => Ok(warp_nearest(self, d)),
            Interp::Linear => Err(Error::InvalidArgument("linear interpolation is not defined for masks".into())),
        }
    }
}

pub fn warp<V: Warp>(vol: &V, d: &VectorField, interp: Interp) -> Result<V> {
    vol.warp(d, interp)
}

/// Local volume ratio `det(I + ∇d)` per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap(pub ScalarVolume);

impl JacobianMap {
    pub fn volume(&self) -> &ScalarVolume {
        &self.0
    }

    /// Determinants at interior voxels, in storage order.
    pub fn interior_values(&self) -> Vec<f64> {
        let g = self.0.geometry();
        self.0.data().iter().enumerate().filter(|(i, _)| g.is_interior(g.coords(*i))).map(|(_, &v)| v).collect()
    }

    pub fn min_interior(&self) -> f64 {
        self.interior_values().into_iter().fold(f64::INFINITY, f64::min)
    }
}

fn strides(g: &GridGeometry) -> [usize; 3] {
    [1, g.dims[0], g.dims[0] * g.dims[1]]
}

fn require_dims(g: &GridGeometry, min: usize, what: &str) -> Result<()> {
    if g.dims.iter().any(|&d| d < min) {
        return Err(Error::Geometry(format!("{what} needs dims >= {min}, got {:?}", g.dims)));
    }
    Ok(())
}

/// Index of the nearest interior voxel.
#[inline]
fn clamp_interior(g: &GridGeometry, i: usize) -> usize {
    let c = g.coords(i);
    let cc: [usize; 3] = std::array::from_fn(|a| c[a].clamp(1, g.dims[a] - 2));
    g.index(cc[0], cc[1], cc[2])
}

/// Central-difference Jacobian determinant; faces copy the nearest interior voxel.
pub fn jacobian_determinant(d: &VectorField) -> Result<JacobianMap> {
    let g = d.geom;
    require_dims(&g, 3, "jacobian_determinant")?;
    let s = strides(&g);
    let data = par::map_indices(g.len(), |i| {
        let j = clamp_interior(&g, i);
        // m[r][c] = ∂d_r / ∂x_c
        let mut m = [[0.0; 3]; 3];
        for c in 0..3 {
            let p = d.data[j + s[c]];
            let q = d.data[j - s[c]];
            for r in 0..3 {
                m[r][c] = 0.5 * (p[r] - q[r]);
            }
        }
        for r in 0..3 {
            m[r][r] += 1.0;
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    });
    Ok(JacobianMap(Volume::new(g, data)?))
}

/// Central-difference divergence; faces copy the nearest interior voxel.
pub fn divergence(f: &VectorField) -> Result<ScalarVolume> {
    let g = f.geom;
    require_dims(&g, 3, "divergence")?;
    let s = strides(&g);
    let data = par::map_indices(g.len(), |i| {
        let j = clamp_interior(&g, i);
        (0..3).map(|a| 0.5 * (f.data[j + s[a]][a] - f.data[j - s[a]][a])).sum()
    });
    Volume::new(g, data)
}

/// Mean of squared divergence over interior voxels.
pub fn mean_sq_divergence(f: &VectorField) -> Result<f64> {
    let g = f.geom;
    require_dims(&g, 3, "divergence")?;
    let s = strides(&g);
    let n = g.interior_count();
    let total = par::sum_indices(g.len(), |i| {
        if !g.is_interior(g.coords(i)) {
            return 0.0;
        }
        let dv: f64 = (0..3).map(|a| 0.5 * (f.data[i + s[a]][a] - f.data[i - s[a]][a])).sum();
        dv * dv
    });
    Ok(total / n as f64)
}

/// Variational gradient (per-voxel density, i.e. interior count times the
/// gradient of the mean) of [`mean_sq_divergence`].
pub fn divergence_penalty_gradient(f: &VectorField) -> Result<VectorField> {
    let g = f.geom;
    require_dims(&g, 3, "divergence")?;
    let s = strides(&g);
    let div: Vec<f64> = par::map_indices(g.len(), |i| {
        if !g.is_interior(g.coords(i)) {
            return 0.0;
        }
        (0..3).map(|a| 0.5 * (f.data[i + s[a]][a] - f.data[i - s[a]][a])).sum()
    });
    let data = par::map_indices(g.len(), |i| {
        let c = g.coords(i);
        let mut out = [0.0; 3];
        for a in 0..3 {
            // adjoint of the central difference: (r[i-1] - r[i+1]) / 2
            let lo = if c[a] >= 1 { div[i - s[a]] } else { 0.0 };
            let hi = if c[a] + 1 < g.dims[a] { div[i + s[a]] } else { 0.0 };
            out[a] = 2.0 * 0.5 * (lo - hi);
        }
        out
    });
    Ok(VectorField { geom: g, kind: f.kind, data })
}

const AXIS_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Discrete thin-plate bending energy averaged over interior voxels.
///
/// Pure second differences plus twice the squared mixed differences, summed
/// over components.
pub fn bending_energy(f: &VectorField) -> Result<f64> {
    let g = f.geom;
    require_dims(&g, 4, "bending_energy")?;
    let s = strides(&g);
    let n = g.interior_count();
    let total = par::sum_indices(g.len(), |i| {
        if !g.is_interior(g.coords(i)) {
            return 0.0;
        }
        let mut e = 0.0;
        for k in 0..3 {
            for a in 0..3 {
                let v = second_diff(&f.data, i, s[a], k);
                e += v * v;
            }
            for &(a, b) in &AXIS_PAIRS {
                let v = mixed_diff(&f.data, i, s[a], s[b], k);
                e += 2.0 * v * v;
            }
        }
        e
    });
    Ok(total / n as f64)
}

#[inline]
fn second_diff(d: &[[f64; 3]], i: usize, s: usize, k: usize) -> f64 {
    d[i + s][k] - 2.0 * d[i][k] + d[i - s][k]
}

#[inline]
fn mixed_diff(d: &[[f64; 3]], i: usize, sa: usize, sb: usize, k: usize) -> f64 {
    0.25 * (d[i + sa + sb][k] - d[i + sa - sb][k] - d[i - sa + sb][k] + d[i - sa - sb][k])
}

/// Variational gradient (per-voxel density) of [`bending_energy`].
pub fn bending_gradient(f: &VectorField) -> Result<VectorField> {
    let g = f.geom;
    require_dims(&g, 4, "bending_energy")?;
    let s = strides(&g);
    // residuals of the six stencils at interior voxels, zero elsewhere
    let residual: Vec<[[f64; 3]; 6]> = par::map_indices(g.len(), |i| {
        let mut r = [[0.0; 3]; 6];
        if g.is_interior(g.coords(i)) {
            for k in 0..3 {
                for a in 0..3 {
                    r[a][k] = second_diff(&f.data, i, s[a], k);
                }
                for (p, &(a, b)) in AXIS_PAIRS.iter().enumerate() {
                    r[3 + p][k] = mixed_diff(&f.data, i, s[a], s[b], k);
                }
            }
        }
        r
    });
    let data = par::map_indices(g.len(), |i| {
        let c = g.coords(i);
        if (0..3).all(|a| c[a] >= 1 && c[a] + 2 <= g.dims[a]) {
            // every stencil neighbour is on the grid
            let mut out = [0.0; 3];
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..3 {
                    acc += residual[i + s[a]][a][k] - 2.0 * residual[i][a][k] + residual[i - s[a]][a][k];
                }
                for (p, &(a, b)) in AXIS_PAIRS.iter().enumerate() {
                    let t = 3 + p;
                    acc += 0.5
                        * (residual[i + s[a] + s[b]][t][k] - residual[i + s[a] - s[b]][t][k] - residual[i - s[a] + s[b]][t][k]
                            + residual[i - s[a] - s[b]][t][k]);
                }
                *o = 2.0 * acc;
            }
            return out;
        }
        let at = |off: [i64; 3], t: usize, k: usize| -> f64 {
            let mut j = i as i64;
            for a in 0..3 {
                let q = c[a] as i64 + off[a];
                if q < 0 || q >= g.dims[a] as i64 {
                    return 0.0;
                }
                j += off[a] * s[a] as i64;
            }
            residual[j as usize][t][k]
        };
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..3 {
                let mut e = [0i64; 3];
                e[a] = 1;
                let m = e.map(|x| -x);
                acc += at(e, a, k) - 2.0 * at([0; 3], a, k) + at(m, a, k);
            }
            for (p, &(a, b)) in AXIS_PAIRS.iter().enumerate() {
                let mut pp = [0i64; 3];
                pp[a] = 1;
                pp[b] = 1;
                let mut pm = [0i64; 3];
                pm[a] = 1;
                pm[b] = -1;
                let mp = pm.map(|x| -x);
                let mm = pp.map(|x| -x);
                acc += 2.0 * 0.25 * (at(pp, 3 + p, k) - at(pm, 3 + p, k) - at(mp, 3 + p, k) + at(mm, 3 + p, k));
            }
            *o = 2.0 * acc;
        }
        out
    });
    Ok(VectorField { geom: g, kind: f.kind, data })
}

/// Componentwise Gaussian smoothing; the kind tag is preserved.
pub fn smooth_field(f: &VectorField, sigma: f64) -> Result<VectorField> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(f.clone());
    }
    let kernel = crate::volume::gaussian_kernel(sigma);
    let g = f.geom;
    let mut comps: Vec<Vec<f64>> = (0..3).map(|a| f.data.iter().map(|v| v[a]).collect()).collect();
    for c in comps.iter_mut() {
        for axis in 0..3 {
            *c = crate::volume::convolve_axis(&g, c, axis, &kernel);
        }
    }
    let data = (0..g.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
    Ok(VectorField { geom: g, kind: f.kind, data })
}

/// Trilinear upsampling of a coarse field onto `fine`, with vectors doubled
/// (coarse voxel `i` sits at fine coordinate `2i`).
pub fn upsample2(f: &VectorField, fine: GridGeometry) -> VectorField {
    let data = par::map_indices(fine.len(), |i| {
        let x = fine.coords_f64(i);
        f.sample([x[0] / 2.0, x[1] / 2.0, x[2] / 2.0]).map(|c| 2.0 * c)
    });
    VectorField { geom: fine, kind: f.kind, data }
}

/// `a + b` (same kind and grid).
pub fn add(a: &VectorField, b: &VectorField) -> Result<VectorField> {
    a.geom.ensure_same(&b.geom)?;
    let data = par::map_indices(a.data.len(), |i| {
        let (p, q) = (a.data[i], b.data[i]);
        [p[0] + q[0], p[1] + q[1], p[2] + q[2]]
    });
    Ok(VectorField { geom: a.geom, kind: a.kind, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub kind: FieldKind,
    pub steps: Option<usize>,
    pub dims: [usize; 3],
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>_dx.nii`, `<stem>_dy.nii`, `<stem>_dz.nii` and `<stem>.json`.
pub fn write_field(f: &VectorField, stem: impl AsRef<Path>, steps: Option<usize>) -> Result<()> {
    let stem = stem.as_ref();
    for (a, name) in ["_dx.nii", "_dy.nii", "_dz.nii"].iter().enumerate() {
        write_nifti(&f.component(a), with_suffix(stem, name))?;
    }
    let side = FieldSidecar { kind: f.kind, steps, dims: f.geom.dims };
    let path = with_suffix(stem, ".json");
    fs::write(&path, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&path, e))
}

pub fn read_field(stem: impl AsRef<Path>) -> Result<(VectorField, FieldSidecar)> {
    let stem = stem.as_ref();
    let path = with_suffix(stem, ".json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let side: FieldSidecar = serde_json::from_slice(&raw)?;
    let comps: Vec<ScalarVolume> = ["_dx.nii", "_dy.nii", "_dz.nii"]
        .iter()
        .map(|s| read_nifti(with_suffix(stem, s)).map(|v| v.into_scalar()))
        .collect::<Result<_>>()?;
    let f = VectorField::from_components(side.kind, [&comps[0], &comps[1], &comps[2]])?;
    Ok((f, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d: usize) -> GridGeometry {
        GridGeometry::with_dims([d, d, d]).unwrap()
    }

    fn disp(g: GridGeometry, f: impl Fn([f64; 3]) -> [f64; 3] + Sync + Send) -> VectorField {
        VectorField::from_fn(g, FieldKind::Displacement, f)
    }

    #[test]
    fn exp_of_zero_and_constant() {
        let g = geom(8);
        let z = exp_velocity(&VectorField::zeros(g, FieldKind::Velocity), 6).unwrap();
        assert!(z.data().iter().all(|v| *v == [0.0; 3]));
        let c = VectorField::from_fn(g, FieldKind::Velocity, |_| [3.0, 0.0, 0.0]);
        let e = exp_velocity(&c, 6).unwrap();
        assert_eq!(e.kind(), FieldKind::Displacement);
        assert!(e.data().iter().all(|v| (v[0] - 3.0).abs() < 1e-12 && v[1] == 0.0));
        assert!(exp_velocity(&e, 6).is_err());
        assert!(exp_velocity(&c, 0).is_err());
    }

    #[test]
    fn compose_identities() {
        let g = geom(6);
        let d = disp(g, |x| [0.1 * x[1], -0.2, 0.05 * x[0]]);
        let z = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(compose(&d, &z).unwrap(), d);
        assert_eq!(compose(&z, &d).unwrap(), d);
        let a = disp(g, |_| [1.0, 0.0, 0.0]);
        let b = disp(g, |_| [0.0, 2.0, 0.0]);
        let ab = compose(&a, &b).unwrap();
        // interior points stay inside the grid after the shift
        assert_eq!(ab.data()[g.index(2, 1, 2)], [1.0, 2.0, 0.0]);
        assert!(compose(&a, &disp(geom(5), |_| [0.0; 3])).is_err());
    }

    #[test]
    fn invert_simple_cases() {
        let g = geom(8);
        let z = invert(&VectorField::zeros(g, FieldKind::Displacement)).unwrap();
        assert!(z.data().iter().all(|v| *v == [0.0; 3]));
        let t = invert(&disp(g, |_| [0.5, -0.25, 1.0])).unwrap();
        assert!(t.data().iter().all(|v| *v == [-0.5, 0.25, -1.0]));
    }

    #[test]
    fn invert_reports_divergence() {
        // a folding field whose fixed-point map is expansive
        let g = geom(12);
        let f = disp(g, |x| [8.0 * (x[0] * 1.7).sin(), 8.0 * (x[1] * 2.3).cos(), 0.0]);
        match invert(&f) {
            Err(Error::InversionDiverged { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn warp_identity_and_shift() {
        let g = geom(6);
        let v = ScalarVolume::from_fn(g, |c| (c[0] * 7 + c[1] * 3 + c[2]) as f64);
        let z = VectorField::zeros(g, FieldKind::Displacement);
        assert_eq!(warp(&v, &z, Interp::Linear).unwrap(), v);
        let l: LabelVolume = Volume::from_fn(g, |c| c[0] as u16);
        assert_eq!(warp(&l, &z, Interp::Nearest).unwrap(), l);
        assert!(warp(&l, &z, Interp::Linear).is_err());
        let m: Mask = Volume::from_fn(g, |c| c[1] > 2);
        assert_eq!(warp(&m, &z, Interp::Nearest).unwrap(), m);

        let shift = disp(g, |_| [2.0, 0.0, 0.0]);
        let w = warp(&v, &shift, Interp::Linear).unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            assert_eq!(w.data()[i], v.at((c[0] + 2).min(5), c[1], c[2]));
        }
        let ramp = ScalarVolume::from_fn(g, |c| c[0] as f64);
        let half = disp(g, |_| [0.5, 0.0, 0.0]);
        let w = warp(&ramp, &half, Interp::Linear).unwrap();
        assert_eq!(w.at(2, 3, 3), 2.5);
    }

    #[test]
    fn jacobian_examples() {
        let g = geom(7);
        let j = jacobian_determinant(&VectorField::zeros(g, FieldKind::Displacement)).unwrap();
        assert!(j.volume().data().iter().all(|&v| v == 1.0));
        let e = jacobian_determinant(&disp(g, |x| x.map(|c| 0.1 * c))).unwrap();
        assert!(e.volume().data().iter().all(|&v| (v - 1.331).abs() < 1e-12));
        let t = jacobian_determinant(&disp(g, |_| [3.0, -1.0, 2.0])).unwrap();
        assert!(t.volume().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bending_energy_examples() {
        let g = geom(6);
        assert_eq!(bending_energy(&disp(g, |_| [1.0, 2.0, 3.0])).unwrap(), 0.0);
        let aff = disp(g, |x| [0.5 * x[0] - x[1] + 2.0, 0.25 * x[2], x[0] + x[1] + x[2]]);
        assert_eq!(bending_energy(&aff).unwrap(), 0.0);
        let q = disp(g, |x| [x[0] * x[0], 0.0, 0.0]);
        assert_eq!(bending_energy(&q).unwrap(), 4.0);
        assert!(bending_energy(&VectorField::zeros(geom(3), FieldKind::Velocity)).is_err());
    }

    #[test]
    fn divergence_examples() {
        let g = geom(6);
        assert!(divergence(&disp(g, |_| [1.0, 1.0, -2.0])).unwrap().data().iter().all(|&v| v == 0.0));
        let d = divergence(&disp(g, |x| x.map(|c| 0.1 * c))).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let curl = divergence(&disp(g, |x| [-x[1], x[0], 0.0])).unwrap();
        assert!(curl.data().iter().all(|&v| v == 0.0));
    }

    fn finite_difference_check(energy: impl Fn(&VectorField) -> f64, grad: impl Fn(&VectorField) -> VectorField) {
        let g = geom(6);
        let f = disp(g, |x| [(x[0] * 0.7 + x[1]).sin(), (x[2] * 0.4).cos() * x[0] * 0.1, (x[1] * x[2] * 0.3).sin()]);
        let n = g.interior_count() as f64;
        let gr = grad(&f);
        let h = 1e-5;
        for &i in &[0usize, 7, 43, 100, 129, 215] {
            for k in 0..3 {
                let mut p = f.clone();
                p.data_mut()[i][k] += h;
                let mut m = f.clone();
                m.data_mut()[i][k] -= h;
                let fd = (energy(&p) - energy(&m)) / (2.0 * h) * n;
                let an = gr.data()[i][k];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "voxel {i} comp {k}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn bending_gradient_matches_finite_differences() {
        finite_difference_check(|f| bending_energy(f).unwrap(), |f| bending_gradient(f).unwrap());
    }

    #[test]
    fn divergence_gradient_matches_finite_differences() {
        finite_difference_check(|f| mean_sq_divergence(f).unwrap(), |f| divergence_penalty_gradient(f).unwrap());
    }

    #[test]
    fn smoothing_fields() {
        let g = geom(9);
        let c = disp(g, |_| [1.0, -2.0, 0.5]);
        let s = smooth_field(&c, 1.3).unwrap();
        assert!(s.data().iter().all(|v| (v[0] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12));
        assert_eq!(smooth_field(&c, 0.0).unwrap(), c);
        assert!(smooth_field(&c, -0.5).is_err());
        let mut imp = VectorField::zeros(g, FieldKind::Velocity);
        let ci = g.index(4, 4, 4);
        imp.data_mut()[ci] = [1.0, 0.0, 0.0];
        let s = smooth_field(&imp, 1.0).unwrap();
        assert_eq!(s.kind(), FieldKind::Velocity);
        let norm: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        assert!((s.data()[ci][0] - norm.powi(-3)).abs() < 1e-12);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom(5);
        let f = VectorField::from_fn(g, FieldKind::Velocity, |x| [x[0] * 0.5, -x[1], 0.25]);
        let stem = dir.path().join("gt_velocity");
        write_field(&f, &stem, Some(6)).unwrap();
        assert!(dir.path().join("gt_velocity_dy.nii").exists());
        let (back, side) = read_field(&stem).unwrap();
        assert_eq!(back, f);
        assert_eq!(side.steps, Some(6));
        assert_eq!(side.kind, FieldKind::Velocity);
    }
}
