//! Dense 3D grids: scalar intensities, integer labels and binary masks.
//!
//! Storage is x-fastest row-major (`i = x + nx * (y + ny * z)`), matching the
//! on-disk NIfTI order. All interpolation and differencing clamps to the grid
//! edge (zero-flux boundary).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Desk-scale working grid.
pub const DEFAULT_DIMS: [usize; 3] = [48, 48, 40];
pub const DEFAULT_SPACING: [f64; 3] = [2.0, 2.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self { dims: DEFAULT_DIMS, spacing: DEFAULT_SPACING, origin: [0.0; 3] }
    }
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Geometry(format!("all dims must be >= 2, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry("origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn coords_f64(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    /// Voxels with at least one neighbour on each side along every axis.
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 1 && c[a] + 1 < self.dims[a])
    }

    pub fn interior_count(&self) -> usize {
        self.dims.iter().map(|&d| d.saturating_sub(2)).product()
    }

    /// Grid center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same(&self, other: &GridGeometry) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(self.dims, other.dims))
        }
    }

    /// Geometry of a factor-2 downsampled grid (voxel `i` sits at fine coordinate `2i`).
    pub fn halved(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims.map(|d| d.div_ceil(2).max(2)),
            spacing: self.spacing.map(|s| s * 2.0),
            origin: self.origin,
        }
    }
}

/// Trilinear stencil: 8 corner indices and weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Trilinear {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Trilinear {
    #[inline]
    pub fn new(geom: &GridGeometry, p: [f64; 3]) -> Self {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let hi = (geom.dims[a] - 1) as f64;
            let q = p[a].clamp(0.0, hi);
            let fl = q.floor();
            let lo = fl as usize;
            i0[a] = lo;
            i1[a] = (lo + 1).min(geom.dims[a] - 1);
            f[a] = q - fl;
        }
        let nx = geom.dims[0];
        let nxy = nx * geom.dims[1];
        let (gx, gy, gz) = (1.0 - f[0], 1.0 - f[1], 1.0 - f[2]);
        let idx = [
            i0[0] + nx * i0[1] + nxy * i0[2],
            i1[0] + nx * i0[1] + nxy * i0[2],
            i0[0] + nx * i1[1] + nxy * i0[2],
            i1[0] + nx * i1[1] + nxy * i0[2],
            i0[0] + nx * i0[1] + nxy * i1[2],
            i1[0] + nx * i0[1] + nxy * i1[2],
            i0[0] + nx * i1[1] + nxy * i1[2],
            i1[0] + nx * i1[1] + nxy * i1[2],
        ];
        let w = [
            gx * gy * gz,
            f[0] * gy * gz,
            gx * f[1] * gz,
            f[0] * f[1] * gz,
            gx * gy * f[2],
            f[0] * gy * f[2],
            gx * f[1] * f[2],
            f[0] * f[1] * f[2],
        ];
        Self { idx, w }
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..8 {
            s += self.w[k] * data[self.idx[k]];
        }
        s
    }

    #[inline]
    pub fn apply3(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for k in 0..8 {
            let v = data[self.idx[k]];
            s[0] += self.w[k] * v[0];
            s[1] += self.w[k] * v[1];
            s[2] += self.w[k] * v[2];
        }
        s
    }
}

/// Index of the nearest voxel to `p`, clamped to the grid.
#[inline]
pub(crate) fn nearest_index(geom: &GridGeometry, p: [f64; 3]) -> usize {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let hi = (geom.dims[a] - 1) as f64;
        c[a] = p[a].clamp(0.0, hi).round() as usize;
    }
    geom.index(c[0], c[1], c[2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geom: GridGeometry,
    data: Vec<T>,
}

pub type ScalarVolume = Volume<f64>;
pub type LabelVolume = Volume<u16>;
pub type Mask = Volume<bool>;

impl<T: Copy + Send + Sync> Volume<T> {
    pub fn new(geom: GridGeometry, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: GridGeometry, value: T) -> Self {
        Self { geom, data: vec![value; geom.len()] }
    }

    /// Builds a volume from a function of integer voxel coordinates.
    pub fn from_fn<F>(geom: GridGeometry, f: F) -> Self
    where
        F: Fn([usize; 3]) -> T + Sync + Send,
    {
        let data = par::map_indices(geom.len(), |i| f(geom.coords(i)));
        Self { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn map<U, F>(&self, f: F) -> Volume<U>
    where
        U: Copy + Send + Sync,
        F: Fn(T) -> U + Sync + Send,
    {
        Volume { geom: self.geom, data: par::map_slice(&self.data, |&v| f(v)) }
    }

    /// Nearest-neighbour sample at a continuous voxel coordinate.
    #[inline]
    pub fn sample_nearest(&self, p: [f64; 3]) -> T {
        self.data[nearest_index(&self.geom, p)]
    }
}

impl ScalarVolume {
    pub fn zeros(geom: GridGeometry) -> Self {
        Self::filled(geom, 0.0)
    }

    /// Rejects non-finite data.
    pub fn checked(geom: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i}")));
        }
        Self::new(geom, data)
    }

    /// Trilinear interpolation with edge clamping.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Result<f64> {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("sample point {p:?}")));
        }
        Ok(self.sample(p))
    }

    /// Unchecked variant of [`sample_trilinear`](Self::sample_trilinear) for hot loops.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        Trilinear::new(&self.geom, p).apply(&self.data)
    }

    /// Derivative of the clamped trilinear interpolant with respect to the
    /// sample position. Zero along axes where `p` lies outside the grid.
    pub fn sample_gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let g = &self.geom;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0.0; 3];
        let mut live = [true; 3];
        for a in 0..3 {
            let top = (g.dims[a] - 1) as f64;
            if p[a] < 0.0 || p[a] >= top {
                live[a] = false;
            }
            let q = p[a].clamp(0.0, top);
            let fl = q.floor();
            lo[a] = fl as usize;
            hi[a] = (lo[a] + 1).min(g.dims[a] - 1);
            f[a] = q - fl;
        }
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            if !live[a] {
                continue;
            }
            let mut s = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut c = [0usize; 3];
                for b in 0..3 {
                    let up = (corner >> b) & 1 == 1;
                    c[b] = if up { hi[b] } else { lo[b] };
                    w *= match (b == a, up) {
                        (true, true) => 1.0,
                        (true, false) => -1.0,
                        (false, true) => f[b],
                        (false, false) => 1.0 - f[b],
                    };
                }
                s += w * self.data[g.index(c[0], c[1], c[2])];
            }
            *o = s;
        }
        out
    }

    pub fn mean(&self) -> f64 {
        par::sum_indices(self.len(), |i| self.data[i]) / self.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Central differences inside, one-sided at the faces; units of intensity per voxel.
    pub fn spatial_gradient(&self) -> Result<[ScalarVolume; 3]> {
        if self.geom.dims.iter().any(|&d| d < 3) {
            return Err(Error::Geometry(format!("gradient needs dims >= 3, got {:?}", self.geom.dims)));
        }
        let g = self.geom;
        let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
        let comp = |axis: usize| {
            let data = par::map_indices(g.len(), |i| {
                let c = g.coords(i)[axis];
                let n = g.dims[axis];
                let s = strides[axis];
                if c == 0 {
                    self.data[i + s] - self.data[i]
                } else if c == n - 1 {
                    self.data[i] - self.data[i - s]
                } else {
                    0.5 * (self.data[i + s] - self.data[i - s])
                }
            });
            Volume { geom: g, data }
        };
        Ok([comp(0), comp(1), comp(2)])
    }

    /// Separable Gaussian blur, kernel truncated at `ceil(3 sigma)` and renormalized.
    pub fn gaussian_smooth(&self, sigma: f64) -> Result<ScalarVolume> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let kernel = gaussian_kernel(sigma);
        let mut data = self.data.clone();
        for axis in 0..3 {
            data = convolve_axis(&self.geom, &data, axis, &kernel);
        }
        Ok(Volume { geom: self.geom, data })
    }

    /// Divides by the center of the most populated nonzero-intensity histogram bin.
    pub fn histogram_peak_normalize(&self, bins: usize) -> Result<ScalarVolume> {
        let peak = histogram_peak(&self.data, bins)?;
        Ok(self.map(|v| v / peak))
    }

    /// Gaussian anti-aliasing followed by factor-2 decimation.
    pub fn downsample2(&self) -> ScalarVolume {
        let smooth = self.gaussian_smooth(1.0).expect("positive sigma");
        let coarse = self.geom.halved();
        Volume::from_fn(coarse, |c| smooth.sample([2.0 * c[0] as f64, 2.0 * c[1] as f64, 2.0 * c[2] as f64]))
    }

    pub fn sub(&self, other: &ScalarVolume) -> Result<ScalarVolume> {
        self.geom.ensure_same(&other.geom)?;
        let data = par::map_indices(self.len(), |i| self.data[i] - other.data[i]);
        Ok(Volume { geom: self.geom, data })
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.geom.ensure_same(&other.geom)?;
        let data = par::map_indices(self.len(), |i| self.data[i] && other.data[i]);
        Ok(Volume { geom: self.geom, data })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.geom.ensure_same(&other.geom)?;
        let data = par::map_indices(self.len(), |i| self.data[i] || other.data[i]);
        Ok(Volume { geom: self.geom, data })
    }

    pub fn not(&self) -> Mask {
        self.map(|b| !b)
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// Centroid of the set voxels in voxel coordinates.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut s = [0.0; 3];
        let mut n = 0usize;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                let c = self.geom.coords_f64(i);
                for a in 0..3 {
                    s[a] += c[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| s.map(|v| v / n as f64))
    }
}

impl LabelVolume {
    pub fn mask_of(&self, label: u16) -> Mask {
        self.map(|l| l == label)
    }

    /// Sorted distinct nonzero labels.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen = [false; 1 << 16];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// One separable pass along `axis` with clamped indexing.
pub(crate) fn convolve_axis(geom: &GridGeometry, src: &[f64], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let n = geom.dims[axis];
    let strides = [1, geom.dims[0], geom.dims[0] * geom.dims[1]];
    let stride = strides[axis];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let starts: Vec<usize> = (0..geom.dims[o2])
        .flat_map(|b| (0..geom.dims[o1]).map(move |a| a * strides[o1] + b * strides[o2]))
        .collect();
    let lines = par::map_slice(&starts, |&base| {
        // edge-clamped copy of the line
        let padded: Vec<f64> =
            (0..n + 2 * r).map(|j| src[base + (j as i64 - r as i64).clamp(0, n as i64 - 1) as usize * stride]).collect();
        (0..n).map(|j| kernel.iter().zip(&padded[j..]).map(|(w, x)| w * x).sum::<f64>()).collect::<Vec<f64>>()
    });
    let mut out = vec![0.0; src.len()];
    for (base, line) in starts.iter().zip(lines) {
        for (j, v) in line.into_iter().enumerate() {
            out[base + j * stride] = v;
        }
    }
    out
}

/// Histogram peak over the nonzero intensities; ties go to the higher bin.
pub fn histogram_peak(data: &[f64], bins: usize) -> Result<f64> {
    if bins < 16 {
        return Err(Error::InvalidArgument(format!("bins must be >= 16, got {bins}")));
    }
    let (lo, hi) = data
        .iter()
        .filter(|&&v| v != 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Err(Error::InvalidArgument("histogram normalization of an all-zero volume".into()));
    }
    if hi == lo {
        return Ok(lo);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in data.iter().filter(|&&v| v != 0.0) {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c >= counts[best] {
            best = b;
        }
    }
    Ok(lo + (best as f64 + 0.5) * width)
}
