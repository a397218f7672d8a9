//! Procedural geometry: Perlin noise, star-shaped blob meshes, voxelization,
//! exact Euclidean distance transforms and random lesion-like masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::CounterRng;
use crate::volume::{GridGeometry, Mask, ScalarVolume, Volume};

pub const DEFAULT_AMPLITUDE: f64 = 0.3;
pub const DEFAULT_FREQUENCY: f64 = 1.5;
pub const DEFAULT_SUBDIVISIONS: usize = 3;

const MAX_REJECTIONS: usize = 100;
const INSIDE_MARGIN: f64 = 3.0;

const GRADIENTS: [[f64; 3]; 12] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
];

/// Seeded permutation table for improved gradient noise.
#[derive(Clone, Debug)]
pub struct PerlinTable {
    seed: u64,
    perm: [u8; 512],
}

impl PerlinTable {
    pub fn new(seed: u64) -> Self {
        let mut p: Vec<u8> = (0..=255u8).collect();
        let mut rng = CounterRng::new(seed, 0x5045_524C);
        for i in (1..256).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        Self { seed, perm }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The 256-entry permutation.
    pub fn permutation(&self) -> &[u8] {
        &self.perm[..256]
    }

    /// Noise at `p * frequency`, in `[-1, 1]`.
    pub fn noise(&self, p: [f64; 3], frequency: f64) -> f64 {
        perlin3(self, p, frequency)
    }

    #[inline]
    fn hash(&self, x: usize, y: usize, z: usize) -> usize {
        self.perm[self.perm[self.perm[x] as usize + y] as usize + z] as usize
    }
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(t: f64, a: f64, b: f64) -> f64 {
    a + t * (b - a)
}

#[inline]
fn grad(h: usize, x: f64, y: f64, z: f64) -> f64 {
    let g = GRADIENTS[h % 12];
    g[0] * x + g[1] * y + g[2] * z
}

/// Improved gradient noise with quintic fade and 12 edge gradients.
pub fn perlin3(table: &PerlinTable, p: [f64; 3], frequency: f64) -> f64 {
    let x = p[0] * frequency;
    let y = p[1] * frequency;
    let z = p[2] * frequency;
    let (fx, fy, fz) = (x.floor(), y.floor(), z.floor());
    let xi = (fx as i64 & 255) as usize;
    let yi = (fy as i64 & 255) as usize;
    let zi = (fz as i64 & 255) as usize;
    let (x, y, z) = (x - fx, y - fy, z - fz);
    let (u, v, w) = (fade(x), fade(y), fade(z));
    let t = table;
    let n = lerp(
        w,
        lerp(
            v,
            lerp(u, grad(t.hash(xi, yi, zi), x, y, z), grad(t.hash(xi + 1, yi, zi), x - 1.0, y, z)),
            lerp(u, grad(t.hash(xi, yi + 1, zi), x, y - 1.0, z), grad(t.hash(xi + 1, yi + 1, zi), x - 1.0, y - 1.0, z)),
        ),
        lerp(
            v,
            lerp(u, grad(t.hash(xi, yi, zi + 1), x, y, z - 1.0), grad(t.hash(xi + 1, yi, zi + 1), x - 1.0, y, z - 1.0)),
            lerp(
                u,
                grad(t.hash(xi, yi + 1, zi + 1), x, y - 1.0, z - 1.0),
                grad(t.hash(xi + 1, yi + 1, zi + 1), x - 1.0, y - 1.0, z - 1.0),
            ),
        ),
    );
    n.clamp(-1.0, 1.0)
}

/// Star-shaped triangulated surface: unit directions from an icosphere, each
/// pushed out to its own radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobMesh {
    pub center: [f64; 3],
    pub base_radius: f64,
    pub directions: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl BlobMesh {
    pub fn vertex(&self, i: usize) -> [f64; 3] {
        let d = self.directions[i];
        let r = self.radii[i];
        [self.center[0] + r * d[0], self.center[1] + r * d[1], self.center[2] + r * d[2]]
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_radius(&self) -> f64 {
        self.radii.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

/// Unit icosphere: `10 * 4^n + 2` vertices, `20 * 4^n` faces.
pub fn icosphere(subdivisions: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = mid(f[0], f[1], &mut verts);
            let bc = mid(f[1], f[2], &mut verts);
            let ca = mid(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

pub fn make_blob_mesh(
    center: [f64; 3],
    base_radius: f64,
    amplitude: f64,
    frequency: f64,
    seed: u64,
    subdivisions: usize,
) -> Result<BlobMesh> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(Error::InvalidArgument(format!("amplitude must be in [0, 1), got {amplitude}")));
    }
    if !(base_radius > 0.0) || !base_radius.is_finite() {
        return Err(Error::InvalidArgument(format!("base radius must be positive, got {base_radius}")));
    }
    if !(1..=5).contains(&subdivisions) {
        return Err(Error::InvalidArgument(format!("subdivisions must be in 1..=5, got {subdivisions}")));
    }
    if !(frequency > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be positive, got {frequency}")));
    }
    let table = PerlinTable::new(seed);
    let (directions, faces) = icosphere(subdivisions);
    let radii = directions.iter().map(|&d| base_radius * (1.0 + amplitude * perlin3(&table, d, frequency))).collect();
    Ok(BlobMesh { center, base_radius, directions, radii, faces })
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    Some([
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ])
}

/// Radius of the faceted surface along unit direction `u`.
///
/// For the face whose direction cone contains `u`, write `u = Σ c_i d_i`; the
/// ray meets the flat triangle through `r_i d_i` at `1 / Σ (c_i / r_i)`.
struct RadialProfile<'a> {
    mesh: &'a BlobMesh,
    inverses: Vec<[[f64; 3]; 3]>,
}

impl<'a> RadialProfile<'a> {
    fn new(mesh: &'a BlobMesh) -> Self {
        let inverses = mesh
            .faces
            .iter()
            .map(|f| {
                let (a, b, c) = (mesh.directions[f[0]], mesh.directions[f[1]], mesh.directions[f[2]]);
                // columns are the three directions
                invert3([[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]).expect("non-degenerate face")
            })
            .collect();
        Self { mesh, inverses }
    }

    fn radius(&self, u: [f64; 3]) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for (f, inv) in self.mesh.faces.iter().zip(&self.inverses) {
            let c: [f64; 3] = std::array::from_fn(|r| inv[r][0] * u[0] + inv[r][1] * u[1] + inv[r][2] * u[2]);
            let min_c = c[0].min(c[1]).min(c[2]);
            let total = c[0] + c[1] + c[2];
            let r = (0..3).map(|k| c[k] / total * self.mesh.radii[f[k]]).sum::<f64>();
            if min_c >= -1e-12 {
                return r;
            }
            // numerically borderline directions fall back to the least-negative face
            if min_c > best.0 {
                best = (min_c, r);
            }
        }
        best.1
    }
}

/// Voxels whose centers lie inside the star-shaped surface.
pub fn voxelize_blob(mesh: &BlobMesh, geom: &GridGeometry) -> Result<Mask> {
    if !geom.contains(mesh.center) {
        return Err(Error::InvalidArgument(format!("blob center {:?} outside grid {:?}", mesh.center, geom.dims)));
    }
    let profile = RadialProfile::new(mesh);
    let reach = mesh.max_radius();
    let c = mesh.center;
    Ok(Volume::from_fn(*geom, |v| {
        let d = [v[0] as f64 - c[0], v[1] as f64 - c[1], v[2] as f64 - c[2]];
        if d.iter().any(|x| x.abs() > reach) {
            return false;
        }
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r == 0.0 {
            return true;
        }
        if r > reach {
            return false;
        }
        r <= profile.radius(d.map(|x| x / r)) + 1e-9
    }))
}

const EDT_INF: f64 = 1e20;

/// Felzenszwalb-Huttenlocher 1D squared distance transform of `f` into `out`.
fn edt_1d(f: &[f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let parabola = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (voxel units) from every voxel to the nearest
/// voxel where `feature` is true. Voxels are assumed isotropic.
pub fn squared_edt(feature: &Mask) -> Vec<f64> {
    let g = *feature.geometry();
    let mut d: Vec<f64> = feature.data().iter().map(|&b| if b { 0.0 } else { EDT_INF }).collect();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    for axis in 0..3 {
        let n = g.dims[axis];
        let s = strides[axis];
        let lines: Vec<usize> = (0..g.len()).filter(|&i| g.coords(i)[axis] == 0).collect();
        let results: Vec<Vec<f64>> = par::map_slice(&lines, |&start| {
            let f: Vec<f64> = (0..n).map(|k| d[start + k * s]).collect();
            let mut v = vec![0usize; n];
            let mut z = vec![0.0; n + 1];
            let mut out = vec![0.0; n];
            edt_1d(&f, &mut v, &mut z, &mut out);
            out
        });
        for (start, line) in lines.iter().zip(results) {
            for (k, val) in line.into_iter().enumerate() {
                d[start + k * s] = val.min(EDT_INF);
            }
        }
    }
    d
}

/// Euclidean distance from each voxel to the nearest set voxel of `mask`.
pub fn distance_to(mask: &Mask) -> ScalarVolume {
    let d = squared_edt(mask);
    Volume::new(*mask.geometry(), d.into_iter().map(f64::sqrt).collect()).expect("same geometry")
}

/// Signed distance in voxels: outside voxels carry the distance to the nearest
/// mask voxel, inside voxels carry `-(distance to the nearest outside voxel - 1)`,
/// so boundary voxels read `-0` inside and `+1` just outside.
pub fn signed_distance(mask: &Mask) -> Result<ScalarVolume> {
    if !mask.any() {
        return Err(Error::EmptyMask("signed distance of an empty mask".into()));
    }
    if mask.all() {
        return Err(Error::InvalidArgument("signed distance of a full mask".into()));
    }
    let to_inside = squared_edt(mask);
    let to_outside = squared_edt(&mask.not());
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &b)| if b { -(to_outside[i].sqrt() - 1.0) } else { to_inside[i].sqrt() })
        .collect();
    Volume::new(*mask.geometry(), data)
}

/// Shape parameters for [`random_lesion_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub subdivisions: usize,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self { amplitude: DEFAULT_AMPLITUDE, frequency: DEFAULT_FREQUENCY, subdivisions: DEFAULT_SUBDIVISIONS }
    }
}

/// Rejection-samples a blob whose voxel count lies in `volume_range` and which
/// stays at least 3 voxels inside `region` (the whole grid when absent).
pub fn random_lesion_mask(
    geom: &GridGeometry,
    region: Option<&Mask>,
    volume_range: [usize; 2],
    blob: BlobParams,
    seed: u64,
) -> Result<Mask> {
    let [lo, hi] = volume_range;
    if lo > hi || hi == 0 {
        return Err(Error::InvalidArgument(format!("bad volume range {volume_range:?}")));
    }
    if hi as f64 >= 0.2 * geom.len() as f64 {
        return Err(Error::InvalidArgument(format!("max volume {hi} is not below 20% of the grid")));
    }
    let region = match region {
        Some(r) => {
            geom.ensure_same(r.geometry())?;
            r.clone()
        }
        None => Volume::from_fn(*geom, |c| (0..3).all(|a| c[a] > 0 && c[a] + 1 < geom.dims[a])),
    };
    // distance from each voxel to the nearest voxel outside the region
    let depth = squared_edt(&region.not());
    let candidates: Vec<usize> = (0..geom.len()).filter(|&i| depth[i] >= INSIDE_MARGIN * INSIDE_MARGIN).collect();
    if candidates.is_empty() {
        return Err(Error::VolumeRangeInfeasible(0));
    }
    let mut rng = CounterRng::new(seed, 0x4C45_5349);
    for _ in 0..MAX_REJECTIONS {
        let center = geom.coords_f64(candidates[rng.below(candidates.len() as u64) as usize]);
        let target = rng.range(lo as f64, hi as f64);
        let radius = (3.0 * target / (4.0 * std::f64::consts::PI)).cbrt().max(1.0);
        let mesh = make_blob_mesh(center, radius, blob.amplitude, blob.frequency, rng.next_u64(), blob.subdivisions)?;
        let mask = voxelize_blob(&mesh, geom)?;
        let n = mask.count();
        if n < lo || n > hi {
            continue;
        }
        let inside = mask.data().iter().zip(&depth).all(|(&m, &d)| !m || d >= INSIDE_MARGIN * INSIDE_MARGIN);
        if inside {
            return Ok(mask);
        }
    }
    Err(Error::VolumeRangeInfeasible(MAX_REJECTIONS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_bijection() {
        let t = PerlinTable::new(42);
        let mut seen = [false; 256];
        for &p in t.permutation() {
            seen[p as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_ne!(PerlinTable::new(1).permutation(), PerlinTable::new(2).permutation());
    }

    #[test]
    fn noise_vanishes_on_lattice() {
        let t = PerlinTable::new(3);
        for p in [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-4.0, 7.0, 1.0]] {
            assert_eq!(perlin3(&t, p, 1.0), 0.0);
        }
        assert_eq!(perlin3(&t, [0.5, 1.0, 1.5], 2.0), 0.0);
    }

    // Straight-line reimplementation: explicit sum over the 8 cell corners
    // with tensor-product fade weights.
    fn reference_perlin(perm: &[u8], p: [f64; 3]) -> f64 {
        let cell = p.map(f64::floor);
        let frac = [p[0] - cell[0], p[1] - cell[1], p[2] - cell[2]];
        let s = |t: f64| 6.0 * t.powi(5) - 15.0 * t.powi(4) + 10.0 * t.powi(3);
        let mut total = 0.0;
        for corner in 0..8 {
            let o = [(corner & 1) as i64, ((corner >> 1) & 1) as i64, ((corner >> 2) & 1) as i64];
            let idx: Vec<usize> = (0..3).map(|a| ((cell[a] as i64 + o[a]).rem_euclid(256)) as usize).collect();
            let h = perm[(perm[(perm[idx[0]] as usize + idx[1]) % 256] as usize + idx[2]) % 256] as usize;
            let g = GRADIENTS[h % 12];
            let d: Vec<f64> = (0..3).map(|a| frac[a] - o[a] as f64).collect();
            let dot = g[0] * d[0] + g[1] * d[1] + g[2] * d[2];
            let w: f64 = (0..3).map(|a| if o[a] == 1 { s(frac[a]) } else { 1.0 - s(frac[a]) }).product();
            total += w * dot;
        }
        total
    }

    #[test]
    fn matches_reference_oracle() {
        let t = PerlinTable::new(42);
        let perm = t.permutation().to_vec();
        let v = perlin3(&t, [0.5, 0.5, 0.5], 1.0);
        assert!((v - reference_perlin(&perm, [0.5, 0.5, 0.5])).abs() <= 1e-9);
        let mut rng = CounterRng::new(5, 5);
        for _ in 0..500 {
            let p = [rng.range(-20.0, 20.0), rng.range(-20.0, 20.0), rng.range(-20.0, 20.0)];
            assert!((perlin3(&t, p, 1.0) - reference_perlin(&perm, p)).abs() <= 1e-9);
        }
    }

    #[test]
    fn icosphere_counts_and_watertight() {
        for n in 1..=3 {
            let (v, f) = icosphere(n);
            assert_eq!(v.len(), 10 * 4usize.pow(n as u32) + 2);
            assert_eq!(f.len(), 20 * 4usize.pow(n as u32));
            let mut edges = std::collections::HashMap::new();
            for t in &f {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            assert!(edges.values().all(|&c| c == 2));
        }
    }

    #[test]
    fn blob_mesh_examples() {
        let m = make_blob_mesh([0.0; 3], 4.0, 0.0, 1.5, 1, 3).unwrap();
        assert!(m.radii.iter().all(|&r| r == 4.0));
        let m = make_blob_mesh([0.0; 3], 4.0, 0.4, 1.5, 9, 3).unwrap();
        assert!(m.min_radius() >= 4.0 * 0.6);
        let m = make_blob_mesh([0.0; 3], 2.0, 0.3, 1.5, 7, 2).unwrap();
        assert_eq!((m.directions.len(), m.faces.len()), (162, 320));
        assert!(make_blob_mesh([0.0; 3], 2.0, 1.0, 1.5, 7, 2).is_err());
        assert!(make_blob_mesh([0.0; 3], 2.0, 0.3, 1.5, 7, 6).is_err());
    }

    #[test]
    fn voxelized_sphere_volume() {
        let g = GridGeometry::with_dims([21, 21, 21]).unwrap();
        let m = make_blob_mesh(g.center(), 5.0, 0.0, 1.5, 0, 3).unwrap();
        let n = voxelize_blob(&m, &g).unwrap().count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        assert!((n - analytic).abs() / analytic < 0.05, "{n} vs {analytic}");

        let tiny = make_blob_mesh([9.0, 9.0, 9.0], 0.4, 0.0, 1.5, 0, 2).unwrap();
        assert!(voxelize_blob(&tiny, &g).unwrap().count() <= 1);
        assert!(voxelize_blob(&make_blob_mesh([30.0, 0.0, 0.0], 2.0, 0.0, 1.0, 0, 1).unwrap(), &g).is_err());
    }

    #[test]
    fn vertices_touch_the_mask() {
        let g = GridGeometry::with_dims([24, 24, 24]).unwrap();
        let m = make_blob_mesh([11.3, 12.1, 11.7], 6.0, 0.3, 1.5, 7, 3).unwrap();
        let mask = voxelize_blob(&m, &g).unwrap();
        let d2 = squared_edt(&mask);
        for i in 0..m.directions.len() {
            let v = m.vertex(i).map(|c| c.round() as usize);
            let idx = g.index(v[0], v[1], v[2]);
            // a rounded vertex sits at most sqrt(3)/2 from the surface
            assert!(d2[idx] <= 3.0, "vertex {i} at {v:?} is {} from the mask", d2[idx].sqrt());
        }
    }

    fn brute_sdf(mask: &Mask) -> Vec<f64> {
        let g = mask.geometry();
        let pts: Vec<[f64; 3]> = (0..g.len()).map(|i| g.coords_f64(i)).collect();
        (0..g.len())
            .map(|i| {
                let inside = mask.data()[i];
                let best = (0..g.len())
                    .filter(|&j| mask.data()[j] != inside)
                    .map(|j| ((0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>()).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if inside {
                    -(best - 1.0)
                } else {
                    best
                }
            })
            .collect()
    }

    #[test]
    fn signed_distance_examples() {
        let g = GridGeometry::with_dims([8, 8, 8]).unwrap();
        let single: Mask = Volume::from_fn(g, |c| c == [3, 3, 3]);
        let s = signed_distance(&single).unwrap();
        assert_eq!(s.at(3, 3, 3), 0.0);
        assert!(s.at(3, 3, 3).is_sign_negative());
        assert_eq!(s.at(4, 3, 3), 1.0);
        assert_eq!(s.at(3, 2, 3), 1.0);

        let cube: Mask = Volume::from_fn(g, |c| c.iter().all(|&x| (2..=4).contains(&x)));
        let s = signed_distance(&cube).unwrap();
        let oracle = brute_sdf(&cube);
        assert_eq!(s.at(3, 3, 3), -1.0);
        for (a, b) in s.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(signed_distance(&Volume::filled(g, false)).is_err());
        assert!(signed_distance(&Volume::filled(g, true)).is_err());
    }

    #[test]
    fn random_masks() {
        let g = GridGeometry::default();
        let a = random_lesion_mask(&g, None, [100, 200], BlobParams::default(), 1).unwrap();
        assert!((100..=200).contains(&a.count()));
        assert_eq!(a, random_lesion_mask(&g, None, [100, 200], BlobParams::default(), 1).unwrap());
        let b = random_lesion_mask(&g, None, [100, 200], BlobParams::default(), 2).unwrap();
        let inter = a.and(&b).unwrap().count();
        let dice = 2.0 * inter as f64 / (a.count() + b.count()) as f64;
        assert!(dice < 1.0);
        assert!(random_lesion_mask(&g, None, [10, 20_000], BlobParams::default(), 1).is_err());
        assert!(matches!(
            random_lesion_mask(&g, None, [5000, 5001], BlobParams::default(), 1),
            Err(Error::VolumeRangeInfeasible(_))
        ));
    }
}
