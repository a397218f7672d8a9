//! Evaluation metrics and report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::noise::distance_to;
use crate::volume::{LabelVolume, Mask, ScalarVolume};

/// Overlap `2|A∩B| / (|A|+|B|)`; two empty sets score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    Ok(dice_where(a.data(), b.data(), |_| true))
}

fn dice_where(a: &[bool], b: &[bool], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for i in 0..a.len() {
        if !keep(i) {
            continue;
        }
        inter += (a[i] && b[i]) as usize;
        total += a[i] as usize + b[i] as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice of a single label between two label volumes.
pub fn dice_label(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    Ok(dice_label_where(a, b, label, |_| true))
}

fn dice_label_where(a: &LabelVolume, b: &LabelVolume, label: u16, keep: impl Fn(usize) -> bool) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if !keep(i) {
            continue;
        }
        let (p, q) = (x == label, y == label);
        inter += (p && q) as usize;
        total += p as usize + q as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Voxels within Euclidean distance `dist` of the lesion (lesion included).
pub fn perilesional_region(lesion: &Mask, dist: f64) -> Result<Mask> {
    if !lesion.any() {
        return Err(Error::EmptyMask("peri-lesional region of an empty lesion".into()));
    }
    if !(dist > 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be positive, got {dist}")));
    }
    Ok(distance_to(lesion).map(|d| d <= dist))
}

/// Dice restricted to voxels within `dist` of `lesion`.
pub fn dice_perilesional(a: &Mask, b: &Mask, lesion: &Mask, dist: f64) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    a.geometry().ensure_same(lesion.geometry())?;
    let region = perilesional_region(lesion, dist)?;
    Ok(dice_where(a.data(), b.data(), |i| region.data()[i]))
}

/// Per-label Dice over `labels`, optionally restricted to `region`.
pub fn label_dice_table(a: &LabelVolume, b: &LabelVolume, labels: &[u16], region: Option<&Mask>) -> Result<Vec<(u16, f64)>> {
    a.geometry().ensure_same(b.geometry())?;
    if let Some(r) = region {
        a.geometry().ensure_same(r.geometry())?;
    }
    Ok(labels
        .iter()
        .map(|&l| {
            let d = match region {
                Some(r) => dice_label_where(a, b, l, |i| r.data()[i]),
                None => dice_label_where(a, b, l, |_| true),
            };
            (l, d)
        })
        .collect())
}

/// `‖x − ref‖² / ‖ref‖²`.
pub fn nmse(x: &ScalarVolume, reference: &ScalarVolume) -> Result<f64> {
    x.geometry().ensure_same(reference.geometry())?;
    nmse_slices(x.data(), reference.data())
}

/// [`nmse`] restricted to `region`.
pub fn nmse_in(x: &ScalarVolume, reference: &ScalarVolume, region: &Mask) -> Result<f64> {
    x.geometry().ensure_same(reference.geometry())?;
    x.geometry().ensure_same(region.geometry())?;
    let pick = |v: &ScalarVolume| -> Vec<f64> {
        v.data().iter().zip(region.data()).filter(|(_, &m)| m).map(|(&a, _)| a).collect()
    };
    nmse_slices(&pick(x), &pick(reference))
}

fn nmse_slices(x: &[f64], r: &[f64]) -> Result<f64> {
    let energy: f64 = r.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::InvalidArgument("NMSE against an all-zero reference".into()));
    }
    let err: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / energy)
}

/// Componentwise field NMSE summed over the three components.
pub fn field_nmse(f: &VectorField, reference: &VectorField) -> Result<f64> {
    f.geometry().ensure_same(reference.geometry())?;
    if f.kind() != reference.kind() {
        return Err(Error::FieldKind { expected: reference.kind().name(), got: f.kind().name() });
    }
    let mut total = 0.0;
    let mut any = false;
    for a in 0..3 {
        let energy: f64 = reference.data().iter().map(|v| v[a] * v[a]).sum();
        if energy == 0.0 {
            continue;
        }
        any = true;
        let err: f64 = f.data().iter().zip(reference.data()).map(|(p, q)| (p[a] - q[a]).powi(2)).sum();
        total += err / energy;
    }
    if !any {
        return Err(Error::InvalidArgument("field NMSE against a zero reference field".into()));
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

/// Summed-volume table with a zero guard layer.
struct Integral {
    dims: [usize; 3],
    s: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let (nx, ny, nz) = (dims[0] + 1, dims[1] + 1, dims[2] + 1);
        let mut s = vec![0.0; nx * ny * nz];
        let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        for z in 1..nz {
            for y in 1..ny {
                for x in 1..nx {
                    let v = f((x - 1) + dims[0] * ((y - 1) + dims[1] * (z - 1)));
                    s[at(x, y, z)] = v + s[at(x - 1, y, z)] + s[at(x, y - 1, z)] + s[at(x, y, z - 1)]
                        - s[at(x - 1, y - 1, z)]
                        - s[at(x - 1, y, z - 1)]
                        - s[at(x, y - 1, z - 1)]
                        + s[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { dims, s }
    }

    /// Sum over the box `[lo, lo + w)` per axis.
    fn box_sum(&self, lo: [usize; 3], w: usize) -> f64 {
        let (nx, ny) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.s[x + nx * (y + ny * z)];
        let [x0, y0, z0] = lo;
        let (x1, y1, z1) = (x0 + w, y0 + w, z0 + w);
        at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0)
            - at(x0, y0, z0)
    }
}

/// Mean SSIM over all fully-contained cubic box windows.
pub fn ssim3d(x: &ScalarVolume, reference: &ScalarVolume, p: SsimParams) -> Result<f64> {
    x.geometry().ensure_same(reference.geometry())?;
    if p.window < 3 || p.window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("SSIM window must be odd and >= 3, got {}", p.window)));
    }
    if !(p.data_range > 0.0) {
        return Err(Error::InvalidArgument("SSIM data range must be positive".into()));
    }
    let dims = x.dims();
    if dims.iter().any(|&d| d < p.window) {
        return Err(Error::InvalidArgument(format!("SSIM window {} exceeds dims {:?}", p.window, dims)));
    }
    let (a, b) = (x.data(), reference.data());
    let sx = Integral::new(dims, |i| a[i]);
    let sy = Integral::new(dims, |i| b[i]);
    let sxx = Integral::new(dims, |i| a[i] * a[i]);
    let syy = Integral::new(dims, |i| b[i] * b[i]);
    let sxy = Integral::new(dims, |i| a[i] * b[i]);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let w = p.window;
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims[2] - w {
        for y in 0..=dims[1] - w {
            for xx in 0..=dims[0] - w {
                let lo = [xx, y, z];
                let mx = sx.box_sum(lo, w) / n;
                let my = sy.box_sum(lo, w) / n;
                let vx = (sxx.box_sum(lo, w) / n - mx * mx).max(0.0);
                let vy = (syy.box_sum(lo, w) / n - my * my).max(0.0);
                let cxy = sxy.box_sum(lo, w) / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Registered metric names accepted by [`EvalReport`].
pub const METRIC_NAMES: &[&str] = &[
    "dice",
    "dice_mean",
    "nmse",
    "ssim",
    "field_nmse",
    "fp_fraction",
    "core_dice",
    "volume",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub metric: String,
    pub scope: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl EvalReport {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self { tool_version: env!("CARGO_PKG_VERSION").to_string(), seed, config, rows: Vec::new() }
    }

    /// Appends a row; the metric must be registered and the value finite.
    pub fn push(&mut self, case: &str, metric: &str, scope: &str, value: f64) -> Result<()> {
        if !METRIC_NAMES.contains(&metric) {
            return Err(Error::InvalidArgument(format!("unregistered metric {metric:?}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{case}/{metric}/{scope}")));
        }
        self.rows.push(ReportRow { case: case.into(), metric: metric.into(), scope: scope.into(), value });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,metric,scope,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.case, r.metric, r.scope, r.value));
        }
        s
    }

    pub fn values(&self, metric: &str, scope: &str) -> Vec<(String, f64)> {
        self.rows.iter().filter(|r| r.metric == metric && r.scope == scope).map(|r| (r.case.clone(), r.value)).collect()
    }
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ReportFormat::Csv => report.to_csv().into_bytes(),
        ReportFormat::Json => serde_json::to_vec_pretty(report)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of grid voxels set in `mask`.
pub fn volume_fraction(mask: &Mask) -> f64 {
    mask.count() as f64 / mask.len() as f64
}

/// Mean of `values`, NaN-free input assumed.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldKind;
    use crate::rng::uniform;
    use crate::volume::{GridGeometry, Volume};

    fn g(n: usize) -> GridGeometry {
        GridGeometry::with_dims([n, n, n]).unwrap()
    }

    fn cube(n: usize, x0: usize) -> Mask {
        Volume::from_fn(g(n), move |c| (x0..x0 + 2).contains(&c[0]) && (1..3).contains(&c[1]) && (1..3).contains(&c[2]))
    }

    #[test]
    fn dice_examples() {
        let a = cube(6, 1);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube(6, 4)).unwrap(), 0.0);
        assert_eq!(dice(&a, &cube(6, 2)).unwrap(), 0.5);
        let e = Volume::filled(g(6), false);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &Volume::filled(g(5), false)).is_err());
    }

    #[test]
    fn perilesional_examples() {
        let n = 9;
        let lesion: Mask = Volume::from_fn(g(n), |c| c == [4, 4, 4]);
        let region = perilesional_region(&lesion, 1.0).unwrap();
        assert_eq!(region.count(), 7);
        let a = cube(n, 1);
        let b = cube(n, 2);
        let huge = 3.0 * n as f64;
        assert_eq!(dice_perilesional(&a, &b, &lesion, huge).unwrap(), dice(&a, &b).unwrap());
        // identical near the lesion, different far away
        let near: Mask = Volume::from_fn(g(n), |c| c == [4, 4, 5]);
        let far_a = near.or(&cube(n, 0)).unwrap();
        let far_b = near.or(&cube(n, 6)).unwrap();
        assert_eq!(dice_perilesional(&far_a, &far_b, &lesion, 1.5).unwrap(), 1.0);
        assert!(dice_perilesional(&a, &b, &Volume::filled(g(n), false), 3.0).is_err());
    }

    #[test]
    fn nmse_examples() {
        let r = ScalarVolume::from_fn(g(4), |c| 1.0 + c[0] as f64 + 0.5 * c[2] as f64);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        assert!((nmse(&r.map(|v| 1.1 * v), &r).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(nmse(&ScalarVolume::zeros(g(4)), &r).unwrap(), 1.0);
        assert!(nmse(&r, &ScalarVolume::zeros(g(4))).is_err());
    }

    #[test]
    fn field_nmse_examples() {
        let f = VectorField::from_fn(g(4), FieldKind::Displacement, |x| [x[0], -x[1] + 1.0, 0.5]);
        assert_eq!(field_nmse(&f, &f).unwrap(), 0.0);
        let zero = VectorField::zeros(g(4), FieldKind::Displacement);
        // one unit of NMSE per non-trivial component
        assert!((field_nmse(&zero, &f).unwrap() - 3.0).abs() < 1e-12);
        let only_x = VectorField::from_fn(g(4), FieldKind::Displacement, |x| [x[0] + 1.0, 0.0, 0.0]);
        assert!((field_nmse(&zero, &only_x).unwrap() - 1.0).abs() < 1e-12);
        assert!((field_nmse(&only_x.scaled(1.1), &only_x).unwrap() - 0.01).abs() < 1e-12);
        assert!(field_nmse(&f, &zero).is_err());
    }

    // Direct per-window evaluation, no summed tables.
    fn ssim_oracle(x: &ScalarVolume, y: &ScalarVolume, p: SsimParams) -> f64 {
        let d = x.dims();
        let w = p.window;
        let n = (w * w * w) as f64;
        let (c1, c2) = ((p.k1 * p.data_range).powi(2), (p.k2 * p.data_range).powi(2));
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for z in 0..=d[2] - w {
            for yy in 0..=d[1] - w {
                for xx in 0..=d[0] - w {
                    let mut px = Vec::new();
                    let mut py = Vec::new();
                    for k in 0..w {
                        for j in 0..w {
                            for i in 0..w {
                                px.push(x.at(xx + i, yy + j, z + k));
                                py.push(y.at(xx + i, yy + j, z + k));
                            }
                        }
                    }
                    let mx = px.iter().sum::<f64>() / n;
                    let my = py.iter().sum::<f64>() / n;
                    let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                    acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    cnt += 1.0;
                }
            }
        }
        acc / cnt
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let x = ScalarVolume::from_fn(g(16), |c| uniform(1, 0, (c[0] + 16 * (c[1] + 16 * c[2])) as u64));
        let y = ScalarVolume::from_fn(g(16), |c| {
            0.7 * uniform(1, 0, (c[0] + 16 * (c[1] + 16 * c[2])) as u64) + 0.3 * uniform(2, 0, (c[0] * 31 + c[1] + c[2] * 7) as u64)
        });
        assert!((ssim3d(&x, &x, p).unwrap() - 1.0).abs() < 1e-12);
        let c = ScalarVolume::filled(g(8), 0.4);
        assert!((ssim3d(&c, &c, p).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim3d(&x, &y, p).unwrap();
        assert!((s - ssim_oracle(&x, &y, p)).abs() < 1e-9);
        assert!((s - ssim3d(&y, &x, p).unwrap()).abs() < 1e-12);
        assert!(ssim3d(&x, &y, SsimParams { window: 17, ..p }).is_err());
        assert!(ssim3d(&x, &y, SsimParams { window: 4, ..p }).is_err());
    }

    #[test]
    fn report_csv_and_json() {
        let mut r = EvalReport::new(7, serde_json::json!({"k": 1}));
        assert_eq!(r.to_csv(), "case,metric,scope,value\n");
        r.push("case_000", "dice", "roi:3", 0.75).unwrap();
        r.push("case_000", "nmse", "whole", 0.125).unwrap();
        assert!(r.push("case_000", "bogus", "whole", 1.0).is_err());
        assert!(r.push("case_000", "dice", "whole", f64::NAN).is_err());
        assert_eq!(r.to_csv(), "case,metric,scope,value\ncase_000,dice,roi:3,0.75\ncase_000,nmse,whole,0.125\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        emit_report(&r, &p, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(emit_report(&r, dir.path().join("missing/r.csv"), ReportFormat::Csv).is_err());
    }
}
