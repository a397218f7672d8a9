//! Denoising-diffusion machinery for masked inpainting, plus a deterministic
//! harmonic fallback.
//!
//! Mask convention: `m = true` marks the region to synthesize. All Gaussian
//! draws come from [`crate::rng`] keyed by `(seed, stream, voxel)` where the
//! stream encodes the step and purpose, so sampling is reproducible under any
//! thread schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::volume::{GridGeometry, Mask, ScalarVolume, Volume};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
/// Step count the default beta range is calibrated for.
pub const REFERENCE_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if !(1..=10_000).contains(&steps) {
            return Err(Error::InvalidArgument(format!("schedule length must be in 1..=10000, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Default linear range with betas rescaled by `1000 / steps`, so short
    /// chains still end near pure noise.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let k = REFERENCE_STEPS as f64 / steps.max(1) as f64;
        Self::linear(steps, (DEFAULT_BETA_START * k).min(0.5), (DEFAULT_BETA_END * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `beta_t` for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// Standard-normal volume keyed by `(seed, stream, voxel)`.
pub fn gaussian_noise(geom: &GridGeometry, seed: u64, stream: u64) -> ScalarVolume {
    Volume::from_fn(*geom, |c| rng::normal(seed, stream, geom.index(c[0], c[1], c[2]) as u64))
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(x0: &ScalarVolume, t: usize, eps: &ScalarVolume, sched: &NoiseSchedule) -> Result<ScalarVolume> {
    sched.check(t)?;
    x0.geometry().ensure_same(eps.geometry())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (xd, ed) = (x0.data(), eps.data());
    Volume::new(*x0.geometry(), par::map_indices(x0.len(), |i| a * xd[i] + b * ed[i]))
}

/// Algebraic inverse of [`forward_noise`] given the noise.
pub fn predict_x0(x_t: &ScalarVolume, t: usize, eps: &ScalarVolume, sched: &NoiseSchedule) -> Result<ScalarVolume> {
    sched.check(t)?;
    x_t.geometry().ensure_same(eps.geometry())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (xd, ed) = (x_t.data(), eps.data());
    Volume::new(*x_t.geometry(), par::map_indices(x_t.len(), |i| (xd[i] - b * ed[i]) / a))
}

/// Noisy inside the mask, clean outside.
pub fn masked_forward(x0: &ScalarVolume, x_t: &ScalarVolume, m: &Mask) -> Result<ScalarVolume> {
    x0.geometry().ensure_same(x_t.geometry())?;
    x0.geometry().ensure_same(m.geometry())?;
    let (c, n, md) = (x0.data(), x_t.data(), m.data());
    Volume::new(*x0.geometry(), par::map_indices(x0.len(), |i| if md[i] { n[i] } else { c[i] }))
}

/// Noise predictor `eps_hat(x_t, t, m)`.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &ScalarVolume, t: usize, sched: &NoiseSchedule, mask: Option<&Mask>) -> Result<ScalarVolume>;
}

/// Exact noise prediction for an independent Gaussian prior `x0 ~ N(mu, var)`.
#[derive(Clone, Debug)]
pub struct GaussianAnalyticDenoiser {
    mu: ScalarVolume,
    var: f64,
}

pub fn gaussian_analytic_denoiser(mu: ScalarVolume, var: f64) -> Result<GaussianAnalyticDenoiser> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::InvalidArgument(format!("prior variance must be positive, got {var}")));
    }
    Ok(GaussianAnalyticDenoiser { mu, var })
}

impl GaussianAnalyticDenoiser {
    /// Posterior mean `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x_t: &ScalarVolume, t: usize, sched: &NoiseSchedule) -> Result<ScalarVolume> {
        sched.check(t)?;
        x_t.geometry().ensure_same(self.mu.geometry())?;
        let ab = sched.alpha_bar(t);
        let (xd, md, var) = (x_t.data(), self.mu.data(), self.var);
        let denom = ab * var + (1.0 - ab);
        Volume::new(*x_t.geometry(), par::map_indices(x_t.len(), |i| (ab.sqrt() * var * xd[i] + (1.0 - ab) * md[i]) / denom))
    }
}

impl Denoiser for GaussianAnalyticDenoiser {
    fn predict(&self, x_t: &ScalarVolume, t: usize, sched: &NoiseSchedule, _mask: Option<&Mask>) -> Result<ScalarVolume> {
        let e = self.posterior_mean(x_t, t, sched)?;
        let ab = sched.alpha_bar(t);
        let (xd, ed) = (x_t.data(), e.data());
        Volume::new(*x_t.geometry(), par::map_indices(x_t.len(), |i| (xd[i] - ab.sqrt() * ed[i]) / (1.0 - ab).sqrt()))
    }
}

/// Untrained smoke-test denoiser: the clean image is estimated by a local box
/// mean of `x_t` rescaled by `1 / sqrt(abar_t)`.
#[derive(Clone, Copy, Debug)]
pub struct NeighborhoodDenoiser {
    radius: usize,
}

pub fn neighborhood_denoiser(radius: usize) -> Result<NeighborhoodDenoiser> {
    if radius < 1 {
        return Err(Error::InvalidArgument("neighborhood radius must be >= 1".into()));
    }
    Ok(NeighborhoodDenoiser { radius })
}

/// Mean over the in-grid part of the `(2r+1)^3` box around each voxel.
pub fn box_mean(vol: &ScalarVolume, radius: usize) -> ScalarVolume {
    let g = *vol.geometry();
    let mut data = vol.data().to_vec();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    for axis in 0..3 {
        let n = g.dims[axis];
        let s = strides[axis];
        let src = data.clone();
        data = par::map_indices(g.len(), |i| {
            let c = g.coords(i)[axis];
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(n - 1);
            let base = i - c * s;
            (lo..=hi).map(|k| src[base + k * s]).sum::<f64>() / (hi - lo + 1) as f64
        });
    }
    Volume::new(g, data).expect("same geometry")
}

impl Denoiser for NeighborhoodDenoiser {
    fn predict(&self, x_t: &ScalarVolume, t: usize, sched: &NoiseSchedule, _mask: Option<&Mask>) -> Result<ScalarVolume> {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        let bm = box_mean(x_t, self.radius);
        let (xd, bd) = (x_t.data(), bm.data());
        // x0_hat = bm / sqrt(ab), so eps_hat = (x_t - bm) / sqrt(1 - ab)
        Volume::new(*x_t.geometry(), par::map_indices(x_t.len(), |i| (xd[i] - bd[i]) / (1.0 - ab).sqrt()))
    }
}

/// Ancestral mean update with an explicit noise prediction; adds
/// `sqrt(beta_t) z` when `t > 1` and `z` is given.
pub fn reverse_step_with(
    x_t: &ScalarVolume,
    t: usize,
    eps_hat: &ScalarVolume,
    sched: &NoiseSchedule,
    z: Option<&ScalarVolume>,
) -> Result<ScalarVolume> {
    sched.check(t)?;
    x_t.geometry().ensure_same(eps_hat.geometry())?;
    if let Some(z) = z {
        x_t.geometry().ensure_same(z.geometry())?;
    }
    let (a, ab, b) = (sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    let sigma = if t > 1 { b.sqrt() } else { 0.0 };
    let (xd, ed) = (x_t.data(), eps_hat.data());
    let zd = z.map(|z| z.data());
    let data = par::map_indices(x_t.len(), |i| {
        let mean = inv * (xd[i] - coef * ed[i]);
        match zd {
            Some(zd) if sigma > 0.0 => mean + sigma * zd[i],
            _ => mean,
        }
    });
    Volume::new(*x_t.geometry(), data)
}

pub fn reverse_step(
    x_t: &ScalarVolume,
    t: usize,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    mask: Option<&Mask>,
    z: Option<&ScalarVolume>,
) -> Result<ScalarVolume> {
    let eps = denoiser.predict(x_t, t, sched, mask)?;
    reverse_step_with(x_t, t, &eps, sched, z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InpaintMode {
    /// Paste the clean known image outside the mask after every step.
    PaperCleanKnown,
    /// Paste the known image forward-noised to the current step (RePaint).
    RepaintNoisedKnown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintConfig {
    pub mode: InpaintMode,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub resample_jumps: usize,
}

// stream purposes
const STREAM_INIT: u64 = 1;
const STREAM_REVERSE: u64 = 2;
const STREAM_KNOWN: u64 = 3;
const STREAM_JUMP: u64 = 4;

fn stream(purpose: u64, t: usize, jump: usize) -> u64 {
    (purpose << 48) | ((jump as u64) << 24) | t as u64
}

fn paste(inside: &ScalarVolume, outside: &ScalarVolume, m: &Mask) -> ScalarVolume {
    masked_forward(outside, inside, m).expect("shared geometry")
}

/// Masked reverse-diffusion inpainting. Voxels outside `m` equal `x0_known`
/// bitwise in the output.
pub fn inpaint_sample(x0_known: &ScalarVolume, m: &Mask, denoiser: &dyn Denoiser, cfg: &InpaintConfig) -> Result<ScalarVolume> {
    x0_known.geometry().ensure_same(m.geometry())?;
    if !m.any() {
        return Err(Error::EmptyMask("inpainting mask".into()));
    }
    if x0_known.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("known image".into()));
    }
    let g = *x0_known.geometry();
    let sched = &cfg.schedule;
    let steps = sched.steps();
    let known_at = |t: usize, jump: usize| -> Result<ScalarVolume> {
        match cfg.mode {
            InpaintMode::PaperCleanKnown => Ok(x0_known.clone()),
            InpaintMode::RepaintNoisedKnown if t == 0 => Ok(x0_known.clone()),
            InpaintMode::RepaintNoisedKnown => {
                forward_noise(x0_known, t, &gaussian_noise(&g, cfg.seed, stream(STREAM_KNOWN, t, jump)), sched)
            }
        }
    };
    let mut x = paste(&gaussian_noise(&g, cfg.seed, stream(STREAM_INIT, steps, 0)), &known_at(steps, 0)?, m);
    for t in (1..=steps).rev() {
        let jumps = if cfg.mode == InpaintMode::RepaintNoisedKnown && t > 1 { cfg.resample_jumps } else { 0 };
        for jump in 0..=jumps {
            let z = (t > 1).then(|| gaussian_noise(&g, cfg.seed, stream(STREAM_REVERSE, t, jump)));
            let unknown = reverse_step(&x, t, denoiser, sched, Some(m), z.as_ref())?;
            let prev = paste(&unknown, &known_at(t - 1, jump)?, m);
            if jump < jumps {
                // renoise x_{t-1} back to step t and repeat
                let (a, b) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
                let e = gaussian_noise(&g, cfg.seed, stream(STREAM_JUMP, t, jump));
                let (pd, ed) = (prev.data(), e.data());
                x = Volume::new(g, par::map_indices(g.len(), |i| a * pd[i] + b * ed[i]))?;
            } else {
                x = prev;
            }
        }
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inpainting sample".into()));
    }
    Ok(paste(&x, x0_known, m))
}

/// Result of [`harmonic_inpaint`].
#[derive(Clone, Debug)]
pub struct HarmonicResult {
    pub volume: ScalarVolume,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the discrete Laplace equation inside `m` with Dirichlet values from
/// the complement (Neumann at the grid faces) by successive over-relaxation.
pub fn harmonic_inpaint(vol: &ScalarVolume, m: &Mask, tol: f64, max_iter: usize) -> Result<HarmonicResult> {
    vol.geometry().ensure_same(m.geometry())?;
    if !m.any() {
        return Err(Error::EmptyMask("harmonic inpainting mask".into()));
    }
    if m.all() {
        return Err(Error::InvalidArgument("harmonic inpainting needs a nonempty known region".into()));
    }
    let g = *vol.geometry();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let unknown: Vec<usize> = (0..g.len()).filter(|&i| m.data()[i]).collect();
    let neighbours: Vec<Vec<usize>> = unknown
        .iter()
        .map(|&i| {
            let c = g.coords(i);
            let mut n = Vec::with_capacity(6);
            for a in 0..3 {
                if c[a] > 0 {
                    n.push(i - strides[a]);
                }
                if c[a] + 1 < g.dims[a] {
                    n.push(i + strides[a]);
                }
            }
            n
        })
        .collect();
    let mut u = vol.data().to_vec();
    let boundary: Vec<f64> = unknown
        .iter()
        .zip(&neighbours)
        .flat_map(|(_, n)| n.iter().filter(|&&j| !m.data()[j]).map(|&j| vol.data()[j]))
        .collect();
    let init = if boundary.is_empty() { 0.0 } else { boundary.iter().sum::<f64>() / boundary.len() as f64 };
    for &i in &unknown {
        u[i] = init;
    }
    let omega = 1.9;
    let residual = |u: &[f64]| -> f64 {
        unknown
            .iter()
            .zip(&neighbours)
            .map(|(&i, n)| (n.iter().map(|&j| u[j]).sum::<f64>() / n.len() as f64 - u[i]).abs())
            .fold(0.0, f64::max)
    };
    let mut res = residual(&u);
    let mut it = 0;
    while res > tol {
        if it >= max_iter {
            return Err(Error::NotConverged { iterations: it, residual: res });
        }
        for (&i, n) in unknown.iter().zip(&neighbours) {
            let avg = n.iter().map(|&j| u[j]).sum::<f64>() / n.len() as f64;
            u[i] += omega * (avg - u[i]);
        }
        it += 1;
        res = residual(&u);
    }
    Ok(HarmonicResult { volume: Volume::new(g, u)?, iterations: it, residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(d: [usize; 3]) -> GridGeometry {
        GridGeometry::with_dims(d).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.01, 0.01).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        // independent evaluation of the cumulative product in log space
        let log: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((2..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        let short = NoiseSchedule::scaled_default(50).unwrap();
        assert!(short.alpha_bar(50) < 1e-4);
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::scaled_default(50).unwrap();
        let geom = g([4, 4, 4]);
        let x0 = ScalarVolume::from_fn(geom, |c| c[0] as f64 - 1.5);
        let eps = gaussian_noise(&geom, 1, 1);
        let zero = ScalarVolume::zeros(geom);
        let a = forward_noise(&x0, 10, &zero, &s).unwrap();
        assert!(a.data().iter().zip(x0.data()).all(|(y, x)| *y == s.alpha_bar(10).sqrt() * x));
        let b = forward_noise(&zero, 10, &eps, &s).unwrap();
        assert!(b.data().iter().zip(eps.data()).all(|(y, e)| *y == (1.0 - s.alpha_bar(10)).sqrt() * e));
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 51, &eps, &s).is_err());
    }

    #[test]
    fn masked_forward_examples() {
        let geom = g([4, 2, 2]);
        let x0 = ScalarVolume::filled(geom, 1.0);
        let xt = ScalarVolume::filled(geom, -3.0);
        assert_eq!(masked_forward(&x0, &xt, &Volume::filled(geom, false)).unwrap(), x0);
        assert_eq!(masked_forward(&x0, &xt, &Volume::filled(geom, true)).unwrap(), xt);
        let half: Mask = Volume::from_fn(geom, |c| c[0] < 2);
        let mixed = masked_forward(&x0, &xt, &half).unwrap();
        assert!(mixed.data().iter().enumerate().all(|(i, &v)| v == if geom.coords(i)[0] < 2 { -3.0 } else { 1.0 }));
    }

    #[test]
    fn reverse_step_specializations() {
        let s = NoiseSchedule::scaled_default(50).unwrap();
        let geom = g([3, 3, 3]);
        let x = ScalarVolume::from_fn(geom, |c| c[1] as f64 + 0.5);
        let zero = ScalarVolume::zeros(geom);
        let y = reverse_step_with(&x, 7, &zero, &s, Some(&zero)).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b / s.alpha(7).sqrt()).abs() < 1e-15));
        // exact eps at t = 1 inverts the closed form
        let eps = gaussian_noise(&geom, 5, 5);
        let x1 = forward_noise(&x, 1, &eps, &s).unwrap();
        let back = reverse_step_with(&x1, 1, &eps, &s, None).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn analytic_denoiser_examples() {
        let s = make_schedule(3, 0.2, 0.5).unwrap();
        let geom = g([2, 2, 2]);
        assert!(gaussian_analytic_denoiser(ScalarVolume::zeros(geom), 0.0).is_err());

        let mu = ScalarVolume::from_fn(geom, |c| c[0] as f64 * 2.0 - 1.0);
        let d = gaussian_analytic_denoiser(mu.clone(), 1e-12).unwrap();
        let x = gaussian_noise(&geom, 2, 2);
        let eps = d.predict(&x, 2, &s, None).unwrap();
        let ab = s.alpha_bar(2);
        for i in 0..geom.len() {
            let expected = (x.data()[i] - ab.sqrt() * mu.data()[i]) / (1.0 - ab).sqrt();
            assert!((eps.data()[i] - expected).abs() < 1e-9);
        }
        for t in 1..=3 {
            let xt = mu.map(|m| m * s.alpha_bar(t).sqrt());
            let d = gaussian_analytic_denoiser(mu.clone(), 0.7).unwrap();
            assert!(d.predict(&xt, t, &s, None).unwrap().data().iter().all(|e| e.abs() < 1e-12));
        }

        // abar = 0.5 single step; mu = 0, var = 1, x_t = 1
        let half = make_schedule(1, 0.5, 0.5).unwrap();
        let one = g([2, 2, 2]);
        let d = gaussian_analytic_denoiser(ScalarVolume::zeros(one), 1.0).unwrap();
        let xt = ScalarVolume::filled(one, 1.0);
        let e = d.posterior_mean(&xt, 1, &half).unwrap();
        let eps = d.predict(&xt, 1, &half, None).unwrap();
        assert!((e.data()[0] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((eps.data()[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_denoiser_examples() {
        let s = NoiseSchedule::scaled_default(10).unwrap();
        let geom = g([5, 5, 5]);
        assert!(neighborhood_denoiser(0).is_err());
        let d = neighborhood_denoiser(1).unwrap();
        let c = ScalarVolume::filled(geom, 2.5);
        assert!(d.predict(&c, 4, &s, None).unwrap().data().iter().all(|e| e.abs() < 1e-12));

        let x = ScalarVolume::from_fn(geom, |c| (c[0] * 3 + c[1] * 5 + c[2]) as f64);
        let global = x.mean();
        assert!(box_mean(&x, 10).data().iter().all(|v| (v - global).abs() < 1e-9));

        let mut imp = ScalarVolume::zeros(geom);
        let ci = geom.index(2, 2, 2);
        imp.data_mut()[ci] = 27.0;
        let eps = d.predict(&imp, 3, &s, None).unwrap();
        let scale = (1.0 - s.alpha_bar(3)).sqrt();
        // center: 27 minus its 3x3x3 mean (1); corner of the box: 0 minus 1
        assert!((eps.data()[ci] - 26.0 / scale).abs() < 1e-12);
        assert!((eps.at(1, 1, 1) + 1.0 / scale).abs() < 1e-12);
        // an impulse on a face sees a truncated 2x3x3 box
        let mut face = ScalarVolume::zeros(geom);
        face.data_mut()[geom.index(0, 2, 2)] = 18.0;
        let eps = d.predict(&face, 3, &s, None).unwrap();
        assert!((eps.at(0, 2, 2) - 17.0 / scale).abs() < 1e-12);
    }

    fn ramp_case() -> (ScalarVolume, Mask) {
        let geom = g([12, 12, 12]);
        let ramp = ScalarVolume::from_fn(geom, |c| 0.5 * c[0] as f64 - 0.25 * c[1] as f64 + 0.1 * c[2] as f64 + 3.0);
        let mask: Mask = Volume::from_fn(geom, |c| {
            let d = [c[0] as f64 - 6.0, c[1] as f64 - 5.0, c[2] as f64 - 6.0];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= 2.5
        });
        (ramp, mask)
    }

    #[test]
    fn inpaint_keeps_known_voxels() {
        let (ramp, mask) = ramp_case();
        for mode in [InpaintMode::PaperCleanKnown, InpaintMode::RepaintNoisedKnown] {
            let cfg = InpaintConfig { mode, schedule: NoiseSchedule::scaled_default(20).unwrap(), seed: 3, resample_jumps: 1 };
            let out = inpaint_sample(&ramp, &mask, &neighborhood_denoiser(1).unwrap(), &cfg).unwrap();
            for i in 0..ramp.len() {
                if !mask.data()[i] {
                    assert_eq!(out.data()[i].to_bits(), ramp.data()[i].to_bits());
                }
            }
            let again = inpaint_sample(&ramp, &mask, &neighborhood_denoiser(1).unwrap(), &cfg).unwrap();
            assert_eq!(out, again);
        }
        let cfg = InpaintConfig {
            mode: InpaintMode::PaperCleanKnown,
            schedule: NoiseSchedule::scaled_default(5).unwrap(),
            seed: 0,
            resample_jumps: 0,
        };
        assert!(inpaint_sample(&ramp, &Volume::filled(*ramp.geometry(), false), &neighborhood_denoiser(1).unwrap(), &cfg).is_err());
    }

    #[test]
    fn harmonic_examples() {
        let (ramp, mask) = ramp_case();
        let tol = 1e-9;
        let r = harmonic_inpaint(&ramp, &mask, tol, 10_000).unwrap();
        assert!(r.residual <= tol);
        let max_err = r.volume.data().iter().zip(ramp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-6, "{max_err}");

        let c = ScalarVolume::filled(*ramp.geometry(), 0.8);
        let out = harmonic_inpaint(&c, &mask, 1e-10, 1000).unwrap();
        assert!(out.volume.data().iter().all(|&v| (v - 0.8).abs() < 1e-9));

        assert!(matches!(harmonic_inpaint(&ramp, &mask, 1e-12, 1), Err(Error::NotConverged { .. })));
        assert!(harmonic_inpaint(&ramp, &Volume::filled(*ramp.geometry(), false), 1e-6, 10).is_err());
    }
}
