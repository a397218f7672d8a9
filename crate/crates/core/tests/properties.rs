use proptest::prelude::*;

use lesion_core::diffusion::{forward_noise, gaussian_noise, inpaint_sample, neighborhood_denoiser, predict_x0, InpaintConfig, InpaintMode, NoiseSchedule};
use lesion_core::field::{bending_energy, compose, divergence, exp_velocity, jacobian_determinant, warp, Interp};
use lesion_core::metrics::{dice, dice_perilesional, nmse, ssim3d, SsimParams};
use lesion_core::nifti::{decode, encode, NiftiVolume};
use lesion_core::noise::{make_blob_mesh, perlin3, signed_distance, voxelize_blob, PerlinTable};
use lesion_core::rng::{hash3, uniform};
use lesion_core::{FieldKind, GridGeometry, LabelVolume, Mask, ScalarVolume, VectorField, Volume};

fn geom(n: usize) -> GridGeometry {
    GridGeometry::with_dims([n, n, n]).unwrap()
}

fn random_volume(g: GridGeometry, seed: u64) -> ScalarVolume {
    Volume::from_fn(g, |c| uniform(seed, 0, g.index(c[0], c[1], c[2]) as u64))
}

fn random_mask(g: GridGeometry, seed: u64, p: f64) -> Mask {
    Volume::from_fn(g, |c| uniform(seed, 1, g.index(c[0], c[1], c[2]) as u64) < p)
}

/// Perlin velocity (one table per component) scaled to `max_norm`.
fn smooth_velocity(g: GridGeometry, seed: u64, max_norm: f64) -> VectorField {
    let tables = [0, 1, 2].map(|a| PerlinTable::new(hash3(seed, 8, a)));
    // tapered to zero at the faces, as a flow of the box onto itself must be
    let taper = |p: [f64; 3]| (0..3).map(|a| (std::f64::consts::PI * (p[a] + 0.5) / g.dims[a] as f64).sin()).product::<f64>();
    let raw = VectorField::from_fn(g, FieldKind::Velocity, |p| [0, 1, 2].map(|a| taper(p) * tables[a].noise(p, 0.03)));
    raw.scaled(max_norm / raw.max_norm())
}

fn max_norm_interior(f: &VectorField, margin: usize) -> f64 {
    let g = *f.geometry();
    (0..g.len())
        .filter(|&i| g.coords(i).iter().zip(g.dims).all(|(&c, d)| c >= margin && c + margin < d))
        .map(|i| f.data()[i].iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn trilinear_hits_stored_values(seed in any::<u64>(), x in 0usize..8, y in 0usize..8, z in 0usize..8) {
        let v = random_volume(geom(8), seed);
        prop_assert_eq!(v.sample([x as f64, y as f64, z as f64]), v.at(x, y, z));
    }

    #[test]
    fn trilinear_exact_on_affine(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -5.0..5.0f64,
                                 p in prop::array::uniform3(0.0..7.0f64)) {
        let v = Volume::from_fn(geom(8), |q| a * q[0] as f64 + b * q[1] as f64 + c * q[2] as f64 + d);
        let want = a * p[0] + b * p[1] + c * p[2] + d;
        prop_assert!((v.sample(p) - want).abs() <= 1e-6 * want.abs().max(1.0));
    }

    #[test]
    fn constant_gradient_is_zero(k in -10.0..10.0f64) {
        let v = Volume::filled(geom(6), k);
        for comp in v.spatial_gradient().unwrap() {
            prop_assert!(comp.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn smoothing_keeps_interior_mean(seed in any::<u64>(), sigma in 0.5..1.5f64) {
        let g = geom(20);
        // support well inside the grid so no mass reaches the edges
        let v = Volume::from_fn(g, |c| if c.iter().all(|&x| (8..12).contains(&x)) { uniform(seed, 3, g.index(c[0], c[1], c[2]) as u64) } else { 0.0 });
        let s = v.gaussian_smooth(sigma).unwrap();
        prop_assert!((s.mean() - v.mean()).abs() <= 1e-6 * v.mean().abs());
    }

    #[test]
    fn nifti_round_trip(seed in any::<u64>(), dims in prop::array::uniform3(2usize..6), spacing in prop::array::uniform3(0.5..3.0f64)) {
        let g = GridGeometry::new(dims, spacing.map(|x| x as f32 as f64), [0.0; 3]).unwrap();
        // float32-representable intensities survive exactly
        let s: ScalarVolume = Volume::from_fn(g, |c| uniform(seed, 4, g.index(c[0], c[1], c[2]) as u64) as f32 as f64);
        let l: LabelVolume = Volume::from_fn(g, |c| (uniform(seed, 5, g.index(c[0], c[1], c[2]) as u64) * 300.0) as u16);
        let m = random_mask(g, seed, 0.5);
        prop_assert_eq!(decode(&encode(&s).unwrap()).unwrap(), NiftiVolume::Scalar(s));
        prop_assert_eq!(decode(&encode(&l).unwrap()).unwrap(), NiftiVolume::Label(l));
        prop_assert_eq!(decode(&encode(&m).unwrap()).unwrap(), NiftiVolume::Mask(m));
    }

    #[test]
    fn zero_warp_is_identity(seed in any::<u64>()) {
        let g = geom(6);
        let zero = VectorField::zeros(g, FieldKind::Displacement);
        let s = random_volume(g, seed);
        let m = random_mask(g, seed, 0.3);
        let l: LabelVolume = m.map(u16::from);
        prop_assert_eq!(warp(&s, &zero, Interp::Linear).unwrap(), s);
        prop_assert_eq!(warp(&m, &zero, Interp::Nearest).unwrap(), m);
        prop_assert_eq!(warp(&l, &zero, Interp::Nearest).unwrap(), l);
    }

    #[test]
    fn affine_fields_have_no_bending_and_constant_fields_no_divergence(mk in prop::array::uniform9(-8i32..=8), tk in prop::array::uniform3(-64i32..=64)) {
        // dyadic coefficients keep every stencil sum exact in floating point
        let m = mk.map(|k| k as f64 / 64.0);
        let t = tk.map(|k| k as f64 / 32.0);
        let g = geom(8);
        let affine = VectorField::from_fn(g, FieldKind::Displacement, |p| {
            [0, 1, 2].map(|r| m[3 * r] * p[0] + m[3 * r + 1] * p[1] + m[3 * r + 2] * p[2] + t[r])
        });
        prop_assert_eq!(bending_energy(&affine).unwrap(), 0.0);
        let constant = VectorField::from_fn(g, FieldKind::Displacement, |_| t);
        prop_assert!(divergence(&constant).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn perlin_stays_in_range(seed in any::<u64>(), p in prop::array::uniform3(-50.0..50.0f64), f in 0.01..3.0f64) {
        let v = perlin3(&PerlinTable::new(seed), p, f);
        prop_assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn blob_volume_grows_with_radius(seed in any::<u64>(), r in 2.0..5.0f64, dr in 0.1..2.0f64) {
        let g = geom(24);
        let count = |radius: f64| {
            let mesh = make_blob_mesh([12.0; 3], radius, 0.2, 1.5, seed, 2).unwrap();
            voxelize_blob(&mesh, &g).unwrap().count()
        };
        prop_assert!(count(r) <= count(r + dr));
    }

    #[test]
    fn signed_distance_is_lipschitz(seed in any::<u64>(), a in 0usize..1000, b in 0usize..1000) {
        let g = geom(10);
        let m = random_mask(g, seed, 0.05);
        prop_assume!(m.any() && !m.all());
        let s = signed_distance(&m).unwrap();
        let (pa, pb) = (g.coords_f64(a), g.coords_f64(b));
        let dist = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
        prop_assert!((s.data()[a] - s.data()[b]).abs() <= dist + 1.0);
    }

    #[test]
    fn generation_is_reproducible(seed in any::<u64>()) {
        let g = geom(16);
        let mesh = || make_blob_mesh([8.0; 3], 4.0, 0.3, 1.5, seed, 2).unwrap();
        prop_assert_eq!(voxelize_blob(&mesh(), &g).unwrap(), voxelize_blob(&mesh(), &g).unwrap());
        prop_assert_eq!(gaussian_noise(&g, seed, 7), gaussian_noise(&g, seed, 7));
    }

    #[test]
    fn forward_noise_inverts(seed in any::<u64>(), t in 1usize..=50) {
        let g = geom(6);
        let sched = NoiseSchedule::scaled_default(50).unwrap();
        let x0 = random_volume(g, seed);
        let eps = gaussian_noise(&g, seed, 1);
        let back = predict_x0(&forward_noise(&x0, t, &eps, &sched).unwrap(), t, &eps, &sched).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dice_symmetric_and_bounded(seed in any::<u64>(), p in 0.05..0.9f64, q in 0.05..0.9f64) {
        let g = geom(8);
        let (a, b) = (random_mask(g, seed, p), random_mask(g, seed ^ 1, q));
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        if a.any() {
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }
        let lesion = random_mask(g, seed ^ 2, 0.02);
        prop_assume!(lesion.any());
        prop_assert!((dice_perilesional(&a, &b, &lesion, 8.0 * 3f64.sqrt()).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn nmse_zero_iff_equal(seed in any::<u64>(), k in 0usize..216, bump in 0.01..1.0f64) {
        let g = geom(6);
        let r = random_volume(g, seed).map(|v| v + 0.1);
        prop_assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        let mut x = r.clone();
        x.data_mut()[k] += bump;
        prop_assert!(nmse(&x, &r).unwrap() > 0.0);
    }

    #[test]
    fn ssim_identity_and_symmetry(seed in any::<u64>()) {
        let g = geom(10);
        let (x, y) = (random_volume(g, seed), random_volume(g, seed ^ 9));
        let p = SsimParams { window: 3, ..SsimParams::default() };
        prop_assert_eq!(ssim3d(&x, &x, p).unwrap(), 1.0);
        prop_assert!((ssim3d(&x, &y, p).unwrap() - ssim3d(&y, &x, p).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn exponential_is_diffeomorphic_and_inverse_consistent(seed in any::<u64>(), max in 0.5..5.0f64) {
        let g = GridGeometry::with_dims([48, 48, 40]).unwrap();
        let v = smooth_velocity(g, seed, max);
        let fwd = exp_velocity(&v, 6).unwrap();
        prop_assert!(jacobian_determinant(&fwd).unwrap().min_interior() > 0.0);
        let round = compose(&fwd, &exp_velocity(&v.negated(), 6).unwrap()).unwrap();
        prop_assert!(round.max_norm() <= 0.1);
    }

    #[test]
    fn squaring_converges(seed in any::<u64>(), max in 0.5..5.0f64) {
        let g = GridGeometry::with_dims([48, 48, 40]).unwrap();
        let v = smooth_velocity(g, seed, max);
        let runs: Vec<_> = [6, 8, 10].iter().map(|&s| exp_velocity(&v, s).unwrap()).collect();
        let gap = |a: &VectorField, b: &VectorField| {
            let d = VectorField::from_fn(g, FieldKind::Displacement, |p| {
                let i = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                [0, 1, 2].map(|k| a.data()[i][k] - b.data()[i][k])
            });
            max_norm_interior(&d, 6)
        };
        let (g6, g8) = (gap(&runs[0], &runs[1]), gap(&runs[1], &runs[2]));
        prop_assert!(jacobian_determinant(&runs[1]).unwrap().min_interior() > 0.0);
        // first-order start: each extra pair of squarings cuts the gap about 4x
        prop_assert!(g8 <= 1e-2, "{}", g8);
        prop_assert!(g8 <= g6 / 3.0 + 1e-9, "{} {}", g6, g8);
    }

    #[test]
    fn inpainting_keeps_known_voxels_and_seed(seed in any::<u64>(), jumps in 0usize..2) {
        let g = geom(8);
        let x0 = random_volume(g, seed);
        let m = random_mask(g, seed, 0.2);
        prop_assume!(m.any());
        let cfg = InpaintConfig { mode: InpaintMode::RepaintNoisedKnown, schedule: NoiseSchedule::scaled_default(10).unwrap(), seed, resample_jumps: jumps };
        let den = neighborhood_denoiser(1).unwrap();
        let a = inpaint_sample(&x0, &m, &den, &cfg).unwrap();
        for i in 0..g.len() {
            if !m.data()[i] {
                prop_assert_eq!(a.data()[i].to_bits(), x0.data()[i].to_bits());
            }
        }
        prop_assert_eq!(a, inpaint_sample(&x0, &m, &den, &cfg).unwrap());
    }
}
