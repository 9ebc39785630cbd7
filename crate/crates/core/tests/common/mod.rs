//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use volreg::models::{bending_energy, diffusion_energy, ffd_to_displacement, nmi_gradient_on_controls, FfdGrid};
use volreg::rng::SplitMix64;
use volreg::similarity::{objective_gradient, BinRange, JointHistogram, Objective};
use volreg::volume::{voxel_coords, Dims};
use volreg::warp::{warp_values, DisplacementField3};
use volreg::Volume3;

pub const GRADIENT_DIMS: Dims = [12, 12, 12];
pub const COMPONENTS_CHECKED: usize = 60;

pub fn random_volume(dims: Dims, rng: &mut SplitMix64) -> Volume3 {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.uniform(0.0, 100.0) as f32).collect();
    Volume3::new(dims, [1.0; 3], data).unwrap()
}

/// Smooth-ish image: a random low-frequency sum plus a little noise, so
/// windowed statistics are not dominated by noise.
pub fn textured_volume(dims: Dims, rng: &mut SplitMix64) -> Volume3 {
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| (std::array::from_fn(|_| rng.uniform(-0.9, 0.9)), rng.uniform(0.0, 6.28)))
        .collect();
    let n = dims.iter().product();
    let data = (0..n)
        .map(|i| {
            let p = voxel_coords(dims, i).map(|v| v as f64);
            let s: f64 = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum();
            (50.0 + 20.0 * s + rng.uniform(-2.0, 2.0)) as f32
        })
        .collect();
    Volume3::new(dims, [1.0; 3], data).unwrap()
}

/// Random displacements in (-1.5, 1.5) whose sample points keep at least
/// 0.02 voxel from every cell face, so a small perturbation stays inside
/// one trilinear cell.
pub fn random_field(dims: Dims, rng: &mut SplitMix64) -> DisplacementField3 {
    let data = (0..dims.iter().product())
        .map(|_| {
            std::array::from_fn(|_| {
                let whole = rng.uniform(-1.5, 1.5).trunc();
                whole + rng.uniform(0.02, 0.98) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }
            })
        })
        .collect();
    DisplacementField3::new(dims, data).unwrap()
}

fn sampled_components(n: usize, rng: &mut SplitMix64) -> Vec<(usize, usize)> {
    (0..COMPONENTS_CHECKED).map(|_| (rng.below(n as u64) as usize, rng.below(3) as usize)).collect()
}

fn relative(worst_abs: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        worst_abs / scale
    } else {
        worst_abs
    }
}

/// Max `|analytic - central difference| / max |analytic|` over sampled
/// components of `objective_gradient`.
pub fn objective_gradient_error(objective: Objective, window: usize, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let dims = GRADIENT_DIMS;
    let (fixed, moving) = if objective == Objective::LocalCc {
        (textured_volume(dims, &mut rng), textured_volume(dims, &mut rng))
    } else {
        (random_volume(dims, &mut rng), random_volume(dims, &mut rng))
    };
    let u = random_field(dims, &mut rng);
    let g = objective_gradient(&fixed, &moving, &u, objective, window).unwrap();
    let scale = g.gradient.data().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (idx, d) in sampled_components(u.data().len(), &mut rng) {
        let mut p = u.clone();
        p.data_mut()[idx][d] += h;
        let mut m = u.clone();
        m.data_mut()[idx][d] -= h;
        let fp = objective_gradient(&fixed, &moving, &p, objective, window).unwrap().value;
        let fm = objective_gradient(&fixed, &moving, &m, objective, window).unwrap().value;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g.gradient.data()[idx][d]).abs());
    }
    relative(worst, scale)
}

pub fn diffusion_gradient_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let u = random_field(GRADIENT_DIMS, &mut rng);
    let (_, grad) = diffusion_energy(&u).unwrap();
    let scale = grad.data().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (idx, d) in sampled_components(u.data().len(), &mut rng) {
        let mut p = u.clone();
        p.data_mut()[idx][d] += h;
        let mut m = u.clone();
        m.data_mut()[idx][d] -= h;
        let fd = (diffusion_energy(&p).unwrap().0 - diffusion_energy(&m).unwrap().0) / (2.0 * h);
        worst = worst.max((fd - grad.data()[idx][d]).abs());
    }
    relative(worst, scale)
}

pub fn random_grid(dims: Dims, spacing: f64, amplitude: f64, rng: &mut SplitMix64) -> FfdGrid {
    let mut g = FfdGrid::covering(dims, [spacing; 3]).unwrap();
    for c in g.coeffs_mut() {
        *c = std::array::from_fn(|_| rng.uniform(-amplitude, amplitude));
    }
    g
}

pub fn bending_gradient_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let g = random_grid(GRADIENT_DIMS, 3.0, 1.0, &mut rng);
    let (_, grad) = bending_energy(&g);
    let scale = grad.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (idx, d) in sampled_components(g.node_count(), &mut rng) {
        let mut p = g.clone();
        p.coeffs_mut()[idx][d] += h;
        let mut m = g.clone();
        m.coeffs_mut()[idx][d] -= h;
        let fd = (bending_energy(&p).0 - bending_energy(&m).0) / (2.0 * h);
        worst = worst.max((fd - grad[idx][d]).abs());
    }
    relative(worst, scale)
}

/// NMI with the control-gradient binning: 64 bins, fixed range for the
/// fixed image, original moving range for the warped image.
pub fn whole_volume_nmi(fixed: &Volume3, moving: &Volume3, g: &FfdGrid) -> f64 {
    let u = ffd_to_displacement(g, fixed.dims()).unwrap();
    let w = warp_values(moving.data(), moving.dims(), &u);
    JointHistogram::from_values(fixed.data(), &w, 64, BinRange::of(fixed.data()), BinRange::of(moving.data()))
        .normalized_mutual_information()
}

/// Max absolute difference between the localized control-point differences
/// and whole-volume re-warp differences, over sampled components.
pub fn nmi_control_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let dims = GRADIENT_DIMS;
    let fixed = volreg::volume::make_phantom([16; 3], seed).unwrap();
    let fixed = volreg::volume::downscale_to(&fixed, dims).unwrap();
    let truth = random_grid(dims, 4.0, 0.8, &mut rng);
    let moving = volreg::warp::apply_displacement(&fixed, &ffd_to_displacement(&truth, dims).unwrap()).unwrap();
    let g = random_grid(dims, 4.0, 0.3, &mut rng);
    let step = 0.1;
    let local = nmi_gradient_on_controls(&fixed, &moving, &g, step).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let node = rng.below(g.node_count() as u64) as usize;
        let d = rng.below(3) as usize;
        let mut p = g.clone();
        p.coeffs_mut()[node][d] += step;
        let mut m = g.clone();
        m.coeffs_mut()[node][d] -= step;
        let oracle = (whole_volume_nmi(&fixed, &moving, &p) - whole_volume_nmi(&fixed, &moving, &m)) / (2.0 * step);
        worst = worst.max((oracle - local[node][d]).abs());
    }
    worst
}
