use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::{voxel_coords, Dims, Volume3};

const MIN_PHANTOM_AXIS: usize = 16;
const FOREGROUND_MIN: f64 = 100.0;
const FOREGROUND_MAX: f64 = 1000.0;

struct Lobe {
    center: [f64; 3],
    radii: [f64; 3],
    contrast: f64,
}

struct Wave {
    k: [f64; 3],
    phase: f64,
    amplitude: f64,
}

/// Brain-like test volume: an ellipsoidal body (background exactly 0,
/// foreground in `[100, 1000]`) holding 3 to 6 soft-edged lobes of different
/// intensity and a band-limited texture. Fully determined by `(dims, seed)`.
pub fn make_phantom(dims: Dims, seed: u64) -> Result<Volume3> {
    if dims.iter().any(|&n| n < MIN_PHANTOM_AXIS) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims {dims:?} must be at least {MIN_PHANTOM_AXIS} per axis"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let n = dims.map(|d| d as f64);
    let min_axis = n.iter().cloned().fold(f64::INFINITY, f64::min);

    let center: [f64; 3] =
        std::array::from_fn(|a| (n[a] - 1.0) / 2.0 + rng.uniform(-0.03, 0.03) * n[a]);
    let semi: [f64; 3] = std::array::from_fn(|a| n[a] * rng.uniform(0.34, 0.40));
    let base = rng.uniform(380.0, 460.0);

    let lobe_count = 3 + rng.below(4) as usize;
    let lobes: Vec<Lobe> = (0..lobe_count)
        .map(|_| {
            // Centre uniformly inside 55% of the body ellipsoid.
            let dir = rng.unit_vector();
            let r = 0.55 * rng.next_f64().cbrt();
            let c = std::array::from_fn(|a| center[a] + r * dir[a] * semi[a]);
            let radii = std::array::from_fn(|a| semi[a] * rng.uniform(0.18, 0.34));
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            Lobe {
                center: c,
                radii,
                contrast: sign * rng.uniform(150.0, 320.0),
            }
        })
        .collect();

    let waves: Vec<Wave> = (0..8)
        .map(|_| {
            let dir = rng.unit_vector();
            let wavelength = min_axis / rng.uniform(6.0, 10.0);
            let kmag = std::f64::consts::TAU / wavelength;
            Wave {
                k: dir.map(|d| d * kmag),
                phase: rng.uniform(0.0, std::f64::consts::TAU),
                amplitude: rng.uniform(25.0, 45.0),
            }
        })
        .collect();

    // Lobe edges are about one voxel wide at 64^3 and scale with the grid.
    let edge = min_axis / 64.0;

    let data: Vec<f32> = (0..dims.iter().product::<usize>())
        .into_par_iter()
        .map(|idx| {
            let c = voxel_coords(dims, idx).map(|v| v as f64);
            let body_r2: f64 = (0..3)
                .map(|a| ((c[a] - center[a]) / semi[a]).powi(2))
                .sum();
            if body_r2 >= 1.0 {
                return 0.0;
            }
            let mut v = base;
            for lobe in &lobes {
                let r = (0..3)
                    .map(|a| ((c[a] - lobe.center[a]) / lobe.radii[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mean_radius = (lobe.radii[0] + lobe.radii[1] + lobe.radii[2]) / 3.0;
                let w = 0.5 * (1.0 - ((r - 1.0) * mean_radius / edge).tanh());
                v += lobe.contrast * w;
            }
            for wave in &waves {
                let arg = wave.k[0] * c[0] + wave.k[1] * c[1] + wave.k[2] * c[2] + wave.phase;
                v += wave.amplitude * arg.cos();
            }
            v.clamp(FOREGROUND_MIN, FOREGROUND_MAX) as f32
        })
        .collect();
    Volume3::new(dims, [1.0; 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = make_phantom([20, 18, 16], 5).unwrap();
        let b = make_phantom([20, 18, 16], 5).unwrap();
        let bits = |v: &Volume3| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn background_and_foreground_ranges() {
        let v = make_phantom([32, 32, 32], 11).unwrap();
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(31, 31, 31), 0.0);
        assert!(v.data().iter().all(|&x| x == 0.0 || (100.0..=1000.0).contains(&x)));
        let foreground = v.data().iter().filter(|&&x| x > 0.0).count();
        assert!(foreground > 32 * 32 * 32 / 10);
    }

    #[test]
    fn too_small_rejected() {
        assert!(make_phantom([15, 32, 32], 0).is_err());
    }
}
