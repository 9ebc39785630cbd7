//! Separable Gaussian smoothing of vector fields.

use rayon::prelude::*;

use crate::volume::{linear_index, voxel_coords, voxel_count, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Plain convolution; samples outside the grid are zero.
    Zero,
    /// Kernel truncated at the border and renormalised to unit mass.
    Renormalize,
}

/// Normalised kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

pub fn smooth_vectors(
    field: &[[f64; 3]],
    dims: Dims,
    sigma: f64,
    boundary: Boundary,
) -> Vec<[f64; 3]> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        cur = (0..voxel_count(dims))
            .into_par_iter()
            .map(|idx| {
                let mut c = voxel_coords(dims, idx);
                let centre = c[axis] as isize;
                let mut acc = [0.0; 3];
                let mut mass = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let pos = centre + t as isize - radius;
                    if pos < 0 || pos >= n {
                        continue;
                    }
                    c[axis] = pos as usize;
                    let v = cur[linear_index(dims, c[0], c[1], c[2])];
                    for d in 0..3 {
                        acc[d] += w * v[d];
                    }
                    mass += w;
                }
                if boundary == Boundary::Renormalize && mass > 0.0 {
                    acc.map(|a| a / mass)
                } else {
                    acc
                }
            })
            .collect();
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(1.7);
        assert_eq!(k.len(), 2 * 6 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn renormalised_smoothing_keeps_constants() {
        let dims = [7, 5, 6];
        let f = vec![[1.0, -2.0, 0.5]; voxel_count(dims)];
        let s = smooth_vectors(&f, dims, 2.0, Boundary::Renormalize);
        for v in s {
            for d in 0..3 {
                assert!((v[d] - f[0][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_boundary_impulse_response_is_separable_gaussian() {
        let dims = [21, 21, 21];
        let mut f = vec![[0.0; 3]; voxel_count(dims)];
        f[linear_index(dims, 10, 10, 10)] = [1.0, 0.0, 0.0];
        let s = smooth_vectors(&f, dims, 1.5, Boundary::Zero);
        let k = gaussian_kernel(1.5);
        let r = k.len() / 2;
        let got = s[linear_index(dims, 11, 9, 10)][0];
        let expected = k[r + 1] * k[r - 1] * k[r];
        assert!((got - expected).abs() < 1e-15);
        let total: f64 = s.iter().map(|v| v[0]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
