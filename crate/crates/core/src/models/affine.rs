use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{voxel_coords, voxel_count, Dims};
use crate::warp::DisplacementField3;

/// `x -> A x + b` on voxel coordinates, stored as the 3x4 matrix `[A | b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 4]; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Self::identity();
        for r in 0..3 {
            m.matrix[r][3] = t[r];
        }
        m
    }

    /// Rotation by `angle` radians about the z axis through `center`.
    pub fn rotation_z(angle: f64, center: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        let linear = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self::about_center(linear, [0.0; 3], center)
    }

    /// `x -> center + L (x - center) + t`.
    pub fn about_center(linear: [[f64; 3]; 3], t: [f64; 3], center: [f64; 3]) -> Self {
        let mut matrix = [[0.0; 4]; 3];
        for r in 0..3 {
            let mut lc = 0.0;
            for c in 0..3 {
                matrix[r][c] = linear[r][c];
                lc += linear[r][c] * center[c];
            }
            matrix[r][3] = center[r] - lc + t[r];
        }
        AffineTransform { matrix }
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.matrix[r][c]))
    }

    pub fn translation_part(&self) -> [f64; 3] {
        std::array::from_fn(|r| self.matrix[r][3])
    }

    pub fn linear_determinant(&self) -> f64 {
        let m = self.linear();
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| {
            self.matrix[r][0] * x[0]
                + self.matrix[r][1] * x[1]
                + self.matrix[r][2] * x[2]
                + self.matrix[r][3]
        })
    }
}

/// `u(x) = A x + b - x` on every voxel.
pub fn affine_to_displacement(t: &AffineTransform, dims: Dims) -> DisplacementField3 {
    let det = t.linear_determinant();
    if det.abs() < 1e-6 {
        log::warn!("affine transform is nearly singular (det = {det:e})");
    }
    let data = (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| {
            let x = voxel_coords(dims, idx).map(|v| v as f64);
            let y = t.apply(x);
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
        .collect();
    DisplacementField3::new(dims, data).expect("finite affine field")
}
