//! Dense transforms: trilinear sampling, warping, composition,
//! scaling-and-squaring and Jacobian diagnostics.
//!
//! Displacements are in voxel units. A field `u` maps voxel `x` of the fixed
//! grid to `x + u(x)` in the moving image. Sampling outside the grid clamps
//! each coordinate to `[0, n-1]`.

mod io;

pub use io::{load_field, save_field, sidecar_path};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{check_dims, linear_index, voxel_coords, voxel_count, Dims, Volume3};

/// Per-voxel displacement vectors, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField3 {
    dims: Dims,
    data: Vec<[f64; 3]>,
}

impl DisplacementField3 {
    pub fn new(dims: Dims, data: Vec<[f64; 3]>) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("empty dims {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "{} vectors for dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![[0.0; 3]; voxel_count(dims)],
        }
    }

    pub fn constant(dims: Dims, v: [f64; 3]) -> Self {
        Self {
            dims,
            data: vec![v; voxel_count(dims)],
        }
    }

    /// Field with `u(x) = f(i, j, k)`.
    pub fn from_fn(dims: Dims, f: impl Fn([usize; 3]) -> [f64; 3] + Sync) -> Self {
        let data = (0..voxel_count(dims))
            .into_par_iter()
            .map(|idx| f(voxel_coords(dims, idx)))
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| v.map(|c| c * s)).collect(),
        }
    }

    /// Component-wise sum of two fields on the same grid.
    pub fn added(&self, other: &Self) -> Result<Self> {
        check_dims(self.dims, other.dims)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        })
    }

    /// Converts voxel displacements to physical units given voxel spacing.
    pub fn to_physical(&self, spacing: [f64; 3]) -> Vec<[f64; 3]> {
        self.data
            .iter()
            .map(|v| [v[0] * spacing[0], v[1] * spacing[1], v[2] * spacing[2]])
            .collect()
    }

    /// Trilinear resampling onto `new_dims`, with vectors rescaled so the
    /// field keeps its physical meaning. Grids are aligned the way box
    /// downscaling aligns them: cell `i` of a grid with `m` cells covers
    /// `[(i) n/m, (i+1) n/m)` of an `n`-cell grid.
    pub fn resampled(&self, new_dims: Dims) -> Self {
        if new_dims == self.dims {
            return self.clone();
        }
        let ratio: [f64; 3] = std::array::from_fn(|a| self.dims[a] as f64 / new_dims[a] as f64);
        let data = (0..voxel_count(new_dims))
            .into_par_iter()
            .map(|idx| {
                let c = voxel_coords(new_dims, idx);
                let p: [f64; 3] =
                    std::array::from_fn(|a| (c[a] as f64 + 0.5) * ratio[a] - 0.5);
                let v = sample_vector(&self.data, self.dims, p);
                std::array::from_fn(|a| v[a] / ratio[a])
            })
            .collect();
        Self {
            dims: new_dims,
            data,
        }
    }
}

/// Stationary velocity field; its flow at unit time is a diffeomorphism.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField3(pub DisplacementField3);

impl VelocityField3 {
    pub fn zeros(dims: Dims) -> Self {
        VelocityField3(DisplacementField3::zeros(dims))
    }

    pub fn field(&self) -> &DisplacementField3 {
        &self.0
    }

    pub fn max_magnitude(&self) -> f64 {
        self.0.max_magnitude()
    }
}

#[inline]
pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Clamped cell lookup along one axis: lower index, fractional offset, and
/// whether the coordinate was inside (derivative defined) or clamped.
#[inline]
fn axis_cell(x: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&x);
    let xc = x.clamp(0.0, hi);
    let i0 = (xc.floor() as usize).min(n - 2);
    (i0, i0 + 1, xc - i0 as f64, inside)
}

/// Scalar access for sampling either `f32` or `f64` grids.
pub trait Scalar: Copy + Send + Sync {
    fn as_f64(self) -> f64;
}
impl Scalar for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Trilinear interpolation at continuous voxel coordinate `p`.
#[inline]
pub fn sample_scalar<T: Scalar>(data: &[T], dims: Dims, p: [f64; 3]) -> f64 {
    let (x0, x1, tx, _) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, _) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, _) = axis_cell(p[2], dims[2]);
    let at = |i, j, k| data[linear_index(dims, i, j, k)].as_f64();
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    sz * (sy * (sx * at(x0, y0, z0) + tx * at(x1, y0, z0))
        + ty * (sx * at(x0, y1, z0) + tx * at(x1, y1, z0)))
        + tz * (sy * (sx * at(x0, y0, z1) + tx * at(x1, y0, z1))
            + ty * (sx * at(x0, y1, z1) + tx * at(x1, y1, z1)))
}

/// Trilinear value and its exact derivative with respect to `p`. The
/// derivative along an axis is zero where that coordinate was clamped.
#[inline]
pub fn sample_scalar_with_gradient<T: Scalar>(
    data: &[T],
    dims: Dims,
    p: [f64; 3],
) -> (f64, [f64; 3]) {
    let (x0, x1, tx, ix) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, iy) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, iz) = axis_cell(p[2], dims[2]);
    let at = |i, j, k| data[linear_index(dims, i, j, k)].as_f64();
    let c000 = at(x0, y0, z0);
    let c100 = at(x1, y0, z0);
    let c010 = at(x0, y1, z0);
    let c110 = at(x1, y1, z0);
    let c001 = at(x0, y0, z1);
    let c101 = at(x1, y0, z1);
    let c011 = at(x0, y1, z1);
    let c111 = at(x1, y1, z1);
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let c00 = sx * c000 + tx * c100;
    let c10 = sx * c010 + tx * c110;
    let c01 = sx * c001 + tx * c101;
    let c11 = sx * c011 + tx * c111;
    let c0 = sy * c00 + ty * c10;
    let c1 = sy * c01 + ty * c11;
    let value = sz * c0 + tz * c1;
    let dx = if ix && dims[0] > 1 {
        sz * (sy * (c100 - c000) + ty * (c110 - c010)) + tz * (sy * (c101 - c001) + ty * (c111 - c011))
    } else {
        0.0
    };
    let dy = if iy && dims[1] > 1 {
        sz * (c10 - c00) + tz * (c11 - c01)
    } else {
        0.0
    };
    let dz = if iz && dims[2] > 1 { c1 - c0 } else { 0.0 };
    (value, [dx, dy, dz])
}

#[inline]
pub(crate) fn sample_vector(data: &[[f64; 3]], dims: Dims, p: [f64; 3]) -> [f64; 3] {
    let (x0, x1, tx, _) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, _) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, _) = axis_cell(p[2], dims[2]);
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let corners = [
        (x0, y0, z0, sx * sy * sz),
        (x1, y0, z0, tx * sy * sz),
        (x0, y1, z0, sx * ty * sz),
        (x1, y1, z0, tx * ty * sz),
        (x0, y0, z1, sx * sy * tz),
        (x1, y0, z1, tx * sy * tz),
        (x0, y1, z1, sx * ty * tz),
        (x1, y1, z1, tx * ty * tz),
    ];
    let mut out = [0.0; 3];
    for (i, j, k, w) in corners {
        let v = data[linear_index(dims, i, j, k)];
        out[0] += w * v[0];
        out[1] += w * v[1];
        out[2] += w * v[2];
    }
    out
}

/// Intensity of `vol` at continuous voxel coordinate `p`, with clamping.
pub fn sample_trilinear(vol: &Volume3, p: [f64; 3]) -> f64 {
    sample_scalar(vol.data(), vol.dims(), p)
}

/// `moving(x + u(x))` in double precision.
pub fn warp_values<T: Scalar>(moving: &[T], dims: Dims, u: &DisplacementField3) -> Vec<f64> {
    debug_assert_eq!(dims, u.dims);
    (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| {
            let c = voxel_coords(dims, idx);
            let d = u.data[idx];
            sample_scalar(
                moving,
                dims,
                [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]],
            )
        })
        .collect()
}

/// Warped values plus the moving-image gradient at each sample point.
pub fn warp_values_with_gradient<T: Scalar>(
    moving: &[T],
    dims: Dims,
    u: &DisplacementField3,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    debug_assert_eq!(dims, u.dims);
    (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| {
            let c = voxel_coords(dims, idx);
            let d = u.data[idx];
            sample_scalar_with_gradient(
                moving,
                dims,
                [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]],
            )
        })
        .unzip()
}

/// `output(x) = vol(x + u(x))`.
pub fn apply_displacement(vol: &Volume3, u: &DisplacementField3) -> Result<Volume3> {
    check_dims(vol.dims(), u.dims)?;
    let out = warp_values(vol.data(), vol.dims(), u);
    Ok(vol.with_data(out.into_iter().map(|v| v as f32).collect()))
}

/// `(id + u_a) o (id + u_b) - id`, i.e. `u_b(x) + u_a(x + u_b(x))`.
pub fn compose(u_a: &DisplacementField3, u_b: &DisplacementField3) -> Result<DisplacementField3> {
    check_dims(u_a.dims, u_b.dims)?;
    let dims = u_a.dims;
    let data = (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| {
            let c = voxel_coords(dims, idx);
            let b = u_b.data[idx];
            let a = sample_vector(
                &u_a.data,
                dims,
                [c[0] as f64 + b[0], c[1] as f64 + b[1], c[2] as f64 + b[2]],
            );
            [b[0] + a[0], b[1] + a[1], b[2] + a[2]]
        })
        .collect();
    Ok(DisplacementField3 { dims, data })
}

/// Smallest `steps >= 1` with `max|v| / 2^steps <= 0.5`.
pub fn default_steps(v: &VelocityField3) -> u32 {
    let m = v.max_magnitude();
    let mut steps = 1;
    while m / f64::powi(2.0, steps as i32) > 0.5 {
        steps += 1;
    }
    steps
}

/// Flow of a stationary velocity at unit time by scaling and squaring:
/// `u = v / 2^steps`, then `u <- u o u` `steps` times.
pub fn exp_velocity(v: &VelocityField3, steps: u32) -> Result<DisplacementField3> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let ratio = v.max_magnitude() / f64::powi(2.0, steps as i32);
    if ratio > 0.5 {
        return Err(Error::TooFewSteps { steps, ratio });
    }
    let mut u = v.0.scaled(1.0 / f64::powi(2.0, steps as i32));
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Flow of `v` with [`default_steps`].
pub fn exp_velocity_auto(v: &VelocityField3) -> DisplacementField3 {
    exp_velocity(v, default_steps(v)).expect("default step count satisfies the bound")
}

/// `d u_c / d x_a` at voxel `c`: central differences inside, one-sided at
/// the borders, zero along axes of length one.
#[inline]
fn field_derivative(u: &DisplacementField3, c: [usize; 3], axis: usize) -> [f64; 3] {
    let n = u.dims[axis];
    if n < 2 {
        return [0.0; 3];
    }
    let mut lo = c;
    let mut hi = c;
    let span = if c[axis] == 0 {
        hi[axis] = 1;
        1.0
    } else if c[axis] == n - 1 {
        lo[axis] = n - 2;
        1.0
    } else {
        lo[axis] -= 1;
        hi[axis] += 1;
        2.0
    };
    let a = u.get(lo[0], lo[1], lo[2]);
    let b = u.get(hi[0], hi[1], hi[2]);
    [(b[0] - a[0]) / span, (b[1] - a[1]) / span, (b[2] - a[2]) / span]
}

fn jacobian_at(u: &DisplacementField3, c: [usize; 3]) -> f64 {
    // Row r, column a of I + grad u is delta_ra + d u_r / d x_a.
    let cols = [0, 1, 2].map(|a| field_derivative(u, c, a));
    let m = |r: usize, a: usize| cols[a][r] + if r == a { 1.0 } else { 0.0 };
    m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
        - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
}

/// `det(I + grad u)` at every voxel.
pub fn jacobian_determinant(u: &DisplacementField3) -> Result<Volume3> {
    if u.dims.iter().any(|&n| n < 3) {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs at least 3 voxels per axis, got {:?}",
            u.dims
        )));
    }
    let dims = u.dims;
    let data: Vec<f32> = (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| jacobian_at(u, voxel_coords(dims, idx)) as f32)
        .collect();
    Volume3::new(dims, [1.0; 3], data)
}

/// Fraction of interior voxels (not on any face) with a positive Jacobian
/// determinant. Grids without interior voxels report 1.
pub fn jacobian_positive_fraction(u: &DisplacementField3) -> f64 {
    let dims = u.dims;
    if dims.iter().any(|&n| n < 3) {
        return 1.0;
    }
    let interior: Vec<usize> = (0..voxel_count(dims))
        .filter(|&idx| {
            let c = voxel_coords(dims, idx);
            (0..3).all(|a| c[a] > 0 && c[a] + 1 < dims[a])
        })
        .collect();
    let positive = interior
        .par_iter()
        .filter(|&&idx| jacobian_at(u, voxel_coords(dims, idx)) > 0.0)
        .count();
    positive as f64 / interior.len() as f64
}
