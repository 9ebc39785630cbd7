//! Windowed (local) squared correlation.
//!
//! Windows are `w^3` cubes truncated at the volume border. For each voxel
//! `x` with window statistics
//!
//! ```text
//! A = sum (I - mean I)(J - mean J),  B = sum (I - mean I)^2,  C = sum (J - mean J)^2
//! ```
//!
//! the score is `A^2 / (B C)`. Windows where both images are constant score
//! 1, windows where exactly one is constant score 0. The metric is the mean
//! score over all voxels.

use rayon::prelude::*;

use crate::reduce::sum_indexed;
use crate::volume::{linear_index, voxel_count, Dims};

/// Sum over the truncated `(2r+1)^3` window around every voxel.
pub(crate) fn box_sum(data: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        // Every line along `axis` starts at a voxel whose `axis` coordinate is 0.
        let starts: Vec<usize> = (0..voxel_count(dims))
            .filter(|&idx| (idx / stride) % n == 0)
            .collect();
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let mut prefix = vec![0.0; n + 1];
                for t in 0..n {
                    prefix[t + 1] = prefix[t] + cur[s + t * stride];
                }
                (0..n)
                    .map(|t| {
                        let lo = t.saturating_sub(radius);
                        let hi = (t + radius + 1).min(n);
                        prefix[hi] - prefix[lo]
                    })
                    .collect()
            })
            .collect();
        for (&s, line) in starts.iter().zip(lines) {
            for (t, v) in line.into_iter().enumerate() {
                cur[s + t * stride] = v;
            }
        }
    }
    cur
}

/// Number of voxels in each truncated window.
fn window_counts(dims: Dims, radius: usize) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let n = dims[a];
            (0..n)
                .map(|t| ((t + radius + 1).min(n) - t.saturating_sub(radius)) as f64)
                .collect()
        })
        .collect();
    let mut out = vec![0.0; voxel_count(dims)];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out[linear_index(dims, i, j, k)] = per_axis[0][i] * per_axis[1][j] * per_axis[2][k];
            }
        }
    }
    out
}

/// Per-window constancy threshold relative to the window's second moment.
const CONSTANT_REL: f64 = 1e-10;

struct WindowStats {
    n: Vec<f64>,
    si: Vec<f64>,
    sj: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    b_scale: Vec<f64>,
    c_scale: Vec<f64>,
}

fn centred(values: &[f64]) -> Vec<f64> {
    let mean = sum_indexed(values.len(), |i| values[i]) / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

fn window_stats(fixed: &[f64], warped: &[f64], dims: Dims, radius: usize) -> WindowStats {
    let i = centred(fixed);
    let j = centred(warped);
    let ii: Vec<f64> = i.iter().map(|v| v * v).collect();
    let jj: Vec<f64> = j.iter().map(|v| v * v).collect();
    let ij: Vec<f64> = i.iter().zip(&j).map(|(a, b)| a * b).collect();
    let n = window_counts(dims, radius);
    let si = box_sum(&i, dims, radius);
    let sj = box_sum(&j, dims, radius);
    let sii = box_sum(&ii, dims, radius);
    let sjj = box_sum(&jj, dims, radius);
    let sij = box_sum(&ij, dims, radius);
    let len = n.len();
    let mut a = vec![0.0; len];
    let mut b = vec![0.0; len];
    let mut c = vec![0.0; len];
    for x in 0..len {
        a[x] = sij[x] - si[x] * sj[x] / n[x];
        b[x] = sii[x] - si[x] * si[x] / n[x];
        c[x] = sjj[x] - sj[x] * sj[x] / n[x];
    }
    WindowStats {
        n,
        si,
        sj,
        a,
        b,
        c,
        b_scale: sii,
        c_scale: sjj,
    }
}

#[derive(Clone, Copy)]
enum WindowKind {
    BothConstant,
    OneConstant,
    Regular,
}

impl WindowStats {
    fn kind(&self, x: usize) -> WindowKind {
        let ci = self.b[x] <= CONSTANT_REL * self.b_scale[x] || self.b[x] <= 0.0;
        let cj = self.c[x] <= CONSTANT_REL * self.c_scale[x] || self.c[x] <= 0.0;
        match (ci, cj) {
            (true, true) => WindowKind::BothConstant,
            (false, false) => WindowKind::Regular,
            _ => WindowKind::OneConstant,
        }
    }

    fn score(&self, x: usize) -> f64 {
        match self.kind(x) {
            WindowKind::BothConstant => 1.0,
            WindowKind::OneConstant => 0.0,
            WindowKind::Regular => self.a[x] * self.a[x] / (self.b[x] * self.c[x]),
        }
    }
}

pub(crate) fn check_window(window: usize) -> crate::Result<usize> {
    if window < 3 || window % 2 == 0 {
        return Err(crate::Error::InvalidArgument(format!(
            "local CC window must be odd and at least 3, got {window}"
        )));
    }
    Ok(window / 2)
}

/// Mean windowed squared correlation of two grids.
pub(crate) fn local_cc_values(fixed: &[f64], warped: &[f64], dims: Dims, radius: usize) -> f64 {
    let stats = window_stats(fixed, warped, dims, radius);
    let n = fixed.len();
    let total = sum_indexed(n, |x| stats.score(x).clamp(0.0, 1.0));
    total / n as f64
}

/// Value and derivative with respect to every `warped` intensity.
pub(crate) fn local_cc_with_gradient(
    fixed: &[f64],
    warped: &[f64],
    dims: Dims,
    radius: usize,
) -> (f64, Vec<f64>) {
    let stats = window_stats(fixed, warped, dims, radius);
    let len = fixed.len();
    let inv_n = 1.0 / len as f64;
    // d score(x) / d J_y = alpha_x (I_y - Ibar_x) - beta_x (J_y - Jbar_x) for y in W(x).
    let mut alpha = vec![0.0; len];
    let mut alpha_mi = vec![0.0; len];
    let mut beta = vec![0.0; len];
    let mut beta_mj = vec![0.0; len];
    for x in 0..len {
        if let WindowKind::Regular = stats.kind(x) {
            let bc = stats.b[x] * stats.c[x];
            let al = 2.0 * stats.a[x] / bc;
            let be = 2.0 * stats.a[x] * stats.a[x] / (bc * stats.c[x]);
            alpha[x] = al;
            beta[x] = be;
            alpha_mi[x] = al * stats.si[x] / stats.n[x];
            beta_mj[x] = be * stats.sj[x] / stats.n[x];
        }
    }
    let box_alpha = box_sum(&alpha, dims, radius);
    let box_alpha_mi = box_sum(&alpha_mi, dims, radius);
    let box_beta = box_sum(&beta, dims, radius);
    let box_beta_mj = box_sum(&beta_mj, dims, radius);
    let i = centred(fixed);
    let j = centred(warped);
    let grad: Vec<f64> = (0..len)
        .map(|y| {
            inv_n
                * (i[y] * box_alpha[y] - box_alpha_mi[y] - j[y] * box_beta[y] + box_beta_mj[y])
        })
        .collect();
    let total = sum_indexed(len, |x| stats.score(x).clamp(0.0, 1.0));
    (total * inv_n, grad)
}
