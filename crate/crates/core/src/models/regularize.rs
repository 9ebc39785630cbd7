use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::sums_indexed;
use crate::volume::{voxel_coords, Dims};
use crate::warp::DisplacementField3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerWeights {
    pub diffusion: f64,
    pub bending: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        RegularizerWeights {
            diffusion: 1.0,
            bending: 0.01,
        }
    }
}

impl RegularizerWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusion >= 0.0 && self.bending >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn strides(dims: Dims) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

/// `(1/N) sum_x sum_a |u(x + e_a) - u(x)|^2`, with the forward difference
/// taken as zero on the last slice of each axis. The gradient is the
/// matching discrete (negative) Laplacian `dE/du(x)`.
pub fn diffusion_energy(u: &DisplacementField3) -> Result<(f64, DisplacementField3)> {
    let dims = u.dims();
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::InvalidArgument(format!(
            "diffusion energy needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    let data = u.data();
    let st = strides(dims);
    let n = data.len() as f64;
    let diff = |idx: usize, c: [usize; 3], a: usize| -> [f64; 3] {
        if c[a] + 1 >= dims[a] {
            return [0.0; 3];
        }
        let (p, q) = (data[idx + st[a]], data[idx]);
        [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
    };
    let [total] = sums_indexed(data.len(), |idx| {
        let c = voxel_coords(dims, idx);
        let mut s = 0.0;
        for a in 0..3 {
            let d = diff(idx, c, a);
            s += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        }
        [s]
    });
    let grad = DisplacementField3::from_fn(dims, |c| {
        let idx = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
        let mut g = [0.0; 3];
        for a in 0..3 {
            // Difference starting here: d/du(x) of |u(x+e)-u(x)|^2 = -2 d.
            let d = diff(idx, c, a);
            for k in 0..3 {
                g[k] -= 2.0 * d[k] / n;
            }
            // Difference ending here: +2 d(x - e).
            if c[a] > 0 {
                let mut cp = c;
                cp[a] -= 1;
                let d = diff(idx - st[a], cp, a);
                for k in 0..3 {
                    g[k] += 2.0 * d[k] / n;
                }
            }
        }
        g
    });
    Ok((total / n, grad))
}
