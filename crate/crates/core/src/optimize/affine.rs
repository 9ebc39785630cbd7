use super::optimizer::{adam, gradient_descent, OptimizerKind, Outcome, Problem};
use super::{EngineOutput, LevelImages, LevelTrace, RegistrationConfig, Transform};
use crate::error::Result;
use crate::models::{affine_to_displacement, AffineTransform};
use crate::reduce::sums_indexed;
use crate::similarity::{dense_gradient_values, objective_value, Objective};
use crate::volume::{linear_index, voxel_coords, Dims};
use crate::warp::{warp_values, DisplacementField3};

/// Deviation `a` of the linear part from identity and translation `t`,
/// acting about the grid centre: `u(x) = a (x - c) + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Params {
    a: [[f64; 3]; 3],
    t: [f64; 3],
}

fn centre(dims: Dims) -> [f64; 3] {
    dims.map(|n| (n as f64 - 1.0) / 2.0)
}

/// Per-axis lever arm: the RMS distance from the centre of the fixed image's
/// edges, weighted by squared gradient magnitude. One unit of a linear
/// parameter then moves a typical edge by about one voxel, which balances
/// the linear and translation curvatures.
fn lever_arms(values: &[f64], dims: Dims) -> [f64; 3] {
    let c = centre(dims);
    let sums: [f64; 4] = sums_indexed(values.len(), |idx| {
        let p = voxel_coords(dims, idx);
        let mut g2 = 0.0;
        for a in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[a] = p[a].saturating_sub(1);
            hi[a] = (p[a] + 1).min(dims[a] - 1);
            let g = values[linear_index(dims, hi[0], hi[1], hi[2])] - values[linear_index(dims, lo[0], lo[1], lo[2])];
            g2 += g * g;
        }
        let d = [0, 1, 2].map(|j| p[j] as f64 - c[j]);
        [g2 * d[0] * d[0], g2 * d[1] * d[1], g2 * d[2] * d[2], g2]
    });
    if !(sums[3] > 0.0) {
        return c.map(|v| v.max(1.0));
    }
    std::array::from_fn(|j| (sums[j] / sums[3]).sqrt().max(1.0))
}

impl Params {
    /// Re-express on another grid, given per-axis `ratio = to / from`.
    /// Grid centres correspond exactly under box alignment.
    fn rescaled(&self, ratio: [f64; 3]) -> Self {
        Params {
            a: std::array::from_fn(|i| std::array::from_fn(|j| self.a[i][j] * ratio[i] / ratio[j])),
            t: std::array::from_fn(|i| self.t[i] * ratio[i]),
        }
    }

    fn to_flat(self, r: [f64; 3]) -> Vec<f64> {
        let mut x: Vec<f64> = (0..9).map(|k| self.a[k / 3][k % 3] * r[k % 3]).collect();
        x.extend_from_slice(&self.t);
        x
    }

    fn from_flat(x: &[f64], r: [f64; 3]) -> Self {
        Params {
            a: std::array::from_fn(|i| std::array::from_fn(|j| x[3 * i + j] / r[j])),
            t: [x[9], x[10], x[11]],
        }
    }

    fn field(&self, dims: Dims) -> DisplacementField3 {
        let c = centre(dims);
        DisplacementField3::from_fn(dims, |v| {
            let d = [0, 1, 2].map(|j| v[j] as f64 - c[j]);
            std::array::from_fn(|i| self.a[i][0] * d[0] + self.a[i][1] * d[1] + self.a[i][2] * d[2] + self.t[i])
        })
    }

    fn transform(&self, dims: Dims) -> AffineTransform {
        let linear = std::array::from_fn(|i| {
            std::array::from_fn(|j| self.a[i][j] + if i == j { 1.0 } else { 0.0 })
        });
        AffineTransform::about_center(linear, self.t, centre(dims))
    }
}

/// Cost `msd` or `1 - cc` of the warped level image.
struct AffineProblem<'a> {
    level: &'a LevelImages,
    objective: Objective,
    window: usize,
    r: [f64; 3],
}

impl AffineProblem<'_> {
    fn sign(&self) -> f64 {
        if self.objective.maximize() {
            -1.0
        } else {
            1.0
        }
    }

    fn offset(&self) -> f64 {
        if self.objective.maximize() {
            1.0
        } else {
            0.0
        }
    }
}

impl Problem for AffineProblem<'_> {
    fn cost(&mut self, x: &[f64]) -> Result<f64> {
        let u = Params::from_flat(x, self.r).field(self.level.dims);
        let warped = warp_values(self.level.moving.data(), self.level.dims, &u);
        let v = objective_value(&self.level.fixed_values, &warped, self.level.dims, self.objective, self.window, 2)?;
        Ok(self.offset() + self.sign() * v)
    }

    fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let dims = self.level.dims;
        let u = Params::from_flat(x, self.r).field(dims);
        let og = dense_gradient_values(
            &self.level.fixed_values,
            self.level.moving.data(),
            dims,
            &u,
            self.objective,
            self.window,
        )?;
        let g = og.gradient.data();
        let c = centre(dims);
        let sums: [f64; 12] = sums_indexed(g.len(), |idx| {
            let p = voxel_coords(dims, idx);
            let d = [0, 1, 2].map(|j| p[j] as f64 - c[j]);
            let gi = g[idx];
            let mut out = [0.0; 12];
            for i in 0..3 {
                for j in 0..3 {
                    out[3 * i + j] = gi[i] * d[j];
                }
                out[9 + i] = gi[i];
            }
            out
        });
        let s = self.sign();
        let grad = (0..12)
            .map(|k| if k < 9 { s * sums[k] / self.r[k % 3] } else { s * sums[k] })
            .collect();
        Ok((self.offset() + s * og.value, grad))
    }
}

pub(crate) fn run(levels: &[LevelImages], cfg: &RegistrationConfig) -> Result<EngineOutput> {
    let full = levels.last().expect("at least one level").dims;
    let objective = cfg.objective();
    // Canonical parameters live on the full-resolution grid.
    let mut params = Params {
        a: [[0.0; 3]; 3],
        t: [0.0; 3],
    };
    let mut traces = Vec::new();
    let mut converged = false;
    for level in levels {
        let ratio: [f64; 3] = std::array::from_fn(|a| level.dims[a] as f64 / full[a] as f64);
        let inverse = ratio.map(|r| 1.0 / r);
        let r = lever_arms(&level.fixed_values, level.dims);
        let mut problem = AffineProblem {
            level,
            objective,
            window: cfg.window,
            r,
        };
        let mut x = params.rescaled(ratio).to_flat(r);
        let initial = problem.cost(&x)?;
        let outcome: Outcome = match cfg.optimizer() {
            OptimizerKind::GradientDescentWithBacktracking => {
                gradient_descent(&mut problem, &mut x, cfg.iterations_per_level, cfg.step())?
            }
            OptimizerKind::Adam => adam(&mut problem, &mut x, cfg.iterations_per_level, cfg.step())?,
        };
        converged = outcome.stalled;
        traces.push(LevelTrace {
            dims: level.dims,
            initial,
            values: outcome.trace,
        });
        params = Params::from_flat(&x, r).rescaled(inverse);
    }
    let transform = params.transform(full);
    Ok(EngineOutput {
        field: affine_to_displacement(&transform, full),
        transform: Transform::Affine(transform),
        traces,
        converged,
    })
}
