use super::optimizer::{adam, gradient_descent, max_vector_length, OptimizerKind, Problem};
use super::{default_control_spacing, EngineOutput, LevelImages, LevelTrace, RegistrationConfig, Transform};
use crate::error::Result;
use crate::models::{bending_energy, ffd_to_displacement, histogram_gradient_on_controls, FfdGrid};
use crate::similarity::{dense_gradient_values, objective_value, BinRange, JointHistogram, Objective};
use crate::warp::warp_values;

/// Cost `-objective + lambda * bending` (or `msd + lambda * bending`).
struct FfdProblem<'a> {
    level: &'a LevelImages,
    grid: FfdGrid,
    objective: Objective,
    window: usize,
    bins: usize,
    fd_step: f64,
    bending: f64,
    moving_range: BinRange,
}

fn set_coeffs(grid: &mut FfdGrid, x: &[f64]) {
    for (c, v) in grid.coeffs_mut().iter_mut().zip(x.chunks_exact(3)) {
        *c = [v[0], v[1], v[2]];
    }
}

fn flatten(grid: &FfdGrid) -> Vec<f64> {
    grid.coeffs().iter().flatten().copied().collect()
}

impl FfdProblem<'_> {
    fn sign(&self) -> f64 {
        if self.objective.maximize() {
            -1.0
        } else {
            1.0
        }
    }

    fn similarity(&self, warped: &[f64]) -> Result<f64> {
        let level = self.level;
        match self.objective {
            // Bin the warped image over the moving image's range, as the
            // control-point gradient does.
            Objective::Mi | Objective::Nmi => {
                let h = JointHistogram::from_values(
                    &level.fixed_values,
                    warped,
                    self.bins,
                    BinRange::of(&level.fixed_values),
                    self.moving_range,
                );
                Ok(if self.objective == Objective::Mi {
                    h.entropy_a() + h.entropy_b() - h.joint_entropy()
                } else {
                    h.normalized_mutual_information()
                })
            }
            o => objective_value(&level.fixed_values, warped, level.dims, o, self.window, self.bins),
        }
    }
}

impl Problem for FfdProblem<'_> {
    fn cost(&mut self, x: &[f64]) -> Result<f64> {
        set_coeffs(&mut self.grid, x);
        let u = ffd_to_displacement(&self.grid, self.level.dims)?;
        let warped = warp_values(self.level.moving.data(), self.level.dims, &u);
        let (bend, _) = bending_energy(&self.grid);
        Ok(self.sign() * self.similarity(&warped)? + self.bending * bend)
    }

    fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        set_coeffs(&mut self.grid, x);
        let s = self.sign();
        let (value, mut grad) = match self.objective {
            Objective::Mi | Objective::Nmi => {
                let cg = histogram_gradient_on_controls(
                    &self.level.fixed,
                    &self.level.moving,
                    &self.grid,
                    self.fd_step,
                    self.bins,
                    self.objective,
                )?;
                let u = ffd_to_displacement(&self.grid, self.level.dims)?;
                let warped = warp_values(self.level.moving.data(), self.level.dims, &u);
                (self.similarity(&warped)?, cg.gradient)
            }
            o => {
                let u = ffd_to_displacement(&self.grid, self.level.dims)?;
                let og = dense_gradient_values(
                    &self.level.fixed_values,
                    self.level.moving.data(),
                    self.level.dims,
                    &u,
                    o,
                    self.window,
                )?;
                (og.value, self.grid.adjoint(&og.gradient)?)
            }
        };
        let (bend, bend_grad) = bending_energy(&self.grid);
        for (g, b) in grad.iter_mut().zip(&bend_grad) {
            for d in 0..3 {
                g[d] = s * g[d] + self.bending * b[d];
            }
        }
        Ok((s * value + self.bending * bend, grad.into_iter().flatten().collect()))
    }

    fn step_length(&self, d: &[f64]) -> f64 {
        max_vector_length(d)
    }
}

pub(crate) fn run(
    levels: &[LevelImages],
    cfg: &RegistrationConfig,
    scale_percent: Option<f64>,
) -> Result<EngineOutput> {
    let full = levels.last().expect("at least one level").dims;
    let spacing = cfg.control_spacing.unwrap_or(default_control_spacing(scale_percent));
    // The lattice is fixed at full resolution and re-expressed per level.
    let mut canonical = FfdGrid::covering(full, [spacing; 3])?;
    let mut traces = Vec::new();
    let mut converged = false;
    for level in levels {
        let grid = canonical.on_grid(full, level.dims);
        let mut x = flatten(&grid);
        let mut problem = FfdProblem {
            level,
            grid,
            objective: cfg.objective(),
            window: cfg.window,
            bins: cfg.bins,
            fd_step: cfg.fd_step,
            bending: cfg.regularizer.bending,
            moving_range: BinRange::of(level.moving.data()),
        };
        let initial = problem.cost(&x)?;
        let outcome = match cfg.optimizer() {
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
        let mut grid = problem.grid;
        set_coeffs(&mut grid, &x);
        canonical = grid.on_grid(level.dims, full);
    }
    Ok(EngineOutput {
        field: ffd_to_displacement(&canonical, full)?,
        transform: Transform::Ffd(canonical),
        traces,
        converged,
    })
}
