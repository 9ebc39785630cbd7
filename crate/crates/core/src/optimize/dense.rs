//! Dense-field engines: a stationary velocity realized by scaling and
//! squaring, and direct minimization of the VoxelMorph energy over `u`.

use super::optimizer::{adam, gradient_descent, max_vector_length, OptimizerKind, Outcome, Problem};
use super::{EngineOutput, LevelImages, LevelTrace, RegistrationConfig, Transform, MIN_POSITIVE_JACOBIAN};
use crate::error::Result;
use crate::filter::{smooth_vectors, Boundary};
use crate::models::diffusion_energy;
use crate::similarity::{dense_gradient_values, objective_value, Objective};
use crate::volume::Dims;
use crate::warp::{exp_velocity_auto, jacobian_positive_fraction, warp_values, DisplacementField3, VelocityField3};

fn to_field(dims: Dims, x: &[f64]) -> DisplacementField3 {
    DisplacementField3::new(dims, x.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect())
        .expect("optimizer keeps parameters finite")
}

fn flatten(u: &DisplacementField3) -> Vec<f64> {
    u.data().iter().flatten().copied().collect()
}

fn sign(objective: Objective) -> f64 {
    if objective.maximize() {
        -1.0
    } else {
        1.0
    }
}

fn run_levels<'a, P, F>(
    levels: &'a [LevelImages],
    cfg: &RegistrationConfig,
    mut make: F,
) -> Result<(DisplacementField3, Vec<LevelTrace>, bool)>
where
    P: Problem,
    F: FnMut(&'a LevelImages) -> P,
{
    let mut params = DisplacementField3::zeros(levels[0].dims);
    let mut traces = Vec::new();
    let mut converged = false;
    for level in levels {
        let mut x = flatten(&params.resampled(level.dims));
        let mut problem = make(level);
        let initial = problem.cost(&x)?;
        let outcome: Outcome = match cfg.optimizer() {
            OptimizerKind::GradientDescentWithBacktracking => {
                gradient_descent(&mut problem, &mut x, cfg.iterations_per_level, cfg.step())?
            }
            OptimizerKind::Adam => adam(&mut problem, &mut x, cfg.iterations_per_level, cfg.step())?,
        };
        converged = match cfg.optimizer() {
            OptimizerKind::GradientDescentWithBacktracking => outcome.stalled,
            OptimizerKind::Adam => outcome
                .trace
                .windows(2)
                .last()
                .is_some_and(|w| (w[1] - w[0]).abs() <= 1e-9 * w[0].abs().max(1.0)),
        };
        traces.push(LevelTrace {
            dims: level.dims,
            initial,
            values: outcome.trace,
        });
        params = to_field(level.dims, &x);
    }
    Ok((params, traces, converged))
}

/// Cost of `moving(x + exp(v)(x))`; velocities whose flow folds more than
/// the allowed fraction of voxels cost `+inf`.
struct VelocityProblem<'a> {
    level: &'a LevelImages,
    objective: Objective,
    window: usize,
    sigma: f64,
    cache: Option<(Vec<f64>, DisplacementField3)>,
}

impl VelocityProblem<'_> {
    fn flow(&mut self, x: &[f64]) -> DisplacementField3 {
        if let Some((cx, u)) = &self.cache {
            if cx.as_slice() == x {
                return u.clone();
            }
        }
        let u = exp_velocity_auto(&VelocityField3(to_field(self.level.dims, x)));
        self.cache = Some((x.to_vec(), u.clone()));
        u
    }
}

impl Problem for VelocityProblem<'_> {
    fn cost(&mut self, x: &[f64]) -> Result<f64> {
        let u = self.flow(x);
        if jacobian_positive_fraction(&u) < MIN_POSITIVE_JACOBIAN {
            return Ok(f64::INFINITY);
        }
        let dims = self.level.dims;
        let warped = warp_values(self.level.moving.data(), dims, &u);
        let v = objective_value(&self.level.fixed_values, &warped, dims, self.objective, self.window, 2)?;
        Ok(sign(self.objective) * v)
    }

    /// The gradient with respect to the displacement stands in for the
    /// gradient with respect to the velocity.
    fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = self.flow(x);
        let og = dense_gradient_values(
            &self.level.fixed_values,
            self.level.moving.data(),
            self.level.dims,
            &u,
            self.objective,
            self.window,
        )?;
        let s = sign(self.objective);
        Ok((s * og.value, og.gradient.data().iter().flatten().map(|g| s * g).collect()))
    }

    fn step_length(&self, d: &[f64]) -> f64 {
        max_vector_length(d)
    }

    fn precondition(&self, g: Vec<f64>) -> Vec<f64> {
        if self.sigma <= 0.0 {
            return g;
        }
        let field: Vec<[f64; 3]> = g.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
        smooth_vectors(&field, self.level.dims, self.sigma, Boundary::Renormalize)
            .into_iter()
            .flatten()
            .collect()
    }
}

pub(crate) fn run_diffeomorphic(levels: &[LevelImages], cfg: &RegistrationConfig) -> Result<EngineOutput> {
    let (v, traces, converged) = run_levels(levels, cfg, |level| VelocityProblem {
        level,
        objective: cfg.objective(),
        window: cfg.window,
        sigma: cfg.update_sigma,
        cache: None,
    })?;
    let v = VelocityField3(v);
    Ok(EngineOutput {
        field: exp_velocity_auto(&v),
        transform: Transform::Velocity(v),
        traces,
        converged,
    })
}

/// `-local_cc (or msd) + lambda * diffusion_energy(u)`.
struct EnergyProblem<'a> {
    level: &'a LevelImages,
    objective: Objective,
    window: usize,
    lambda: f64,
}

impl Problem for EnergyProblem<'_> {
    fn cost(&mut self, x: &[f64]) -> Result<f64> {
        let dims = self.level.dims;
        let u = to_field(dims, x);
        let warped = warp_values(self.level.moving.data(), dims, &u);
        let v = objective_value(&self.level.fixed_values, &warped, dims, self.objective, self.window, 2)?;
        Ok(sign(self.objective) * v + self.lambda * diffusion_energy(&u)?.0)
    }

    fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let dims = self.level.dims;
        let u = to_field(dims, x);
        let og = dense_gradient_values(
            &self.level.fixed_values,
            self.level.moving.data(),
            dims,
            &u,
            self.objective,
            self.window,
        )?;
        let (reg, reg_grad) = diffusion_energy(&u)?;
        let s = sign(self.objective);
        let grad = og
            .gradient
            .data()
            .iter()
            .zip(reg_grad.data())
            .flat_map(|(g, r)| [0, 1, 2].map(|d| s * g[d] + self.lambda * r[d]))
            .collect();
        Ok((s * og.value + self.lambda * reg, grad))
    }

    fn step_length(&self, d: &[f64]) -> f64 {
        max_vector_length(d)
    }
}

pub(crate) fn run_voxelmorph(levels: &[LevelImages], cfg: &RegistrationConfig) -> Result<EngineOutput> {
    let (u, traces, converged) = run_levels(levels, cfg, |level| EnergyProblem {
        level,
        objective: cfg.objective(),
        window: cfg.window,
        lambda: cfg.regularizer.diffusion,
    })?;
    Ok(EngineOutput {
        field: u,
        transform: Transform::Dense,
        traces,
        converged,
    })
}
