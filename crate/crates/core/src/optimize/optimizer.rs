//! Flat-parameter minimizers shared by the engines.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GradientDescentWithBacktracking,
    Adam,
}

pub const MAX_HALVINGS: u32 = 10;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// A cost to minimize over a flat parameter vector.
pub(crate) trait Problem {
    fn cost(&mut self, x: &[f64]) -> Result<f64>;

    fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Size of a step, in the units `step_size` is expressed in.
    fn step_length(&self, d: &[f64]) -> f64 {
        d.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Hook applied to the raw gradient before a descent step.
    fn precondition(&self, g: Vec<f64>) -> Vec<f64> {
        g
    }
}

/// Largest norm over consecutive 3-vectors.
pub(crate) fn max_vector_length(d: &[f64]) -> f64 {
    d.chunks_exact(3)
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Outcome {
    /// Cost after every iteration that ran.
    pub trace: Vec<f64>,
    /// The line search found no improving step before the budget ran out.
    pub stalled: bool,
}

/// Steepest descent with the step scaled so its largest entry equals the
/// current step length, halving on failure (at most [`MAX_HALVINGS`] times)
/// and doubling back towards `step` after a success. A step is accepted on
/// plain decrease of the cost.
pub(crate) fn gradient_descent<P: Problem>(
    problem: &mut P,
    x: &mut Vec<f64>,
    iterations: usize,
    step: f64,
) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut alpha = step;
    let (mut cost, mut grad) = problem.cost_and_gradient(x)?;
    for _ in 0..iterations {
        let dir = problem.precondition(grad);
        let len = problem.step_length(&dir);
        if !(len > 0.0) || !len.is_finite() {
            out.stalled = true;
            break;
        }
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(v, d)| v - a / len * d).collect();
            let c = problem.cost(&trial)?;
            if c < cost {
                accepted = Some((trial, c));
                break;
            }
            a *= 0.5;
        }
        match accepted {
            Some((trial, _)) => {
                *x = trial;
                alpha = (2.0 * a).min(step);
                let (c, g) = problem.cost_and_gradient(x)?;
                cost = c;
                grad = g;
                out.trace.push(cost);
            }
            None => {
                out.stalled = true;
                break;
            }
        }
    }
    Ok(out)
}

/// Adam with bias correction. A step that raises the cost is undone and
/// the rate halved, so the trace never increases.
pub(crate) fn adam<P: Problem>(
    problem: &mut P,
    x: &mut [f64],
    iterations: usize,
    lr: f64,
) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut lr = lr;
    let mut current = problem.cost(x)?;
    let mut previous = x.to_vec();
    for t in 1..=iterations {
        let (_, g) = problem.cost_and_gradient(x)?;
        let g = problem.precondition(g);
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        previous.copy_from_slice(x);
        for i in 0..x.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPSILON);
        }
        let cost = problem.cost(x)?;
        if cost <= current {
            current = cost;
        } else {
            // Rejected: keep the moments, retry from the old point with a smaller rate.
            x.copy_from_slice(&previous);
            lr *= 0.5;
        }
        out.trace.push(current);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `sum w_i (x_i - t_i)^2`.
    struct Quadratic {
        w: Vec<f64>,
        t: Vec<f64>,
    }

    impl Problem for Quadratic {
        fn cost(&mut self, x: &[f64]) -> Result<f64> {
            Ok(x.iter().zip(&self.w).zip(&self.t).map(|((x, w), t)| w * (x - t).powi(2)).sum())
        }
        fn cost_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let g = x.iter().zip(&self.w).zip(&self.t).map(|((x, w), t)| 2.0 * w * (x - t)).collect();
            Ok((self.cost(x)?, g))
        }
    }

    #[test]
    fn descent_trace_never_increases() {
        let mut p = Quadratic {
            w: vec![1.0, 10.0, 0.1],
            t: vec![3.0, -2.0, 1.0],
        };
        let mut x = vec![0.0; 3];
        let out = gradient_descent(&mut p, &mut x, 200, 1.0).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] < w[0]));
        assert!(out.trace.len() <= 200);
        assert!((x[1] + 2.0).abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn descent_stalls_at_minimum() {
        let mut p = Quadratic {
            w: vec![1.0],
            t: vec![0.0],
        };
        let mut x = vec![0.0];
        let out = gradient_descent(&mut p, &mut x, 5, 1.0).unwrap();
        assert!(out.stalled);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Quadratic {
            w: vec![1.0, 4.0],
            t: vec![1.0, -1.0],
        };
        let mut x = vec![0.0; 2];
        let out = adam(&mut p, &mut x, 500, 0.05).unwrap();
        assert_eq!(out.trace.len(), 500);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.trace[499] < 1e-3, "{:?}", &out.trace[490..]);
    }

    #[test]
    fn vector_lengths() {
        assert_eq!(max_vector_length(&[3.0, 4.0, 0.0, 1.0, 0.0, 0.0]), 5.0);
    }
}
