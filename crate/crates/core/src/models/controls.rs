//! Histogram-measure gradients on FFD control points by localized central
//! differences.
//!
//! Perturbing one coefficient only changes the warp inside that node's
//! support box, so each difference re-samples just those voxels and updates
//! the joint histogram in place. Bins for the moving image are fixed to its
//! original intensity range so that counts stay comparable between the
//! base and perturbed warps.

use rayon::prelude::*;

use super::ffd::{ffd_to_displacement, AxisTable, FfdGrid};
use crate::error::{Error, Result};
use crate::similarity::{xlogx, BinRange, Objective, DEFAULT_BINS};
use crate::volume::{linear_index, Volume3};
use crate::warp::sample_scalar;

pub const DEFAULT_FD_STEP: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ControlGradient {
    /// Measure at the unperturbed grid.
    pub value: f64,
    pub gradient: Vec<[f64; 3]>,
}

/// Joint counts with running `sum n ln n` totals.
#[derive(Clone)]
struct Counts {
    bins: usize,
    joint: Vec<i64>,
    moving: Vec<i64>,
    s_joint: f64,
    s_moving: f64,
}

impl Counts {
    fn shift(&mut self, f: usize, from: usize, to: usize) {
        let b = self.bins;
        for (cell, delta) in [(f * b + from, -1), (f * b + to, 1)] {
            let n = &mut self.joint[cell];
            self.s_joint += xlogx(*n + delta) - xlogx(*n);
            *n += delta;
        }
        for (cell, delta) in [(from, -1), (to, 1)] {
            let n = &mut self.moving[cell];
            self.s_moving += xlogx(*n + delta) - xlogx(*n);
            *n += delta;
        }
    }
}

struct Context<'a> {
    grid: &'a FfdGrid,
    tables: [AxisTable; 3],
    moving: &'a [f32],
    dims: [usize; 3],
    fixed_bins: Vec<usize>,
    moving_bins: Vec<usize>,
    disp: Vec<[f64; 3]>,
    range: BinRange,
    bins: usize,
    /// `ln N` and the fixed-marginal entropy, which never change.
    ln_n: f64,
    n: f64,
    h_fixed: f64,
    measure: Objective,
}

impl Context<'_> {
    fn value(&self, c: &Counts) -> f64 {
        let hj = self.ln_n - c.s_joint / self.n;
        let hm = self.ln_n - c.s_moving / self.n;
        match self.measure {
            Objective::Mi => self.h_fixed + hm - hj,
            _ => {
                if hj <= 0.0 {
                    1.0
                } else {
                    (self.h_fixed + hm) / hj
                }
            }
        }
    }

    /// Measure with coefficient `(node, d)` replaced by `value`.
    fn perturbed(&self, counts: &mut Counts, node: usize, d: usize, value: f64) -> f64 {
        let k = self.grid.node_coords(node);
        let support = self.grid.support(&self.tables, k);
        let coeffs = self.grid.coeffs();
        let mut moved = Vec::new();
        for z in support[2].0..support[2].1 {
            for y in support[1].0..support[1].1 {
                for x in support[0].0..support[0].1 {
                    let idx = linear_index(self.dims, x, y, z);
                    let ud = self.grid.eval_component(&self.tables, [x, y, z], |i| {
                        if i == node {
                            value
                        } else {
                            coeffs[i][d]
                        }
                    });
                    let mut u = self.disp[idx];
                    u[d] = ud;
                    let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                    let bin = self.range.bin(sample_scalar(self.moving, self.dims, p), self.bins);
                    let old = self.moving_bins[idx];
                    if bin != old {
                        counts.shift(self.fixed_bins[idx], old, bin);
                        moved.push((idx, bin));
                    }
                }
            }
        }
        let v = self.value(counts);
        for (idx, bin) in moved {
            counts.shift(self.fixed_bins[idx], bin, self.moving_bins[idx]);
        }
        v
    }
}

/// Central-difference gradient of MI or NMI (fixed vs. warped moving) with
/// respect to every control coefficient. `step` is in voxels.
pub fn histogram_gradient_on_controls(
    fixed: &Volume3,
    moving: &Volume3,
    grid: &FfdGrid,
    step: f64,
    bins: usize,
    measure: Objective,
) -> Result<ControlGradient> {
    fixed.check_same_dims(moving)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if !matches!(measure, Objective::Mi | Objective::Nmi) {
        return Err(Error::UnsupportedObjective(measure.to_string()));
    }
    let dims = fixed.dims();
    let tables = grid.tables(dims)?;
    let u = ffd_to_displacement(grid, dims)?;
    let fixed_range = BinRange::of(fixed.data());
    let range = BinRange::of(moving.data());
    let fixed_bins: Vec<usize> = fixed.data().iter().map(|&v| fixed_range.bin(v as f64, bins)).collect();
    let disp = u.into_data();
    let moving_bins: Vec<usize> = (0..disp.len())
        .into_par_iter()
        .map(|idx| {
            let c = crate::volume::voxel_coords(dims, idx);
            let d = disp[idx];
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            range.bin(sample_scalar(moving.data(), dims, p), bins)
        })
        .collect();

    let mut counts = Counts {
        bins,
        joint: vec![0; bins * bins],
        moving: vec![0; bins],
        s_joint: 0.0,
        s_moving: 0.0,
    };
    let mut fixed_marginal = vec![0i64; bins];
    for (&f, &m) in fixed_bins.iter().zip(&moving_bins) {
        counts.joint[f * bins + m] += 1;
        counts.moving[m] += 1;
        fixed_marginal[f] += 1;
    }
    counts.s_joint = counts.joint.iter().map(|&n| xlogx(n)).sum();
    counts.s_moving = counts.moving.iter().map(|&n| xlogx(n)).sum();
    let n = fixed_bins.len() as f64;
    let ln_n = n.ln();
    let s_fixed: f64 = fixed_marginal.iter().map(|&c| xlogx(c)).sum();

    let ctx = Context {
        grid,
        tables,
        moving: moving.data(),
        dims,
        fixed_bins,
        moving_bins,
        disp,
        range,
        bins,
        ln_n,
        n,
        h_fixed: ln_n - s_fixed / n,
        measure,
    };
    let value = ctx.value(&counts);
    let gradient = (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || counts.clone(),
            |work, node| {
                std::array::from_fn(|d| {
                    let orig = grid.coeffs()[node][d];
                    let plus = ctx.perturbed(work, node, d, orig + step);
                    let minus = ctx.perturbed(work, node, d, orig - step);
                    (plus - minus) / (2.0 * step)
                })
            },
        )
        .collect();
    Ok(ControlGradient { value, gradient })
}

/// `dNMI/dc` by localized central differences with 64 bins.
pub fn nmi_gradient_on_controls(
    fixed: &Volume3,
    moving: &Volume3,
    grid: &FfdGrid,
    step: f64,
) -> Result<Vec<[f64; 3]>> {
    Ok(histogram_gradient_on_controls(fixed, moving, grid, step, DEFAULT_BINS, Objective::Nmi)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::similarity::JointHistogram;
    use crate::volume::make_phantom;
    use crate::warp::warp_values;

    /// Whole-volume oracle: full re-warp and a fresh histogram.
    fn global_measure(fixed: &Volume3, moving: &Volume3, g: &FfdGrid, bins: usize, measure: Objective) -> f64 {
        let u = ffd_to_displacement(g, fixed.dims()).unwrap();
        let w = warp_values(moving.data(), moving.dims(), &u);
        let h = JointHistogram::from_values(
            fixed.data(),
            &w,
            bins,
            BinRange::of(fixed.data()),
            BinRange::of(moving.data()),
        );
        match measure {
            Objective::Mi => h.entropy_a() + h.entropy_b() - h.joint_entropy(),
            _ => h.normalized_mutual_information(),
        }
    }

    fn smooth_image(dims: [usize; 3]) -> Volume3 {
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let data = (0..crate::volume::voxel_count(dims))
            .map(|i| {
                let p = crate::volume::voxel_coords(dims, i);
                let r2: f64 = (0..3).map(|a| ((p[a] as f64 - c[a]) / (0.3 * dims[a] as f64)).powi(2)).sum();
                (100.0 * (-r2).exp() + 20.0 * (0.4 * p[0] as f64).sin() * (0.3 * p[1] as f64).cos()) as f32
            })
            .collect();
        Volume3::new(dims, [1.0; 3], data).unwrap()
    }

    fn pair(seed: u64) -> (Volume3, Volume3, FfdGrid) {
        let dims = [16, 16, 16];
        let fixed = make_phantom(dims, seed).unwrap();
        let mut g = FfdGrid::covering(dims, [5.0; 3]).unwrap();
        let mut rng = SplitMix64::new(seed + 100);
        for c in g.coeffs_mut() {
            *c = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        }
        let u = ffd_to_displacement(&g, dims).unwrap();
        let moving = crate::warp::apply_displacement(&fixed, &u).unwrap();
        (fixed, moving, FfdGrid::covering(dims, [5.0; 3]).unwrap())
    }

    #[test]
    fn identical_images_sit_at_a_maximum() {
        // Hard binning makes NMI piecewise constant, so the two one-sided
        // values at the optimum need not agree; both must not exceed it.
        let fixed = make_phantom([16, 16, 16], 1).unwrap();
        let g = FfdGrid::covering(fixed.dims(), [5.0; 3]).unwrap();
        let base = global_measure(&fixed, &fixed, &g, DEFAULT_BINS, Objective::Nmi);
        for node in (0..g.node_count()).step_by(11) {
            for d in 0..3 {
                for h in [DEFAULT_FD_STEP, -DEFAULT_FD_STEP] {
                    let mut p = g.clone();
                    p.coeffs_mut()[node][d] = h;
                    assert!(global_measure(&fixed, &fixed, &p, DEFAULT_BINS, Objective::Nmi) <= base + 1e-12);
                }
            }
        }
        // A flat image in x has an exactly zero x-gradient.
        let dims = [12, 12, 12];
        // Integer levels 0..63 never sit on an interior bin edge.
        let data = (0..1728).map(|i| ((i / 12) % 64) as f32).collect();
        let flat = Volume3::new(dims, [1.0; 3], data).unwrap();
        let g = FfdGrid::covering(dims, [4.0; 3]).unwrap();
        let grad = nmi_gradient_on_controls(&flat, &flat, &g, DEFAULT_FD_STEP).unwrap();
        assert!(grad.iter().all(|v| v[0].abs() <= 1e-6));
    }

    #[test]
    fn local_differences_match_whole_volume_oracle() {
        let (fixed, moving, mut g) = pair(2);
        let mut rng = SplitMix64::new(9);
        for c in g.coeffs_mut() {
            *c = std::array::from_fn(|_| rng.uniform(-0.5, 0.5));
        }
        for measure in [Objective::Nmi, Objective::Mi] {
            let local = histogram_gradient_on_controls(&fixed, &moving, &g, 0.1, 32, measure).unwrap();
            let base = global_measure(&fixed, &moving, &g, 32, measure);
            assert!((local.value - base).abs() < 1e-9);
            for node in (0..g.node_count()).step_by(17) {
                for d in 0..3 {
                    let orig = g.coeffs()[node][d];
                    let mut p = g.clone();
                    p.coeffs_mut()[node][d] = orig + 0.1;
                    let mut m = g.clone();
                    m.coeffs_mut()[node][d] = orig - 0.1;
                    let oracle = (global_measure(&fixed, &moving, &p, 32, measure)
                        - global_measure(&fixed, &moving, &m, 32, measure))
                        / 0.2;
                    assert!(
                        (local.gradient[node][d] - oracle).abs() < 1e-6,
                        "node {node} d {d}: {} vs {oracle}",
                        local.gradient[node][d]
                    );
                }
            }
        }
    }

    #[test]
    fn single_control_ascent_is_monotone() {
        // Moving is a smooth image pushed by one central control node; ascend
        // on that node only.
        let dims = [24, 24, 24];
        let fixed = smooth_image(dims);
        let mut truth = FfdGrid::covering(dims, [8.0; 3]).unwrap();
        let node = truth.node_index(truth.lattice().map(|l| l / 2));
        truth.coeffs_mut()[node] = [2.0, -1.3, 0.7];
        let u = ffd_to_displacement(&truth, dims).unwrap();
        let moving = crate::warp::apply_displacement(&fixed, &u.scaled(-1.0)).unwrap();
        let mut g = FfdGrid::covering(dims, [8.0; 3]).unwrap();
        let mut last = global_measure(&fixed, &moving, &g, 32, Objective::Nmi);
        for _ in 0..5 {
            let grad = histogram_gradient_on_controls(&fixed, &moving, &g, 0.1, 32, Objective::Nmi)
                .unwrap()
                .gradient[node];
            let norm = crate::warp::norm(grad);
            assert!(norm > 0.0);
            let c = &mut g.coeffs_mut()[node];
            for d in 0..3 {
                c[d] += 0.3 * grad[d] / norm;
            }
            let now = global_measure(&fixed, &moving, &g, 32, Objective::Nmi);
            assert!(now > last, "{now} <= {last}");
            last = now;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (fixed, moving, g) = pair(4);
        assert!(nmi_gradient_on_controls(&fixed, &moving, &g, 0.0).is_err());
        assert!(histogram_gradient_on_controls(&fixed, &moving, &g, 0.1, 32, Objective::Msd).is_err());
    }
}
