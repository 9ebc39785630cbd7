//! Image similarity: reporting metrics and differentiable objectives.
//!
//! Reductions go through [`crate::reduce`], so every metric is identical at
//! any thread count.

mod histogram;
mod local;

pub use histogram::{entropy, joint_histogram, mi, nmi, BinRange, JointHistogram, DEFAULT_BINS};
pub(crate) use histogram::xlogx;
pub(crate) use local::{check_window, local_cc_values, local_cc_with_gradient};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::{sum_indexed, sums_indexed};
use crate::volume::{check_dims, Dims, Volume3};
use crate::warp::{warp_values_with_gradient, DisplacementField3, Scalar};

pub const DEFAULT_WINDOW: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Msd,
    Cc,
    LocalCc,
    Mi,
    Nmi,
}

impl Objective {
    pub const ALL: [Objective; 5] = [Objective::Msd, Objective::Cc, Objective::LocalCc, Objective::Mi, Objective::Nmi];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Msd => "msd",
            Objective::Cc => "cc",
            Objective::LocalCc => "local_cc",
            Objective::Mi => "mi",
            Objective::Nmi => "nmi",
        }
    }

    /// Whether a larger value means better alignment.
    pub fn maximize(self) -> bool {
        !matches!(self, Objective::Msd)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}`")))
    }
}

fn is_constant<T: Scalar>(v: &[T]) -> bool {
    let first = v[0].as_f64();
    v.iter().all(|x| x.as_f64() == first)
}

/// Pearson correlation; 0 when either input is constant.
pub(crate) fn pearson<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    let n = a.len();
    if is_constant(a) || is_constant(b) {
        return 0.0;
    }
    let [sa, sb] = sums_indexed(n, |i| [a[i].as_f64(), b[i].as_f64()]);
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let [cov, va, vb] = sums_indexed(n, |i| {
        let (x, y) = (a[i].as_f64() - ma, b[i].as_f64() - mb);
        [x * y, x * x, y * y]
    });
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Global Pearson correlation over all voxels.
pub fn cc_global(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(pearson(a.data(), b.data()))
}

pub(crate) fn msd_values<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    sum_indexed(a.len(), |i| {
        let d = a[i].as_f64() - b[i].as_f64();
        d * d
    }) / a.len() as f64
}

/// Mean squared intensity difference.
pub fn msd(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(msd_values(a.data(), b.data()))
}

/// Mean windowed squared correlation with a `window^3` neighbourhood.
pub fn local_cc(a: &Volume3, b: &Volume3, window: usize) -> Result<f64> {
    a.check_same_dims(b)?;
    let radius = check_window(window)?;
    Ok(local_cc_values(&a.to_f64(), &b.to_f64(), a.dims(), radius))
}

/// The four reported similarity scores for an image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub cc: f64,
    /// Nats.
    pub mi: f64,
    pub nmi: f64,
    pub msd: f64,
}

impl SimilarityReport {
    pub const CSV_HEADER: &'static str = "method,iteration,brain_id,cc,mi,nmi,msd";

    pub fn compute(a: &Volume3, b: &Volume3, bins: usize) -> Result<Self> {
        let h = joint_histogram(a, b, bins)?;
        Ok(SimilarityReport {
            cc: cc_global(a, b)?,
            mi: h.mutual_information(),
            nmi: h.normalized_mutual_information(),
            msd: msd(a, b)?,
        })
    }

    /// One CSV record: `method,iteration,brain_id,cc,mi,nmi,msd`.
    pub fn csv_row(&self, method: &str, iteration: usize, brain_id: &str) -> String {
        format!(
            "{method},{iteration},{brain_id},{},{},{},{}",
            self.cc, self.mi, self.nmi, self.msd
        )
    }
}

/// Objective value and its derivative with respect to every warped intensity.
pub(crate) fn intensity_gradient(
    fixed: &[f64],
    warped: &[f64],
    dims: Dims,
    objective: Objective,
    window: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = fixed.len() as f64;
    match objective {
        Objective::Msd => {
            let value = msd_values(fixed, warped);
            let grad = fixed
                .par_iter()
                .zip(warped)
                .map(|(f, w)| 2.0 * (w - f) / n)
                .collect();
            Ok((value, grad))
        }
        Objective::Cc => {
            if is_constant(fixed) || is_constant(warped) {
                return Ok((0.0, vec![0.0; fixed.len()]));
            }
            let [sa, sb] = sums_indexed(fixed.len(), |i| [fixed[i], warped[i]]);
            let (ma, mb) = (sa / n, sb / n);
            let [cov, va, vb] = sums_indexed(fixed.len(), |i| {
                let (x, y) = (fixed[i] - ma, warped[i] - mb);
                [x * y, x * x, y * y]
            });
            let norm = va.sqrt() * vb.sqrt();
            let cc = cov / norm;
            let grad = fixed
                .par_iter()
                .zip(warped)
                .map(|(f, w)| (f - ma) / norm - cc * (w - mb) / vb)
                .collect();
            Ok((cc, grad))
        }
        Objective::LocalCc => {
            let radius = check_window(window)?;
            Ok(local_cc_with_gradient(fixed, warped, dims, radius))
        }
        Objective::Mi | Objective::Nmi => Err(Error::UnsupportedObjective(objective.to_string())),
    }
}

/// Objective value with its dense gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub value: f64,
    /// `dE/du(x)` for the objective value `E` itself (not its negation).
    pub gradient: DisplacementField3,
}

pub(crate) fn dense_gradient_values<T: Scalar>(
    fixed: &[f64],
    moving: &[T],
    dims: Dims,
    u: &DisplacementField3,
    objective: Objective,
    window: usize,
) -> Result<ObjectiveGradient> {
    if matches!(objective, Objective::Mi | Objective::Nmi) {
        return Err(Error::UnsupportedObjective(objective.to_string()));
    }
    let (warped, slope) = warp_values_with_gradient(moving, dims, u);
    let (value, de_dw) = intensity_gradient(fixed, &warped, dims, objective, window)?;
    let data = de_dw
        .par_iter()
        .zip(&slope)
        .map(|(g, s)| [g * s[0], g * s[1], g * s[2]])
        .collect();
    Ok(ObjectiveGradient {
        value,
        gradient: DisplacementField3::new(dims, data)?,
    })
}

/// `dE/du(x) = dE/dw(x) * grad moving(x + u(x))`, where `w` is the warped
/// moving image and the spatial gradient is the exact derivative of the
/// trilinear interpolant. Supports `msd`, `cc` and `local_cc`.
pub fn objective_gradient(
    fixed: &Volume3,
    moving: &Volume3,
    u: &DisplacementField3,
    objective: Objective,
    window: usize,
) -> Result<ObjectiveGradient> {
    fixed.check_same_dims(moving)?;
    check_dims(fixed.dims(), u.dims())?;
    dense_gradient_values(&fixed.to_f64(), moving.data(), fixed.dims(), u, objective, window)
}

/// Objective value for warped intensities.
pub(crate) fn objective_value(
    fixed: &[f64],
    warped: &[f64],
    dims: Dims,
    objective: Objective,
    window: usize,
    bins: usize,
) -> Result<f64> {
    Ok(match objective {
        Objective::Msd => msd_values(fixed, warped),
        Objective::Cc => pearson(fixed, warped),
        Objective::LocalCc => local_cc_values(fixed, warped, dims, check_window(window)?),
        Objective::Mi => JointHistogram::from_values(
            fixed,
            warped,
            bins,
            BinRange::of(fixed),
            BinRange::of(warped),
        )
        .mutual_information(),
        Objective::Nmi => JointHistogram::from_values(
            fixed,
            warped,
            bins,
            BinRange::of(fixed),
            BinRange::of(warped),
        )
        .normalized_mutual_information(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_volume(dims: Dims, seed: u64) -> Volume3 {
        let mut rng = SplitMix64::new(seed);
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.uniform(0.0, 100.0) as f32)
            .collect();
        Volume3::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn cc_identities() {
        let x = random_volume([6, 5, 4], 1);
        assert!((cc_global(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let affine = x.with_data(x.data().iter().map(|v| 2.5 * v + 7.0).collect());
        assert!((cc_global(&x, &affine).unwrap() - 1.0).abs() < 1e-7);
        let neg = x.with_data(x.data().iter().map(|v| -v).collect());
        assert!((cc_global(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = x.with_data(vec![4.0; x.len()]);
        assert_eq!(cc_global(&x, &flat).unwrap(), 0.0);
    }

    #[test]
    fn msd_cases() {
        let x = random_volume([4, 4, 4], 2);
        assert_eq!(msd(&x, &x).unwrap(), 0.0);
        let zero = x.with_data(vec![0.0; 64]);
        let c = x.with_data(vec![3.0; 64]);
        assert_eq!(msd(&zero, &c).unwrap(), 9.0);
        let y = random_volume([4, 4, 4], 3);
        let mut direct = 0.0;
        for i in 0..64 {
            let d = x.data()[i] as f64 - y.data()[i] as f64;
            direct += d * d;
        }
        assert!((msd(&x, &y).unwrap() - direct / 64.0).abs() < 1e-9);
    }

    #[test]
    fn local_cc_identities() {
        let x = random_volume([7, 6, 5], 4);
        assert!((local_cc(&x, &x, 3).unwrap() - 1.0).abs() < 1e-12);
        let affine = x.with_data(x.data().iter().map(|v| 0.5 * v - 3.0).collect());
        assert!((local_cc(&x, &affine, 5).unwrap() - 1.0).abs() < 1e-6);
        assert!(local_cc(&x, &x, 4).is_err());
    }

    #[test]
    fn mi_and_nmi_reject_dense_gradient() {
        let x = random_volume([4, 4, 4], 5);
        let u = DisplacementField3::zeros([4, 4, 4]);
        for obj in [Objective::Mi, Objective::Nmi] {
            assert!(matches!(
                objective_gradient(&x, &x, &u, obj, 3),
                Err(Error::UnsupportedObjective(_))
            ));
        }
    }

    #[test]
    fn msd_gradient_vanishes_at_optimum() {
        let x = random_volume([6, 6, 6], 6);
        let u = DisplacementField3::zeros([6, 6, 6]);
        let g = objective_gradient(&x, &x, &u, Objective::Msd, 3).unwrap();
        assert_eq!(g.value, 0.0);
        assert!(g.gradient.data().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn report_csv_row() {
        let r = SimilarityReport {
            cc: 0.5,
            mi: 1.25,
            nmi: 1.1,
            msd: 3.0,
        };
        assert_eq!(r.csv_row("ffd", 100, "b1"), "ffd,100,b1,0.5,1.25,1.1,3");
        assert_eq!(SimilarityReport::CSV_HEADER.split(',').count(), 7);
    }
}
