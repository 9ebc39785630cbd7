//! Joint-histogram entropy estimators (natural log, so MI is in nats).

use crate::error::Result;
use crate::volume::Volume3;
use crate::warp::Scalar;

pub const DEFAULT_BINS: usize = 64;

/// Intensity range used to map values onto bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRange {
    pub min: f64,
    pub max: f64,
}

impl BinRange {
    pub fn of<T: Scalar>(values: &[T]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                let v = v.as_f64();
                (lo.min(v), hi.max(v))
            });
        BinRange { min, max }
    }

    /// Linear min-max binning with the top edge inclusive. Values outside
    /// the range land in the first or last bin; a degenerate range maps
    /// everything to bin 0.
    #[inline]
    pub fn bin(&self, v: f64, bins: usize) -> usize {
        let width = self.max - self.min;
        if width <= 0.0 {
            return 0;
        }
        let t = (v - self.min) / width;
        if t <= 0.0 {
            0
        } else {
            ((t * bins as f64) as usize).min(bins - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    /// Row-major `bins x bins`; row is the bin of the first image.
    counts: Vec<u64>,
    range_a: BinRange,
    range_b: BinRange,
    total: u64,
}

impl JointHistogram {
    pub fn from_values<A: Scalar, B: Scalar>(
        a: &[A],
        b: &[B],
        bins: usize,
        range_a: BinRange,
        range_b: BinRange,
    ) -> Self {
        assert_eq!(a.len(), b.len());
        assert!(bins >= 2);
        let mut counts = vec![0u64; bins * bins];
        for (x, y) in a.iter().zip(b) {
            let i = range_a.bin(x.as_f64(), bins);
            let j = range_b.bin(y.as_f64(), bins);
            counts[i * bins + j] += 1;
        }
        JointHistogram {
            bins,
            counts,
            range_a,
            range_b,
            total: a.len() as u64,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.bins + j]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn range_a(&self) -> BinRange {
        self.range_a
    }

    pub fn range_b(&self) -> BinRange {
        self.range_b
    }

    pub fn marginal_a(&self) -> Vec<u64> {
        self.counts
            .chunks_exact(self.bins)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<u64> {
        let mut m = vec![0u64; self.bins];
        for row in self.counts.chunks_exact(self.bins) {
            for (acc, c) in m.iter_mut().zip(row) {
                *acc += c;
            }
        }
        m
    }

    pub fn entropy_a(&self) -> f64 {
        entropy(&self.marginal_a(), self.total)
    }

    pub fn entropy_b(&self) -> f64 {
        entropy(&self.marginal_b(), self.total)
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(&self.counts, self.total)
    }

    /// `sum p(i,j) ln(p(i,j) / (p(i) p(j)))` over occupied cells.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let ma = self.marginal_a();
        let mb = self.marginal_b();
        let mut mi = 0.0;
        for i in 0..self.bins {
            for j in 0..self.bins {
                let c = self.count(i, j);
                if c == 0 {
                    continue;
                }
                let c = c as f64;
                mi += c / n * (c * n / (ma[i] as f64 * mb[j] as f64)).ln();
            }
        }
        mi.max(0.0)
    }

    /// `(H(A) + H(B)) / H(A,B)`, or 1 when the joint entropy vanishes.
    pub fn normalized_mutual_information(&self) -> f64 {
        let hj = self.joint_entropy();
        if hj <= 0.0 {
            return 1.0;
        }
        (self.entropy_a() + self.entropy_b()) / hj
    }
}

/// Shannon entropy (nats) of a count vector.
pub fn entropy(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// `c ln c`, with `0 ln 0 = 0`.
#[inline]
pub(crate) fn xlogx(c: i64) -> f64 {
    if c <= 0 {
        0.0
    } else {
        let c = c as f64;
        c * c.ln()
    }
}

/// Histogram of two volumes, each binned over its own min-max range.
pub fn joint_histogram(a: &Volume3, b: &Volume3, bins: usize) -> Result<JointHistogram> {
    a.check_same_dims(b)?;
    if bins < 2 {
        return Err(crate::Error::InvalidArgument(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    Ok(JointHistogram::from_values(
        a.data(),
        b.data(),
        bins,
        BinRange::of(a.data()),
        BinRange::of(b.data()),
    ))
}

/// Mutual information in nats.
pub fn mi(a: &Volume3, b: &Volume3, bins: usize) -> Result<f64> {
    Ok(joint_histogram(a, b, bins)?.mutual_information())
}

/// Normalised mutual information `(H(A) + H(B)) / H(A,B)`.
pub fn nmi(a: &Volume3, b: &Volume3, bins: usize) -> Result<f64> {
    Ok(joint_histogram(a, b, bins)?.normalized_mutual_information())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3 {
        Volume3::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn identical_images_fill_the_diagonal() {
        let data: Vec<f32> = (0..27).map(|i| (i * 7 % 11) as f32).collect();
        let v = vol([3, 3, 3], data);
        let h = joint_histogram(&v, &v, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert_eq!(h.count(i, j), 0);
                }
            }
        }
        assert_eq!(h.counts().iter().sum::<u64>(), 27);
    }

    #[test]
    fn constant_images_use_one_cell() {
        let a = vol([2, 2, 2], vec![3.0; 8]);
        let b = vol([2, 2, 2], vec![-1.0; 8]);
        let h = joint_histogram(&a, &b, 16).unwrap();
        assert_eq!(h.count(0, 0), 8);
        assert_eq!(mi(&a, &b, 16).unwrap(), 0.0);
        assert_eq!(nmi(&a, &b, 16).unwrap(), 1.0);
    }

    #[test]
    fn crafted_pair_matches_hand_enumeration() {
        // a in [0, 4], b in [10, 20], 4 bins each.
        // a bins: 0->0, 1->1, 2->2, 3->3, 4->3 (top edge inclusive)
        // b bins: 10->0, 12.5->1, 15->2, 20->3, 17.4->2
        let a = vol([2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 2.0, 4.0]);
        let b = vol([2, 2, 2], vec![10.0, 12.5, 15.0, 20.0, 17.4, 10.0, 20.0, 12.5]);
        let h = joint_histogram(&a, &b, 4).unwrap();
        let mut expected = [[0u64; 4]; 4];
        expected[0][0] = 2; // (0,10) twice
        expected[1][1] = 1; // (1,12.5)
        expected[2][2] = 1; // (2,15)
        expected[3][3] = 1; // (3,20)
        expected[3][2] = 1; // (4,17.4)
        expected[2][3] = 1; // (2,20)
        expected[3][1] = 1; // (4,12.5)
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(h.count(i, j), expected[i][j], "cell ({i},{j})");
            }
        }
        assert_eq!(h.total(), 8);
    }

    #[test]
    fn wrong_bins_and_dims_rejected() {
        let a = vol([2, 2, 2], vec![0.0; 8]);
        let b = vol([2, 2, 1], vec![0.0; 4]);
        assert!(joint_histogram(&a, &b, 4).is_err());
        assert!(joint_histogram(&a, &a, 1).is_err());
    }
}
