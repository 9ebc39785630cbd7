//! Scalar volumes: representation, resampling to coarser grids, flips and
//! synthetic phantoms.

mod nifti;
mod phantom;

pub use nifti::{load_volume, save_volume, VolumeHeader};
pub(crate) use nifti::{read_nifti, write_nifti, DT_FLOAT32, NIFTI_INTENT_VECTOR};
pub use phantom::make_phantom;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid size `(nx, ny, nz)`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear index in x-fastest order.
#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

/// Inverse of [`linear_index`].
#[inline]
pub fn voxel_coords(dims: Dims, idx: usize) -> [usize; 3] {
    let i = idx % dims[0];
    let r = idx / dims[0];
    [i, r % dims[1], r / dims[1]]
}

/// 3D scalar image with physical voxel spacing in micrometers.
///
/// Spacing and origin are held at the single precision they have on disk so
/// that a save/load cycle reproduces the value exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: [f32; 3],
    origin: [f32; 3],
    scale_percent: Option<f64>,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("empty dims {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "{} intensities for dims {dims:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume3 {
            dims,
            spacing: spacing.map(|s| s as f32),
            origin: [0.0; 3],
            scale_percent: None,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f64; 3]) -> Self {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)]).expect("valid zero volume")
    }

    /// Volume on the same grid and metadata as `self` with new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Volume3 {
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            scale_percent: self.scale_percent,
            data: Vec::new(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing.map(|s| s as f64)
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin.map(|o| o as f64)
    }

    pub fn set_origin(&mut self, origin: [f64; 3]) {
        self.origin = origin.map(|o| o as f32);
    }

    pub fn scale_percent(&self) -> Option<f64> {
        self.scale_percent
    }

    pub fn set_scale_percent(&mut self, p: Option<f64>) {
        self.scale_percent = p;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        crate::reduce::sum_indexed(self.data.len(), |i| self.data[i] as f64)
            / self.data.len() as f64
    }

    pub fn check_same_dims(&self, other: &Volume3) -> Result<()> {
        check_dims(self.dims, other.dims)
    }

    /// The intensities widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// The axial (constant-z) slice at index `k`, as `nx * ny` values.
    pub fn axial_slice(&self, k: usize) -> Vec<f32> {
        let plane = self.dims[0] * self.dims[1];
        self.data[k * plane..(k + 1) * plane].to_vec()
    }
}

pub(crate) fn check_dims(left: Dims, right: Dims) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimMismatch { left, right })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Reverses the voxel order along every axis in `axes`. Metadata is kept.
pub fn flip(vol: &Volume3, axes: &[Axis]) -> Volume3 {
    let mut mirror = [false; 3];
    for a in axes {
        mirror[a.index()] = true;
    }
    if !mirror.iter().any(|&m| m) {
        return vol.clone();
    }
    let dims = vol.dims;
    let src = &vol.data;
    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(dims[0] * dims[1])
        .enumerate()
        .for_each(|(k, plane)| {
            let sk = if mirror[2] { dims[2] - 1 - k } else { k };
            for j in 0..dims[1] {
                let sj = if mirror[1] { dims[1] - 1 - j } else { j };
                let row = &mut plane[j * dims[0]..(j + 1) * dims[0]];
                let base = linear_index(dims, 0, sj, sk);
                for (i, v) in row.iter_mut().enumerate() {
                    let si = if mirror[0] { dims[0] - 1 - i } else { i };
                    *v = src[base + si];
                }
            }
        });
    vol.with_data(out)
}

/// Output length for one axis: `max(2, round_half_up(factor * n))`.
pub fn scaled_len(n: usize, factor: f64) -> usize {
    // The small bias keeps exact halves such as 0.5 * 17 from rounding down
    // when the product is one ulp short.
    let m = (factor * n as f64 + 0.5 + 1e-9).floor() as usize;
    m.clamp(2, n.max(2))
}

/// Box-filter weights for resampling `n_in` cells onto `n_out` cells.
/// Output cell `o` covers `[o*s, (o+1)*s)` in input units with `s = n_in/n_out`;
/// each input cell contributes its overlap length divided by `s`.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * s;
            let hi = (o + 1) as f64 * s;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / s))
                })
                .collect()
        })
        .collect()
}

/// Resamples `vol` onto a coarser grid by overlap-weighted box averaging.
///
/// Output dims are `max(2, round_half_up(factor * n))` per axis and the
/// spacing grows by `n_in / n_out`. The global mean is preserved.
pub fn downscale(vol: &Volume3, factor: f64) -> Result<Volume3> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "downscale factor {factor} outside (0, 1]"
        )));
    }
    let out_dims = vol.dims.map(|n| scaled_len(n, factor));
    resample_box(vol, out_dims, factor)
}

/// Box-average `vol` onto `out_dims` (each no larger than the input).
pub fn downscale_to(vol: &Volume3, out_dims: Dims) -> Result<Volume3> {
    resample_box(vol, out_dims, out_dims[0] as f64 / vol.dims[0] as f64)
}

fn resample_box(vol: &Volume3, out_dims: Dims, factor: f64) -> Result<Volume3> {
    let in_dims = vol.dims;
    for a in 0..3 {
        if in_dims[a] < 2 || out_dims[a] < 2 || out_dims[a] > in_dims[a] {
            return Err(Error::InvalidArgument(format!(
                "cannot box-resample axis of length {} to {}",
                in_dims[a], out_dims[a]
            )));
        }
    }
    if out_dims == in_dims {
        return Ok(vol.clone());
    }
    let mut cur: Vec<f64> = vol.to_f64();
    let mut cur_dims = in_dims;
    for axis in 0..3 {
        if out_dims[axis] == cur_dims[axis] {
            continue;
        }
        let weights = box_weights(cur_dims[axis], out_dims[axis]);
        let mut next_dims = cur_dims;
        next_dims[axis] = out_dims[axis];
        let next: Vec<f64> = (0..voxel_count(next_dims))
            .into_par_iter()
            .map(|idx| {
                let mut c = voxel_coords(next_dims, idx);
                let o = c[axis];
                let mut acc = 0.0;
                for &(j, w) in &weights[o] {
                    c[axis] = j;
                    acc += w * cur[linear_index(cur_dims, c[0], c[1], c[2])];
                }
                acc
            })
            .collect();
        cur = next;
        cur_dims = next_dims;
    }
    let in_spacing = vol.spacing();
    let spacing: [f64; 3] =
        std::array::from_fn(|a| in_spacing[a] * in_dims[a] as f64 / out_dims[a] as f64);
    let mut out = Volume3::new(out_dims, spacing, cur.into_iter().map(|v| v as f32).collect())?;
    // Keep the physical position of the first voxel corner fixed.
    let origin = vol.origin();
    out.set_origin(std::array::from_fn(|a| {
        origin[a] + 0.5 * (spacing[a] - in_spacing[a])
    }));
    out.set_scale_percent(vol.scale_percent.map(|p| p * factor));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume3 {
        let data = (0..voxel_count(dims))
            .map(|idx| {
                let [i, j, k] = voxel_coords(dims, idx);
                (i + 2 * j + 3 * k) as f32
            })
            .collect();
        Volume3::new(dims, [1.0; 3], data).unwrap()
    }

    /// Brute-force overlap weight between output cell `o` (of `m`) and input
    /// cell `j` (of `n`) on the unit interval, normalised by output width.
    fn overlap_1d(n: usize, m: usize, o: usize, j: usize) -> f64 {
        let (olo, ohi) = (o as f64 / m as f64, (o + 1) as f64 / m as f64);
        let (ilo, ihi) = (j as f64 / n as f64, (j + 1) as f64 / n as f64);
        (ohi.min(ihi) - olo.max(ilo)).max(0.0) / (ohi - olo)
    }

    #[test]
    fn new_validates() {
        assert!(Volume3::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume3::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume3::new([2, 0, 2], [1.0; 3], vec![]).is_err());
        assert!(matches!(
            Volume3::new([2, 1, 1], [1.0; 3], vec![0.0, f32::INFINITY]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn scaled_len_rounding() {
        assert_eq!(scaled_len(17, 0.5), 9);
        assert_eq!(scaled_len(33, 0.5), 17);
        assert_eq!(scaled_len(65, 0.5), 33);
        assert_eq!(scaled_len(64, 0.25), 16);
        assert_eq!(scaled_len(10, 0.1), 2);
        assert_eq!(scaled_len(25, 0.1), 3);
        assert_eq!(scaled_len(3, 0.1), 2);
    }

    #[test]
    fn downscale_constant() {
        let vol = Volume3::new([40, 40, 40], [1.0; 3], vec![3.5; 64000]).unwrap();
        let out = downscale(&vol, 0.5).unwrap();
        assert_eq!(out.dims(), [20, 20, 20]);
        assert!(out.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
        assert_eq!(out.spacing(), [2.0; 3]);
    }

    #[test]
    fn downscale_identity() {
        let vol = ramp([5, 6, 7]);
        assert_eq!(downscale(&vol, 1.0).unwrap(), vol);
    }

    #[test]
    fn downscale_rejects_bad_factor() {
        let vol = ramp([4, 4, 4]);
        assert!(downscale(&vol, 0.0).is_err());
        assert!(downscale(&vol, 1.5).is_err());
        assert!(downscale(&vol, -0.2).is_err());
    }

    #[test]
    fn downscale_ramp_matches_overlap_oracle() {
        for (dims, factor) in [([20, 20, 20], 0.5), ([20, 13, 9], 0.37)] {
            let vol = ramp(dims);
            let out = downscale(&vol, factor).unwrap();
            let od = out.dims();
            for o in 0..voxel_count(od) {
                let [oi, oj, ok] = voxel_coords(od, o);
                let mut expected = 0.0;
                for idx in 0..voxel_count(dims) {
                    let [i, j, k] = voxel_coords(dims, idx);
                    let w = overlap_1d(dims[0], od[0], oi, i)
                        * overlap_1d(dims[1], od[1], oj, j)
                        * overlap_1d(dims[2], od[2], ok, k);
                    expected += w * vol.data()[idx] as f64;
                }
                let got = out.data()[o] as f64;
                assert!((got - expected).abs() < 1e-4 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn downscale_tracks_scale_annotation() {
        let mut vol = ramp([20, 20, 20]);
        vol.set_scale_percent(Some(100.0));
        let out = downscale(&vol, 0.1).unwrap();
        assert!((out.scale_percent().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn flip_laws() {
        let vol = ramp([3, 4, 5]);
        assert_eq!(flip(&flip(&vol, &[Axis::X]), &[Axis::X]), vol);
        assert_eq!(flip(&vol, &[]), vol);
        let seq = flip(&flip(&flip(&vol, &[Axis::X]), &[Axis::Y]), &[Axis::Z]);
        assert_eq!(flip(&vol, &[Axis::X, Axis::Y, Axis::Z]), seq);
        assert_eq!(flip(&vol, &[Axis::Y]).get(1, 0, 2), vol.get(1, 3, 2));
    }

    proptest! {
        #[test]
        fn downscale_preserves_mean(
            nx in 2usize..12, ny in 2usize..12, nz in 2usize..12,
            factor in 0.05f64..1.0, seed in any::<u64>()
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let dims = [nx, ny, nz];
            let data = (0..voxel_count(dims)).map(|_| rng.uniform(0.0, 1000.0) as f32).collect();
            let vol = Volume3::new(dims, [1.0; 3], data).unwrap();
            let out = downscale(&vol, factor).unwrap();
            let (m0, m1) = (vol.mean(), out.mean());
            prop_assert!((m0 - m1).abs() <= 1e-3 * m0.abs());
        }

        #[test]
        fn flip_preserves_multiset(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            fx: bool, fy: bool, fz: bool, seed in any::<u64>()
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let dims = [nx, ny, nz];
            let data = (0..voxel_count(dims)).map(|_| rng.uniform(-5.0, 5.0) as f32).collect();
            let vol = Volume3::new(dims, [1.0; 3], data).unwrap();
            let axes: Vec<Axis> = [(fx, Axis::X), (fy, Axis::Y), (fz, Axis::Z)]
                .into_iter().filter(|p| p.0).map(|p| p.1).collect();
            let out = flip(&vol, &axes);
            let mut a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
