//! Cubic B-spline free-form deformation on a uniform control lattice.
//!
//! Control node `k` sits at voxel coordinate `origin + k * spacing` (per
//! axis). A voxel at `x` has local coordinate `t = (x - origin) / spacing`,
//! and its displacement is the tensor-product sum over the 4x4x4 nodes
//! `floor(t) - 1 ..= floor(t) + 2` weighted by the uniform cubic basis at
//! `r = t - floor(t)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{voxel_coords, voxel_count, Dims};
use crate::warp::DisplacementField3;

pub const MIN_SPACING: f64 = 2.0;

/// Uniform cubic B-spline basis `B_0..B_3` at `r in [0, 1)`.
#[inline]
pub fn basis(r: f64) -> [f64; 4] {
    let r2 = r * r;
    let r3 = r2 * r;
    let s = 1.0 - r;
    [
        s * s * s / 6.0,
        (3.0 * r3 - 6.0 * r2 + 4.0) / 6.0,
        (-3.0 * r3 + 3.0 * r2 + 3.0 * r + 1.0) / 6.0,
        r3 / 6.0,
    ]
}

/// First and second derivatives of the basis at a knot (`r = 0`), per unit `t`.
const KNOT_VALUE: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
const KNOT_SLOPE: [f64; 3] = [-0.5, 0.0, 0.5];
const KNOT_CURVATURE: [f64; 3] = [1.0, -2.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FfdGrid {
    lattice: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    coeffs: Vec<[f64; 3]>,
}

/// Per-axis lookup: first support node and basis weights for each voxel index.
#[derive(Debug, Clone)]
pub(crate) struct AxisTable {
    pub first: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

impl FfdGrid {
    /// Zero-coefficient lattice covering `dims` with a one-cell margin:
    /// node 1 sits on voxel 0 and the lattice extends two nodes past the
    /// last voxel.
    pub fn covering(dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s >= MIN_SPACING && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "control spacing {spacing:?} must be at least {MIN_SPACING} voxels"
            )));
        }
        let lattice: Dims =
            std::array::from_fn(|a| ((dims[a] - 1) as f64 / spacing[a]).floor() as usize + 4);
        Ok(FfdGrid {
            lattice,
            spacing,
            origin: spacing.map(|s| -s),
            coeffs: vec![[0.0; 3]; voxel_count(lattice)],
        })
    }

    /// Explicit lattice; used when reading grids back and for coarse levels.
    pub fn from_parts(
        lattice: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        coeffs: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if lattice.iter().any(|&n| n < 4) {
            return Err(Error::InvalidArgument(format!(
                "control lattice {lattice:?} needs at least 4 nodes per axis"
            )));
        }
        if coeffs.len() != voxel_count(lattice) {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for lattice {lattice:?}",
                coeffs.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("bad spacing {spacing:?}")));
        }
        Ok(FfdGrid {
            lattice,
            spacing,
            origin,
            coeffs,
        })
    }

    pub fn lattice(&self) -> Dims {
        self.lattice
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.coeffs
    }

    pub fn node_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn node_index(&self, k: [usize; 3]) -> usize {
        k[0] + self.lattice[0] * (k[1] + self.lattice[1] * k[2])
    }

    pub fn node_coords(&self, idx: usize) -> [usize; 3] {
        voxel_coords(self.lattice, idx)
    }

    /// Voxel position of a control node.
    pub fn node_position(&self, k: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + k[a] as f64 * self.spacing[a])
    }

    /// The same lattice expressed on a resampled image grid. Image grids are
    /// aligned as by box downscaling, so fine coordinate `x_f` corresponds
    /// to `(x_f + 0.5) m / n - 0.5` on a grid of `m` cells; coefficients are
    /// rescaled to the new voxel units. The displacement field of the result
    /// is the resampled field of `self`, exactly.
    pub fn on_grid(&self, from_dims: Dims, to_dims: Dims) -> Self {
        let ratio: [f64; 3] = std::array::from_fn(|a| to_dims[a] as f64 / from_dims[a] as f64);
        FfdGrid {
            lattice: self.lattice,
            spacing: std::array::from_fn(|a| self.spacing[a] * ratio[a]),
            origin: std::array::from_fn(|a| (self.origin[a] + 0.5) * ratio[a] - 0.5),
            coeffs: self
                .coeffs
                .iter()
                .map(|c| std::array::from_fn(|a| c[a] * ratio[a]))
                .collect(),
        }
    }

    pub(crate) fn axis_table(&self, axis: usize, n: usize) -> Result<AxisTable> {
        let mut first = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for x in 0..n {
            let t = (x as f64 - self.origin[axis]) / self.spacing[axis];
            let f = t.floor();
            let start = f as isize - 1;
            if start < 0 || start as usize + 3 >= self.lattice[axis] {
                return Err(Error::InvalidArgument(format!(
                    "control lattice {:?} does not cover voxel {x} on axis {axis}",
                    self.lattice
                )));
            }
            first.push(start as usize);
            weights.push(basis(t - f));
        }
        Ok(AxisTable { first, weights })
    }

    pub(crate) fn tables(&self, dims: Dims) -> Result<[AxisTable; 3]> {
        Ok([
            self.axis_table(0, dims[0])?,
            self.axis_table(1, dims[1])?,
            self.axis_table(2, dims[2])?,
        ])
    }

    /// Displacement component `d` at voxel `c`, reading coefficients through
    /// `coeff`. Every evaluation path sums in this order.
    #[inline]
    pub(crate) fn eval_component(
        &self,
        tables: &[AxisTable; 3],
        c: [usize; 3],
        coeff: impl Fn(usize) -> f64,
    ) -> f64 {
        let (fx, fy, fz) = (tables[0].first[c[0]], tables[1].first[c[1]], tables[2].first[c[2]]);
        let (wx, wy, wz) = (
            &tables[0].weights[c[0]],
            &tables[1].weights[c[1]],
            &tables[2].weights[c[2]],
        );
        let mut acc = 0.0;
        for n in 0..4 {
            for m in 0..4 {
                let wyz = wy[m] * wz[n];
                let row = self.node_index([fx, fy + m, fz + n]);
                for l in 0..4 {
                    acc += wx[l] * wyz * coeff(row + l);
                }
            }
        }
        acc
    }

    #[inline]
    pub(crate) fn eval_at(&self, tables: &[AxisTable; 3], c: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|d| self.eval_component(tables, c, |i| self.coeffs[i][d]))
    }

    /// Voxel range `[lo, hi)` per axis whose displacement depends on node `k`.
    pub(crate) fn support(&self, tables: &[AxisTable; 3], k: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let first = &tables[a].first;
            let lo = first.partition_point(|&f| f + 3 < k[a]);
            let hi = first.partition_point(|&f| f <= k[a]);
            (lo, hi.max(lo))
        })
    }

    /// `dE/dc = sum_x B(x) dE/du(x)` for a dense gradient on `dims`.
    pub fn adjoint(&self, dense: &DisplacementField3) -> Result<Vec<[f64; 3]>> {
        let dims = dense.dims();
        let tables = self.tables(dims)?;
        let mut out = vec![[0.0; 3]; self.coeffs.len()];
        for (idx, g) in dense.data().iter().enumerate() {
            if *g == [0.0; 3] {
                continue;
            }
            let c = voxel_coords(dims, idx);
            let (fx, fy, fz) = (tables[0].first[c[0]], tables[1].first[c[1]], tables[2].first[c[2]]);
            let (wx, wy, wz) = (
                &tables[0].weights[c[0]],
                &tables[1].weights[c[1]],
                &tables[2].weights[c[2]],
            );
            for n in 0..4 {
                for m in 0..4 {
                    let wyz = wy[m] * wz[n];
                    let row = self.node_index([fx, fy + m, fz + n]);
                    for l in 0..4 {
                        let w = wx[l] * wyz;
                        let o = &mut out[row + l];
                        o[0] += w * g[0];
                        o[1] += w * g[1];
                        o[2] += w * g[2];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let [lx, ly, lz] = self.lattice;
        let [sx, sy, sz] = self.spacing;
        let [ox, oy, oz] = self.origin;
        write!(
            out,
            "volreg-ffd 1\nlattice {lx} {ly} {lz}\nspacing {sx} {sy} {sz}\norigin {ox} {oy} {oz}\nend_header\n"
        )
        .expect("write to vec");
        for c in &self.coeffs {
            for v in c {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let marker = b"end_header\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::MalformedHeader("FFD file has no end_header line".into()))?;
        let header = String::from_utf8_lossy(&bytes[..end]);
        let mut lines = header.lines();
        if lines.next() != Some("volreg-ffd 1") {
            return Err(Error::MalformedHeader("not a volreg FFD file".into()));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            if let Some(key) = parts.next() {
                let values: Vec<f64> = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::MalformedHeader(format!("{key}: {e}")))?;
                fields.insert(key.to_string(), values);
            }
        }
        let triple = |key: &str| -> Result<[f64; 3]> {
            fields
                .get(key)
                .filter(|v| v.len() == 3)
                .map(|v| [v[0], v[1], v[2]])
                .ok_or_else(|| Error::MalformedHeader(format!("missing `{key}` line")))
        };
        let lattice = triple("lattice")?.map(|v| v as usize);
        let spacing = triple("spacing")?;
        let origin = triple("origin")?;
        let payload = &bytes[end + marker.len()..];
        let n = voxel_count(lattice);
        if payload.len() != 12 * n {
            return Err(Error::MalformedHeader(format!(
                "FFD payload has {} bytes, expected {}",
                payload.len(),
                12 * n
            )));
        }
        let coeffs = payload
            .chunks_exact(12)
            .map(|c| {
                std::array::from_fn(|d| {
                    f32::from_le_bytes(c[4 * d..4 * d + 4].try_into().unwrap()) as f64
                })
            })
            .collect();
        Self::from_parts(lattice, spacing, origin, coeffs)
    }
}

/// Dense displacement of an FFD on a `dims` image grid.
pub fn ffd_to_displacement(g: &FfdGrid, dims: Dims) -> Result<DisplacementField3> {
    let tables = g.tables(dims)?;
    let data = (0..voxel_count(dims))
        .into_par_iter()
        .map(|idx| g.eval_at(&tables, voxel_coords(dims, idx)))
        .collect();
    DisplacementField3::new(dims, data)
}

/// Bending energy `mean over knots of sum_d (u_xx^2 + u_yy^2 + u_zz^2 +
/// 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2)` sampled at every knot with a full
/// stencil (nodes `1..n-1` per axis), with derivatives in voxel units.
/// Returns the energy and its gradient with respect to every coefficient.
pub fn bending_energy(g: &FfdGrid) -> (f64, Vec<[f64; 3]>) {
    let knots: [Vec<usize>; 3] = std::array::from_fn(|a| (1..g.lattice[a] - 1).collect());
    let count = knots.iter().map(Vec::len).product::<usize>();
    let mut grad = vec![[0.0; 3]; g.coeffs.len()];
    if count == 0 {
        return (0.0, grad);
    }
    // Per-axis 3-tap stencils for value, first and second derivative.
    let stencil = |order: usize, axis: usize| -> [f64; 3] {
        let h = g.spacing[axis];
        match order {
            0 => KNOT_VALUE,
            1 => KNOT_SLOPE.map(|w| w / h),
            _ => KNOT_CURVATURE.map(|w| w / (h * h)),
        }
    };
    // (orders per axis, multiplicity) of the six second-derivative terms.
    let terms: [([usize; 3], f64); 6] = [
        ([2, 0, 0], 1.0),
        ([0, 2, 0], 1.0),
        ([0, 0, 2], 1.0),
        ([1, 1, 0], 2.0),
        ([1, 0, 1], 2.0),
        ([0, 1, 1], 2.0),
    ];
    let stencils: Vec<([[f64; 3]; 3], f64)> = terms
        .iter()
        .map(|(orders, mult)| {
            (
                [stencil(orders[0], 0), stencil(orders[1], 1), stencil(orders[2], 2)],
                *mult,
            )
        })
        .collect();
    let scale = 1.0 / count as f64;
    let mut energy = 0.0;
    for &kz in &knots[2] {
        for &ky in &knots[1] {
            for &kx in &knots[0] {
                for (st, mult) in &stencils {
                    let mut deriv = [0.0; 3];
                    for n in 0..3 {
                        for m in 0..3 {
                            for l in 0..3 {
                                let w = st[0][l] * st[1][m] * st[2][n];
                                if w == 0.0 {
                                    continue;
                                }
                                let c = g.coeffs[g.node_index([kx + l - 1, ky + m - 1, kz + n - 1])];
                                for d in 0..3 {
                                    deriv[d] += w * c[d];
                                }
                            }
                        }
                    }
                    energy += mult * scale * (deriv[0].powi(2) + deriv[1].powi(2) + deriv[2].powi(2));
                    for n in 0..3 {
                        for m in 0..3 {
                            for l in 0..3 {
                                let w = st[0][l] * st[1][m] * st[2][n];
                                if w == 0.0 {
                                    continue;
                                }
                                let o = &mut grad[g.node_index([kx + l - 1, ky + m - 1, kz + n - 1])];
                                for d in 0..3 {
                                    o[d] += 2.0 * mult * scale * w * deriv[d];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (energy, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_grid(dims: Dims, spacing: f64, seed: u64) -> FfdGrid {
        let mut g = FfdGrid::covering(dims, [spacing; 3]).unwrap();
        let mut rng = SplitMix64::new(seed);
        for c in g.coeffs_mut() {
            *c = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        }
        g
    }

    #[test]
    fn basis_at_knot_and_partition_of_unity() {
        let b = basis(0.0);
        assert_eq!(b, [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0]);
        for r in [0.1, 0.37, 0.5, 0.99] {
            assert!((basis(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_grid_gives_zero_field() {
        let g = FfdGrid::covering([10, 11, 12], [3.0; 3]).unwrap();
        let u = ffd_to_displacement(&g, [10, 11, 12]).unwrap();
        assert!(u.data().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn lattice_shape_and_validation() {
        let g = FfdGrid::covering([64, 48, 17], [8.0, 8.0, 8.0]).unwrap();
        assert_eq!(g.lattice(), [11, 9, 6]);
        assert!(FfdGrid::covering([10, 10, 10], [1.5, 3.0, 3.0]).is_err());
        assert!(ffd_to_displacement(&g, [80, 48, 17]).is_err());
    }

    #[test]
    fn single_node_has_compact_support() {
        let dims = [30, 30, 30];
        let mut g = FfdGrid::covering(dims, [5.0; 3]).unwrap();
        let k = [3, 2, 4];
        let idx = g.node_index(k);
        g.coeffs_mut()[idx] = [1.0, 0.0, 0.0];
        let u = ffd_to_displacement(&g, dims).unwrap();
        // Node k at voxel (k - 1) * 5; its support is the open box of half-width 2 cells.
        for i in 0..voxel_count(dims) {
            let c = voxel_coords(dims, i);
            let inside = (0..3).all(|a| {
                let centre = (k[a] as f64 - 1.0) * 5.0;
                (c[a] as f64 - centre).abs() < 10.0
            });
            let v = u.data()[i];
            if inside {
                assert!(v[0] > 0.0);
            } else {
                assert_eq!(v, [0.0; 3]);
            }
            assert_eq!([v[1], v[2]], [0.0, 0.0]);
        }
        let tables = g.tables(dims).unwrap();
        // The reported ranges may include the zero-weight voxel on the lower edge.
        let s = g.support(&tables, k);
        assert_eq!(s, [(0, 20), (0, 15), (5, 25)]);
    }

    #[test]
    fn affine_coefficients_reproduce_affine_field() {
        let dims = [20, 18, 16];
        let mut g = FfdGrid::covering(dims, [4.0; 3]).unwrap();
        let a = [[0.02, -0.01, 0.03], [0.0, 0.05, -0.02], [0.01, 0.01, -0.04]];
        let b = [0.5, -1.0, 2.0];
        for idx in 0..g.node_count() {
            let p = g.node_position(g.node_coords(idx));
            g.coeffs_mut()[idx] =
                std::array::from_fn(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + b[r]);
        }
        let u = ffd_to_displacement(&g, dims).unwrap();
        for idx in 0..voxel_count(dims) {
            let x = voxel_coords(dims, idx).map(|v| v as f64);
            for r in 0..3 {
                let e = a[r][0] * x[0] + a[r][1] * x[1] + a[r][2] * x[2] + b[r];
                assert!((u.data()[idx][r] - e).abs() < 1e-6);
            }
        }
        let (e, _) = bending_energy(&g);
        assert!(e.abs() < 1e-6, "bending of affine pattern {e}");
    }

    #[test]
    fn bending_energy_zero_and_gradient() {
        let dims = [12, 12, 12];
        let g = FfdGrid::covering(dims, [3.0; 3]).unwrap();
        assert_eq!(bending_energy(&g).0, 0.0);

        // 6^3 lattice.
        let g = random_grid([6, 6, 6], 2.5, 3);
        assert_eq!(g.lattice(), [6, 6, 6]);
        let (_, grad) = bending_energy(&g);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let scale = grad.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in (0..g.node_count()).step_by(7) {
            for d in 0..3 {
                let mut p = g.clone();
                p.coeffs_mut()[idx][d] += h;
                let mut m = g.clone();
                m.coeffs_mut()[idx][d] -= h;
                let fd = (bending_energy(&p).0 - bending_energy(&m).0) / (2.0 * h);
                worst = worst.max((fd - grad[idx][d]).abs() / scale);
            }
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }

    #[test]
    fn adjoint_matches_transpose() {
        // <ffd(c), g> == <c, adjoint(g)> for random c and g.
        let dims = [9, 10, 11];
        let grid = random_grid(dims, 3.0, 1);
        let u = ffd_to_displacement(&grid, dims).unwrap();
        let mut rng = SplitMix64::new(2);
        let dense = DisplacementField3::new(
            dims,
            (0..voxel_count(dims))
                .map(|_| std::array::from_fn(|_| rng.uniform(-1.0, 1.0)))
                .collect(),
        )
        .unwrap();
        let lhs: f64 = u
            .data()
            .iter()
            .zip(dense.data())
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        let adj = grid.adjoint(&dense).unwrap();
        let rhs: f64 = grid
            .coeffs()
            .iter()
            .zip(&adj)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn regridding_reproduces_resampled_field() {
        let fine = [32, 32, 32];
        let coarse = [16, 16, 16];
        let g = random_grid(fine, 8.0, 4);
        let gc = g.on_grid(fine, coarse);
        let uc = ffd_to_displacement(&gc, coarse).unwrap();
        let uf = ffd_to_displacement(&g, fine).unwrap();
        // Coarse voxel i sits at fine coordinate 2 i + 0.5; compare with the
        // fine B-spline evaluated there via the mean of the two fine voxels
        // would be approximate, so evaluate the fine spline exactly instead.
        let t = |x: f64, a: usize| (x - g.origin()[a]) / g.spacing()[a];
        for idx in (0..voxel_count(coarse)).step_by(13) {
            let c = voxel_coords(coarse, idx);
            let xf = c.map(|v| 2.0 * v as f64 + 0.5);
            let mut expected = [0.0; 3];
            let f: [isize; 3] = std::array::from_fn(|a| t(xf[a], a).floor() as isize);
            let w: [[f64; 4]; 3] = std::array::from_fn(|a| basis(t(xf[a], a) - f[a] as f64));
            for n in 0..4 {
                for m in 0..4 {
                    for l in 0..4 {
                        let k = [
                            (f[0] - 1 + l as isize) as usize,
                            (f[1] - 1 + m as isize) as usize,
                            (f[2] - 1 + n as isize) as usize,
                        ];
                        let cf = g.coeffs()[g.node_index(k)];
                        let wt = w[0][l] * w[1][m] * w[2][n];
                        for d in 0..3 {
                            expected[d] += wt * cf[d];
                        }
                    }
                }
            }
            for d in 0..3 {
                assert!((uc.data()[idx][d] - expected[d] / 2.0).abs() < 1e-9);
            }
        }
        assert_eq!(uf.dims(), fine);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ffd");
        let mut g = random_grid([16, 16, 16], 4.0, 5);
        for c in g.coeffs_mut() {
            *c = c.map(|v| (v as f32) as f64);
        }
        g.save(&path).unwrap();
        assert_eq!(FfdGrid::load(&path).unwrap(), g);
    }
}
