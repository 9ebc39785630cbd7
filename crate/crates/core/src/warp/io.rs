//! Displacement field files.
//!
//! A field is a NIfTI-1 file with `dim = [5, nx, ny, nz, 1, 3]`, intent
//! `NIFTI_INTENT_VECTOR`, and a float32 payload made of three concatenated
//! sub-volumes `ux`, `uy`, `uz` (voxel units). A sidecar text file next to it
//! (`<name>.txt`) names the component order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{read_nifti, voxel_count, write_nifti, VolumeHeader, DT_FLOAT32, NIFTI_INTENT_VECTOR};
use crate::warp::DisplacementField3;

const COMPONENTS_LINE: &str = "components: ux uy uz";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".txt");
    path.with_file_name(name)
}

pub fn save_field(u: &DisplacementField3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = u.dims();
    let header = VolumeHeader {
        dim: [5, nx as i16, ny as i16, nz as i16, 1, 3, 1, 1],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        datatype: DT_FLOAT32,
        intent_code: NIFTI_INTENT_VECTOR,
        scl_slope: 1.0,
        scl_inter: 0.0,
        scale_percent: None,
    };
    let n = voxel_count(u.dims());
    let mut payload = vec![0.0f32; 3 * n];
    for (idx, v) in u.data().iter().enumerate() {
        for c in 0..3 {
            payload[c * n + idx] = v[c] as f32;
        }
    }
    write_nifti(path, &header, &payload)?;
    let sidecar = format!(
        "volreg displacement field\n{COMPONENTS_LINE}\nunits: voxel\ndims: {nx} {ny} {nz}\n"
    );
    let side = sidecar_path(path);
    fs::write(&side, sidecar).map_err(|e| Error::io(side, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField3> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    if !text.lines().any(|l| l.trim() == COMPONENTS_LINE) {
        return Err(Error::MalformedHeader(format!(
            "{} does not declare component order `ux uy uz`",
            side.display()
        )));
    }
    let (header, payload) = read_nifti(path)?;
    if header.dim[0] != 5 || header.dim[4] != 1 || header.dim[5] != 3 {
        return Err(Error::MalformedHeader(format!(
            "displacement field needs dim = [5, nx, ny, nz, 1, 3], found {:?}",
            &header.dim[..=header.dim[0].clamp(0, 7) as usize]
        )));
    }
    let dims = header.spatial_dims();
    let n = voxel_count(dims);
    let data = (0..n)
        .map(|idx| std::array::from_fn(|c| payload[c * n + idx] as f64))
        .collect();
    DisplacementField3::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nii");
        let u = DisplacementField3::from_fn([3, 4, 5], |c| {
            [c[0] as f64 * 0.5, -(c[1] as f64), 0.125 * c[2] as f64]
        });
        save_field(&u, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_field(&path).unwrap(), u);
        let text = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(text.contains("components: ux uy uz"));
    }

    #[test]
    fn payload_is_three_concatenated_subvolumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nii");
        let u = DisplacementField3::constant([2, 2, 2], [1.0, 2.0, 3.0]);
        save_field(&u, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let floats: Vec<f32> = bytes[352..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats.len(), 24);
        assert!(floats[..8].iter().all(|&v| v == 1.0));
        assert!(floats[8..16].iter().all(|&v| v == 2.0));
        assert!(floats[16..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn scalar_volume_is_not_a_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        crate::volume::save_volume(&crate::volume::Volume3::zeros([2, 2, 2], [1.0; 3]), &path)
            .unwrap();
        fs::write(sidecar_path(&path), "components: ux uy uz\n").unwrap();
        assert!(load_field(&path).is_err());
    }
}
