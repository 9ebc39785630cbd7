//! Synthetic deformation fields and training-set manifests.
//!
//! A field is a sparse set of random impulse vectors smoothed by one
//! Gaussian and rescaled to an exact peak magnitude. The three frequency
//! classes map to `sigma(f) = (200 / f) * (min_axis / 64)` voxels, so a
//! higher class gives a rougher field.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{smooth_vectors, Boundary};
use crate::rng::SplitMix64;
use crate::volume::{flip, save_volume, voxel_count, Axis, Dims, Volume3};
use crate::warp::{apply_displacement, norm, save_field, DisplacementField3};

pub const FREQUENCY_CLASSES: [u32; 3] = [25, 35, 45];
pub const DEFAULT_SITES: usize = 150;
pub const DEFAULT_PER_BRAIN: usize = 100;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Default peak magnitude as a fraction of the shortest axis.
pub const DEFAULT_AMPLITUDE_FRACTION: f64 = 0.06;
pub const MIN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSpec {
    pub n_sites: usize,
    pub frequency: u32,
    /// Peak magnitude in voxels; `None` means 6 % of the shortest axis.
    pub amplitude: Option<f64>,
    pub seed: u64,
}

impl DeformationSpec {
    pub fn new(frequency: u32, seed: u64) -> Self {
        DeformationSpec {
            n_sites: DEFAULT_SITES,
            frequency,
            amplitude: None,
            seed,
        }
    }

    pub fn with_amplitude(mut self, a: f64) -> Self {
        self.amplitude = Some(a);
        self
    }

    pub fn amplitude_for(&self, dims: Dims) -> f64 {
        self.amplitude
            .unwrap_or_else(|| DEFAULT_AMPLITUDE_FRACTION * min_axis(dims) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 1 {
            return Err(Error::InvalidArgument("n_sites must be at least 1".into()));
        }
        if !FREQUENCY_CLASSES.contains(&self.frequency) {
            return Err(Error::InvalidArgument(format!(
                "frequency class must be one of 25, 35, 45, got {}",
                self.frequency
            )));
        }
        if let Some(a) = self.amplitude {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!("amplitude must be > 0, got {a}")));
            }
        }
        Ok(())
    }
}

fn min_axis(dims: Dims) -> usize {
    *dims.iter().min().expect("three axes")
}

/// Smoothing width in voxels for a frequency class on `dims`.
pub fn sigma_for(frequency: u32, dims: Dims) -> f64 {
    200.0 / frequency as f64 * (min_axis(dims) as f64 / 64.0)
}

pub fn generate_deformation(dims: Dims, spec: &DeformationSpec) -> Result<DisplacementField3> {
    spec.validate()?;
    if dims.iter().any(|&n| n < MIN_DIM) {
        return Err(Error::InvalidArgument(format!(
            "deformation grid {dims:?} must be at least {MIN_DIM} per axis"
        )));
    }
    let n = voxel_count(dims);
    if spec.n_sites > n {
        return Err(Error::InvalidArgument(format!(
            "{} sites do not fit in {n} voxels",
            spec.n_sites
        )));
    }
    let a = spec.amplitude_for(dims);
    let mut rng = SplitMix64::new(spec.seed);
    let mut sites = BTreeSet::new();
    let mut impulses = vec![[0.0; 3]; n];
    while sites.len() < spec.n_sites {
        let idx = rng.below(n as u64) as usize;
        if !sites.insert(idx) {
            continue;
        }
        let dir = rng.unit_vector();
        // Uniform on (0, a].
        let mag = a * (1.0 - rng.next_f64());
        impulses[idx] = dir.map(|d| d * mag);
    }
    let smooth = smooth_vectors(&impulses, dims, sigma_for(spec.frequency, dims), Boundary::Zero);
    let peak = smooth.iter().map(|v| norm(*v)).fold(0.0, f64::max);
    let scale = if peak > 0.0 { a / peak } else { 0.0 };
    DisplacementField3::new(dims, smooth.into_iter().map(|v| v.map(|c| c * scale)).collect())
}

/// The five variants each source expands to.
pub const FLIP_VARIANTS: [&[Axis]; 5] = [
    &[],
    &[Axis::X],
    &[Axis::Y],
    &[Axis::Z],
    &[Axis::X, Axis::Y, Axis::Z],
];

pub fn variant_id(source: &str, axes: &[Axis]) -> String {
    if axes.is_empty() {
        return source.to_string();
    }
    let suffix: String = axes
        .iter()
        .map(|a| match a {
            Axis::X => 'x',
            Axis::Y => 'y',
            Axis::Z => 'z',
        })
        .collect();
    format!("{source}_flip{suffix}")
}

/// Per-brain counts for the 25/35/45 classes: 20 % and 20 % rounded to the
/// nearest integer (halves up), the rest to the 45 class.
pub fn frequency_split(per_brain: usize) -> [usize; 3] {
    let low = (per_brain as f64 * 0.2 + 0.5).floor() as usize;
    let mid = low;
    [low, mid, per_brain - low - mid]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub source: String,
    pub flip: Vec<Axis>,
    pub spec: DeformationSpec,
    /// Relative to the dataset root.
    pub volume_path: PathBuf,
    pub field_path: PathBuf,
}

impl ManifestEntry {
    pub fn variant(&self) -> String {
        variant_id(&self.source, &self.flip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub per_brain: usize,
    pub sources: Vec<String>,
    /// Entries per frequency class, keyed by class.
    pub counts: BTreeMap<u32, usize>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn expanded_brains(&self) -> usize {
        self.sources.len() * FLIP_VARIANTS.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest schema_version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

pub fn build_manifest(sources: &[String], per_brain: usize, seed: u64) -> Result<DatasetManifest> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("manifest needs at least one source".into()));
    }
    if per_brain == 0 {
        return Err(Error::InvalidArgument("per_brain must be at least 1".into()));
    }
    let unique: BTreeSet<&String> = sources.iter().collect();
    if unique.len() != sources.len() {
        return Err(Error::InvalidArgument("duplicate source ids".into()));
    }
    let split = frequency_split(per_brain);
    let mut entries = Vec::with_capacity(sources.len() * FLIP_VARIANTS.len() * per_brain);
    let mut counts = BTreeMap::new();
    for source in sources {
        for axes in FLIP_VARIANTS {
            let variant = variant_id(source, axes);
            let mut k = 0;
            for (class, &count) in FREQUENCY_CLASSES.iter().zip(&split) {
                for _ in 0..count {
                    let stream = entries.len() as u64;
                    let spec = DeformationSpec::new(*class, SplitMix64::derive(seed, stream).next_u64());
                    let stem = format!("{variant}_f{class}_{k:03}");
                    entries.push(ManifestEntry {
                        source: source.clone(),
                        flip: axes.to_vec(),
                        spec,
                        volume_path: PathBuf::from(&variant).join(format!("{stem}.nii")),
                        field_path: PathBuf::from(&variant).join(format!("{stem}_field.nii")),
                    });
                    *counts.entry(*class).or_insert(0) += 1;
                    k += 1;
                }
            }
        }
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        per_brain,
        sources: sources.to_vec(),
        counts,
        entries,
    })
}

pub const CHECKSUM_FILE: &str = "checksums.json";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaterializeReport {
    /// Entries generated and written in this run.
    pub written: usize,
    /// Entries whose files were already present with matching checksums.
    pub skipped: usize,
    /// Entries whose files existed but failed the checksum and were rewritten.
    pub mismatched: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    Some(format!("{:x}", Sha256::digest(&bytes)))
}

/// Rounds every component to `f32` so the stored field reproduces the
/// stored volume exactly when reloaded.
fn quantized(u: DisplacementField3) -> DisplacementField3 {
    let dims = u.dims();
    let data = u.into_data().into_iter().map(|v| v.map(|c| c as f32 as f64)).collect();
    DisplacementField3::new(dims, data).expect("rounded field is finite")
}

/// Writes every entry's deformed volume and ground-truth field under
/// `root`. Outputs already recorded in `root/checksums.json` with a
/// matching digest are skipped.
pub fn materialize(
    manifest: &DatasetManifest,
    sources: &BTreeMap<String, Volume3>,
    root: impl AsRef<Path>,
) -> Result<MaterializeReport> {
    let root = root.as_ref();
    for e in &manifest.entries {
        if !sources.contains_key(&e.source) {
            return Err(Error::UnknownVolume(e.source.clone()));
        }
    }
    let ledger_path = root.join(CHECKSUM_FILE);
    let mut ledger: BTreeMap<String, String> = match fs::read_to_string(&ledger_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::json(&ledger_path, e))?,
        Err(_) => BTreeMap::new(),
    };
    let mut report = MaterializeReport::default();
    let mut todo = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let mut present = true;
        let mut mismatch = false;
        for rel in [&e.volume_path, &e.field_path] {
            let key = rel.to_string_lossy().into_owned();
            match (ledger.get(&key), sha256_file(&root.join(rel))) {
                (Some(want), Some(got)) if *want == got => {}
                (Some(_), Some(_)) => {
                    mismatch = true;
                    present = false;
                }
                _ => present = false,
            }
        }
        if mismatch {
            log::warn!("checksum mismatch for {}; regenerating", e.volume_path.display());
            report.mismatched.push(e.volume_path.clone());
        }
        if present {
            report.skipped += 1;
        } else {
            todo.push(i);
        }
    }
    let flipped: BTreeMap<String, Volume3> = manifest
        .entries
        .iter()
        .filter(|e| todo.iter().any(|&i| manifest.entries[i].variant() == e.variant()))
        .map(|e| (e.variant(), (e.source.clone(), e.flip.clone())))
        .collect::<BTreeMap<_, _>>()
        .into_iter()
        .map(|(variant, (source, axes))| (variant, flip(&sources[&source], &axes)))
        .collect();
    let digests: Vec<Result<Vec<(String, String)>>> = todo
        .par_iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            let base = &flipped[&e.variant()];
            let u = quantized(generate_deformation(base.dims(), &e.spec)?);
            let warped = apply_displacement(base, &u)?;
            let vol_path = root.join(&e.volume_path);
            let field_path = root.join(&e.field_path);
            if let Some(dir) = vol_path.parent() {
                fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
            }
            save_volume(&warped, &vol_path)?;
            save_field(&u, &field_path)?;
            let mut out = Vec::new();
            for (rel, full) in [(&e.volume_path, &vol_path), (&e.field_path, &field_path)] {
                let digest = sha256_file(full).ok_or_else(|| {
                    Error::io(full, std::io::Error::other("file vanished after writing"))
                })?;
                out.push((rel.to_string_lossy().into_owned(), digest));
            }
            Ok(out)
        })
        .collect();
    for d in digests {
        for (k, v) in d? {
            ledger.insert(k, v);
        }
        report.written += 1;
    }
    if report.written > 0 {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let text = serde_json::to_string_pretty(&ledger).expect("ledger serializes");
        fs::write(&ledger_path, text + "\n").map_err(|e| Error::io(&ledger_path, e))?;
    }
    Ok(report)
}
