//! Comparison harness: register targets to a reference with several engines
//! at several resolutions, record before/after scores and wall time, and
//! write CSV, Markdown, JSON and overlay images.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{register, Engine, RegistrationConfig, RegistrationResult};
use crate::similarity::SimilarityReport;
use crate::syngen::{generate_deformation, DeformationSpec};
use crate::volume::{downscale, load_volume, make_phantom, save_volume, Dims, Volume3};
use crate::warp::{apply_displacement, DisplacementField3};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RESOLUTIONS: [f64; 2] = [0.10, 0.15];
pub const CSV_HEADER: [&str; 8] = ["engine", "resolution", "target", "iterations", "cc", "mi", "nmi", "seconds"];
pub const CSV_FILE: &str = "report.csv";
pub const MARKDOWN_FILE: &str = "report.md";
pub const JSON_FILE: &str = "report.json";
pub const OVERLAY_DIR: &str = "overlays";

/// Where a plan volume comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeSource {
    /// A NIfTI file; relative paths resolve against the plan's directory.
    Path(PathBuf),
    Phantom { dims: Dims, seed: u64 },
    /// Another plan volume warped by a synthetic field
    /// (`volume(x) = base(x + u(x))`).
    Deformed {
        base: String,
        frequency: u32,
        #[serde(default)]
        amplitude: Option<f64>,
        seed: u64,
    },
}

/// One engine configuration under a display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineRun {
    pub label: String,
    pub config: RegistrationConfig,
}

impl EngineRun {
    pub fn new(config: RegistrationConfig) -> Self {
        EngineRun {
            label: config.engine.name().to_string(),
            config,
        }
    }

    pub fn labelled(label: impl Into<String>, config: RegistrationConfig) -> Self {
        EngineRun {
            label: label.into(),
            config,
        }
    }
}

fn default_schema() -> u32 {
    PLAN_SCHEMA_VERSION
}

fn default_resolutions() -> Vec<f64> {
    DEFAULT_RESOLUTIONS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub reference: String,
    pub targets: Vec<String>,
    pub volumes: BTreeMap<String, VolumeSource>,
    pub engines: Vec<EngineRun>,
    /// Downscale factors in `(0, 1]`.
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Run rows on worker threads; their wall times are flagged.
    #[serde(default)]
    pub parallel_rows: bool,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(reference: impl Into<String>, targets: Vec<String>, engines: Vec<EngineRun>) -> Self {
        ExperimentPlan {
            schema_version: PLAN_SCHEMA_VERSION,
            reference: reference.into(),
            targets,
            volumes: BTreeMap::new(),
            engines,
            resolutions: default_resolutions(),
            output_dir: None,
            seed: 0,
            parallel_rows: false,
            base_dir: None,
        }
    }

    pub fn with_volume(mut self, id: impl Into<String>, source: VolumeSource) -> Self {
        self.volumes.insert(id.into(), source);
        self
    }

    pub fn with_resolutions(mut self, resolutions: Vec<f64>) -> Self {
        self.resolutions = resolutions;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan = Self::from_json(&text)?;
        plan.base_dir = path.parent().map(Path::to_path_buf);
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "plan schema_version {} (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("plan has no targets".into()));
        }
        if self.targets.contains(&self.reference) {
            return Err(Error::Config(format!("reference `{}` is also a target", self.reference)));
        }
        if self.engines.is_empty() {
            return Err(Error::Config("plan has no engines".into()));
        }
        if self.resolutions.is_empty() {
            return Err(Error::Config("plan has no resolutions".into()));
        }
        if let Some(f) = self.resolutions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config(format!("resolution {f} outside (0, 1]")));
        }
        for run in &self.engines {
            run.config.validate()?;
        }
        Ok(())
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Loads or builds volume `id`.
    pub fn resolve(&self, id: &str) -> Result<Volume3> {
        self.resolve_depth(id, 0)
    }

    fn resolve_depth(&self, id: &str, depth: usize) -> Result<Volume3> {
        if depth > self.volumes.len() {
            return Err(Error::Config(format!("volume `{id}` is defined in terms of itself")));
        }
        match self.volumes.get(id) {
            Some(VolumeSource::Path(p)) => load_volume(self.resolve_path(p)),
            Some(VolumeSource::Phantom { dims, seed }) => make_phantom(*dims, *seed),
            Some(VolumeSource::Deformed {
                base,
                frequency,
                amplitude,
                seed,
            }) => {
                let base = self.resolve_depth(base, depth + 1)?;
                let mut spec = DeformationSpec::new(*frequency, *seed);
                spec.amplitude = *amplitude;
                let u = generate_deformation(base.dims(), &spec)?;
                apply_displacement(&base, &u)
            }
            None => {
                // A bare id that names an existing file is accepted as a path.
                let p = self.resolve_path(Path::new(id));
                if p.is_file() {
                    load_volume(p)
                } else {
                    Err(Error::UnknownVolume(id.to_string()))
                }
            }
        }
    }
}

/// Mid-axial slices of the reference and the warped target.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub reference: Vec<f32>,
    pub warped: Vec<f32>,
}

impl Overlay {
    pub fn mid_axial(reference: &Volume3, warped: &Volume3) -> Self {
        let [nx, ny, nz] = reference.dims();
        Overlay {
            width: nx,
            height: ny,
            reference: reference.axial_slice(nz / 2),
            warped: warped.axial_slice(nz / 2),
        }
    }

    /// 8-bit RGB pixels, reference in red and warped target in green, each
    /// scaled by its own maximum.
    pub fn rgb(&self) -> Vec<u8> {
        let scale = |v: &[f32]| {
            let m = v.iter().cloned().fold(0.0f32, f32::max);
            if m > 0.0 {
                255.0 / m
            } else {
                0.0
            }
        };
        let (sr, sg) = (scale(&self.reference), scale(&self.warped));
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        // Image rows run top to bottom, so the y axis is flipped.
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let i = x + self.width * y;
                let to_byte = |v: f32, s: f32| (v.max(0.0) * s).round().min(255.0) as u8;
                out.extend_from_slice(&[to_byte(self.reference[i], sr), to_byte(self.warped[i], sg), 0]);
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.rgb())?;
        writer.finish()?;
        Ok(())
    }

    fn slice_volume(&self, data: &[f32]) -> Volume3 {
        Volume3::new([self.width, self.height, 1], [1.0; 3], data.to_vec()).expect("slice shape")
    }

    /// Writes `{stem}_reference.nii` and `{stem}_warped.nii` (one-slice volumes).
    pub fn save_slices(&self, dir: &Path, stem: &str) -> Result<()> {
        save_volume(&self.slice_volume(&self.reference), dir.join(format!("{stem}_reference.nii")))?;
        save_volume(&self.slice_volume(&self.warped), dir.join(format!("{stem}_warped.nii")))
    }

    pub fn load_slices(dir: &Path, stem: &str) -> Result<Self> {
        let r = load_volume(dir.join(format!("{stem}_reference.nii")))?;
        let w = load_volume(dir.join(format!("{stem}_warped.nii")))?;
        r.check_same_dims(&w)?;
        let [width, height, _] = r.dims();
        Ok(Overlay {
            width,
            height,
            reference: r.into_data(),
            warped: w.into_data(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub engine: String,
    pub resolution: f64,
    pub target: String,
    pub iterations: usize,
    pub before: SimilarityReport,
    pub after: SimilarityReport,
    /// Wall time of the registration call alone.
    pub seconds: f64,
    pub fell_back: bool,
    /// Ran alongside other rows, so the wall time is not a serial figure.
    pub concurrent: bool,
    #[serde(skip)]
    pub overlay: Option<Overlay>,
}

impl BenchRow {
    pub fn key(&self) -> (String, String, String) {
        (self.engine.clone(), resolution_label(self.resolution), self.target.clone())
    }

    pub fn overlay_stem(&self) -> String {
        overlay_stem(&self.engine, self.resolution, &self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRow {
    pub engine: String,
    pub resolution: f64,
    pub target: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub reference: String,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    pub failures: Vec<FailedRow>,
}

/// `resolution` as written to the CSV.
pub fn resolution_label(factor: f64) -> String {
    format!("{factor}")
}

fn overlay_stem(engine: &str, resolution: f64, target: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}_r{}_{}", clean(engine), clean(&resolution_label(resolution)), clean(target))
}

/// Whole seconds (rounded) as zero-padded `HH:MM:SS`.
pub fn format_hms(seconds: f64) -> String {
    let total = if seconds.is_finite() && seconds > 0.0 {
        seconds.round() as u64
    } else {
        0
    };
    format!("{:02}:{:02}:{:02}", total / 3600, total / 60 % 60, total % 60)
}

/// Inverse of [`format_hms`].
pub fn parse_hms(text: &str) -> Option<u64> {
    let parts: Vec<u64> = text.split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    match parts[..] {
        [h, m, s] if m < 60 && s < 60 => Some(h * 3600 + m * 60 + s),
        _ => None,
    }
}

struct Task<'a> {
    run: &'a EngineRun,
    resolution: f64,
    target: &'a str,
    fixed: &'a Volume3,
    moving: &'a Volume3,
}

fn at_resolution(vol: &Volume3, factor: f64) -> Result<Volume3> {
    let mut v = vol.clone();
    if v.scale_percent().is_none() {
        v.set_scale_percent(Some(100.0));
    }
    if factor == 1.0 {
        return Ok(v);
    }
    downscale(&v, factor)
}

fn run_task(task: &Task, seed: u64, concurrent: bool) -> std::result::Result<BenchRow, FailedRow> {
    let failed = |e: Error| FailedRow {
        engine: task.run.label.clone(),
        resolution: task.resolution,
        target: task.target.to_string(),
        error: e.to_string(),
    };
    let cfg = RegistrationConfig {
        seed,
        ..task.run.config.clone()
    };
    let start = Instant::now();
    let result = register(task.fixed, task.moving, &cfg).map_err(failed)?;
    let seconds = start.elapsed().as_secs_f64();
    let warped = apply_displacement(task.moving, &result.field).map_err(failed)?;
    log::info!(
        "{} @ {} {}: cc {:.4} -> {:.4} in {}",
        task.run.label,
        task.resolution,
        task.target,
        result.before.cc,
        result.after.cc,
        format_hms(seconds)
    );
    Ok(BenchRow {
        engine: task.run.label.clone(),
        resolution: task.resolution,
        target: task.target.to_string(),
        iterations: result.total_iterations(),
        before: result.before,
        after: result.after,
        seconds,
        fell_back: result.fell_back,
        concurrent,
        overlay: Some(Overlay::mid_axial(task.fixed, &warped)),
    })
}

/// Registers every target to the reference with every engine at every
/// resolution. Engine failures become [`FailedRow`]s.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<BenchReport> {
    plan.validate()?;
    let reference = plan.resolve(&plan.reference)?;
    let targets: Vec<Volume3> = plan.targets.iter().map(|t| plan.resolve(t)).collect::<Result<_>>()?;
    let mut scaled = Vec::new();
    for &factor in &plan.resolutions {
        let r = at_resolution(&reference, factor)?;
        let ts: Vec<Volume3> = targets.iter().map(|t| at_resolution(t, factor)).collect::<Result<_>>()?;
        scaled.push((factor, r, ts));
    }
    let mut tasks = Vec::new();
    for run in &plan.engines {
        for (factor, r, ts) in &scaled {
            for (id, t) in plan.targets.iter().zip(ts) {
                tasks.push(Task {
                    run,
                    resolution: *factor,
                    target: id,
                    fixed: r,
                    moving: t,
                });
            }
        }
    }
    let outcomes: Vec<_> = if plan.parallel_rows {
        tasks.par_iter().map(|t| run_task(t, plan.seed, true)).collect()
    } else {
        tasks.iter().map(|t| run_task(t, plan.seed, false)).collect()
    };
    let mut report = BenchReport {
        schema_version: PLAN_SCHEMA_VERSION,
        reference: plan.reference.clone(),
        seed: plan.seed,
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(row) => report.rows.push(row),
            Err(f) => {
                log::warn!("{} @ {} {} failed: {}", f.engine, f.resolution, f.target, f.error);
                report.failures.push(f);
            }
        }
    }
    Ok(report)
}

/// Per-row differences between two references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapDelta {
    pub engine: String,
    pub resolution: f64,
    pub target: String,
    pub cc_original: f64,
    pub cc_alternate: f64,
    pub delta_cc: f64,
    pub mi_original: f64,
    pub mi_alternate: f64,
    pub delta_mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub reference: String,
    pub alternate: String,
    pub original: BenchReport,
    pub swapped: BenchReport,
    pub deltas: Vec<SwapDelta>,
}

impl SwapReport {
    pub fn max_abs_delta_cc(&self) -> f64 {
        self.deltas.iter().map(|d| d.delta_cc.abs()).fold(0.0, f64::max)
    }
}

/// Runs the plan, then again with `alternate` as the reference, and pairs
/// the rows.
pub fn reference_swap_test(plan: &ExperimentPlan, alternate: &str) -> Result<SwapReport> {
    if alternate == plan.reference {
        return Err(Error::Config(format!("alternate reference `{alternate}` equals the original")));
    }
    if plan.targets.iter().any(|t| t == alternate) {
        return Err(Error::Config(format!("alternate reference `{alternate}` is also a target")));
    }
    let original = run_experiment(plan)?;
    let swapped_plan = ExperimentPlan {
        reference: alternate.to_string(),
        ..plan.clone()
    };
    let swapped = run_experiment(&swapped_plan)?;
    let by_key: BTreeMap<_, _> = swapped.rows.iter().map(|r| (r.key(), r)).collect();
    let deltas = original
        .rows
        .iter()
        .filter_map(|a| {
            let b = by_key.get(&a.key())?;
            Some(SwapDelta {
                engine: a.engine.clone(),
                resolution: a.resolution,
                target: a.target.clone(),
                cc_original: a.after.cc,
                cc_alternate: b.after.cc,
                delta_cc: b.after.cc - a.after.cc,
                mi_original: a.after.mi,
                mi_alternate: b.after.mi,
                delta_mi: b.after.mi - a.after.mi,
            })
        })
        .collect();
    Ok(SwapReport {
        reference: plan.reference.clone(),
        alternate: alternate.to_string(),
        original,
        swapped,
        deltas,
    })
}

/// Foreground voxels of `image`: intensity above 5% of its maximum.
pub fn foreground_mask(image: &Volume3) -> Vec<bool> {
    let (_, max) = image.min_max();
    let threshold = 0.05 * max;
    image.data().iter().map(|&v| v > threshold).collect()
}

/// Mean `|u - truth|` over the foreground of `mask_image`.
pub fn field_error(u: &DisplacementField3, truth: &DisplacementField3, mask_image: &Volume3) -> Result<f64> {
    for dims in [truth.dims(), mask_image.dims()] {
        if dims != u.dims() {
            return Err(Error::DimMismatch {
                left: u.dims(),
                right: dims,
            });
        }
    }
    let mask = foreground_mask(mask_image);
    let (sum, count) = u
        .data()
        .iter()
        .zip(truth.data())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            (s + (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(), c + 1)
        });
    if count == 0 {
        return Err(Error::InvalidArgument("foreground mask is empty".into()));
    }
    Ok(sum / count as f64)
}

/// Mean Euclidean error of the recovered field against `truth` over the
/// fixed image's foreground.
pub fn recovery_error(result: &RegistrationResult, truth: &DisplacementField3, fixed: &Volume3) -> Result<f64> {
    field_error(&result.field, truth, fixed)
}

fn csv_record(row: &BenchRow) -> [String; 8] {
    [
        row.engine.clone(),
        resolution_label(row.resolution),
        row.target.clone(),
        row.iterations.to_string(),
        format!("{:.6}", row.after.cc),
        format!("{:.6}", row.after.mi),
        format!("{:.6}", row.after.nmi),
        format!("{:.3}", row.seconds),
    ]
}

pub fn report_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in &report.rows {
        w.write_record(csv_record(row))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Reads a report CSV back as string records (header checked).
pub fn read_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected CSV header {header:?}")));
    }
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

fn percent_label(resolution: &str) -> String {
    match resolution.parse::<f64>() {
        Ok(f) => format!("{}%", (f * 100.0 * 1e6).round() / 1e6),
        Err(_) => resolution.to_string(),
    }
}

/// Markdown tables rendered from the CSV text: scores per row, then wall
/// time per engine and target with one column per resolution.
pub fn render_markdown(csv_text: &str, reference: &str, failures: &[FailedRow]) -> Result<String> {
    let records = read_csv(csv_text)?;
    let mut md = String::new();
    md.push_str("# Registration report\n\n");
    md.push_str(&format!("Reference: `{reference}`\n\n"));
    md.push_str("## Scores\n\n| Engine | Resolution | Target | Iterations | CC | MI | NMI |\n");
    md.push_str("|---|---|---|---:|---:|---:|---:|\n");
    for r in &records {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r[0],
            percent_label(&r[1]),
            r[2],
            r[3],
            r[4],
            r[5],
            r[6]
        ));
    }
    let mut resolutions: Vec<String> = Vec::new();
    let mut times: BTreeMap<(String, String), BTreeMap<String, String>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for r in &records {
        if !resolutions.contains(&r[1]) {
            resolutions.push(r[1].clone());
        }
        let key = (r[0].clone(), r[2].clone());
        if !order.contains(&key) {
            order.push(key.clone());
        }
        let secs: f64 = r[7].parse().unwrap_or(f64::NAN);
        times.entry(key).or_default().insert(r[1].clone(), format_hms(secs));
    }
    md.push_str("\n## Computation time\n\n| Engine | Target |");
    for res in &resolutions {
        md.push_str(&format!(" {} |", percent_label(res)));
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---:|".repeat(resolutions.len()));
    md.push('\n');
    for key in &order {
        md.push_str(&format!("| {} | {} |", key.0, key.1));
        for res in &resolutions {
            let cell = times[key].get(res).map(String::as_str).unwrap_or("-");
            md.push_str(&format!(" {cell} |"));
        }
        md.push('\n');
    }
    if !failures.is_empty() {
        md.push_str("\n## Failed runs\n\n");
        for f in failures {
            md.push_str(&format!(
                "- {} at {} on `{}`: {}\n",
                f.engine,
                percent_label(&resolution_label(f.resolution)),
                f.target,
                f.error
            ));
        }
    }
    Ok(md)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.md`, `report.json` and, for rows that carry
/// one, `overlays/<stem>.png` plus its two one-slice NIfTI volumes.
pub fn emit_report(report: &BenchReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_text = report_csv(report)?;
    let mut written = Vec::new();
    let csv_path = dir.join(CSV_FILE);
    write(&csv_path, &csv_text)?;
    written.push(csv_path);
    let md_path = dir.join(MARKDOWN_FILE);
    write(&md_path, &render_markdown(&csv_text, &report.reference, &report.failures)?)?;
    written.push(md_path);
    let json_path = dir.join(JSON_FILE);
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json(&json_path, e))?;
    write(&json_path, &json)?;
    written.push(json_path);
    let overlays = dir.join(OVERLAY_DIR);
    for row in &report.rows {
        if let Some(o) = &row.overlay {
            fs::create_dir_all(&overlays).map_err(|e| Error::io(&overlays, e))?;
            let stem = row.overlay_stem();
            o.save_slices(&overlays, &stem)?;
            let png = overlays.join(format!("{stem}.png"));
            o.save_png(&png)?;
            written.push(png);
        }
    }
    Ok(written)
}

/// Re-renders `report.md` from `report.csv` (reference and failures taken
/// from `report.json` when present) and every overlay PNG from its saved
/// slices.
pub fn rerender_report(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let csv_path = dir.join(CSV_FILE);
    let csv_text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(JSON_FILE);
    let (reference, failures) = match fs::read_to_string(&json_path) {
        Ok(text) => {
            let r: BenchReport = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
            (r.reference, r.failures)
        }
        Err(_) => ("unknown".to_string(), Vec::new()),
    };
    let mut written = Vec::new();
    let md_path = dir.join(MARKDOWN_FILE);
    write(&md_path, &render_markdown(&csv_text, &reference, &failures)?)?;
    written.push(md_path);
    let overlays = dir.join(OVERLAY_DIR);
    for rec in read_csv(&csv_text)? {
        let resolution: f64 = rec[1]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad resolution `{}`", rec[1])))?;
        let stem = overlay_stem(&rec[0], resolution, &rec[2]);
        if overlays.join(format!("{stem}_reference.nii")).is_file() {
            let png = overlays.join(format!("{stem}.png"));
            Overlay::load_slices(&overlays, &stem)?.save_png(&png)?;
            written.push(png);
        }
    }
    Ok(written)
}

fn swap_csv(swap: &SwapReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "engine",
        "resolution",
        "target",
        "cc_original",
        "cc_alternate",
        "delta_cc",
        "mi_original",
        "mi_alternate",
        "delta_mi",
    ])?;
    for d in &swap.deltas {
        w.write_record([
            d.engine.clone(),
            resolution_label(d.resolution),
            d.target.clone(),
            format!("{:.6}", d.cc_original),
            format!("{:.6}", d.cc_alternate),
            format!("{:.6}", d.delta_cc),
            format!("{:.6}", d.mi_original),
            format!("{:.6}", d.mi_alternate),
            format!("{:.6}", d.delta_mi),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Writes both runs (under `original/` and `alternate/`) plus `swap.csv`,
/// `swap.md` and `swap.json`.
pub fn emit_swap_report(swap: &SwapReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = emit_report(&swap.original, dir.join("original"))?;
    written.extend(emit_report(&swap.swapped, dir.join("alternate"))?);
    let csv_path = dir.join("swap.csv");
    write(&csv_path, &swap_csv(swap)?)?;
    written.push(csv_path);
    let mut md = format!(
        "# Reference swap\n\nOriginal reference: `{}`\n\nAlternate reference: `{}`\n\n",
        swap.reference, swap.alternate
    );
    md.push_str("| Engine | Resolution | Target | CC (original) | CC (alternate) | ΔCC | ΔMI |\n");
    md.push_str("|---|---|---|---:|---:|---:|---:|\n");
    for d in &swap.deltas {
        md.push_str(&format!(
            "| {} | {} | {} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
            d.engine,
            percent_label(&resolution_label(d.resolution)),
            d.target,
            d.cc_original,
            d.cc_alternate,
            d.delta_cc,
            d.delta_mi
        ));
    }
    let md_path = dir.join("swap.md");
    write(&md_path, &md)?;
    written.push(md_path);
    let json_path = dir.join("swap.json");
    let json = serde_json::to_string_pretty(swap).map_err(|e| Error::json(&json_path, e))?;
    write(&json_path, &json)?;
    written.push(json_path);
    Ok(written)
}

/// Engine runs whose defaults make a quick phantom comparison: the three
/// deformable engines, FFD on `cc`.
pub fn default_engine_runs(levels: usize, iterations: usize) -> Vec<EngineRun> {
    [Engine::Ffd, Engine::DenseDiffeomorphic, Engine::DenseVoxelmorphEnergy]
        .into_iter()
        .map(|e| {
            let mut cfg = RegistrationConfig::new(e).with_schedule(levels, iterations);
            if e == Engine::Ffd {
                cfg.objective = Some(crate::similarity::Objective::Cc);
            }
            EngineRun::new(cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom_plan() -> ExperimentPlan {
        let mut affine = RegistrationConfig::new(Engine::Affine).with_schedule(1, 5);
        affine.bins = 32;
        let vm = RegistrationConfig::new(Engine::DenseVoxelmorphEnergy).with_schedule(1, 5);
        ExperimentPlan::new(
            "ref",
            vec!["a".into(), "b".into()],
            vec![EngineRun::new(affine), EngineRun::new(vm)],
        )
        .with_volume("ref", VolumeSource::Phantom { dims: [20; 3], seed: 1 })
        .with_volume(
            "a",
            VolumeSource::Deformed {
                base: "ref".into(),
                frequency: 25,
                amplitude: Some(1.0),
                seed: 2,
            },
        )
        .with_volume(
            "b",
            VolumeSource::Deformed {
                base: "ref".into(),
                frequency: 45,
                amplitude: Some(1.0),
                seed: 3,
            },
        )
        .with_resolutions(vec![1.0, 0.8])
    }

    #[test]
    fn hms_rendering() {
        assert_eq!(format_hms(13.0), "00:00:13");
        assert_eq!(format_hms(0.0), "00:00:00");
        assert_eq!(format_hms(4.0 * 3600.0 + 13.0 * 60.0 + 18.0), "04:13:18");
        assert_eq!(format_hms(12.6), "00:00:13");
        assert_eq!(format_hms(-1.0), "00:00:00");
        assert_eq!(parse_hms("04:13:18"), Some(15198));
        assert_eq!(parse_hms("00:61:00"), None);
    }

    #[test]
    fn row_count_is_engines_times_resolutions_times_targets() {
        let report = run_experiment(&phantom_plan()).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert!(report.failures.is_empty());
        for row in &report.rows {
            assert!(row.seconds >= 0.0);
            assert!(row.after.cc >= row.before.cc - 1e-6);
            assert!(!row.concurrent);
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = phantom_plan();
        p.targets.push("ref".into());
        assert!(p.validate().is_err());
        let mut p = phantom_plan();
        p.resolutions = vec![0.0];
        assert!(p.validate().is_err());
        let mut p = phantom_plan();
        p.engines.clear();
        assert!(p.validate().is_err());
        let p = phantom_plan();
        assert!(matches!(p.resolve("missing"), Err(Error::UnknownVolume(_))));
        assert!(ExperimentPlan::from_json(r#"{"reference":"r","targets":["t"],"volumes":{},"engines":[],"extra":1}"#).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let p = phantom_plan();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(ExperimentPlan::from_json(&text).unwrap(), p);
    }

    #[test]
    fn csv_and_markdown_agree() {
        let report = BenchReport {
            schema_version: 1,
            reference: "003".into(),
            seed: 0,
            rows: vec![BenchRow {
                engine: "ffd".into(),
                resolution: 0.1,
                target: "001".into(),
                iterations: 300,
                before: SimilarityReport {
                    cc: 0.5,
                    mi: 0.1,
                    nmi: 1.1,
                    msd: 3.0,
                },
                after: SimilarityReport {
                    cc: 0.9876543,
                    mi: 1.25,
                    nmi: 1.5,
                    msd: 1.0,
                },
                seconds: 13.2,
                fell_back: false,
                concurrent: false,
                overlay: None,
            }],
            failures: vec![FailedRow {
                engine: "ffd".into(),
                resolution: 0.15,
                target: "002".into(),
                error: "boom".into(),
            }],
        };
        let csv_text = report_csv(&report).unwrap();
        assert_eq!(
            csv_text,
            "engine,resolution,target,iterations,cc,mi,nmi,seconds\nffd,0.1,001,300,0.987654,1.250000,1.500000,13.200\n"
        );
        let md = render_markdown(&csv_text, &report.reference, &report.failures).unwrap();
        assert!(md.contains("| ffd | 10% | 001 | 300 | 0.987654 | 1.250000 | 1.500000 |"));
        assert!(md.contains("| ffd | 001 | 00:00:13 |"));
        assert!(md.contains("boom"));
        assert!(md.contains("`003`"));
    }

    #[test]
    fn overlay_channels() {
        let o = Overlay {
            width: 2,
            height: 1,
            reference: vec![0.0, 10.0],
            warped: vec![4.0, 2.0],
        };
        assert_eq!(o.rgb(), vec![0, 255, 0, 255, 128, 0]);
    }

    #[test]
    fn field_error_oracles() {
        let dims = [4, 4, 4];
        let mask = Volume3::new(dims, [1.0; 3], vec![1.0; 64]).unwrap();
        let truth = DisplacementField3::constant(dims, [3.0, 4.0, 0.0]);
        assert_eq!(field_error(&truth, &truth, &mask).unwrap(), 0.0);
        let zero = DisplacementField3::zeros(dims);
        assert!((field_error(&zero, &truth, &mask).unwrap() - 5.0).abs() < 1e-12);
        assert!(field_error(&zero, &DisplacementField3::zeros([4, 4, 5]), &mask).is_err());
    }
}
