//! Multi-resolution registration drivers.
//!
//! Every engine follows the same convention as [`crate::warp`]: the result
//! field `u` aligns `moving(x + u(x))` with `fixed(x)`.

mod affine;
mod dense;
mod ffd;
mod optimizer;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AffineTransform, FfdGrid, RegularizerWeights, DEFAULT_FD_STEP};
use crate::similarity::{Objective, SimilarityReport, DEFAULT_BINS, DEFAULT_WINDOW};
use crate::volume::{downscale_to, scaled_len, Dims, Volume3};
use crate::warp::{apply_displacement, jacobian_positive_fraction, DisplacementField3, VelocityField3};

pub use optimizer::{OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, MAX_HALVINGS};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MIN_LEVEL_DIM: usize = 8;
pub const MIN_POSITIVE_JACOBIAN: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Affine,
    Ffd,
    DenseDiffeomorphic,
    DenseVoxelmorphEnergy,
}

impl Engine {
    pub const ALL: [Engine; 4] = [
        Engine::Affine,
        Engine::Ffd,
        Engine::DenseDiffeomorphic,
        Engine::DenseVoxelmorphEnergy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Affine => "affine",
            Engine::Ffd => "ffd",
            Engine::DenseDiffeomorphic => "dense-diffeomorphic",
            Engine::DenseVoxelmorphEnergy => "dense-voxelmorph-energy",
        }
    }

    pub fn default_objective(self) -> Objective {
        match self {
            Engine::Affine => Objective::Msd,
            Engine::Ffd => Objective::Nmi,
            Engine::DenseDiffeomorphic | Engine::DenseVoxelmorphEnergy => Objective::LocalCc,
        }
    }

    pub fn default_optimizer(self) -> OptimizerKind {
        match self {
            Engine::DenseVoxelmorphEnergy => OptimizerKind::Adam,
            _ => OptimizerKind::GradientDescentWithBacktracking,
        }
    }

    /// Initial step in voxels of the current level.
    pub fn default_step(self) -> f64 {
        match self {
            Engine::Affine | Engine::Ffd => 1.0,
            Engine::DenseDiffeomorphic => 0.5,
            Engine::DenseVoxelmorphEnergy => 0.25,
        }
    }

    pub fn supports(self, objective: Objective) -> bool {
        use Objective::*;
        match self {
            Engine::Affine => matches!(objective, Msd | Cc),
            Engine::Ffd => true,
            Engine::DenseDiffeomorphic | Engine::DenseVoxelmorphEnergy => {
                matches!(objective, Msd | LocalCc)
            }
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown engine `{s}`")))
    }
}

/// FFD control spacing in voxels for a volume at the given scale annotation:
/// 12 at 15 %, 8 otherwise.
pub fn default_control_spacing(scale_percent: Option<f64>) -> f64 {
    match scale_percent {
        Some(p) if (p - 15.0).abs() < 1e-6 => 12.0,
        _ => 8.0,
    }
}

/// Settings for one registration run. Unset optional fields take the
/// engine's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub engine: Engine,
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_level: usize,
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub regularizer: RegularizerWeights,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub seed: u64,
    /// FFD control spacing at full resolution, in voxels.
    #[serde(default)]
    pub control_spacing: Option<f64>,
    /// Gaussian sigma (voxels) applied to each velocity update.
    #[serde(default = "default_update_sigma")]
    pub update_sigma: f64,
    /// Central-difference step (voxels) for MI/NMI control gradients.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}
fn default_levels() -> usize {
    3
}
fn default_iterations() -> usize {
    100
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_update_sigma() -> f64 {
    1.0
}
fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

impl RegistrationConfig {
    pub fn new(engine: Engine) -> Self {
        RegistrationConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            engine,
            objective: None,
            levels: default_levels(),
            iterations_per_level: default_iterations(),
            optimizer: None,
            step_size: None,
            regularizer: RegularizerWeights::default(),
            window: DEFAULT_WINDOW,
            bins: DEFAULT_BINS,
            seed: 0,
            control_spacing: None,
            update_sigma: default_update_sigma(),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = Some(objective);
        self
    }

    pub fn with_schedule(mut self, levels: usize, iterations_per_level: usize) -> Self {
        self.levels = levels;
        self.iterations_per_level = iterations_per_level;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(self.engine.default_objective())
    }

    pub fn optimizer(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(self.engine.default_optimizer())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.engine.default_step())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.levels < 1 || self.iterations_per_level < 1 {
            return Err(Error::Config("levels and iterations_per_level must be at least 1".into()));
        }
        let objective = self.objective();
        if !self.engine.supports(objective) {
            return Err(Error::IncompatibleObjective {
                engine: self.engine.name().into(),
                objective: objective.name().into(),
            });
        }
        crate::similarity::check_window(self.window)?;
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be at least 2, got {}", self.bins)));
        }
        let step = self.step();
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {step}")));
        }
        if !(self.update_sigma >= 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::Config("update_sigma must be >= 0 and fd_step > 0".into()));
        }
        if let Some(s) = self.control_spacing {
            if !(s >= crate::models::MIN_SPACING) {
                return Err(Error::Config(format!("control_spacing must be >= 2 voxels, got {s}")));
            }
        }
        self.regularizer.validate()
    }
}

/// One pyramid level: the downscale factor and resulting dims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub factor: f64,
    pub dims: Dims,
}

/// Factors `2^-(levels-1) .. 1`, coarsest first, each axis rounded as by
/// box downscaling.
pub fn multires_schedule(dims: Dims, levels: usize) -> Result<Vec<Level>> {
    if levels < 1 {
        return Err(Error::InvalidArgument("levels must be at least 1".into()));
    }
    let out: Vec<Level> = (0..levels)
        .map(|l| {
            let factor = 0.5f64.powi((levels - 1 - l) as i32);
            Level {
                factor,
                dims: dims.map(|n| if factor == 1.0 { n } else { scaled_len(n, factor) }),
            }
        })
        .collect();
    if out[0].dims.iter().any(|&n| n < MIN_LEVEL_DIM) {
        return Err(Error::InvalidArgument(format!(
            "{dims:?} is too small for {levels} levels (coarsest {:?}, need >= {MIN_LEVEL_DIM} per axis)",
            out[0].dims
        )));
    }
    Ok(out)
}

/// Minimized cost after each iteration at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub dims: Dims,
    /// Cost before the first iteration.
    pub initial: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    Affine(AffineTransform),
    Ffd(FfdGrid),
    Velocity(VelocityField3),
    Dense,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub engine: Engine,
    pub objective: Objective,
    /// Full-resolution displacement.
    pub field: DisplacementField3,
    pub transform: Transform,
    pub traces: Vec<LevelTrace>,
    pub before: SimilarityReport,
    pub after: SimilarityReport,
    pub seconds: f64,
    pub iterations: Vec<usize>,
    /// The finest level stopped because no step improved the cost.
    pub converged: bool,
    /// The optimized field made things worse and was replaced by identity.
    pub fell_back: bool,
}

impl RegistrationResult {
    pub fn total_iterations(&self) -> usize {
        self.iterations.iter().sum()
    }
}

/// Images of one pyramid level.
pub(crate) struct LevelImages {
    pub dims: Dims,
    pub fixed: Volume3,
    pub moving: Volume3,
    pub fixed_values: Vec<f64>,
}

pub(crate) struct EngineOutput {
    pub field: DisplacementField3,
    pub transform: Transform,
    pub traces: Vec<LevelTrace>,
    pub converged: bool,
}

fn pyramid(fixed: &Volume3, moving: &Volume3, schedule: &[Level]) -> Result<Vec<LevelImages>> {
    schedule
        .iter()
        .map(|level| {
            let (f, m) = if level.dims == fixed.dims() {
                (fixed.clone(), moving.clone())
            } else {
                (downscale_to(fixed, level.dims)?, downscale_to(moving, level.dims)?)
            };
            Ok(LevelImages {
                dims: level.dims,
                fixed_values: f.to_f64(),
                fixed: f,
                moving: m,
            })
        })
        .collect()
}

/// Runs `cfg.engine` on the pair.
pub fn register(fixed: &Volume3, moving: &Volume3, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    fixed.check_same_dims(moving)?;
    let start = Instant::now();
    let schedule = multires_schedule(fixed.dims(), cfg.levels)?;
    let before = SimilarityReport::compute(fixed, moving, cfg.bins)?;
    let levels = pyramid(fixed, moving, &schedule)?;
    let out = match cfg.engine {
        Engine::Affine => affine::run(&levels, cfg)?,
        Engine::Ffd => ffd::run(&levels, cfg, fixed.scale_percent())?,
        Engine::DenseDiffeomorphic => dense::run_diffeomorphic(&levels, cfg)?,
        Engine::DenseVoxelmorphEnergy => dense::run_voxelmorph(&levels, cfg)?,
    };
    let warped = apply_displacement(moving, &out.field)?;
    let after = SimilarityReport::compute(fixed, &warped, cfg.bins)?;
    let folded = cfg.engine == Engine::DenseDiffeomorphic
        && jacobian_positive_fraction(&out.field) < MIN_POSITIVE_JACOBIAN;
    let iterations = out.traces.iter().map(|t| t.values.len()).collect();
    let mut result = RegistrationResult {
        engine: cfg.engine,
        objective: cfg.objective(),
        field: out.field,
        transform: out.transform,
        traces: out.traces,
        before,
        after,
        seconds: 0.0,
        iterations,
        converged: out.converged,
        fell_back: false,
    };
    if after.cc < before.cc || folded {
        log::warn!(
            "{} degraded the alignment (cc {:.6} -> {:.6}); returning the identity",
            cfg.engine,
            before.cc,
            after.cc
        );
        result.field = DisplacementField3::zeros(fixed.dims());
        result.transform = Transform::Identity;
        result.after = before;
        result.fell_back = true;
    }
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

fn with_engine(cfg: &RegistrationConfig, engine: Engine) -> RegistrationConfig {
    RegistrationConfig {
        engine,
        ..cfg.clone()
    }
}

pub fn register_affine(fixed: &Volume3, moving: &Volume3, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    register(fixed, moving, &with_engine(cfg, Engine::Affine))
}

pub fn register_ffd(fixed: &Volume3, moving: &Volume3, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    register(fixed, moving, &with_engine(cfg, Engine::Ffd))
}

pub fn register_dense_diffeomorphic(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register(fixed, moving, &with_engine(cfg, Engine::DenseDiffeomorphic))
}

pub fn register_voxelmorph_energy(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register(fixed, moving, &with_engine(cfg, Engine::DenseVoxelmorphEnergy))
}
