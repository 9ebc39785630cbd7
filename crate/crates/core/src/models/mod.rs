//! Transform parameterizations and regularizers.

mod affine;
mod controls;
mod ffd;
mod regularize;

pub use affine::{affine_to_displacement, AffineTransform};
pub use controls::{
    histogram_gradient_on_controls, nmi_gradient_on_controls, ControlGradient, DEFAULT_FD_STEP,
};
pub use ffd::{basis, bending_energy, ffd_to_displacement, FfdGrid, MIN_SPACING};
pub use regularize::{diffusion_energy, RegularizerWeights};
