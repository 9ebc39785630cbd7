//! Deformable registration of 3D volumes.
//!
//! The crate covers the whole experimental loop:
//!
//! * [`volume`]: scalar volumes, NIfTI-1 I/O, box downscaling, flips and
//!   seeded phantoms;
//! * [`warp`]: trilinear warping, field composition, scaling-and-squaring
//!   and Jacobian determinants;
//! * [`similarity`]: CC, MI, NMI, MSD and windowed CC, with dense gradients;
//! * [`models`]: affine and cubic B-spline transforms, bending and diffusion
//!   regularisers, control-point NMI gradients;
//! * [`optimize`]: multi-resolution engines (affine, FFD, diffeomorphic,
//!   direct VoxelMorph-energy minimisation);
//! * [`syngen`]: synthetic deformation fields and training-set manifests;
//! * [`bench`]: the comparison harness and its reports.

pub mod bench;
pub mod error;
pub mod filter;
pub mod models;
pub mod optimize;
pub mod reduce;
pub mod rng;
pub mod similarity;
pub mod syngen;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use volume::{Axis, Dims, Volume3};
pub use warp::{DisplacementField3, VelocityField3};
