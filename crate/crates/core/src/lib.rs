//! Sparse control-grid deformable image registration.
//!
//! The engine parameterizes a 3D deformation by displacement vectors on a
//! coarse lattice of control points, reconstructs a dense per-voxel field
//! through separable interpolation kernels (trilinear, cubic B-spline or
//! normalized Gaussian), and warps volumes by pull-back trilinear sampling.
//! Registration is driven either by an iterative Adam optimizer acting
//! directly on the control-point parameters or by a small cross-attention
//! network that predicts them, optionally with a Bayesian head that carries
//! a per-control-point variance.

pub mod autodiff;
pub mod error;
pub mod gridfield;
pub mod gridnet;
pub mod losses;
pub mod metrics;
pub mod optimize;
pub mod rng;
pub mod synth;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use gridfield::{
    upsample, ControlGrid, DenseField, GridVec3, GriddedField, InterpKernel, ScalarField,
    Upsampler,
};
pub use volume::{LandmarkSet, MaskVolume, Volume};
