//! Volumetric toolkit for simulating brain-lesion growth and reversing it.
//!
//! The forward model places a Perlin-perturbed core blob, grows it into a larger
//! final blob through a diffeomorphic (velocity-parameterized) deformation and
//! warps the image accordingly. The reversal pipeline segments the lesion by
//! thresholding Jacobian determinants against a normative pool, shrinks it back
//! to its core by registering against an inpainted image, and inpaints the core
//! to estimate the pre-lesion brain.
//!
//! Every per-voxel loop goes through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! bitwise identical in both modes.

pub mod diffusion;
pub mod error;
pub mod field;
pub mod metrics;
pub mod morphology;
pub mod nifti;
pub mod noise;
pub mod par;
pub mod registration;
pub mod reversal;
pub mod rng;
pub mod synthesis;
pub mod volume;

pub use error::{Error, Result};
pub use field::{FieldKind, JacobianMap, VectorField};
pub use volume::{GridGeometry, LabelVolume, Mask, ScalarVolume, Volume};
