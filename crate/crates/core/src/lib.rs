//! Core data model and volumetric processing for longitudinal chest CT analysis.
//!
//! The crate covers everything that happens before and after the segmentation
//! network: the volume/label data model, NIfTI I/O, study manifests, the
//! cropping/clipping/resizing/slicing chain, mask-driven deformable BSpline
//! registration, consolidation progression quantification, Dice, and a
//! synthetic longitudinal phantom generator.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precisions used by the pipeline.

pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod progression;
pub mod registration;
pub mod scalar;
pub mod study;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use study::{Study, Timepoint};
pub use volume::{check_geometry, Geometry, PathologyClass, Volume3D, N_CLASSES};

/// CT intensities, in HU before normalization and in `[0, 1]` after.
pub type CtVolume = Volume3D<f32>;
/// Per-voxel class labels (pathology maps and binary lung masks).
pub type LabelVolume = Volume3D<u8>;
/// Voxelwise consolidation change in `{-1, 0, +1}`.
pub type ProgressionMap = Volume3D<i8>;
/// Dense displacement field in voxel units, one 3-vector per voxel.
pub type DisplacementField = Volume3D<[f32; 3]>;
