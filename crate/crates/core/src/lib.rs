//! Volumetric building blocks for panoramic-to-3D dental reconstruction.
//!
//! The crate covers everything that does not involve learning:
//!
//! * [`volume`]: normalized 3D grids, 2D images, masks, sampling and projections.
//! * [`arch`]: polynomial dental-arch curves, equal arc-length sampling and
//!   signed point-to-curve distance.
//! * [`synth`]: procedural CBCT-like phantoms and the paired-data pipeline
//!   (flattening, Beer–Lambert panoramic projection, band extraction).
//! * [`deform`]: embedding of a flattened volume back onto the arch.
//! * [`metrics`]: PSNR, 3D SSIM, thresholded Dice and the combined score.
//! * [`io`]: raw volume files with JSON headers, 16-bit PGM images, curve files.
//!
//! Axial coordinates follow one convention throughout: voxel `(i, j)` covers
//! `[i, i+1) × [j, j+1)` and its center sits at `(i + 0.5, j + 0.5)`. Arch
//! curves, arc samples and signed distances all live in that frame.

pub mod arch;
pub mod deform;
pub mod error;
pub mod io;
pub mod metrics;
pub mod synth;
pub mod volume;

pub use arch::{ArcSamples, ArchCurve, ArchFit, Point2};
pub use deform::{register, DeformConfig};
pub use error::{Error, Result};
pub use metrics::{dice, overall, psnr, ssim3, MetricReport, SsimConfig};
pub use synth::{FVolume, PairedSample, PhantomSpec, SynthConfig};
pub use volume::{Image2, Mask3, Volume3};

/// Intensity of empty space in normalized units.
pub const AIR: f32 = -1.0;
