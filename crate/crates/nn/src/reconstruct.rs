//! Panoramic image → flattened volume → curved volume.

use oral3d_core::{register, ArcSamples, DeformConfig, FVolume, Image2, Volume3};

use crate::error::{Error, Result};
use crate::net::NetParams;

/// Anything that lifts a panoramic image into a flattened volume.
pub trait FlatGenerator {
    fn generate_flat(&self, px: &Image2, depth_step: f64) -> Result<FVolume>;
}

impl FlatGenerator for NetParams<f32> {
    fn generate_flat(&self, px: &Image2, depth_step: f64) -> Result<FVolume> {
        self.generate(px, depth_step)
    }
}

/// Replicates each pixel across all depth samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Smear {
    pub depth: usize,
}

impl FlatGenerator for Smear {
    fn generate_flat(&self, px: &Image2, depth_step: f64) -> Result<FVolume> {
        smear_baseline(px, self.depth, depth_step)
    }
}

pub fn smear_baseline(px: &Image2, d: usize, depth_step: f64) -> Result<FVolume> {
    if d == 0 {
        return Err(Error::Shape("smear depth must be >= 1".into()));
    }
    let [w, h] = px.dims();
    let data = (0..d).flat_map(|_| px.data().iter().copied()).collect();
    Ok(FVolume::from_vec([w, h, d], depth_step, data)?)
}

/// Generates the flattened volume and embeds it along the arch.
pub fn reconstruct_curved(
    gen: &impl FlatGenerator,
    px: &Image2,
    samples: &ArcSamples,
    cfg: &DeformConfig,
) -> Result<Volume3> {
    let flat = gen.generate_flat(px, cfg.depth_step)?;
    Ok(register(&flat, samples, cfg)?)
}
