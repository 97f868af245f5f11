//! Embedding a flattened volume back onto the dental arch.
//!
//! Every axial output position looks up its nearest arc sample and signed
//! distance; the distance selects a fractional depth index inside that
//! sample's slice, and the slice column is interpolated linearly along depth.

use serde::{Deserialize, Serialize};

use crate::arch::{signed_distance, ArcSamples};
use crate::error::{Error, Result};
use crate::synth::FVolume;
use crate::volume::Volume3;
use crate::AIR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformConfig {
    /// Output extent along x.
    pub out_w: usize,
    /// Output extent along y.
    pub out_d: usize,
    pub depth_step: f64,
    #[serde(default = "default_fill")]
    pub fill: f32,
}

fn default_fill() -> f32 {
    AIR
}

impl DeformConfig {
    pub fn new(out_w: usize, out_d: usize, depth_step: f64) -> Self {
        Self { out_w, out_d, depth_step, fill: AIR }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_w < 1 || self.out_d < 1 {
            return Err(Error::InvalidValue(format!(
                "output extents must be >= 1, got {}x{}",
                self.out_w, self.out_d
            )));
        }
        if !(self.depth_step.is_finite() && self.depth_step > 0.0) {
            return Err(Error::InvalidValue(format!("depth step must be positive, got {}", self.depth_step)));
        }
        if !(-1.0..=1.0).contains(&self.fill) {
            return Err(Error::InvalidValue(format!("fill {} outside [-1, 1]", self.fill)));
        }
        Ok(())
    }
}

/// Curved reconstruction of dims `(out_w, out_d, H)`: x, y, then height.
pub fn register(f: &FVolume, samples: &ArcSamples, cfg: &DeformConfig) -> Result<Volume3> {
    cfg.validate()?;
    let [w, h, d] = f.dims();
    if samples.len() != w {
        return Err(Error::Dimension(format!(
            "{} arc samples for a flattened volume {w} wide",
            samples.len()
        )));
    }
    let (nx, ny) = (cfg.out_w, cfg.out_d);
    let mut out = vec![cfg.fill; nx * ny * h];
    let last = (d - 1) as f64;
    for j in 0..ny {
        for i in 0..nx {
            let (id, dist) = signed_distance(samples, [i as f64 + 0.5, j as f64 + 0.5]);
            let k = dist / cfg.depth_step + d as f64 / 2.0 - 0.5;
            if !(0.0..=last).contains(&k) {
                continue;
            }
            let k0 = (k.floor() as usize).min(d.saturating_sub(2));
            let t = (k - k0 as f64) as f32;
            let k1 = (k0 + 1).min(d - 1);
            for z in 0..h {
                let a = f.get(id, z, k0);
                let b = f.get(id, z, k1);
                let v = if t == 0.0 { a } else { a + t * (b - a) };
                out[i + nx * (j + ny * z)] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Volume3::from_vec([nx, ny, h], out)
}
