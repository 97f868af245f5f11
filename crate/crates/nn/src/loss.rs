//! Least-squares adversarial, voxel and projection losses.
//!
//! Plain functions work on finished values; the `record_*` variants put the
//! same expressions on a tape so they can be differentiated.

use serde::{Deserialize, Serialize};

use oral3d_core::volume::orthogonal_projections;
use oral3d_core::{FVolume, Image2, Volume3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn mean_sq(v: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(s / n as f64)
}

/// `mean (D(y) - 1)^2 + mean D(G(x))^2`.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real vs {} fake scores", real.len(), fake.len())));
    }
    Ok(mean_sq(real.iter().map(|s| s - 1.0))? + mean_sq(fake.iter().copied())?)
}

/// `mean (D(G(x)) - 1)^2`.
pub fn generator_adv_loss(fake: &[f64]) -> Result<f64> {
    mean_sq(fake.iter().map(|s| s - 1.0))
}

fn same_dims(y: &FVolume, g: &FVolume) -> Result<()> {
    if y.dims() != g.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", y.dims(), g.dims())));
    }
    Ok(())
}

pub fn reconstruction_loss(y: &FVolume, g: &FVolume) -> Result<f64> {
    same_dims(y, g)?;
    mean_sq(y.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 - b as f64))
}

fn image_mse(a: &Image2, b: &Image2) -> f64 {
    let se: f64 = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    se / a.data().len() as f64
}

/// Mean over the three axes of the MSE between mean projections.
pub fn projection_loss(y: &FVolume, g: &FVolume) -> Result<f64> {
    same_dims(y, g)?;
    let as_volume = |f: &FVolume| Volume3::from_vec(f.dims(), f.data().to_vec());
    let (py, pg) = (orthogonal_projections(&as_volume(y)?), orthogonal_projections(&as_volume(g)?));
    Ok((image_mse(&py.0, &pg.0) + image_mse(&py.1, &pg.1) + image_mse(&py.2, &pg.2)) / 3.0)
}

/// Loss weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub reconstruction: f64,
    pub projection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adversarial: 1.0, reconstruction: 10.0, projection: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.adversarial, self.reconstruction, self.projection] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn total(&self, adversarial: f64, reconstruction: f64, projection: f64) -> f64 {
        self.adversarial * adversarial + self.reconstruction * reconstruction + self.projection * projection
    }
}

/// Concatenated one-element scores as a `[n]` tensor.
fn stack<T: Scalar>(tape: &mut Tape<T>, scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    tape.concat(scores)
}

pub fn record_discriminator_loss<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real vs {} fake scores", real.len(), fake.len())));
    }
    let r = stack(tape, real)?;
    let f = stack(tape, fake)?;
    let ones = tape.constant(Tensor::full(&[real.len()], T::one()));
    let zeros = tape.constant(Tensor::zeros(&[fake.len()]));
    let lr = tape.mse(r, ones)?;
    let lf = tape.mse(f, zeros)?;
    tape.add(lr, lf)
}

pub fn record_generator_adv_loss<T: Scalar>(tape: &mut Tape<T>, fake: &[Var]) -> Result<Var> {
    let f = stack(tape, fake)?;
    let ones = tape.constant(Tensor::full(&[fake.len()], T::one()));
    tape.mse(f, ones)
}

/// Projection loss between a `[d, h, w]` output and a constant target.
pub fn record_projection_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, target: Var) -> Result<Var> {
    let mut acc = None;
    for axis in 0..3 {
        let p = tape.mean_axis(out, axis)?;
        let q = tape.mean_axis(target, axis)?;
        let e = tape.mse(p, q)?;
        acc = Some(match acc {
            None => e,
            Some(a) => tape.add(a, e)?,
        });
    }
    Ok(tape.scale(acc.expect("three axes"), 1.0 / 3.0))
}
