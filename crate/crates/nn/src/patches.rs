//! Aligned 3D patches from paired flattened volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oral3d_core::FVolume;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `[u, z, k]` corner in the flattened volume.
    pub origin: [usize; 3],
    pub size: usize,
    /// Values in `k`-major, `u`-fastest order.
    pub real: Vec<f32>,
    pub fake: Vec<f32>,
}

/// `n` uniformly drawn corners of a cubic patch of side `size`.
pub fn draw_origins(dims: [usize; 3], n: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<[usize; 3]>> {
    if size == 0 || dims.iter().any(|&d| d < size) {
        return Err(Error::Shape(format!("patch side {size} does not fit {dims:?}")));
    }
    Ok((0..n).map(|_| dims.map(|d| rng.random_range(0..=d - size))).collect())
}

fn cut(f: &FVolume, origin: [usize; 3], size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size * size);
    for k in 0..size {
        for z in 0..size {
            for u in 0..size {
                out.push(f.get(origin[0] + u, origin[1] + z, origin[2] + k));
            }
        }
    }
    out
}

pub fn sample_aligned_patches(real: &FVolume, fake: &FVolume, n: usize, size: usize, seed: u64) -> Result<Vec<PatchPair>> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", real.dims(), fake.dims())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_origins(real.dims(), n, size, &mut rng)?
        .into_iter()
        .map(|origin| PatchPair { origin, size, real: cut(real, origin, size), fake: cut(fake, origin, size) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn ramp(dims: [usize; 3], k: f32) -> FVolume {
        let n = dims.iter().product();
        FVolume::from_vec(dims, 1.0, (0..n).map(|i| (i as f32 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn identical_volumes_give_identical_patches() {
        let v = ramp([10, 9, 8], 0.1);
        for p in sample_aligned_patches(&v, &v, 12, 4, 1).unwrap() {
            assert_eq!(p.real, p.fake);
        }
    }

    #[test]
    fn pairs_share_the_origin() {
        let (a, b) = (ramp([10, 9, 8], 0.1), ramp([10, 9, 8], 0.3));
        for p in sample_aligned_patches(&a, &b, 5, 3, 2).unwrap() {
            let [u, z, k] = p.origin;
            assert_eq!(p.real[0], a.get(u, z, k));
            assert_eq!(p.fake[0], b.get(u, z, k));
            assert_eq!(p.fake[26], b.get(u + 2, z + 2, k + 2));
        }
    }

    #[test]
    fn full_size_patch_has_one_origin() {
        let v = ramp([5, 5, 5], 0.2);
        assert!(sample_aligned_patches(&v, &v, 6, 5, 3).unwrap().iter().all(|p| p.origin == [0, 0, 0]));
        assert!(matches!(sample_aligned_patches(&v, &v, 1, 6, 3), Err(Error::Shape(_))));
        let other = ramp([5, 5, 4], 0.2);
        assert!(sample_aligned_patches(&v, &other, 1, 2, 3).is_err());
    }

    #[test]
    fn origins_are_uniform() {
        let v = FVolume::filled([32, 32, 32], 1.0, 0.0).unwrap();
        let pairs = sample_aligned_patches(&v, &v, 100, 16, 11).unwrap();
        let bins = 17;
        let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
        for axis in 0..3 {
            let mut counts = vec![0.0; bins];
            for p in &pairs {
                assert!(p.origin[axis] <= 16);
                counts[p.origin[axis]] += 1.0;
            }
            let e = 100.0 / bins as f64;
            let chi: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
            assert!(chi < crit, "axis {axis}: chi-square {chi} >= {crit}");
        }
    }
}
