//! Normalized volumes, images and masks.
//!
//! All intensities live in `[-1, 1]`. Storage is x-fastest: voxel `(x, y, z)`
//! sits at `x + nx * (y + ny * z)`. The axial plane is `(x, y)`, `z` runs
//! inferior to superior.

use crate::error::{Error, Result};
use crate::AIR;

fn check_dims<const N: usize>(dims: [usize; N]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Dimension(format!("every extent must be >= 1, got {dims:?}")));
    }
    Ok(dims.iter().product())
}

fn check_values(values: &[f32]) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && (-1.0..=1.0).contains(*v)))
    {
        return Err(Error::InvalidValue(format!("value {v} at index {i} outside [-1, 1]")));
    }
    Ok(())
}

/// A 3D intensity grid in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        check_values(&[value])?;
        Ok(Self { dims, spacing: 1.0, data: vec![value; n] })
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "{} values for dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        check_values(&data)?;
        Ok(Self { dims, spacing: 1.0, data })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_vec(dims, data)
    }

    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidValue(format!("spacing must be positive, got {spacing}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Writes one voxel, clamping into `[-1, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value.clamp(-1.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// A 2D intensity image, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    dims: [usize; 2],
    data: Vec<f32>,
}

impl Image2 {
    pub fn filled(dims: [usize; 2], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        check_values(&[value])?;
        Ok(Self { dims, data: vec![value; n] })
    }

    pub fn from_vec(dims: [usize; 2], data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "{} values for dims {dims:?} ({n} pixels)",
                data.len()
            )));
        }
        check_values(&data)?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[x + self.dims[0] * y]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Boolean voxel mask with the dims of the volume it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask3 {
    pub fn from_vec(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::Dimension(format!("{} flags for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Affinely maps `[lo, hi]` onto `[-1, 1]`, clamping anything outside.
pub fn normalize_volume(dims: [usize; 3], raw: &[f32], lo: f64, hi: f64) -> Result<Volume3> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidRange { lo, hi });
    }
    let n = check_dims(dims)?;
    if raw.len() != n {
        return Err(Error::Dimension(format!("{} raw values for dims {dims:?}", raw.len())));
    }
    let scale = 2.0 / (hi - lo);
    let data = raw
        .iter()
        .map(|&v| {
            let t = (v as f64 - lo) * scale - 1.0;
            // NaN input maps to air rather than poisoning the grid.
            if t.is_nan() {
                AIR
            } else {
                t.clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    Volume3::from_vec(dims, data)
}

/// Maximum intensity projection along z.
pub fn mip_axial(v: &Volume3) -> Image2 {
    let [nx, ny, nz] = v.dims;
    let mut out = v.data[..nx * ny].to_vec();
    for z in 1..nz {
        let slice = &v.data[z * nx * ny..(z + 1) * nx * ny];
        for (o, &s) in out.iter_mut().zip(slice) {
            if s > *o {
                *o = s;
            }
        }
    }
    Image2 { dims: [nx, ny], data: out }
}

/// Trilinear interpolation at a continuous index-space point.
///
/// Integer coordinates hit voxel centers. Anything outside `[0, n-1]` on any
/// axis returns air.
pub fn sample_trilinear(v: &Volume3, p: [f64; 3]) -> f32 {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = v.dims[a];
        let c = p[a];
        if !(c >= 0.0 && c <= (n - 1) as f64) {
            return AIR;
        }
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        base[a] = i;
        frac[a] = c - i as f64;
    }
    let [nx, ny, _] = v.dims;
    let step = [
        usize::from(v.dims[0] > 1),
        if v.dims[1] > 1 { nx } else { 0 },
        if v.dims[2] > 1 { nx * ny } else { 0 },
    ];
    let i0 = v.index(base[0], base[1], base[2]);
    let [fx, fy, fz] = frac;
    let at = |dx: usize, dy: usize, dz: usize| v.data[i0 + dx * step[0] + dy * step[1] + dz * step[2]] as f64;
    let c00 = at(0, 0, 0) * (1.0 - fx) + at(1, 0, 0) * fx;
    let c10 = at(0, 1, 0) * (1.0 - fx) + at(1, 1, 0) * fx;
    let c01 = at(0, 0, 1) * (1.0 - fx) + at(1, 0, 1) * fx;
    let c11 = at(0, 1, 1) * (1.0 - fx) + at(1, 1, 1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

/// Mean projections along x, y and z.
///
/// Output dims are `(ny, nz)`, `(nx, nz)` and `(nx, ny)` respectively.
pub fn orthogonal_projections(v: &Volume3) -> (Image2, Image2, Image2) {
    let [nx, ny, nz] = v.dims;
    let mut px = vec![0f64; ny * nz];
    let mut py = vec![0f64; nx * nz];
    let mut pz = vec![0f64; nx * ny];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let val = v.get(x, y, z) as f64;
                px[y + ny * z] += val;
                py[x + nx * z] += val;
                pz[x + nx * y] += val;
            }
        }
    }
    let finish = |acc: Vec<f64>, n: usize, dims: [usize; 2]| Image2 {
        dims,
        data: acc.into_iter().map(|s| ((s / n as f64) as f32).clamp(-1.0, 1.0)).collect(),
    };
    (
        finish(px, nx, [ny, nz]),
        finish(py, ny, [nx, nz]),
        finish(pz, nz, [nx, ny]),
    )
}

/// Strict threshold: `mask[i] = v[i] > tau`.
pub fn threshold_mask(v: &Volume3, tau: f64) -> Result<Mask3> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThreshold(tau));
    }
    Ok(Mask3 { dims: v.dims, data: v.data.iter().map(|&x| x as f64 > tau).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(dims, |_, _, _| rng.random_range(-1.0f32..=1.0)).unwrap()
    }

    #[test]
    fn normalize_maps_bounds_and_midpoint() {
        let v = normalize_volume([2, 1, 1], &[10.0, 10.0], 10.0, 30.0).unwrap();
        assert!(v.data().iter().all(|&x| x == -1.0));
        let v = normalize_volume([2, 1, 1], &[20.0, 20.0], 10.0, 30.0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let v = normalize_volume([3, 1, 1], &[0.0, 500.0, 1000.0], 0.0, 1000.0).unwrap();
        assert_eq!(v.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_empty_range() {
        assert!(matches!(
            normalize_volume([1, 1, 1], &[0.0], 5.0, 5.0),
            Err(Error::InvalidRange { .. })
        ));
        assert!(normalize_volume([1, 1, 1], &[0.0], 6.0, 5.0).is_err());
    }

    #[test]
    fn mip_of_identical_slices_is_the_slice() {
        let slice: Vec<f32> = (0..6).map(|i| i as f32 / 6.0 - 0.5).collect();
        let v = Volume3::from_fn([3, 2, 4], |x, y, _| slice[x + 3 * y]).unwrap();
        assert_eq!(mip_axial(&v).data(), slice.as_slice());
    }

    #[test]
    fn mip_single_peak() {
        let mut v = Volume3::filled([3, 4, 5], -1.0).unwrap();
        v.set(1, 2, 3, 0.5);
        let img = mip_axial(&v);
        for y in 0..4 {
            for x in 0..3 {
                let want = if (x, y) == (1, 2) { 0.5 } else { -1.0 };
                assert_eq!(img.get(x, y), want);
            }
        }
    }

    #[test]
    fn mip_matches_column_scan() {
        let v = random_volume([3, 3, 3], 7);
        let img = mip_axial(&v);
        for y in 0..3 {
            for x in 0..3 {
                let mut best = f32::NEG_INFINITY;
                for z in 0..3 {
                    best = best.max(v.get(x, y, z));
                }
                assert_eq!(img.get(x, y), best);
            }
        }
    }

    #[test]
    fn trilinear_nodes_midpoints_and_outside() {
        let v = random_volume([4, 3, 5], 3);
        for z in 0..5 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(sample_trilinear(&v, [x as f64, y as f64, z as f64]), v.get(x, y, z));
                }
            }
        }
        let mid = sample_trilinear(&v, [1.5, 1.0, 2.0]);
        let want = (v.get(1, 1, 2) as f64 + v.get(2, 1, 2) as f64) / 2.0;
        assert!((mid as f64 - want).abs() < 1e-6);
        assert_eq!(sample_trilinear(&v, [-5.0, 0.0, 0.0]), -1.0);
        assert_eq!(sample_trilinear(&v, [0.0, 2.01, 0.0]), -1.0);
        assert_eq!(sample_trilinear(&v, [3.0, 2.0, 4.0]), v.get(3, 2, 4));
    }

    #[test]
    fn trilinear_on_flat_axis() {
        let v = Volume3::from_vec([2, 1, 1], vec![-0.5, 0.5]).unwrap();
        assert!((sample_trilinear(&v, [0.25, 0.0, 0.0]) + 0.25).abs() < 1e-7);
        assert_eq!(sample_trilinear(&v, [0.25, 0.1, 0.0]), -1.0);
    }

    #[test]
    fn projections_constant_and_pair() {
        let v = Volume3::filled([3, 4, 2], 0.25).unwrap();
        let (a, b, c) = orthogonal_projections(&v);
        for img in [&a, &b, &c] {
            assert!(img.data().iter().all(|&x| x == 0.25));
        }
        assert_eq!((a.dims(), b.dims(), c.dims()), ([4, 2], [3, 2], [3, 4]));

        let v = Volume3::from_vec([2, 1, 1], vec![-1.0, 1.0]).unwrap();
        let (px, _, _) = orthogonal_projections(&v);
        assert_eq!(px.data(), &[0.0]);
    }

    #[test]
    fn projections_match_brute_force() {
        let v = random_volume([4, 4, 4], 11);
        let (px, py, pz) = orthogonal_projections(&v);
        for a in 0..4 {
            for b in 0..4 {
                let (mut sx, mut sy, mut sz) = (0.0f64, 0.0f64, 0.0f64);
                for t in 0..4 {
                    sx += v.get(t, a, b) as f64;
                    sy += v.get(a, t, b) as f64;
                    sz += v.get(a, b, t) as f64;
                }
                assert!((px.get(a, b) as f64 - sx / 4.0).abs() < 1e-6);
                assert!((py.get(a, b) as f64 - sy / 4.0).abs() < 1e-6);
                assert!((pz.get(a, b) as f64 - sz / 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn threshold_is_strict() {
        let v = Volume3::from_vec([3, 1, 1], vec![-0.9, -0.8, -0.7]).unwrap();
        assert_eq!(threshold_mask(&v, -0.8).unwrap().data(), &[false, false, true]);
        let lo = Volume3::filled([2, 2, 2], -1.0).unwrap();
        assert_eq!(threshold_mask(&lo, -0.8).unwrap().count(), 0);
        let hi = Volume3::filled([2, 2, 2], 1.0).unwrap();
        assert_eq!(threshold_mask(&hi, -0.8).unwrap().count(), 8);
        assert!(matches!(threshold_mask(&hi, 1.5), Err(Error::InvalidThreshold(_))));
    }

    #[test]
    fn constructors_validate() {
        assert!(Volume3::filled([0, 1, 1], 0.0).is_err());
        assert!(Volume3::from_vec([2, 1, 1], vec![0.0, 1.5]).is_err());
        assert!(Volume3::from_vec([2, 1, 1], vec![0.0]).is_err());
        assert!(Image2::from_vec([1, 1], vec![f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_stays_in_range(raw in prop::collection::vec(-1e6f32..1e6, 8), lo in -100.0f64..100.0, span in 1e-3f64..1e3) {
            let v = normalize_volume([2, 2, 2], &raw, lo, lo + span).unwrap();
            prop_assert!(v.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn mip_dominates_columns(seed in any::<u64>()) {
            let v = random_volume([3, 4, 5], seed);
            let img = mip_axial(&v);
            for z in 0..5 { for y in 0..4 { for x in 0..3 {
                prop_assert!(img.get(x, y) >= v.get(x, y, z));
            }}}
        }

        #[test]
        fn projections_preserve_mean(seed in any::<u64>()) {
            let v = random_volume([5, 3, 4], seed);
            let m = v.mean();
            let (a, b, c) = orthogonal_projections(&v);
            for img in [a, b, c] {
                prop_assert!((img.mean() - m).abs() <= 1e-6 * m.abs().max(1.0));
            }
        }

        #[test]
        fn trilinear_linear_between_centers(seed in any::<u64>(), t in 0.0f64..1.0) {
            let v = random_volume([3, 3, 3], seed);
            let got = sample_trilinear(&v, [1.0, t + 1.0, 2.0]) as f64;
            let want = v.get(1, 1, 2) as f64 * (1.0 - t) + v.get(1, 2, 2) as f64 * t;
            prop_assert!((got - want).abs() < 1e-6);
        }
    }
}
