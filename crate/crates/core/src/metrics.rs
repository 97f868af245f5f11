//! Reconstruction quality metrics.
//!
//! PSNR uses the full normalized range `L = 2`. SSIM is the standard index
//! with a separable 3D Gaussian window, averaged over every window position
//! that fits inside the volume. Dice thresholds both volumes strictly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{threshold_mask, Mask3, Volume3};

/// Signal range of normalized intensities.
pub const RANGE: f64 = 2.0;

fn same_dims(a: &Volume3, b: &Volume3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (RANGE * RANGE / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Volume3, b: &Volume3) -> Result<f64> {
    same_dims(a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(psnr_from_mse(se / a.len() as f64))
}

/// PSNR restricted to voxels where `mask` is set.
pub fn psnr_masked(a: &Volume3, b: &Volume3, mask: &Mask3) -> Result<f64> {
    same_dims(a, b)?;
    if mask.dims() != a.dims() {
        return Err(Error::Dimension(format!("mask {:?} vs volume {:?}", mask.dims(), a.dims())));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        if m {
            se += (x as f64 - y as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("empty mask".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidValue("SSIM window must be >= 1".into()));
        }
        for (name, v) in [("sigma", self.sigma), ("k1", self.k1), ("k2", self.k2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("SSIM {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 7, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an x-fastest grid.
fn filter_valid(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let m = kernel.len();
    let mut cur = data.to_vec();
    let mut cd = dims;
    for axis in 0..3 {
        let mut nd = cd;
        nd[axis] = cd[axis] + 1 - m;
        let stride = match axis {
            0 => 1,
            1 => cd[0],
            _ => cd[0] * cd[1],
        };
        let mut next = vec![0f64; nd.iter().product()];
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let base = x + cd[0] * (y + cd[1] * z);
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        acc += w * cur[base + t * stride];
                    }
                    next[x + nd[0] * (y + nd[1] * z)] = acc;
                }
            }
        }
        cur = next;
        cd = nd;
    }
    (cur, cd)
}

/// Mean 3D SSIM.
pub fn ssim3(a: &Volume3, b: &Volume3, cfg: &SsimConfig) -> Result<f64> {
    same_dims(a, b)?;
    let dims = a.dims();
    if cfg.window == 0 || dims.iter().any(|&n| n < cfg.window) {
        return Err(Error::VolumeTooSmall { dims, window: cfg.window });
    }
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * RANGE).powi(2);
    let c2 = (cfg.k2 * RANGE).powi(2);

    let av: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, _) = filter_valid(&av, dims, &kernel);
    let (mu_b, _) = filter_valid(&bv, dims, &kernel);
    let (e_aa, _) = filter_valid(&sq(&av, &av), dims, &kernel);
    let (e_bb, _) = filter_valid(&sq(&bv, &bv), dims, &kernel);
    let (e_ab, _) = filter_valid(&sq(&av, &bv), dims, &kernel);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

fn dice_counts(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dice overlap of `a > tau` and `b > tau`; two empty masks score 1.
pub fn dice(a: &Volume3, b: &Volume3, tau: f64) -> Result<f64> {
    same_dims(a, b)?;
    let ma = threshold_mask(a, tau)?;
    let mb = threshold_mask(b, tau)?;
    Ok(dice_counts(ma.data().iter().copied(), mb.data().iter().copied()))
}

/// Dice restricted to voxels where `mask` is set.
pub fn dice_masked(a: &Volume3, b: &Volume3, tau: f64, mask: &Mask3) -> Result<f64> {
    same_dims(a, b)?;
    if mask.dims() != a.dims() {
        return Err(Error::Dimension(format!("mask {:?} vs volume {:?}", mask.dims(), a.dims())));
    }
    let ma = threshold_mask(a, tau)?;
    let mb = threshold_mask(b, tau)?;
    let pick = |m: &Mask3| m.data().iter().zip(mask.data()).filter(|(_, &k)| k).map(|(&v, _)| v).collect::<Vec<bool>>();
    Ok(dice_counts(pick(&ma).into_iter(), pick(&mb).into_iter()))
}

/// Combined score in percent from PSNR (dB) and fractional SSIM and Dice.
pub fn overall(psnr_db: f64, ssim: f64, dice: f64) -> Result<f64> {
    if !psnr_db.is_finite() {
        return Err(Error::UndefinedScore);
    }
    Ok(100.0 * (psnr_db / 20.0 + dice + ssim) / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `null` in JSON when the inputs are identical.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub dice: f64,
    pub overall_pct: Option<f64>,
}

impl MetricReport {
    pub fn new(psnr_db: f64, ssim: f64, dice: f64) -> Self {
        Self {
            psnr_db: psnr_db.is_finite().then_some(psnr_db),
            ssim,
            dice,
            overall_pct: overall(psnr_db, ssim, dice).ok(),
        }
    }

    pub fn evaluate(a: &Volume3, b: &Volume3, tau: f64, ssim_cfg: &SsimConfig) -> Result<Self> {
        Ok(Self::new(psnr(a, b)?, ssim3(a, b, ssim_cfg)?, dice(a, b, tau)?))
    }

    /// Fixed-width text table, one metric per row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.4}"));
        format!(
            "{:<12}{:>12}\n{:<12}{:>12}\n{:<12}{:>12.4}\n{:<12}{:>12.4}\n{:<12}{:>12}\n",
            "metric",
            "value",
            "psnr_db",
            fmt(self.psnr_db),
            "ssim",
            self.ssim,
            "dice",
            self.dice,
            "overall_pct",
            fmt(self.overall_pct),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(dims, |_, _, _| rng.random_range(-1.0f32..=1.0)).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random([5, 4, 3], 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        let a = Volume3::filled([4, 4, 4], 0.1).unwrap();
        let b = Volume3::filled([4, 4, 4], 0.3).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);

        let a = random([6, 5, 4], 2);
        let b = random([6, 5, 4], 3);
        let mut se = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            se += ((*x as f64) - (*y as f64)) * ((*x as f64) - (*y as f64));
        }
        let want = 10.0 * (4.0 / (se / 120.0)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&a, &random([6, 5, 3], 3)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let a = random([9, 8, 10], 4);
        let b = random([9, 8, 10], 5);
        let cfg = SsimConfig::default();
        assert_eq!(ssim3(&a, &a, &cfg).unwrap(), 1.0);
        assert_eq!(ssim3(&a, &b, &cfg).unwrap(), ssim3(&b, &a, &cfg).unwrap());

        let z = Volume3::filled([8, 8, 8], 0.0).unwrap();
        let h = Volume3::filled([8, 8, 8], 0.5).unwrap();
        let c1 = (0.01f64 * 2.0).powi(2);
        let want = c1 / (0.25 + c1);
        assert!((ssim3(&z, &h, &cfg).unwrap() - want).abs() < 1e-9);
        assert!((want - 0.0015974).abs() < 1e-6);

        let small = Volume3::filled([6, 8, 8], 0.0).unwrap();
        assert!(matches!(ssim3(&small, &small, &cfg), Err(Error::VolumeTooSmall { .. })));
    }

    #[test]
    fn dice_cases() {
        let mut a = Volume3::filled([4, 4, 4], -1.0).unwrap();
        a.set(1, 1, 1, 0.5);
        a.set(2, 1, 1, 0.5);
        assert_eq!(dice(&a, &a, -0.8).unwrap(), 1.0);
        let mut b = Volume3::filled([4, 4, 4], -1.0).unwrap();
        b.set(3, 3, 3, 0.5);
        assert_eq!(dice(&a, &b, -0.8).unwrap(), 0.0);
        let empty = Volume3::filled([4, 4, 4], -1.0).unwrap();
        assert_eq!(dice(&empty, &empty, -0.8).unwrap(), 1.0);

        let a = random([4, 4, 4], 6);
        let b = random([4, 4, 4], 7);
        let sa: Vec<usize> = (0..64).filter(|&i| a.data()[i] as f64 > -0.2).collect();
        let sb: Vec<usize> = (0..64).filter(|&i| b.data()[i] as f64 > -0.2).collect();
        let inter = sa.iter().filter(|i| sb.contains(i)).count();
        let want = 2.0 * inter as f64 / (sa.len() + sb.len()) as f64;
        assert_eq!(dice(&a, &b, -0.2).unwrap(), want);
    }

    #[test]
    fn overall_reproduces_reported_scores() {
        // (psnr dB, ssim %, dice %, reported overall)
        let rows = [
            (19.22, 78.27, 71.28, 81.89),
            (8.06, 46.61, 35.50, 40.79),
            (18.06, 73.02, 64.53, 75.95),
            (19.14, 78.41, 70.89, 81.66),
            (18.06, 71.94, 57.71, 73.32),
            (19.04, 76.78, 69.68, 80.56),
        ];
        for (p, s, d, want) in rows {
            let got = overall(p, s / 100.0, d / 100.0).unwrap();
            assert!((got - want).abs() <= 0.02, "{got} vs {want}");
        }
        assert!((overall(19.22, 0.7827, 0.7128).unwrap() - 81.88).abs() < 0.005);
        assert_eq!(overall(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(overall(f64::INFINITY, 1.0, 1.0), Err(Error::UndefinedScore)));
    }

    #[test]
    fn report_holds_the_formula() {
        let r = MetricReport::new(19.22, 0.7827, 0.7128);
        assert_eq!(r.overall_pct.unwrap(), 100.0 * (19.22 / 20.0 + 0.7128 + 0.7827) / 3.0);
        let inf = MetricReport::new(f64::INFINITY, 1.0, 1.0);
        assert_eq!(inf.overall_pct, None);
        assert!(inf.table().contains("inf"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metric_symmetries(s1 in any::<u64>(), s2 in any::<u64>(), tau in -0.9f64..0.9) {
            let a = random([7, 7, 7], s1);
            let b = random([7, 7, 7], s2);
            let cfg = SsimConfig::default();
            let d = dice(&a, &b, tau).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a, tau).unwrap());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let s = ssim3(&a, &b, &cfg).unwrap();
            prop_assert_eq!(s, ssim3(&b, &a, &cfg).unwrap());
            prop_assert!(s <= 1.0);
            if s1 != s2 { prop_assert!(s < 1.0); }
        }

        #[test]
        fn dice_invariant_under_threshold_fixing_affine_maps(s1 in any::<u64>(), s2 in any::<u64>(), gain in 0.1f64..1.0) {
            let tau = -0.8;
            let a = random([5, 5, 5], s1);
            let b = random([5, 5, 5], s2);
            // x -> tau + gain (x - tau) is strictly increasing, fixes tau and stays in range.
            let remap = |v: &Volume3| {
                let data = v.data().iter().map(|&x| (tau + gain * (x as f64 - tau)) as f32).collect();
                Volume3::from_vec(v.dims(), data).unwrap()
            };
            let (ra, rb) = (remap(&a), remap(&b));
            let same_side = a.data().iter().chain(b.data()).zip(ra.data().iter().chain(rb.data()))
                .all(|(&x, &y)| (x as f64 > tau) == (y as f64 > tau));
            prop_assume!(same_side);
            prop_assert_eq!(dice(&a, &b, tau).unwrap(), dice(&ra, &rb, tau).unwrap());
        }
    }
}
