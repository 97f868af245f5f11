//! Paired-data synthesis: procedural phantoms, curved-planar flattening,
//! Beer–Lambert panoramic projection and band extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    centerline_from_mip, fit_arch, sample_equal_arclength, signed_distance, ArcSamples, ArchCurve,
};
use crate::error::{Error, Result};
use crate::volume::{mip_axial, sample_trilinear, Image2, Mask3, Volume3};
use crate::AIR;

/// A volume resampled along an arch: arc position `u`, height `z`, depth `k`.
///
/// Storage is `u`-fastest (`u + w * (z + h * k)`), which is also the layout of
/// a `[depth, height, width]` channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FVolume {
    dims: [usize; 3],
    depth_step: f64,
    data: Vec<f32>,
}

impl FVolume {
    pub fn from_vec(dims: [usize; 3], depth_step: f64, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("flattened dims must be >= 1, got {dims:?}")));
        }
        if !(depth_step.is_finite() && depth_step > 0.0) {
            return Err(Error::InvalidValue(format!("depth step must be positive, got {depth_step}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!("{} values for flattened dims {dims:?}", data.len())));
        }
        if data.iter().any(|v| !(v.is_finite() && (-1.0..=1.0).contains(v))) {
            return Err(Error::InvalidValue("flattened value outside [-1, 1]".into()));
        }
        Ok(Self { dims, depth_step, data })
    }

    pub fn filled(dims: [usize; 3], depth_step: f64, value: f32) -> Result<Self> {
        Self::from_vec(dims, depth_step, vec![value; dims.iter().product()])
    }

    /// `[w, h, d]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    pub fn depth_step(&self) -> f64 {
        self.depth_step
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, z: usize, k: usize) -> f32 {
        self.data[u + self.dims[0] * (z + self.dims[1] * k)]
    }

    /// Signed offset along the normal of depth index `k`.
    #[inline]
    pub fn depth_offset(&self, k: usize) -> f64 {
        depth_offset(k, self.dims[2], self.depth_step)
    }
}

#[inline]
fn depth_offset(k: usize, d: usize, step: f64) -> f64 {
    (k as f64 + 0.5 - d as f64 / 2.0) * step
}

/// Parameters of a procedural CBCT-like phantom.
///
/// The arch is `y = apex_y + depth * u^2 + skew * u^3` with
/// `u = (x - cx) / half_width`; each bracket is a `[min, max]` draw range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub apex_y: [f64; 2],
    pub arch_depth: [f64; 2],
    pub half_width: [f64; 2],
    pub skew: [f64; 2],
    pub teeth: usize,
    pub tooth_intensity: f64,
    pub band_intensity: f64,
    /// Zero disables the mandible band.
    pub band_half_thickness: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96, 80, 64],
            apex_y: [16.0, 22.0],
            arch_depth: [10.0, 18.0],
            half_width: [28.0, 34.0],
            skew: [-3.0, 3.0],
            teeth: 14,
            tooth_intensity: 0.8,
            band_intensity: 0.2,
            band_half_thickness: 5.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidValue(format!("phantom dims must be >= 2, got {:?}", self.dims)));
        }
        for (name, r) in [
            ("apex_y", self.apex_y),
            ("arch_depth", self.arch_depth),
            ("half_width", self.half_width),
            ("skew", self.skew),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::InvalidValue(format!("{name} range {r:?} is not ordered")));
            }
        }
        if !(self.half_width[0] > 0.0) {
            return Err(Error::InvalidValue("half_width must be positive".into()));
        }
        for (name, v) in [("tooth_intensity", self.tooth_intensity), ("band_intensity", self.band_intensity)] {
            if !(v > -1.0 && v <= 1.0) {
                return Err(Error::InvalidValue(format!("{name} {v} outside (-1, 1]")));
            }
        }
        if !(self.band_half_thickness >= 0.0) {
            return Err(Error::InvalidValue("band_half_thickness must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Width of the smooth falloff at every phantom boundary, in voxels.
const EDGE_WIDTH: f64 = 2.0;

/// 1 well inside (`d <= -EDGE_WIDTH/2`), 0 well outside, smoothstep between.
fn inside_weight(d: f64) -> f64 {
    let t = (0.5 - d / EDGE_WIDTH).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Tooth {
    arc: f64,
    z: f64,
    semi: [f64; 3],
    value: f64,
}

/// Deterministic phantom: air, a curved mandible band and ellipsoidal teeth
/// centered on the arch at equal arc spacing. Returns the generating arch.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3, ArchCurve)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };

    let cx = nx as f64 / 2.0 + draw([-2.0, 2.0]);
    let hw = draw(spec.half_width);
    let apex = draw(spec.apex_y);
    let depth = draw(spec.arch_depth);
    let skew = draw(spec.skew);
    let p = 1.0 / hw;
    let coeffs = vec![
        apex + depth * p * p * cx * cx - skew * p.powi(3) * cx.powi(3),
        -2.0 * depth * p * p * cx + 3.0 * skew * p.powi(3) * cx * cx,
        depth * p * p - 3.0 * skew * p.powi(3) * cx,
        skew * p.powi(3),
    ];
    let curve = ArchCurve::new(coeffs, cx - hw, cx + hw)?;

    let nzf = nz as f64;
    let band_lo = 0.2 * nzf + draw([-1.5, 1.5]);
    let band_hi = 0.62 * nzf + draw([-1.5, 1.5]);

    let guide = sample_equal_arclength(&curve, 1024)?;
    let length = guide.arc_length();
    let n = spec.teeth;
    let spacing = if n > 0 { length / n as f64 } else { length };
    let teeth: Vec<Tooth> = (0..n)
        .map(|k| {
            let along = (0.35 * spacing).min(3.5);
            let semi = [along, draw([2.5, 3.5]), draw([5.0, 8.0])];
            Tooth {
                arc: (k as f64 + 0.5) * spacing,
                z: band_hi + draw([-1.0, 2.0]),
                semi,
                value: (spec.tooth_intensity + draw([-0.05, 0.05])).clamp(-1.0, 1.0),
            }
        })
        .collect();

    let mut data = vec![AIR; nx * ny * nz];
    let band_gain = spec.band_intensity + 1.0;
    for j in 0..ny {
        for i in 0..nx {
            let q = [i as f64 + 0.5, j as f64 + 0.5];
            let (id, _) = signed_distance(&guide, q);
            let (pt, t, nrm) = (guide.points[id], guide.tangents[id], guide.normals[id]);
            let (dx, dy) = (q[0] - pt[0], q[1] - pt[1]);
            let arc = id as f64 * guide.step + dx * t[0] + dy * t[1];
            let across = dx * nrm[0] + dy * nrm[1];
            let beyond = (-arc).max(arc - length).max(0.0);

            let band_axial = if spec.band_half_thickness > 0.0 {
                inside_weight(across.abs() - spec.band_half_thickness) * inside_weight(beyond)
            } else {
                0.0
            };
            let near: Vec<&Tooth> = teeth
                .iter()
                .filter(|tooth| (arc - tooth.arc).abs() < tooth.semi[0] + EDGE_WIDTH)
                .collect();
            if band_axial == 0.0 && near.is_empty() {
                continue;
            }
            for z in 0..nz {
                let zf = z as f64;
                let mut val = -1.0f64;
                if band_axial > 0.0 {
                    let wz = inside_weight(band_lo - zf) * inside_weight(zf - band_hi);
                    val = val.max(-1.0 + band_gain * band_axial * wz);
                }
                for tooth in &near {
                    let r = ((arc - tooth.arc) / tooth.semi[0]).hypot(across / tooth.semi[1]).hypot((zf - tooth.z) / tooth.semi[2]);
                    let min_semi = tooth.semi.iter().cloned().fold(f64::INFINITY, f64::min);
                    let w = inside_weight((r - 1.0) * min_semi);
                    if w > 0.0 {
                        val = val.max(-1.0 + (tooth.value + 1.0) * w);
                    }
                }
                data[i + nx * (j + ny * z)] = val.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Ok((Volume3::from_vec(spec.dims, data)?, curve))
}

/// Resamples `v` along the arch normals: `F[u, z, k] = v(p_u + s_k n_u, z)`.
pub fn flatten(v: &Volume3, samples: &ArcSamples, d: usize, depth_step: f64) -> Result<FVolume> {
    if d < 1 {
        return Err(Error::InvalidValue("depth count must be >= 1".into()));
    }
    if !(depth_step.is_finite() && depth_step > 0.0) {
        return Err(Error::InvalidValue(format!("depth step must be positive, got {depth_step}")));
    }
    let w = samples.len();
    let h = v.dims()[2];
    let mut data = vec![0f32; w * h * d];
    for k in 0..d {
        let s = depth_offset(k, d, depth_step);
        for (u, (p, n)) in samples.points.iter().zip(&samples.normals).enumerate() {
            // World coordinates put voxel centers at +0.5.
            let x = p[0] + s * n[0] - 0.5;
            let y = p[1] + s * n[1] - 0.5;
            for z in 0..h {
                data[u + w * (z + h * k)] = sample_trilinear(v, [x, y, z as f64]);
            }
        }
    }
    FVolume::from_vec([w, h, d], depth_step, data)
}

/// Panoramic image from a flattened volume: absorption-only transmission
/// along each depth ray, displayed as `1 - 2T`.
pub fn px_from_flat(f: &FVolume, mu: f64) -> Result<Image2> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidValue(format!("attenuation must be positive, got {mu}")));
    }
    let [w, h, d] = f.dims();
    let mut out = Vec::with_capacity(w * h);
    for z in 0..h {
        for u in 0..w {
            let path: f64 = (0..d)
                .map(|k| mu * ((f.get(u, z, k) as f64 + 1.0) / 2.0).max(0.0) * f.depth_step)
                .sum();
            out.push((1.0 - 2.0 * (-path).exp()) as f32);
        }
    }
    Image2::from_vec([w, h], out)
}

/// Beer–Lambert panoramic projection along the arch normals.
pub fn simulate_px(v: &Volume3, samples: &ArcSamples, d: usize, depth_step: f64, mu: f64) -> Result<Image2> {
    px_from_flat(&flatten(v, samples, d, depth_step)?, mu)
}

/// Keeps voxels whose axial center lies within `d_half` of the arch.
pub fn extract_band_roi(v: &Volume3, samples: &ArcSamples, d_half: f64) -> Result<Volume3> {
    if !(d_half > 0.0) {
        return Err(Error::InvalidValue(format!("band half-width must be positive, got {d_half}")));
    }
    let [nx, ny, nz] = v.dims();
    let mut keep = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (_, dist) = signed_distance(samples, [i as f64 + 0.5, j as f64 + 0.5]);
            keep[i + nx * j] = dist.abs() <= d_half;
        }
    }
    let plane = nx * ny;
    let data = v.data().iter().enumerate().map(|(idx, &val)| if keep[idx % plane] { val } else { AIR }).collect();
    Volume3::from_vec([nx, ny, nz], data)
}

/// The part of the band swept by interior arc normals: within `d_half` of
/// the arch and closest to a sample other than the two end points. Beyond
/// the ends no flattened ray passes, so this is where flatten and register
/// are mutual inverses.
pub fn swept_band_mask(dims: [usize; 3], samples: &ArcSamples, d_half: f64) -> Result<Mask3> {
    let [nx, ny, nz] = dims;
    let last = samples.len().saturating_sub(1);
    let mut plane = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (id, dist) = signed_distance(samples, [i as f64 + 0.5, j as f64 + 0.5]);
            plane[i + nx * j] = dist.abs() <= d_half && id > 0 && id < last;
        }
    }
    let data = (0..nz).flat_map(|_| plane.iter().copied()).collect();
    Mask3::from_vec(dims, data)
}

/// Settings of the paired-data pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// MIP threshold for centerline extraction.
    pub tau: f64,
    pub degree: usize,
    /// Arc samples (panoramic width).
    pub w: usize,
    /// Depth samples along each normal.
    pub d: usize,
    pub depth_step: f64,
    /// Attenuation per unit length at full intensity.
    pub mu: f64,
    pub d_half: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { tau: 0.0, degree: 3, w: 128, d: 32, depth_step: 1.0, mu: 0.1, d_half: 15.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidThreshold(self.tau));
        }
        if self.degree < 1 || self.w < 2 || self.d < 1 {
            return Err(Error::InvalidValue(format!(
                "synth needs degree >= 1, w >= 2, d >= 1 (got {}, {}, {})",
                self.degree, self.w, self.d
            )));
        }
        for (name, v) in [("depth_step", self.depth_step), ("mu", self.mu), ("d_half", self.d_half)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One training/evaluation pair and the geometry that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub px: Image2,
    pub flat_gt: FVolume,
    pub curved_gt: Volume3,
    pub curve: ArchCurve,
    pub samples: ArcSamples,
    pub fit_residual: f64,
}

/// MIP → centerline → cubic fit → arc samples → (flatten, projection, band).
pub fn synthesize_pair(v: &Volume3, cfg: &SynthConfig) -> Result<PairedSample> {
    cfg.validate()?;
    let mip = mip_axial(v);
    let points: Vec<_> = centerline_from_mip(&mip, cfg.tau, cfg.degree)?
        .into_iter()
        .map(|p| [p[0] + 0.5, p[1] + 0.5])
        .collect();
    let fit = fit_arch(&points, cfg.degree)?;
    let samples = sample_equal_arclength(&fit.curve, cfg.w)?;
    let flat_gt = flatten(v, &samples, cfg.d, cfg.depth_step)?;
    let px = px_from_flat(&flat_gt, cfg.mu)?;
    let curved_gt = extract_band_roi(v, &samples, cfg.d_half)?;
    Ok(PairedSample { px, flat_gt, curved_gt, curve: fit.curve, samples, fit_residual: fit.residual_rms })
}
