//! Dental-arch curves in the axial plane.
//!
//! An arch is a polynomial `y = f(x)` over `[x_min, x_max]`. Sampling it at
//! equal arc length gives the positions, tangents and normals that both the
//! flattening and the deformation steps walk along.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Image2;

pub type Point2 = [f64; 2];

/// Segments in the arc-length table.
const ARC_TABLE_SEGMENTS: usize = 4096;
/// Grid points for the curvature scan.
const CURVATURE_GRID: usize = 4097;

/// Polynomial arch `y = c0 + c1 x + ... + cn x^n` on `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchCurve {
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
}

impl ArchCurve {
    pub fn new(coeffs: Vec<f64>, x_min: f64, x_max: f64) -> Result<Self> {
        let curve = Self { degree: coeffs.len().saturating_sub(1), coeffs, x_min, x_max };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 || self.coeffs.len() != self.degree + 1 {
            return Err(Error::InvalidValue(format!(
                "arch needs degree >= 1 with degree + 1 coefficients (degree {}, {} coeffs)",
                self.degree,
                self.coeffs.len()
            )));
        }
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::InvalidValue(format!(
                "arch domain [{}, {}] is empty",
                self.x_min, self.x_max
            )));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidValue("non-finite arch coefficient".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c)
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + (k * (k - 1)) as f64 * c)
    }

    fn speed(&self, x: f64) -> f64 {
        self.derivative(x).hypot(1.0)
    }

    /// Cumulative arc length at the nodes of a uniform x grid.
    fn arc_table(&self) -> (Vec<f64>, Vec<f64>) {
        // 3-point Gauss–Legendre per segment.
        const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let n = ARC_TABLE_SEGMENTS;
        let dx = (self.x_max - self.x_min) / n as f64;
        let mut xs = Vec::with_capacity(n + 1);
        let mut cum = Vec::with_capacity(n + 1);
        xs.push(self.x_min);
        cum.push(0.0);
        let mut total = 0.0;
        for i in 0..n {
            let a = self.x_min + i as f64 * dx;
            let mid = a + 0.5 * dx;
            let seg: f64 = NODES
                .iter()
                .zip(WEIGHTS)
                .map(|(&t, w)| w * self.speed(mid + 0.5 * dx * t))
                .sum();
            total += 0.5 * dx * seg;
            xs.push(if i + 1 == n { self.x_max } else { a + dx });
            cum.push(total);
        }
        (xs, cum)
    }

    pub fn arc_length(&self) -> f64 {
        *self.arc_table().1.last().unwrap()
    }
}

/// Least-squares fit result.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchFit {
    pub curve: ArchCurve,
    pub residual_rms: f64,
}

/// Points along an arch at equal arc-length spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcSamples {
    pub points: Vec<Point2>,
    pub tangents: Vec<Point2>,
    /// Tangents rotated by +90 degrees.
    pub normals: Vec<Point2>,
    pub step: f64,
}

impl ArcSamples {
    /// Builds samples from explicit points sharing one tangent direction.
    /// Useful for straight arches whose sample positions must land exactly
    /// on a grid.
    pub fn straight(points: Vec<Point2>, tangent: Point2) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidValue("need at least two arc samples".into()));
        }
        let norm = tangent[0].hypot(tangent[1]);
        if !(norm > 0.0) {
            return Err(Error::InvalidValue("zero tangent".into()));
        }
        let t = [tangent[0] / norm, tangent[1] / norm];
        let step = dist2(points[0], points[1]);
        let n = points.len();
        Ok(Self { points, tangents: vec![t; n], normals: vec![[-t[1], t[0]]; n], step })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn arc_length(&self) -> f64 {
        self.step * (self.points.len().saturating_sub(1)) as f64
    }
}

#[inline]
fn dist2(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-column centroid of the pixels brighter than `tau`, in pixel-index
/// coordinates and ordered by x.
pub fn centerline_from_mip(img: &Image2, tau: f64, degree: usize) -> Result<Vec<Point2>> {
    let [w, h] = img.dims();
    let mut points = Vec::new();
    for x in 0..w {
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..h {
            if img.get(x, y) as f64 > tau {
                sum += y as f64;
                count += 1;
            }
        }
        if count > 0 {
            points.push([x as f64, sum / count as f64]);
        }
    }
    if points.len() < degree + 1 {
        return Err(Error::InsufficientPoints { degree, needed: degree + 1, got: points.len() });
    }
    Ok(points)
}

/// Least-squares polynomial fit of `y` on `x`.
pub fn fit_arch(points: &[Point2], degree: usize) -> Result<ArchFit> {
    if degree < 1 {
        return Err(Error::InvalidValue("arch degree must be >= 1".into()));
    }
    if points.len() < degree + 1 {
        return Err(Error::InsufficientPoints { degree, needed: degree + 1, got: points.len() });
    }
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    if !(x_max > x_min) {
        return Err(Error::DegenerateFit("all x values coincide".into()));
    }

    let m = points.len();
    let cols = degree + 1;
    let mut design = DMatrix::<f64>::from_fn(m, cols, |r, c| points[r][0].powi(c as i32));
    // Column equilibration keeps x^3 and 1 on comparable scales.
    let scales: Vec<f64> = (0..cols)
        .map(|c| {
            let n = design.column(c).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in scales.iter().enumerate() {
        design.column_mut(c).unscale_mut(*s);
    }
    let rhs = DVector::from_iterator(m, points.iter().map(|p| p[1]));

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(Error::DegenerateFit(format!(
            "design matrix is rank deficient (singular values {smin:e} / {smax:e})"
        )));
    }
    let sol = svd
        .solve(&rhs, smax * 1e-14)
        .map_err(|e| Error::DegenerateFit(e.to_string()))?;
    let coeffs: Vec<f64> = sol.iter().zip(&scales).map(|(c, s)| c / s).collect();

    let curve = ArchCurve::new(coeffs, x_min, x_max)?;
    let ss: f64 = points.iter().map(|p| (curve.eval(p[0]) - p[1]).powi(2)).sum();
    Ok(ArchFit { curve, residual_rms: (ss / m as f64).sqrt() })
}

/// `w` points at equal arc-length spacing from `x_min` to `x_max`.
pub fn sample_equal_arclength(curve: &ArchCurve, w: usize) -> Result<ArcSamples> {
    if w < 2 {
        return Err(Error::InvalidValue(format!("need at least two arc samples, got {w}")));
    }
    curve.validate()?;
    let (xs, cum) = curve.arc_table();
    let total = *cum.last().unwrap();
    let step = total / (w - 1) as f64;

    let mut points = Vec::with_capacity(w);
    let mut tangents = Vec::with_capacity(w);
    let mut normals = Vec::with_capacity(w);
    let mut seg = 0usize;
    for k in 0..w {
        let x = if k == 0 {
            curve.x_min
        } else if k == w - 1 {
            curve.x_max
        } else {
            let target = k as f64 * step;
            while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let t = if span > 0.0 { (target - cum[seg]) / span } else { 0.0 };
            xs[seg] + t * (xs[seg + 1] - xs[seg])
        };
        let slope = curve.derivative(x);
        let norm = slope.hypot(1.0);
        let t = [1.0 / norm, slope / norm];
        points.push([x, curve.eval(x)]);
        tangents.push(t);
        normals.push([-t[1], t[0]]);
    }
    Ok(ArcSamples { points, tangents, normals, step })
}

/// Nearest sample (lowest index on ties) and the Euclidean distance to it,
/// signed by the side of that sample's normal.
pub fn signed_distance(samples: &ArcSamples, p: Point2) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, q) in samples.points.iter().enumerate() {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let d2 = dx * dx + dy * dy;
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    let q = samples.points[best];
    let n = samples.normals[best];
    let side = (p[0] - q[0]) * n[0] + (p[1] - q[1]) * n[1];
    let d = best_d2.sqrt();
    (best, if side < 0.0 { -d } else { d })
}

/// Smallest radius of curvature over the domain; `f64::INFINITY` for
/// curves with vanishing second derivative.
pub fn min_curvature_radius(curve: &ArchCurve) -> f64 {
    let n = CURVATURE_GRID;
    let dx = (curve.x_max - curve.x_min) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = curve.x_min + i as f64 * dx;
            let f1 = curve.derivative(x);
            let f2 = curve.second_derivative(x).abs();
            if f2 == 0.0 {
                f64::INFINITY
            } else {
                (1.0 + f1 * f1).powf(1.5) / f2
            }
        })
        .fold(f64::INFINITY, f64::min)
}
