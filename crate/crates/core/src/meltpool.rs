//! Melt-pool morphology from coaxial camera frames.
//!
//! A frame is binarized, the largest 8-connected blob is taken as the melt
//! pool, and the module reports its intensity-weighted area, central moments,
//! convex hull area and the semi-axes of a least-squares ellipse fitted to the
//! blob boundary. Pixel (x, y) is treated as the point (x, y) with unit cell
//! area, so moment sums over integer intensities are exact integers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::components::{largest_component_2d, Connectivity};
use crate::error::{Error, Result};
use crate::exec;
use crate::io::{create_writer, fmt_time, fmt_val, write_err};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be >= 1".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// 0/1 intensity image from a mask, for the binary moment convention.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            data: mask.bits.iter().map(|&b| b as u8).collect(),
        }
    }
}

/// Per-pixel foreground mask with the same dimensions as its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} != {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Masked pixels whose 4-neighborhood leaves the mask or the frame.
    pub fn boundary_pixels(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1;
                let interior = !edge
                    && self.get(x - 1, y)
                    && self.get(x + 1, y)
                    && self.get(x, y - 1)
                    && self.get(x, y + 1);
                if !interior {
                    out.push((x as f64, y as f64));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "threshold")]
pub enum BinarizeMethod {
    Otsu,
    Fixed(u8),
}

/// Otsu's threshold: maximizes between-class variance over all 256 candidate
/// thresholds, class split `v < T` vs `v >= T`; ties take the smallest T.
/// A constant image has no valid split and yields 255.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let total = img.data.len() as f64;
    let full_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best: Option<(f64, u8)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..=255usize {
        // w0/sum0 currently cover bins 0..t, i.e. the `v < t` class.
        let w1 = total - w0;
        if w0 > 0.0 && w1 > 0.0 {
            let mu0 = sum0 / w0;
            let mu1 = (full_sum - sum0) / w1;
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if best.map_or(true, |(bv, _)| var > bv) {
                best = Some((var, t as u8));
            }
        }
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
    }
    best.map_or(255, |(_, t)| t)
}

/// Foreground = pixels at or above the (fixed or Otsu-selected) threshold.
pub fn binarize(img: &GrayImage, method: BinarizeMethod) -> BinaryMask {
    let threshold = match method {
        BinarizeMethod::Otsu => otsu_threshold(img),
        BinarizeMethod::Fixed(t) => t,
    };
    BinaryMask {
        width: img.width,
        height: img.height,
        bits: img.data.iter().map(|&v| v >= threshold).collect(),
    }
}

fn check_dims(img: &GrayImage, mask: &BinaryMask) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Intensity-weighted zeroth moment over the masked pixels (unit cell area).
/// With the mask itself as the intensity image this is the masked pixel count.
pub fn contour_area_moment(img: &GrayImage, mask: &BinaryMask) -> Result<f64> {
    check_dims(img, mask)?;
    let mut sum = 0.0;
    for (i, &b) in mask.bits.iter().enumerate() {
        if b {
            sum += img.data[i] as f64;
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralMoments {
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
}

/// Intensity-weighted centroid and second-order central moments of the masked
/// pixels. Errors with `EmptyMask` when the weighted mass is zero.
pub fn central_moments(img: &GrayImage, mask: &BinaryMask) -> Result<CentralMoments> {
    check_dims(img, mask)?;
    let mut m00 = 0.0;
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            if mask.get(x, y) {
                let w = img.get(x, y) as f64;
                m00 += w;
                m10 += w * x as f64;
                m01 += w * y as f64;
            }
        }
    }
    if m00 <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let cx = m10 / m00;
    let cy = m01 / m00;
    let mut mu20 = 0.0;
    let mut mu02 = 0.0;
    let mut mu11 = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            if mask.get(x, y) {
                let w = img.get(x, y) as f64;
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                mu20 += w * dx * dx;
                mu02 += w * dy * dy;
                mu11 += w * dx * dy;
            }
        }
    }
    Ok(CentralMoments { centroid_x: cx, centroid_y: cy, mu20, mu02, mu11 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull {
    /// Counter-clockwise vertices; collinear input degenerates to a segment.
    pub vertices: Vec<(f64, f64)>,
    pub area: f64,
}

/// Convex hull (monotone chain) of the masked pixel centers, with its
/// shoelace area. Collinear point sets yield area 0.
pub fn convex_hull(mask: &BinaryMask) -> Result<ConvexHull> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(hull_of_points(pts))
}

pub(crate) fn hull_of_points(mut pts: Vec<(f64, f64)>) -> ConvexHull {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return ConvexHull { vertices: pts, area: 0.0 };
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let area = shoelace_area(&lower);
    ConvexHull { vertices: lower, area }
}

pub fn shoelace_area(polygon: &[(f64, f64)]) -> f64 {
    if polygon.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..polygon.len() {
        let (x0, y0) = polygon[i];
        let (x1, y1) = polygon[(i + 1) % polygon.len()];
        twice += x0 * y1 - x1 * y0;
    }
    twice.abs() / 2.0
}

/// Geometric parameters of a fitted ellipse. `semi_minor <= semi_major`;
/// `angle` is the major-axis orientation in radians, normalized to [0, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub center: (f64, f64),
    pub semi_minor: f64,
    pub semi_major: f64,
    pub angle: f64,
}

/// Fits an ellipse to the blob boundary of `mask` in the least-squares sense
/// (algebraic distance with an ellipse-specific constraint).
pub fn fit_ellipse(mask: &BinaryMask) -> Result<EllipseFit> {
    let boundary = mask.boundary_pixels();
    fit_conic_ellipse(&boundary)
}

/// Direct least-squares ellipse fit to arbitrary points.
///
/// Minimizes the algebraic distance of the conic subject to the constraint
/// that the solution is an ellipse, via the numerically stable split of the
/// scatter system into quadratic and linear blocks. Input points are centered
/// and isotropically scaled first so the result is similarity-equivariant.
pub fn fit_conic_ellipse(points: &[(f64, f64)]) -> Result<EllipseFit> {
    if points.len() < 5 {
        return Err(Error::TooFewBoundaryPoints(points.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let spread = points
        .iter()
        .map(|p| {
            let dx = p.0 - mx;
            let dy = p.1 - my;
            dx * dx + dy * dy
        })
        .sum::<f64>()
        / n;
    let scale = (spread / 2.0).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateConic);
    }

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let x = (px - mx) / scale;
        let y = (py - my) / scale;
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(Error::DegenerateConic)?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Reduced system folding in the ellipse constraint matrix.
    let m_red = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );

    let eigvals = m_red.complex_eigenvalues();
    let magnitude = m_red.norm().max(1.0);
    let mut best: Option<(f64, [f64; 6])> = None;
    for i in 0..3 {
        let lambda = eigvals[i];
        if lambda.im.abs() > 1e-9 * magnitude {
            continue;
        }
        let shifted = m_red - Matrix3::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or(Error::DegenerateConic)?;
        // Null direction = right singular vector of the smallest singular value.
        let a1 = Vector3::new(v_t[(2, 0)], v_t[(2, 1)], v_t[(2, 2)]);
        let constraint = 4.0 * a1[0] * a1[2] - a1[1] * a1[1];
        if constraint <= 0.0 {
            continue;
        }
        let a2 = t * a1;
        let coeffs = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
        let residual: f64 = points
            .iter()
            .map(|&(px, py)| {
                let x = (px - mx) / scale;
                let y = (py - my) / scale;
                let v = coeffs[0] * x * x
                    + coeffs[1] * x * y
                    + coeffs[2] * y * y
                    + coeffs[3] * x
                    + coeffs[4] * y
                    + coeffs[5];
                v * v
            })
            .sum();
        if best.as_ref().map_or(true, |(r, _)| residual < *r) {
            best = Some((residual, coeffs));
        }
    }
    let (_, coeffs) = best.ok_or(Error::NotAnEllipse)?;
    let fit = conic_to_ellipse(coeffs)?;
    Ok(EllipseFit {
        center: (fit.center.0 * scale + mx, fit.center.1 * scale + my),
        semi_minor: fit.semi_minor * scale,
        semi_major: fit.semi_major * scale,
        angle: fit.angle,
    })
}

/// Converts conic coefficients (a x^2 + b xy + c y^2 + d x + e y + f = 0)
/// to center / semi-axes / major-axis angle.
fn conic_to_ellipse(mut c: [f64; 6]) -> Result<EllipseFit> {
    let det2 = c[0] * c[2] - c[1] * c[1] / 4.0;
    if det2 <= 0.0 {
        return Err(Error::NotAnEllipse);
    }
    if c[0] < 0.0 {
        for v in &mut c {
            *v = -*v;
        }
    }
    let [a, b, cc, d, e, f] = c;
    let det4 = 4.0 * a * cc - b * b;
    let cx = (b * e - 2.0 * cc * d) / det4;
    let cy = (b * d - 2.0 * a * e) / det4;
    let f0 = a * cx * cx + b * cx * cy + cc * cy * cy + d * cx + e * cy + f;
    if !(-f0 > 0.0) {
        return Err(Error::NotAnEllipse);
    }
    // Eigen-decomposition of the quadratic form [[a, b/2], [b/2, c]].
    let half_b = b / 2.0;
    let trace = a + cc;
    let gap = ((a - cc) * (a - cc) + b * b).sqrt();
    let lambda_min = (trace - gap) / 2.0;
    let lambda_max = (trace + gap) / 2.0;
    if lambda_min <= 0.0 {
        return Err(Error::NotAnEllipse);
    }
    let semi_major = (-f0 / lambda_min).sqrt();
    let semi_minor = (-f0 / lambda_max).sqrt();
    // Major axis direction = eigenvector of the smaller eigenvalue.
    let v1 = (half_b, lambda_min - a);
    let v2 = (lambda_min - cc, half_b);
    let v = if v1.0 * v1.0 + v1.1 * v1.1 >= v2.0 * v2.0 + v2.1 * v2.1 { v1 } else { v2 };
    let angle = if v.0 == 0.0 && v.1 == 0.0 {
        0.0 // circle: orientation arbitrary
    } else {
        let mut a = v.1.atan2(v.0);
        if a < 0.0 {
            a += std::f64::consts::PI;
        }
        if a >= std::f64::consts::PI {
            a -= std::f64::consts::PI;
        }
        a
    };
    Ok(EllipseFit { center: (cx, cy), semi_minor, semi_major, angle })
}

/// Per-frame melt-pool feature record. All metric fields are zero when
/// `valid` is false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeltPoolFeatures {
    pub t: f64,
    pub valid: bool,
    /// Intensity-weighted blob area (zeroth moment, unit cell area).
    pub area: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
    pub hull_area: f64,
    /// Ellipse semi-minor axis, pixels.
    pub width: f64,
    /// Ellipse semi-major axis, pixels; `length >= width`.
    pub length: f64,
}

impl MeltPoolFeatures {
    pub fn invalid(t: f64) -> Self {
        Self {
            t,
            valid: false,
            area: 0.0,
            centroid_x: 0.0,
            centroid_y: 0.0,
            mu20: 0.0,
            mu02: 0.0,
            mu11: 0.0,
            hull_area: 0.0,
            width: 0.0,
            length: 0.0,
        }
    }

    /// Channel vector fused into the twin (centroid is camera-frame only).
    pub fn channel_values(&self) -> [f64; 7] {
        [self.area, self.mu20, self.mu02, self.mu11, self.hull_area, self.width, self.length]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeltPoolConfig {
    #[serde(flatten)]
    pub method: BinarizeMethod,
    /// Blobs below this pixel count are treated as no-melt-pool frames.
    pub min_pixels: usize,
    /// Frames whose peak intensity is below this are treated as laser-off;
    /// the NIR-filtered camera sees essentially black without a melt pool.
    pub min_peak: u8,
}

impl Default for MeltPoolConfig {
    fn default() -> Self {
        Self { method: BinarizeMethod::Otsu, min_pixels: 5, min_peak: 32 }
    }
}

/// A timestamped camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MeltPoolFrame {
    pub t: f64,
    pub image: GrayImage,
}

/// Full per-frame extraction: binarize, keep the largest 8-connected blob,
/// then moments, hull and boundary ellipse. Degenerate frames (dim, too
/// small, or unfittable boundary) come back with `valid = false`.
pub fn extract_meltpool_features(frame: &MeltPoolFrame, cfg: &MeltPoolConfig) -> MeltPoolFeatures {
    let img = &frame.image;
    if img.data.iter().copied().max().unwrap_or(0) < cfg.min_peak {
        return MeltPoolFeatures::invalid(frame.t);
    }
    let mask = binarize(img, cfg.method);
    let Some(blob) = largest_component_2d(mask.width, mask.height, &mask.bits, Connectivity::Eight)
    else {
        return MeltPoolFeatures::invalid(frame.t);
    };
    if blob.len() < cfg.min_pixels.max(1) {
        return MeltPoolFeatures::invalid(frame.t);
    }
    let mut bits = vec![false; mask.bits.len()];
    for idx in blob {
        bits[idx] = true;
    }
    let blob_mask = BinaryMask { width: mask.width, height: mask.height, bits };

    let Ok(area) = contour_area_moment(img, &blob_mask) else {
        return MeltPoolFeatures::invalid(frame.t);
    };
    let Ok(moments) = central_moments(img, &blob_mask) else {
        return MeltPoolFeatures::invalid(frame.t);
    };
    let Ok(hull) = convex_hull(&blob_mask) else {
        return MeltPoolFeatures::invalid(frame.t);
    };
    let Ok(ellipse) = fit_ellipse(&blob_mask) else {
        return MeltPoolFeatures::invalid(frame.t);
    };
    MeltPoolFeatures {
        t: frame.t,
        valid: true,
        area,
        centroid_x: moments.centroid_x,
        centroid_y: moments.centroid_y,
        mu20: moments.mu20,
        mu02: moments.mu02,
        mu11: moments.mu11,
        hull_area: hull.area,
        width: ellipse.semi_minor,
        length: ellipse.semi_major,
    }
}

/// Batch extraction over many frames; parallel under the default feature,
/// output order always matches input order.
pub fn extract_meltpool_series(
    frames: &[MeltPoolFrame],
    cfg: &MeltPoolConfig,
) -> Vec<MeltPoolFeatures> {
    exec::map_ordered(frames, |f| extract_meltpool_features(f, cfg))
}

pub const MELTPOOL_CSV_HEADER: &str = "t,area,cx,cy,mu20,mu02,mu11,hull_area,width,length,valid";

pub fn write_meltpool_csv(features: &[MeltPoolFeatures], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{MELTPOOL_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for f in features {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_time(f.t),
            fmt_val(f.area),
            fmt_val(f.centroid_x),
            fmt_val(f.centroid_y),
            fmt_val(f.mu20),
            fmt_val(f.mu02),
            fmt_val(f.mu11),
            fmt_val(f.hull_area),
            fmt_val(f.width),
            fmt_val(f.length),
            f.valid as u8
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(width: usize, height: usize, data: Vec<u8>) -> GrayImage {
        GrayImage::new(width, height, data).unwrap()
    }

    fn full_mask(width: usize, height: usize) -> BinaryMask {
        BinaryMask::new(width, height, vec![true; width * height]).unwrap()
    }

    // ----- binarize -----

    #[test]
    fn fixed_threshold_masks_at_or_above() {
        let i = img(2, 1, vec![10, 200]);
        let m = binarize(&i, BinarizeMethod::Fixed(100));
        assert!(!m.get(0, 0));
        assert!(m.get(1, 0));
    }

    #[test]
    fn all_zero_image_stays_empty_with_fixed_one() {
        let i = img(3, 3, vec![0; 9]);
        let m = binarize(&i, BinarizeMethod::Fixed(1));
        assert_eq!(m.count(), 0);
    }

    // Brute-force oracle: recompute between-class variance per threshold.
    fn otsu_oracle(i: &GrayImage) -> u8 {
        let mut best_t = 255u8;
        let mut best_var = f64::NEG_INFINITY;
        for t in 0..=255u16 {
            let (mut n0, mut s0, mut n1, mut s1) = (0f64, 0f64, 0f64, 0f64);
            for &v in i.data() {
                if (v as u16) < t {
                    n0 += 1.0;
                    s0 += v as f64;
                } else {
                    n1 += 1.0;
                    s1 += v as f64;
                }
            }
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let var = n0 * n1 * (s0 / n0 - s1 / n1).powi(2);
            if var > best_var {
                best_var = var;
                best_t = t as u8;
            }
        }
        best_t
    }

    #[test]
    fn otsu_matches_exhaustive_search_on_bimodal_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<u8> = (0..64 * 64)
            .map(|i| {
                let (mu, sd) = if i % 5 == 0 { (200.0, 10.0) } else { (30.0, 5.0) };
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                (mu + sd * g).clamp(0.0, 255.0).round() as u8
            })
            .collect();
        let i = img(64, 64, data);
        let t = otsu_threshold(&i);
        assert_eq!(t, otsu_oracle(&i));
        let m = binarize(&i, BinarizeMethod::Otsu);
        let m_oracle = binarize(&i, BinarizeMethod::Fixed(otsu_oracle(&i)));
        assert_eq!(m, m_oracle);
    }

    // ----- moments -----

    #[test]
    fn zeroth_moment_basics() {
        let mut bits = vec![false; 9];
        bits[4] = true;
        let m = BinaryMask::new(3, 3, bits).unwrap();
        let i = img(3, 3, vec![1; 9]);
        assert_eq!(contour_area_moment(&i, &m).unwrap(), 1.0);

        let i2 = img(3, 3, vec![2; 9]);
        assert_eq!(contour_area_moment(&i2, &full_mask(3, 3)).unwrap(), 18.0);
    }

    #[test]
    fn zeroth_moment_matches_double_loop_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let data: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
            let bits: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
            let i = img(8, 8, data);
            let m = BinaryMask::new(8, 8, bits).unwrap();
            let mut oracle = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    if m.get(x, y) {
                        oracle += i.get(x, y) as f64;
                    }
                }
            }
            assert_eq!(contour_area_moment(&i, &m).unwrap(), oracle);
        }
    }

    #[test]
    fn mask_as_intensity_counts_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bits: Vec<bool> = (0..100).map(|_| rng.gen_bool(0.3)).collect();
        let m = BinaryMask::new(10, 10, bits).unwrap();
        let i = GrayImage::from_mask(&m);
        assert_eq!(contour_area_moment(&i, &m).unwrap(), m.count() as f64);
    }

    #[test]
    fn single_pixel_centroid_and_zero_spread() {
        let mut bits = vec![false; 100];
        bits[7 * 10 + 5] = true;
        let m = BinaryMask::new(10, 10, bits).unwrap();
        let i = img(10, 10, vec![3; 100]);
        let c = central_moments(&i, &m).unwrap();
        assert_eq!((c.centroid_x, c.centroid_y), (5.0, 7.0));
        assert_eq!((c.mu20, c.mu02, c.mu11), (0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_rectangle_matches_closed_form() {
        // Discrete pixel-center sums over a w x h unit-intensity rectangle.
        let (w, h) = (7usize, 4usize);
        let mut bits = vec![false; 144];
        for y in 2..2 + h {
            for x in 3..3 + w {
                bits[y * 12 + x] = true;
            }
        }
        let m = BinaryMask::new(12, 12, bits).unwrap();
        let i = img(12, 12, vec![1; 144]);
        let c = central_moments(&i, &m).unwrap();
        let wf = w as f64;
        let hf = h as f64;
        assert_relative_eq!(c.mu20, wf * hf * (wf * wf - 1.0) / 12.0, max_relative = 1e-12);
        assert_relative_eq!(c.mu02, wf * hf * (hf * hf - 1.0) / 12.0, max_relative = 1e-12);
        assert_eq!(c.mu11, 0.0);
    }

    #[test]
    fn central_moments_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let data: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
            let mut bits: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.6)).collect();
            bits[0] = true; // guarantee nonzero mass when data[0] > 0
            let i = img(8, 8, data);
            let m = BinaryMask::new(8, 8, bits).unwrap();
            let Ok(c) = central_moments(&i, &m) else { continue };
            // Oracle: raw moments then translation to the centroid.
            let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
            for y in 0..8 {
                for x in 0..8 {
                    if m.get(x, y) {
                        let w = i.get(x, y) as f64;
                        m00 += w;
                        m10 += w * x as f64;
                        m01 += w * y as f64;
                    }
                }
            }
            let (cx, cy) = (m10 / m00, m01 / m00);
            let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
            for y in 0..8 {
                for x in 0..8 {
                    if m.get(x, y) {
                        let w = i.get(x, y) as f64;
                        mu20 += w * (x as f64 - cx).powi(2);
                        mu02 += w * (y as f64 - cy).powi(2);
                        mu11 += w * (x as f64 - cx) * (y as f64 - cy);
                    }
                }
            }
            assert_relative_eq!(c.mu20, mu20, max_relative = 1e-9);
            assert_relative_eq!(c.mu02, mu02, max_relative = 1e-9);
            let scale = m00.max(1.0);
            assert!((c.mu11 - mu11).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn central_moments_are_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut base = vec![0u8; 16 * 16];
        let mut bits = vec![false; 16 * 16];
        for y in 1..7 {
            for x in 1..8 {
                base[y * 16 + x] = rng.gen_range(1..=255);
                bits[y * 16 + x] = rng.gen_bool(0.8);
            }
        }
        let mut shifted = vec![0u8; 16 * 16];
        let mut shifted_bits = vec![false; 16 * 16];
        for y in 0..16 {
            for x in 0..16 {
                if x >= 3 && y >= 4 {
                    shifted[y * 16 + x] = base[(y - 4) * 16 + (x - 3)];
                    shifted_bits[y * 16 + x] = bits[(y - 4) * 16 + (x - 3)];
                }
            }
        }
        let a = central_moments(
            &img(16, 16, base),
            &BinaryMask::new(16, 16, bits).unwrap(),
        )
        .unwrap();
        let b = central_moments(
            &img(16, 16, shifted),
            &BinaryMask::new(16, 16, shifted_bits).unwrap(),
        )
        .unwrap();
        // Identical term sequence => bit-identical central moments.
        assert_eq!(a.mu20.to_bits(), b.mu20.to_bits());
        assert_eq!(a.mu02.to_bits(), b.mu02.to_bits());
        assert_eq!(a.mu11.to_bits(), b.mu11.to_bits());
        assert_relative_eq!(b.centroid_x, a.centroid_x + 3.0, max_relative = 1e-12);
        assert_relative_eq!(b.centroid_y, a.centroid_y + 4.0, max_relative = 1e-12);
    }

    // ----- convex hull -----

    #[test]
    fn right_triangle_hull_area() {
        let mut bits = vec![false; 5 * 5];
        for (x, y) in [(0usize, 0usize), (4, 0), (0, 3)] {
            bits[y * 5 + x] = true;
        }
        let m = BinaryMask::new(5, 5, bits).unwrap();
        let h = convex_hull(&m).unwrap();
        assert_eq!(h.area, 6.0);
    }

    #[test]
    fn filled_square_hull_uses_pixel_centers() {
        let h = convex_hull(&full_mask(10, 10)).unwrap();
        assert_eq!(h.area, 81.0);
    }

    #[test]
    fn collinear_pixels_give_zero_area() {
        let mut bits = vec![false; 25];
        for x in 0..5 {
            bits[2 * 5 + x] = true;
        }
        let m = BinaryMask::new(5, 5, bits).unwrap();
        assert_eq!(convex_hull(&m).unwrap().area, 0.0);
    }

    // Brute-force hull oracle: a point is a hull vertex unless it lies inside
    // (or on a chord of) the triangle of some other three points; the area
    // follows from angularly ordering the surviving vertices.
    fn hull_area_oracle(pts: &[(f64, f64)]) -> f64 {
        let inside_or_on = |p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
            let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
                (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
            };
            let d1 = sign(p, a, b);
            let d2 = sign(p, b, c);
            let d3 = sign(p, c, a);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        };
        let on_segment = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross != 0.0 {
                return false;
            }
            let dot = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
            let len2 = (b.0 - a.0).powi(2) + (b.1 - a.1).powi(2);
            dot > 0.0 && dot < len2
        };
        let mut vertices = Vec::new();
        'outer: for (i, &p) in pts.iter().enumerate() {
            for (j, &a) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                for (k, &b) in pts.iter().enumerate() {
                    if k == i || k == j {
                        continue;
                    }
                    if on_segment(p, a, b) {
                        continue 'outer;
                    }
                    for (l, &c) in pts.iter().enumerate() {
                        if l == i || l == j || l == k {
                            continue;
                        }
                        let degenerate = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
                            == 0.0;
                        if !degenerate && inside_or_on(p, a, b, c) {
                            continue 'outer;
                        }
                    }
                }
            }
            vertices.push(p);
        }
        if vertices.len() < 3 {
            return 0.0;
        }
        let cx = vertices.iter().map(|p| p.0).sum::<f64>() / vertices.len() as f64;
        let cy = vertices.iter().map(|p| p.1).sum::<f64>() / vertices.len() as f64;
        vertices.sort_by(|p, q| {
            (p.1 - cy)
                .atan2(p.0 - cx)
                .partial_cmp(&(q.1 - cy).atan2(q.0 - cx))
                .unwrap()
        });
        shoelace_area(&vertices)
    }

    #[test]
    fn hull_area_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bits = vec![false; 30 * 30];
        let mut pts = Vec::new();
        while pts.len() < 50 {
            let x = rng.gen_range(0..30usize);
            let y = rng.gen_range(0..30usize);
            if !bits[y * 30 + x] {
                bits[y * 30 + x] = true;
                pts.push((x as f64, y as f64));
            }
        }
        let m = BinaryMask::new(30, 30, bits).unwrap();
        let h = convex_hull(&m).unwrap();
        assert_relative_eq!(h.area, hull_area_oracle(&pts), max_relative = 1e-9);
    }

    #[test]
    fn hull_area_dominates_any_boundary_polygon() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bits = vec![false; 400];
        for _ in 0..60 {
            let x = rng.gen_range(2..18usize);
            let y = rng.gen_range(2..18usize);
            bits[y * 20 + x] = true;
        }
        let m = BinaryMask::new(20, 20, bits).unwrap();
        let h = convex_hull(&m).unwrap();
        let boundary = m.boundary_pixels();
        if boundary.len() >= 3 {
            assert!(h.area >= shoelace_area(&boundary) - 1e-9);
        }
    }

    // ----- ellipse fit -----

    fn ellipse_points(
        cx: f64,
        cy: f64,
        a_major: f64,
        b_minor: f64,
        angle: f64,
        n: usize,
    ) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let x = a_major * th.cos();
                let y = b_minor * th.sin();
                (
                    cx + x * angle.cos() - y * angle.sin(),
                    cy + x * angle.sin() + y * angle.cos(),
                )
            })
            .collect()
    }

    #[test]
    fn circle_fit_recovers_radius() {
        let pts = ellipse_points(3.0, -2.0, 10.0, 10.0, 0.0, 40);
        let fit = fit_conic_ellipse(&pts).unwrap();
        assert_relative_eq!(fit.semi_minor, 10.0, max_relative = 1e-6);
        assert_relative_eq!(fit.semi_major, 10.0, max_relative = 1e-6);
        assert_relative_eq!(fit.center.0, 3.0, epsilon = 1e-6);
        assert_relative_eq!(fit.center.1, -2.0, epsilon = 1e-6);
    }

    #[test]
    fn rotated_ellipse_recovers_axes_and_angle() {
        let angle = 30f64.to_radians();
        let pts = ellipse_points(7.0, 5.0, 5.0, 2.0, angle, 60);
        let fit = fit_conic_ellipse(&pts).unwrap();
        assert_relative_eq!(fit.semi_minor, 2.0, max_relative = 1e-6);
        assert_relative_eq!(fit.semi_major, 5.0, max_relative = 1e-6);
        let mut da = (fit.angle - angle).abs() % std::f64::consts::PI;
        if da > std::f64::consts::FRAC_PI_2 {
            da = std::f64::consts::PI - da;
        }
        assert!(da.to_degrees() < 0.01, "angle error {} deg", da.to_degrees());
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let pts = ellipse_points(1.0, 2.0, 6.0, 3.0, 0.7, 48);
        let scaled: Vec<(f64, f64)> = pts.iter().map(|p| (3.0 * p.0, 3.0 * p.1)).collect();
        let f1 = fit_conic_ellipse(&pts).unwrap();
        let f3 = fit_conic_ellipse(&scaled).unwrap();
        assert_relative_eq!(f3.semi_major, 3.0 * f1.semi_major, max_relative = 1e-9);
        assert_relative_eq!(f3.semi_minor, 3.0 * f1.semi_minor, max_relative = 1e-9);
    }

    #[test]
    fn too_few_or_collinear_points_fail() {
        let four = vec![(0.0, 0.0), (1.0, 0.0), (2.0, 1.0), (0.0, 1.0)];
        assert!(matches!(fit_conic_ellipse(&four), Err(Error::TooFewBoundaryPoints(4))));
        let line: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(fit_conic_ellipse(&line).is_err());
    }

    // ----- extraction -----

    fn gaussian_blob(width: usize, height: usize, sx: f64, sy: f64) -> GrayImage {
        let cx = width as f64 / 2.0;
        let cy = height as f64 / 2.0;
        let data: Vec<u8> = (0..width * height)
            .map(|i| {
                let x = (i % width) as f64;
                let y = (i / width) as f64;
                let v = 255.0
                    * (-((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy)))
                        .exp();
                v.round() as u8
            })
            .collect();
        GrayImage::new(width, height, data).unwrap()
    }

    #[test]
    fn dark_frame_is_invalid() {
        let frame = MeltPoolFrame { t: 0.5, image: img(32, 32, vec![0; 1024]) };
        let f = extract_meltpool_features(&frame, &MeltPoolConfig::default());
        assert!(!f.valid);
        assert_eq!(f.area, 0.0);
    }

    #[test]
    fn gaussian_blob_aspect_ratio_matches_sigma_ratio() {
        // Thresholding a Gaussian at a fixed level cuts an ellipse whose axes
        // are proportional to the sigmas.
        let frame = MeltPoolFrame { t: 0.0, image: gaussian_blob(64, 64, 4.0, 8.0) };
        let cfg = MeltPoolConfig {
            method: BinarizeMethod::Fixed(128),
            ..MeltPoolConfig::default()
        };
        let f = extract_meltpool_features(&frame, &cfg);
        assert!(f.valid);
        let ratio = f.length / f.width;
        assert!((ratio - 2.0).abs() <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn largest_blob_wins() {
        let mut data = vec![0u8; 40 * 40];
        // 10x10 blob (100 px) and 5x8 blob (40 px).
        for y in 2..12 {
            for x in 2..12 {
                data[y * 40 + x] = 255;
            }
        }
        for y in 20..28 {
            for x in 30..35 {
                data[y * 40 + x] = 255;
            }
        }
        let frame = MeltPoolFrame { t: 0.0, image: img(40, 40, data) };
        let cfg = MeltPoolConfig {
            method: BinarizeMethod::Fixed(100),
            ..MeltPoolConfig::default()
        };
        let f = extract_meltpool_features(&frame, &cfg);
        assert!(f.valid);
        // Unit-intensity-equivalent area = 100 px at intensity 255.
        assert_eq!(f.area, 100.0 * 255.0);
        assert!((f.centroid_x - 6.5).abs() < 1e-9);
    }

    #[test]
    fn extraction_is_deterministic() {
        let frame = MeltPoolFrame { t: 1.0, image: gaussian_blob(48, 48, 5.0, 7.0) };
        let cfg = MeltPoolConfig::default();
        let a = extract_meltpool_features(&frame, &cfg);
        let b = extract_meltpool_features(&frame, &cfg);
        assert_eq!(a, b);
    }
}
