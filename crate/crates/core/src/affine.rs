//! Two-dimensional affine transforms: least-squares estimation from point
//! correspondences, composition, and frame warping with a validity mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Frame, GrayImage, Point};

/// Normal-matrix condition number above which a fit is rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Row-major `[p11, p12, p13, p21, p22, p23]`; the bottom row is implicitly
/// `[0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct AffineTransform {
    pub p: [f64; 6],
}

impl From<[f64; 6]> for AffineTransform {
    fn from(p: [f64; 6]) -> Self {
        AffineTransform { p }
    }
}

impl From<AffineTransform> for [f64; 6] {
    fn from(t: AffineTransform) -> Self {
        t.p
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn new(p: [f64; 6]) -> Self {
        AffineTransform { p }
    }

    pub const fn identity() -> Self {
        AffineTransform {
            p: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            p: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    /// Counter-clockwise rotation by `theta` radians about the origin,
    /// in image coordinates (`(1,0)` maps to `(cos, sin)`).
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        AffineTransform {
            p: [c, -s, 0.0, s, c, 0.0],
        }
    }

    /// Similarity about `center`: scale then rotate, then translate by `(dx, dy)`.
    pub fn similarity_about(center: Point, scale: f64, theta: f64, dx: f64, dy: f64) -> Self {
        let to_origin = Self::translation(-center.x, -center.y);
        let (s, c) = theta.sin_cos();
        let rs = AffineTransform {
            p: [scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0],
        };
        let back = Self::translation(center.x + dx, center.y + dy);
        back.compose(&rs).compose(&to_origin)
    }

    #[inline]
    pub fn apply(&self, v: Point) -> Point {
        let p = &self.p;
        Point::new(
            p[0] * v.x + p[1] * v.y + p[2],
            p[3] * v.x + p[4] * v.y + p[5],
        )
    }

    /// `self · inner`: applies `inner` first.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let a = &self.p;
        let b = &inner.p;
        AffineTransform {
            p: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.p[0] * self.p[4] - self.p[1] * self.p[3]
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        let scale = self.p[0].abs() + self.p[1].abs() + self.p[3].abs() + self.p[4].abs();
        if !det.is_finite() || det.abs() <= 1e-12 * scale.max(1e-300).powi(2) || det == 0.0 {
            return Err(Error::SingularTransform);
        }
        let [a, b, c, d, e, f] = self.p;
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        Ok(AffineTransform {
            p: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.p
            .iter()
            .zip(other.p.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Least-squares affine transform mapping each `query` point onto its
/// `reference` point. Pairs are `(query, reference)`.
///
/// Coordinates are centred and isotropically scaled before forming the normal
/// equations, which are solved by Gaussian elimination with partial pivoting.
/// Fewer than three pairs, collinear configurations, or a normal matrix with
/// condition number above [`MAX_CONDITION`] are rejected.
pub fn fit_affine(pairs: &[(Point, Point)]) -> Result<AffineTransform> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientCorrespondence(format!(
            "{} pairs, need at least 3",
            pairs.len()
        )));
    }
    let nq = normalizer(pairs.iter().map(|p| p.0));
    let nr = normalizer(pairs.iter().map(|p| p.1));
    let (Some(nq), Some(nr)) = (nq, nr) else {
        return Err(Error::InsufficientCorrespondence(
            "all points coincide".into(),
        ));
    };

    let mut m = [[0.0f64; 3]; 3];
    let mut rhs_x = [0.0f64; 3];
    let mut rhs_y = [0.0f64; 3];
    for &(q, r) in pairs {
        let q = nq.apply(q);
        let r = nr.apply(r);
        let v = [q.x, q.y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += v[i] * v[j];
            }
            rhs_x[i] += v[i] * r.x;
            rhs_y[i] += v[i] * r.y;
        }
    }
    let cond = symmetric_condition(&m);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::InsufficientCorrespondence(format!(
            "degenerate configuration (condition number {cond:.3e})"
        )));
    }
    let row_x = solve3(m, rhs_x).ok_or_else(|| {
        Error::InsufficientCorrespondence("singular normal equations".into())
    })?;
    let row_y = solve3(m, rhs_y).ok_or_else(|| {
        Error::InsufficientCorrespondence("singular normal equations".into())
    })?;
    let normalized = AffineTransform {
        p: [row_x[0], row_x[1], row_x[2], row_y[0], row_y[1], row_y[2]],
    };
    // P = Nr^-1 · P' · Nq
    let nr_inv = nr.inverse()?;
    Ok(nr_inv.compose(&normalized).compose(&nq))
}

/// Sum of squared residuals `Σ |P·q − r|²`.
pub fn residual_sum_sq(t: &AffineTransform, pairs: &[(Point, Point)]) -> f64 {
    pairs.iter().map(|&(q, r)| t.apply(q).dist_sq(r)).sum()
}

/// Similarity normalizer: centroid to origin, mean distance √2.
fn normalizer(points: impl Iterator<Item = Point>) -> Option<AffineTransform> {
    let pts: Vec<Point> = points.collect();
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_d = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_d > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_d;
    Some(AffineTransform {
        p: [s, 0.0, -s * cx, 0.0, s, -s * cy],
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite 3×3
/// matrix (closed-form trigonometric solution).
fn symmetric_condition(m: &[[f64; 3]; 3]) -> f64 {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let (l_max, l_min);
    if p1 <= f64::EPSILON * q.abs() * q.abs() {
        let d = [m[0][0], m[1][1], m[2][2]];
        l_max = d.iter().cloned().fold(f64::MIN, f64::max);
        l_min = d.iter().cloned().fold(f64::MAX, f64::min);
    } else {
        let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        l_max = q + 2.0 * p * phi.cos();
        l_min = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    }
    if l_min <= 0.0 {
        f64::INFINITY
    } else {
        l_max / l_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Bicubic,
}

/// A warped frame plus the per-pixel mask of samples that came from inside
/// the source image.
#[derive(Debug, Clone)]
pub struct WarpedFrame {
    pub frame: Frame,
    pub valid: Vec<bool>,
}

impl WarpedFrame {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Warps `frame` by `t` (source → output coordinates) into an image of
/// `template_size`. Each output pixel is sampled from the source at the
/// inverse-mapped location; samples falling outside the source are zero and
/// flagged invalid.
pub fn warp_frame(
    frame: &Frame,
    t: &AffineTransform,
    template_size: (usize, usize),
) -> Result<WarpedFrame> {
    warp_frame_with(frame, t, template_size, Interpolation::Bilinear)
}

pub fn warp_frame_with(
    frame: &Frame,
    t: &AffineTransform,
    template_size: (usize, usize),
    interpolation: Interpolation,
) -> Result<WarpedFrame> {
    let inv = t.inverse()?;
    let (w, h) = template_size;
    let mut out = vec![0u8; w * h * 3];
    let mut valid = vec![false; w * h];
    let max_x = (frame.width - 1) as f64;
    let max_y = (frame.height - 1) as f64;
    const EPS: f64 = 1e-9;
    for oy in 0..h {
        for ox in 0..w {
            let s = inv.apply(Point::new(ox as f64, oy as f64));
            if s.x < -EPS || s.y < -EPS || s.x > max_x + EPS || s.y > max_y + EPS {
                continue;
            }
            let sx = s.x.clamp(0.0, max_x);
            let sy = s.y.clamp(0.0, max_y);
            let o = (oy * w + ox) * 3;
            let px = match interpolation {
                Interpolation::Bilinear => bilinear_rgb(frame, sx, sy),
                Interpolation::Bicubic => bicubic_rgb(frame, sx, sy),
            };
            for c in 0..3 {
                out[o + c] = px[c].round().clamp(0.0, 255.0) as u8;
            }
            valid[oy * w + ox] = true;
        }
    }
    Ok(WarpedFrame {
        frame: Frame {
            width: w,
            height: h,
            data: out,
            colorspace: frame.colorspace,
            index: frame.index,
        },
        valid,
    })
}

#[inline]
fn bilinear_rgb(frame: &Frame, x: f64, y: f64) -> [f64; 3] {
    let x0 = (x.floor() as usize).min(frame.width - 1);
    let y0 = (y.floor() as usize).min(frame.height - 1);
    let x1 = (x0 + 1).min(frame.width - 1);
    let y1 = (y0 + 1).min(frame.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let a = frame.pixel(x0, y0);
    let b = frame.pixel(x1, y0);
    let c = frame.pixel(x0, y1);
    let d = frame.pixel(x1, y1);
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] as f64 + fx * (b[k] as f64 - a[k] as f64);
        let bot = c[k] as f64 + fx * (d[k] as f64 - c[k] as f64);
        out[k] = top + fy * (bot - top);
    }
    out
}

#[inline]
fn cubic_weight(t: f64) -> f64 {
    // Catmull-Rom (a = -0.5)
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn bicubic_rgb(frame: &Frame, x: f64, y: f64) -> [f64; 3] {
    let xf = x.floor();
    let yf = y.floor();
    let mut out = [0.0; 3];
    for j in -1i64..=2 {
        let wy = cubic_weight(y - (yf + j as f64));
        let sy = (yf as i64 + j).clamp(0, frame.height as i64 - 1) as usize;
        for i in -1i64..=2 {
            let wx = cubic_weight(x - (xf + i as f64));
            let sx = (xf as i64 + i).clamp(0, frame.width as i64 - 1) as usize;
            let p = frame.pixel(sx, sy);
            for k in 0..3 {
                out[k] += wx * wy * p[k] as f64;
            }
        }
    }
    out
}

/// Warps a float grayscale image; out-of-source samples become `fill`.
pub fn warp_gray(img: &GrayImage, t: &AffineTransform, size: (usize, usize), fill: f32) -> Result<GrayImage> {
    let inv = t.inverse()?;
    let (w, h) = size;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    Ok(GrayImage::from_fn(w, h, |ox, oy| {
        let s = inv.apply(Point::new(ox as f64, oy as f64));
        if s.x < -1e-9 || s.y < -1e-9 || s.x > max_x + 1e-9 || s.y > max_y + 1e-9 {
            fill
        } else {
            img.sample(s.x.clamp(0.0, max_x), s.y.clamp(0.0, max_y))
        }
    }))
}
