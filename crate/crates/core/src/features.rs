//! Difference-of-Gaussians keypoint detector with a 4×4×8 gradient-histogram
//! descriptor. There is no dominant-orientation assignment: descriptors are
//! expressed in the image axes, which is adequate for consecutive video frames
//! of the same face.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Point};

pub const DESCRIPTOR_LEN: usize = 128;

/// Nominal blur of the first scale-space level.
const SIGMA0: f64 = 1.6;
/// Blur assumed to be already present in the input image.
const CAMERA_SIGMA: f64 = 0.5;
const MIN_OCTAVE_DIM: usize = 16;
const MAX_REFINE_STEPS: usize = 5;
const DESCRIPTOR_CLAMP: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Minimum |DoG| at the refined extremum, for intensities in [0, 1].
    pub dog_threshold: f64,
    /// Maximum ratio of principal curvatures.
    pub edge_ratio: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            octaves: 4,
            scales_per_octave: 3,
            dog_threshold: 0.03,
            edge_ratio: 10.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.octaves < 1 || self.scales_per_octave < 1 {
            return Err(Error::Config("detector needs at least one octave and scale".into()));
        }
        if !(self.dog_threshold > 0.0) || !(self.edge_ratio > 1.0) {
            return Err(Error::Config("dog_threshold must be > 0 and edge_ratio > 1".into()));
        }
        Ok(())
    }
}

/// Unit-norm 128-bin gradient histogram.
#[derive(Clone, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn uniform() -> Self {
        Descriptor([1.0 / (DESCRIPTOR_LEN as f32).sqrt(); DESCRIPTOR_LEN])
    }

    /// Builds a descriptor from arbitrary values, rescaling to unit length.
    /// A zero vector becomes the uniform descriptor.
    pub fn from_slice(values: &[f32]) -> Result<Self> {
        if values.len() != DESCRIPTOR_LEN {
            return Err(Error::Format(format!(
                "descriptor has {} entries, expected {DESCRIPTOR_LEN}",
                values.len()
            )));
        }
        let mut d = [0.0f32; DESCRIPTOR_LEN];
        d.copy_from_slice(values);
        let mut out = Descriptor(d);
        out.normalize();
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    fn normalize(&mut self) {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            *self = Descriptor::uniform();
            return;
        }
        for v in self.0.iter_mut() {
            *v = (*v as f64 / n) as f32;
        }
    }

    #[inline]
    pub fn dot(&self, other: &Descriptor) -> f32 {
        let mut acc = [0.0f32; 8];
        for (a, b) in self.0.chunks_exact(8).zip(other.0.chunks_exact(8)) {
            for k in 0..8 {
                acc[k] += a[k] * b[k];
            }
        }
        acc.iter().sum()
    }

    /// Euclidean distance; exactly 0 for identical descriptors.
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> f64 {
        let mut acc = [0.0f32; 8];
        for (a, b) in self.0.chunks_exact(8).zip(other.0.chunks_exact(8)) {
            for k in 0..8 {
                let d = a[k] - b[k];
                acc[k] += d * d;
            }
        }
        (acc.iter().sum::<f32>() as f64).sqrt()
    }
}

impl std::fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Descriptor[{:.3}, {:.3}, ..]", self.0[0], self.0[1])
    }
}

impl Serialize for Descriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter())
    }
}

impl<'de> Deserialize<'de> for Descriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<f32> = Vec::deserialize(d)?;
        Descriptor::from_slice(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Point,
    /// Gaussian scale in input pixels.
    pub scale: f64,
    /// DoG value at the refined extremum (0 for externally supplied points).
    #[serde(default)]
    pub response: f64,
    pub descriptor: Descriptor,
}

struct Octave {
    gauss: Vec<GrayImage>,
    dog: Vec<GrayImage>,
    /// Pixel size of this octave in input pixels.
    step: f64,
}

fn kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 1e-6 {
        return img.clone();
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as i64 + t as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let sy = reflect(y as i64 + t as i64 - r, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += kv * src[x];
            }
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

fn downsample(img: &GrayImage) -> GrayImage {
    let w = img.width / 2;
    let h = img.height / 2;
    GrayImage::from_fn(w, h, |x, y| img.get(2 * x, 2 * y))
}

fn subtract(a: &GrayImage, b: &GrayImage) -> GrayImage {
    GrayImage {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    }
}

fn build_scale_space(img: &GrayImage, params: &DetectorParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let mut octaves = Vec::new();
    let mut base = gaussian_blur(img, (SIGMA0 * SIGMA0 - CAMERA_SIGMA * CAMERA_SIGMA).sqrt());
    let mut step = 1.0;
    for o in 0..params.octaves {
        if base.width < MIN_OCTAVE_DIM || base.height < MIN_OCTAVE_DIM {
            break;
        }
        let mut gauss = vec![base.clone()];
        for layer in 1..s + 3 {
            let prev = SIGMA0 * k.powi(layer as i32 - 1);
            let total = SIGMA0 * k.powi(layer as i32);
            let inc = (total * total - prev * prev).sqrt();
            let next = gaussian_blur(gauss.last().unwrap(), inc);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|w| subtract(&w[1], &w[0])).collect();
        let next_base = downsample(&gauss[s]);
        octaves.push(Octave { gauss, dog, step });
        base = next_base;
        step *= 2.0;
        let _ = o;
    }
    octaves
}

#[inline]
fn is_extremum(dog: &[GrayImage], s: usize, x: usize, y: usize) -> bool {
    let v = dog[s].get(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for layer in &dog[s - 1..=s + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(layer, &dog[s]) && xx == x && yy == y {
                    continue;
                }
                let n = layer.get(xx, yy);
                if n >= v {
                    is_max = false;
                }
                if n <= v {
                    is_min = false;
                }
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

struct Refined {
    x: f64,
    y: f64,
    layer: f64,
    layer_index: usize,
    value: f64,
}

fn refine(
    dog: &[GrayImage],
    s_count: usize,
    mut x: usize,
    mut y: usize,
    mut s: usize,
    params: &DetectorParams,
) -> Option<Refined> {
    let (w, h) = (dog[0].width, dog[0].height);
    for _ in 0..MAX_REFINE_STEPS {
        let d = |ds: i64, dx: i64, dy: i64| -> f64 {
            dog[(s as i64 + ds) as usize].get((x as i64 + dx) as usize, (y as i64 + dy) as usize)
                as f64
        };
        let v = d(0, 0, 0);
        let gx = 0.5 * (d(0, 1, 0) - d(0, -1, 0));
        let gy = 0.5 * (d(0, 0, 1) - d(0, 0, -1));
        let gs = 0.5 * (d(1, 0, 0) - d(-1, 0, 0));
        let hxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let hyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let hss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let hxy = 0.25 * (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1));
        let hxs = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0));
        let hys = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1));
        let hess = [[hxx, hxy, hxs], [hxy, hyy, hys], [hxs, hys, hss]];
        let off = solve_sym3(hess, [-gx, -gy, -gs])?;
        if off.iter().all(|o| o.abs() < 0.5) {
            let value = v + 0.5 * (gx * off[0] + gy * off[1] + gs * off[2]);
            if value.abs() < params.dog_threshold {
                return None;
            }
            let tr = hxx + hyy;
            let det = hxx * hyy - hxy * hxy;
            let r = params.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some(Refined {
                x: x as f64 + off[0],
                y: y as f64 + off[1],
                layer: s as f64 + off[2],
                layer_index: s,
                value,
            });
        }
        let nx = x as i64 + off[0].round() as i64;
        let ny = y as i64 + off[1].round() as i64;
        let ns = s as i64 + off[2].round() as i64;
        if ns < 1 || ns > s_count as i64 || nx < 1 || ny < 1 || nx >= w as i64 - 1 || ny >= h as i64 - 1 {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        s = ns as usize;
    }
    None
}

fn solve_sym3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-15 {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, xc) in x.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        *xc = d / det;
    }
    Some(x)
}

/// Central-difference gradient maps (mirrored borders).
fn gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let (w, h) = (img.width, img.height);
    let gx = GrayImage::from_fn(w, h, |x, y| {
        img.get(reflect(x as i64 + 1, w), y) - img.get(reflect(x as i64 - 1, w), y)
    });
    let gy = GrayImage::from_fn(w, h, |x, y| {
        img.get(x, reflect(y as i64 + 1, h)) - img.get(x, reflect(y as i64 - 1, h))
    });
    (gx, gy)
}

/// Histogram of the 16×16 sample grid centred on `center` with `spacing`
/// pixels between samples, read from precomputed gradient maps.
fn describe_at(gx: &GrayImage, gy: &GrayImage, center: Point, spacing: f64) -> Result<Descriptor> {
    let half = 7.5 * spacing;
    let (w, h) = (gx.width as f64, gx.height as f64);
    if center.x - half < 0.0 || center.y - half < 0.0 || center.x + half > w - 1.0 || center.y + half > h - 1.0 {
        return Err(Error::Boundary {
            x: center.x,
            y: center.y,
        });
    }
    let mut hist = [0.0f32; DESCRIPTOR_LEN];
    let window_sigma = 8.0f32;
    let two_pi = std::f32::consts::TAU;
    for j in 0..16 {
        let v = j as f32 - 7.5;
        let py = center.y + v as f64 * spacing;
        let row_bin = v / 4.0 + 1.5;
        for i in 0..16 {
            let u = i as f32 - 7.5;
            let px = center.x + u as f64 * spacing;
            let dx = gx.sample(px, py);
            let dy = gy.sample(px, py);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-(u * u + v * v) / (2.0 * window_sigma * window_sigma)).exp();
            let mut theta = dy.atan2(dx);
            if theta < 0.0 {
                theta += two_pi;
            }
            let ob = theta / two_pi * 8.0;
            let col_bin = u / 4.0 + 1.5;
            accumulate(&mut hist, row_bin, col_bin, ob, mag * weight);
        }
    }
    let mut d = Descriptor(hist);
    d.normalize();
    if d == Descriptor::uniform() {
        return Ok(d);
    }
    for v in d.0.iter_mut() {
        *v = v.min(DESCRIPTOR_CLAMP);
    }
    d.normalize();
    Ok(d)
}

/// Trilinear vote into (row, col, orientation) bins; orientation wraps.
#[inline]
fn accumulate(hist: &mut [f32; DESCRIPTOR_LEN], rb: f32, cb: f32, ob: f32, value: f32) {
    let r0 = rb.floor();
    let c0 = cb.floor();
    let o0 = ob.floor();
    let fr = rb - r0;
    let fc = cb - c0;
    let fo = ob - o0;
    for (dr, wr) in [(0i32, 1.0 - fr), (1, fr)] {
        let r = r0 as i32 + dr;
        if !(0..4).contains(&r) || wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0i32, 1.0 - fc), (1, fc)] {
            let c = c0 as i32 + dc;
            if !(0..4).contains(&c) || wc == 0.0 {
                continue;
            }
            for (dob, wo) in [(0i32, 1.0 - fo), (1, fo)] {
                let o = (o0 as i32 + dob).rem_euclid(8);
                hist[((r * 4 + c) * 8 + o) as usize] += value * wr * wc * wo;
            }
        }
    }
}

/// Computes the descriptor of a keypoint at `position` with Gaussian `scale`
/// (input pixels) directly on `gray`.
///
/// Gradients are taken on the unsmoothed image and then blurred, which is
/// equivalent to differentiating the smoothed image and makes the result
/// exactly invariant to an additive brightness offset.
pub fn compute_descriptor(gray: &GrayImage, position: Point, scale: f64) -> Result<Descriptor> {
    let spacing = (scale / SIGMA0).max(1.0);
    let half = 7.5 * spacing;
    if position.x - half < 0.0
        || position.y - half < 0.0
        || position.x + half > gray.width as f64 - 1.0
        || position.y + half > gray.height as f64 - 1.0
    {
        return Err(Error::Boundary {
            x: position.x,
            y: position.y,
        });
    }
    let (gx, gy) = gradients(gray);
    let blur = (scale * scale - CAMERA_SIGMA * CAMERA_SIGMA).max(0.0).sqrt();
    let gx = gaussian_blur(&gx, blur);
    let gy = gaussian_blur(&gy, blur);
    describe_at(&gx, &gy, position, spacing)
}

/// Detects DoG extrema and describes them. Keypoints whose descriptor patch
/// leaves the image are dropped.
pub fn detect_keypoints(gray: &GrayImage, params: &DetectorParams) -> Result<Vec<Keypoint>> {
    params.validate()?;
    if gray.width < 32 || gray.height < 32 {
        return Err(Error::Size(format!(
            "detector needs at least 32x32, got {}x{}",
            gray.width, gray.height
        )));
    }
    let s_count = params.scales_per_octave;
    let octaves = build_scale_space(gray, params);
    let prefilter = 0.5 * params.dog_threshold as f32;
    let mut out = Vec::new();
    for oct in &octaves {
        let (w, h) = (oct.dog[0].width, oct.dog[0].height);
        let mut grads: Vec<Option<(GrayImage, GrayImage)>> = vec![None; oct.gauss.len()];
        for s in 1..=s_count {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if oct.dog[s].get(x, y).abs() < prefilter || !is_extremum(&oct.dog, s, x, y) {
                        continue;
                    }
                    let Some(r) = refine(&oct.dog, s_count, x, y, s, params) else {
                        continue;
                    };
                    let sigma_oct = SIGMA0 * 2f64.powf(r.layer / s_count as f64);
                    let (gx, gy) = grads[r.layer_index]
                        .get_or_insert_with(|| gradients(&oct.gauss[r.layer_index]));
                    let spacing = SIGMA0 * 2f64.powf(r.layer_index as f64 / s_count as f64) / SIGMA0;
                    let Ok(descriptor) = describe_at(gx, gy, Point::new(r.x, r.y), spacing) else {
                        continue;
                    };
                    out.push(Keypoint {
                        position: Point::new(r.x * oct.step, r.y * oct.step),
                        scale: sigma_oct * oct.step,
                        response: r.value,
                        descriptor,
                    });
                }
            }
        }
    }
    Ok(suppress_duplicates(out))
}

/// Refinement can converge several discrete extrema onto the same
/// scale-space point; keep the strongest of any pair closer than half a pixel
/// with scales within a factor √2.
fn suppress_duplicates(mut kps: Vec<Keypoint>) -> Vec<Keypoint> {
    kps.sort_by(|a, b| b.response.abs().total_cmp(&a.response.abs()));
    let mut kept: Vec<Keypoint> = Vec::with_capacity(kps.len());
    for kp in kps {
        let dup = kept.iter().any(|k| {
            k.position.dist(kp.position) < 0.5 && (k.scale / kp.scale).ln().abs() < 0.5 * 2f64.ln()
        });
        if !dup {
            kept.push(kp);
        }
    }
    kept.sort_by(|a, b| {
        a.position
            .y
            .total_cmp(&b.position.y)
            .then(a.position.x.total_cmp(&b.position.x))
    });
    kept
}
