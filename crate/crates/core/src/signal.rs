//! Per-ROI colour traces: grid partition, colour conversion, masked mean
//! pooling, resampling to 30 FPS, band-pass filtering and range
//! normalization.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::affine::WarpedFrame;
use crate::error::{Error, Result};
use crate::filter::{self, BandpassParams};
use crate::image::{Frame, Rect};

/// Channel names in tensor order.
pub const CHANNELS: [&str; 9] = ["R", "G", "B", "Y", "U", "V", "L", "a", "b"];
pub const NUM_CHANNELS: usize = 9;
pub const TARGET_FPS: f64 = 30.0;

/// A sample is usable when at least this fraction of its ROI pixels is valid.
pub const MIN_VALID_FRACTION: f64 = 0.5;
/// An ROI may be interpolated over at most this fraction of frames.
pub const MAX_INVALID_FRAMES: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiGrid {
    pub face_box: Rect,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub rects: Vec<Rect>,
}

impl RoiGrid {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }
}

/// Standard 4 × 6 partition.
pub fn partition_rois(face_box: Rect) -> Result<RoiGrid> {
    partition_grid(face_box, 4, 6)
}

/// Equal cells; the last row and column absorb the remainder.
pub fn partition_grid(face_box: Rect, rows: usize, cols: usize) -> Result<RoiGrid> {
    if rows == 0 || cols == 0 || face_box.w < cols || face_box.h < rows {
        return Err(Error::Size(format!(
            "face box {}x{} too small for a {rows}x{cols} grid",
            face_box.w, face_box.h
        )));
    }
    let (cw, ch) = (face_box.w / cols, face_box.h / rows);
    let mut rects = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let h = if r + 1 == rows { face_box.h - ch * (rows - 1) } else { ch };
        for c in 0..cols {
            let w = if c + 1 == cols { face_box.w - cw * (cols - 1) } else { cw };
            rects.push(Rect::new(face_box.x + c * cw, face_box.y + r * ch, w, h));
        }
    }
    Ok(RoiGrid {
        face_box,
        rows,
        cols,
        rects,
    })
}

/// BT.601 full-range YUV with U and V offset by 128.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418688 * g - 0.081312 * b + 128.0,
    ]
}

fn srgb_to_linear(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| std::array::from_fn(|i| srgb_to_linear(i as f64)))
}

const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn lab_f(t: f64) -> f64 {
    const E: f64 = 6.0 / 29.0;
    if t > E * E * E {
        t.cbrt()
    } else {
        t / (3.0 * E * E) + 4.0 / 29.0
    }
}

fn linear_to_lab([r, g, b]: [f64; 3]) -> [f64; 3] {
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / D65[0]), lab_f(y / D65[1]), lab_f(z / D65[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIE 1976 L*a*b* from 8-bit sRGB (D65 white).
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    linear_to_lab(rgb.map(srgb_to_linear))
}

/// All nine channel values of an 8-bit RGB pixel in tensor order.
#[inline]
pub fn pixel_channels(p: [u8; 3]) -> [f64; NUM_CHANNELS] {
    let lut = linear_lut();
    let rgb = p.map(f64::from);
    let yuv = rgb_to_yuv(rgb);
    let lab = linear_to_lab(p.map(|c| lut[c as usize]));
    [rgb[0], rgb[1], rgb[2], yuv[0], yuv[1], yuv[2], lab[0], lab[1], lab[2]]
}

/// Three float planes of one colour space.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPlanes {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f32>; 3],
}

/// YUV and Lab planes of an RGB frame.
pub fn convert_color(frame: &Frame) -> (ColorPlanes, ColorPlanes) {
    let n = frame.width * frame.height;
    let mut yuv: [Vec<f32>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut lab: [Vec<f32>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    for p in frame.data.chunks_exact(3) {
        let c = pixel_channels([p[0], p[1], p[2]]);
        for k in 0..3 {
            yuv[k].push(c[3 + k] as f32);
            lab[k].push(c[6 + k] as f32);
        }
    }
    let wrap = |planes| ColorPlanes {
        width: frame.width,
        height: frame.height,
        planes,
    };
    (wrap(yuv), wrap(lab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub values: Vec<f64>,
    pub fps: f64,
    pub roi: usize,
    /// Index into [`CHANNELS`].
    pub channel: usize,
    /// Fraction of valid pixels behind each sample.
    pub validity: Vec<f64>,
}

impl Trace {
    pub fn new(values: Vec<f64>, fps: f64, roi: usize, channel: usize) -> Self {
        let validity = vec![1.0; values.len()];
        Trace {
            values,
            fps,
            roi,
            channel,
            validity,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn with_values(&self, values: Vec<f64>, fps: f64) -> Trace {
        let validity = if values.len() == self.validity.len() {
            self.validity.clone()
        } else {
            vec![1.0; values.len()]
        };
        Trace {
            values,
            fps,
            roi: self.roi,
            channel: self.channel,
            validity,
        }
    }
}

/// Replaces samples flagged `false` by linear interpolation between the
/// nearest usable neighbours (nearest value at the ends).
fn interpolate_gaps(values: &mut [f64], usable: &[bool]) {
    let idx: Vec<usize> = (0..values.len()).filter(|&i| usable[i]).collect();
    if idx.is_empty() {
        return;
    }
    let mut next = 0;
    for i in 0..values.len() {
        if usable[i] {
            continue;
        }
        while next < idx.len() && idx[next] < i {
            next += 1;
        }
        values[i] = match (next.checked_sub(1).map(|k| idx[k]), idx.get(next)) {
            (Some(a), Some(&b)) => {
                let t = (i - a) as f64 / (b - a) as f64;
                values[a] + t * (values[b] - values[a])
            }
            (Some(a), None) => values[a],
            (None, Some(&b)) => values[b],
            (None, None) => unreachable!(),
        };
    }
}

/// Traces for every channel and ROI, indexed `[channel][roi]`.
///
/// Each sample is the mean over the valid pixels of the ROI. Samples with
/// less than half of the ROI valid are interpolated from their neighbours;
/// an ROI needing that for more than 20% of frames is rejected.
pub fn roi_traces(frames: &[WarpedFrame], grid: &RoiGrid, fps: f64) -> Result<Vec<Vec<Trace>>> {
    let Some(first) = frames.first() else {
        return Err(Error::Length("no frames".into()));
    };
    let (w, h) = (first.frame.width, first.frame.height);
    if let Some(r) = grid.rects.iter().find(|r| !r.fits_in(w, h)) {
        return Err(Error::Size(format!("ROI {r:?} outside {w}x{h} template")));
    }
    let nf = frames.len();
    let nr = grid.len();
    let mut sums = vec![[0.0f64; NUM_CHANNELS]; nr * nf];
    let mut validity = vec![0.0f64; nr * nf];
    for (t, wf) in frames.iter().enumerate() {
        if wf.frame.width != w || wf.frame.height != h || wf.valid.len() != w * h {
            return Err(Error::Size(format!("frame {t} geometry differs from the template")));
        }
        for (ri, r) in grid.rects.iter().enumerate() {
            let mut acc = [0.0f64; NUM_CHANNELS];
            let mut count = 0usize;
            for y in r.y..r.bottom() {
                for x in r.x..r.right() {
                    if !wf.valid[y * w + x] {
                        continue;
                    }
                    let c = pixel_channels(wf.frame.pixel(x, y));
                    for k in 0..NUM_CHANNELS {
                        acc[k] += c[k];
                    }
                    count += 1;
                }
            }
            let cell = ri * nf + t;
            if count > 0 {
                sums[cell] = acc.map(|a| a / count as f64);
            }
            validity[cell] = count as f64 / r.area() as f64;
        }
    }

    let mut out: Vec<Vec<Trace>> = (0..NUM_CHANNELS).map(|_| Vec::with_capacity(nr)).collect();
    for ri in 0..nr {
        let v = &validity[ri * nf..(ri + 1) * nf];
        let usable: Vec<bool> = v.iter().map(|&f| f >= MIN_VALID_FRACTION).collect();
        let bad = usable.iter().filter(|&&u| !u).count();
        if bad as f64 > MAX_INVALID_FRAMES * nf as f64 || bad == nf {
            return Err(Error::SignalQuality(format!(
                "ROI {ri} has too few valid pixels in {bad} of {nf} frames"
            )));
        }
        for (c, per_channel) in out.iter_mut().enumerate() {
            let mut values: Vec<f64> = (0..nf).map(|t| sums[ri * nf + t][c]).collect();
            interpolate_gaps(&mut values, &usable);
            per_channel.push(Trace {
                values,
                fps,
                roi: ri,
                channel: c,
                validity: v.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Second derivatives of the natural cubic spline through uniformly spaced
/// samples (unit spacing).
fn natural_spline_moments(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on rows 1..n-1 of [1 4 1] m = 6 Δ²y.
    let k = n - 2;
    let mut cp = vec![0.0; k];
    let mut dp = vec![0.0; k];
    for i in 0..k {
        let d = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
        let denom = 4.0 - if i > 0 { cp[i - 1] } else { 0.0 };
        cp[i] = 1.0 / denom;
        dp[i] = (d - if i > 0 { dp[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..k).rev() {
        m[i + 1] = dp[i] - if i + 1 < k { cp[i] * m[i + 2] } else { 0.0 };
    }
    m
}

/// Natural cubic-spline resampling onto a uniform 30 Hz grid spanning the
/// original duration.
pub fn resample_to_30fps(trace: &Trace) -> Result<Trace> {
    if !(10.0..=120.0).contains(&trace.fps) {
        return Err(Error::Format(format!("frame rate {} outside 10–120", trace.fps)));
    }
    if trace.len() < 4 {
        return Err(Error::Length(format!("{} samples, need at least 4", trace.len())));
    }
    if trace.fps == TARGET_FPS {
        return Ok(trace.clone());
    }
    let y = &trace.values;
    let m = natural_spline_moments(y);
    let span = (y.len() - 1) as f64 / trace.fps;
    let count = (span * TARGET_FPS + 1e-9).floor() as usize + 1;
    let values = (0..count)
        .map(|j| {
            let s = (j as f64 / TARGET_FPS * trace.fps).min((y.len() - 1) as f64);
            let i = (s.floor() as usize).min(y.len() - 2);
            let t = s - i as f64;
            let u = 1.0 - t;
            u * y[i] + t * y[i + 1] + ((u * u * u - u) * m[i] + (t * t * t - t) * m[i + 1]) / 6.0
        })
        .collect();
    Ok(trace.with_values(values, TARGET_FPS))
}

/// Zero-phase band-pass of a trace sampled at `p.fs`.
pub fn bandpass(trace: &Trace, p: &BandpassParams) -> Result<Trace> {
    if (trace.fps - p.fs).abs() > 1e-9 {
        return Err(Error::Format(format!("trace at {} FPS, filter designed for {}", trace.fps, p.fs)));
    }
    Ok(trace.with_values(filter::bandpass(&trace.values, p)?, trace.fps))
}

/// `(x − min) / (max − min)`; a constant series maps to 0.5.
pub fn normalize_unit_range(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

pub fn normalize_trace(trace: &Trace) -> Trace {
    trace.with_values(normalize_unit_range(&trace.values), trace.fps)
}
