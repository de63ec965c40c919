//! Vessel-weighted spatial-temporal representation (STR): a `[24, 120, 18]`
//! tensor of ROI traces per segment, and its `VMR1` file format.
//!
//! Depth order is the nine filtered channels `R G B Y U V L a b` followed by
//! their unit-range normalized twins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::{fit_affine, warp_gray};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Point, Rect};
use crate::signal::{normalize_unit_range, partition_rois, RoiGrid, CHANNELS, NUM_CHANNELS};

pub const ROWS: usize = 24;
pub const SEGMENT_LEN: usize = 120;
pub const SEGMENT_STRIDE: usize = 3;
pub const DEPTH: usize = 2 * NUM_CHANNELS;
pub const TENSOR_MAGIC: &[u8; 4] = b"VMR1";
/// Mask pixels at or above this level count as dense vasculature.
pub const MASK_THRESHOLD: f32 = 128.0;

/// Traces indexed `[channel][roi][sample]`.
pub type ChannelTraces = Vec<Vec<Vec<f64>>>;

pub fn channel_order() -> Vec<String> {
    CHANNELS
        .iter()
        .map(|c| c.to_string())
        .chain(CHANNELS.iter().map(|c| format!("{c}_norm")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    BundledDefault,
    MaskImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselWeightMap {
    #[serde(default)]
    pub source: WeightSource,
    /// One weight per ROI, shared by all channels.
    pub weights: Vec<f64>,
    /// Optional `[channel][roi]` override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_channel: Option<Vec<Vec<f64>>>,
}

const BUNDLED_WEIGHTS: &str = include_str!("../data/default_vessel_weights.json");

impl VesselWeightMap {
    pub fn uniform() -> Self {
        VesselWeightMap {
            source: WeightSource::BundledDefault,
            weights: vec![1.0; ROWS],
            per_channel: None,
        }
    }

    pub fn bundled() -> Self {
        let w: VesselWeightMap = serde_json::from_str(BUNDLED_WEIGHTS).expect("bundled weight map parses");
        w.validate().expect("bundled weight map valid");
        w
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: VesselWeightMap = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    #[inline]
    pub fn weight(&self, channel: usize, roi: usize) -> f64 {
        match &self.per_channel {
            Some(pc) => pc[channel][roi],
            None => self.weights[roi],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |w: &[f64]| -> Result<()> {
            if w.len() != ROWS {
                return Err(Error::Format(format!("{} weights, expected {ROWS}", w.len())));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Format("weights must be finite and non-negative".into()));
            }
            let mean = w.iter().sum::<f64>() / ROWS as f64;
            if (mean - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("weight mean {mean}, expected 1")));
            }
            Ok(())
        };
        check(&self.weights)?;
        if let Some(pc) = &self.per_channel {
            if pc.len() != NUM_CHANNELS {
                return Err(Error::Format(format!("{} per-channel rows, expected {NUM_CHANNELS}", pc.len())));
            }
            pc.iter().try_for_each(|w| check(w))?;
        }
        Ok(())
    }
}

/// Counts dense mask pixels per ROI after mapping the mask onto the template
/// through the landmark fit, normalized to mean 1.
pub fn vessel_weights_from_mask(
    mask: &GrayImage,
    mask_landmarks: &[Point],
    face_landmarks: &[Point],
    grid: &RoiGrid,
    template_size: (usize, usize),
) -> Result<VesselWeightMap> {
    if mask_landmarks.len() != face_landmarks.len() {
        return Err(Error::Annotation("mask and face landmark counts differ".into()));
    }
    let pairs: Vec<(Point, Point)> = mask_landmarks.iter().copied().zip(face_landmarks.iter().copied()).collect();
    let t = fit_affine(&pairs)?;
    let warped = warp_gray(mask, &t, template_size, 0.0)?;
    let counts: Vec<f64> = grid
        .rects
        .iter()
        .map(|r| {
            let mut n = 0usize;
            for y in r.y..r.bottom().min(warped.height) {
                for x in r.x..r.right().min(warped.width) {
                    n += usize::from(warped.get(x, y) >= MASK_THRESHOLD);
                }
            }
            n as f64
        })
        .collect();
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(Error::Format("vessel mask has no dense pixels inside the face box".into()));
    }
    let n = counts.len() as f64;
    Ok(VesselWeightMap {
        source: WeightSource::MaskImage,
        weights: counts.iter().map(|c| c * n / total).collect(),
        per_channel: None,
    })
}

/// Canonical five landmarks (eye centres, nose tip, mouth corners) of a
/// `w × h` face box at the origin.
pub fn canonical_landmarks(w: f64, h: f64) -> [Point; 5] {
    [
        Point::new(0.30 * w, 0.38 * h),
        Point::new(0.70 * w, 0.38 * h),
        Point::new(0.50 * w, 0.60 * h),
        Point::new(0.35 * w, 0.80 * h),
        Point::new(0.65 * w, 0.80 * h),
    ]
}

/// Synthetic vessel-density mask: sparse forehead, moderate nose and eye
/// band, dense cheeks and mandible. Density is rendered as an ordered dither
/// of 0/255 pixels.
pub fn synthetic_vessel_mask(w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        let side = (u - 0.5).abs();
        let density = if v < 0.25 {
            0.15
        } else if v >= 0.75 {
            0.80
        } else if side > 0.2 {
            if v >= 0.5 { 0.90 } else { 0.60 }
        } else if v >= 0.5 {
            0.50
        } else {
            0.30
        };
        let dither = ((x * 37 + y * 91) % 100) as f64 / 100.0;
        if dither < density { 255.0 } else { 0.0 }
    })
}

/// Weights derived from [`synthetic_vessel_mask`] over a 120 × 80 face box.
pub fn default_weights_from_synthetic_mask() -> Result<VesselWeightMap> {
    let (w, h) = (120, 80);
    let mask = synthetic_vessel_mask(w, h);
    let lms = canonical_landmarks(w as f64, h as f64);
    let grid = partition_rois(Rect::new(0, 0, w, h))?;
    let mut map = vessel_weights_from_mask(&mask, &lms, &lms, &grid, (w, h))?;
    map.source = WeightSource::BundledDefault;
    Ok(map)
}

/// Scales row `i` of every channel by `w^c_i`.
pub fn apply_vascular_weights(traces: &ChannelTraces, w: &VesselWeightMap) -> ChannelTraces {
    traces
        .iter()
        .enumerate()
        .map(|(c, rows)| {
            rows.iter()
                .enumerate()
                .map(|(i, t)| {
                    let k = w.weight(c, i);
                    t.iter().map(|v| v * k).collect()
                })
                .collect()
        })
        .collect()
}

/// Segment starts `0, 3, 6, …` with every segment inside `total` frames.
pub fn segment_video(total: usize) -> Result<Vec<usize>> {
    segment_starts(total, SEGMENT_LEN, SEGMENT_STRIDE)
}

pub fn segment_starts(total: usize, len: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || len == 0 {
        return Err(Error::Config("segment length and stride must be positive".into()));
    }
    if total < len {
        return Err(Error::Segment(format!("{total} frames, a segment needs {len}")));
    }
    Ok((0..=total - len).step_by(stride).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrTensor {
    /// Row-major `[roi][time][channel]`.
    pub data: Vec<f32>,
    pub segment_start: usize,
}

impl StrTensor {
    pub const SHAPE: [usize; 3] = [ROWS, SEGMENT_LEN, DEPTH];

    pub fn zeros(segment_start: usize) -> Self {
        StrTensor {
            data: vec![0.0; ROWS * SEGMENT_LEN * DEPTH],
            segment_start,
        }
    }

    #[inline]
    pub fn offset(roi: usize, t: usize, c: usize) -> usize {
        (roi * SEGMENT_LEN + t) * DEPTH + c
    }

    #[inline]
    pub fn get(&self, roi: usize, t: usize, c: usize) -> f32 {
        self.data[Self::offset(roi, t, c)]
    }

    /// Time series of one ROI row in one depth channel.
    pub fn row(&self, roi: usize, c: usize) -> Vec<f64> {
        (0..SEGMENT_LEN).map(|t| self.get(roi, t, c) as f64).collect()
    }
}

/// Builds the tensor for the segment starting at `start`. `filtered` holds
/// the weighted filtered traces; the twins are the per-ROI unit-range
/// normalization of the same window of `twin_source`.
pub fn assemble_str(filtered: &ChannelTraces, twin_source: &ChannelTraces, start: usize) -> Result<StrTensor> {
    for (name, bank) in [("filtered", filtered), ("twin", twin_source)] {
        if bank.len() != NUM_CHANNELS || bank.iter().any(|rows| rows.len() != ROWS) {
            return Err(Error::Format(format!("{name} traces must be {NUM_CHANNELS} channels × {ROWS} ROIs")));
        }
        if let Some(short) = bank.iter().flatten().map(Vec::len).find(|&n| n < start + SEGMENT_LEN) {
            return Err(Error::Segment(format!(
                "trace of {short} samples cannot hold a segment at {start}"
            )));
        }
    }
    let mut t = StrTensor::zeros(start);
    for c in 0..NUM_CHANNELS {
        for i in 0..ROWS {
            let window = &filtered[c][i][start..start + SEGMENT_LEN];
            let twin = normalize_unit_range(&twin_source[c][i][start..start + SEGMENT_LEN]);
            for j in 0..SEGMENT_LEN {
                t.data[StrTensor::offset(i, j, c)] = window[j] as f32;
                t.data[StrTensor::offset(i, j, NUM_CHANNELS + c)] = twin[j] as f32;
            }
        }
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value in segment at {start}")));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub fps: f64,
    pub segment_start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub channel_order: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
}

impl TensorMeta {
    pub fn new(segment_start: usize, label: Option<u8>, video_id: Option<String>) -> Self {
        TensorMeta {
            fps: 30.0,
            segment_start,
            label,
            channel_order: channel_order(),
            video_id,
        }
    }
}

pub fn encode_tensor(t: &StrTensor, meta: &TensorMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(4 + 1 + 12 + t.data.len() * 4 + 4 + json.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(3);
    for d in StrTensor::SHAPE {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(StrTensor, TensorMeta)> {
    let fail = |m: &str| Error::Format(format!("VMR1: {m}"));
    if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
        return Err(fail("bad magic"));
    }
    let rank = bytes[4] as usize;
    let mut at = 5;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| fail("truncated"))?;
        at += n;
        Ok(s)
    };
    let dims: Vec<usize> = (0..rank)
        .map(|_| take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize))
        .collect::<Result<_>>()?;
    if dims != StrTensor::SHAPE {
        return Err(fail(&format!("shape {dims:?}, expected {:?}", StrTensor::SHAPE)));
    }
    let n: usize = dims.iter().product();
    let data: Vec<f32> = take(4 * n)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let meta: TensorMeta = serde_json::from_slice(take(len)?).map_err(|e| fail(&e.to_string()))?;
    if at != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok((
        StrTensor {
            data,
            segment_start: meta.segment_start,
        },
        meta,
    ))
}

pub fn write_tensor(path: &Path, t: &StrTensor, meta: &TensorMeta) -> Result<()> {
    fs::write(path, encode_tensor(t, meta)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(StrTensor, TensorMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
