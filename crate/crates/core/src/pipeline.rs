//! End-to-end driver: features, stitching, warping, traces and tensors.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::affine::{warp_frame_with, WarpedFrame};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::detect_keypoints;
use crate::image::{Frame, Point, Rect};
use crate::ingest::{equalize_histogram, AnnotationSet, FrameSequence, SequenceMeta, META_FILE};
use crate::matching::{fine_match, fine_match_by_distance, initial_match, MatchPair, MatchStats};
use crate::signal::{self, partition_grid, NUM_CHANNELS, TARGET_FPS};
use crate::stitch::{align_features, select_template, AlignmentPlan, FrameFeatures};
use crate::tensor::{apply_vascular_weights, assemble_str, segment_starts, ChannelTraces, StrTensor, VesselWeightMap};

/// Face box in template coordinates: the annotation box wins over the
/// sequence box.
pub fn face_box(seq: &FrameSequence, ann: &AnnotationSet) -> Rect {
    ann.face_box.unwrap_or(seq.face_box)
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    Point::new(sx / n, sy / n)
}

/// Keypoints and landmarks per frame. Annotated keypoints are used as given;
/// other frames run the detector unless it is disabled.
pub fn frame_features(seq: &FrameSequence, ann: &AnnotationSet, cfg: &PipelineConfig) -> Result<Vec<FrameFeatures>> {
    if ann.landmarks.len() != seq.len() || ann.keypoints.len() != seq.len() {
        return Err(Error::Annotation(format!(
            "annotations cover {} frames, sequence has {}",
            ann.landmarks.len(),
            seq.len()
        )));
    }
    let fb = face_box(seq, ann);
    let t = select_template(seq.len(), cfg.template);
    let anchor = ann.landmarks[t].as_deref().map(centroid);
    (0..seq.len())
        .into_par_iter()
        .map(|k| {
            let landmarks = ann.landmarks[k].clone();
            if let Some(kps) = &ann.keypoints[k] {
                return Ok(FrameFeatures {
                    keypoints: kps.clone(),
                    landmarks,
                });
            }
            if !cfg.use_detector {
                return Err(Error::InsufficientCorrespondence(format!(
                    "frame {} has no keypoints and the detector is disabled",
                    seq.frames[k].index
                )));
            }
            let frame = if cfg.equalize {
                equalize_histogram(&seq.frames[k])
            } else {
                seq.frames[k].clone()
            };
            let mut keypoints = detect_keypoints(&frame.gray(), &cfg.detector)?;
            if cfg.keypoints_in_face_box {
                // follow the face by the landmark centroid when both are known
                let shift = match (anchor, landmarks.as_deref()) {
                    (Some(a), Some(l)) => {
                        let c = centroid(l);
                        Point::new(c.x - a.x, c.y - a.y)
                    }
                    _ => Point::new(0.0, 0.0),
                };
                let (x0, y0) = (fb.x as f64 + shift.x, fb.y as f64 + shift.y);
                keypoints.retain(|kp| {
                    let p = kp.position;
                    p.x >= x0 && p.y >= y0 && p.x < x0 + fb.w as f64 && p.y < y0 + fb.h as f64
                });
            }
            Ok(FrameFeatures { keypoints, landmarks })
        })
        .collect()
}

pub fn align(seq: &FrameSequence, ann: &AnnotationSet, cfg: &PipelineConfig) -> Result<AlignmentPlan> {
    cfg.validate()?;
    let features = frame_features(seq, ann, cfg)?;
    align_features(&features, cfg.template, cfg.align_mode, &cfg.stitch_params())
}

/// Template-to-frame matches under both fine-match orderings.
#[derive(Debug, Clone, Serialize)]
pub struct MatchDump {
    pub frame: usize,
    pub initial: Vec<MatchPair>,
    pub stats: Option<MatchStats>,
    /// Kept by the Gaussian joint score.
    pub fine: Vec<MatchPair>,
    /// Kept by smallest fused distance.
    pub by_distance: Vec<MatchPair>,
    /// Pairs present in both selections.
    pub overlap: usize,
}

/// Matches every frame against the template, for inspecting fine matching.
pub fn match_dumps(features: &[FrameFeatures], cfg: &PipelineConfig) -> Vec<MatchDump> {
    let t = select_template(features.len(), cfg.template);
    let m = &cfg.matching;
    (0..features.len())
        .into_par_iter()
        .filter(|&k| k != t)
        .map(|k| {
            let initial = initial_match(&features[t].keypoints, &features[k].keypoints, m.delta);
            let (fine, stats) = fine_match(&initial, m.lambda, m.alpha);
            let by_distance = fine_match_by_distance(&initial, m.alpha);
            let overlap = fine
                .iter()
                .filter(|a| by_distance.iter().any(|b| a.ref_index == b.ref_index && a.query_index == b.query_index))
                .count();
            MatchDump {
                frame: k,
                initial,
                stats,
                fine,
                by_distance,
                overlap,
            }
        })
        .collect()
}

/// Every frame warped into template geometry by its plan projection.
pub fn warp_aligned(seq: &FrameSequence, plan: &AlignmentPlan, cfg: &PipelineConfig) -> Result<Vec<WarpedFrame>> {
    if plan.frames.len() != seq.len() {
        return Err(Error::Length(format!("plan covers {} frames, sequence has {}", plan.frames.len(), seq.len())));
    }
    let size = (seq.width(), seq.height());
    seq.frames
        .par_iter()
        .zip(&plan.frames)
        .map(|(f, e)| warp_frame_with(f, &e.projection, size, cfg.interpolation))
        .collect()
}

/// Per-pixel standard deviation of gray intensity across an aligned stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StdMap {
    pub width: usize,
    pub height: usize,
    /// NaN where fewer than two frames were valid.
    pub values: Vec<f64>,
}

impl StdMap {
    /// Mean over the defined pixels of `rect`.
    pub fn mean_in(&self, rect: Rect) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for y in rect.y..rect.bottom().min(self.height) {
            for x in rect.x..rect.right().min(self.width) {
                let v = self.values[y * self.width + x];
                if v.is_finite() {
                    s += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }
}

pub fn std_map(frames: &[WarpedFrame]) -> Result<StdMap> {
    let Some(first) = frames.first() else {
        return Err(Error::Length("no frames".into()));
    };
    let (w, h) = (first.frame.width, first.frame.height);
    let values = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
            for f in frames {
                if !f.valid[i] {
                    continue;
                }
                let p = &f.frame.data[3 * i..3 * i + 3];
                let v = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                n += 1;
                let d = v - mean;
                mean += d / n as f64;
                m2 += d * (v - mean);
            }
            if n < 2 {
                f64::NAN
            } else {
                (m2 / (n - 1) as f64).sqrt()
            }
        })
        .collect();
    Ok(StdMap { width: w, height: h, values })
}

/// Colour heatmap with `scale` at the top of a blue → red ramp; undefined
/// pixels are black.
pub fn heatmap_image(map: &StdMap, scale: f64) -> Frame {
    let mut data = Vec::with_capacity(map.values.len() * 3);
    for &v in &map.values {
        if !v.is_finite() {
            data.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let t = (v / scale).clamp(0.0, 1.0);
        let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        data.extend_from_slice(&[ch(3.0), ch(2.0), ch(1.0)]);
    }
    Frame::new(map.width, map.height, data, 0).expect("buffer sized for map")
}

/// Mean-pooled ROI traces of every channel, resampled to 30 FPS, indexed
/// `[channel][roi][t]`.
pub fn raw_traces(frames: &[WarpedFrame], face_box: Rect, fps: f64, cfg: &PipelineConfig) -> Result<ChannelTraces> {
    let grid = partition_grid(face_box, cfg.grid_rows, cfg.grid_cols)?;
    let traces = signal::roi_traces(frames, &grid, fps)?;
    traces
        .iter()
        .map(|rows| rows.iter().map(|t| Ok(signal::resample_to_30fps(t)?.values)).collect())
        .collect()
}

/// Band-passed copy of every trace.
pub fn filter_traces(raw: &ChannelTraces, cfg: &PipelineConfig) -> Result<ChannelTraces> {
    let band = crate::filter::BandpassParams { fs: TARGET_FPS, ..cfg.band };
    raw.par_iter()
        .map(|rows| rows.iter().map(|t| crate::filter::bandpass(t, &band)).collect())
        .collect()
}

pub fn load_weights(cfg: &PipelineConfig) -> Result<VesselWeightMap> {
    match &cfg.weight_map {
        None => Ok(VesselWeightMap::bundled()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            VesselWeightMap::from_json(&text)
        }
    }
}

/// One tensor per segment of the 30 FPS traces.
pub fn build_tensors(raw: &ChannelTraces, cfg: &PipelineConfig, weights: &VesselWeightMap) -> Result<Vec<StrTensor>> {
    if raw.len() != NUM_CHANNELS {
        return Err(Error::Format(format!("{} channels, expected {NUM_CHANNELS}", raw.len())));
    }
    let len = raw.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let starts = segment_starts(len, cfg.segment_len, cfg.segment_stride)?;
    let weighted = apply_vascular_weights(&filter_traces(raw, cfg)?, weights);
    let twins = if cfg.normalize_before_filter { raw } else { &weighted };
    starts.par_iter().map(|&s| assemble_str(&weighted, twins, s)).collect()
}

/// Mean over ROIs of one channel of `traces`.
pub fn mean_channel_trace(traces: &ChannelTraces, channel: usize) -> Vec<f64> {
    let rows = &traces[channel];
    let n = rows.first().map_or(0, Vec::len);
    (0..n).map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / rows.len() as f64).collect()
}

/// Alignment, warping and tensor export for one sequence.
pub struct PipelineOutput {
    pub plan: AlignmentPlan,
    pub warped: Vec<WarpedFrame>,
    pub traces: ChannelTraces,
    pub tensors: Vec<StrTensor>,
}

pub fn run(seq: &FrameSequence, ann: &AnnotationSet, cfg: &PipelineConfig, weights: &VesselWeightMap) -> Result<PipelineOutput> {
    let plan = align(seq, ann, cfg)?;
    let warped = warp_aligned(seq, &plan, cfg)?;
    let traces = raw_traces(&warped, face_box(seq, ann), seq.fps, cfg)?;
    let tensors = build_tensors(&traces, cfg, weights)?;
    Ok(PipelineOutput {
        plan,
        warped,
        traces,
        tensors,
    })
}

/// Writes aligned frames as RGBA PNGs (alpha 0 marks pixels from outside the
/// source frame) plus `meta.json` holding fps and the template face box.
pub fn save_aligned(dir: &Path, frames: &[WarpedFrame], meta: &SequenceMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, wf) in frames.iter().enumerate() {
        let mut rgba = Vec::with_capacity(wf.valid.len() * 4);
        for (i, &v) in wf.valid.iter().enumerate() {
            rgba.extend_from_slice(&wf.frame.data[3 * i..3 * i + 3]);
            rgba.push(if v { 255 } else { 0 });
        }
        let path = dir.join(format!("{k:06}.png"));
        ::image::RgbaImage::from_raw(wf.frame.width as u32, wf.frame.height as u32, rgba)
            .expect("buffer sized for frame")
            .save(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_aligned`].
pub fn load_aligned(dir: &Path) -> Result<(Vec<WarpedFrame>, SequenceMeta)> {
    let meta_path = dir.join(META_FILE);
    let meta: SequenceMeta = match fs::read_to_string(&meta_path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?,
        Err(e) => return Err(Error::io(meta_path, e)),
    };
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("{}: no aligned frames", dir.display())));
    }
    let frames = names
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let img = ::image::open(p)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
                .to_rgba8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = Vec::with_capacity(w * h * 3);
            let mut valid = Vec::with_capacity(w * h);
            for px in img.pixels() {
                data.extend_from_slice(&px.0[..3]);
                valid.push(px.0[3] >= 128);
            }
            Ok(WarpedFrame {
                frame: Frame::new(w, h, data, k)?,
                valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.iter().any(|f| f.frame.width != frames[0].frame.width || f.frame.height != frames[0].frame.height) {
        return Err(Error::Format("aligned frames differ in size".into()));
    }
    Ok((frames, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineTransform;
    use crate::stitch::AlignMode;
    use crate::synth::{generate_sequence, SynthSpec};
    use crate::tensor::{segment_video, ROWS, SEGMENT_LEN};

    fn spec(duration: f64) -> SynthSpec {
        SynthSpec {
            duration,
            ..Default::default()
        }
    }

    #[test]
    fn static_sequence_gives_identity_plan() {
        let (seq, ann, _) = generate_sequence(&SynthSpec {
            pulse_amplitude: 0.0,
            ..spec(0.3)
        })
        .unwrap();
        let plan = align(&seq, &ann, &PipelineConfig::default()).unwrap();
        for e in &plan.frames {
            assert!(e.projection.max_abs_diff(&AffineTransform::identity()) < 1e-9, "{:?}", e.projection);
        }
        // the pulse only nudges sub-pixel keypoint positions
        let (seq, ann, gt) = generate_sequence(&spec(0.3)).unwrap();
        let plan = align(&seq, &ann, &PipelineConfig::default()).unwrap();
        let probes = crate::synth::probe_grid(seq.face_box, 8, 8);
        let r = crate::synth::alignment_residual(&plan.projections(), &gt.transforms, &probes).unwrap();
        assert!(r.max < 0.05, "{r:?}");
    }

    #[test]
    fn detector_disabled_without_keypoints_fails() {
        let (seq, ann, _) = generate_sequence(&spec(0.2)).unwrap();
        let cfg = PipelineConfig {
            use_detector: false,
            ..Default::default()
        };
        assert!(matches!(align(&seq, &ann, &cfg), Err(Error::InsufficientCorrespondence(_))));
    }

    #[test]
    fn landmark_only_plan_on_clean_landmarks_matches_truth() {
        let s = SynthSpec {
            jitter_sigma: 0.5,
            ..spec(0.3)
        };
        let (seq, ann, gt) = generate_sequence(&s).unwrap();
        let cfg = PipelineConfig {
            align_mode: AlignMode::LandmarkOnly,
            ..Default::default()
        };
        let plan = align(&seq, &ann, &cfg).unwrap();
        for (e, t) in plan.frames.iter().zip(&gt.transforms) {
            assert!(e.projection.max_abs_diff(t) < 1e-6);
        }
    }

    #[test]
    fn std_map_of_identical_frames_is_zero() {
        let (seq, ann, _) = generate_sequence(&SynthSpec {
            pulse_amplitude: 0.0,
            ..spec(0.2)
        })
        .unwrap();
        let cfg = PipelineConfig::default();
        let plan = align(&seq, &ann, &cfg).unwrap();
        let m = std_map(&warp_aligned(&seq, &plan, &cfg).unwrap()).unwrap();
        assert!(m.mean_in(face_box(&seq, &ann)) < 1e-9);
        let img = heatmap_image(&m, 5.0);
        assert_eq!(img.pixel(72, 72), [0, 0, 128]);
    }

    #[test]
    fn tensors_cover_every_segment() {
        let (seq, ann, _) = generate_sequence(&spec(4.2)).unwrap();
        let out = run(&seq, &ann, &PipelineConfig::default(), &VesselWeightMap::bundled()).unwrap();
        assert_eq!(out.tensors.len(), segment_video(126).unwrap().len());
        for (t, s) in out.tensors.iter().zip([0, 3, 6]) {
            assert_eq!(t.segment_start, s);
            assert_eq!(t.data.len(), ROWS * SEGMENT_LEN * 18);
        }
    }

    #[test]
    fn aligned_frames_round_trip() {
        let (seq, ann, _) = generate_sequence(&SynthSpec {
            jitter_sigma: 1.0,
            ..spec(0.2)
        })
        .unwrap();
        let cfg = PipelineConfig::default();
        let plan = align(&seq, &ann, &cfg).unwrap();
        let warped = warp_aligned(&seq, &plan, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_aligned(dir.path(), &warped, &seq.meta()).unwrap();
        let (back, meta) = load_aligned(dir.path()).unwrap();
        assert_eq!(meta, seq.meta());
        for (a, b) in warped.iter().zip(&back) {
            assert_eq!(a.frame.data, b.frame.data);
            assert_eq!(a.valid, b.valid);
        }
    }
}
