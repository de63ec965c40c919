use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use facepulse::config::PipelineConfig;
use facepulse::image::{Point, Rect};
use facepulse::ingest::{self, AnnotationSet, SequenceMeta};
use facepulse::metrics::{spectral_liveness_score, ScoreRecord};
use facepulse::pipeline;
use facepulse::signal::partition_rois;
use facepulse::synth::{self, SynthGroundTruth, SynthSpec};
use facepulse::tensor::{self, canonical_landmarks, TensorMeta, VesselWeightMap};
use serde::Serialize;

use crate::{CliError, CliResult};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const TENSOR_EXT: &str = "vmr";

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{s}` is not x,y,w,h")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
        _ => Err(format!("`{s}` is not x,y,w,h")),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("`{s}` is not WxH"))?;
    Ok((w.parse().map_err(|_| format!("bad width in `{s}`"))?, h.parse().map_err(|_| format!("bad height in `{s}`"))?))
}

// -------------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic video description (JSON).
    pub spec: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Write a raw planar `video.vmrv` instead of a PNG frame directory.
    #[arg(long)]
    pub raw: bool,
}

/// Writes `frames/` (or `video.vmrv`), `annotations.json`,
/// `ground_truth.json` and the effective `spec.json`. `--seed` replaces the
/// texture seed and derives the noise seed from it.
pub fn synth(a: &SynthArgs, _cfg: &PipelineConfig, seed: Option<u64>) -> CliResult<()> {
    let mut spec: SynthSpec = read_json(&a.spec)?;
    if let Some(s) = seed {
        spec.texture_seed = s;
        spec.noise_seed = s.wrapping_add(1);
    }
    let (seq, ann, gt) = synth::generate_sequence(&spec)?;
    create_dir(&a.out)?;
    if a.raw {
        ingest::save_raw(&seq, &a.out.join("video.vmrv"))?;
    } else {
        ingest::save_frame_dir(&seq, &a.out.join("frames"))?;
    }
    ingest::save_annotations(&ann, &seq, &a.out.join(ANNOTATIONS_FILE))?;
    write_json(&a.out.join(GROUND_TRUTH_FILE), &gt)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("wrote {} frames of {}x{} to {}", seq.len(), seq.width(), seq.height(), a.out.display());
    Ok(())
}

// -------------------------------------------------------------------- align

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Frame directory or raw planar file.
    pub sequence: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Annotation JSON (default: `annotations.json` beside the sequence).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Ground truth of a synthetic sequence; adds residuals to the report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Frame rate when the sequence has no `meta.json`.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Write template-to-frame matches under both fine-match orderings.
    #[arg(long)]
    pub match_dump: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResidualReport {
    mean: f64,
    max: f64,
}

#[derive(Serialize)]
struct AlignReport {
    frames: usize,
    template: usize,
    candidate_evaluations: usize,
    landmark_fallback_hops: usize,
    /// Mean per-pixel standard deviation of the aligned stack in the face box.
    face_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual: Option<ResidualReport>,
}

fn sibling_annotations(sequence: &Path) -> PathBuf {
    let base = sequence.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    base.join(ANNOTATIONS_FILE)
}

/// Writes `plan.json`, `aligned/`, `std_heatmap.png` and `report.json`.
pub fn align(a: &AlignArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let seq = ingest::load_sequence(&a.sequence, a.fps)?;
    let ann = match &a.annotations {
        Some(p) => ingest::load_annotations(p, &seq)?,
        None => {
            let p = sibling_annotations(&a.sequence);
            if p.exists() {
                ingest::load_annotations(&p, &seq)?
            } else {
                AnnotationSet::empty(seq.len())
            }
        }
    };
    let plan = pipeline::align(&seq, &ann, cfg)?;
    let warped = pipeline::warp_aligned(&seq, &plan, cfg)?;
    let face_box = pipeline::face_box(&seq, &ann);
    let std = pipeline::std_map(&warped)?;

    let residual = match &a.ground_truth {
        None => None,
        Some(p) => {
            let gt: SynthGroundTruth = read_json(p)?;
            let r = synth::alignment_residual(&plan.projections(), &gt.transforms, &synth::probe_grid(face_box, 10, 10))
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Some(ResidualReport { mean: r.mean, max: r.max })
        }
    };
    let report = AlignReport {
        frames: plan.frames.len(),
        template: plan.template,
        candidate_evaluations: plan.candidate_evaluations,
        landmark_fallback_hops: plan.frames.iter().filter(|e| e.landmark_fallback).count(),
        face_std: std.mean_in(face_box),
        residual,
    };

    create_dir(&a.out)?;
    write_json(&a.out.join("plan.json"), &plan)?;
    let meta = SequenceMeta {
        fps: Some(seq.fps),
        face_box: Some(face_box),
    };
    pipeline::save_aligned(&a.out.join("aligned"), &warped, &meta)?;
    ingest::save_png(&pipeline::heatmap_image(&std, cfg.heatmap_scale), &a.out.join("std_heatmap.png"))?;
    write_json(&a.out.join("report.json"), &report)?;
    if let Some(p) = &a.match_dump {
        let features = pipeline::frame_features(&seq, &ann, cfg)?;
        write_json(p, &pipeline::match_dumps(&features, cfg))?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

// ------------------------------------------------------------------ extract

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Directory of aligned frames written by `align`.
    pub aligned: PathBuf,
    /// Output directory for tensor files.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Class label stored in every tensor (1 genuine, 0 attack).
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub label: Option<u8>,
    /// Video identifier stored in every tensor.
    #[arg(long)]
    pub video_id: Option<String>,
}

pub fn extract(a: &ExtractArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let (frames, meta) = pipeline::load_aligned(&a.aligned)?;
    let first = &frames[0].frame;
    let face_box = meta.face_box.unwrap_or(Rect::new(0, 0, first.width, first.height));
    let fps = meta.fps.ok_or_else(|| CliError::Input(format!("{}: meta.json has no fps", a.aligned.display())))?;
    let weights = pipeline::load_weights(cfg)?;
    let traces = pipeline::raw_traces(&frames, face_box, fps, cfg)?;
    let tensors = pipeline::build_tensors(&traces, cfg, &weights)?;
    create_dir(&a.out)?;
    for t in &tensors {
        let m = TensorMeta::new(t.segment_start, a.label, a.video_id.clone());
        tensor::write_tensor(&a.out.join(format!("{:06}.{TENSOR_EXT}", t.segment_start)), t, &m)?;
    }
    println!("wrote {} tensors to {}", tensors.len(), a.out.display());
    Ok(())
}

// -------------------------------------------------------------------- score

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Tensor files or directories of them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// CSV destination (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Label for tensors that carry none.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub label: Option<u8>,
}

fn tensor_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == TENSOR_EXT))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("no tensor files found".into()));
    }
    Ok(out)
}

/// Video id from the tensor metadata, else the name of its directory.
fn video_id_of(path: &Path, meta: &TensorMeta) -> String {
    meta.video_id.clone().unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "video".into(), |n| n.to_string_lossy().into_owned())
    })
}

pub fn score(a: &ScoreArgs) -> CliResult<()> {
    let mut records = Vec::new();
    for f in tensor_files(&a.inputs)? {
        let (t, meta) = tensor::read_tensor(&f)?;
        let label = meta.label.or(a.label).ok_or_else(|| {
            CliError::Input(format!("{} carries no label; pass --label", f.display()))
        })?;
        records.push(ScoreRecord {
            video_id: video_id_of(&f, &meta),
            segment: meta.segment_start,
            score: spectral_liveness_score(&t),
            label,
        });
    }
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &records {
        w.serialize(r).map_err(|e| CliError::Pipeline(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Pipeline(e.to_string()))?;
    Ok(())
}

// ------------------------------------------------------------------ weights

#[derive(Args, Debug)]
pub struct WeightsArgs {
    /// Destination JSON.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Vessel-density mask (8-bit gray, dense where ≥ 128); omit to export
    /// the bundled map.
    #[arg(long, requires_all = ["mask_landmarks", "face_box"])]
    pub mask: Option<PathBuf>,
    /// Five mask landmarks as JSON `[[x, y], …]`.
    #[arg(long)]
    pub mask_landmarks: Option<PathBuf>,
    /// Five template face landmarks (default: canonical positions in the box).
    #[arg(long)]
    pub face_landmarks: Option<PathBuf>,
    /// Template face box `x,y,w,h`.
    #[arg(long, value_parser = parse_rect)]
    pub face_box: Option<Rect>,
    /// Template size `WxH` (default: face box extent).
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

pub fn weights(a: &WeightsArgs) -> CliResult<()> {
    let map = match (&a.mask, &a.mask_landmarks, a.face_box) {
        (Some(mask), Some(lm), Some(fb)) => {
            let img = ingest::load_gray(mask)?;
            let mask_lms: Vec<Point> = read_json(lm)?;
            let face_lms: Vec<Point> = match &a.face_landmarks {
                Some(p) => read_json(p)?,
                None => canonical_landmarks(fb.w as f64, fb.h as f64)
                    .iter()
                    .map(|p| Point::new(p.x + fb.x as f64, p.y + fb.y as f64))
                    .collect(),
            };
            let size = a.size.unwrap_or((fb.right(), fb.bottom()));
            if !fb.fits_in(size.0, size.1) {
                return Err(CliError::Input(format!("face box {fb:?} outside {}x{} template", size.0, size.1)));
            }
            let grid = partition_rois(fb)?;
            tensor::vessel_weights_from_mask(&img, &mask_lms, &face_lms, &grid, size)?
        }
        _ => VesselWeightMap::bundled(),
    };
    write_json(&a.out, &map)?;
    println!("wrote {:?} weights to {}", map.source, a.out.display());
    Ok(())
}
