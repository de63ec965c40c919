//! Frame sequences, annotation files and contrast preprocessing.
//!
//! A sequence is either a directory of `%06d.png` / `%06d.ppm` frames or a
//! raw planar `VMRV` file; both take frame rate and face box from a
//! `meta.json` in the same directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Descriptor, Keypoint};
use crate::image::{Frame, GrayImage, Point, Rect};

pub const RAW_MAGIC: &[u8; 4] = b"VMRV";
pub const META_FILE: &str = "meta.json";
/// Scale assigned to annotated keypoints that do not carry one.
pub const DEFAULT_KEYPOINT_SCALE: f64 = 1.6;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub face_box: Rect,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, fps: f64, face_box: Option<Rect>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Format("sequence has no frames".into()));
        };
        let (w, h) = (first.width, first.height);
        if let Some(f) = frames.iter().find(|f| f.width != w || f.height != h) {
            return Err(Error::Format(format!(
                "frame {} is {}x{}, expected {w}x{h}",
                f.index, f.width, f.height
            )));
        }
        if !(10.0..=120.0).contains(&fps) {
            return Err(Error::Format(format!("frame rate {fps} outside 10–120")));
        }
        let face_box = face_box.unwrap_or(Rect::new(0, 0, w, h));
        if face_box.area() == 0 || !face_box.fits_in(w, h) {
            return Err(Error::Format(format!("face box {face_box:?} outside {w}x{h} frames")));
        }
        Ok(FrameSequence { frames, fps, face_box })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Position of the frame with ordinal `index`.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        let base = self.frames[0].index;
        let pos = index.checked_sub(base)?;
        (pos < self.frames.len() && self.frames[pos].index == index).then_some(pos)
    }

    pub fn meta(&self) -> SequenceMeta {
        SequenceMeta {
            fps: Some(self.fps),
            face_box: Some(self.face_box),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<Rect>,
}

fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join(META_FILE);
    match fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(SequenceMeta::default()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_meta(dir: &Path, meta: &SequenceMeta) -> Result<()> {
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(path, e))
}

/// Loads a frame directory or a raw planar file.
pub fn load_sequence(path: &Path, fps_override: Option<f64>) -> Result<FrameSequence> {
    let (frames, meta_dir) = if path.is_dir() {
        (load_frame_dir(path)?, path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        (read_raw_frames(path)?, dir)
    };
    let meta = read_meta(&meta_dir)?;
    let fps = fps_override
        .or(meta.fps)
        .ok_or_else(|| Error::Format(format!("no frame rate in {} and none given", meta_dir.join(META_FILE).display())))?;
    FrameSequence::new(frames, fps, meta.face_box)
}

fn frame_number(name: &str) -> Option<usize> {
    let (stem, ext) = name.split_once('.')?;
    if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    matches!(ext.to_ascii_lowercase().as_str(), "png" | "ppm").then(|| stem.parse().ok())?
}

fn load_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut files: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(frame_number) {
            if files.insert(n, entry.path()).is_some() {
                return Err(Error::Format(format!("frame {n} present in more than one format")));
            }
        }
    }
    let Some(&first) = files.keys().next() else {
        return Err(Error::Format(format!("no %06d.png/ppm frames in {}", dir.display())));
    };
    if let Some(gap) = files.keys().zip(first..).find(|(k, expect)| **k != *expect).map(|(_, e)| e) {
        return Err(Error::SequenceGap(gap));
    }
    files
        .into_iter()
        .map(|(index, path)| {
            let img = ::image::open(&path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
                .to_rgb8();
            Frame::new(img.width() as usize, img.height() as usize, img.into_raw(), index)
        })
        .collect()
}

/// Writes every frame as `%06d.png` plus `meta.json`.
pub fn save_frame_dir(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in &seq.frames {
        save_png(f, &dir.join(format!("{:06}.png", f.index)))?;
    }
    write_meta(dir, &seq.meta())
}

/// Loads any supported image as 8-bit gray levels.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = ::image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let w = img.width() as usize;
    Ok(GrayImage::from_fn(w, img.height() as usize, |x, y| img.as_raw()[y * w + x] as f32))
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let img = ::image::RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.data.clone())
        .ok_or_else(|| Error::Format("frame buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_raw_frames(path: &Path) -> Result<Vec<Frame>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format(format!("{}: not a VMRV file", path.display())));
    }
    let (w, h, n) = (
        read_u32(&bytes, 4) as usize,
        read_u32(&bytes, 8) as usize,
        read_u32(&bytes, 12) as usize,
    );
    let plane = w * h;
    let expected = plane
        .checked_mul(3)
        .and_then(|s| s.checked_mul(n))
        .and_then(|s| s.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "{}: {} bytes for {n} frames of {w}x{h}",
            path.display(),
            bytes.len()
        )));
    }
    (0..n)
        .map(|k| {
            let base = 16 + k * 3 * plane;
            let (r, rest) = bytes[base..base + 3 * plane].split_at(plane);
            let (g, b) = rest.split_at(plane);
            let mut data = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                data.extend_from_slice(&[r[i], g[i], b[i]]);
            }
            Frame::new(w, h, data, k)
        })
        .collect()
}

/// Writes a raw planar file and a `meta.json` next to it.
pub fn save_raw(seq: &FrameSequence, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (w, h) = (seq.width(), seq.height());
    let mut write = |b: &[u8]| out.write_all(b).map_err(|e| Error::io(path, e));
    write(RAW_MAGIC)?;
    for v in [w, h, seq.len()] {
        let v = u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        write(&v.to_le_bytes())?;
    }
    let mut plane = vec![0u8; w * h];
    for f in &seq.frames {
        for c in 0..3 {
            for (dst, px) in plane.iter_mut().zip(f.data.chunks_exact(3)) {
                *dst = px[c];
            }
            write(&plane)?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_meta(dir, &seq.meta())
}

/// One keypoint as stored in annotation JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub p: Point,
    pub d: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<KeypointRecord>>,
}

/// Annotation JSON document, keyed by frame ordinal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<Rect>,
    pub frames: BTreeMap<String, FrameAnnotation>,
}

/// Validated annotations, indexed by sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub landmarks: Vec<Option<Vec<Point>>>,
    pub keypoints: Vec<Option<Vec<Keypoint>>>,
    /// Landmark count shared by every annotated frame.
    pub n: Option<usize>,
    pub face_box: Option<Rect>,
}

impl AnnotationSet {
    pub fn empty(len: usize) -> Self {
        AnnotationSet {
            landmarks: vec![None; len],
            keypoints: vec![None; len],
            n: None,
            face_box: None,
        }
    }

    pub fn to_file(&self, seq: &FrameSequence) -> AnnotationFile {
        let mut frames = BTreeMap::new();
        for (pos, f) in seq.frames.iter().enumerate() {
            let landmarks = self.landmarks[pos].clone();
            let keypoints = self.keypoints[pos].as_ref().map(|kps| {
                kps.iter()
                    .map(|k| KeypointRecord {
                        p: k.position,
                        d: k.descriptor.0.to_vec(),
                        s: Some(k.scale),
                    })
                    .collect()
            });
            if landmarks.is_some() || keypoints.is_some() {
                frames.insert(f.index.to_string(), FrameAnnotation { landmarks, keypoints });
            }
        }
        AnnotationFile {
            face_box: self.face_box,
            frames,
        }
    }
}

fn in_bounds(p: Point, w: usize, h: usize) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
}

/// Validates a parsed annotation document against `seq`.
pub fn parse_annotations(file: AnnotationFile, seq: &FrameSequence) -> Result<AnnotationSet> {
    let (w, h) = (seq.width(), seq.height());
    let mut set = AnnotationSet::empty(seq.len());
    set.face_box = file.face_box;
    if let Some(b) = file.face_box {
        if b.area() == 0 || !b.fits_in(w, h) {
            return Err(Error::Annotation(format!("face box {b:?} outside {w}x{h} frames")));
        }
    }
    for (key, ann) in file.frames {
        let index: usize = key
            .parse()
            .map_err(|_| Error::Annotation(format!("frame key {key:?} is not an index")))?;
        let pos = seq
            .position_of(index)
            .ok_or_else(|| Error::Annotation(format!("frame {index} not in sequence")))?;
        if let Some(lms) = ann.landmarks {
            if let Some(p) = lms.iter().find(|&&p| !in_bounds(p, w, h)) {
                return Err(Error::Annotation(format!("frame {index}: landmark {:?} outside frame", [p.x, p.y])));
            }
            match set.n {
                Some(n) if n != lms.len() => {
                    return Err(Error::Annotation(format!(
                        "frame {index}: {} landmarks, other frames have {n}",
                        lms.len()
                    )))
                }
                _ => set.n = Some(lms.len()),
            }
            set.landmarks[pos] = Some(lms);
        }
        if let Some(kps) = ann.keypoints {
            let mut out = Vec::with_capacity(kps.len());
            for k in kps {
                if !in_bounds(k.p, w, h) {
                    return Err(Error::Annotation(format!("frame {index}: keypoint {:?} outside frame", [k.p.x, k.p.y])));
                }
                out.push(Keypoint {
                    position: k.p,
                    scale: k.s.unwrap_or(DEFAULT_KEYPOINT_SCALE),
                    response: 0.0,
                    descriptor: Descriptor::from_slice(&k.d)?,
                });
            }
            set.keypoints[pos] = Some(out);
        }
    }
    Ok(set)
}

pub fn load_annotations(path: &Path, seq: &FrameSequence) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_annotations(file, seq)
}

pub fn save_annotations(set: &AnnotationSet, seq: &FrameSequence, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&set.to_file(seq))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Lookup table `v -> floor(255·cdf(v)/N)` for one channel histogram; a
/// single-level channel maps to itself.
pub fn equalization_lut(hist: &[usize; 256]) -> [u8; 256] {
    let total: usize = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return std::array::from_fn(|v| v as u8);
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0usize;
    for (v, &c) in hist.iter().enumerate() {
        cdf += c;
        lut[v] = (255 * cdf / total) as u8;
    }
    lut
}

/// Per-channel histogram equalization.
pub fn equalize_histogram(frame: &Frame) -> Frame {
    let mut hists = [[0usize; 256]; 3];
    for px in frame.data.chunks_exact(3) {
        for c in 0..3 {
            hists[c][px[c] as usize] += 1;
        }
    }
    let luts = hists.map(|h| equalization_lut(&h));
    let data = frame
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| luts[i % 3][v as usize])
        .collect();
    Frame { data, ..frame.clone() }
}
