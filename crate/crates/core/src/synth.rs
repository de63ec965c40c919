//! Synthetic face videos with exact ground truth.
//!
//! The scene is an analytic texture of Gaussian blobs defined in canonical
//! coordinates. Frame `k` samples it through `G_k` (frame → canonical), the
//! motion model with additive translation jitter, so the true projection of
//! frame `k` onto the template frame 0 is `G_0⁻¹ · G_k`. Inside the face box
//! the skin colour is modulated by
//! `amplitude · sin(2π f t) · layout_i · gain_c` for the canonical ROI `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::image::{Frame, Point, Rect};
use crate::ingest::{AnnotationSet, FrameSequence};
use crate::signal::partition_rois;
use crate::tensor::canonical_landmarks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionModel {
    #[default]
    Static,
    /// `M_k = translate(k·dx, k·dy)`.
    TranslationRamp { dx: f64, dy: f64 },
    /// Smooth periodic head sway about the face centre.
    Sway {
        amplitude_px: f64,
        rotation_deg: f64,
        scale: f64,
        period_s: f64,
    },
    /// Static until `at_frame`, then a fixed offset and rotation.
    PoseJump {
        at_frame: usize,
        dx: f64,
        dy: f64,
        rotation_deg: f64,
    },
    /// One frame → canonical transform per frame.
    Explicit { transforms: Vec<AffineTransform> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub duration: f64,
    pub fps: f64,
    pub pulse_freq: f64,
    /// Peak pulse amplitude on the 8-bit intensity scale.
    pub pulse_amplitude: f64,
    pub motion_model: MotionModel,
    /// Standard deviation of per-frame translation jitter, px.
    pub jitter_sigma: f64,
    /// Standard deviation of landmark annotation noise, px.
    pub landmark_noise_sigma: f64,
    /// Standard deviation of per-pixel sensor noise, intensity units.
    pub sensor_noise_sigma: f64,
    pub texture_seed: u64,
    /// Seed for jitter, landmark and sensor noise.
    pub noise_seed: u64,
    /// Per-ROI pulse multipliers (24 values).
    pub vessel_layout: Vec<f64>,
    /// Per-channel pulse gains for R, G, B.
    pub channel_gains: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Face box margin to the frame border, px.
    pub margin: usize,
    /// Mean spacing of texture blobs, px.
    pub blob_spacing: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration: 10.0,
            fps: 30.0,
            pulse_freq: 1.2,
            pulse_amplitude: 2.0,
            motion_model: MotionModel::Static,
            jitter_sigma: 0.0,
            landmark_noise_sigma: 0.0,
            sensor_noise_sigma: 0.0,
            texture_seed: 1,
            noise_seed: 2,
            vessel_layout: vec![1.0; 24],
            channel_gains: [0.5, 1.0, 0.25],
            width: 144,
            height: 144,
            margin: 24,
            blob_spacing: 8.0,
        }
    }
}

impl SynthSpec {
    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn face_box(&self) -> Rect {
        Rect::new(
            self.margin,
            self.margin,
            self.width - 2 * self.margin,
            self.height - 2 * self.margin,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(10.0..=120.0).contains(&self.fps) {
            return bad(format!("fps {} outside 10–120", self.fps));
        }
        if self.frame_count() == 0 {
            return bad("duration yields no frames".into());
        }
        if !(0.85..=3.5).contains(&self.pulse_freq) {
            return bad(format!("pulse frequency {} Hz outside 0.85–3.5", self.pulse_freq));
        }
        for (name, v) in [
            ("jitter_sigma", self.jitter_sigma),
            ("landmark_noise_sigma", self.landmark_noise_sigma),
            ("sensor_noise_sigma", self.sensor_noise_sigma),
            ("pulse_amplitude", self.pulse_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.vessel_layout.len() != 24 || self.vessel_layout.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("vessel_layout needs 24 non-negative values".into());
        }
        if self.width < 2 * self.margin + 32 || self.height < 2 * self.margin + 32 {
            return bad(format!("frame {}x{} too small for margin {}", self.width, self.height, self.margin));
        }
        if !(self.blob_spacing >= 6.0) {
            return bad("blob_spacing must be at least 6 px".into());
        }
        if let MotionModel::Explicit { transforms } = &self.motion_model {
            if transforms.len() != self.frame_count() {
                return bad(format!("{} explicit transforms for {} frames", transforms.len(), self.frame_count()));
            }
        }
        Ok(())
    }

    /// Motion model entry `M_k` (frame → canonical) without jitter.
    pub fn motion(&self, k: usize) -> AffineTransform {
        let fb = self.face_box();
        let center = Point::new(fb.x as f64 + fb.w as f64 / 2.0, fb.y as f64 + fb.h as f64 / 2.0);
        match &self.motion_model {
            MotionModel::Static => AffineTransform::identity(),
            MotionModel::TranslationRamp { dx, dy } => AffineTransform::translation(dx * k as f64, dy * k as f64),
            MotionModel::Sway {
                amplitude_px,
                rotation_deg,
                scale,
                period_s,
            } => {
                let ph = 2.0 * std::f64::consts::PI * k as f64 / (self.fps * period_s);
                AffineTransform::similarity_about(
                    center,
                    1.0 + scale * (0.7 * ph).sin(),
                    rotation_deg.to_radians() * (1.3 * ph).sin(),
                    amplitude_px * ph.sin(),
                    0.6 * amplitude_px * (0.8 * ph).sin(),
                )
            }
            MotionModel::PoseJump {
                at_frame,
                dx,
                dy,
                rotation_deg,
            } => {
                if k < *at_frame {
                    AffineTransform::identity()
                } else {
                    AffineTransform::similarity_about(center, 1.0, rotation_deg.to_radians(), *dx, *dy)
                }
            }
            MotionModel::Explicit { transforms } => transforms[k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Point,
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    /// True `P_{1,k}`: frame `k` → template frame 0.
    pub transforms: Vec<AffineTransform>,
    /// `G_k`: frame `k` → canonical.
    pub frame_to_canonical: Vec<AffineTransform>,
    /// Injected G-channel pulse per frame and canonical ROI, `[frame][roi]`.
    pub pulse: Vec<Vec<f64>>,
    /// Noise-free landmark positions per frame.
    pub landmark_tracks: Vec<Vec<Point>>,
    /// Texture blob centres in canonical coordinates.
    pub anchors: Vec<Point>,
}

/// Analytic blob texture with a bucket grid for local evaluation.
struct Texture {
    blobs: Vec<Blob>,
    /// Plane waves `(kx, ky, phase, amplitude)` forming the band-limited shading.
    waves: Vec<[f64; 4]>,
    origin: Point,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

const TEXTURE_BASE: f64 = 128.0;
const TEXTURE_RANGE: f64 = 100.0;
const TEXTURE_KNEE: f64 = 110.0;
const SKIN_TINT: f64 = 25.0;

impl Texture {
    fn generate(spec: &SynthSpec) -> Texture {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let pad = 24.0;
        let origin = Point::new(-pad, -pad);
        let (w, h) = (spec.width as f64 + 2.0 * pad, spec.height as f64 + 2.0 * pad);
        let s = spec.blob_spacing;
        let mut blobs = Vec::new();
        let (nx, ny) = ((w / s).ceil() as usize, (h / s).ceil() as usize);
        for j in 0..ny {
            for i in 0..nx {
                let cx = origin.x + (i as f64 + rng.random_range(0.2..0.8)) * s;
                let cy = origin.y + (j as f64 + rng.random_range(0.2..0.8)) * s;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                blobs.push(Blob {
                    center: Point::new(cx, cy),
                    amplitude: sign * rng.random_range(80.0..140.0),
                    sigma: rng.random_range(1.5..3.5),
                });
            }
        }
        // Shading with wavelengths of 20–60 px also spreads the fractional
        // parts of pixel values, so 8-bit rounding averages out over an ROI.
        let waves = (0..12)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / rng.random_range(20.0..60.0);
                [k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(4.0..10.0)]
            })
            .collect();
        let cell = 16.0;
        let (cols, rows) = ((w / cell).ceil() as usize + 1, (h / cell).ceil() as usize + 1);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (bi, b) in blobs.iter().enumerate() {
            let reach = 4.0 * b.sigma;
            let x0 = (((b.center.x - reach - origin.x) / cell).floor().max(0.0)) as usize;
            let x1 = (((b.center.x + reach - origin.x) / cell).floor() as usize).min(cols - 1);
            let y0 = (((b.center.y - reach - origin.y) / cell).floor().max(0.0)) as usize;
            let y1 = (((b.center.y + reach - origin.y) / cell).floor() as usize).min(rows - 1);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    buckets[cy * cols + cx].push(bi as u32);
                }
            }
        }
        Texture {
            blobs,
            waves,
            origin,
            cell,
            cols,
            rows,
            buckets,
        }
    }

    /// Gray level at canonical point `p`.
    fn value(&self, p: Point) -> f64 {
        let cx = ((p.x - self.origin.x) / self.cell).floor();
        let cy = ((p.y - self.origin.y) / self.cell).floor();
        let mut s: f64 = self.waves.iter().map(|w| w[3] * (w[0] * p.x + w[1] * p.y + w[2]).sin()).sum();
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < self.cols && (cy as usize) < self.rows {
            for &bi in &self.buckets[cy as usize * self.cols + cx as usize] {
                let b = &self.blobs[bi as usize];
                let d2 = p.dist_sq(b.center);
                let r = 4.0 * b.sigma;
                if d2 <= r * r {
                    s += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
            }
        }
        TEXTURE_BASE + TEXTURE_RANGE * (s / TEXTURE_KNEE).tanh()
    }
}

/// Fixed per-pixel offset in [-0.5, 0.5) added before 8-bit rounding, so the
/// ROI mean of the rounded pulse is unbiased.
fn dither(x: usize, y: usize, ch: usize) -> f64 {
    let mut h = (x as u64) << 32 | (y as u64) << 2 | ch as u64;
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Renders the sequence, its landmark annotations and the ground truth.
pub fn generate_sequence(spec: &SynthSpec) -> Result<(FrameSequence, AnnotationSet, SynthGroundTruth)> {
    spec.validate()?;
    let n = spec.frame_count();
    let texture = Texture::generate(spec);
    let face_box = spec.face_box();
    let grid = partition_rois(face_box)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let jitter = Normal::new(0.0, spec.jitter_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let g: Vec<AffineTransform> = (0..n)
        .map(|k| {
            let (jx, jy) = if spec.jitter_sigma > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            AffineTransform::translation(jx, jy).compose(&spec.motion(k))
        })
        .collect();
    let g_inv: Vec<AffineTransform> = g
        .iter()
        .enumerate()
        .map(|(k, t)| t.inverse().map_err(|_| Error::Spec(format!("motion at frame {k} is singular"))))
        .collect::<Result<_>>()?;
    let transforms: Vec<AffineTransform> = g.iter().map(|gk| g_inv[0].compose(gk)).collect();

    let canon_lms = canonical_landmarks(face_box.w as f64, face_box.h as f64)
        .map(|p| Point::new(p.x + face_box.x as f64, p.y + face_box.y as f64));
    let landmark_tracks: Vec<Vec<Point>> = g_inv
        .iter()
        .map(|gi| canon_lms.iter().map(|&p| gi.apply(p)).collect())
        .collect();
    let lm_noise = Normal::new(0.0, spec.landmark_noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let max = Point::new((spec.width - 1) as f64, (spec.height - 1) as f64);
    let noisy: Vec<Vec<Point>> = landmark_tracks
        .iter()
        .map(|track| {
            track
                .iter()
                .map(|p| {
                    let (nx, ny) = if spec.landmark_noise_sigma > 0.0 {
                        (lm_noise.sample(&mut rng), lm_noise.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    Point::new((p.x + nx).clamp(0.0, max.x), (p.y + ny).clamp(0.0, max.y))
                })
                .collect()
        })
        .collect();

    let pulse_at = |k: usize| spec.pulse_amplitude * (2.0 * std::f64::consts::PI * spec.pulse_freq * k as f64 / spec.fps).sin();
    let pulse: Vec<Vec<f64>> = (0..n)
        .map(|k| spec.vessel_layout.iter().map(|l| pulse_at(k) * l * spec.channel_gains[1]).collect())
        .collect();

    let roi_of = |p: Point| -> Option<usize> {
        if !face_box.contains_point(p) {
            return None;
        }
        grid.rects.iter().position(|r| r.contains_point(p))
    };

    let frames: Vec<Frame> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed ^ 0x5eed_5eed);
            noise_rng.set_stream(k as u64 + 1);
            let sensor = Normal::new(0.0, spec.sensor_noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
            let p = pulse_at(k);
            let mut data = Vec::with_capacity(spec.width * spec.height * 3);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let c = g[k].apply(Point::new(x as f64, y as f64));
                    let t = texture.value(c);
                    let amp = roi_of(c).map_or(0.0, |i| p * spec.vessel_layout[i]);
                    let base = [t + SKIN_TINT, t, t - SKIN_TINT];
                    for ch in 0..3 {
                        let mut v = base[ch] + amp * spec.channel_gains[ch];
                        if spec.sensor_noise_sigma > 0.0 {
                            v += sensor.sample(&mut noise_rng);
                        }
                        data.push((v + dither(x, y, ch)).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            Frame::new(spec.width, spec.height, data, k).expect("buffer sized for frame")
        })
        .collect();

    let seq = FrameSequence::new(frames, spec.fps, Some(face_box))?;
    let mut ann = AnnotationSet::empty(n);
    ann.landmarks = noisy.into_iter().map(Some).collect();
    ann.n = Some(5);
    ann.face_box = Some(face_box);
    let gt = SynthGroundTruth {
        transforms,
        frame_to_canonical: g,
        pulse,
        landmark_tracks,
        anchors: texture.blobs.iter().map(|b| b.center).collect(),
    };
    Ok((seq, ann, gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub max: f64,
    /// Mean probe residual per frame.
    pub per_frame: Vec<f64>,
}

/// Regular `nx × ny` probe grid over `rect`.
pub fn probe_grid(rect: Rect, nx: usize, ny: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Point::new(
                rect.x as f64 + (i as f64 + 0.5) * rect.w as f64 / nx as f64,
                rect.y as f64 + (j as f64 + 0.5) * rect.h as f64 / ny as f64,
            ));
        }
    }
    out
}

/// Per-frame mean of `|P_est·x − P_true·x|` over the probes; `mean` averages
/// those over frames and `max` is the largest single probe residual.
pub fn alignment_residual(estimated: &[AffineTransform], truth: &[AffineTransform], probes: &[Point]) -> Result<ResidualStats> {
    if estimated.len() != truth.len() {
        return Err(Error::Length(format!("{} estimated vs {} true transforms", estimated.len(), truth.len())));
    }
    if probes.is_empty() || truth.is_empty() {
        return Err(Error::Length("no probes or frames".into()));
    }
    let mut max = 0.0f64;
    let per_frame: Vec<f64> = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            let sum: f64 = probes
                .iter()
                .map(|&p| {
                    let d = e.apply(p).dist(t.apply(p));
                    max = max.max(d);
                    d
                })
                .sum();
            sum / probes.len() as f64
        })
        .collect();
    Ok(ResidualStats {
        mean: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        max,
        per_frame,
    })
}

/// Half-width of the pulse band used by [`pulse_snr`] for a trace lasting
/// `duration` seconds: the Hann main lobe `2/T`, at least 0.1 Hz.
pub fn pulse_half_width(duration: f64) -> f64 {
    (2.0 / duration).max(0.1)
}

/// Ratio, in dB, of Hann-windowed spectral power near `pulse_freq` to the
/// remaining power in 0.85–3.5 Hz.
pub fn pulse_snr(values: &[f64], fps: f64, pulse_freq: f64) -> Result<f64> {
    let n = values.len();
    if (n as f64) < 4.0 * fps {
        return Err(Error::Length(format!("{n} samples is shorter than 4 s at {fps} FPS")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let len = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = (0..len)
        .map(|i| {
            if i < n {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
                Complex64::new((values[i] - mean) * w, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let hw = pulse_half_width(n as f64 / fps);
    let (mut signal, mut noise) = (0.0, 0.0);
    for (i, c) in buf.iter().enumerate().take(len / 2 + 1) {
        let f = i as f64 * fps / len as f64;
        if !(0.85..=3.5).contains(&f) {
            continue;
        }
        if (f - pulse_freq).abs() <= hw {
            signal += c.norm_sqr();
        } else {
            noise += c.norm_sqr();
        }
    }
    Ok(if noise == 0.0 {
        if signal == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY }
    } else {
        10.0 * (signal / noise).log10()
    })
}
