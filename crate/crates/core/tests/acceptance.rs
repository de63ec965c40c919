//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use facepulse::affine::AffineTransform;
use facepulse::config::PipelineConfig;
use facepulse::features::{Descriptor, Keypoint, DESCRIPTOR_LEN};
use facepulse::filter::{design_bandpass, filtfilt, BandpassParams};
use facepulse::image::Point;
use facepulse::matching::initial_match;
use facepulse::metrics::{bpcer_at_apcer, compute_auc, compute_eer, compute_hter, spectral_liveness_score, ScoreSet};
use facepulse::pipeline::{self, filter_traces, mean_channel_trace, raw_traces, std_map, warp_aligned};
use facepulse::stitch::{align_sequence_dp, estimate_hop, landmark_error, AlignMode, Hop};
use facepulse::synth::{alignment_residual, generate_sequence, probe_grid, pulse_snr, MotionModel, SynthSpec};
use facepulse::tensor::{read_tensor, segment_video, write_tensor, TensorMeta, VesselWeightMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- DP fidelity

/// Lexicographically smallest per-stage `(loss, predecessor)` sequence over
/// every predecessor assignment, which is what a stage-wise argmin with
/// lowest-index tie-break must produce.
struct OraclePlan {
    k_hat: Vec<usize>,
    keypoint_loss: Vec<f64>,
    total_loss: Vec<f64>,
    projection: Vec<AffineTransform>,
}

fn enumerate_oracle(hops: &[Vec<Hop>], landmarks: &[Vec<Point>]) -> Option<OraclePlan> {
    let n = landmarks.len();
    let mut assign = vec![0usize; n];
    let mut best: Option<(Vec<(f64, usize)>, OraclePlan)> = None;
    'outer: loop {
        let mut p = vec![AffineTransform::identity(); n];
        let mut lk = vec![0.0; n];
        let mut total = vec![0.0; n];
        let mut key = Vec::with_capacity(n - 1);
        let mut feasible = true;
        for k in 1..n {
            let i = assign[k];
            let h = &hops[i][k];
            if !h.is_feasible() {
                feasible = false;
                break;
            }
            p[k] = p[i].compose(&h.transform);
            let land = landmark_error(&landmarks[k], &landmarks[0], &p[k]).unwrap();
            total[k] = lk[i] + h.keypoint_error + land;
            lk[k] = lk[i] + h.keypoint_error;
            key.push((total[k], i));
        }
        if feasible {
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    let mut verdict = false;
                    for (x, y) in key.iter().zip(b) {
                        if x.0 != y.0 {
                            verdict = x.0 < y.0;
                            break;
                        }
                        if x.1 != y.1 {
                            verdict = x.1 < y.1;
                            break;
                        }
                    }
                    verdict
                }
            };
            if better {
                best = Some((
                    key,
                    OraclePlan {
                        k_hat: assign.clone(),
                        keypoint_loss: lk,
                        total_loss: total,
                        projection: p,
                    },
                ));
            }
        }
        let mut k = 1;
        loop {
            if k == n {
                break 'outer;
            }
            assign[k] += 1;
            if assign[k] < k {
                break;
            }
            assign[k] = 0;
            k += 1;
        }
    }
    best.map(|b| b.1)
}

fn dp_fidelity() -> Outcome {
    let specs = [
        SynthSpec {
            duration: 10.0 / 30.0,
            jitter_sigma: 0.5,
            landmark_noise_sigma: 1.0,
            texture_seed: 11,
            noise_seed: 12,
            motion_model: MotionModel::Sway {
                amplitude_px: 3.0,
                rotation_deg: 2.0,
                scale: 0.02,
                period_s: 0.5,
            },
            ..Default::default()
        },
        SynthSpec {
            duration: 10.0 / 30.0,
            jitter_sigma: 0.5,
            landmark_noise_sigma: 1.0,
            texture_seed: 21,
            noise_seed: 22,
            motion_model: MotionModel::PoseJump {
                at_frame: 6,
                dx: 9.0,
                dy: -4.0,
                rotation_deg: 6.0,
            },
            ..Default::default()
        },
        SynthSpec {
            duration: 10.0 / 30.0,
            jitter_sigma: 0.5,
            landmark_noise_sigma: 1.0,
            sensor_noise_sigma: 2.0,
            texture_seed: 31,
            noise_seed: 32,
            ..Default::default()
        },
    ];
    let cfg = PipelineConfig::default();
    let mut worst = Duration::ZERO;
    for (s, spec) in specs.iter().enumerate() {
        let (seq, ann, _) = generate_sequence(spec).unwrap();
        let start = Instant::now();
        let features = pipeline::frame_features(&seq, &ann, &cfg).unwrap();
        let plan = align_sequence_dp(&features, &cfg.stitch_params()).unwrap();
        worst = worst.max(start.elapsed());

        let n = features.len();
        let hops: Vec<Vec<Hop>> = (0..n)
            .map(|i| (0..n).map(|k| if i < k { estimate_hop(&features[i], &features[k], &cfg.matching) } else { Hop::infeasible() }).collect())
            .collect();
        let lms: Vec<Vec<Point>> = features.iter().map(|f| f.landmarks.clone().unwrap()).collect();
        let Some(oracle) = enumerate_oracle(&hops, &lms) else {
            return outcome(false, format!("sequence {s}: oracle found no feasible assignment"));
        };
        if plan.candidate_evaluations != n * (n - 1) / 2 {
            return outcome(false, format!("sequence {s}: {} evaluations, expected {}", plan.candidate_evaluations, n * (n - 1) / 2));
        }
        for k in 1..n {
            let e = &plan.frames[k];
            if e.k_hat != Some(oracle.k_hat[k])
                || e.keypoint_loss != oracle.keypoint_loss[k]
                || e.total_loss != oracle.total_loss[k]
                || e.projection != oracle.projection[k]
            {
                return outcome(
                    false,
                    format!("sequence {s} frame {k}: DP k̂ {:?} L {} vs oracle k̂ {} L {}", e.k_hat, e.total_loss, oracle.k_hat[k], oracle.total_loss[k]),
                );
            }
        }
    }
    outcome(
        worst < Duration::from_secs(5),
        format!("3 sequences × 10 frames identical to enumeration, 45 evaluations each, slowest {:.2} s (< 5 s)", secs(worst)),
    )
}

// ------------------------------------------- alignment accuracy, signal recovery

struct AlignmentRun {
    stitched_residual: f64,
    landmark_residual: f64,
    stitched_std: f64,
    landmark_std: f64,
    stitched_snr: f64,
    landmark_snr: f64,
    elapsed: Duration,
}

fn alignment_run() -> AlignmentRun {
    let spec = SynthSpec {
        duration: 200.0 / 30.0,
        jitter_sigma: 0.5,
        landmark_noise_sigma: 1.0,
        texture_seed: 7,
        noise_seed: 8,
        ..Default::default()
    };
    let start = Instant::now();
    let (seq, ann, gt) = generate_sequence(&spec).unwrap();
    let fb = spec.face_box();
    let probes = probe_grid(fb, 10, 10);
    let mut residual = [0.0; 2];
    let mut stdev = [0.0; 2];
    let mut snr = [0.0; 2];
    let mut elapsed = Duration::ZERO;
    for (m, mode) in [AlignMode::Stitched, AlignMode::LandmarkOnly].into_iter().enumerate() {
        let cfg = PipelineConfig {
            align_mode: mode,
            ..Default::default()
        };
        let plan = pipeline::align(&seq, &ann, &cfg).unwrap();
        if m == 0 {
            elapsed = start.elapsed();
        }
        residual[m] = alignment_residual(&plan.projections(), &gt.transforms, &probes).unwrap().mean;
        let warped = warp_aligned(&seq, &plan, &cfg).unwrap();
        stdev[m] = std_map(&warped).unwrap().mean_in(fb);
        let filtered = filter_traces(&raw_traces(&warped, fb, seq.fps, &cfg).unwrap(), &cfg).unwrap();
        snr[m] = pulse_snr(&mean_channel_trace(&filtered, 1), 30.0, spec.pulse_freq).unwrap();
    }
    AlignmentRun {
        stitched_residual: residual[0],
        landmark_residual: residual[1],
        stitched_std: stdev[0],
        landmark_std: stdev[1],
        stitched_snr: snr[0],
        landmark_snr: snr[1],
        elapsed,
    }
}

fn alignment_accuracy(r: &AlignmentRun) -> Outcome {
    outcome(
        r.stitched_residual < 0.5 && r.stitched_residual < r.landmark_residual && r.elapsed < Duration::from_secs(60),
        format!(
            "200 frames: stitched residual {:.4} px vs landmark-only {:.4} px; stack std {:.3} vs {:.3}; {:.1} s (< 60 s)",
            r.stitched_residual,
            r.landmark_residual,
            r.stitched_std,
            r.landmark_std,
            secs(r.elapsed)
        ),
    )
}

fn signal_recovery(r: &AlignmentRun) -> Outcome {
    outcome(
        r.stitched_snr >= 10.0 && r.stitched_snr >= r.landmark_snr + 3.0,
        format!("SNR stitched {:.2} dB, landmark-only {:.2} dB (need ≥ 10 and a 3 dB margin)", r.stitched_snr, r.landmark_snr),
    )
}

// ------------------------------------------------------------------- filter

/// Least-squares amplitude and phase of a sinusoid at `f` over the middle half.
fn fit_sinusoid(y: &[f64], f: f64, fs: f64) -> (f64, f64) {
    let (lo, hi) = (y.len() / 4, 3 * y.len() / 4);
    let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate().take(hi).skip(lo) {
        let w = 2.0 * std::f64::consts::PI * f * i as f64 / fs;
        let (s, c) = w.sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        ys += v * s;
        yc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    (a.hypot(b), b.atan2(a))
}

fn filter_contract() -> Outcome {
    let p = BandpassParams::default();
    let sections = design_bandpass(&p).unwrap();
    let run = |f: f64| {
        let x: Vec<f64> = (0..1200).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 30.0).sin()).collect();
        let y = filtfilt(&sections, &x).unwrap();
        (fit_sinusoid(&y, f, 30.0), x, y)
    };
    let ((g15, phase), x, y) = run(1.5);
    let ((g02, _), _, _) = run(0.2);
    let ((g5, _), _, _) = run(5.0);
    // cross-correlation peak over ±5 samples
    let mid = 300..900;
    let lag = (-5i64..=5)
        .max_by(|&a, &b| {
            let c = |l: i64| mid.clone().map(|i| x[i] * y[(i as i64 + l) as usize]).sum::<f64>();
            c(a).total_cmp(&c(b))
        })
        .unwrap();
    let db = |g: f64| -20.0 * g.log10();
    outcome(
        (0.85..=1.0).contains(&g15) && db(g02) >= 20.0 && db(g5) >= 20.0 && lag == 0 && phase.abs() < 1e-3,
        format!(
            "1.5 Hz gain {g15:.5}; 0.2 Hz −{:.1} dB; 5 Hz −{:.1} dB; lag {lag} samples, phase {phase:.2e} rad",
            db(g02),
            db(g5)
        ),
    )
}

// ---------------------------------------------------------------------- STR

fn str_contract() -> Outcome {
    let starts = segment_video(300).unwrap();
    if starts.len() != 61 || starts.last() != Some(&180) || segment_video(119).is_ok() {
        return outcome(false, format!("segment arithmetic: {} segments", starts.len()));
    }
    let spec = SynthSpec {
        duration: 10.0,
        jitter_sigma: 0.5,
        landmark_noise_sigma: 1.0,
        texture_seed: 41,
        noise_seed: 42,
        ..Default::default()
    };
    let (seq, ann, _) = generate_sequence(&spec).unwrap();
    let cfg = PipelineConfig {
        window: Some(8),
        ..Default::default()
    };
    let out = pipeline::run(&seq, &ann, &cfg, &VesselWeightMap::bundled()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for t in &out.tensors {
        let meta = TensorMeta::new(t.segment_start, Some(1), Some("synth".into()));
        write_tensor(&dir.path().join(format!("{:04}.vmr", t.segment_start)), t, &meta).unwrap();
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in &files {
        let bytes = std::fs::read(f).unwrap();
        let dims: Vec<u32> = (0..3).map(|i| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap())).collect();
        let (t, _) = read_tensor(f).unwrap();
        if &bytes[..4] != b"VMR1" || bytes[4] != 3 || dims != [24, 120, 18] || t.data.len() != 24 * 120 * 18 || t.data.iter().any(|v| !v.is_finite()) {
            return outcome(false, format!("{}: header {:?} dims {dims:?}", f.display(), &bytes[..5]));
        }
    }
    outcome(
        files.len() == 61 && out.tensors.len() == 61,
        format!("300 frames → {} segment files, all [24, 120, 18] and finite; 119 frames rejected", files.len()),
    )
}

// ------------------------------------------------------------------ metrics

struct OracleRates {
    eer: f64,
    hter: f64,
    auc: f64,
    bpcer: Vec<f64>,
}

fn oracle_rates(dev: &[(f64, u8)], test: &[(f64, u8)], targets: &[f64]) -> OracleRates {
    let rates = |set: &[(f64, u8)], t: f64| {
        let g = set.iter().filter(|e| e.1 == 1).count() as f64;
        let s = set.len() as f64 - g;
        let fa = set.iter().filter(|e| e.1 == 0 && e.0 >= t).count() as f64;
        let fr = set.iter().filter(|e| e.1 == 1 && e.0 < t).count() as f64;
        (fa / s, fr / g)
    };
    let thresholds = |set: &[(f64, u8)]| {
        let mut t: Vec<f64> = set.iter().map(|e| e.0).collect();
        t.push(f64::INFINITY);
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    };
    let eer_at = |set: &[(f64, u8)]| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for t in thresholds(set) {
            let (far, frr) = rates(set, t);
            if (far - frr).abs() < best.0 {
                best = ((far - frr).abs(), t, (far + frr) / 2.0);
            }
        }
        best
    };
    let (_, t_dev, _) = eer_at(dev);
    let (far, frr) = rates(test, t_dev);
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in dev.iter().filter(|e| e.1 == 1) {
        for b in dev.iter().filter(|e| e.1 == 0) {
            pairs += 1.0;
            wins += if a.0 > b.0 {
                1.0
            } else if a.0 == b.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    let bpcer = targets
        .iter()
        .map(|&target| {
            let t = thresholds(dev).into_iter().find(|&t| rates(dev, t).0 <= target + 1e-12).unwrap();
            rates(test, t).1
        })
        .collect();
    OracleRates {
        eer: eer_at(dev).2,
        hter: (far + frr) / 2.0,
        auc: wins / pairs,
        bpcer,
    }
}

fn metric_oracles() -> Outcome {
    let targets = [0.01, 0.05, 0.1, 0.2];
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quantized = seed % 2 == 0;
        let entries: Vec<(f64, u8)> = (0..200)
            .map(|_| {
                let label = u8::from(rng.random_bool(0.5));
                let mut s: f64 = rng.random_range(0.0..1.0) + 0.3 * label as f64;
                if quantized {
                    s = (s * 20.0).round() / 20.0;
                }
                (s, label)
            })
            .collect();
        let (dev, test) = entries.split_at(100);
        let o = oracle_rates(dev, test, &targets);
        let d = ScoreSet::new(dev.to_vec()).unwrap();
        let t = ScoreSet::new(test.to_vec()).unwrap();
        let mut diffs = vec![
            (compute_eer(&d).unwrap().eer - o.eer).abs(),
            (compute_hter(&d, &t).unwrap() - o.hter).abs(),
            (compute_auc(&d).unwrap() - o.auc).abs(),
        ];
        for (target, ob) in targets.iter().zip(&o.bpcer) {
            diffs.push((bpcer_at_apcer(&d, &t, *target).unwrap() - ob).abs());
        }
        worst = diffs.into_iter().fold(worst, f64::max);
    }
    let sep = ScoreSet::from_parts(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
    let tied = ScoreSet::from_parts(&[0.5; 6], &[1, 1, 1, 0, 0, 0]).unwrap();
    let trivial = compute_eer(&sep).unwrap().eer == 0.0
        && compute_auc(&sep).unwrap() == 1.0
        && compute_auc(&tied).unwrap() == 0.5
        && compute_eer(&tied).unwrap().eer == 0.5;
    outcome(
        worst <= 1e-9 && trivial,
        format!("10 seeded sets of 200 scores: max deviation from sweep oracle {worst:.1e}; separable/all-tied cases exact: {trivial}"),
    )
}

// --------------------------------------------------- baseline discrimination

fn baseline_discrimination() -> Outcome {
    let cfg = PipelineConfig {
        window: Some(8),
        ..Default::default()
    };
    let weights = VesselWeightMap::bundled();
    let start = Instant::now();
    let mut entries = Vec::new();
    for v in 0..40u64 {
        let genuine = v % 2 == 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + v);
        let spec = SynthSpec {
            duration: 4.0,
            pulse_freq: rng.random_range(0.9..2.5),
            pulse_amplitude: if genuine { 2.0 } else { 0.0 },
            jitter_sigma: 0.5,
            landmark_noise_sigma: 1.0,
            sensor_noise_sigma: 1.0,
            texture_seed: 2000 + v,
            noise_seed: 3000 + v,
            motion_model: MotionModel::Sway {
                amplitude_px: 2.0,
                rotation_deg: 1.5,
                scale: 0.01,
                period_s: rng.random_range(2.0..5.0),
            },
            ..Default::default()
        };
        let (seq, ann, _) = generate_sequence(&spec).unwrap();
        let out = pipeline::run(&seq, &ann, &cfg, &weights).unwrap();
        let score = out.tensors.iter().map(spectral_liveness_score).sum::<f64>() / out.tensors.len() as f64;
        entries.push((score, u8::from(genuine)));
    }
    let set = ScoreSet::new(entries.clone()).unwrap();
    let eer = compute_eer(&set).unwrap().eer;
    let min_genuine = entries.iter().filter(|e| e.1 == 1).map(|e| e.0).fold(f64::INFINITY, f64::min);
    let max_spoof = entries.iter().filter(|e| e.1 == 0).map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        eer == 0.0,
        format!(
            "20 pulse + 20 no-pulse videos: EER {eer}; lowest pulse score {min_genuine:.3}, highest no-pulse {max_spoof:.3}; {:.0} s",
            secs(start.elapsed())
        ),
    )
}

// --------------------------------------------------------- keypoint matching

fn random_descriptor(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..DESCRIPTOR_LEN).map(|_| rng.random_range(0.0f32..1.0)).collect()
}

fn keypoint_matching() -> Outcome {
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    let mut worst = usize::MAX;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<Keypoint> = (0..50)
            .map(|_| Keypoint {
                position: Point::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)),
                scale: 1.6,
                response: 0.0,
                descriptor: Descriptor::from_slice(&random_descriptor(&mut rng)).unwrap(),
            })
            .collect();
        let query: Vec<Keypoint> = reference
            .iter()
            .map(|k| {
                let d: Vec<f32> = k.descriptor.0.iter().map(|v| v + noise.sample(&mut rng)).collect();
                Keypoint {
                    position: Point::new(k.position.x + 2.0, k.position.y + 1.0),
                    descriptor: Descriptor::from_slice(&d).unwrap(),
                    ..k.clone()
                }
            })
            .collect();
        // brute-force nearest neighbour in descriptor space, per reference
        let oracle: Vec<usize> = reference
            .iter()
            .map(|r| {
                (0..query.len())
                    .min_by(|&a, &b| {
                        let d = |j: usize| -> f64 {
                            r.descriptor.0.iter().zip(&query[j].descriptor.0).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
                        };
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap()
            })
            .collect();
        let matches = initial_match(&reference, &query, 0.6);
        let correct = matches
            .iter()
            .filter(|m| m.query_index == m.ref_index && oracle[m.ref_index] == m.ref_index)
            .count();
        worst = worst.min(correct);
    }
    outcome(worst >= 45, format!("10 seeded sets of 50 keypoints: at least {worst}/50 correct matches (need ≥ 45)"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report("dp fidelity", dp_fidelity());
    let run = alignment_run();
    report("alignment accuracy", alignment_accuracy(&run));
    report("signal recovery", signal_recovery(&run));
    report("filter contract", filter_contract());
    report("str contract", str_contract());
    report("metric oracles", metric_oracles());
    report("baseline discrimination", baseline_discrimination());
    report("keypoint matching", keypoint_matching());
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
