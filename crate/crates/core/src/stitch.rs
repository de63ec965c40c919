//! Landmark-anchored face stitching.
//!
//! Every frame `k` is aligned to the template (local index 0) through an
//! intermediate frame `k̂ < k` chosen by dynamic programming. For a candidate
//! `i` the total loss is
//!
//! ```text
//! L(0,k) = L_K(0,i) + rms_j |P_{i,k} v_{k,j} - v_{i,j}|          (keypoints of the hop)
//!                   + rms_j |P_{0,i} P_{i,k} l_{k,j} - l_{0,j}|  (landmarks vs template)
//! ```
//!
//! and the stored prefixes `L_K(0,k)` and `P_{0,k}` are updated from the
//! winning candidate only, stage by stage. The candidate scan therefore
//! evaluates exactly `k(k-1)/2` hops for a `k`-frame sequence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{fit_affine, AffineTransform};
use crate::error::{Error, Result};
use crate::features::Keypoint;
use crate::image::Point;
use crate::matching::{match_keypoints, MatchParams};

/// Keypoints and (optional) landmarks of one frame.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub landmarks: Option<Vec<Point>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemplateMode {
    #[default]
    First,
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Dynamic-programming chain over keypoint hops, landmark-anchored.
    #[default]
    Stitched,
    /// Direct landmark fit of every frame to the template.
    LandmarkOnly,
    /// Chain through the immediately preceding frame only.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchParams {
    pub matching: MatchParams,
    /// Only the `window` closest predecessors are candidates; `None` scans
    /// all of them.
    pub window: Option<usize>,
}

impl Default for StitchParams {
    fn default() -> Self {
        StitchParams {
            matching: MatchParams::default(),
            window: None,
        }
    }
}

/// Projection from a query frame to a reference frame plus its keypoint
/// alignment error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub transform: AffineTransform,
    /// RMS keypoint residual in pixels; infinite when the hop is infeasible.
    pub keypoint_error: f64,
    pub matches: usize,
    /// The transform was fitted on landmarks because fewer than three
    /// keypoint matches were available.
    pub landmark_fallback: bool,
}

impl Hop {
    pub fn infeasible() -> Self {
        Hop {
            transform: AffineTransform::identity(),
            keypoint_error: f64::INFINITY,
            matches: 0,
            landmark_fallback: false,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.keypoint_error.is_finite()
    }
}

/// `sqrt(mean_j |P·q_j − r_j|²)` over `(query, reference)` pairs; infinite
/// for an empty set.
pub fn keypoint_hop_error(pairs: &[(Point, Point)], p: &AffineTransform) -> f64 {
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    let ss: f64 = pairs.iter().map(|&(q, r)| p.apply(q).dist_sq(r)).sum();
    (ss / pairs.len() as f64).sqrt()
}

/// `sqrt(mean_j |P_1k·l_k,j − l_1,j|²)`.
pub fn landmark_error(landmarks_k: &[Point], landmarks_1: &[Point], p_1k: &AffineTransform) -> Result<f64> {
    if landmarks_k.len() != landmarks_1.len() {
        return Err(Error::Annotation(format!(
            "landmark count mismatch: {} vs {}",
            landmarks_k.len(),
            landmarks_1.len()
        )));
    }
    if landmarks_k.is_empty() {
        return Err(Error::Annotation("empty landmark set".into()));
    }
    let ss: f64 = landmarks_k
        .iter()
        .zip(landmarks_1)
        .map(|(&lk, &l1)| p_1k.apply(lk).dist_sq(l1))
        .sum();
    Ok((ss / landmarks_k.len() as f64).sqrt())
}

fn landmark_pairs(query: &[Point], reference: &[Point]) -> Vec<(Point, Point)> {
    query.iter().copied().zip(reference.iter().copied()).collect()
}

/// Matches `query` against `reference` and fits the query→reference
/// projection. With fewer than three usable keypoint matches the projection
/// falls back to the landmarks (keypoint error then measured on whatever
/// matches exist, 0 when there are none). Without landmarks such a hop is
/// infeasible.
pub fn estimate_hop(reference: &FrameFeatures, query: &FrameFeatures, params: &MatchParams) -> Hop {
    let matches = match_keypoints(&reference.keypoints, &query.keypoints, params);
    let pairs: Vec<(Point, Point)> = matches
        .iter()
        .map(|m| (query.keypoints[m.query_index].position, reference.keypoints[m.ref_index].position))
        .collect();
    if pairs.len() >= 3 {
        if let Ok(t) = fit_affine(&pairs) {
            return Hop {
                transform: t,
                keypoint_error: keypoint_hop_error(&pairs, &t),
                matches: pairs.len(),
                landmark_fallback: false,
            };
        }
    }
    let (Some(lq), Some(lr)) = (&query.landmarks, &reference.landmarks) else {
        return Hop::infeasible();
    };
    if lq.len() != lr.len() {
        return Hop::infeasible();
    }
    match fit_affine(&landmark_pairs(lq, lr)) {
        Ok(t) => Hop {
            transform: t,
            keypoint_error: if pairs.is_empty() { 0.0 } else { keypoint_hop_error(&pairs, &t) },
            matches: pairs.len(),
            landmark_fallback: true,
        },
        Err(_) => Hop::infeasible(),
    }
}

/// Per-frame result of an alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub index: usize,
    /// Chosen intermediate frame (original index); `None` for the template.
    pub k_hat: Option<usize>,
    /// Projection from this frame into template coordinates.
    #[serde(rename = "P")]
    pub projection: AffineTransform,
    /// Accumulated keypoint loss along the chosen chain, pixels.
    #[serde(rename = "L_K")]
    pub keypoint_loss: f64,
    /// Total loss of the chosen candidate, pixels.
    #[serde(rename = "L_total")]
    pub total_loss: f64,
    #[serde(default)]
    pub keypoint_matches: usize,
    /// The hop into this frame used a landmark-fitted projection.
    #[serde(default)]
    pub landmark_fallback: bool,
    /// This frame's landmarks were copied from a neighbouring frame.
    #[serde(default)]
    pub landmarks_propagated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub template: usize,
    pub mode: AlignMode,
    pub frames: Vec<PlanEntry>,
    /// Number of (predecessor, frame) hops evaluated.
    pub candidate_evaluations: usize,
}

impl AlignmentPlan {
    pub fn projections(&self) -> Vec<AffineTransform> {
        self.frames.iter().map(|e| e.projection).collect()
    }
}

/// Index of the template frame: `0` for `First`, `len / 2` for `Middle`.
pub fn select_template(len: usize, mode: TemplateMode) -> usize {
    match mode {
        TemplateMode::First => 0,
        TemplateMode::Middle => len / 2,
    }
}

/// Forward-fills missing landmark sets (leading gaps take the first valid
/// set). Returns the filled sets and a per-frame "propagated" flag.
pub fn propagate_landmarks(landmarks: &[Option<Vec<Point>>]) -> (Vec<Option<Vec<Point>>>, Vec<bool>) {
    let first = landmarks.iter().flatten().next().cloned();
    let mut last = first;
    let mut out = Vec::with_capacity(landmarks.len());
    let mut flags = Vec::with_capacity(landmarks.len());
    for l in landmarks {
        match l {
            Some(v) => {
                last = Some(v.clone());
                out.push(Some(v.clone()));
                flags.push(false);
            }
            None => {
                out.push(last.clone());
                flags.push(last.is_some());
            }
        }
    }
    (out, flags)
}

/// Result of the DP over local indices `0..n` (0 is the template).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPlan {
    pub k_hat: Vec<Option<usize>>,
    pub projection: Vec<AffineTransform>,
    pub keypoint_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    pub hops: Vec<Option<Hop>>,
    pub candidate_evaluations: usize,
}

/// The stage-wise dynamic program over an arbitrary hop provider.
/// `hop(i, k)` must return the projection from frame `k` into frame `i`.
pub fn run_stitching_dp<F>(
    landmarks: &[Option<Vec<Point>>],
    window: Option<usize>,
    hop: F,
) -> Result<LocalPlan>
where
    F: Fn(usize, usize) -> Hop + Sync,
{
    let n = landmarks.len();
    let mut plan = LocalPlan {
        k_hat: vec![None; n],
        projection: vec![AffineTransform::identity(); n],
        keypoint_loss: vec![0.0; n],
        total_loss: vec![0.0; n],
        hops: vec![None; n],
        candidate_evaluations: 0,
    };
    let template_landmarks = landmarks.first().and_then(|l| l.as_ref());
    for k in 1..n {
        let lo = window.map_or(0, |w| k.saturating_sub(w));
        let hops: Vec<Hop> = (lo..k).into_par_iter().map(|i| hop(i, k)).collect();
        plan.candidate_evaluations += hops.len();

        let mut best_loss = f64::INFINITY;
        let mut best = lo;
        for (offset, h) in hops.iter().enumerate() {
            let i = lo + offset;
            if !h.is_feasible() {
                continue;
            }
            let p = plan.projection[i].compose(&h.transform);
            let land = match (&landmarks[k], template_landmarks) {
                (Some(lk), Some(l0)) => landmark_error(lk, l0, &p)?,
                _ => 0.0,
            };
            let loss = plan.keypoint_loss[i] + h.keypoint_error + land;
            if loss < best_loss {
                best_loss = loss;
                best = i;
            }
        }
        if !best_loss.is_finite() {
            return Err(Error::StitchingFailure(k));
        }
        let h = hops[best - lo];
        plan.k_hat[k] = Some(best);
        plan.keypoint_loss[k] = plan.keypoint_loss[best] + h.keypoint_error;
        plan.projection[k] = plan.projection[best].compose(&h.transform);
        plan.total_loss[k] = best_loss;
        plan.hops[k] = Some(h);
    }
    Ok(plan)
}

/// Runs the stitching DP with `features[0]` as the template.
pub fn align_sequence_dp(features: &[FrameFeatures], params: &StitchParams) -> Result<AlignmentPlan> {
    align_features(features, TemplateMode::First, AlignMode::Stitched, params)
}

/// Aligns all frames to the selected template. In `Middle` mode the two
/// halves are processed outward from the template independently.
pub fn align_features(
    features: &[FrameFeatures],
    template: TemplateMode,
    mode: AlignMode,
    params: &StitchParams,
) -> Result<AlignmentPlan> {
    if features.is_empty() {
        return Err(Error::Length("empty sequence".into()));
    }
    params.matching.validate()?;
    let raw: Vec<Option<Vec<Point>>> = features.iter().map(|f| f.landmarks.clone()).collect();
    if let Some(n) = raw.iter().flatten().map(|l| l.len()).next() {
        if raw.iter().flatten().any(|l| l.len() != n) {
            return Err(Error::Annotation("landmark count differs between frames".into()));
        }
    }
    let (filled, propagated) = propagate_landmarks(&raw);
    let filled_features: Vec<FrameFeatures> = features
        .iter()
        .zip(&filled)
        .map(|(f, l)| FrameFeatures {
            keypoints: f.keypoints.clone(),
            landmarks: l.clone(),
        })
        .collect();

    let t = select_template(features.len(), template);
    let mut entries: Vec<Option<PlanEntry>> = vec![None; features.len()];
    let mut evaluations = 0;
    let forward: Vec<usize> = (t..features.len()).collect();
    let backward: Vec<usize> = (0..=t).rev().collect();
    for order in [forward, backward] {
        let local: Vec<&FrameFeatures> = order.iter().map(|&g| &filled_features[g]).collect();
        let lp = align_local(&local, mode, params).map_err(|e| match e {
            Error::StitchingFailure(k) => Error::StitchingFailure(order[k]),
            other => other,
        })?;
        evaluations += lp.candidate_evaluations;
        for (li, &g) in order.iter().enumerate() {
            if entries[g].is_some() {
                continue;
            }
            let hop = lp.hops[li];
            entries[g] = Some(PlanEntry {
                index: g,
                k_hat: lp.k_hat[li].map(|k| order[k]),
                projection: lp.projection[li],
                keypoint_loss: lp.keypoint_loss[li],
                total_loss: lp.total_loss[li],
                keypoint_matches: hop.map_or(0, |h| h.matches),
                landmark_fallback: hop.is_some_and(|h| h.landmark_fallback),
                landmarks_propagated: propagated[g],
            });
        }
    }
    Ok(AlignmentPlan {
        template: t,
        mode,
        frames: entries.into_iter().map(|e| e.expect("every frame covered")).collect(),
        candidate_evaluations: evaluations,
    })
}

fn align_local(local: &[&FrameFeatures], mode: AlignMode, params: &StitchParams) -> Result<LocalPlan> {
    let landmarks: Vec<Option<Vec<Point>>> = local.iter().map(|f| f.landmarks.clone()).collect();
    match mode {
        AlignMode::Stitched => run_stitching_dp(&landmarks, params.window, |i, k| {
            estimate_hop(local[i], local[k], &params.matching)
        }),
        AlignMode::Previous => run_stitching_dp(&landmarks, Some(1), |i, k| {
            estimate_hop(local[i], local[k], &params.matching)
        }),
        AlignMode::LandmarkOnly => landmark_only(&landmarks),
    }
}

fn landmark_only(landmarks: &[Option<Vec<Point>>]) -> Result<LocalPlan> {
    let n = landmarks.len();
    let mut plan = LocalPlan {
        k_hat: vec![None; n],
        projection: vec![AffineTransform::identity(); n],
        keypoint_loss: vec![0.0; n],
        total_loss: vec![0.0; n],
        hops: vec![None; n],
        candidate_evaluations: 0,
    };
    let Some(l0) = landmarks.first().and_then(|l| l.as_ref()) else {
        return Err(Error::Annotation("landmark-only alignment needs template landmarks".into()));
    };
    for k in 1..n {
        let lk = landmarks[k].as_ref().ok_or(Error::StitchingFailure(k))?;
        let p = fit_affine(&landmark_pairs(lk, l0)).map_err(|_| Error::StitchingFailure(k))?;
        plan.k_hat[k] = Some(0);
        plan.projection[k] = p;
        plan.total_loss[k] = landmark_error(lk, l0, &p)?;
        plan.candidate_evaluations += 1;
        plan.hops[k] = Some(Hop {
            transform: p,
            keypoint_error: 0.0,
            matches: 0,
            landmark_fallback: true,
        });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hop_error_examples() {
        let q = [Point::new(0.0, 0.0), Point::new(1.0, 1.0)];
        let pairs = [(q[0], Point::new(3.0, 4.0)), (q[1], q[1])];
        let e = keypoint_hop_error(&pairs, &AffineTransform::identity());
        assert!((e - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!(keypoint_hop_error(&[], &AffineTransform::identity()).is_infinite());

        let t = AffineTransform::new([1.1, 0.1, 2.0, -0.2, 0.9, 1.0]);
        let pts = [Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(0.0, 10.0)];
        let exact: Vec<_> = pts.iter().map(|&p| (p, t.apply(p))).collect();
        let fit = fit_affine(&exact).unwrap();
        assert!(keypoint_hop_error(&exact, &fit) < 1e-9);
    }

    #[test]
    fn landmark_error_examples() {
        let l1: Vec<_> = (0..5).map(|i| Point::new(i as f64 * 3.0, 7.0 - i as f64)).collect();
        let lk: Vec<_> = l1.iter().map(|p| Point::new(p.x + 1.0, p.y)).collect();
        assert!((landmark_error(&lk, &l1, &AffineTransform::identity()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(landmark_error(&lk, &l1, &AffineTransform::translation(-1.0, 0.0)).unwrap(), 0.0);
        assert!(matches!(
            landmark_error(&lk[..4], &l1, &AffineTransform::identity()),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn composed_landmark_error_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = AffineTransform::new(std::array::from_fn(|i| rng.random_range(-1.0..1.0) + if i % 4 == 0 { 1.0 } else { 0.0 }));
            let b = AffineTransform::new(std::array::from_fn(|i| rng.random_range(-1.0..1.0) + if i % 4 == 0 { 1.0 } else { 0.0 }));
            let lk: Vec<_> = (0..5).map(|_| Point::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
            let l1: Vec<_> = (0..5).map(|_| Point::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
            let direct = {
                let ss: f64 = lk.iter().zip(&l1).map(|(&p, &q)| a.apply(b.apply(p)).dist_sq(q)).sum();
                (ss / 5.0).sqrt()
            };
            let via = landmark_error(&lk, &l1, &a.compose(&b)).unwrap();
            assert!((direct - via).abs() < 1e-12 * (1.0 + direct));
        }
    }

    #[test]
    fn template_selection() {
        assert_eq!(select_template(300, TemplateMode::Middle), 150);
        assert_eq!(select_template(1, TemplateMode::Middle), 0);
        assert_eq!(select_template(1, TemplateMode::First), 0);
        assert_eq!(select_template(7, TemplateMode::Middle), 3);
    }

    #[test]
    fn landmark_propagation_fills_gaps() {
        let a = vec![Point::new(1.0, 1.0)];
        let b = vec![Point::new(2.0, 2.0)];
        let (f, flags) = propagate_landmarks(&[None, Some(a.clone()), None, Some(b.clone()), None]);
        assert_eq!(f, vec![Some(a.clone()), Some(a.clone()), Some(a), Some(b.clone()), Some(b)]);
        assert_eq!(flags, vec![true, false, true, false, true]);
    }

    /// Random hop table with some infeasible entries.
    fn random_hops(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Hop>> {
        (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if rng.random_bool(0.15) {
                            Hop::infeasible()
                        } else {
                            let t = AffineTransform::similarity_about(
                                Point::new(20.0, 20.0),
                                1.0 + rng.random_range(-0.02..0.02),
                                rng.random_range(-0.05..0.05),
                                rng.random_range(-2.0..2.0),
                                rng.random_range(-2.0..2.0),
                            );
                            Hop {
                                transform: t,
                                keypoint_error: rng.random_range(0.0..1.0),
                                matches: 10,
                                landmark_fallback: false,
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn random_landmarks(n: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<Point>>> {
        (0..n)
            .map(|_| Some((0..5).map(|_| Point::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))).collect()))
            .collect()
    }

    /// Stage losses of a full predecessor assignment, recomputed from scratch
    /// by walking each chain back to the template.
    fn assignment_losses(assign: &[usize], hops: &[Vec<Hop>], lms: &[Option<Vec<Point>>]) -> Option<Vec<f64>> {
        let n = lms.len();
        let mut out = vec![0.0; n];
        for k in 1..n {
            let i = assign[k];
            let h = hops[i][k];
            if !h.is_feasible() {
                return None;
            }
            // chain of i back to 0
            let mut chain = vec![i];
            while *chain.last().unwrap() != 0 {
                let c = *chain.last().unwrap();
                chain.push(assign[c]);
            }
            chain.reverse(); // 0, ..., i
            let mut p = AffineTransform::identity();
            let mut lk = 0.0;
            for w in chain.windows(2) {
                let hh = hops[w[0]][w[1]];
                if !hh.is_feasible() {
                    return None;
                }
                p = p.compose(&hh.transform);
                lk += hh.keypoint_error;
            }
            let pk = p.compose(&h.transform);
            let land = landmark_error(lms[k].as_ref().unwrap(), lms[0].as_ref().unwrap(), &pk).unwrap();
            out[k] = lk + h.keypoint_error + land;
        }
        Some(out)
    }

    #[test]
    fn dp_matches_lexicographic_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let n = 6 + trial % 2;
            let hops = random_hops(n, &mut rng);
            let lms = random_landmarks(n, &mut rng);
            let dp = match run_stitching_dp(&lms, None, |i, k| hops[i][k]) {
                Ok(p) => p,
                Err(_) => continue,
            };
            assert_eq!(dp.candidate_evaluations, n * (n - 1) / 2);
            // enumerate every assignment; lexicographic minimum of stage losses
            let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
            let mut assign = vec![0usize; n];
            loop {
                if let Some(l) = assignment_losses(&assign, &hops, &lms) {
                    let better = match &best {
                        None => true,
                        Some((bl, _)) => l.iter().zip(bl).find(|(a, b)| a != b).is_some_and(|(a, b)| a < b),
                    };
                    if better {
                        best = Some((l, assign.clone()));
                    }
                }
                // odometer increment over assign[k] in 0..k
                let mut k = 1;
                while k < n {
                    assign[k] += 1;
                    if assign[k] < k {
                        break;
                    }
                    assign[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
            let (losses, a) = best.unwrap();
            for k in 1..n {
                assert_eq!(dp.k_hat[k], Some(a[k]));
                assert_eq!(dp.total_loss[k], losses[k]);
            }
        }
    }

    #[test]
    fn window_limits_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let hops: Vec<Vec<Hop>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| Hop {
                        transform: AffineTransform::identity(),
                        keypoint_error: rng.random_range(0.0..1.0),
                        matches: 5,
                        landmark_fallback: false,
                    })
                    .collect()
            })
            .collect();
        let lms = random_landmarks(n, &mut rng);
        let p = run_stitching_dp(&lms, Some(2), |i, k| hops[i][k]).unwrap();
        assert_eq!(p.candidate_evaluations, 1 + 2 * 6);
        for k in 1..n {
            assert!(p.k_hat[k].unwrap() + 2 >= k);
        }
    }

    #[test]
    fn no_feasible_predecessor_fails() {
        let lms = vec![None, None, None];
        let err = run_stitching_dp(&lms, None, |i, k| {
            if k == 2 {
                Hop::infeasible()
            } else {
                let _ = i;
                Hop {
                    transform: AffineTransform::identity(),
                    keypoint_error: 0.1,
                    matches: 3,
                    landmark_fallback: false,
                }
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::StitchingFailure(2)));
    }

    #[test]
    fn landmark_fallback_with_no_matches_costs_zero_keypoint_term() {
        let lms: Vec<Point> = vec![
            Point::new(10.0, 10.0),
            Point::new(30.0, 10.0),
            Point::new(20.0, 20.0),
            Point::new(12.0, 30.0),
            Point::new(28.0, 30.0),
        ];
        let moved: Vec<Point> = lms.iter().map(|p| Point::new(p.x + 2.0, p.y - 1.0)).collect();
        let a = FrameFeatures {
            keypoints: vec![],
            landmarks: Some(lms),
        };
        let b = FrameFeatures {
            keypoints: vec![],
            landmarks: Some(moved),
        };
        let hop = estimate_hop(&a, &b, &MatchParams::default());
        assert!(hop.landmark_fallback);
        assert_eq!(hop.keypoint_error, 0.0);
        assert!(hop.transform.max_abs_diff(&AffineTransform::translation(-2.0, 1.0)) < 1e-9);
        let none = estimate_hop(
            &FrameFeatures::default(),
            &FrameFeatures::default(),
            &MatchParams::default(),
        );
        assert!(!none.is_feasible());
    }

    #[test]
    fn middle_template_halves_are_processed_outward() {
        let base: Vec<Point> = vec![
            Point::new(10.0, 10.0),
            Point::new(30.0, 10.0),
            Point::new(20.0, 20.0),
            Point::new(12.0, 30.0),
        ];
        let feats: Vec<FrameFeatures> = (0..7)
            .map(|k| FrameFeatures {
                keypoints: vec![],
                landmarks: Some(base.iter().map(|p| Point::new(p.x + k as f64, p.y)).collect()),
            })
            .collect();
        let plan = align_features(&feats, TemplateMode::Middle, AlignMode::Stitched, &StitchParams::default()).unwrap();
        assert_eq!(plan.template, 3);
        assert_eq!(plan.frames[3].k_hat, None);
        assert_eq!(plan.frames[3].projection, AffineTransform::identity());
        for e in &plan.frames {
            if let Some(kh) = e.k_hat {
                assert!(if e.index > 3 { kh < e.index && kh >= 3 } else { kh > e.index && kh <= 3 });
            }
            let expect = AffineTransform::translation(3.0 - e.index as f64, 0.0);
            assert!(e.projection.max_abs_diff(&expect) < 1e-9);
        }
        // 4 frames forward, 4 backward: 6 + 6 evaluations
        assert_eq!(plan.candidate_evaluations, 12);
    }
}
