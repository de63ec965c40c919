//! Keypoint matching between a reference and a query frame.
//!
//! Initial matching ranks query candidates by the fused distance
//! `d_M = sqrt(d_F + d_S)` of range-normalized feature and spatial distances
//! and applies a ratio test. Fine matching fits independent Gaussians to the
//! feature and spatial distances of the initial matches and keeps the
//! fraction `alpha` with the highest joint log-density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Keypoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub ref_index: usize,
    pub query_index: usize,
    /// Normalized feature distance in [0, 1].
    pub d_f: f64,
    /// Normalized spatial distance in [0, 1].
    pub d_s: f64,
}

impl MatchPair {
    pub fn fused(&self) -> f64 {
        fused_distance(self.d_f, self.d_s)
    }
}

/// Gaussian moments of the initial match distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    pub mu_f: f64,
    pub sigma_f: f64,
    pub mu_s: f64,
    pub sigma_s: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Ratio-test threshold.
    pub delta: f64,
    /// Weight of the spatial term in the joint score.
    pub lambda: f64,
    /// Fraction of initial matches kept by fine matching.
    pub alpha: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            delta: 0.6,
            lambda: 3.0,
            alpha: 0.5,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1]", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} is negative", self.lambda)));
        }
        Ok(())
    }
}

#[inline]
pub fn fused_distance(d_f: f64, d_s: f64) -> f64 {
    (d_f + d_s).sqrt()
}

/// Divides each list by its own maximum; an all-zero list stays zero.
pub fn normalize_distances(raw_feature: &[f64], raw_spatial: &[f64]) -> (Vec<f64>, Vec<f64>) {
    fn by_max(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            v.iter().map(|x| x / m).collect()
        } else {
            vec![0.0; v.len()]
        }
    }
    (by_max(raw_feature), by_max(raw_spatial))
}

/// Nearest-neighbour matching under the fused distance with ratio test
/// `d_M1 <= delta * d_M2`.
///
/// Raw feature (descriptor Euclidean) and spatial (pixel) distances are
/// normalized over the whole reference × query distance matrix. With a
/// single query keypoint the ratio test degenerates to `d_M1 <= delta`.
/// When several reference keypoints claim the same query keypoint only the
/// one with the smallest fused distance survives (lower `ref_index` on ties),
/// so the result is one-to-one. Output is ordered by `ref_index`.
pub fn initial_match(ref_kps: &[Keypoint], query_kps: &[Keypoint], delta: f64) -> Vec<MatchPair> {
    let (nr, nq) = (ref_kps.len(), query_kps.len());
    if nr == 0 || nq == 0 {
        return Vec::new();
    }
    let mut raw_f = Vec::with_capacity(nr * nq);
    let mut raw_s = Vec::with_capacity(nr * nq);
    for r in ref_kps {
        for q in query_kps {
            raw_f.push(r.descriptor.distance(&q.descriptor));
            raw_s.push(r.position.dist(q.position));
        }
    }
    let (d_f, d_s) = normalize_distances(&raw_f, &raw_s);

    let mut best: Vec<Option<MatchPair>> = vec![None; nq];
    for i in 0..nr {
        let row = i * nq;
        let (mut j1, mut m1) = (usize::MAX, f64::INFINITY);
        let mut m2 = f64::INFINITY;
        for j in 0..nq {
            let m = fused_distance(d_f[row + j], d_s[row + j]);
            if m < m1 {
                m2 = m1;
                m1 = m;
                j1 = j;
            } else if m < m2 {
                m2 = m;
            }
        }
        let accepted = if nq >= 2 { m1 <= delta * m2 } else { m1 <= delta };
        if !accepted {
            continue;
        }
        let cand = MatchPair {
            ref_index: i,
            query_index: j1,
            d_f: d_f[row + j1],
            d_s: d_s[row + j1],
        };
        match &best[j1] {
            Some(prev) if prev.fused() <= cand.fused() => {}
            _ => best[j1] = Some(cand),
        }
    }
    let mut out: Vec<MatchPair> = best.into_iter().flatten().collect();
    out.sort_by_key(|m| m.ref_index);
    out
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mu = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Number of matches kept for acceptance rate `alpha`: `ceil(alpha * n)`.
pub fn kept_count(alpha: f64, n: usize) -> usize {
    (((alpha * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Gaussian joint score of a match given fitted moments. A zero standard
/// deviation removes that term.
pub fn joint_score(m: &MatchPair, stats: &MatchStats) -> f64 {
    let mut g = 0.0;
    if stats.sigma_f > 0.0 {
        g -= (m.d_f - stats.mu_f).powi(2) / (2.0 * stats.sigma_f.powi(2));
    }
    if stats.sigma_s > 0.0 {
        g -= stats.lambda * (m.d_s - stats.mu_s).powi(2) / (2.0 * stats.sigma_s.powi(2));
    }
    g
}

pub fn fit_match_stats(initial: &[MatchPair], lambda: f64) -> MatchStats {
    let (mu_f, sigma_f) = moments(initial.iter().map(|m| m.d_f));
    let (mu_s, sigma_s) = moments(initial.iter().map(|m| m.d_s));
    MatchStats {
        mu_f,
        sigma_f,
        mu_s,
        sigma_s,
        lambda,
    }
}

/// Keeps the `ceil(alpha·n)` initial matches with the highest joint
/// Gaussian score, ordered by score descending (ties by ascending
/// `ref_index`). Inputs with fewer than two matches are returned unchanged.
pub fn fine_match(initial: &[MatchPair], lambda: f64, alpha: f64) -> (Vec<MatchPair>, Option<MatchStats>) {
    if initial.len() < 2 {
        return (initial.to_vec(), None);
    }
    let stats = fit_match_stats(initial, lambda);
    let mut scored: Vec<(f64, MatchPair)> = initial.iter().map(|m| (joint_score(m, &stats), *m)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.ref_index.cmp(&b.1.ref_index)));
    let keep = kept_count(alpha, initial.len());
    (scored.into_iter().take(keep).map(|(_, m)| m).collect(), Some(stats))
}

/// Diagnostic alternative to [`fine_match`]: keeps the `ceil(alpha·n)`
/// matches with the smallest fused distance.
pub fn fine_match_by_distance(initial: &[MatchPair], alpha: f64) -> Vec<MatchPair> {
    if initial.len() < 2 {
        return initial.to_vec();
    }
    let mut v = initial.to_vec();
    v.sort_by(|a, b| a.fused().total_cmp(&b.fused()).then(a.ref_index.cmp(&b.ref_index)));
    v.truncate(kept_count(alpha, initial.len()));
    v
}

/// Initial plus fine matching with the given parameters.
pub fn match_keypoints(ref_kps: &[Keypoint], query_kps: &[Keypoint], params: &MatchParams) -> Vec<MatchPair> {
    let initial = initial_match(ref_kps, query_kps, params.delta);
    fine_match(&initial, params.lambda, params.alpha).0
}
