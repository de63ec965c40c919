//! Liveness scoring and biometric error rates.
//!
//! A sample is accepted as genuine when `score >= threshold`. Candidate
//! thresholds are the distinct observed scores plus `+∞` (reject all).
//! Labels: 1 genuine (bona fide), 0 spoof (attack).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{StrTensor, ROWS, SEGMENT_LEN};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<(f64, u8)>,
}

impl ScoreSet {
    pub fn new(entries: Vec<(f64, u8)>) -> Result<Self> {
        if let Some((s, l)) = entries.iter().find(|(s, l)| *l > 1 || s.is_nan()) {
            return Err(Error::Metric(format!("invalid entry ({s}, {l})")));
        }
        Ok(ScoreSet { entries })
    }

    pub fn from_parts(scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric("score and label counts differ".into()));
        }
        Self::new(scores.iter().copied().zip(labels.iter().copied()).collect())
    }

    fn counts(&self) -> (usize, usize) {
        let genuine = self.entries.iter().filter(|e| e.1 == 1).count();
        (genuine, self.entries.len() - genuine)
    }

    fn require_both(&self) -> Result<()> {
        let (g, s) = self.counts();
        if g == 0 || s == 0 {
            return Err(Error::Metric(format!("need both classes, got {g} genuine and {s} spoof")));
        }
        Ok(())
    }

    /// `(FAR, FRR)` at threshold `t`: spoofs accepted, genuine rejected.
    pub fn rates_at(&self, t: f64) -> (f64, f64) {
        let (g, s) = self.counts();
        let fa = self.entries.iter().filter(|e| e.1 == 0 && e.0 >= t).count();
        let fr = self.entries.iter().filter(|e| e.1 == 1 && e.0 < t).count();
        (ratio(fa, s), ratio(fr, g))
    }

    /// `(threshold, FAR, FRR)` for every candidate threshold, ascending.
    pub fn sweep(&self) -> Vec<(f64, f64, f64)> {
        let (g, s) = self.counts();
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::new();
        // everything at or above the current threshold is accepted
        let (mut fa, mut fr) = (s, 0usize);
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].0;
            out.push((t, ratio(fa, s), ratio(fr, g)));
            while i < sorted.len() && sorted[i].0 == t {
                if sorted[i].1 == 0 {
                    fa -= 1;
                } else {
                    fr += 1;
                }
                i += 1;
            }
        }
        out.push((f64::INFINITY, ratio(fa, s), ratio(fr, g)));
        out
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Candidate threshold minimizing `|FAR − FRR|` (lowest threshold on ties);
/// the EER is the mean of the two rates there.
pub fn compute_eer(s: &ScoreSet) -> Result<EerPoint> {
    s.require_both()?;
    let mut best: Option<EerPoint> = None;
    for (t, far, frr) in s.sweep() {
        let gap = (far - frr).abs();
        if best.is_none_or(|b| gap < (b.far - b.frr).abs()) {
            best = Some(EerPoint {
                eer: (far + frr) / 2.0,
                threshold: t,
                far,
                frr,
            });
        }
    }
    Ok(best.expect("sweep is never empty"))
}

/// Half total error rate on `test` at the dev-set EER threshold.
pub fn compute_hter(dev: &ScoreSet, test: &ScoreSet) -> Result<f64> {
    let t = compute_eer(dev)?.threshold;
    test.require_both()?;
    let (far, frr) = test.rates_at(t);
    Ok((far + frr) / 2.0)
}

/// Mann–Whitney estimate of `P(genuine > spoof)`, ties counted half.
pub fn compute_auc(s: &ScoreSet) -> Result<f64> {
    s.require_both()?;
    let (g, sp) = s.counts();
    let mut sorted = s.entries.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum over genuine of (#spoof below + half #spoof tied).
    let mut wins = 0.0;
    let mut spoof_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let j = sorted[i..].iter().position(|e| e.0 != t).map_or(sorted.len(), |k| i + k);
        let tied_spoof = sorted[i..j].iter().filter(|e| e.1 == 0).count();
        let tied_genuine = j - i - tied_spoof;
        wins += tied_genuine as f64 * (spoof_below as f64 + 0.5 * tied_spoof as f64);
        spoof_below += tied_spoof;
        i = j;
    }
    Ok(wins / (g as f64 * sp as f64))
}

/// BPCER on `test` at the smallest dev threshold whose APCER is at most
/// `target`.
pub fn bpcer_at_apcer(dev: &ScoreSet, test: &ScoreSet, target: f64) -> Result<f64> {
    let (_, attacks) = dev.counts();
    if attacks == 0 {
        return Err(Error::Metric("development set has no attack samples".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Metric(format!("APCER target {target} outside [0, 1]")));
    }
    if test.counts().0 == 0 {
        return Err(Error::Metric("test set has no bona fide samples".into()));
    }
    let t = dev
        .sweep()
        .into_iter()
        .find(|&(_, apcer, _)| apcer <= target + 1e-12)
        .map(|(t, _, _)| t)
        .expect("+inf threshold always meets the target");
    Ok(test.rates_at(t).1)
}

/// 1 iff strictly more genuine than spoof decisions.
pub fn majority_vote(decisions: &[u8]) -> u8 {
    let ones = decisions.iter().filter(|&&d| d == 1).count();
    u8::from(ones > decisions.len() - ones)
}

/// Lowest and highest frequencies searched by the spectral score, Hz.
pub const SCORE_BAND: (f64, f64) = (0.85, 3.5);
pub const SCORE_FREQ_STEP: f64 = 0.05;
/// Depth index of the filtered G channel.
pub const SCORE_CHANNEL: usize = 1;

/// Energy of the least-squares projection of `x` onto `{sin, cos}` at `f`.
fn projection_energy(x: &[f64], f: f64, fs: f64) -> f64 {
    let (mut ss, mut cc, mut sc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let (s, c) = (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    if det <= 0.0 {
        return 0.0;
    }
    // xᵀ P x with P the projector onto span{s, c}
    (xs * xs * cc - 2.0 * xs * xc * sc + xc * xc * ss) / det
}

/// Fraction of row energy explained by the single in-band frequency that
/// best explains all rows jointly, averaged over rows. Rows are the 24 ROI
/// traces of the filtered G channel (mean removed). An all-zero tensor
/// scores 0.
pub fn spectral_liveness_score(t: &StrTensor) -> f64 {
    let rows: Vec<Vec<f64>> = (0..ROWS)
        .map(|i| {
            let r = t.row(i, SCORE_CHANNEL);
            let m = r.iter().sum::<f64>() / SEGMENT_LEN as f64;
            r.into_iter().map(|v| v - m).collect()
        })
        .collect();
    let energy: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    if energy.iter().all(|&e| e == 0.0) {
        return 0.0;
    }
    let steps = ((SCORE_BAND.1 - SCORE_BAND.0) / SCORE_FREQ_STEP).round() as usize;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for k in 0..=steps {
        let f = SCORE_BAND.0 + k as f64 * SCORE_FREQ_STEP;
        let e: Vec<f64> = rows.iter().map(|r| projection_energy(r, f, 30.0)).collect();
        let mean = e.iter().sum::<f64>() / ROWS as f64;
        if mean > best.0 {
            best = (mean, e);
        }
    }
    let total: f64 = best
        .1
        .iter()
        .zip(&energy)
        .map(|(p, &e)| if e > 0.0 { (p / e).min(1.0) } else { 0.0 })
        .sum();
    total / ROWS as f64
}

/// One row of the scores CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub segment: usize,
    pub score: f64,
    pub label: u8,
}

/// Per-video mean segment score and label, ordered by video id.
pub fn video_scores(records: &[ScoreRecord]) -> Result<Vec<(String, f64, u8)>> {
    let mut by_video: std::collections::BTreeMap<&str, (f64, usize, u8)> = Default::default();
    for r in records {
        let e = by_video.entry(&r.video_id).or_insert((0.0, 0, r.label));
        if e.2 != r.label {
            return Err(Error::Metric(format!("video {} has mixed labels", r.video_id)));
        }
        e.0 += r.score;
        e.1 += 1;
    }
    Ok(by_video
        .into_iter()
        .map(|(id, (sum, n, label))| (id.to_string(), sum / n as f64, label))
        .collect())
}
