//! Evaluation protocol: overall rates plus repeated stratified dev/test
//! splits, reported as mean ± sample standard deviation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use facepulse::config::PipelineConfig;
use facepulse::metrics::{bpcer_at_apcer, compute_auc, compute_eer, compute_hter, video_scores, ScoreRecord, ScoreSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{CliError, CliResult};

pub const APCER_TARGETS: [f64; 3] = [0.01, 0.05, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// One sample per video: the mean of its segment scores.
    Video,
    /// Every segment is a sample.
    Segment,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scores CSV with columns video_id, segment, score, label.
    pub scores: PathBuf,
    /// Number of random dev/test splits.
    #[arg(long, default_value_t = 20)]
    pub folds: usize,
    #[arg(long, value_enum, default_value_t = Level::Video)]
    pub level: Level,
    /// Metrics JSON destination (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overall {
    pub eer: f64,
    pub eer_threshold: f64,
    pub auc: f64,
    /// BPCER at each APCER target, thresholds chosen on the same set.
    pub bpcer_at_apcer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub dev_eer: f64,
    pub test_hter: f64,
    pub test_auc: f64,
    pub test_bpcer_at_apcer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub seed: u64,
    pub dev_eer: MeanStd,
    pub test_hter: MeanStd,
    pub test_auc: MeanStd,
    pub test_bpcer_at_apcer: BTreeMap<String, MeanStd>,
    pub per_fold: Vec<FoldResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub level: Level,
    pub samples: usize,
    pub genuine: usize,
    pub attacks: usize,
    pub overall: Overall,
    /// Absent when a class has fewer than two samples.
    pub folds: Option<FoldSummary>,
}

fn target_key(t: f64) -> String {
    format!("{t}")
}

pub fn samples_of(records: &[ScoreRecord], level: Level) -> CliResult<Vec<(f64, u8)>> {
    Ok(match level {
        Level::Video => video_scores(records)?.into_iter().map(|(_, s, l)| (s, l)).collect(),
        Level::Segment => records.iter().map(|r| (r.score, r.label)).collect(),
    })
}

/// Stratified split: each class is shuffled and its first half (rounded up)
/// goes to dev. Returns sample indices `(dev, test)`.
pub fn split(labels: &[u8], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut dev, mut test) = (Vec::new(), Vec::new());
    for class in [1u8, 0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let half = idx.len().div_ceil(2);
        dev.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    dev.sort_unstable();
    test.sort_unstable();
    (dev, test)
}

fn subset(samples: &[(f64, u8)], idx: &[usize]) -> CliResult<ScoreSet> {
    Ok(ScoreSet::new(idx.iter().map(|&i| samples[i]).collect())?)
}

pub fn evaluate(samples: &[(f64, u8)], folds: usize, seed: u64, level: Level) -> CliResult<EvalReport> {
    let all = ScoreSet::new(samples.to_vec())?;
    let eer = compute_eer(&all)?;
    let overall = Overall {
        eer: eer.eer,
        eer_threshold: eer.threshold,
        auc: compute_auc(&all)?,
        bpcer_at_apcer: APCER_TARGETS
            .iter()
            .map(|&t| Ok((target_key(t), bpcer_at_apcer(&all, &all, t)?)))
            .collect::<CliResult<_>>()?,
    };
    let labels: Vec<u8> = samples.iter().map(|s| s.1).collect();
    let genuine = labels.iter().filter(|&&l| l == 1).count();
    let attacks = labels.len() - genuine;

    let fold_summary = if folds == 0 || genuine < 2 || attacks < 2 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_fold = Vec::with_capacity(folds);
        for _ in 0..folds {
            let (d, t) = split(&labels, &mut rng);
            let (dev, test) = (subset(samples, &d)?, subset(samples, &t)?);
            per_fold.push(FoldResult {
                dev_eer: compute_eer(&dev)?.eer,
                test_hter: compute_hter(&dev, &test)?,
                test_auc: compute_auc(&test)?,
                test_bpcer_at_apcer: APCER_TARGETS
                    .iter()
                    .map(|&x| Ok((target_key(x), bpcer_at_apcer(&dev, &test, x)?)))
                    .collect::<CliResult<_>>()?,
            });
        }
        let stat = |f: &dyn Fn(&FoldResult) -> f64| MeanStd::of(&per_fold.iter().map(f).collect::<Vec<_>>());
        Some(FoldSummary {
            folds,
            seed,
            dev_eer: stat(&|r| r.dev_eer),
            test_hter: stat(&|r| r.test_hter),
            test_auc: stat(&|r| r.test_auc),
            test_bpcer_at_apcer: APCER_TARGETS
                .iter()
                .map(|&x| (target_key(x), stat(&|r| r.test_bpcer_at_apcer[&target_key(x)])))
                .collect(),
            per_fold,
        })
    };
    Ok(EvalReport {
        level,
        samples: samples.len(),
        genuine,
        attacks,
        overall,
        folds: fold_summary,
    })
}

pub fn read_scores(path: &PathBuf) -> CliResult<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let records = r
        .deserialize()
        .collect::<Result<Vec<ScoreRecord>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(bad) = records.iter().find(|r| r.label > 1 || !r.score.is_finite()) {
        return Err(CliError::Input(format!("{}: invalid row {bad:?}", path.display())));
    }
    Ok(records)
}

pub fn eval(a: &EvalArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let records = read_scores(&a.scores)?;
    let samples = samples_of(&records, a.level)?;
    let report = evaluate(&samples, a.folds, cfg.seed, a.level)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Exhaustive sweep over distinct scores plus +∞.
    fn sweep_oracle(dev: &[(f64, u8)], test: &[(f64, u8)]) -> (f64, f64, f64) {
        let rates = |s: &[(f64, u8)], t: f64| {
            let g = s.iter().filter(|e| e.1 == 1).count() as f64;
            let a = s.len() as f64 - g;
            (
                s.iter().filter(|e| e.1 == 0 && e.0 >= t).count() as f64 / a,
                s.iter().filter(|e| e.1 == 1 && e.0 < t).count() as f64 / g,
            )
        };
        let mut ts: Vec<f64> = dev.iter().map(|e| e.0).chain([f64::INFINITY]).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let (mut gap, mut eer, mut thr) = (f64::INFINITY, 0.0, 0.0);
        for &t in &ts {
            let (far, frr) = rates(dev, t);
            if (far - frr).abs() < gap {
                gap = (far - frr).abs();
                eer = (far + frr) / 2.0;
                thr = t;
            }
        }
        let (far, frr) = rates(test, thr);
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for g in test.iter().filter(|e| e.1 == 1) {
            for a in test.iter().filter(|e| e.1 == 0) {
                pairs += 1.0;
                wins += if g.0 > a.0 { 1.0 } else if g.0 == a.0 { 0.5 } else { 0.0 };
            }
        }
        (eer, (far + frr) / 2.0, wins / pairs)
    }

    fn random_samples(seed: u64, n: usize) -> Vec<(f64, u8)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l = u8::from(rng.random_bool(0.5));
                (((rng.random_range(0.0..1.0) + 0.4 * l as f64) * 10.0).round() / 10.0, l)
            })
            .collect()
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels = [1, 1, 1, 0, 0, 0, 0, 1, 0];
        let (d1, t1) = split(&labels, &mut ChaCha8Rng::seed_from_u64(4));
        let (d2, t2) = split(&labels, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!((&d1, &t1), (&d2, &t2));
        let count = |idx: &[usize], c: u8| idx.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!((count(&d1, 1), count(&d1, 0), count(&t1, 1), count(&t1, 0)), (2, 3, 2, 2));
        let mut all: Vec<usize> = d1.iter().chain(&t1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn folds_match_sweep_oracle() {
        let samples = random_samples(9, 60);
        let report = evaluate(&samples, 5, 17, Level::Segment).unwrap();
        let folds = report.folds.unwrap();
        let labels: Vec<u8> = samples.iter().map(|s| s.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for fold in &folds.per_fold {
            let (d, t) = split(&labels, &mut rng);
            let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i]).collect::<Vec<_>>();
            let (eer, hter, auc) = sweep_oracle(&pick(&d), &pick(&t));
            assert!((fold.dev_eer - eer).abs() < 1e-12);
            assert!((fold.test_hter - hter).abs() < 1e-12);
            assert!((fold.test_auc - auc).abs() < 1e-12);
        }
        let hters: Vec<f64> = folds.per_fold.iter().map(|f| f.test_hter).collect();
        let m = hters.iter().sum::<f64>() / 5.0;
        let sd = (hters.iter().map(|h| (h - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((folds.test_hter.mean - m).abs() < 1e-12 && (folds.test_hter.std - sd).abs() < 1e-12);
    }

    #[test]
    fn separable_scores_give_zero_eer() {
        let samples = vec![(0.9, 1), (0.8, 1), (0.7, 1), (0.3, 0), (0.2, 0), (0.1, 0)];
        let r = evaluate(&samples, 4, 0, Level::Video).unwrap();
        assert_eq!(r.overall.eer, 0.0);
        assert_eq!(r.overall.auc, 1.0);
        let f = r.folds.unwrap();
        // the dev threshold sits at the lowest dev genuine score, so a lower
        // test genuine score can still be rejected
        assert_eq!((f.dev_eer.mean, f.test_auc.mean), (0.0, 1.0));
    }

    #[test]
    fn single_class_is_an_input_error() {
        let samples = vec![(0.9, 1), (0.8, 1)];
        assert!(matches!(evaluate(&samples, 4, 0, Level::Video), Err(CliError::Input(_))));
    }

    #[test]
    fn too_few_per_class_skips_folds() {
        let samples = vec![(0.9, 1), (0.8, 1), (0.1, 0)];
        assert!(evaluate(&samples, 4, 0, Level::Video).unwrap().folds.is_none());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
