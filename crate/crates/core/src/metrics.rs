//! Threshold-free and threshold-sweep evaluation metrics.
//!
//! Conventions shared by every metric here:
//! - scores are oriented "higher means in-distribution";
//! - a sample is predicted in-distribution when `score >= θ`;
//! - ID is the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::nearest_rank_percentile;

/// Default size of the mOAA threshold grid.
pub const DEFAULT_OAA_THRESHOLDS: usize = 100;

fn check_sides(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyInput(format!(
            "need at least one ID and one OOD score (got {} and {})",
            id.len(),
            ood.len()
        )));
    }
    if let Some(v) = id.iter().chain(ood).find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {v}")));
    }
    Ok(())
}

/// Pools both sides, sorted by descending score.
fn pooled_desc<'a>(id: &'a [f64], ood: &'a [f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// Splits a descending-sorted slice into runs of equal score.
fn tie_groups<T>(sorted: &[T], key: impl Fn(&T) -> f64) -> impl Iterator<Item = &[T]> {
    sorted.chunk_by(move |a, b| key(a) == key(b))
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks (ties count one half).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_sides(id_scores, ood_scores)?;
    let mut all = pooled_desc(id_scores, ood_scores);
    all.reverse();
    let mut rank_sum_id = 0.0;
    let mut start = 0usize;
    for group in tie_groups(&all, |p| p.0) {
        // ranks start..start+len (1-based) share their average
        let len = group.len();
        let avg = start as f64 + (len as f64 + 1.0) / 2.0;
        let ids = group.iter().filter(|p| p.1).count();
        rank_sum_id += avg * ids as f64;
        start += len;
    }
    let m = id_scores.len() as f64;
    let n = ood_scores.len() as f64;
    let u = rank_sum_id - m * (m + 1.0) / 2.0;
    Ok(u / (m * n))
}

/// Area under the precision-recall curve with ID as the positive class,
/// step-interpolated over every distinct score threshold.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_sides(id_scores, ood_scores)?;
    let all = pooled_desc(id_scores, ood_scores);
    let m = id_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for group in tie_groups(&all, |p| p.0) {
        let ids = group.iter().filter(|p| p.1).count();
        tp += ids;
        fp += group.len() - ids;
        let recall = tp as f64 / m;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Open-set classification rate: area under correct-classification rate
/// against false-positive rate as the threshold sweeps every distinct score.
pub fn oscr(id_scores: &[f64], id_correct: &[bool], ood_scores: &[f64]) -> Result<f64> {
    check_sides(id_scores, ood_scores)?;
    if id_correct.len() != id_scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ID scores but {} correctness flags",
            id_scores.len(),
            id_correct.len()
        )));
    }
    // (score, is_id, correct)
    let mut all: Vec<(f64, bool, bool)> = id_scores
        .iter()
        .zip(id_correct)
        .map(|(&s, &c)| (s, true, c))
        .chain(ood_scores.iter().map(|&s| (s, false, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let m = id_scores.len() as f64;
    let n = ood_scores.len() as f64;
    let (mut correct, mut fp) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_ccr) = (0.0, 0.0);
    let mut area = 0.0;
    for group in tie_groups(&all, |p| p.0) {
        correct += group.iter().filter(|p| p.1 && p.2).count();
        fp += group.iter().filter(|p| !p.1).count();
        let fpr = fp as f64 / n;
        let ccr = correct as f64 / m;
        area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
        prev_fpr = fpr;
        prev_ccr = ccr;
    }
    Ok(area)
}

/// One scored test sample paired with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScoredSample {
    pub score: f64,
    pub is_id: bool,
    /// Whether the closed-set prediction was right; `None` for semantic OOD.
    pub class_correct: Option<bool>,
}

/// Inputs to outlier-aware accuracy. Covariate-shifted samples belong in the
/// ID set with their class-correctness flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OaaInputs {
    pub id_scores: Vec<f64>,
    pub id_correct: Vec<bool>,
    pub ood_scores: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl OaaInputs {
    pub fn new(
        id_scores: Vec<f64>,
        id_correct: Vec<bool>,
        ood_scores: Vec<f64>,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        if id_scores.len() != id_correct.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ID scores but {} correctness flags",
                id_scores.len(),
                id_correct.len()
            )));
        }
        if id_scores.is_empty() && ood_scores.is_empty() {
            return Err(Error::EmptyInput("OAA needs at least one sample".into()));
        }
        if thresholds.is_empty() {
            return Err(Error::EmptyInput("OAA needs at least one threshold".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|t| !t.is_finite())
        {
            return Err(Error::InvalidArgument(
                "thresholds must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            id_scores,
            id_correct,
            ood_scores,
            thresholds,
        })
    }

    /// Uses [`default_thresholds`] over the pooled scores.
    pub fn with_default_thresholds(
        id_scores: Vec<f64>,
        id_correct: Vec<bool>,
        ood_scores: Vec<f64>,
    ) -> Result<Self> {
        let pooled: Vec<f64> = id_scores.iter().chain(&ood_scores).copied().collect();
        let thresholds = default_thresholds(&pooled, DEFAULT_OAA_THRESHOLDS)?;
        Self::new(id_scores, id_correct, ood_scores, thresholds)
    }

    pub fn from_samples(samples: &[BinaryScoredSample], thresholds: Vec<f64>) -> Result<Self> {
        let mut id_scores = Vec::new();
        let mut id_correct = Vec::new();
        let mut ood_scores = Vec::new();
        for s in samples {
            if s.is_id || s.class_correct.is_some() {
                id_scores.push(s.score);
                id_correct.push(s.class_correct.unwrap_or(false));
            } else {
                ood_scores.push(s.score);
            }
        }
        Self::new(id_scores, id_correct, ood_scores, thresholds)
    }

    fn total(&self) -> usize {
        self.id_scores.len() + self.ood_scores.len()
    }
}

/// `N` evenly spaced nearest-rank quantiles (0 % to 100 %) of the pooled
/// scores, deduplicated so the grid is strictly increasing.
pub fn default_thresholds(pooled: &[f64], n: usize) -> Result<Vec<f64>> {
    if pooled.is_empty() || n == 0 {
        return Err(Error::EmptyInput(
            "threshold grid needs scores and n >= 1".into(),
        ));
    }
    let mut scratch = pooled.to_vec();
    let mut grid: Vec<f64> = (0..n)
        .map(|i| {
            let p = if n == 1 {
                50.0
            } else {
                100.0 * i as f64 / (n - 1) as f64
            };
            nearest_rank_percentile(&mut scratch, p)
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Outlier-aware accuracy at one threshold: samples predicted ID with a
/// correct class, plus true OOD samples predicted OOD, over all samples.
pub fn oaa(inputs: &OaaInputs, threshold: f64) -> f64 {
    let correct_in = inputs
        .id_scores
        .iter()
        .zip(&inputs.id_correct)
        .filter(|&(&s, &c)| c && s >= threshold)
        .count();
    let rejected_out = inputs.ood_scores.iter().filter(|&&s| s < threshold).count();
    (correct_in + rejected_out) as f64 / inputs.total() as f64
}

/// Mean OAA over the configured threshold grid.
pub fn moaa(inputs: &OaaInputs) -> f64 {
    let sum: f64 = inputs.thresholds.iter().map(|&t| oaa(inputs, t)).sum();
    sum / inputs.thresholds.len() as f64
}

/// Fraction of correct predictions, or `None` for an empty slice.
pub fn accuracy(correct: &[bool]) -> Option<f64> {
    (!correct.is_empty())
        .then(|| correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    for group in idx.chunk_by(|&a, &b| values[a] == values[b]) {
        let avg = start as f64 + (group.len() as f64 + 1.0) / 2.0;
        for &i in group {
            ranks[i] = avg;
        }
        start += group.len();
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &a in id {
            for &b in ood {
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (id.len() * ood.len()) as f64
    }

    /// Precision-recall area by enumerating every candidate threshold.
    fn brute_aupr(id: &[f64], ood: &[f64]) -> f64 {
        let mut ts: Vec<f64> = id.iter().chain(ood).copied().collect();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let mut prev_r = 0.0;
        let mut area = 0.0;
        for t in ts {
            let tp = id.iter().filter(|&&s| s >= t).count() as f64;
            let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
            let r = tp / id.len() as f64;
            area += (r - prev_r) * tp / (tp + fp);
            prev_r = r;
        }
        area
    }

    fn brute_oscr(id: &[f64], correct: &[bool], ood: &[f64]) -> f64 {
        let mut ts: Vec<f64> = id.iter().chain(ood).copied().collect();
        ts.push(f64::NEG_INFINITY);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let ccr = id
                    .iter()
                    .zip(correct)
                    .filter(|&(&s, &c)| c && s > t)
                    .count() as f64
                    / id.len() as f64;
                let fpr = ood.iter().filter(|&&s| s > t).count() as f64 / ood.len() as f64;
                (fpr, ccr)
            })
            .collect();
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[1.0; 3]).unwrap(), 0.5);
        let v = auroc(&[0.9, 0.8, 0.4], &[0.7, 0.3, 0.2]).unwrap();
        assert_eq!(v, brute_auroc(&[0.9, 0.8, 0.4], &[0.7, 0.3, 0.2]));
        assert!((v - 8.0 / 9.0).abs() < 1e-15);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(aupr(&[1.0], &[0.0]).unwrap(), 1.0);
        let id = [0.9, 0.5, 0.5];
        let ood = [0.7, 0.5, 0.1];
        assert!((aupr(&id, &ood).unwrap() - brute_aupr(&id, &ood)).abs() < 1e-12);
        assert!(aupr(&[1.0], &[]).is_err());
    }

    #[test]
    fn oscr_cases() {
        assert_eq!(oscr(&[2.0, 3.0], &[true, true], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            oscr(&[2.0, 3.0], &[false, false], &[0.0, 1.0]).unwrap(),
            0.0
        );
        let id = [0.8, 0.6, 0.3];
        let correct = [true, false, true];
        let ood = [0.7, 0.2];
        let expected = brute_oscr(&id, &correct, &ood);
        assert!((oscr(&id, &correct, &ood).unwrap() - expected).abs() < 1e-12);
        assert!(oscr(&id, &[true], &ood).is_err());
    }

    #[test]
    fn oaa_counting() {
        let ideal =
            OaaInputs::new(vec![2.0, 3.0], vec![true, true], vec![0.0, 1.0], vec![1.5]).unwrap();
        assert_eq!(oaa(&ideal, 1.5), 1.0);
        // 3 ID: two correct and above θ, one below θ; 1 OOD below θ.
        let mixed = OaaInputs::new(
            vec![5.0, 4.0, 0.5],
            vec![true, true, true],
            vec![0.2],
            vec![1.0],
        )
        .unwrap();
        assert_eq!(oaa(&mixed, 1.0), 0.75);
        let no_ood = OaaInputs::new(vec![1.0, 2.0], vec![true, true], vec![], vec![0.0]).unwrap();
        assert_eq!(oaa(&no_ood, 0.0), 1.0);
    }

    #[test]
    fn moaa_cases() {
        let single = OaaInputs::new(
            vec![5.0, 4.0, 0.5],
            vec![true, false, true],
            vec![0.2],
            vec![1.0],
        )
        .unwrap();
        assert_eq!(moaa(&single), oaa(&single, 1.0));
        // every threshold separates perfectly → constant OAA of 1
        let flat = OaaInputs::new(
            vec![5.0, 6.0],
            vec![true, true],
            vec![0.0, 1.0],
            vec![2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(moaa(&flat), 1.0);
        assert!(OaaInputs::new(vec![1.0], vec![true], vec![], vec![]).is_err());
        assert!(OaaInputs::new(vec![1.0], vec![true], vec![], vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn moaa_drops_when_predictions_are_corrupted() {
        let id: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.1).collect();
        let ood: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let clean =
            OaaInputs::with_default_thresholds(id.clone(), vec![true; 50], ood.clone()).unwrap();
        let mut flags = vec![true; 50];
        for f in flags.iter_mut().step_by(5) {
            *f = false;
        }
        let corrupted = OaaInputs::new(id, flags, ood, clean.thresholds.clone()).unwrap();
        assert!(moaa(&corrupted) < moaa(&clean));
    }

    #[test]
    fn from_samples_routes_covariate_to_id() {
        let samples = [
            BinaryScoredSample {
                score: 1.0,
                is_id: true,
                class_correct: Some(true),
            },
            BinaryScoredSample {
                score: 0.5,
                is_id: false,
                class_correct: Some(false),
            },
            BinaryScoredSample {
                score: 0.1,
                is_id: false,
                class_correct: None,
            },
        ];
        let inputs = OaaInputs::from_samples(&samples, vec![0.3]).unwrap();
        assert_eq!(inputs.id_scores, vec![1.0, 0.5]);
        assert_eq!(inputs.ood_scores, vec![0.1]);
        assert!((oaa(&inputs, 0.3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn default_threshold_grid() {
        let g = default_thresholds(&[3.0, 1.0, 2.0], 100).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 3.0]);
        let g = default_thresholds(&(0..1000).map(f64::from).collect::<Vec<_>>(), 100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!((g[0], g[99]), (0.0, 999.0));
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..6).prop_map(|k| k as f64 * 0.5), 1..max_len)
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(id in tied_scores(60), ood in tied_scores(60)) {
            let fast = auroc(&id, &ood).unwrap();
            prop_assert!((fast - brute_auroc(&id, &ood)).abs() < 1e-12);
            let back = auroc(&ood, &id).unwrap();
            prop_assert_eq!(fast + back, 1.0);
        }

        #[test]
        fn auroc_monotone_invariant(id in prop::collection::vec(-3.0f64..3.0, 1..40), ood in prop::collection::vec(-3.0f64..3.0, 1..40)) {
            let t = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&t(&id), &t(&ood)).unwrap());
        }

        #[test]
        fn aupr_and_oscr_match_oracles(id in tied_scores(30), ood in tied_scores(30), seed in any::<u64>()) {
            prop_assert!((aupr(&id, &ood).unwrap() - brute_aupr(&id, &ood)).abs() < 1e-12);
            let correct: Vec<bool> = (0..id.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assert!((oscr(&id, &correct, &ood).unwrap() - brute_oscr(&id, &correct, &ood)).abs() < 1e-12);
            // all-correct OSCR is the ROC area
            let all = vec![true; id.len()];
            prop_assert!((oscr(&id, &all, &ood).unwrap() - brute_auroc(&id, &ood)).abs() < 1e-12);
        }

        #[test]
        fn oaa_bounded(id in tied_scores(30), ood in tied_scores(30), seed in any::<u64>()) {
            let correct: Vec<bool> = (0..id.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let inputs = OaaInputs::with_default_thresholds(id, correct, ood).unwrap();
            for &t in &inputs.thresholds {
                let v = oaa(&inputs, t);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let m = moaa(&inputs);
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
