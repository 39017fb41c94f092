//! Agreement and robustness statistics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, AttributionRanking, AttributionVector, Evaluator};
use crate::corpus::{Rubric, TokenizedEssay};
use crate::scorer::ScaledScore;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("rater vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("score {score} outside rubric {min}..={max}")]
    OutOfRange { score: i64, min: i64, max: i64 },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("token mapping does not match the rankings: {0}")]
    UnmatchedMapping(String),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// Quadratic weighted kappa over the categories `min..=max` of `rubric`.
///
/// `1 - sum(w * O) / sum(w * E)` with `w_ij = (i - j)^2 / (K - 1)^2`, `O` the
/// observed confusion counts and `E` the outer product of the two histograms
/// divided by the sample count. Defined as 1 when `sum(w * E) == 0`.
pub fn qwk(rater_a: &[i64], rater_b: &[i64], rubric: &Rubric) -> Result<f64, MetricsError> {
    if rater_a.len() != rater_b.len() {
        return Err(MetricsError::LengthMismatch(rater_a.len(), rater_b.len()));
    }
    if rater_a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = rubric.category_count();
    let cat = |s: i64| -> Result<usize, MetricsError> {
        if rubric.contains(s) {
            Ok((s - rubric.min_score) as usize)
        } else {
            Err(MetricsError::OutOfRange {
                score: s,
                min: rubric.min_score,
                max: rubric.max_score,
            })
        }
    };
    let mut observed = vec![0.0; k * k];
    let mut hist_a = vec![0.0; k];
    let mut hist_b = vec![0.0; k];
    for (&a, &b) in rater_a.iter().zip(rater_b) {
        let (i, j) = (cat(a)?, cat(b)?);
        observed[i * k + j] += 1.0;
        hist_a[i] += 1.0;
        hist_b[j] += 1.0;
    }
    let n = rater_a.len() as f64;
    let denom = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / denom;
            num += w * observed[i * k + j];
            den += w * hist_a[i] * hist_b[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub qwk: f64,
    /// `qwk / baseline_qwk`.
    pub relative_qwk: f64,
    pub n_samples: usize,
}

pub fn agreement(
    human: &[i64],
    predicted: &[i64],
    rubric: &Rubric,
    baseline_qwk: f64,
) -> Result<AgreementReport, MetricsError> {
    let q = qwk(human, predicted, rubric)?;
    Ok(AgreementReport {
        qwk: q,
        relative_qwk: q / baseline_qwk,
        n_samples: human.len(),
    })
}

/// Distribution of score changes, every field in percent.
///
/// `mu_*` and `sigma` are relative to the rubric range; `n_*` are shares of
/// samples. Zero changes count towards neither `n_pos` nor `n_neg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ImpactStats {
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub n_pos: f64,
    pub n_neg: f64,
    /// Population standard deviation of all changes.
    pub sigma: f64,
}

/// [`ImpactStats`] of raw differences `d_i` (rubric units) on a rubric of width `range`.
pub fn impact_stats_from_diffs(diffs: &[f64], range: f64) -> Result<ImpactStats, MetricsError> {
    if diffs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = diffs.len() as f64;
    let pct = |v: f64| 100.0 * v / range;
    let pos: Vec<f64> = diffs.iter().copied().filter(|&d| d > 0.0).collect();
    let neg: Vec<f64> = diffs.iter().copied().filter(|&d| d < 0.0).map(f64::abs).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let avg = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - avg) * (d - avg)).sum::<f64>() / n;
    Ok(ImpactStats {
        mu_pos: pct(mean(&pos)),
        mu_neg: pct(mean(&neg)),
        n_pos: 100.0 * pos.len() as f64 / n,
        n_neg: 100.0 * neg.len() as f64 / n,
        sigma: pct(var.sqrt()),
    })
}

/// [`ImpactStats`] of `perturbed - original` scaled scores.
pub fn impact_stats(
    original: &[ScaledScore],
    perturbed: &[ScaledScore],
    rubric: &Rubric,
) -> Result<ImpactStats, MetricsError> {
    if original.len() != perturbed.len() {
        return Err(MetricsError::LengthMismatch(original.len(), perturbed.len()));
    }
    let diffs: Vec<f64> = original
        .iter()
        .zip(perturbed)
        .map(|(o, p)| p.scaled - o.scaled)
        .collect();
    impact_stats_from_diffs(&diffs, rubric.range())
}

fn check_frac(f: f64) -> Result<(), MetricsError> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidFraction(f))
    }
}

/// Percentage of `injected` token indices that land in the top `k_frac` of `attr`.
pub fn overlap_top_k(attr: &AttributionVector, injected: &[usize], k_frac: f64) -> Result<f64, MetricsError> {
    check_frac(k_frac)?;
    if injected.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = injected.iter().find(|&&i| i >= attr.len()) {
        return Err(MetricsError::IndexOutOfRange {
            index: bad,
            len: attr.len(),
        });
    }
    let top = attr.rank().top_set(k_frac);
    let hits = injected.iter().filter(|i| top.contains(i)).count();
    Ok(100.0 * hits as f64 / injected.len() as f64)
}

fn check_origin(before_len: usize, after_len: usize, origin: &[Option<usize>]) -> Result<(), MetricsError> {
    if origin.len() != after_len {
        return Err(MetricsError::UnmatchedMapping(format!(
            "{} mapping entries for {after_len} perturbed tokens",
            origin.len()
        )));
    }
    if let Some(bad) = origin.iter().flatten().find(|&&i| i >= before_len) {
        return Err(MetricsError::UnmatchedMapping(format!(
            "original index {bad} out of range for {before_len} tokens"
        )));
    }
    Ok(())
}

/// Percentage of the original top-`frac` tokens that are no longer in the
/// perturbed top-`frac` set.
///
/// `origin[k]` is the original index of perturbed token `k` (`None` for tokens
/// with no counterpart, e.g. injected ones).
pub fn attribution_churn(
    before: &AttributionRanking,
    after: &AttributionRanking,
    origin: &[Option<usize>],
    frac: f64,
) -> Result<f64, MetricsError> {
    check_frac(frac)?;
    check_origin(before.len(), after.len(), origin)?;
    let before_top = before.top_set(frac);
    if before_top.is_empty() {
        return Err(MetricsError::Empty);
    }
    let after_top: BTreeSet<usize> = after.top(frac).iter().filter_map(|&k| origin[k]).collect();
    let exited = before_top.difference(&after_top).count();
    Ok(100.0 * exited as f64 / before_top.len() as f64)
}

/// Percentage of the original top-`frac` tokens whose attribution changes sign
/// in the perturbed essay. Tokens that did not survive are not counted as flips.
pub fn sign_flip_churn(
    before: &AttributionVector,
    after: &AttributionVector,
    origin: &[Option<usize>],
    frac: f64,
) -> Result<f64, MetricsError> {
    check_frac(frac)?;
    check_origin(before.len(), after.len(), origin)?;
    let before_top = before.rank().top_set(frac);
    if before_top.is_empty() {
        return Err(MetricsError::Empty);
    }
    let flips = origin
        .iter()
        .enumerate()
        .filter_map(|(k, o)| o.map(|i| (k, i)))
        .filter(|(_, i)| before_top.contains(i))
        .filter(|&(k, i)| before.per_token[i].signum() * after.per_token[k].signum() < 0.0)
        .count();
    Ok(100.0 * flips as f64 / before_top.len() as f64)
}

/// Smallest share `k / n` of top-attributed tokens (kept in original order)
/// whose essay scores within `tolerance` rubric points of the full essay.
/// Scans `k = 1..=n`; the full essay always qualifies.
pub fn recovery_fraction(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    tolerance: f64,
) -> Result<f64, MetricsError> {
    let n = essay.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let original = evaluator.evaluate(essay)?;
    let ranking = original.attribution.rank();
    for k in 1..n {
        let mut kept = ranking.highest(k).to_vec();
        kept.sort_unstable();
        let partial = essay
            .retain_indices(&kept)
            .map_err(|e| MetricsError::UnmatchedMapping(e.to_string()))?;
        let s = evaluator.score(&partial)?;
        if (s.scaled - original.score.scaled).abs() <= tolerance {
            return Ok(k as f64 / n as f64);
        }
    }
    Ok(1.0)
}

/// One point of a relative-QWK curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_samples: usize,
    pub qwk: f64,
    pub relative_qwk: f64,
    pub impact: ImpactStats,
}

/// Agreement of perturbed predictions with human scores, relative to the
/// agreement of the unperturbed predictions.
pub fn curve_point(
    fraction: f64,
    human: &[i64],
    original: &[ScaledScore],
    perturbed: &[ScaledScore],
    rubric: &Rubric,
) -> Result<CurvePoint, MetricsError> {
    let base: Vec<i64> = original.iter().map(ScaledScore::category).collect();
    let pert: Vec<i64> = perturbed.iter().map(ScaledScore::category).collect();
    let base_qwk = qwk(human, &base, rubric)?;
    let report = agreement(human, &pert, rubric, base_qwk)?;
    Ok(CurvePoint {
        fraction,
        n_samples: report.n_samples,
        qwk: report.qwk,
        relative_qwk: report.relative_qwk,
        impact: impact_stats(original, perturbed, rubric)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::IGConfig;
    use crate::corpus::tokenize;
    use crate::embedding::EmbeddingTable;
    use crate::scorer::LinearBowScorer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise form: `1 - sum_n (a_n - b_n)^2 / (1/N) sum_n sum_m (a_n - b_m)^2`.
    fn brute_force_qwk(a: &[i64], b: &[i64]) -> f64 {
        let n = a.len() as f64;
        let observed: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) * (x - y)) as f64).sum();
        let expected: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| ((x - y) * (x - y)) as f64))
            .sum::<f64>()
            / n;
        if expected == 0.0 {
            1.0
        } else {
            1.0 - observed / expected
        }
    }

    fn rubric(min: i64, max: i64) -> Rubric {
        Rubric::new("P", min, max).unwrap()
    }

    #[test]
    fn qwk_examples() {
        assert_eq!(qwk(&[0, 1, 2], &[0, 1, 2], &rubric(0, 2)).unwrap(), 1.0);
        assert_eq!(qwk(&[0, 1], &[1, 0], &rubric(0, 1)).unwrap(), -1.0);
        assert_eq!(qwk(&[3, 3, 3], &[3, 3, 3], &rubric(0, 5)).unwrap(), 1.0);
        assert_eq!(qwk(&[0, 0], &[1, 1], &rubric(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn qwk_errors() {
        assert!(matches!(
            qwk(&[0], &[0, 1], &rubric(0, 1)),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
        assert!(matches!(qwk(&[], &[], &rubric(0, 1)), Err(MetricsError::Empty)));
        assert!(matches!(
            qwk(&[0, 5], &[0, 1], &rubric(0, 4)),
            Err(MetricsError::OutOfRange { score: 5, .. })
        ));
    }

    #[test]
    fn qwk_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = rubric(2, 12);
        for _ in 0..100 {
            let a: Vec<i64> = (0..50).map(|_| rng.random_range(2..=12)).collect();
            let b: Vec<i64> = (0..50).map(|_| rng.random_range(2..=12)).collect();
            assert!((qwk(&a, &b, &r).unwrap() - brute_force_qwk(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn impact_examples() {
        let s = impact_stats_from_diffs(&[0.0, 0.0, 0.0], 10.0).unwrap();
        assert_eq!(s, ImpactStats::default());
        let s = impact_stats_from_diffs(&[1.0, -2.0, 0.0], 10.0).unwrap();
        assert!((s.mu_pos - 10.0).abs() < 0.01);
        assert!((s.mu_neg - 20.0).abs() < 0.01);
        assert!((s.n_pos - 33.33).abs() < 0.01);
        assert!((s.n_neg - 33.33).abs() < 0.01);
        assert!((s.sigma - 12.47).abs() < 0.01);
        let s = impact_stats_from_diffs(&[-5.0], 10.0).unwrap();
        assert_eq!((s.mu_neg, s.n_neg, s.sigma, s.n_pos), (50.0, 100.0, 0.0, 0.0));
        assert!(impact_stats_from_diffs(&[], 10.0).is_err());
        let r = rubric(0, 10);
        assert!(impact_stats(&[ScaledScore::new(0.1, &r)], &[], &r).is_err());
    }

    fn attr(per_token: Vec<f64>) -> AttributionVector {
        AttributionVector {
            raw_delta: per_token.iter().sum(),
            per_token,
            input_score: 0.0,
            baseline_score: 0.0,
            completeness_error: 0.0,
            config: IGConfig::default(),
        }
    }

    #[test]
    fn overlap_examples() {
        let a = attr(vec![0.9, 0.1, 0.0, 0.05, 0.8, 0.2, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(overlap_top_k(&a, &[0, 4], 0.2).unwrap(), 100.0);
        assert_eq!(overlap_top_k(&a, &[1, 2], 0.2).unwrap(), 0.0);
        assert_eq!(overlap_top_k(&a, &[0, 1], 0.2).unwrap(), 50.0);
        assert!(overlap_top_k(&a, &[], 0.2).is_err());
        assert!(overlap_top_k(&a, &[10], 0.2).is_err());
        assert!(overlap_top_k(&a, &[0], 0.0).is_err());
    }

    #[test]
    fn churn_examples() {
        let before = AttributionRanking {
            order: vec![1, 2, 0, 3, 4, 5, 6, 7, 8, 9],
        };
        let identity: Vec<Option<usize>> = (0..10).map(Some).collect();
        assert_eq!(attribution_churn(&before, &before, &identity, 0.2).unwrap(), 0.0);
        let after = AttributionRanking {
            order: vec![2, 7, 0, 1, 3, 4, 5, 6, 8, 9],
        };
        assert_eq!(attribution_churn(&before, &after, &identity, 0.2).unwrap(), 50.0);
        let disjoint = AttributionRanking {
            order: vec![8, 9, 0, 1, 2, 3, 4, 5, 6, 7],
        };
        assert_eq!(attribution_churn(&before, &disjoint, &identity, 0.2).unwrap(), 100.0);
        assert!(attribution_churn(&before, &after, &identity[..9], 0.2).is_err());
        let mut bad = identity.clone();
        bad[0] = Some(42);
        assert!(attribution_churn(&before, &after, &bad, 0.2).is_err());
    }

    #[test]
    fn sign_flips() {
        let before = attr(vec![0.5, 0.4, -0.1, 0.0]);
        let after = attr(vec![-0.5, 0.4, 0.3, 0.0]);
        let identity: Vec<Option<usize>> = (0..4).map(Some).collect();
        assert_eq!(sign_flip_churn(&before, &after, &identity, 0.5).unwrap(), 50.0);
        assert_eq!(sign_flip_churn(&before, &before, &identity, 0.5).unwrap(), 0.0);
    }

    fn axis_table() -> EmbeddingTable {
        EmbeddingTable::from_pairs(1, (0..10).map(|k| (format!("w{k}"), vec![k as f64]))).unwrap()
    }

    #[test]
    fn recovery_with_constant_and_dominant_scorers() {
        let table = axis_table();
        let r = rubric(0, 10);
        let e = tokenize("w1 w2 w3 w4 w5").unwrap();

        let constant = LinearBowScorer::new(vec![0.0], 0.6);
        let ev = Evaluator::new(&constant, &table, &r, IGConfig::default());
        assert_eq!(recovery_fraction(&e, &ev, 1.0).unwrap(), 0.2);

        // a single token carries all the score
        let table = EmbeddingTable::from_pairs(
            1,
            [("big", vec![1.0]), ("a", vec![0.0]), ("b", vec![0.0]), ("c", vec![0.0])].map(|(w, v)| (w.to_string(), v)),
        )
        .unwrap();
        let dominant = LinearBowScorer::new(vec![0.7], 0.0);
        let ev = Evaluator::new(&dominant, &table, &r, IGConfig::default());
        let e = tokenize("a b big c").unwrap();
        assert_eq!(recovery_fraction(&e, &ev, 0.0).unwrap(), 0.25);
    }

    #[test]
    fn recovery_is_monotone_in_tolerance() {
        let table = axis_table();
        let r = rubric(0, 10);
        let s = LinearBowScorer::new(vec![0.02], 0.05);
        let ev = Evaluator::new(&s, &table, &r, IGConfig::default());
        let e = tokenize("w1 w9 w2 w8 w3 w7 w4 w6 w5").unwrap();
        let mut prev = f64::INFINITY;
        for tol in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0, 5.0] {
            let f = recovery_fraction(&e, &ev, tol).unwrap();
            assert!(f > 0.0 && f <= 1.0);
            assert!(f <= prev);
            prev = f;
        }
        // with no slack only the full essay reproduces the score
        assert_eq!(recovery_fraction(&e, &ev, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn curve_point_of_unchanged_scores() {
        let r = rubric(0, 4);
        let human = [0, 1, 2, 3, 4, 2];
        let scores: Vec<ScaledScore> = [0.0, 0.3, 0.5, 0.7, 1.0, 0.4]
            .iter()
            .map(|&v| ScaledScore::new(v, &r))
            .collect();
        let p = curve_point(0.2, &human, &scores, &scores, &r).unwrap();
        assert_eq!(p.relative_qwk, 1.0);
        assert_eq!(p.impact, ImpactStats::default());
    }

    proptest! {
        #[test]
        fn qwk_is_symmetric_and_self_consistent(pairs in proptest::collection::vec((0i64..7, 0i64..7), 1..40)) {
            let r = rubric(0, 6);
            let a: Vec<i64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<i64> = pairs.iter().map(|p| p.1).collect();
            let ab = qwk(&a, &b, &r).unwrap();
            prop_assert!((ab - qwk(&b, &a, &r).unwrap()).abs() < 1e-12);
            prop_assert_eq!(qwk(&a, &a, &r).unwrap(), 1.0);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn impact_sign_symmetry(diffs in proptest::collection::vec(-10.0f64..10.0, 1..50)) {
            let s = impact_stats_from_diffs(&diffs, 12.0).unwrap();
            let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
            let t = impact_stats_from_diffs(&neg, 12.0).unwrap();
            prop_assert!((s.mu_pos - t.mu_neg).abs() < 1e-9);
            prop_assert!((s.mu_neg - t.mu_pos).abs() < 1e-9);
            prop_assert_eq!(s.n_pos, t.n_neg);
            prop_assert_eq!(s.n_neg, t.n_pos);
            prop_assert!((s.sigma - t.sigma).abs() < 1e-9);
            prop_assert!(s.n_pos + s.n_neg <= 100.0 + 1e-9);
        }

        #[test]
        fn overlap_and_churn_are_percentages(values in proptest::collection::vec(-1.0f64..1.0, 2..30), idx in proptest::collection::vec(0usize..30, 1..5), frac in 0.05f64..1.0) {
            let a = attr(values.clone());
            let injected: Vec<usize> = idx.into_iter().map(|i| i % values.len()).collect();
            let o = overlap_top_k(&a, &injected, frac).unwrap();
            prop_assert!((0.0..=100.0).contains(&o));
            let mut rev = values.clone();
            rev.reverse();
            let origin: Vec<Option<usize>> = (0..values.len()).rev().map(Some).collect();
            let c = attribution_churn(&a.rank(), &attr(rev).rank(), &origin, frac).unwrap();
            prop_assert!((0.0..=100.0).contains(&c));
        }
    }
}
