//! Integrated Gradients over the embedding layer.
//!
//! For an input matrix `x` and the all-zero baseline of the same shape, the
//! attribution of entry `i` is `x_i * mean over the path of dF/dx_i`, with the
//! path integral replaced by a fixed quadrature rule. Token attributions are the
//! sum of their row, so the token attributions add up to `F(x) - F(0)` up to
//! quadrature error. That residual is reported as the completeness error.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledCorpus, Rubric, TokenizedEssay};
use crate::embedding::{embed, EmbeddedEssay, EmbeddingTable};
use crate::scorer::{check_input, ScaledScore, Scorer, ScorerError};

/// Floor on `|F(x) - F(b)|` in the relative completeness error.
pub const COMPLETENESS_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("essay contains no tokens")]
    EmptyEssay,
    #[error("invalid IG configuration: {0}")]
    InvalidConfig(String),
    #[error("completeness error {error:.3e} exceeds tolerance {tolerance:.3e}")]
    CompletenessViolation {
        error: f64,
        tolerance: f64,
        attribution: Box<AttributionVector>,
    },
    #[error("essay {essay_id:?} has no rubric")]
    MissingRubric { essay_id: String },
    #[error(transparent)]
    Scorer(ScorerError),
}

impl From<ScorerError> for AttributionError {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::EmptyEssay => AttributionError::EmptyEssay,
            other => AttributionError::Scorer(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// `alpha_k = k / m`, `k = 0..m`.
    Left,
    /// `alpha_k = (k + 1/2) / m`.
    #[default]
    Midpoint,
    /// `m` trapezoids on `m + 1` nodes.
    Trapezoid,
}

impl QuadratureRule {
    /// `(alpha, weight)` pairs on `[0, 1]` with weights summing to 1.
    pub fn nodes(self, steps: usize) -> Vec<(f64, f64)> {
        let m = steps as f64;
        match self {
            QuadratureRule::Left => (0..steps).map(|k| (k as f64 / m, 1.0 / m)).collect(),
            QuadratureRule::Midpoint => (0..steps).map(|k| ((k as f64 + 0.5) / m, 1.0 / m)).collect(),
            QuadratureRule::Trapezoid => (0..=steps)
                .map(|k| {
                    let w = if k == 0 || k == steps { 0.5 / m } else { 1.0 / m };
                    (k as f64 / m, w)
                })
                .collect(),
        }
    }
}

impl std::str::FromStr for QuadratureRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(QuadratureRule::Left),
            "midpoint" => Ok(QuadratureRule::Midpoint),
            "trapezoid" => Ok(QuadratureRule::Trapezoid),
            other => Err(format!("unknown quadrature rule {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IGConfig {
    pub steps: usize,
    pub rule: QuadratureRule,
    pub completeness_tolerance: f64,
}

impl Default for IGConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            rule: QuadratureRule::Midpoint,
            completeness_tolerance: 0.05,
        }
    }
}

impl IGConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        if self.steps == 0 {
            return Err(AttributionError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.completeness_tolerance.is_nan() || self.completeness_tolerance <= 0.0 {
            return Err(AttributionError::InvalidConfig("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token attributions of one essay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub per_token: Vec<f64>,
    /// `F(x)`.
    pub input_score: f64,
    /// `F(b)` at the zero baseline.
    pub baseline_score: f64,
    /// `F(x) - F(b)`.
    pub raw_delta: f64,
    /// `|sum(per_token) - raw_delta| / max(|raw_delta|, eps)`.
    pub completeness_error: f64,
    pub config: IGConfig,
}

impl AttributionVector {
    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.per_token.iter().sum()
    }

    pub fn absolute_completeness_error(&self) -> f64 {
        (self.sum() - self.raw_delta).abs()
    }

    pub fn rank(&self) -> AttributionRanking {
        AttributionRanking::new(&self.per_token)
    }

    /// Attribution of an essay with no tokens.
    pub fn empty(config: IGConfig) -> Self {
        Self {
            per_token: Vec::new(),
            input_score: 0.0,
            baseline_score: 0.0,
            raw_delta: 0.0,
            completeness_error: 0.0,
            config,
        }
    }
}

pub fn relative_completeness_error(per_token_sum: f64, raw_delta: f64) -> f64 {
    (per_token_sum - raw_delta).abs() / raw_delta.abs().max(COMPLETENESS_EPSILON)
}

/// Per-dimension IG of `x` against the zero baseline, plus `F(x)` and `F(0)`.
pub fn integrated_gradients_matrix(
    scorer: &dyn Scorer,
    x: ArrayView2<'_, f64>,
    config: &IGConfig,
) -> Result<(Array2<f64>, f64, f64), AttributionError> {
    config.validate()?;
    check_input(scorer, x)?;
    let mut avg_grad = Array2::<f64>::zeros(x.raw_dim());
    let mut point = Array2::<f64>::zeros(x.raw_dim());
    for (alpha, weight) in config.rule.nodes(config.steps) {
        point.zip_mut_with(&x, |p, &xi| *p = alpha * xi);
        let g = scorer.input_gradient(point.view());
        avg_grad.scaled_add(weight, &g);
    }
    let per_dim = &x * &avg_grad;
    let baseline = Array2::<f64>::zeros(x.raw_dim());
    Ok((per_dim, scorer.raw_score(x), scorer.raw_score(baseline.view())))
}

/// IG attributions without the completeness check.
pub fn attribute(
    scorer: &dyn Scorer,
    essay: &EmbeddedEssay,
    config: &IGConfig,
) -> Result<AttributionVector, AttributionError> {
    let (per_dim, input_score, baseline_score) = integrated_gradients_matrix(scorer, essay.matrix.view(), config)?;
    let per_token: Vec<f64> = per_dim.rows().into_iter().map(|r| r.sum()).collect();
    let raw_delta = input_score - baseline_score;
    let completeness_error = relative_completeness_error(per_token.iter().sum(), raw_delta);
    Ok(AttributionVector {
        per_token,
        input_score,
        baseline_score,
        raw_delta,
        completeness_error,
        config: *config,
    })
}

/// IG attributions, failing with [`AttributionError::CompletenessViolation`]
/// when the completeness error exceeds the configured tolerance.
pub fn integrated_gradients(
    scorer: &dyn Scorer,
    essay: &EmbeddedEssay,
    config: &IGConfig,
) -> Result<AttributionVector, AttributionError> {
    let attr = attribute(scorer, essay, config)?;
    if attr.completeness_error > config.completeness_tolerance {
        return Err(AttributionError::CompletenessViolation {
            error: attr.completeness_error,
            tolerance: config.completeness_tolerance,
            attribution: Box::new(attr),
        });
    }
    Ok(attr)
}

/// Number of tokens in a `fraction` percentile of `n` tokens: `floor(fraction * n)`,
/// at least 1 when `n >= 1` and `fraction > 0`.
pub fn percentile_count(fraction: f64, n: usize) -> usize {
    if n == 0 || fraction <= 0.0 {
        return 0;
    }
    // the small slack keeps e.g. 0.7 * 10 from flooring to 6
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

/// Token indices sorted by attribution, highest first; ties keep index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRanking {
    pub order: Vec<usize>,
}

impl AttributionRanking {
    pub fn new(per_token: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..per_token.len()).collect();
        order.sort_by(|&a, &b| per_token[b].total_cmp(&per_token[a]));
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `fraction` highest-attributed indices, in rank order.
    pub fn top(&self, fraction: f64) -> &[usize] {
        &self.order[..percentile_count(fraction, self.len())]
    }

    /// The `fraction` lowest-attributed indices, lowest first.
    pub fn bottom(&self, fraction: f64) -> Vec<usize> {
        self.lowest(percentile_count(fraction, self.len()))
    }

    pub fn highest(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.len())]
    }

    pub fn lowest(&self, k: usize) -> Vec<usize> {
        self.order.iter().rev().take(k).copied().collect()
    }

    pub fn top_set(&self, fraction: f64) -> BTreeSet<usize> {
        self.top(fraction).iter().copied().collect()
    }

    pub fn bottom_set(&self, fraction: f64) -> BTreeSet<usize> {
        self.bottom(fraction).into_iter().collect()
    }
}

pub fn rank(attr: &AttributionVector) -> AttributionRanking {
    attr.rank()
}

/// Scores and attributes tokenized essays under one scorer, table and rubric.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub scorer: &'a dyn Scorer,
    pub table: &'a EmbeddingTable,
    pub rubric: &'a Rubric,
    pub config: IGConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub score: ScaledScore,
    pub attribution: AttributionVector,
    /// Completeness error above tolerance. The attribution is still usable.
    pub violation: bool,
}

impl<'a> Evaluator<'a> {
    pub fn new(scorer: &'a dyn Scorer, table: &'a EmbeddingTable, rubric: &'a Rubric, config: IGConfig) -> Self {
        Self {
            scorer,
            table,
            rubric,
            config,
        }
    }

    /// Scaled score; essays without tokens get the rubric minimum.
    pub fn score(&self, essay: &TokenizedEssay) -> Result<ScaledScore, AttributionError> {
        if essay.is_empty() {
            return Ok(ScaledScore::empty(self.rubric));
        }
        Ok(crate::scorer::score(
            self.scorer,
            &embed(essay, self.table),
            self.rubric,
        )?)
    }

    /// Score and attributions. Completeness violations are flagged, not raised.
    pub fn evaluate(&self, essay: &TokenizedEssay) -> Result<Evaluation, AttributionError> {
        if essay.is_empty() {
            return Ok(Evaluation {
                score: ScaledScore::empty(self.rubric),
                attribution: AttributionVector::empty(self.config),
                violation: false,
            });
        }
        let attribution = attribute(self.scorer, &embed(essay, self.table), &self.config)?;
        Ok(Evaluation {
            score: ScaledScore::new(attribution.input_score, self.rubric),
            violation: attribution.completeness_error > self.config.completeness_tolerance,
            attribution,
        })
    }
}

/// One essay's entry in a corpus attribution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayAttribution {
    pub essay_id: String,
    pub prompt_id: String,
    pub tokens: Vec<String>,
    pub per_token: Vec<f64>,
    pub raw_delta: f64,
    pub completeness_error: f64,
    pub violation: bool,
    pub score: ScaledScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordStat {
    pub word: String,
    pub count: usize,
    pub mean: f64,
    pub mean_abs: f64,
}

/// Vocabulary-level summary of a corpus attribution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordStatistics {
    /// Every attributed word, sorted by word.
    pub words: Vec<WordStat>,
    /// Highest mean attribution first.
    pub top_positive: Vec<String>,
    /// Lowest mean attribution first.
    pub top_negative: Vec<String>,
    /// Smallest mean absolute attribution first.
    pub mostly_unattributed: Vec<String>,
}

/// Mean attribution per word over all its occurrences, and the `k` most
/// positive, most negative and least attributed words. Ties go by word.
pub fn word_statistics(records: &[EssayAttribution], k: usize) -> WordStatistics {
    let mut acc: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        for (tok, &a) in r.tokens.iter().zip(&r.per_token) {
            let e = acc.entry(tok.as_str()).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += a;
            e.2 += a.abs();
        }
    }
    let words: Vec<WordStat> = acc
        .into_iter()
        .map(|(w, (count, sum, abs))| WordStat {
            word: w.to_string(),
            count,
            mean: sum / count as f64,
            mean_abs: abs / count as f64,
        })
        .collect();
    let pick = |cmp: &dyn Fn(&WordStat, &WordStat) -> std::cmp::Ordering, keep: &dyn Fn(&WordStat) -> bool| {
        let mut v: Vec<&WordStat> = words.iter().filter(|w| keep(w)).collect();
        v.sort_by(|a, b| cmp(a, b).then_with(|| a.word.cmp(&b.word)));
        v.into_iter().take(k).map(|w| w.word.clone()).collect::<Vec<_>>()
    };
    let top_positive = pick(&|a, b| b.mean.total_cmp(&a.mean), &|w| w.mean > 0.0);
    let top_negative = pick(&|a, b| a.mean.total_cmp(&b.mean), &|w| w.mean < 0.0);
    let mostly_unattributed = pick(&|a, b| a.mean_abs.total_cmp(&b.mean_abs), &|_| true);
    WordStatistics {
        words,
        top_positive,
        top_negative,
        mostly_unattributed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusAttribution {
    pub config: IGConfig,
    pub essays: Vec<EssayAttribution>,
    pub violations: usize,
    pub word_stats: WordStatistics,
}

/// Number of words kept in each [`WordStatistics`] list.
pub const WORD_LIST_LEN: usize = 10;

/// Attributes every essay (in parallel, results in corpus order) and summarizes
/// word-level attributions.
pub fn attribute_corpus(
    scorer: &dyn Scorer,
    corpus: &LabeledCorpus,
    table: &EmbeddingTable,
    config: &IGConfig,
) -> Result<CorpusAttribution, AttributionError> {
    config.validate()?;
    let essays = corpus
        .essays
        .par_iter()
        .map(|e| {
            let rubric = corpus
                .rubric_for(&e.essay)
                .ok_or_else(|| AttributionError::MissingRubric {
                    essay_id: e.essay.essay_id.clone(),
                })?;
            let eval = Evaluator::new(scorer, table, rubric, *config).evaluate(&e.essay)?;
            Ok(EssayAttribution {
                essay_id: e.essay.essay_id.clone(),
                prompt_id: e.essay.prompt_id.clone(),
                tokens: e.essay.tokens().to_vec(),
                per_token: eval.attribution.per_token,
                raw_delta: eval.attribution.raw_delta,
                completeness_error: eval.attribution.completeness_error,
                violation: eval.violation,
                score: eval.score,
            })
        })
        .collect::<Result<Vec<_>, AttributionError>>()?;
    let violations = essays.iter().filter(|e| e.violation).count();
    let word_stats = word_statistics(&essays, WORD_LIST_LEN);
    Ok(CorpusAttribution {
        config: *config,
        essays,
        violations,
        word_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, LabeledEssay};
    use crate::scorer::{LinearBowScorer, MeanPoolMlpScorer};
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `F(x) = x^2` on a single entry.
    struct Square;

    impl Scorer for Square {
        fn input_dim(&self) -> usize {
            1
        }
        fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64 {
            x[[0, 0]] * x[[0, 0]]
        }
        fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
            x.mapv(|v| 2.0 * v)
        }
    }

    fn embedded(m: Array2<f64>) -> EmbeddedEssay {
        let tokens = (0..m.nrows()).map(|i| format!("t{i}")).collect();
        EmbeddedEssay {
            matrix: m,
            source: TokenizedEssay::from_tokens("e", "p", tokens).unwrap(),
        }
    }

    #[test]
    fn quadrature_weights_sum_to_one() {
        for rule in [
            QuadratureRule::Left,
            QuadratureRule::Midpoint,
            QuadratureRule::Trapezoid,
        ] {
            for steps in [1, 2, 7, 50] {
                let total: f64 = rule.nodes(steps).iter().map(|(_, w)| w).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(QuadratureRule::Midpoint.nodes(2), vec![(0.25, 0.5), (0.75, 0.5)]);
    }

    #[test]
    fn linear_attribution_is_exact() {
        let s = LinearBowScorer::new(vec![0.3, -0.2], 0.1);
        let x = array![[0.5, 0.25], [0.1, -0.4], [0.0, 0.0]];
        for steps in [1, 3, 50] {
            let a = attribute(&s, &embedded(x.clone()), &IGConfig::with_steps(steps)).unwrap();
            let expected = s.contributions(x.view());
            for (got, want) in a.per_token.iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12);
            }
            assert_eq!(a.per_token[2], 0.0);
            assert!(a.completeness_error < 1e-9);
        }
    }

    #[test]
    fn constant_scorer_attributes_nothing() {
        let s = LinearBowScorer::new(vec![0.0, 0.0], 0.4);
        let a = integrated_gradients(&s, &embedded(array![[1.0, 2.0], [3.0, 4.0]]), &IGConfig::default()).unwrap();
        assert_eq!(a.per_token, vec![0.0, 0.0]);
        assert_eq!(a.completeness_error, 0.0);
    }

    #[test]
    fn square_integral() {
        let a = attribute(&Square, &embedded(array![[3.0]]), &IGConfig::with_steps(50)).unwrap();
        assert!((a.per_token[0] - 9.0).abs() < 0.01);
        let left = IGConfig {
            rule: QuadratureRule::Left,
            ..IGConfig::with_steps(10)
        };
        // left sum of 18 alpha over 10 nodes is 18 * 0.45
        let a = attribute(&Square, &embedded(array![[3.0]]), &left).unwrap();
        assert!((a.per_token[0] - 8.1).abs() < 1e-12);
    }

    #[test]
    fn violation_carries_the_vector() {
        let coarse = IGConfig {
            steps: 1,
            rule: QuadratureRule::Left,
            completeness_tolerance: 0.05,
        };
        match integrated_gradients(&Square, &embedded(array![[3.0]]), &coarse) {
            Err(AttributionError::CompletenessViolation { error, attribution, .. }) => {
                assert_eq!(error, 1.0);
                assert_eq!(attribution.per_token, vec![0.0]);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn invalid_inputs() {
        let s = LinearBowScorer::new(vec![1.0], 0.0);
        assert!(matches!(
            attribute(&s, &embedded(Array2::zeros((0, 1))), &IGConfig::default()),
            Err(AttributionError::EmptyEssay)
        ));
        assert!(matches!(
            attribute(&s, &embedded(array![[1.0]]), &IGConfig::with_steps(0)),
            Err(AttributionError::InvalidConfig(_))
        ));
        let bad_tol = IGConfig {
            completeness_tolerance: 0.0,
            ..IGConfig::default()
        };
        assert!(bad_tol.validate().is_err());
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(AttributionRanking::new(&[0.5, -0.2, 0.9]).order, vec![2, 0, 1]);
        assert_eq!(AttributionRanking::new(&[0.1; 4]).order, vec![0, 1, 2, 3]);
        let r = AttributionRanking::new(&(0..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(r.top(0.2), &[9, 8]);
        assert_eq!(r.bottom(0.2), vec![0, 1]);
        assert_eq!(r.top(0.01).len(), 1);
        assert_eq!(r.top(0.0).len(), 0);
        assert_eq!(percentile_count(0.7, 10), 7);
        assert_eq!(percentile_count(1.0, 3), 3);
        assert_eq!(percentile_count(0.5, 0), 0);
    }

    fn mlp_fixture() -> (MeanPoolMlpScorer, Array2<f64>) {
        let mut s = MeanPoolMlpScorer::init(6, 5, 3);
        s.hidden_weight *= 15.0;
        s.out_weight *= 15.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((9, 6), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        (s, x)
    }

    #[test]
    fn quadrature_error_shrinks_on_doubling() {
        let (s, x) = mlp_fixture();
        let mut prev = f64::INFINITY;
        for steps in [4, 8, 16, 32, 64, 128] {
            let a = attribute(&s, &embedded(x.clone()), &IGConfig::with_steps(steps)).unwrap();
            let err = a.absolute_completeness_error();
            assert!(err <= prev + 1e-12, "steps {steps}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn zero_rows_get_zero_attribution() {
        let (s, mut x) = mlp_fixture();
        x.row_mut(3).fill(0.0);
        let a = attribute(&s, &embedded(x), &IGConfig::default()).unwrap();
        assert_eq!(a.per_token[3], 0.0);
    }

    #[test]
    fn mean_pool_attributions_permute_with_rows() {
        let (s, x) = mlp_fixture();
        let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
        let a = attribute(&s, &embedded(x.clone()), &IGConfig::default()).unwrap();
        let b = attribute(&s, &embedded(x.select(Axis(0), &perm)), &IGConfig::default()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(b.per_token[k].to_bits(), a.per_token[p].to_bits());
        }
        assert_eq!(a.input_score.to_bits(), b.input_score.to_bits());
    }

    fn word_table() -> EmbeddingTable {
        EmbeddingTable::from_pairs(
            2,
            [
                ("good", vec![1.0, 0.0]),
                ("bad", vec![-1.0, 0.0]),
                ("meh", vec![0.0, 1.0]),
            ]
            .map(|(w, v)| (w.to_string(), v)),
        )
        .unwrap()
    }

    fn labeled(texts: &[&str]) -> LabeledCorpus {
        let rubric = Rubric::new("P", 0, 10).unwrap();
        let essays = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut e = tokenize(t).unwrap();
                e.essay_id = format!("e{i}");
                e.prompt_id = "P".into();
                LabeledEssay {
                    essay: e,
                    human_score: 5,
                }
            })
            .collect();
        LabeledCorpus::new(essays, [("P".to_string(), rubric)].into()).unwrap()
    }

    #[test]
    fn corpus_word_statistics() {
        // weight ignores the second dimension, so "meh" is never attributed
        let s = LinearBowScorer::new(vec![0.1, 0.0], 0.4);
        let corpus = labeled(&["good meh good.", "bad meh.", "good bad meh meh"]);
        let out = attribute_corpus(&s, &corpus, &word_table(), &IGConfig::default()).unwrap();
        assert_eq!(out.essays.len(), 3);
        let meh = out.word_stats.words.iter().find(|w| w.word == "meh").unwrap();
        assert_eq!(meh.count, 4);
        assert_eq!(meh.mean, 0.0);
        assert_eq!(
            out.word_stats.mostly_unattributed[..2],
            [".".to_string(), "meh".to_string()]
        );
        assert_eq!(out.word_stats.top_positive, vec!["good".to_string()]);
        assert_eq!(out.word_stats.top_negative, vec!["bad".to_string()]);
        assert_eq!(out.violations, 0);
    }

    #[test]
    fn corpus_matches_single_essay_and_is_deterministic() {
        let (s, _) = mlp_fixture();
        let table = EmbeddingTable::random(&["a".into(), "b".into(), "c".into()], 6, 8);
        let corpus = labeled(&["a b c. c a."]);
        let out = attribute_corpus(&s, &corpus, &table, &IGConfig::default()).unwrap();
        let single = attribute(&s, &embed(&corpus.essays[0].essay, &table), &IGConfig::default()).unwrap();
        assert_eq!(out.essays.len(), 1);
        assert_eq!(out.essays[0].per_token, single.per_token);
        let again = attribute_corpus(&s, &corpus, &table, &IGConfig::default()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn corpus_violations_are_counted_not_fatal() {
        let mut s = MeanPoolMlpScorer::init(6, 5, 3);
        s.hidden_weight *= 60.0;
        s.out_weight *= 60.0;
        let table = EmbeddingTable::random(&["a".into(), "b".into(), "c".into()], 6, 8).scaled(5.0);
        let corpus = labeled(&["a b c.", "c c b.", "a."]);
        let cfg = IGConfig {
            steps: 1,
            rule: QuadratureRule::Left,
            completeness_tolerance: 1e-6,
        };
        let out = attribute_corpus(&s, &corpus, &table, &cfg).unwrap();
        assert_eq!(out.essays.len(), 3);
        assert_eq!(out.violations, out.essays.iter().filter(|e| e.violation).count());
        assert!(out.violations > 0);
    }

    proptest! {
        #[test]
        fn ranking_is_a_stable_descending_permutation(values in proptest::collection::vec(-3i32..3, 0..30)) {
            let v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
            let r = AttributionRanking::new(&v);
            let mut seen = r.order.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
            for w in r.order.windows(2) {
                prop_assert!(v[w[0]] > v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1]));
            }
        }

        #[test]
        fn mean_pool_equivariance_holds_for_random_permutations(seed in any::<u64>()) {
            let (s, x) = mlp_fixture();
            let mut perm: Vec<usize> = (0..x.nrows()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = attribute(&s, &embedded(x.clone()), &IGConfig::with_steps(8)).unwrap();
            let b = attribute(&s, &embedded(x.select(Axis(0), &perm)), &IGConfig::with_steps(8)).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.per_token[k].to_bits(), a.per_token[p].to_bits());
            }
        }
    }
}
