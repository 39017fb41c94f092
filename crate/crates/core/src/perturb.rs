//! Attribution-guided and random perturbations of tokenized essays.
//!
//! Every strategy returns the original and perturbed essays, each scored and
//! attributed by the same [`Evaluator`], plus enough bookkeeping (`origin`,
//! `injected`) to line perturbed tokens up with the original ones.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, AttributionVector, Evaluation, Evaluator};
use crate::corpus::{CorpusError, TokenizedEssay};
use crate::embedding::{EmbeddingError, EmbeddingTable};
use crate::scorer::ScaledScore;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("essay needs more than {needed} tokens, has {found}")]
    TooShort { needed: usize, found: usize },
    #[error("strategy not applicable: {0}")]
    NotApplicable(String),
    #[error("fraction {fraction} removes every token")]
    AllTokensRemoved { fraction: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("injected span is empty")]
    EmptySpan,
    #[error("insertion index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Where an injected span goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectPosition {
    Begin,
    End,
    /// Before token `k`; `k == len` appends.
    Index(usize),
}

impl std::str::FromStr for InjectPosition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "begin" => Ok(InjectPosition::Begin),
            "end" => Ok(InjectPosition::End),
            other => other
                .parse()
                .map(InjectPosition::Index)
                .map_err(|_| format!("position must be begin, end or a token index, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Strategy {
    DeleteLeast {
        fraction: f64,
        recompute: bool,
    },
    AddTop {
        fraction: f64,
        recompute: bool,
    },
    DeleteRandom {
        fraction: f64,
    },
    ShuffleSentences,
    ShuffleWords,
    SwapSynonyms {
        top_frac: f64,
        bottom_frac: f64,
    },
    InjectSpan {
        position: InjectPosition,
        span: Vec<String>,
    },
}

/// One side of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEssay {
    pub essay: TokenizedEssay,
    pub score: ScaledScore,
    pub attribution: AttributionVector,
    pub completeness_violation: bool,
}

impl ScoredEssay {
    fn new(essay: TokenizedEssay, eval: Evaluation) -> Self {
        Self {
            essay,
            score: eval.score,
            attribution: eval.attribution,
            completeness_violation: eval.violation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub original: ScoredEssay,
    pub perturbed: ScoredEssay,
    /// For each perturbed token, the original token index it came from.
    pub origin: Vec<Option<usize>>,
    /// Perturbed-token indices of injected tokens.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected: Vec<usize>,
    /// Tokens replaced by a synonym.
    #[serde(default)]
    pub replaced: usize,
    /// Selected tokens left alone because they are not in the synonym table.
    #[serde(default)]
    pub untouched_oov: usize,
}

impl PerturbationOutcome {
    /// `perturbed - original` on the rubric scale.
    pub fn score_delta(&self) -> f64 {
        self.perturbed.score.scaled - self.original.score.scaled
    }
}

/// Ascending fractions at which an iterative strategy reports an outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    fractions: Vec<f64>,
    pub recompute: bool,
}

impl Schedule {
    pub fn new(fractions: Vec<f64>, recompute: bool) -> Result<Self, PerturbError> {
        if fractions.is_empty() {
            return Err(PerturbError::InvalidSchedule("no fractions".into()));
        }
        if let Some(&f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(PerturbError::InvalidFraction(f));
        }
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PerturbError::InvalidSchedule(
                "fractions must be strictly ascending".into(),
            ));
        }
        Ok(Self { fractions, recompute })
    }

    /// `step, 2*step, ...` up to and including `max` (within rounding).
    pub fn evenly_spaced(step: f64, max: f64, recompute: bool) -> Result<Self, PerturbError> {
        if step.is_nan() || step <= 0.0 {
            return Err(PerturbError::InvalidSchedule("step must be positive".into()));
        }
        let count = (max / step + 1e-9).floor() as usize;
        Self::new(
            (1..=count).map(|i| (i as f64 * step * 1e9).round() / 1e9).collect(),
            recompute,
        )
    }

    /// 10%..90% in 10% steps, re-ranked after every step.
    pub fn default_deletion() -> Self {
        Self::evenly_spaced(0.1, 0.9, true).expect("valid default")
    }

    /// 10%..100% in 10% steps from one ranking.
    pub fn default_addition() -> Self {
        Self::evenly_spaced(0.1, 1.0, false).expect("valid default")
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }
}

/// Tokens moved by an iterative step at `fraction` of `n`: `floor(fraction * n)`.
pub fn step_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

fn check_fraction(f: f64) -> Result<(), PerturbError> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(PerturbError::InvalidFraction(f))
    }
}

fn renumbered(essay: &TokenizedEssay, tokens: Vec<String>) -> Result<TokenizedEssay, CorpusError> {
    TokenizedEssay::from_tokens(essay.essay_id.clone(), essay.prompt_id.clone(), tokens)
}

/// Evaluates the subsequence `kept` (ascending indices) of `original`.
fn keep_subsequence(
    strategy: Strategy,
    original: &ScoredEssay,
    kept: &[usize],
    evaluator: &Evaluator<'_>,
) -> Result<PerturbationOutcome, PerturbError> {
    let essay = original.essay.retain_indices(kept)?;
    let eval = evaluator.evaluate(&essay)?;
    Ok(PerturbationOutcome {
        strategy,
        seed: None,
        original: original.clone(),
        perturbed: ScoredEssay::new(essay, eval),
        origin: kept.iter().map(|&i| Some(i)).collect(),
        injected: Vec::new(),
        replaced: 0,
        untouched_oov: 0,
    })
}

pub fn evaluate_original(essay: &TokenizedEssay, evaluator: &Evaluator<'_>) -> Result<ScoredEssay, PerturbError> {
    Ok(ScoredEssay::new(essay.clone(), evaluator.evaluate(essay)?))
}

fn complement(n: usize, removed: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in removed {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Iteratively drops the lowest-attributed tokens.
///
/// At each fraction `f`, `floor(f * n)` tokens of the original essay are gone in
/// total. With `schedule.recompute` the next tokens to drop are chosen by
/// re-attributing the current essay; otherwise by the original ranking.
/// A step that would remove every token yields `AllTokensRemoved` for that step.
pub fn delete_least(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    schedule: &Schedule,
) -> Result<Vec<Result<PerturbationOutcome, PerturbError>>, PerturbError> {
    let n = essay.len();
    if n <= 1 {
        return Err(PerturbError::TooShort { needed: 1, found: n });
    }
    let original = evaluate_original(essay, evaluator)?;
    let initial = original.attribution.rank();
    let mut kept: Vec<usize> = (0..n).collect();
    let mut current = original.clone();
    let mut steps = Vec::with_capacity(schedule.fractions().len());
    for &fraction in schedule.fractions() {
        let target = step_count(fraction, n);
        let strategy = Strategy::DeleteLeast {
            fraction,
            recompute: schedule.recompute,
        };
        if target >= n {
            steps.push(Err(PerturbError::AllTokensRemoved { fraction }));
            continue;
        }
        if schedule.recompute {
            let extra = target - (n - kept.len());
            let drop: Vec<usize> = current.attribution.rank().lowest(extra);
            let local_keep = complement(kept.len(), &drop);
            kept = local_keep.iter().map(|&i| kept[i]).collect();
        } else {
            kept = complement(n, &initial.lowest(target));
        }
        let outcome = keep_subsequence(strategy, &original, &kept, evaluator)?;
        current = outcome.perturbed.clone();
        steps.push(Ok(outcome));
    }
    Ok(steps)
}

/// Builds essays from the top-attributed tokens only, in original order.
///
/// At each fraction `f` the `floor(f * n)` highest-attributed tokens are kept.
/// With `schedule.recompute`, each step re-attributes the tokens not yet added
/// and takes the next ones from that ranking. An essay with no tokens scores the
/// rubric minimum.
pub fn add_top(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    schedule: &Schedule,
) -> Result<Vec<PerturbationOutcome>, PerturbError> {
    let n = essay.len();
    if n == 0 {
        return Err(PerturbError::TooShort { needed: 0, found: 0 });
    }
    let original = evaluate_original(essay, evaluator)?;
    let initial = original.attribution.rank();
    let mut selected: Vec<usize> = Vec::new();
    let mut outcomes = Vec::with_capacity(schedule.fractions().len());
    for &fraction in schedule.fractions() {
        let target = step_count(fraction, n);
        if schedule.recompute {
            let remaining = complement(n, &selected);
            let extra = target - selected.len();
            if extra > 0 {
                let rest = essay.retain_indices(&remaining)?;
                let ranking = evaluator.evaluate(&rest)?.attribution.rank();
                selected.extend(ranking.highest(extra).iter().map(|&i| remaining[i]));
            }
        } else {
            selected = initial.highest(target).to_vec();
        }
        let mut kept = selected.clone();
        kept.sort_unstable();
        let strategy = Strategy::AddTop {
            fraction,
            recompute: schedule.recompute,
        };
        outcomes.push(keep_subsequence(strategy, &original, &kept, evaluator)?);
    }
    Ok(outcomes)
}

/// The essay reduced to its top `fraction` attributed tokens, in original order.
pub fn word_soup(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    fraction: f64,
) -> Result<PerturbationOutcome, PerturbError> {
    check_fraction(fraction)?;
    let schedule = Schedule::new(vec![fraction], false)?;
    Ok(add_top(essay, evaluator, &schedule)?.remove(0))
}

/// Drops `floor(fraction * n)` uniformly chosen tokens.
pub fn delete_random(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    fraction: f64,
    seed: u64,
) -> Result<PerturbationOutcome, PerturbError> {
    check_fraction(fraction)?;
    let n = essay.len();
    let k = step_count(fraction, n);
    if k >= n {
        return Err(PerturbError::AllTokensRemoved { fraction });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let kept = complement(n, &indices[..k]);
    let original = evaluate_original(essay, evaluator)?;
    let mut outcome = keep_subsequence(Strategy::DeleteRandom { fraction }, &original, &kept, evaluator)?;
    outcome.seed = Some(seed);
    Ok(outcome)
}

fn reordered(
    strategy: Strategy,
    seed: u64,
    essay: &TokenizedEssay,
    perturbed: TokenizedEssay,
    order: Vec<usize>,
    evaluator: &Evaluator<'_>,
) -> Result<PerturbationOutcome, PerturbError> {
    let original = evaluate_original(essay, evaluator)?;
    let eval = evaluator.evaluate(&perturbed)?;
    Ok(PerturbationOutcome {
        strategy,
        seed: Some(seed),
        original,
        perturbed: ScoredEssay::new(perturbed, eval),
        origin: order.into_iter().map(Some).collect(),
        injected: Vec::new(),
        replaced: 0,
        untouched_oov: 0,
    })
}

/// Permutes whole sentences (seeded Fisher-Yates); word order inside a sentence is kept.
pub fn shuffle_sentences(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    seed: u64,
) -> Result<PerturbationOutcome, PerturbError> {
    if essay.sentence_count() < 2 {
        return Err(PerturbError::NotApplicable(format!(
            "sentence shuffle needs at least 2 sentences, essay has {}",
            essay.sentence_count()
        )));
    }
    let mut spans = essay.sentence_spans().to_vec();
    spans.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let order: Vec<usize> = spans.iter().flat_map(|&(s, e)| s..e).collect();
    let mut new_spans = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for (s, e) in &spans {
        new_spans.push((cursor, cursor + e - s));
        cursor += e - s;
    }
    let perturbed = TokenizedEssay::new(
        essay.essay_id.clone(),
        essay.prompt_id.clone(),
        order.iter().map(|&i| essay.tokens()[i].clone()).collect(),
        (0..order.len()).collect(),
        new_spans,
    )?;
    reordered(Strategy::ShuffleSentences, seed, essay, perturbed, order, evaluator)
}

/// Permutes all tokens (seeded); sentences are re-segmented afterwards.
pub fn shuffle_words(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    seed: u64,
) -> Result<PerturbationOutcome, PerturbError> {
    if essay.len() < 2 {
        return Err(PerturbError::TooShort {
            needed: 1,
            found: essay.len(),
        });
    }
    let mut order: Vec<usize> = (0..essay.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let perturbed = renumbered(essay, order.iter().map(|&i| essay.tokens()[i].clone()).collect())?;
    reordered(Strategy::ShuffleWords, seed, essay, perturbed, order, evaluator)
}

/// Replaces the top `top_frac` and bottom `bottom_frac` attributed tokens by
/// their nearest other word in `table`. Tokens missing from the table are kept
/// and counted in `untouched_oov`.
pub fn swap_synonyms(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    table: &EmbeddingTable,
    top_frac: f64,
    bottom_frac: f64,
) -> Result<PerturbationOutcome, PerturbError> {
    check_fraction(top_frac)?;
    check_fraction(bottom_frac)?;
    let original = evaluate_original(essay, evaluator)?;
    let ranking = original.attribution.rank();
    let top = ranking.top_set(top_frac);
    let mut selected = top.clone();
    selected.extend(ranking.bottom_set(bottom_frac).into_iter().filter(|i| !top.contains(i)));

    let mut tokens = essay.tokens().to_vec();
    let (mut replaced, mut untouched_oov) = (0, 0);
    for &i in &selected {
        if table.contains(&tokens[i]) {
            tokens[i] = table.nearest_neighbor(&tokens[i], true)?.to_string();
            replaced += 1;
        } else {
            untouched_oov += 1;
        }
    }
    let perturbed = TokenizedEssay::new(
        essay.essay_id.clone(),
        essay.prompt_id.clone(),
        tokens,
        essay.positions().to_vec(),
        essay.sentence_spans().to_vec(),
    )?;
    let eval = evaluator.evaluate(&perturbed)?;
    Ok(PerturbationOutcome {
        strategy: Strategy::SwapSynonyms { top_frac, bottom_frac },
        seed: None,
        original,
        perturbed: ScoredEssay::new(perturbed, eval),
        origin: (0..essay.len()).map(Some).collect(),
        injected: Vec::new(),
        replaced,
        untouched_oov,
    })
}

/// Splices `span` into the essay; the injected token indices are recorded.
pub fn inject_span(
    essay: &TokenizedEssay,
    evaluator: &Evaluator<'_>,
    span: &TokenizedEssay,
    position: InjectPosition,
) -> Result<PerturbationOutcome, PerturbError> {
    if span.is_empty() {
        return Err(PerturbError::EmptySpan);
    }
    let n = essay.len();
    let at = match position {
        InjectPosition::Begin => 0,
        InjectPosition::End => n,
        InjectPosition::Index(k) if k <= n => k,
        InjectPosition::Index(k) => return Err(PerturbError::IndexOutOfRange { index: k, len: n }),
    };
    let m = span.len();
    let mut tokens = essay.tokens()[..at].to_vec();
    tokens.extend_from_slice(span.tokens());
    tokens.extend_from_slice(&essay.tokens()[at..]);
    let origin = (0..at)
        .map(Some)
        .chain(std::iter::repeat_n(None, m))
        .chain((at..n).map(Some))
        .collect();
    let perturbed = renumbered(essay, tokens)?;
    let original = evaluate_original(essay, evaluator)?;
    let eval = evaluator.evaluate(&perturbed)?;
    Ok(PerturbationOutcome {
        strategy: Strategy::InjectSpan {
            position,
            span: span.tokens().to_vec(),
        },
        seed: None,
        original,
        perturbed: ScoredEssay::new(perturbed, eval),
        origin,
        injected: (at..at + m).collect(),
        replaced: 0,
        untouched_oov: 0,
    })
}

/// The essay without the tokens at `indices`.
pub fn remove_indices(essay: &TokenizedEssay, indices: &[usize]) -> Result<TokenizedEssay, PerturbError> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= essay.len()) {
        return Err(PerturbError::IndexOutOfRange {
            index: bad,
            len: essay.len(),
        });
    }
    Ok(essay.retain_indices(&complement(essay.len(), indices))?)
}

#[cfg(test)]
mod tests {
    use super::{
        add_top, delete_least, delete_random, inject_span, remove_indices, shuffle_sentences, shuffle_words,
        step_count, swap_synonyms, word_soup, EmbeddingTable, Evaluator, InjectPosition, PerturbError, Schedule,
        TokenizedEssay,
    };
    use crate::attribution::IGConfig;
    use crate::corpus::{tokenize, Rubric};
    use crate::scorer::{LinearBowScorer, MeanPoolMlpScorer, RecurrentScorer, Scorer};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    struct Fixture {
        table: EmbeddingTable,
        rubric: Rubric,
        linear: LinearBowScorer,
    }

    /// Words `w0..w19` along the first axis with weight 0.01 per unit, so the
    /// contribution of `wK` is `0.01 * K`; `neg` contributes -0.03.
    fn fixture() -> Fixture {
        let mut pairs: Vec<(String, Vec<f64>)> = (0..20).map(|k| (format!("w{k}"), vec![k as f64, 0.0])).collect();
        pairs.push(("neg".into(), vec![-3.0, 0.0]));
        pairs.push(("side".into(), vec![0.0, 1.0]));
        Fixture {
            table: EmbeddingTable::from_pairs(2, pairs).unwrap(),
            rubric: Rubric::new("P", 0, 10).unwrap(),
            linear: LinearBowScorer::new(vec![0.01, 0.0], 0.1),
        }
    }

    impl Fixture {
        fn eval<'a>(&'a self, s: &'a dyn Scorer) -> Evaluator<'a> {
            Evaluator::new(s, &self.table, &self.rubric, IGConfig::default())
        }
    }

    fn essay(text: &str) -> TokenizedEssay {
        tokenize(text).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(vec![0.1, 0.1], true).is_err());
        assert!(Schedule::new(vec![0.5, 0.2], true).is_err());
        assert!(Schedule::new(vec![0.2, 1.5], true).is_err());
        assert!(Schedule::new(vec![], true).is_err());
        assert_eq!(Schedule::default_deletion().fractions().len(), 9);
        assert_eq!(Schedule::default_addition().fractions().last(), Some(&1.0));
        assert_eq!(
            Schedule::evenly_spaced(0.25, 1.0, false).unwrap().fractions(),
            &[0.25, 0.5, 0.75, 1.0]
        );
    }

    #[test]
    fn delete_zero_fraction_is_identity() {
        let f = fixture();
        let e = essay("w3 w1 w7 w2 .");
        let out = delete_least(&e, &f.eval(&f.linear), &Schedule::new(vec![0.0], true).unwrap()).unwrap();
        let o = out[0].as_ref().unwrap();
        assert_eq!(o.perturbed.essay.tokens(), e.tokens());
        assert_eq!(o.score_delta(), 0.0);
    }

    #[test]
    fn delete_least_drops_lowest_contribution() {
        let f = fixture();
        // contributions 0.05 0.01 0.09 0.02 -0.03; 20% of 5 tokens removes "neg"
        let e = essay("w5 w1 w9 w2 neg");
        let ev = f.eval(&f.linear);
        let out = delete_least(&e, &ev, &Schedule::new(vec![0.2, 0.4], false).unwrap()).unwrap();
        let first = out[0].as_ref().unwrap();
        let tokens: Vec<&str> = first.perturbed.essay.tokens().iter().map(String::as_str).collect();
        assert_eq!(tokens, ["w5", "w1", "w9", "w2"]);
        // removing a -0.03 contribution raises the score by 0.03 * range
        assert!((first.score_delta() - 0.03 * 10.0).abs() < 1e-9);
        let second = out[1].as_ref().unwrap();
        assert_eq!(second.perturbed.essay.tokens(), &["w5", "w9", "w2"]);
        assert_eq!(second.origin, vec![Some(0), Some(2), Some(3)]);
        assert_eq!(second.perturbed.essay.positions(), &[0, 2, 3]);
    }

    #[test]
    fn delete_all_tokens_is_a_step_error() {
        let f = fixture();
        let e = essay("w1 w2 w3");
        let out = delete_least(&e, &f.eval(&f.linear), &Schedule::new(vec![0.5, 1.0], true).unwrap()).unwrap();
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(PerturbError::AllTokensRemoved { .. })));
        assert!(matches!(
            delete_least(&essay("w1"), &f.eval(&f.linear), &Schedule::default_deletion()),
            Err(PerturbError::TooShort { .. })
        ));
    }

    #[test]
    fn add_top_full_and_empty() {
        let f = fixture();
        let e = essay("w4 w2 . w9 w1 .");
        let ev = f.eval(&f.linear);
        let out = add_top(&e, &ev, &Schedule::new(vec![0.0, 0.5, 1.0], false).unwrap()).unwrap();
        assert!(out[0].perturbed.essay.is_empty());
        assert_eq!(out[0].perturbed.score.scaled, f.rubric.min_score as f64);
        assert_eq!(out[1].perturbed.essay.tokens(), &["w4", "w2", "w9"]);
        assert_eq!(out[2].perturbed.essay.tokens(), e.tokens());
        assert_eq!(out[2].score_delta(), 0.0);
    }

    #[test]
    fn add_top_recompute_selects_from_remaining_tokens() {
        let f = fixture();
        let e = essay("w4 w2 w9 w1 w7 w3");
        let ev = f.eval(&f.linear);
        let out = add_top(&e, &ev, &Schedule::new(vec![0.34, 0.67], true).unwrap()).unwrap();
        // linear attributions do not depend on context, so picks match the one-shot ranking
        assert_eq!(out[0].perturbed.essay.tokens(), &["w9", "w7"]);
        assert_eq!(out[1].perturbed.essay.tokens(), &["w4", "w9", "w7", "w3"]);
    }

    #[test]
    fn word_soup_matches_one_shot_addition() {
        let f = fixture();
        let e = essay("w4 w2 w9 w1 w7 w3 w11 w0 . w5 w6");
        let ev = f.eval(&f.linear);
        let soup = word_soup(&e, &ev, 0.4).unwrap();
        let one_shot = add_top(&e, &ev, &Schedule::new(vec![0.4], false).unwrap())
            .unwrap()
            .remove(0);
        assert_eq!(soup, one_shot);
        assert_eq!(soup.perturbed.essay.len(), 4);
    }

    #[test]
    fn sentence_shuffle_swaps_two_sentences() {
        let f = fixture();
        let e = essay("w1 w2 . w3 w4 w5 .");
        let ev = f.eval(&f.linear);
        // find a seed whose permutation swaps the sentences
        let out = (0..50)
            .map(|s| shuffle_sentences(&e, &ev, s).unwrap())
            .find(|o| o.perturbed.essay.tokens()[0] == "w3")
            .expect("some seed swaps");
        assert_eq!(out.perturbed.essay.tokens(), &["w3", "w4", "w5", ".", "w1", "w2", "."]);
        assert_eq!(out.perturbed.essay.sentence_spans(), &[(0, 4), (4, 7)]);
        assert!(matches!(
            shuffle_sentences(&essay("w1 w2 w3."), &ev, 1),
            Err(PerturbError::NotApplicable(_))
        ));
    }

    #[test]
    fn sentence_shuffle_keeps_unterminated_final_sentence_intact() {
        let f = fixture();
        let e = essay("w1 . w2 w3 . w4 w5");
        let ev = f.eval(&f.linear);
        for seed in 0..20 {
            let out = shuffle_sentences(&e, &ev, seed).unwrap();
            let spans = out.perturbed.essay.sentence_spans();
            assert_eq!(spans.len(), 3);
            let lens: BTreeSet<usize> = spans.iter().map(|(s, e)| e - s).collect();
            assert_eq!(lens, [2, 3].into());
        }
    }

    fn order_sensitive_rnn() -> RecurrentScorer {
        let mut s = RecurrentScorer::init(2, 3, 5);
        s.input_weight *= 10.0;
        s.recurrent_weight *= 5.0;
        s.out_weight *= 10.0;
        s
    }

    #[test]
    fn shuffles_under_mean_pool_and_recurrent_scorers() {
        let f = fixture();
        let mut mlp = MeanPoolMlpScorer::init(2, 4, 9);
        mlp.hidden_weight *= 0.3;
        let rnn = order_sensitive_rnn();
        let e = essay("w1 w8 . w3 side . w12 w5 w0 .");
        for seed in [1, 2, 3] {
            let out = shuffle_sentences(&e, &f.eval(&mlp), seed).unwrap();
            assert_eq!(out.score_delta(), 0.0);
            let out = shuffle_words(&e, &f.eval(&mlp), seed).unwrap();
            assert_eq!(out.score_delta(), 0.0);
        }
        let deltas: Vec<f64> = (0..5)
            .map(|seed| shuffle_words(&e, &f.eval(&rnn), seed).unwrap().score_delta().abs())
            .collect();
        assert!(deltas.iter().any(|&d| d > 1e-6), "{deltas:?}");
        let deltas: Vec<f64> = (0..5)
            .map(|seed| shuffle_sentences(&e, &f.eval(&rnn), seed).unwrap().score_delta().abs())
            .collect();
        assert!(deltas.iter().any(|&d| d > 1e-6), "{deltas:?}");
    }

    #[test]
    fn shuffles_are_seed_deterministic() {
        let f = fixture();
        let e = essay("w1 w8 . w3 side . w12 w5 w0 .");
        let ev = f.eval(&f.linear);
        assert_eq!(shuffle_words(&e, &ev, 4).unwrap(), shuffle_words(&e, &ev, 4).unwrap());
        assert_eq!(
            shuffle_sentences(&e, &ev, 4).unwrap(),
            shuffle_sentences(&e, &ev, 4).unwrap()
        );
        assert_eq!(
            delete_random(&e, &ev, 0.3, 4).unwrap(),
            delete_random(&e, &ev, 0.3, 4).unwrap()
        );
    }

    #[test]
    fn synonym_swap() {
        let f = fixture();
        let ev = f.eval(&f.linear);
        let e = essay("w5 w1 w9 w2 oov w3 w4 w6 w7 w8");
        let identity = swap_synonyms(&e, &ev, &f.table, 0.0, 0.0).unwrap();
        assert_eq!(identity.perturbed.essay, e);
        assert_eq!(identity.replaced, 0);

        let out = swap_synonyms(&e, &ev, &f.table, 0.1, 0.2).unwrap();
        // top: w9 -> nearest of 8 and 10 is w10 (tie broken lexicographically: "w10" < "w8")
        // bottom two: oov (0) and w1 -> w0 (tie with w2 lexicographic)
        assert_eq!(out.perturbed.essay.tokens()[2], "w10");
        assert_eq!(out.perturbed.essay.tokens()[4], "oov");
        assert_eq!(out.perturbed.essay.tokens()[1], "w0");
        assert_eq!(out.replaced, 2);
        assert_eq!(out.untouched_oov, 1);
    }

    #[test]
    fn synonym_swap_three_word_table() {
        let table = EmbeddingTable::from_pairs(
            2,
            [("a", vec![0.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![5.0, 5.0])].map(|(w, v)| (w.to_string(), v)),
        )
        .unwrap();
        let rubric = Rubric::new("P", 0, 10).unwrap();
        // rewards the second axis, so "c" ranks first and "a" last
        let s = LinearBowScorer::new(vec![0.0, 0.01], 0.2);
        let ev = Evaluator::new(&s, &table, &rubric, IGConfig::default());
        let out = swap_synonyms(&essay("c b a"), &ev, &table, 0.0, 0.34).unwrap();
        assert_eq!(out.perturbed.essay.tokens(), &["c", "b", "b"]);
    }

    #[test]
    fn injection_and_inverse() {
        let f = fixture();
        let ev = f.eval(&f.linear);
        let e = essay("w1 w2 . w3 .");
        let span = essay("w9 w8 .");
        let begin = inject_span(&e, &ev, &span, InjectPosition::Begin).unwrap();
        assert_eq!(
            begin.perturbed.essay.tokens(),
            &["w9", "w8", ".", "w1", "w2", ".", "w3", "."]
        );
        assert_eq!(begin.injected, vec![0, 1, 2]);
        assert_eq!(begin.origin[3], Some(0));

        let end = inject_span(&e, &ev, &span, InjectPosition::End).unwrap();
        assert_eq!(remove_indices(&end.perturbed.essay, &end.injected).unwrap(), e);

        let mid = inject_span(&e, &ev, &span, InjectPosition::Index(2)).unwrap();
        assert_eq!(mid.perturbed.essay.tokens()[2..5], ["w9", "w8", "."]);
        assert_eq!(mid.perturbed.essay.sentence_count(), 3);
        assert!(matches!(
            inject_span(&e, &ev, &span, InjectPosition::Index(6)),
            Err(PerturbError::IndexOutOfRange { index: 6, len: 5 })
        ));
        let empty = TokenizedEssay::from_tokens("s", "P", vec![]).unwrap();
        assert!(matches!(
            inject_span(&e, &ev, &empty, InjectPosition::End),
            Err(PerturbError::EmptySpan)
        ));
    }

    fn words_strategy() -> impl Strategy<Value = TokenizedEssay> {
        proptest::collection::vec(
            prop_oneof![
                (0u8..20).prop_map(|k| format!("w{k}")),
                Just(".".to_string()),
                Just("oov".to_string())
            ],
            2..25,
        )
        .prop_map(|t| TokenizedEssay::from_tokens("e", "P", t).unwrap())
    }

    fn multiset(tokens: &[String]) -> Vec<String> {
        let mut v = tokens.to_vec();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn shuffles_preserve_the_token_multiset(e in words_strategy(), seed in any::<u64>()) {
            let f = fixture();
            let ev = f.eval(&f.linear);
            let w = shuffle_words(&e, &ev, seed).unwrap();
            prop_assert_eq!(multiset(w.perturbed.essay.tokens()), multiset(e.tokens()));
            if e.sentence_count() >= 2 {
                let s = shuffle_sentences(&e, &ev, seed).unwrap();
                prop_assert_eq!(multiset(s.perturbed.essay.tokens()), multiset(e.tokens()));
                for (k, o) in s.origin.iter().enumerate() {
                    prop_assert_eq!(&s.perturbed.essay.tokens()[k], &e.tokens()[o.unwrap()]);
                }
            }
        }

        #[test]
        fn swap_preserves_length(e in words_strategy(), top in 0.0f64..0.5, bottom in 0.0f64..0.5) {
            let f = fixture();
            let out = swap_synonyms(&e, &f.eval(&f.linear), &f.table, top, bottom).unwrap();
            prop_assert_eq!(out.perturbed.essay.len(), e.len());
            let ranking = out.original.attribution.rank();
            let top_set = ranking.top_set(top);
            let mut selected = top_set.clone();
            selected.extend(ranking.bottom_set(bottom));
            let in_vocab = selected.iter().filter(|&&i| f.table.contains(&e.tokens()[i])).count();
            prop_assert_eq!(out.replaced, in_vocab);
            prop_assert_eq!(out.replaced + out.untouched_oov, selected.len());
        }

        #[test]
        fn deletion_and_addition_partition_tokens(e in words_strategy(), frac in 0.05f64..0.95) {
            let f = fixture();
            let ev = f.eval(&f.linear);
            let n = e.len();
            let k = step_count(frac, n);
            prop_assume!(k < n);
            let removed_frac = (n - k) as f64 / n as f64;
            let del = delete_least(&e, &ev, &Schedule::new(vec![frac], false).unwrap()).unwrap().remove(0).unwrap();
            let add = add_top(&e, &ev, &Schedule::new(vec![removed_frac], false).unwrap()).unwrap().remove(0);
            let kept: BTreeSet<usize> = del.origin.iter().map(|o| o.unwrap()).collect();
            let added: BTreeSet<usize> = add.origin.iter().map(|o| o.unwrap()).collect();
            prop_assert_eq!(kept, added);
            // untouched tokens are carried over verbatim
            for (k, o) in del.origin.iter().enumerate() {
                prop_assert_eq!(&del.perturbed.essay.tokens()[k], &e.tokens()[o.unwrap()]);
            }
        }
    }
}
