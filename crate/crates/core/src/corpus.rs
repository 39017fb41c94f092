//! Tokenization, rubrics, TSV corpus ingestion and synthetic corpus generation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingTable;

/// Punctuation marks split off into their own tokens.
pub const DETACHED_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"'];

/// Tokens that close a sentence.
pub const SENTENCE_TERMINATORS: &[&str] = &[".", "!", "?"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("essay contains no tokens")]
    EmptyEssay,
    #[error("invalid essay: {0}")]
    InvalidEssay(String),
    #[error("invalid rubric for prompt {prompt_id}: min {min} must be below max {max}")]
    InvalidRubric { prompt_id: String, min: i64, max: i64 },
    #[error("rubric file line {line}: {message}")]
    MalformedRubric { line: usize, message: String },
    #[error("corpus header: missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("corpus line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// An essay split into lowercase word tokens with sentence boundaries.
///
/// `positions[t]` is the index of token `t` in the essay it was derived from
/// (for a freshly tokenized essay it is simply `t`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedEssay {
    pub essay_id: String,
    pub prompt_id: String,
    tokens: Vec<String>,
    positions: Vec<usize>,
    sentence_spans: Vec<(usize, usize)>,
}

impl TokenizedEssay {
    /// Builds an essay from parts, checking every structural invariant.
    pub fn new(
        essay_id: impl Into<String>,
        prompt_id: impl Into<String>,
        tokens: Vec<String>,
        positions: Vec<usize>,
        sentence_spans: Vec<(usize, usize)>,
    ) -> Result<Self, CorpusError> {
        if positions.len() != tokens.len() {
            return Err(CorpusError::InvalidEssay(format!(
                "{} positions for {} tokens",
                positions.len(),
                tokens.len()
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(CorpusError::InvalidEssay(format!("bad token {bad:?}")));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::InvalidEssay(
                "positions must be strictly increasing".into(),
            ));
        }
        let mut cursor = 0;
        for &(start, end) in &sentence_spans {
            if start != cursor || end <= start {
                return Err(CorpusError::InvalidEssay(format!(
                    "sentence span ({start}, {end}) does not continue a partition at {cursor}"
                )));
            }
            cursor = end;
        }
        if cursor != tokens.len() {
            return Err(CorpusError::InvalidEssay(format!(
                "sentence spans cover {cursor} of {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            essay_id: essay_id.into(),
            prompt_id: prompt_id.into(),
            tokens,
            positions,
            sentence_spans,
        })
    }

    /// Builds an essay whose sentence spans are derived from terminator tokens.
    pub fn segmented(
        essay_id: impl Into<String>,
        prompt_id: impl Into<String>,
        tokens: Vec<String>,
        positions: Vec<usize>,
    ) -> Result<Self, CorpusError> {
        let spans = segment_sentences(&tokens);
        Self::new(essay_id, prompt_id, tokens, positions, spans)
    }

    /// Same as [`TokenizedEssay::segmented`] with positions `0..n`.
    pub fn from_tokens(
        essay_id: impl Into<String>,
        prompt_id: impl Into<String>,
        tokens: Vec<String>,
    ) -> Result<Self, CorpusError> {
        let positions = (0..tokens.len()).collect();
        Self::segmented(essay_id, prompt_id, tokens, positions)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn sentence_spans(&self) -> &[(usize, usize)] {
        &self.sentence_spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_spans.len()
    }

    /// Tokens joined by single spaces. Re-tokenizing this yields the same tokens.
    pub fn detokenize(&self) -> String {
        self.tokens.join(" ")
    }

    /// Keeps the tokens at `keep` (ascending indices), preserving their positions.
    pub fn retain_indices(&self, keep: &[usize]) -> Result<Self, CorpusError> {
        let tokens = keep.iter().map(|&i| self.tokens[i].clone()).collect();
        let positions = keep.iter().map(|&i| self.positions[i]).collect();
        Self::segmented(self.essay_id.clone(), self.prompt_id.clone(), tokens, positions)
    }
}

/// Splits a token sequence into sentences closed by `.`, `!` or `?`.
/// Trailing tokens without a terminator form a final sentence.
pub fn segment_sentences(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if SENTENCE_TERMINATORS.contains(&tok.as_str()) {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

/// Lowercases, splits on whitespace and detaches `.,!?;:'"` as separate tokens.
pub fn tokenize(text: &str) -> Result<TokenizedEssay, CorpusError> {
    tokenize_with_ids(text, "", "")
}

pub fn tokenize_with_ids(text: &str, essay_id: &str, prompt_id: &str) -> Result<TokenizedEssay, CorpusError> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if DETACHED_PUNCTUATION.contains(&ch) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    if tokens.is_empty() {
        return Err(CorpusError::EmptyEssay);
    }
    TokenizedEssay::from_tokens(essay_id, prompt_id, tokens)
}

/// Integer score range of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub prompt_id: String,
    pub min_score: i64,
    pub max_score: i64,
}

impl Rubric {
    pub fn new(prompt_id: impl Into<String>, min_score: i64, max_score: i64) -> Result<Self, CorpusError> {
        let prompt_id = prompt_id.into();
        if min_score >= max_score {
            return Err(CorpusError::InvalidRubric {
                prompt_id,
                min: min_score,
                max: max_score,
            });
        }
        Ok(Self {
            prompt_id,
            min_score,
            max_score,
        })
    }

    /// `max - min`, as a real.
    pub fn range(&self) -> f64 {
        (self.max_score - self.min_score) as f64
    }

    pub fn category_count(&self) -> usize {
        (self.max_score - self.min_score + 1) as usize
    }

    pub fn contains(&self, score: i64) -> bool {
        (self.min_score..=self.max_score).contains(&score)
    }

    /// Maps a rubric score onto `[0, 1]`.
    pub fn normalize(&self, score: f64) -> f64 {
        (score - self.min_score as f64) / self.range()
    }

    /// Maps a `[0, 1]` value back onto the rubric scale.
    pub fn denormalize(&self, raw: f64) -> f64 {
        self.min_score as f64 + raw * self.range()
    }

    pub fn clamp(&self, score: i64) -> i64 {
        score.clamp(self.min_score, self.max_score)
    }
}

/// Parses rubric text: one `prompt_id min max` per line; blank lines and `#` comments skipped.
pub fn parse_rubrics(text: &str) -> Result<BTreeMap<String, Rubric>, CorpusError> {
    let mut rubrics = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let malformed = |message: String| CorpusError::MalformedRubric { line: line_no, message };
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected `prompt_id min max`, found {} fields",
                fields.len()
            )));
        }
        let min: i64 = fields[1]
            .parse()
            .map_err(|_| malformed(format!("unparsable minimum {:?}", fields[1])))?;
        let max: i64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("unparsable maximum {:?}", fields[2])))?;
        let rubric = Rubric::new(fields[0], min, max).map_err(|e| malformed(e.to_string()))?;
        if rubrics.insert(fields[0].to_string(), rubric).is_some() {
            return Err(malformed(format!("duplicate prompt {:?}", fields[0])));
        }
    }
    if rubrics.is_empty() {
        return Err(CorpusError::MalformedRubric {
            line: 0,
            message: "no rubric entries".into(),
        });
    }
    Ok(rubrics)
}

pub fn load_rubrics(path: &Path) -> Result<BTreeMap<String, Rubric>, CorpusError> {
    parse_rubrics(&fs::read_to_string(path)?)
}

pub fn write_rubrics<W: Write>(rubrics: &BTreeMap<String, Rubric>, mut out: W) -> Result<(), CorpusError> {
    for r in rubrics.values() {
        writeln!(out, "{} {} {}", r.prompt_id, r.min_score, r.max_score)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEssay {
    pub essay: TokenizedEssay,
    pub human_score: i64,
}

/// Essays with human scores plus the rubric of every prompt they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub essays: Vec<LabeledEssay>,
    pub rubrics: BTreeMap<String, Rubric>,
}

impl LabeledCorpus {
    pub fn new(essays: Vec<LabeledEssay>, rubrics: BTreeMap<String, Rubric>) -> Result<Self, CorpusError> {
        for (i, e) in essays.iter().enumerate() {
            let rubric = rubrics.get(&e.essay.prompt_id).ok_or_else(|| {
                CorpusError::InvalidEssay(format!("essay {i} refers to unknown prompt {:?}", e.essay.prompt_id))
            })?;
            if !rubric.contains(e.human_score) {
                return Err(CorpusError::InvalidEssay(format!(
                    "essay {i} score {} outside {}..={}",
                    e.human_score, rubric.min_score, rubric.max_score
                )));
            }
        }
        Ok(Self { essays, rubrics })
    }

    pub fn len(&self) -> usize {
        self.essays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.essays.is_empty()
    }

    pub fn rubric_for(&self, essay: &TokenizedEssay) -> Option<&Rubric> {
        self.rubrics.get(&essay.prompt_id)
    }

    /// Keeps only essays of one prompt.
    pub fn for_prompt(&self, prompt_id: &str) -> Option<Self> {
        let rubric = self.rubrics.get(prompt_id)?.clone();
        let essays = self
            .essays
            .iter()
            .filter(|e| e.essay.prompt_id == prompt_id)
            .cloned()
            .collect();
        let mut rubrics = BTreeMap::new();
        rubrics.insert(prompt_id.to_string(), rubric);
        Some(Self { essays, rubrics })
    }
}

const COLUMNS: [&str; 4] = ["essay_id", "prompt_id", "score", "text"];

/// Reads a TSV corpus (`essay_id`, `prompt_id`, `score`, `text` columns, any order)
/// and validates every score against its prompt's rubric.
pub fn read_corpus<R: BufRead>(reader: R, rubrics: BTreeMap<String, Rubric>) -> Result<LabeledCorpus, CorpusError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(CorpusError::MissingColumn("essay_id")),
    };
    let header: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| *h == name)
            .ok_or(CorpusError::MissingColumn(name))?;
    }
    let [id_col, prompt_col, score_col, text_col] = index;

    let mut essays = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row_err = |message: String| CorpusError::Row { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(row_err(format!(
                "expected {} columns, found {}",
                header.len(),
                fields.len()
            )));
        }
        let prompt_id = fields[prompt_col].trim();
        let score: i64 = fields[score_col]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("unparsable score {:?}", fields[score_col])))?;
        let rubric = rubrics
            .get(prompt_id)
            .ok_or_else(|| row_err(format!("no rubric for prompt {prompt_id:?}")))?;
        if !rubric.contains(score) {
            return Err(row_err(format!(
                "score {score} outside rubric {}..={} of prompt {prompt_id}",
                rubric.min_score, rubric.max_score
            )));
        }
        let essay = tokenize_with_ids(fields[text_col], fields[id_col].trim(), prompt_id)
            .map_err(|e| row_err(e.to_string()))?;
        essays.push(LabeledEssay {
            essay,
            human_score: score,
        });
    }
    Ok(LabeledCorpus { essays, rubrics })
}

pub fn load_corpus(path: &Path, rubric_path: &Path) -> Result<LabeledCorpus, CorpusError> {
    let rubrics = load_rubrics(rubric_path)?;
    let file = fs::File::open(path)?;
    read_corpus(BufReader::new(file), rubrics)
}

/// Writes the corpus as TSV with detokenized text.
pub fn write_corpus<W: Write>(corpus: &LabeledCorpus, mut out: W) -> Result<(), CorpusError> {
    writeln!(out, "{}", COLUMNS.join("\t"))?;
    for e in &corpus.essays {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.essay.essay_id,
            e.essay.prompt_id,
            e.human_score,
            e.essay.detokenize()
        )?;
    }
    Ok(())
}

/// Shape parameters for synthetic corpora.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_essays: usize,
    pub keyword_weights: BTreeMap<String, f64>,
    pub length_coeff: f64,
    pub rubric: Rubric,
    /// Inclusive range of sentences per essay.
    pub sentences: (usize, usize),
    /// Inclusive range of words per sentence, excluding the terminator.
    pub words_per_sentence: (usize, usize),
}

impl SyntheticConfig {
    pub fn new(n_essays: usize, keyword_weights: BTreeMap<String, f64>, length_coeff: f64, rubric: Rubric) -> Self {
        Self {
            n_essays,
            keyword_weights,
            length_coeff,
            rubric,
            sentences: (2, 6),
            words_per_sentence: (4, 12),
        }
    }
}

/// Ground-truth score of the synthetic generator:
/// `clamp(round(sum of keyword weights + length_coeff * len))`.
pub fn synthetic_score(
    tokens: &[String],
    keyword_weights: &BTreeMap<String, f64>,
    length_coeff: f64,
    rubric: &Rubric,
) -> i64 {
    // Summed in sorted order so the result is independent of token order.
    let mut contributions: Vec<f64> = tokens.iter().filter_map(|t| keyword_weights.get(t).copied()).collect();
    contributions.sort_by(f64::total_cmp);
    let total: f64 = contributions.iter().sum::<f64>() + length_coeff * tokens.len() as f64;
    rubric.clamp(total.round() as i64)
}

/// Samples essays as random vocabulary words in `.`-terminated sentences and
/// labels them with [`synthetic_score`]. Deterministic in `seed`.
pub fn generate_synthetic_corpus(
    seed: u64,
    vocab: &EmbeddingTable,
    config: &SyntheticConfig,
) -> Result<LabeledCorpus, CorpusError> {
    let words: Vec<&str> = vocab.words().collect();
    if words.is_empty() {
        return Err(CorpusError::InvalidEssay("vocabulary is empty".into()));
    }
    if config.n_essays == 0 {
        return Err(CorpusError::InvalidEssay("n_essays must be at least 1".into()));
    }
    let (s_lo, s_hi) = config.sentences;
    let (w_lo, w_hi) = config.words_per_sentence;
    if s_lo == 0 || s_lo > s_hi || w_lo == 0 || w_lo > w_hi {
        return Err(CorpusError::InvalidEssay("bad synthetic length ranges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut essays = Vec::with_capacity(config.n_essays);
    let width = config.n_essays.to_string().len();
    for i in 0..config.n_essays {
        let mut tokens = Vec::new();
        for _ in 0..rng.random_range(s_lo..=s_hi) {
            for _ in 0..rng.random_range(w_lo..=w_hi) {
                let w = words.choose(&mut rng).expect("non-empty vocabulary");
                tokens.push((*w).to_string());
            }
            tokens.push(".".to_string());
        }
        let score = synthetic_score(&tokens, &config.keyword_weights, config.length_coeff, &config.rubric);
        let essay = TokenizedEssay::from_tokens(format!("s{i:0width$}"), config.rubric.prompt_id.clone(), tokens)?;
        essays.push(LabeledEssay {
            essay,
            human_score: score,
        });
    }
    let mut rubrics = BTreeMap::new();
    rubrics.insert(config.rubric.prompt_id.clone(), config.rubric.clone());
    Ok(LabeledCorpus { essays, rubrics })
}
