//! Word embedding table, essay embedding and exact Euclidean nearest-neighbor search.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::TokenizedEssay;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("word {0:?} is not in the embedding table")]
    UnknownWord(String),
    #[error("nearest-neighbor search needs at least 2 words, table has {0}")]
    TooFewWords(usize),
    #[error("embedding file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding file contains no vectors")]
    Empty,
    #[error("vector for {word:?} has length {found}, table dimension is {expected}")]
    DimensionMismatch {
        word: String,
        expected: usize,
        found: usize,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense vectors keyed by word. Words not in the table embed to the zero vector.
///
/// Words are stored in lexicographic order, which is also the tie-break order
/// of [`EmbeddingTable::nearest_neighbor`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    // row-major, one row per entry of `words`
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` pairs. Later duplicates replace earlier ones.
    pub fn from_pairs<I>(dim: usize, pairs: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut map = std::collections::BTreeMap::new();
        for (word, vec) in pairs {
            if vec.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    word,
                    expected: dim,
                    found: vec.len(),
                });
            }
            map.insert(word, vec);
        }
        let words: Vec<String> = map.keys().cloned().collect();
        let mut vectors = Array2::zeros((words.len(), dim));
        for (mut row, vec) in vectors.rows_mut().into_iter().zip(map.values()) {
            row.assign(&ArrayView1::from(vec.as_slice()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            dim,
            words,
            index,
            vectors,
        })
    }

    /// Seeded standard-Gaussian vectors scaled by `1/sqrt(dim)`.
    pub fn random(words: &[String], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let pairs = words
            .iter()
            .map(|w| (w.clone(), (0..dim).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Vec<_>>();
        Self::from_pairs(dim, pairs).expect("generated vectors have the table dimension")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Vocabulary in lexicographic order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        self.index.get(word).map(|&i| self.vectors.row(i))
    }

    /// Returns a copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            vectors: &self.vectors * factor,
            ..self.clone()
        }
    }

    /// Closest other word by Euclidean distance; ties go to the lexicographically smaller word.
    ///
    /// With `exclude_self == false` the query word itself is a candidate at distance 0.
    pub fn nearest_neighbor(&self, word: &str, exclude_self: bool) -> Result<&str, EmbeddingError> {
        let &query_idx = self
            .index
            .get(word)
            .ok_or_else(|| EmbeddingError::UnknownWord(word.to_string()))?;
        if self.words.len() < 2 {
            return Err(EmbeddingError::TooFewWords(self.words.len()));
        }
        let query = self.vectors.row(query_idx);
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            if exclude_self && i == query_idx {
                continue;
            }
            let d2 = squared_distance(query, row);
            // strict `<` keeps the earliest (lexicographically smallest) word on ties
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        let (i, _) = best.expect("at least one candidate");
        Ok(&self.words[i])
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), EmbeddingError> {
        for (word, row) in self.words.iter().zip(self.vectors.rows()) {
            write!(out, "{word}")?;
            for v in row {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Parses `word v1 ... vd` lines. Every line must have the same `d`.
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable, EmbeddingError> {
    let mut dim = None;
    let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| EmbeddingError::Parse {
                    line: line_no,
                    message: format!("unparsable value {f:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(EmbeddingError::Parse {
                line: line_no,
                message: format!("word {word:?} has no vector"),
            });
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(EmbeddingError::Parse {
                line: line_no,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        if let Some(prev) = seen.insert(word.to_string(), line_no) {
            log::warn!("embedding for {word:?} on line {line_no} replaces line {prev}");
        }
        pairs.push((word.to_string(), values));
    }
    let dim = dim.ok_or(EmbeddingError::Empty)?;
    EmbeddingTable::from_pairs(dim, pairs)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, EmbeddingError> {
    read_embeddings(BufReader::new(fs::File::open(path)?))
}

/// An essay as an `n_tokens x dim` matrix; out-of-vocabulary rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedEssay {
    pub matrix: Array2<f64>,
    pub source: TokenizedEssay,
}

impl EmbeddedEssay {
    pub fn n_tokens(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn embed(essay: &TokenizedEssay, table: &EmbeddingTable) -> EmbeddedEssay {
    let mut matrix = Array2::zeros((essay.len(), table.dim()));
    for (mut row, tok) in matrix.rows_mut().into_iter().zip(essay.tokens()) {
        if let Some(v) = table.get(tok) {
            row.assign(&v);
        }
    }
    EmbeddedEssay {
        matrix,
        source: essay.clone(),
    }
}
