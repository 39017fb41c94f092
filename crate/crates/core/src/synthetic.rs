//! A ready-made synthetic world: vocabulary, embeddings and labeled corpus.
//!
//! Keywords (`kw0`, `kw1`, ...) raise the ground-truth score and get embeddings
//! of norm about `keyword_scale`; fillers (`w0`, `w1`, ...) carry no score and
//! get shorter vectors of norm about `filler_scale`. The sentence terminator
//! `.` is left out of the table and therefore embeds as a zero row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, CorpusError, LabeledCorpus, Rubric, SyntheticConfig};
use crate::embedding::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub n_essays: usize,
    pub dim: usize,
    pub n_keywords: usize,
    pub n_fillers: usize,
    pub keyword_scale: f64,
    pub filler_scale: f64,
    /// Keyword weights are spread evenly over this inclusive range.
    pub weight_range: (f64, f64),
    pub length_coeff: f64,
    pub prompt_id: String,
    pub rubric: (i64, i64),
    pub sentences: (usize, usize),
    pub words_per_sentence: (usize, usize),
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        Self {
            n_essays: 256,
            dim: 8,
            n_keywords: 10,
            n_fillers: 40,
            keyword_scale: 4.0,
            filler_scale: 0.1,
            weight_range: (0.5, 1.0),
            length_coeff: 0.0,
            prompt_id: "P1".into(),
            rubric: (0, 10),
            sentences: (3, 5),
            words_per_sentence: (6, 10),
        }
    }
}

pub fn keyword(i: usize) -> String {
    format!("kw{i}")
}

pub fn filler(i: usize) -> String {
    format!("w{i}")
}

impl SyntheticSetup {
    pub fn rubric(&self) -> Result<Rubric, CorpusError> {
        Rubric::new(self.prompt_id.clone(), self.rubric.0, self.rubric.1)
    }

    pub fn keyword_weights(&self) -> BTreeMap<String, f64> {
        let (lo, hi) = self.weight_range;
        let steps = self.n_keywords.saturating_sub(1).max(1) as f64;
        (0..self.n_keywords)
            .map(|i| (keyword(i), lo + (hi - lo) * i as f64 / steps))
            .collect()
    }

    /// Embedding table for `seed`; keyword and filler vectors use derived sub-seeds.
    pub fn table(&self, seed: u64) -> EmbeddingTable {
        let kws: Vec<String> = (0..self.n_keywords).map(keyword).collect();
        let fills: Vec<String> = (0..self.n_fillers).map(filler).collect();
        let k = EmbeddingTable::random(&kws, self.dim, seed.wrapping_mul(2)).scaled(self.keyword_scale);
        let f =
            EmbeddingTable::random(&fills, self.dim, seed.wrapping_mul(2).wrapping_add(1)).scaled(self.filler_scale);
        let pairs = k
            .words()
            .map(|w| (w.to_string(), k.get(w).expect("own word").to_vec()))
            .chain(f.words().map(|w| (w.to_string(), f.get(w).expect("own word").to_vec())))
            .collect::<Vec<_>>();
        EmbeddingTable::from_pairs(self.dim, pairs).expect("consistent dimensions")
    }

    pub fn corpus_config(&self) -> Result<SyntheticConfig, CorpusError> {
        let mut cfg = SyntheticConfig::new(self.n_essays, self.keyword_weights(), self.length_coeff, self.rubric()?);
        cfg.sentences = self.sentences;
        cfg.words_per_sentence = self.words_per_sentence;
        Ok(cfg)
    }

    /// Table and corpus for `seed`.
    pub fn build(&self, seed: u64) -> Result<(EmbeddingTable, LabeledCorpus), CorpusError> {
        let table = self.table(seed);
        let corpus = generate_synthetic_corpus(seed, &table, &self.corpus_config()?)?;
        Ok((table, corpus))
    }
}
