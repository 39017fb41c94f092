//! Differentiable essay scorers over embedding matrices.
//!
//! Every scorer maps an `n_tokens x dim` matrix to a raw score in `[0, 1]` and
//! returns the exact gradient of that score with respect to the matrix. Three
//! reference scorers are provided:
//!
//! * [`LinearBowScorer`]: clamped linear bag of words, an analytic oracle.
//! * [`MeanPoolMlpScorer`]: one tanh layer over the mean embedding, order blind.
//! * [`RecurrentScorer`]: a tanh recurrence read out at the last state, order aware.
//!
//! Gradients are derived by hand (reverse mode) for both inputs and parameters.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledCorpus, Rubric};
use crate::embedding::{embed, EmbeddedEssay, EmbeddingTable};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("essay contains no tokens")]
    EmptyEssay,
    #[error("scorer expects embedding dimension {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("essay {essay_id:?} has no rubric")]
    MissingRubric { essay_id: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A differentiable scoring function over embedded essays.
///
/// Implementations may assume `x` has at least one row and `input_dim` columns;
/// [`score`] and [`gradient`] enforce that.
pub trait Scorer: Send + Sync {
    fn input_dim(&self) -> usize;

    /// Raw score in `[0, 1]`.
    fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64;

    /// `d raw_score / d x`, same shape as `x`.
    fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

/// A scorer whose parameters can be fitted by gradient descent.
pub trait Trainable: Scorer + Clone {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    /// Raw score and its gradient with respect to [`Trainable::params`].
    fn param_gradient(&self, x: ArrayView2<'_, f64>) -> (f64, Vec<f64>);
}

pub(crate) fn check_input(scorer: &dyn Scorer, x: ArrayView2<'_, f64>) -> Result<(), ScorerError> {
    if x.nrows() == 0 {
        return Err(ScorerError::EmptyEssay);
    }
    if x.ncols() != scorer.input_dim() {
        return Err(ScorerError::DimensionMismatch {
            expected: scorer.input_dim(),
            found: x.ncols(),
        });
    }
    Ok(())
}

/// A raw score together with its value on the rubric scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledScore {
    pub raw: f64,
    pub rubric: Rubric,
    pub scaled: f64,
}

impl ScaledScore {
    pub fn new(raw: f64, rubric: &Rubric) -> Self {
        Self {
            raw,
            rubric: rubric.clone(),
            scaled: rubric.denormalize(raw),
        }
    }

    /// Score assigned to an essay with no tokens: the rubric minimum.
    pub fn empty(rubric: &Rubric) -> Self {
        Self::new(0.0, rubric)
    }

    pub fn unscale(&self) -> f64 {
        self.rubric.normalize(self.scaled)
    }

    /// Nearest rubric category, halves rounded away from zero.
    pub fn category(&self) -> i64 {
        self.rubric.clamp(self.scaled.round() as i64)
    }
}

pub fn score(scorer: &dyn Scorer, essay: &EmbeddedEssay, rubric: &Rubric) -> Result<ScaledScore, ScorerError> {
    check_input(scorer, essay.matrix.view())?;
    Ok(ScaledScore::new(scorer.raw_score(essay.matrix.view()), rubric))
}

pub fn gradient(scorer: &dyn Scorer, essay: &EmbeddedEssay) -> Result<Array2<f64>, ScorerError> {
    check_input(scorer, essay.matrix.view())?;
    Ok(scorer.input_gradient(essay.matrix.view()))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), gaussian_vec(rng, rows * cols, std)).expect("shape matches")
}

/// Standard deviation of every initial parameter.
pub const INIT_STD: f64 = 0.1;

// ---------------------------------------------------------------------------

/// `clamp01(bias + sum_t weight . x_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBowScorer {
    pub weight: Array1<f64>,
    pub bias: f64,
}

impl LinearBowScorer {
    pub fn new(weight: Vec<f64>, bias: f64) -> Self {
        Self {
            weight: Array1::from(weight),
            bias,
        }
    }

    /// Gaussian weights; the bias starts at 0.5 so training begins unclamped.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(gaussian_vec(&mut rng, dim, INIT_STD), 0.5)
    }

    /// Unclamped value `bias + sum_t weight . x_t`.
    pub fn logit(&self, x: ArrayView2<'_, f64>) -> f64 {
        self.bias + x.rows().into_iter().map(|r| r.dot(&self.weight)).sum::<f64>()
    }

    /// `weight . x_t` for every row.
    pub fn contributions(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| r.dot(&self.weight)).collect()
    }

    fn unclamped(z: f64) -> bool {
        (0.0..=1.0).contains(&z)
    }
}

impl Scorer for LinearBowScorer {
    fn input_dim(&self) -> usize {
        self.weight.len()
    }

    fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64 {
        self.logit(x).clamp(0.0, 1.0)
    }

    fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        if Self::unclamped(self.logit(x)) {
            for mut row in g.rows_mut() {
                row.assign(&self.weight);
            }
        }
        g
    }
}

impl Trainable for LinearBowScorer {
    fn params(&self) -> Vec<f64> {
        let mut p = self.weight.to_vec();
        p.push(self.bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let d = self.weight.len();
        self.weight.assign(&ArrayView1::from(&params[..d]));
        self.bias = params[d];
    }

    fn param_gradient(&self, x: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let z = self.logit(x);
        let d = self.weight.len();
        if !Self::unclamped(z) {
            return (z.clamp(0.0, 1.0), vec![0.0; d + 1]);
        }
        let mut g = x.sum_axis(Axis(0)).to_vec();
        g.push(1.0);
        (z, g)
    }
}

// ---------------------------------------------------------------------------

/// Rows compared lexicographically under the IEEE total order.
fn cmp_rows(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> std::cmp::Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Mean of the rows, summed in a canonical (sorted) row order so the result is
/// bitwise independent of token order.
pub fn canonical_row_mean(x: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| cmp_rows(x.row(a), x.row(b)));
    let mut sum = Array1::zeros(x.ncols());
    for i in order {
        sum += &x.row(i);
    }
    sum / x.nrows() as f64
}

/// `sigmoid(out_weight . tanh(hidden_weight . mean_t(x_t) + hidden_bias) + out_bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPoolMlpScorer {
    pub hidden_weight: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    pub out_weight: Array1<f64>,
    pub out_bias: f64,
}

struct MlpForward {
    mean: Array1<f64>,
    hidden: Array1<f64>,
    score: f64,
}

impl MeanPoolMlpScorer {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden_weight: gaussian_matrix(&mut rng, hidden, dim, INIT_STD),
            hidden_bias: Array1::from(gaussian_vec(&mut rng, hidden, INIT_STD)),
            out_weight: Array1::from(gaussian_vec(&mut rng, hidden, INIT_STD)),
            out_bias: gaussian_vec(&mut rng, 1, INIT_STD)[0],
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            hidden_weight: Array2::zeros((hidden, dim)),
            hidden_bias: Array1::zeros(hidden),
            out_weight: Array1::zeros(hidden),
            out_bias: 0.0,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_bias.len()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> MlpForward {
        let mean = canonical_row_mean(x);
        let hidden = (self.hidden_weight.dot(&mean) + &self.hidden_bias).mapv(f64::tanh);
        let score = sigmoid(self.out_weight.dot(&hidden) + self.out_bias);
        MlpForward { mean, hidden, score }
    }

    /// Gradient at the hidden pre-activation.
    fn pre_activation_delta(&self, f: &MlpForward) -> Array1<f64> {
        let dz = f.score * (1.0 - f.score);
        &self.out_weight * &f.hidden.mapv(|h| 1.0 - h * h) * dz
    }
}

impl Scorer for MeanPoolMlpScorer {
    fn input_dim(&self) -> usize {
        self.hidden_weight.ncols()
    }

    fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64 {
        self.forward(x).score
    }

    fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let f = self.forward(x);
        let d_mean = self.hidden_weight.t().dot(&self.pre_activation_delta(&f)) / x.nrows() as f64;
        let mut g = Array2::zeros(x.raw_dim());
        for mut row in g.rows_mut() {
            row.assign(&d_mean);
        }
        g
    }
}

impl Trainable for MeanPoolMlpScorer {
    fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.hidden_weight.iter().copied().collect();
        p.extend(self.hidden_bias.iter());
        p.extend(self.out_weight.iter());
        p.push(self.out_bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let (h, d) = self.hidden_weight.dim();
        let mut it = params.iter().copied();
        for v in self.hidden_weight.iter_mut().chain(self.hidden_bias.iter_mut()) {
            *v = it.next().expect("parameter count");
        }
        for v in self.out_weight.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        self.out_bias = it.next().expect("parameter count");
        debug_assert_eq!(params.len(), h * d + 2 * h + 1);
    }

    fn param_gradient(&self, x: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let f = self.forward(x);
        let dz = f.score * (1.0 - f.score);
        let delta = self.pre_activation_delta(&f);
        let mut g = Vec::with_capacity(self.params_len());
        for &dp in delta.iter() {
            g.extend(f.mean.iter().map(|m| dp * m));
        }
        g.extend(delta.iter());
        g.extend(f.hidden.iter().map(|h| h * dz));
        g.push(dz);
        (f.score, g)
    }
}

impl MeanPoolMlpScorer {
    fn params_len(&self) -> usize {
        let (h, d) = self.hidden_weight.dim();
        h * d + 2 * h + 1
    }
}

// ---------------------------------------------------------------------------

/// `h_t = tanh(input_weight . x_t + recurrent_weight . h_{t-1} + bias)`, `h_0 = 0`,
/// scored as `sigmoid(out_weight . h_n + out_bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentScorer {
    pub input_weight: Array2<f64>,
    pub recurrent_weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub out_weight: Array1<f64>,
    pub out_bias: f64,
}

struct RnnForward {
    // states[0] is h_0 = 0; states[t + 1] follows token t
    states: Vec<Array1<f64>>,
    score: f64,
}

struct RnnBackward {
    d_input: Array2<f64>,
    d_input_weight: Array2<f64>,
    d_recurrent_weight: Array2<f64>,
    d_bias: Array1<f64>,
    d_out_weight: Array1<f64>,
    d_out_bias: f64,
}

impl RecurrentScorer {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            input_weight: gaussian_matrix(&mut rng, hidden, dim, INIT_STD),
            recurrent_weight: gaussian_matrix(&mut rng, hidden, hidden, INIT_STD),
            bias: Array1::from(gaussian_vec(&mut rng, hidden, INIT_STD)),
            out_weight: Array1::from(gaussian_vec(&mut rng, hidden, INIT_STD)),
            out_bias: gaussian_vec(&mut rng, 1, INIT_STD)[0],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.bias.len()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> RnnForward {
        let mut states = Vec::with_capacity(x.nrows() + 1);
        states.push(Array1::zeros(self.hidden_size()));
        for row in x.rows() {
            let prev = states.last().expect("h_0 present");
            let pre = self.input_weight.dot(&row) + self.recurrent_weight.dot(prev) + &self.bias;
            states.push(pre.mapv(f64::tanh));
        }
        let last = states.last().expect("h_0 present");
        let score = sigmoid(self.out_weight.dot(last) + self.out_bias);
        RnnForward { states, score }
    }

    fn backward(&self, x: ArrayView2<'_, f64>, f: &RnnForward, with_params: bool) -> RnnBackward {
        let (h, d) = self.input_weight.dim();
        let n = x.nrows();
        let dz = f.score * (1.0 - f.score);
        let mut out = RnnBackward {
            d_input: Array2::zeros((n, d)),
            d_input_weight: Array2::zeros(if with_params { (h, d) } else { (0, 0) }),
            d_recurrent_weight: Array2::zeros(if with_params { (h, h) } else { (0, 0) }),
            d_bias: Array1::zeros(h),
            d_out_weight: &f.states[n] * dz,
            d_out_bias: dz,
        };
        let mut d_state = &self.out_weight * dz;
        for t in (0..n).rev() {
            let state = &f.states[t + 1];
            let d_pre = &d_state * &state.mapv(|s| 1.0 - s * s);
            out.d_input.row_mut(t).assign(&self.input_weight.t().dot(&d_pre));
            if with_params {
                let col = d_pre.view().insert_axis(Axis(1));
                out.d_input_weight += &col.dot(&x.row(t).insert_axis(Axis(0)));
                out.d_recurrent_weight += &col.dot(&f.states[t].view().insert_axis(Axis(0)));
                out.d_bias += &d_pre;
            }
            d_state = self.recurrent_weight.t().dot(&d_pre);
        }
        out
    }
}

impl Scorer for RecurrentScorer {
    fn input_dim(&self) -> usize {
        self.input_weight.ncols()
    }

    fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64 {
        self.forward(x).score
    }

    fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let f = self.forward(x);
        self.backward(x, &f, false).d_input
    }
}

impl Trainable for RecurrentScorer {
    fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.input_weight.iter().copied().collect();
        p.extend(self.recurrent_weight.iter());
        p.extend(self.bias.iter());
        p.extend(self.out_weight.iter());
        p.push(self.out_bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for v in self
            .input_weight
            .iter_mut()
            .chain(self.recurrent_weight.iter_mut())
            .chain(self.bias.iter_mut())
            .chain(self.out_weight.iter_mut())
        {
            *v = it.next().expect("parameter count");
        }
        self.out_bias = it.next().expect("parameter count");
    }

    fn param_gradient(&self, x: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let f = self.forward(x);
        let b = self.backward(x, &f, true);
        let mut g: Vec<f64> = b.d_input_weight.iter().copied().collect();
        g.extend(b.d_recurrent_weight.iter());
        g.extend(b.d_bias.iter());
        g.extend(b.d_out_weight.iter());
        g.push(b.d_out_bias);
        (f.score, g)
    }
}

// ---------------------------------------------------------------------------

/// Any of the built-in scorers; this is what checkpoints hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerModel {
    LinearBow(LinearBowScorer),
    MeanPoolMlp(MeanPoolMlpScorer),
    Recurrent(RecurrentScorer),
}

impl ScorerModel {
    pub fn as_scorer(&self) -> &dyn Scorer {
        match self {
            ScorerModel::LinearBow(s) => s,
            ScorerModel::MeanPoolMlp(s) => s,
            ScorerModel::Recurrent(s) => s,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScorerModel::LinearBow(_) => "linear_bow",
            ScorerModel::MeanPoolMlp(_) => "mean_pool_mlp",
            ScorerModel::Recurrent(_) => "recurrent",
        }
    }
}

impl Scorer for ScorerModel {
    fn input_dim(&self) -> usize {
        self.as_scorer().input_dim()
    }

    fn raw_score(&self, x: ArrayView2<'_, f64>) -> f64 {
        self.as_scorer().raw_score(x)
    }

    fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.as_scorer().input_gradient(x)
    }
}

pub const CHECKPOINT_FORMAT: &str = "essay-ig-scorer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ScorerModel,
}

impl Checkpoint {
    pub fn new(model: ScorerModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScorerError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| ScorerError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ScorerError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ScorerError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Array2<f64>,
    /// Target raw score in `[0, 1]`.
    pub target: f64,
}

/// Embeds every essay and normalizes its human score by the prompt rubric.
pub fn training_examples(corpus: &LabeledCorpus, table: &EmbeddingTable) -> Result<Vec<TrainingExample>, ScorerError> {
    corpus
        .essays
        .iter()
        .map(|e| {
            let rubric = corpus.rubric_for(&e.essay).ok_or_else(|| ScorerError::MissingRubric {
                essay_id: e.essay.essay_id.clone(),
            })?;
            Ok(TrainingExample {
                input: embed(&e.essay, table).matrix,
                target: rubric.normalize(e.human_score as f64),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch; otherwise examples are reshuffled into
    /// mini-batches of this size every epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Training-set MSE in raw units.
pub fn mean_squared_error<S: Scorer + ?Sized>(scorer: &S, examples: &[TrainingExample]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let r = scorer.raw_score(ex.input.view()) - ex.target;
            r * r
        })
        .sum();
    total / examples.len() as f64
}

/// Fixed-step gradient descent on the mean squared error.
///
/// Returns the trained scorer and the training MSE after every epoch.
pub fn train<S: Trainable>(
    scorer: &S,
    examples: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(S, Vec<f64>), ScorerError> {
    if examples.is_empty() {
        return Err(ScorerError::EmptyCorpus);
    }
    for ex in examples {
        check_input(scorer, ex.input.view())?;
    }
    let mut model = scorer.clone();
    let mut params = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = config.batch_size.unwrap_or(examples.len()).max(1);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; params.len()];
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &examples[i];
                let (s, g) = model.param_gradient(ex.input.view());
                let upstream = scale * (s - ex.target);
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += upstream * gi;
                }
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            model.set_params(&params);
        }
        let loss = mean_squared_error(&model, examples);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(ScorerError::Diverged { epoch });
        }
        history.push(loss);
    }
    Ok((model, history))
}
