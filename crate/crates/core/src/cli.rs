//! The `essay-ig` command line.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, missing or
//! malformed input files), 1 for failures while running.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_corpus, CorpusAttribution, Evaluator, IGConfig, QuadratureRule};
use crate::corpus::{load_corpus, tokenize_with_ids, write_corpus, write_rubrics, LabeledCorpus, LabeledEssay, Rubric};
use crate::embedding::{load_embeddings, EmbeddingTable};
use crate::metrics::{
    attribution_churn, curve_point, impact_stats, overlap_top_k, sign_flip_churn, CurvePoint, ImpactStats,
};
use crate::perturb::{self, InjectPosition, PerturbationOutcome, Schedule, Strategy};
use crate::report::{render_heatmap, render_index, IndexEntry};
use crate::scorer::{
    train, training_examples, Checkpoint, LinearBowScorer, MeanPoolMlpScorer, RecurrentScorer, ScaledScore, Scorer,
    ScorerModel, TrainConfig,
};
use crate::synthetic::SyntheticSetup;

pub const TOOL: &str = "essay-ig";
/// Version of every JSON and CSV artifact layout written by the CLI.
pub const ARTIFACT_VERSION: u32 = 1;
pub const DEFAULT_EPOCHS: usize = 2000;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "essay-ig",
    version,
    about = "Word-level attribution and perturbation testing for essay scorers"
)]
pub struct RunConfig {
    /// Worker threads for per-essay work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, rubric file and embedding table.
    Synth(SynthArgs),
    /// Fit a scorer to a labeled corpus and write a checkpoint.
    Train(TrainArgs),
    /// Score every essay with a trained scorer.
    Score(ScoreArgs),
    /// Integrated-gradients word attributions for every essay.
    Attribute(AttributeArgs),
    /// Run one perturbation strategy over the corpus.
    Perturb(PerturbArgs),
    /// Relative-QWK curves, or statistics of a perturbation run.
    Metrics(MetricsArgs),
    /// Static HTML heatmaps from an attribution file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n_essays: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Tab-separated corpus with columns essay_id, prompt_id, score, text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Rubric file, one `prompt_id min max` line per prompt.
    #[arg(long)]
    pub rubrics: PathBuf,
    /// Embedding table: one `word v1 v2 ...` line per word.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Restrict to essays of this prompt.
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    LinearBow,
    MeanPoolMlp,
    Recurrent,
}

impl ModelKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            ModelKind::LinearBow => 0.002,
            ModelKind::MeanPoolMlp => 1.0,
            ModelKind::Recurrent => 0.5,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ModelKind::MeanPoolMlp)]
    pub model: ModelKind,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Defaults to 0.002 (linear-bow), 1.0 (mean-pool-mlp) or 0.5 (recurrent).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Mini-batch size; full-batch when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds parameter initialization and mini-batch order.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of the training loss per epoch.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Left,
    Midpoint,
    Trapezoid,
}

impl From<RuleArg> for QuadratureRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Left => QuadratureRule::Left,
            RuleArg::Midpoint => QuadratureRule::Midpoint,
            RuleArg::Trapezoid => QuadratureRule::Trapezoid,
        }
    }
}

#[derive(Debug, Args)]
pub struct IgArgs {
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Midpoint)]
    pub rule: RuleArg,
    /// Relative completeness error above which an essay is flagged.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

impl IgArgs {
    fn config(&self) -> CliResult<IGConfig> {
        let cfg = IGConfig {
            steps: self.steps,
            rule: self.rule.into(),
            completeness_tolerance: self.tolerance,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub ig: IgArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    DeleteLeast,
    AddTop,
    WordSoup,
    DeleteRandom,
    ShuffleSentences,
    ShuffleWords,
    SwapSynonyms,
    InjectSpan,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub ig: IgArgs,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Comma-separated fractions. Schedules for delete-least / add-top default
    /// to 0.1..0.9 / 0.1..1.0; word-soup and delete-random use the first value
    /// (defaults 0.4 and 0.25).
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Re-rank after every step (default: on for delete-least, off for add-top).
    #[arg(long)]
    pub recompute: Option<bool>,
    /// Required by delete-random and the shuffles.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub top_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub bottom_frac: f64,
    /// Plain-text file holding one span to inject; may be repeated.
    #[arg(long)]
    pub span_file: Vec<PathBuf>,
    /// begin, end, or a token index.
    #[arg(long, default_value = "end")]
    pub position: InjectPosition,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Deletion,
    Addition,
    RandomDeletion,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["curve", "outcomes"])))]
pub struct MetricsArgs {
    /// Compute a relative-QWK curve over the corpus.
    #[arg(long, value_enum, requires_all = ["corpus", "rubrics", "embeddings", "checkpoint"])]
    pub curve: Option<CurveKind>,
    /// Summarize an outcome file written by `perturb`.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub rubrics: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[command(flatten)]
    pub ig: IgArgs,
    /// Curve fractions, comma-separated (default 0.1..0.9, or 0.1..1.0 for addition).
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Re-rank after every step of a deletion or addition curve.
    #[arg(long)]
    pub recompute: Option<bool>,
    /// Required by the random-deletion curve.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Top-set fraction for overlap and churn.
    #[arg(long, default_value_t = 0.2)]
    pub top_frac: f64,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON copy of the same numbers.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Attribution file written by `attribute`.
    #[arg(long)]
    pub attributions: PathBuf,
    /// Optional curve CSV written by `metrics --curve`, drawn on the index page.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Provenance block stored in every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub artifact_version: u32,
    pub command: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub ig: Option<IGConfig>,
}

impl Metadata {
    fn new(command: &str, seed: Option<u64>, ig: Option<IGConfig>) -> Self {
        Self {
            tool: TOOL.to_string(),
            artifact_version: ARTIFACT_VERSION,
            command: command.to_string(),
            seed,
            ig,
        }
    }

    fn check(&self, command: &str) -> CliResult<()> {
        if self.tool != TOOL || self.artifact_version != ARTIFACT_VERSION || self.command != command {
            return Err(usage(format!(
                "expected a {TOOL} v{ARTIFACT_VERSION} `{command}` artifact, found {} v{} `{}`",
                self.tool, self.artifact_version, self.command
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArtifact {
    pub metadata: Metadata,
    pub setup: SyntheticSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionArtifact {
    pub metadata: Metadata,
    pub attribution: CorpusAttribution,
}

/// Every outcome of one essay; steps that could not run are listed in `skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayOutcomes {
    pub essay_id: String,
    pub prompt_id: String,
    pub human_score: i64,
    pub seed: Option<u64>,
    pub outcomes: Vec<PerturbationOutcome>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeArtifact {
    pub metadata: Metadata,
    pub essays: Vec<EssayOutcomes>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{TOOL}: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cfg: RunConfig) -> CliResult<()> {
    let work = move || match cfg.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Attribute(a) => attribute_cmd(a),
        Command::Perturb(a) => perturb_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match cfg.threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(runtime)?
            .install(work),
        None => work(),
    }
}

// ---------------------------------------------------------------------------
// input / output helpers

fn load_data(data: &DataArgs) -> CliResult<(LabeledCorpus, EmbeddingTable)> {
    let mut corpus =
        load_corpus(&data.corpus, &data.rubrics).map_err(|e| usage(format!("{}: {e}", data.corpus.display())))?;
    if let Some(p) = &data.prompt {
        corpus = corpus
            .for_prompt(p)
            .ok_or_else(|| usage(format!("no essays for prompt {p:?}")))?;
    }
    if corpus.is_empty() {
        return Err(usage("corpus has no essays"));
    }
    let table = load_embeddings(&data.embeddings).map_err(|e| usage(format!("{}: {e}", data.embeddings.display())))?;
    Ok((corpus, table))
}

fn load_model(args: &ModelArgs) -> CliResult<(LabeledCorpus, EmbeddingTable, ScorerModel)> {
    let (corpus, table) = load_data(&args.data)?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|e| usage(format!("{}: {e}", args.checkpoint.display())))?;
    if ckpt.model.input_dim() != table.dim() {
        return Err(usage(format!(
            "checkpoint expects {}-dimensional embeddings, table has {}",
            ckpt.model.input_dim(),
            table.dim()
        )));
    }
    Ok((corpus, table, ckpt.model))
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(runtime)?;
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn rubric<'a>(corpus: &'a LabeledCorpus, essay: &LabeledEssay) -> CliResult<&'a Rubric> {
    corpus
        .rubric_for(&essay.essay)
        .ok_or_else(|| usage(format!("essay {:?} has no rubric", essay.essay.essay_id)))
}

/// One seed per essay, drawn in corpus order from a single generator.
fn essay_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

fn check_fractions(f: &[f64]) -> CliResult<()> {
    match f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(usage(format!("fraction {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// subcommands

fn synth(a: SynthArgs) -> CliResult<()> {
    if a.n_essays == 0 || a.dim == 0 {
        return Err(usage("--n-essays and --dim must be positive"));
    }
    let setup = SyntheticSetup {
        n_essays: a.n_essays,
        dim: a.dim,
        ..SyntheticSetup::default()
    };
    let (table, corpus) = setup.build(a.seed).map_err(runtime)?;
    let mut buf = Vec::new();
    write_corpus(&corpus, &mut buf).map_err(runtime)?;
    write_text(&a.out_dir.join("corpus.tsv"), &String::from_utf8_lossy(&buf))?;
    buf.clear();
    write_rubrics(&corpus.rubrics, &mut buf).map_err(runtime)?;
    write_text(&a.out_dir.join("rubrics.txt"), &String::from_utf8_lossy(&buf))?;
    buf.clear();
    table.write(&mut buf).map_err(runtime)?;
    write_text(&a.out_dir.join("embeddings.txt"), &String::from_utf8_lossy(&buf))?;
    write_json(
        &a.out_dir.join("synth.json"),
        &SynthArtifact {
            metadata: Metadata::new("synth", Some(a.seed), None),
            setup,
        },
    )?;
    println!("wrote {} essays to {}", corpus.len(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    mse: f64,
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let (corpus, table) = load_data(&a.data)?;
    let examples = training_examples(&corpus, &table).map_err(usage)?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate.unwrap_or(a.model.default_learning_rate()),
        batch_size: a.batch_size,
        seed: a.seed,
    };
    if a.hidden == 0 && a.model != ModelKind::LinearBow {
        return Err(usage("--hidden must be positive"));
    }
    if config.batch_size == Some(0) {
        return Err(usage("--batch-size must be positive"));
    }
    let dim = table.dim();
    let (model, history) = match a.model {
        ModelKind::LinearBow => {
            let (m, h) = train(&LinearBowScorer::init(dim, a.seed), &examples, &config).map_err(runtime)?;
            (ScorerModel::LinearBow(m), h)
        }
        ModelKind::MeanPoolMlp => {
            let (m, h) = train(&MeanPoolMlpScorer::init(dim, a.hidden, a.seed), &examples, &config).map_err(runtime)?;
            (ScorerModel::MeanPoolMlp(m), h)
        }
        ModelKind::Recurrent => {
            let (m, h) = train(&RecurrentScorer::init(dim, a.hidden, a.seed), &examples, &config).map_err(runtime)?;
            (ScorerModel::Recurrent(m), h)
        }
    };
    create_parent(&a.out)?;
    Checkpoint::new(model).save(&a.out).map_err(runtime)?;
    if let Some(path) = &a.history {
        let rows: Vec<HistoryRow> = history
            .iter()
            .enumerate()
            .map(|(epoch, &mse)| HistoryRow { epoch, mse })
            .collect();
        write_csv(path, &rows)?;
    }
    if let Some(last) = history.last() {
        println!("final training MSE {last:.6} after {} epochs", history.len());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreRow<'a> {
    essay_id: &'a str,
    prompt_id: &'a str,
    human_score: i64,
    raw: f64,
    scaled: f64,
    predicted: i64,
}

fn score_cmd(a: ScoreArgs) -> CliResult<()> {
    let (corpus, table, model) = load_model(&a.model)?;
    let scores = corpus
        .essays
        .par_iter()
        .map(|e| {
            let r = rubric(&corpus, e)?;
            Evaluator::new(&model, &table, r, IGConfig::default())
                .score(&e.essay)
                .map_err(runtime)
        })
        .collect::<CliResult<Vec<ScaledScore>>>()?;
    let rows: Vec<ScoreRow> = corpus
        .essays
        .iter()
        .zip(&scores)
        .map(|(e, s)| ScoreRow {
            essay_id: &e.essay.essay_id,
            prompt_id: &e.essay.prompt_id,
            human_score: e.human_score,
            raw: s.raw,
            scaled: s.scaled,
            predicted: s.category(),
        })
        .collect();
    write_csv(&a.out, &rows)
}

fn attribute_cmd(a: AttributeArgs) -> CliResult<()> {
    let cfg = a.ig.config()?;
    let (corpus, table, model) = load_model(&a.model)?;
    let attribution = attribute_corpus(&model, &corpus, &table, &cfg).map_err(runtime)?;
    if attribution.violations > 0 {
        log::warn!(
            "{} of {} essays exceed the completeness tolerance {}",
            attribution.violations,
            attribution.essays.len(),
            cfg.completeness_tolerance
        );
    }
    write_json(
        &a.out,
        &AttributionArtifact {
            metadata: Metadata::new("attribute", None, Some(cfg)),
            attribution,
        },
    )
}

fn needs_seed(s: StrategyArg) -> bool {
    matches!(
        s,
        StrategyArg::DeleteRandom | StrategyArg::ShuffleSentences | StrategyArg::ShuffleWords
    )
}

fn perturb_cmd(a: PerturbArgs) -> CliResult<()> {
    let cfg = a.ig.config()?;
    if needs_seed(a.strategy) && a.seed.is_none() {
        return Err(usage("this strategy is randomized and needs --seed"));
    }
    if let Some(f) = &a.fractions {
        check_fractions(f)?;
    }
    let first = |default: f64| a.fractions.as_ref().and_then(|f| f.first().copied()).unwrap_or(default);
    let schedule = match a.strategy {
        StrategyArg::DeleteLeast => Some(match &a.fractions {
            Some(f) => Schedule::new(f.clone(), a.recompute.unwrap_or(true)).map_err(usage)?,
            None => Schedule::new(
                Schedule::default_deletion().fractions().to_vec(),
                a.recompute.unwrap_or(true),
            )
            .map_err(usage)?,
        }),
        StrategyArg::AddTop => Some(match &a.fractions {
            Some(f) => Schedule::new(f.clone(), a.recompute.unwrap_or(false)).map_err(usage)?,
            None => Schedule::new(
                Schedule::default_addition().fractions().to_vec(),
                a.recompute.unwrap_or(false),
            )
            .map_err(usage)?,
        }),
        _ => None,
    };
    let spans = a
        .span_file
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            tokenize_with_ids(&text, "span", "span").map_err(|e| usage(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if a.strategy == StrategyArg::InjectSpan && spans.is_empty() {
        return Err(usage("inject-span needs at least one --span-file"));
    }
    let (corpus, table, model) = load_model(&a.model)?;
    let seeds = a.seed.map(|s| essay_seeds(s, corpus.len()));

    let essays = corpus
        .essays
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let r = rubric(&corpus, e)?;
            let ev = Evaluator::new(&model, &table, r, cfg);
            let seed = seeds.as_ref().map(|s| s[i]);
            let mut outcomes = Vec::new();
            let mut skipped = Vec::new();
            let mut push = |res: Result<PerturbationOutcome, perturb::PerturbError>| match res {
                Ok(o) => outcomes.push(o),
                Err(err) => skipped.push(err.to_string()),
            };
            let essay = &e.essay;
            match a.strategy {
                StrategyArg::DeleteLeast => {
                    match perturb::delete_least(essay, &ev, schedule.as_ref().expect("schedule")) {
                        Ok(steps) => steps.into_iter().for_each(&mut push),
                        Err(err) => push(Err(err)),
                    }
                }
                StrategyArg::AddTop => match perturb::add_top(essay, &ev, schedule.as_ref().expect("schedule")) {
                    Ok(steps) => steps.into_iter().map(Ok).for_each(&mut push),
                    Err(err) => push(Err(err)),
                },
                StrategyArg::WordSoup => push(perturb::word_soup(essay, &ev, first(0.4))),
                StrategyArg::DeleteRandom => push(perturb::delete_random(
                    essay,
                    &ev,
                    first(0.25),
                    seed.expect("seed checked"),
                )),
                StrategyArg::ShuffleSentences => {
                    push(perturb::shuffle_sentences(essay, &ev, seed.expect("seed checked")))
                }
                StrategyArg::ShuffleWords => push(perturb::shuffle_words(essay, &ev, seed.expect("seed checked"))),
                StrategyArg::SwapSynonyms => {
                    push(perturb::swap_synonyms(essay, &ev, &table, a.top_frac, a.bottom_frac))
                }
                StrategyArg::InjectSpan => {
                    for span in &spans {
                        push(perturb::inject_span(essay, &ev, span, a.position));
                    }
                }
            }
            Ok(EssayOutcomes {
                essay_id: essay.essay_id.clone(),
                prompt_id: essay.prompt_id.clone(),
                human_score: e.human_score,
                seed,
                outcomes,
                skipped,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let skipped: usize = essays.iter().map(|e| e.skipped.len()).sum();
    if skipped > 0 {
        log::warn!("{skipped} perturbation steps could not be applied; see `skipped` in the output");
    }
    write_json(
        &a.out,
        &OutcomeArtifact {
            metadata: Metadata::new("perturb", a.seed, Some(cfg)),
            essays,
        },
    )
}

/// One row of a curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub artifact_version: u32,
    pub curve: CurveKind,
    pub fraction: f64,
    pub n_samples: usize,
    pub n_skipped: usize,
    pub qwk: f64,
    pub relative_qwk: f64,
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub n_pos: f64,
    pub n_neg: f64,
    pub sigma: f64,
}

impl CurveRow {
    fn new(curve: CurveKind, p: &CurvePoint, n_skipped: usize) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION,
            curve,
            fraction: p.fraction,
            n_samples: p.n_samples,
            n_skipped,
            qwk: p.qwk,
            relative_qwk: p.relative_qwk,
            mu_pos: p.impact.mu_pos,
            mu_neg: p.impact.mu_neg,
            n_pos: p.impact.n_pos,
            n_neg: p.impact.n_neg,
            sigma: p.impact.sigma,
        }
    }
}

/// Relative-QWK curve of one perturbation kind over a single-prompt corpus.
///
/// `seed` is required for [`CurveKind::RandomDeletion`]; fractions whose step
/// cannot be applied to an essay leave that essay out of that point.
pub fn compute_curve(
    kind: CurveKind,
    scorer: &dyn Scorer,
    corpus: &LabeledCorpus,
    table: &EmbeddingTable,
    config: IGConfig,
    schedule: &Schedule,
    seed: Option<u64>,
) -> CliResult<Vec<CurveRow>> {
    let prompts: BTreeSet<&str> = corpus.essays.iter().map(|e| e.essay.prompt_id.as_str()).collect();
    if prompts.len() != 1 {
        return Err(usage(format!(
            "curves are computed per prompt; corpus has {} prompts, select one with --prompt",
            prompts.len()
        )));
    }
    let rubric = rubric(corpus, &corpus.essays[0])?.clone();
    let seeds = match (kind, seed) {
        (CurveKind::RandomDeletion, None) => return Err(usage("the random-deletion curve needs --seed")),
        (_, s) => s.map(|s| essay_seeds(s, corpus.len())),
    };
    let ev = Evaluator::new(scorer, table, &rubric, config);
    let fractions = schedule.fractions();
    // per essay: original score and one optional perturbed score per fraction
    let per_essay = corpus
        .essays
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let original = ev.score(&e.essay).map_err(runtime)?;
            let steps: Vec<Option<ScaledScore>> = match kind {
                CurveKind::Deletion => match perturb::delete_least(&e.essay, &ev, schedule) {
                    Ok(steps) => steps.into_iter().map(|s| s.ok().map(|o| o.perturbed.score)).collect(),
                    Err(_) => vec![None; fractions.len()],
                },
                CurveKind::Addition => match perturb::add_top(&e.essay, &ev, schedule) {
                    Ok(steps) => steps.into_iter().map(|o| Some(o.perturbed.score)).collect(),
                    Err(_) => vec![None; fractions.len()],
                },
                CurveKind::RandomDeletion => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds.as_ref().expect("seeds")[i]);
                    fractions
                        .iter()
                        .map(|&f| {
                            let s: u64 = rng.random();
                            perturb::delete_random(&e.essay, &ev, f, s)
                                .ok()
                                .map(|o| o.perturbed.score)
                        })
                        .collect()
                }
            };
            Ok((e.human_score, original, steps))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(fractions.len());
    for (k, &fraction) in fractions.iter().enumerate() {
        let (mut human, mut orig, mut pert) = (Vec::new(), Vec::new(), Vec::new());
        for (h, o, steps) in &per_essay {
            if let Some(p) = &steps[k] {
                human.push(*h);
                orig.push(o.clone());
                pert.push(p.clone());
            }
        }
        let skipped = per_essay.len() - human.len();
        if human.is_empty() {
            return Err(runtime(format!("no essay could be perturbed at fraction {fraction}")));
        }
        let point = curve_point(fraction, &human, &orig, &pert, &rubric).map_err(runtime)?;
        rows.push(CurveRow::new(kind, &point, skipped));
    }
    Ok(rows)
}

/// Per-outcome metrics row; the final rows of a file summarize each strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub artifact_version: u32,
    /// `essay` or `summary`.
    pub row: String,
    pub essay_id: String,
    pub strategy: String,
    pub fraction: Option<f64>,
    pub n_samples: usize,
    pub original_score: Option<f64>,
    pub perturbed_score: Option<f64>,
    pub delta: Option<f64>,
    pub original_tokens: Option<usize>,
    pub perturbed_tokens: Option<usize>,
    pub overlap_top: Option<f64>,
    pub churn_top: Option<f64>,
    pub sign_flip_top: Option<f64>,
    pub mu_pos: Option<f64>,
    pub mu_neg: Option<f64>,
    pub n_pos: Option<f64>,
    pub n_neg: Option<f64>,
    pub sigma: Option<f64>,
}

fn strategy_label(s: &Strategy) -> (String, Option<f64>) {
    match s {
        Strategy::DeleteLeast { fraction, .. } => ("delete-least".into(), Some(*fraction)),
        Strategy::AddTop { fraction, .. } => ("add-top".into(), Some(*fraction)),
        Strategy::DeleteRandom { fraction } => ("delete-random".into(), Some(*fraction)),
        Strategy::ShuffleSentences => ("shuffle-sentences".into(), None),
        Strategy::ShuffleWords => ("shuffle-words".into(), None),
        Strategy::SwapSynonyms { top_frac, .. } => ("swap-synonyms".into(), Some(*top_frac)),
        Strategy::InjectSpan { .. } => ("inject-span".into(), None),
    }
}

/// Strategy label and fraction bits.
type GroupKey = (String, Option<u64>);
/// Original and perturbed scores.
type ScorePairs = (Vec<ScaledScore>, Vec<ScaledScore>);

/// Essay rows in input order, then one summary row per strategy/fraction.
pub fn outcome_rows(artifact: &OutcomeArtifact, top_frac: f64) -> CliResult<Vec<OutcomeRow>> {
    let mut rows = Vec::new();
    let mut groups: Vec<(GroupKey, ScorePairs)> = Vec::new();
    for e in &artifact.essays {
        for o in &e.outcomes {
            let (label, fraction) = strategy_label(&o.strategy);
            let (before, after) = (&o.original.attribution, &o.perturbed.attribution);
            let churn_ok = !before.is_empty() && !after.is_empty();
            let overlap_top = if o.injected.is_empty() {
                None
            } else {
                Some(overlap_top_k(after, &o.injected, top_frac).map_err(runtime)?)
            };
            let churn_top = if churn_ok {
                Some(attribution_churn(&before.rank(), &after.rank(), &o.origin, top_frac).map_err(runtime)?)
            } else {
                None
            };
            let sign_flip_top = if churn_ok {
                Some(sign_flip_churn(before, after, &o.origin, top_frac).map_err(runtime)?)
            } else {
                None
            };
            rows.push(OutcomeRow {
                artifact_version: ARTIFACT_VERSION,
                row: "essay".into(),
                essay_id: e.essay_id.clone(),
                strategy: label.clone(),
                fraction,
                n_samples: 1,
                original_score: Some(o.original.score.scaled),
                perturbed_score: Some(o.perturbed.score.scaled),
                delta: Some(o.score_delta()),
                original_tokens: Some(o.original.essay.len()),
                perturbed_tokens: Some(o.perturbed.essay.len()),
                overlap_top,
                churn_top,
                sign_flip_top,
                mu_pos: None,
                mu_neg: None,
                n_pos: None,
                n_neg: None,
                sigma: None,
            });
            let key = (label, fraction.map(f64::to_bits));
            let idx = match groups.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    groups.push((key, (Vec::new(), Vec::new())));
                    groups.len() - 1
                }
            };
            groups[idx].1 .0.push(o.original.score.clone());
            groups[idx].1 .1.push(o.perturbed.score.clone());
        }
    }
    for ((label, bits), (orig, pert)) in groups {
        let stats: ImpactStats = impact_stats(&orig, &pert, &orig[0].rubric).map_err(runtime)?;
        rows.push(OutcomeRow {
            artifact_version: ARTIFACT_VERSION,
            row: "summary".into(),
            essay_id: String::new(),
            strategy: label,
            fraction: bits.map(f64::from_bits),
            n_samples: orig.len(),
            original_score: None,
            perturbed_score: None,
            delta: None,
            original_tokens: None,
            perturbed_tokens: None,
            overlap_top: None,
            churn_top: None,
            sign_flip_top: None,
            mu_pos: Some(stats.mu_pos),
            mu_neg: Some(stats.mu_neg),
            n_pos: Some(stats.n_pos),
            n_neg: Some(stats.n_neg),
            sigma: Some(stats.sigma),
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct MetricsJson<'a, T: Serialize> {
    metadata: Metadata,
    rows: &'a [T],
}

fn metrics_cmd(a: MetricsArgs) -> CliResult<()> {
    if !(a.top_frac > 0.0 && a.top_frac <= 1.0) {
        return Err(usage("--top-frac must be in (0, 1]"));
    }
    if let Some(kind) = a.curve {
        let cfg = a.ig.config()?;
        let model_args = ModelArgs {
            data: DataArgs {
                corpus: a.corpus.clone().expect("required by clap"),
                rubrics: a.rubrics.clone().expect("required by clap"),
                embeddings: a.embeddings.clone().expect("required by clap"),
                prompt: a.prompt.clone(),
            },
            checkpoint: a.checkpoint.clone().expect("required by clap"),
        };
        let recompute = a.recompute.unwrap_or(kind == CurveKind::Deletion);
        let schedule = match (&a.fractions, kind) {
            (Some(f), _) => {
                check_fractions(f)?;
                Schedule::new(f.clone(), recompute).map_err(usage)?
            }
            (None, CurveKind::Addition) => Schedule::evenly_spaced(0.1, 1.0, recompute).map_err(usage)?,
            (None, _) => Schedule::evenly_spaced(0.1, 0.9, recompute).map_err(usage)?,
        };
        let (corpus, table, model) = load_model(&model_args)?;
        let rows = compute_curve(kind, &model, &corpus, &table, cfg, &schedule, a.seed)?;
        write_csv(&a.out, &rows)?;
        if let Some(path) = &a.json {
            write_json(
                path,
                &MetricsJson {
                    metadata: Metadata::new("metrics", a.seed, Some(cfg)),
                    rows: &rows,
                },
            )?;
        }
        return Ok(());
    }
    let path = a.outcomes.as_ref().expect("clap enforces one mode");
    let artifact: OutcomeArtifact = read_json(path)?;
    artifact.metadata.check("perturb")?;
    let rows = outcome_rows(&artifact, a.top_frac)?;
    write_csv(&a.out, &rows)?;
    if let Some(json) = &a.json {
        write_json(
            json,
            &MetricsJson {
                metadata: Metadata::new("metrics", artifact.metadata.seed, artifact.metadata.ig),
                rows: &rows,
            },
        )?;
    }
    Ok(())
}

fn file_stem(index: usize, essay_id: &str) -> String {
    let clean: String = essay_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}_{clean}")
}

fn read_curve_csv(path: &Path) -> CliResult<(String, Vec<(f64, f64)>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut kind = None;
    for row in reader.deserialize::<CurveRow>() {
        let row = row.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        kind.get_or_insert(row.curve);
        points.push((row.fraction, row.relative_qwk));
    }
    let title = match kind {
        Some(CurveKind::Deletion) => "Relative QWK, deleting least-attributed words",
        Some(CurveKind::Addition) => "Relative QWK, adding top-attributed words",
        Some(CurveKind::RandomDeletion) => "Relative QWK, deleting random words",
        None => "Relative QWK",
    };
    Ok((title.to_string(), points))
}

fn report_cmd(a: ReportArgs) -> CliResult<()> {
    let artifact: AttributionArtifact = read_json(&a.attributions)?;
    artifact.metadata.check("attribute")?;
    let curve = a.curve_csv.as_deref().map(read_curve_csv).transpose()?;
    let config = artifact.attribution.config;
    let docs = artifact
        .attribution
        .essays
        .par_iter()
        .map(|e| {
            let essay =
                crate::corpus::TokenizedEssay::from_tokens(e.essay_id.clone(), e.prompt_id.clone(), e.tokens.clone())
                    .map_err(usage)?;
            if e.per_token.len() != essay.len() {
                return Err(usage(format!(
                    "essay {:?}: attribution length does not match tokens",
                    e.essay_id
                )));
            }
            let attr = crate::attribution::AttributionVector {
                per_token: e.per_token.clone(),
                input_score: e.score.raw,
                baseline_score: e.score.raw - e.raw_delta,
                raw_delta: e.raw_delta,
                completeness_error: e.completeness_error,
                config,
            };
            Ok(render_heatmap(&attr, &essay, &e.score))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(docs.len());
    for (i, (doc, e)) in docs.iter().zip(&artifact.attribution.essays).enumerate() {
        let href = format!("essays/{}.html", file_stem(i, &e.essay_id));
        write_text(&a.out_dir.join(&href), &doc.html)?;
        entries.push(IndexEntry {
            essay_id: e.essay_id.clone(),
            prompt_id: e.prompt_id.clone(),
            href,
            score: e.score.scaled,
            completeness_error: e.completeness_error,
        });
    }
    let index = render_index(&entries, curve.as_ref().map(|(t, p)| (t.as_str(), p.as_slice())));
    write_text(&a.out_dir.join("index.html"), &index)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "wrote {} heatmaps to {}", entries.len(), a.out_dir.display());
    Ok(())
}
