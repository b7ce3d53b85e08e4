//! Command-line front end. Every subcommand resolves its configuration from
//! built-in defaults, then an optional JSON config file, then explicit flags,
//! and writes the resolved configuration into a manifest next to its outputs.
//! A manifest can be passed back through `--config` to repeat the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bias::{BiasConfig, BiasKind, BiasScope};
use crate::data::{
    gen_synthetic, kfold_split, load_csv, preprocess, write_csv, DatasetStats, LearnerSequence, PreprocessOptions,
    ProcessedData, Segment, SyntheticSpec, DEFAULT_MIN_LEN,
};
use crate::error::KtError;
use crate::model::{dump_attention, init_params, load_checkpoint, save_checkpoint, KtModel, ModelConfig, Stack};
use crate::train_eval::{
    evaluate, sweep_length, train, FoldData, TrainConfig, DEFAULT_SWEEP_LENGTHS, SWEEP_CSV_HEADER,
};

pub const OUTPUT_ROOT_ENV: &str = "KTFORGET_OUTPUT_ROOT";
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or values; exit code 2.
    Config(String),
    /// Failures while running; exit code 1.
    Runtime(KtError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<KtError> for CliError {
    fn from(e: KtError) -> Self {
        match e {
            KtError::InvalidArgument(m) => CliError::Config(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ktforget",
    version,
    about = "Attentive knowledge tracing with pluggable forgetting biases",
    after_help = "Output root: relative default output directories are placed under --output-root, \
                  which falls back to the KTFORGET_OUTPUT_ROOT environment variable and then to ./runs.\n\
                  Config files: --config takes a JSON object with the subcommand's option names \
                  (snake_case), or a manifest written by an earlier run. Flags override the file.\n\
                  Exit codes: 0 success, 1 runtime failure, 2 configuration error."
)]
pub struct Cli {
    /// Root directory for default output locations.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Group a raw interaction CSV into learner sequences, build the item
    /// vocabulary and write fold assignments.
    Preprocess(PreprocessFlags),
    /// Write a synthetic forgetting-curve dataset in the raw CSV schema.
    GenSynthetic(SyntheticFlags),
    /// Train one model per (fold, seed) and score it on the fold's test set.
    Train(TrainFlags),
    /// Score a checkpoint on one role of a fold.
    Evaluate(EvaluateFlags),
    /// Evaluate a checkpoint with histories of fixed length.
    Sweep(SweepFlags),
    /// Write one learner's attention matrices as per-head CSV files.
    DumpAttention(DumpFlags),
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Serialize)]
pub struct ConfigFlag {
    /// JSON config file or earlier manifest; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

// ---- preprocess ----

#[derive(Args, Debug, Clone, Serialize)]
pub struct PreprocessFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    /// Raw interaction CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Drop learners with fewer interactions.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Use question ids instead of concept ids as items.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub question_level: Option<bool>,
    /// Window length recorded in the `segment` column.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessRun {
    pub input: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub min_len: usize,
    pub question_level: bool,
    pub max_len: usize,
    pub folds: usize,
    pub val_frac: f64,
    pub split_seed: u64,
}

impl Default for PreprocessRun {
    fn default() -> Self {
        PreprocessRun {
            input: PathBuf::new(),
            out_dir: None,
            min_len: DEFAULT_MIN_LEN,
            question_level: false,
            max_len: 100,
            folds: 5,
            val_frac: 0.1,
            split_seed: 0,
        }
    }
}

// ---- gen-synthetic ----

#[derive(Args, Debug, Clone, Serialize)]
pub struct SyntheticFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    /// Output CSV; the generator settings are echoed to `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub learners: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    /// Memory time constant, in steps.
    #[arg(long)]
    pub tau_mem: Option<f64>,
    #[arg(long)]
    pub ability_spread: Option<f64>,
    #[arg(long)]
    pub difficulty_spread: Option<f64>,
    #[arg(long)]
    pub mastery_bonus: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticRun {
    pub out: Option<PathBuf>,
    pub learners: usize,
    pub concepts: usize,
    pub length: usize,
    pub tau_mem: f64,
    pub ability_spread: f64,
    pub difficulty_spread: f64,
    pub mastery_bonus: f64,
    pub seed: u64,
}

impl Default for SyntheticRun {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SyntheticRun {
            out: None,
            learners: s.learners,
            concepts: s.concepts,
            length: s.length,
            tau_mem: s.tau_mem,
            ability_spread: s.ability_spread,
            difficulty_spread: s.difficulty_spread,
            mastery_bonus: s.mastery_bonus,
            seed: s.seed,
        }
    }
}

impl SyntheticRun {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            learners: self.learners,
            concepts: self.concepts,
            length: self.length,
            tau_mem: self.tau_mem,
            ability_spread: self.ability_spread,
            difficulty_spread: self.difficulty_spread,
            mastery_bonus: self.mastery_bonus,
            seed: self.seed,
        }
    }
}

// ---- train ----

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    /// Preprocessed data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// none | pe | mono | rc | folibi
    #[arg(long)]
    pub bias: Option<BiasKind>,
    /// retriever_only | all_blocks
    #[arg(long)]
    pub bias_scope: Option<BiasScope>,
    /// Comma-separated fold indices.
    #[arg(long = "fold", value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    /// Comma-separated seeds.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Leave the first position of each window out of the metrics.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exclude_first: Option<bool>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Parallel worker processes over (fold, seed) runs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: PathBuf,
    pub bias: BiasKind,
    pub bias_scope: BiasScope,
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub exclude_first: bool,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        TrainRun {
            data: PathBuf::new(),
            bias: BiasKind::None,
            bias_scope: BiasScope::default(),
            folds: vec![0],
            seeds: vec![0],
            d_model: m.d_model,
            heads: m.num_heads,
            blocks: m.num_blocks,
            max_len: m.max_len,
            ffn_mult: m.ffn_mult,
            dropout: m.dropout,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            exclude_first: t.exclude_first,
            out_dir: None,
            jobs: 1,
        }
    }
}

impl TrainRun {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            num_heads: self.heads,
            num_blocks: self.blocks,
            max_len: self.max_len,
            vocab_size,
            bias: BiasConfig {
                kind: self.bias,
                scope: self.bias_scope,
            },
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self, fold: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            fold,
            exclude_first: self.exclude_first,
        }
    }
}

// ---- evaluate / sweep / dump-attention ----

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvaluateFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// train | val | test | all
    #[arg(long)]
    pub role: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exclude_first: Option<bool>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub fold: usize,
    pub role: String,
    pub batch_size: usize,
    pub exclude_first: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        EvaluateRun {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            fold: 0,
            role: "test".into(),
            batch_size: 64,
            exclude_first: false,
            out_dir: None,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// train | val | test | all
    #[arg(long)]
    pub role: Option<String>,
    /// Comma-separated history lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub fold: usize,
    pub role: String,
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for SweepRun {
    fn default() -> Self {
        SweepRun {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            fold: 0,
            role: "test".into(),
            lengths: DEFAULT_SWEEP_LENGTHS.to_vec(),
            batch_size: 64,
            out_dir: None,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DumpFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigFlag,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Learner id as it appears in the data.
    #[arg(long)]
    pub learner: Option<String>,
    /// question | interaction | retriever
    #[arg(long)]
    pub stack: Option<Stack>,
    /// 1-based block index; defaults to the last block.
    #[arg(long)]
    pub block: Option<usize>,
    /// Comma-separated 1-based heads; defaults to the first and last.
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
    /// Number of leading interactions shown.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub learner: String,
    pub stack: Stack,
    pub block: Option<usize>,
    pub heads: Option<Vec<usize>>,
    pub n: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for DumpRun {
    fn default() -> Self {
        DumpRun {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            learner: String::new(),
            stack: Stack::Retriever,
            block: None,
            heads: None,
            n: 20,
            out_dir: None,
        }
    }
}

// ---- manifests ----

/// Written by every command next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    pub param_count: Option<usize>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific facts about the run.
    #[serde(default)]
    pub info: Value,
}

impl<C: Serialize> Manifest<C> {
    fn new(command: &str, config: C) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            param_count: None,
            outputs: Vec::new(),
            info: Value::Null,
        }
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        crate::io::write_json(path, self)?;
        Ok(())
    }
}

// ---- config resolution ----

/// Recursive merge of `top` onto `base`; nulls in `top` leave `base` alone.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (_, Value::Null) => {}
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    Some(slot) => {
                        if !v.is_null() {
                            *slot = v;
                        }
                    }
                    None => {
                        if !v.is_null() {
                            b.insert(k, v);
                        }
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Defaults, then the config file (or the `config` object of a manifest),
/// then every flag that was given.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: &impl Serialize) -> CliResult<T> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if v.get("command").is_some() {
            v = v.get_mut("config").map(Value::take).unwrap_or(Value::Null);
        }
        overlay(&mut value, v);
    }
    overlay(
        &mut value,
        serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))?,
    );
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Config(format!("--{what} is required")));
    }
    Ok(())
}

fn out_dir(given: &Option<PathBuf>, root: &Path, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| root.join(default))
}

// ---- entry point ----

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let root = &cli.output_root;
    match &cli.command {
        Cmd::Preprocess(f) => cmd_preprocess(&resolve(f.cfg.config.as_deref(), f)?, root),
        Cmd::GenSynthetic(f) => cmd_gen_synthetic(&resolve(f.cfg.config.as_deref(), f)?, root),
        Cmd::Train(f) => cmd_train(&resolve(f.cfg.config.as_deref(), f)?, root),
        Cmd::Evaluate(f) => cmd_evaluate(&resolve(f.cfg.config.as_deref(), f)?, root),
        Cmd::Sweep(f) => cmd_sweep(&resolve(f.cfg.config.as_deref(), f)?, root),
        Cmd::DumpAttention(f) => cmd_dump_attention(&resolve(f.cfg.config.as_deref(), f)?, root),
    }
}

// ---- commands ----

pub fn cmd_preprocess(run: &PreprocessRun, root: &Path) -> CliResult<()> {
    require(&run.input, "input")?;
    if run.max_len == 0 {
        return Err(CliError::Config("max_len must be positive".into()));
    }
    let dir = out_dir(&run.out_dir, root, "data");
    let records = load_csv(&run.input)?;
    let opts = PreprocessOptions {
        min_len: run.min_len,
        concept_as_question: !run.question_level,
    };
    let (sequences, vocab) = preprocess(&records, opts)?;
    let ids: Vec<String> = sequences.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, run.folds, run.val_frac, run.split_seed)?;
    let stats = DatasetStats::compute(&sequences, &vocab, run.max_len, &split);
    let data = ProcessedData {
        sequences,
        vocab,
        split,
        stats,
    };
    data.write(&dir)?;
    print!("{}", data.stats.summary());

    let mut resolved = run.clone();
    resolved.out_dir = Some(dir.clone());
    let mut m = Manifest::new("preprocess", resolved);
    m.outputs = ["vocab.csv", "sequences.csv", "folds.csv", "stats.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    m.info = serde_json::to_value(&data.stats).map_err(KtError::from)?;
    m.write(&dir.join("manifest.json"))
}

#[derive(Serialize)]
struct SyntheticInfo {
    rows: usize,
    expected_correct_rate: f64,
    expected_rate_se: f64,
    empirical_correct_rate: f64,
}

pub fn cmd_gen_synthetic(run: &SyntheticRun, root: &Path) -> CliResult<()> {
    let out = run.out.clone().unwrap_or_else(|| root.join("synthetic.csv"));
    let data = gen_synthetic(&run.spec())?;
    write_csv(&out, &data.records)?;
    let (rate, se) = data.expected_correct_rate();
    let info = SyntheticInfo {
        rows: data.records.len(),
        expected_correct_rate: rate,
        expected_rate_se: se,
        empirical_correct_rate: data.empirical_correct_rate(),
    };
    println!(
        "{} rows, {:.2}% correct (expected {:.2}% ± {:.2})",
        info.rows,
        100.0 * info.empirical_correct_rate,
        100.0 * rate,
        100.0 * se
    );
    let mut resolved = run.clone();
    resolved.out = Some(out.clone());
    let mut m = Manifest::new("gen-synthetic", resolved);
    m.outputs = vec![out.clone()];
    m.info = serde_json::to_value(&info).map_err(KtError::from)?;
    let mut sidecar = out.into_os_string();
    sidecar.push(".manifest.json");
    m.write(Path::new(&sidecar))
}

/// Output file names of one training run.
pub fn run_file(kind: &str, fold: usize, seed: u64, ext: &str) -> String {
    format!("{kind}_fold{fold}_seed{seed}.{ext}")
}

#[derive(Serialize)]
struct TrainInfo {
    fold: usize,
    seed: u64,
    best_epoch: usize,
    best_score: f64,
    epochs_run: usize,
    stopped_early: bool,
    vocab_size: usize,
}

pub fn cmd_train(run: &TrainRun, root: &Path) -> CliResult<()> {
    require(&run.data, "data")?;
    if run.folds.is_empty() || run.seeds.is_empty() {
        return Err(CliError::Config("at least one fold and one seed are required".into()));
    }
    let dir = out_dir(&run.out_dir, root, "train");
    let mut resolved = run.clone();
    resolved.out_dir = Some(dir.clone());
    let data = ProcessedData::read(&run.data)?;
    let probe = resolved.model_config(data.vocab.len());
    probe.validate()?;
    for &fold in &run.folds {
        data.split.fold(fold).map_err(|e| CliError::Config(e.to_string()))?;
    }
    resolved.train_config(0, 0).validate()?;

    let combos: Vec<(usize, u64)> = run
        .folds
        .iter()
        .flat_map(|&f| run.seeds.iter().map(move |&s| (f, s)))
        .collect();
    if run.jobs > 1 && combos.len() > 1 {
        return train_parallel(&resolved, &combos, root);
    }
    for (fold, seed) in combos {
        let mut one = resolved.clone();
        one.folds = vec![fold];
        one.seeds = vec![seed];
        one.jobs = 1;
        train_one(&one, &data, &dir)?;
    }
    Ok(())
}

fn train_one(run: &TrainRun, data: &ProcessedData, dir: &Path) -> CliResult<()> {
    let (fold, seed) = (run.folds[0], run.seeds[0]);
    let model_cfg = run.model_config(data.vocab.len());
    let train_cfg = run.train_config(fold, seed);
    let fd = FoldData::new(&data.sequences, data.split.fold(fold)?, model_cfg.max_len);
    let model = init_params(&model_cfg, seed)?;
    let param_count = model.param_count();
    eprintln!(
        "fold {fold} seed {seed}: {} train / {} val / {} test windows",
        fd.train.len(),
        fd.val.len(),
        fd.test.len()
    );
    let outcome = train(model, &fd.train, &fd.val, &train_cfg, |e| {
        let val = e.val_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "  epoch {:>3}  loss {:.5}  val_auc {val}{}",
            e.epoch,
            e.train_loss,
            if e.improved { " *" } else { "" }
        );
    })?;
    let mut test = evaluate(&outcome.best, &fd.test, train_cfg.batch_size, train_cfg.exclude_first)?;
    test.fold = Some(fold);
    test.seed = Some(seed);

    let ckpt = dir.join(run_file("model", fold, seed, "ckpt"));
    let log = dir.join(run_file("train_log", fold, seed, "csv"));
    let metrics = dir.join(run_file("metrics", fold, seed, "json"));
    save_checkpoint(&ckpt, &outcome.best)?;
    crate::io::write_csv_rows(
        &log,
        &["epoch", "train_loss", "val_auc", "improved"],
        outcome.log.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_auc.map(|v| v.to_string()).unwrap_or_default(),
                e.improved.to_string(),
            ]
        }),
    )?;
    crate::io::write_json(&metrics, &test)?;
    println!(
        "fold {fold} seed {seed} [{}]: auc {:.4} acc {:.4} rmse×100 {:.2} w_acc {:.4} (best epoch {})",
        test.bias_kind,
        test.auc,
        test.acc,
        test.rmse_x100(),
        test.w_acc,
        outcome.best_epoch
    );

    let mut m = Manifest::new("train", run.clone());
    m.param_count = Some(param_count);
    m.outputs = vec![ckpt, log, metrics];
    m.info = serde_json::to_value(TrainInfo {
        fold,
        seed,
        best_epoch: outcome.best_epoch,
        best_score: outcome.best_score,
        epochs_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        vocab_size: data.vocab.len(),
    })
    .map_err(KtError::from)?;
    m.write(&dir.join(run_file("manifest", fold, seed, "json")))
}

/// Runs each (fold, seed) in a child process of this executable, at most
/// `jobs` at a time. Children write to disjoint file names.
fn train_parallel(run: &TrainRun, combos: &[(usize, u64)], root: &Path) -> CliResult<()> {
    let exe = std::env::current_exe().map_err(|e| CliError::Runtime(KtError::io("current executable", e)))?;
    let dir = run.out_dir.clone().expect("resolved");
    let mut pending = combos.iter().rev().copied().collect::<Vec<_>>();
    let mut running: Vec<(usize, u64, PathBuf, Child)> = Vec::new();
    let mut failures = Vec::new();
    let mut worst = 0;
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < run.jobs {
            let Some((fold, seed)) = pending.pop() else { break };
            let mut one = run.clone();
            one.folds = vec![fold];
            one.seeds = vec![seed];
            one.jobs = 1;
            let cfg = dir.join(format!(".job_fold{fold}_seed{seed}.json"));
            crate::io::write_json(&cfg, &one)?;
            let child = Command::new(&exe)
                .arg("--output-root")
                .arg(root)
                .arg("train")
                .arg("--config")
                .arg(&cfg)
                .spawn()
                .map_err(|e| CliError::Runtime(KtError::io(&exe, e)))?;
            running.push((fold, seed, cfg, child));
        }
        let mut i = 0;
        while i < running.len() {
            let status = running[i]
                .3
                .try_wait()
                .map_err(|e| CliError::Runtime(KtError::io(&exe, e)))?;
            match status {
                Some(st) => {
                    let (fold, seed, cfg, _) = running.swap_remove(i);
                    let _ = std::fs::remove_file(cfg);
                    if !st.success() {
                        let code = st.code().unwrap_or(EXIT_RUNTIME);
                        worst = worst.max(code);
                        failures.push(format!("fold {fold} seed {seed} exited with {code}"));
                    }
                }
                None => i += 1,
            }
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    if failures.is_empty() {
        Ok(())
    } else if worst == EXIT_CONFIG {
        Err(CliError::Config(failures.join("; ")))
    } else {
        Err(CliError::Runtime(KtError::Failed(failures.join("; "))))
    }
}

fn load_model(path: &Path) -> CliResult<KtModel> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn check_vocab(model: &KtModel, data: &ProcessedData) -> CliResult<()> {
    if model.config.vocab_size != data.vocab.len() {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary has {} items but the data has {}",
            model.config.vocab_size,
            data.vocab.len()
        )));
    }
    Ok(())
}

pub fn cmd_evaluate(run: &EvaluateRun, root: &Path) -> CliResult<()> {
    require(&run.data, "data")?;
    let model = load_model(&run.checkpoint)?;
    let data = ProcessedData::read(&run.data)?;
    check_vocab(&model, &data)?;
    let learners = data.learners_for(run.fold, &run.role)?;
    let segments: Vec<Segment> = crate::data::window_all(learners.iter(), model.config.max_len);
    let mut report = evaluate(&model, &segments, run.batch_size, run.exclude_first)?;
    report.fold = Some(run.fold);
    let dir = out_dir(&run.out_dir, root, "evaluate");
    let path = dir.join(format!("metrics_{}_fold{}.json", run.role, run.fold));
    crate::io::write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(KtError::from)?);

    let mut resolved = run.clone();
    resolved.out_dir = Some(dir.clone());
    let mut m = Manifest::new("evaluate", resolved);
    m.param_count = Some(model.param_count());
    m.outputs = vec![path];
    m.write(&dir.join(format!("manifest_evaluate_{}_fold{}.json", run.role, run.fold)))
}

pub fn cmd_sweep(run: &SweepRun, root: &Path) -> CliResult<()> {
    require(&run.data, "data")?;
    let model = load_model(&run.checkpoint)?;
    let data = ProcessedData::read(&run.data)?;
    check_vocab(&model, &data)?;
    if let Some(&n) = run.lengths.iter().find(|&&n| n == 0 || n > model.config.max_len) {
        return Err(CliError::Config(format!(
            "sweep length {n} outside 1..={} (the checkpoint's max_len)",
            model.config.max_len
        )));
    }
    let learners: Vec<LearnerSequence> = data.learners_for(run.fold, &run.role)?;
    let result = sweep_length(&model, &learners, &run.lengths, run.batch_size)?;
    let dir = out_dir(&run.out_dir, root, "sweep");
    let json = dir.join("sweep.json");
    let csv = dir.join("sweep.csv");
    crate::io::write_json(&json, &result)?;
    crate::io::write_csv_rows(&csv, &SWEEP_CSV_HEADER, result.csv_rows())?;
    for s in &result.settings {
        match &s.report {
            Some(r) => println!("n={:<4} evaluated {:>7}  auc {:.4}", s.length, s.n_evaluated, r.auc),
            None => println!("n={:<4} evaluated {:>7}  (empty)", s.length, 0),
        }
    }
    let mut resolved = run.clone();
    resolved.out_dir = Some(dir.clone());
    let mut m = Manifest::new("sweep", resolved);
    m.param_count = Some(model.param_count());
    m.outputs = vec![json, csv];
    m.write(&dir.join("manifest.json"))
}

/// File name of one dumped head matrix (`block` and `head` 1-based).
pub fn attention_file(learner: &str, stack: Stack, block: usize, head: usize) -> String {
    format!("attention_{learner}_{}_block{block}_head{head}.csv", stack.as_str())
}

pub fn cmd_dump_attention(run: &DumpRun, root: &Path) -> CliResult<()> {
    require(&run.data, "data")?;
    if run.learner.is_empty() {
        return Err(CliError::Config("--learner is required".into()));
    }
    let model = load_model(&run.checkpoint)?;
    let data = ProcessedData::read(&run.data)?;
    check_vocab(&model, &data)?;
    let cfg = &model.config;
    let block = run.block.unwrap_or(cfg.num_blocks);
    if block == 0 || block > cfg.num_blocks {
        return Err(CliError::Config(format!(
            "block {block} outside 1..={}",
            cfg.num_blocks
        )));
    }
    let heads = run.heads.clone().unwrap_or_else(|| {
        let mut h = vec![1, cfg.num_heads];
        h.dedup();
        h
    });
    if let Some(h) = heads.iter().find(|&&h| h == 0 || h > cfg.num_heads) {
        return Err(CliError::Config(format!("head {h} outside 1..={}", cfg.num_heads)));
    }
    let seq = data
        .learner(&run.learner)
        .ok_or_else(|| CliError::Runtime(KtError::NotFound(format!("learner `{}`", run.learner))))?;
    let take = seq.len().min(cfg.max_tokens());
    let seg = Segment {
        learner_id: seq.learner_id.clone(),
        segment: 0,
        start: 0,
        interactions: seq.interactions[..take].to_vec(),
    };
    let batch = crate::data::Batch::from_segments(&[&seg], take)?;
    let trace = dump_attention(&model, &batch, run.stack, block - 1, run.n)?;

    let dir = out_dir(&run.out_dir, root, "attention");
    let mut outputs = Vec::new();
    for &h in &heads {
        let m = &trace.heads[h - 1];
        let mut text = String::new();
        for i in 0..trace.n {
            let row: Vec<String> = m[i * trace.n..(i + 1) * trace.n].iter().map(f64::to_string).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = dir.join(attention_file(&run.learner, run.stack, block, h));
        crate::io::write_atomic(&path, text.as_bytes())?;
        outputs.push(path);
    }
    println!("wrote {} matrices of {}×{}", outputs.len(), trace.n, trace.n);
    let mut resolved = run.clone();
    resolved.out_dir = Some(dir.clone());
    resolved.block = Some(block);
    resolved.heads = Some(heads);
    let mut m = Manifest::new("dump-attention", resolved);
    m.param_count = Some(model.param_count());
    m.outputs = outputs;
    m.write(&dir.join(format!("manifest_attention_{}.json", run.learner)))
}
