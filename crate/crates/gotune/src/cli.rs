//! The `gotune` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gotune_core::datastore::build_neighbor_set_with;
use gotune_core::{
    evaluate, merge_tasks, CapPolicy, EvalExample, LabelDatastore, MinedExample, MiningConfig, ModelParams, Mode,
    NeighborSet, Report, RetrievalCache, Similarity, TaskSpec, TrainConfig,
};

use crate::checkpoint::Checkpoint;
use crate::digest::ConfigDigest;
use crate::error::{Context, Error, Result};
use crate::formats::{
    import_tsv, load_datastore, load_model, read_bytes, read_jsonl, read_text, save_datastore, write_atomic, write_jsonl,
};
use crate::mining::{expand_glob, mine_files};
use crate::pipeline::{self, merge_reports};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "gotune", version, about = "Mine, tune and evaluate zero-shot label predictors")]
pub struct Cli {
    /// Worker threads for parallel stages [default: available cores]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an embedding export into a GOEMB datastore
    BuildDatastore(BuildDatastoreArgs),
    /// Retrieve label neighbors for a task and write a neighbor set
    Neighbors(NeighborsArgs),
    /// Mine masked examples for a neighbor set from a sharded corpus
    Mine(MineArgs),
    /// Fine-tune a model on mined examples (sda or go)
    Train(TrainArgs),
    /// Merge several tasks, mine once and go-tune one model
    TrainMgo(TrainMgoArgs),
    /// Score a checkpoint on labelled examples
    Eval(EvalArgs),
    /// Merge report files into one
    Report(ReportArgs),
    /// Run datastore, neighbors, mining, training and evaluation from a config file
    Pipeline(PipelineArgs),
    /// Write a synthetic benchmark world
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct BuildSource {
    /// Tab-separated export: token, then one column per dimension
    #[arg(long, group = "source")]
    pub tsv: Option<PathBuf>,
    /// Existing GOEMB file (validated and rewritten)
    #[arg(long, group = "source")]
    pub goemb: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildDatastoreArgs {
    #[command(flatten)]
    pub source: BuildSource,
    /// Output GOEMB path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    /// GOEMB datastore
    #[arg(long)]
    pub datastore: PathBuf,
    /// Task JSON file
    #[arg(long)]
    pub task: PathBuf,
    /// Neighbors per seed, the seed itself included
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Neighbor set JSON output
    #[arg(long)]
    pub out: PathBuf,
    /// Rank by cosine similarity instead of dot product
    #[arg(long)]
    pub cosine: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Proportional,
    Unlimited,
}

#[derive(Debug, Args)]
pub struct MiningArgs {
    /// Total example cap
    #[arg(long)]
    pub cap: Option<usize>,
    /// Per-token cap policy
    #[arg(long, value_enum, default_value_t = PolicyArg::Proportional)]
    pub policy: PolicyArg,
    /// Shortest sentence kept, in tokens
    #[arg(long, default_value_t = 5)]
    pub min_tokens: usize,
    /// Longest sentence kept, in tokens
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
}

impl MiningArgs {
    fn config(&self, default_cap: usize) -> MiningConfig {
        MiningConfig {
            total_cap: self.cap.unwrap_or(default_cap),
            per_token_cap_policy: match self.policy {
                PolicyArg::Proportional => CapPolicy::Proportional,
                PolicyArg::Unlimited => CapPolicy::Unlimited,
            },
            min_sentence_tokens: self.min_tokens,
            max_sentence_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Corpus shard glob; one document per line
    #[arg(long)]
    pub corpus: String,
    /// Neighbor set JSON
    #[arg(long)]
    pub neighbors: PathBuf,
    #[command(flatten)]
    pub mining: MiningArgs,
    /// Mined examples, JSON-Lines
    #[arg(long)]
    pub out: PathBuf,
    /// Mining statistics JSON
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sda,
    Go,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Initial model (GOMLM file or checkpoint directory)
    #[arg(long, conflicts_with = "datastore")]
    pub init: Option<PathBuf>,
    /// Build the initial model from this datastore's output embeddings
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    /// Hidden width for a new model
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Tie input and output embeddings in a new model
    #[arg(long)]
    pub tied: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Mined examples, JSON-Lines
    #[arg(long)]
    pub data: PathBuf,
    /// Neighbor set JSON (repeatable; required for go)
    #[arg(long)]
    pub neighbors: Vec<PathBuf>,
    /// Training config TOML [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainMgoArgs {
    /// Glob of task JSON files
    #[arg(long)]
    pub tasks: String,
    /// GOEMB datastore for neighbor retrieval
    #[arg(long)]
    pub datastore: PathBuf,
    /// Corpus shard glob
    #[arg(long)]
    pub corpus: String,
    /// Neighbors per seed
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[command(flatten)]
    pub mining: MiningArgs,
    /// Training config TOML [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial model (GOMLM file or checkpoint directory) [default: from the datastore]
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long)]
    pub tied: bool,
    /// Output directory: checkpoint/, neighbors/, mined.jsonl
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task JSON file
    #[arg(long)]
    pub task: PathBuf,
    /// Labelled examples, JSON-Lines
    #[arg(long)]
    pub data: PathBuf,
    /// Report TSV output
    #[arg(long)]
    pub report: PathBuf,
    /// Per-example predictions, JSON-Lines
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Glob of report TSV files
    #[arg(long)]
    pub reports: String,
    /// Merged report path [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline config TOML
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Add a second (topic) task for multi-task runs
    #[arg(long)]
    pub multi_task: bool,
}

/// Parses `argv` (program name first) and runs it. Returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match execute(cli.command, workers, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, workers: usize, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::BuildDatastore(a) => build_datastore(a, out),
        Command::Neighbors(a) => neighbors(a, out),
        Command::Mine(a) => mine(a, workers, out),
        Command::Train(a) => train(a, out),
        Command::TrainMgo(a) => train_mgo(a, workers, out),
        Command::Eval(a) => eval(a, out),
        Command::Report(a) => report(a, out),
        Command::Pipeline(a) => {
            let outcome = pipeline::run_pipeline(&a.config, workers)?;
            say(out, format_args!("{}", outcome.report.to_tsv()));
            say(out, format_args!("report written to {}", outcome.out.join("report.tsv").display()));
            Ok(())
        }
        Command::Synth(a) => synth_world(a, out),
    }
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments) {
    let _ = writeln!(out, "{args}");
}

fn build_datastore(a: BuildDatastoreArgs, out: &mut dyn Write) -> Result<()> {
    let ds = match (&a.source.tsv, &a.source.goemb) {
        (Some(p), _) => import_tsv(p)?,
        (None, Some(p)) => load_datastore(p)?,
        (None, None) => return Err(Error::Usage("one of --tsv or --goemb is required".to_string())),
    };
    save_datastore(&a.out, &ds)?;
    say(out, format_args!("{} tokens, dimension {}, written to {}", ds.len(), ds.dim(), a.out.display()));
    Ok(())
}

fn load_task(path: &Path) -> Result<TaskSpec> {
    TaskSpec::parse(&read_text(path)?).context(path.display())
}

fn load_neighbor_set(path: &Path) -> Result<NeighborSet> {
    NeighborSet::from_json(&read_text(path)?).context(path.display())
}

/// Per seed: rank, neighbor token and score, best first.
pub fn neighbor_table(ds: &LabelDatastore, spec: &TaskSpec, k: usize, sim: Similarity) -> Result<String> {
    let mut s = String::new();
    for seed in spec.seed_labels() {
        let rows = ds.query_neighbors_with(seed, k, sim).context(format!("seed {seed:?}"))?;
        s.push_str(&format!("{seed}\n"));
        for (i, (tok, score)) in rows.iter().enumerate() {
            s.push_str(&format!("{:>5}  {:<24} {:.6}\n", i + 1, tok, score));
        }
    }
    Ok(s)
}

fn neighbors(a: NeighborsArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_datastore(&a.datastore)?;
    let spec = load_task(&a.task)?;
    let sim = if a.cosine { Similarity::Cosine } else { Similarity::Dot };
    let mut cache = RetrievalCache::new(a.k, sim);
    let set = build_neighbor_set_with(&ds, &spec, &mut cache).context(a.task.display())?;
    write_atomic(&a.out, set.to_json().as_bytes())?;
    let _ = write!(out, "{}", neighbor_table(&ds, &spec, a.k, sim)?);
    say(out, format_args!("{} neighbor tokens written to {}", set.entries.len(), a.out.display()));
    Ok(())
}

fn mine(a: MineArgs, workers: usize, out: &mut dyn Write) -> Result<()> {
    let nset = load_neighbor_set(&a.neighbors)?;
    let shards = expand_glob(&a.corpus)?;
    let cfg = a.mining.config(MiningConfig::default().total_cap);
    let (examples, stats) = mine_files(&shards, &nset, &cfg, workers)?;
    write_jsonl(&a.out, &examples)?;
    if let Some(p) = &a.stats {
        write_atomic(p, serde_json::to_string_pretty(&stats).expect("stats serialize").as_bytes())?;
    }
    say(
        out,
        format_args!(
            "{} shards, {} documents, {} sentences, {} examples written to {}",
            shards.len(),
            stats.documents_scanned,
            stats.sentences_scanned,
            examples.len(),
            a.out.display()
        ),
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>, digest: &mut ConfigDigest) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = read_text(p)?;
            digest.add("train-config", text.as_bytes());
            toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))
        }
    }
}

/// A GOMLM file, or the model inside a checkpoint directory.
fn load_init(path: &Path, digest: &mut ConfigDigest) -> Result<ModelParams> {
    let file = if path.is_dir() { path.join(crate::checkpoint::MODEL_FILE) } else { path.to_path_buf() };
    digest.add("init", &read_bytes(&file)?);
    load_model(&file)
}

fn save_checkpoint(
    dir: &Path,
    state: &gotune_core::TrainState,
    digest: String,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    Checkpoint {
        model: state.params.clone(),
        weights: state.weights.clone(),
        history: state.history.clone(),
        config_digest: digest,
        seed,
    }
    .save(dir)?;
    if let Some(last) = state.history.last() {
        say(out, format_args!("epoch {} model loss {:.6}", state.history.len(), last.model_loss));
    }
    say(out, format_args!("checkpoint written to {}", dir.display()));
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut digest = ConfigDigest::new();
    let mode = match a.mode {
        ModeArg::Sda => Mode::Sda,
        ModeArg::Go => Mode::Go,
    };
    let mut cfg = load_train_config(a.config.as_deref(), &mut digest)?;
    cfg.mode = mode;
    cfg.rng_seed = a.seed;
    digest.add("mode", format!("{mode:?}").as_bytes()).add("seed", &a.seed.to_le_bytes());

    digest.add("data", &read_bytes(&a.data)?);
    let data: Vec<MinedExample> = read_jsonl(&a.data)?;
    let mut nsets = Vec::new();
    for p in &a.neighbors {
        digest.add("neighbors", &read_bytes(p)?);
        nsets.push(load_neighbor_set(p)?);
    }
    if mode == Mode::Go && nsets.is_empty() {
        return Err(Error::Usage("--mode go needs at least one --neighbors file".to_string()));
    }
    let params = match (&a.model.init, &a.model.datastore) {
        (Some(p), _) => load_init(p, &mut digest)?,
        (None, Some(p)) => {
            digest.add("datastore", &read_bytes(p)?);
            digest.add("shape", format!("{} {}", a.model.hidden, a.model.tied).as_bytes());
            ModelParams::init_from_datastore(&load_datastore(p)?, a.model.hidden, a.model.tied, a.seed)
                .context("model init")?
        }
        (None, None) => return Err(Error::Usage("one of --init or --datastore is required".to_string())),
    };
    let state = pipeline::train(params, &data, &nsets, &cfg).map_err(|e| match e {
        Error::Core { source, .. } => Error::Core { context: a.data.display().to_string(), source },
        other => other,
    })?;
    save_checkpoint(&a.out, &state, digest.finish(), a.seed, out)
}

fn train_mgo(a: TrainMgoArgs, workers: usize, out: &mut dyn Write) -> Result<()> {
    let mut digest = ConfigDigest::new();
    let mut cfg = load_train_config(a.config.as_deref(), &mut digest)?;
    cfg.mode = Mode::Go;
    cfg.rng_seed = a.seed;
    digest.add("seed", &a.seed.to_le_bytes()).add("k", &(a.k as u64).to_le_bytes());

    let task_paths = expand_glob(&a.tasks)?;
    let mut specs = Vec::new();
    for p in &task_paths {
        digest.add("task", &read_bytes(p)?);
        specs.push(load_task(p)?);
    }
    digest.add("datastore", &read_bytes(&a.datastore)?);
    let ds = load_datastore(&a.datastore)?;
    let merged = merge_tasks(&specs, &ds, a.k).context("task merge")?;
    for set in &merged.neighbor_sets {
        let path = a.out.join(format!("neighbors/{}.json", pipeline::group_dir(&set.task)));
        write_atomic(&path, set.to_json().as_bytes())?;
    }
    let mining = a.mining.config(pipeline::mining_default(specs.len()).total_cap);
    digest.add("mining", serde_json::to_string(&mining).expect("config serializes").as_bytes());
    let shards = expand_glob(&a.corpus)?;
    for s in &shards {
        digest.add("shard", &read_bytes(s)?);
    }
    let (data, _) = mine_files(&shards, &merged.targets, &mining, workers)?;
    write_jsonl(&a.out.join("mined.jsonl"), &data)?;
    say(
        out,
        format_args!(
            "{} tasks, {} target tokens, {} seed retrievals, {} examples",
            specs.len(),
            merged.targets.entries.len(),
            merged.retrievals,
            data.len()
        ),
    );
    if data.is_empty() {
        return Err(Error::Data(format!("{}: mining found no examples", a.corpus)));
    }
    let params = match &a.init {
        Some(p) => load_init(p, &mut digest)?,
        None => ModelParams::init_from_datastore(&ds, a.hidden, a.tied, a.seed).context("model init")?,
    };
    let state = pipeline::train(params, &data, &merged.neighbor_sets, &cfg)?;
    save_checkpoint(&a.out.join("checkpoint"), &state, digest.finish(), a.seed, out)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task_bytes = read_bytes(&a.task)?;
    let spec = load_task(&a.task)?;
    let data_bytes = read_bytes(&a.data)?;
    let examples: Vec<EvalExample> = read_jsonl(&a.data)?;
    let (row, preds) = evaluate(&ckpt.model, &spec, &examples).context(a.data.display())?;
    let mut digest = ConfigDigest::new();
    digest.add("checkpoint", ckpt.config_digest.as_bytes()).add("task", &task_bytes).add("data", &data_bytes);
    let report = Report { rows: vec![row.clone()], seed: ckpt.seed, config_digest: digest.finish() };
    write_atomic(&a.report, report.to_tsv().as_bytes())?;
    if let Some(p) = &a.predictions {
        write_jsonl(p, &preds)?;
    }
    say(out, format_args!("{}\t{:.4}\t{}", row.task, row.accuracy(), row.n));
    Ok(())
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut reports = Vec::new();
    for p in expand_glob(&a.reports)? {
        let r = Report::parse_tsv(&read_text(&p)?).context(p.display())?;
        reports.push((p, r));
    }
    let merged = merge_reports(&reports)?;
    match &a.out {
        Some(p) => {
            write_atomic(p, merged.to_tsv().as_bytes())?;
            say(out, format_args!("{} rows written to {}", merged.rows.len(), p.display()));
        }
        None => {
            let _ = write!(out, "{}", merged.to_tsv());
        }
    }
    Ok(())
}

fn synth_world(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut tasks = vec![synth::sentiment_task()];
    if a.multi_task {
        tasks.push(synth::topic_task());
    }
    let cfg = synth::SynthConfig { seed: a.seed, tasks, ..synth::SynthConfig::default() };
    let world = synth::generate(&cfg)?;
    synth::write_world(&world, &cfg, &a.out)?;
    let counts: BTreeMap<&str, usize> = world.tasks.iter().map(|t| (t.spec.name(), t.eval.len())).collect();
    say(
        out,
        format_args!(
            "{} tokens, {} shards, eval sizes {:?}; run with: gotune pipeline --config {}",
            world.datastore.len(),
            world.shards.len(),
            counts,
            a.out.join("pipeline.toml").display()
        ),
    );
    Ok(())
}
