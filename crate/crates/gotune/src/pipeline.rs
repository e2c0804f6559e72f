//! One-shot driver: datastore, neighbors, mining, training, evaluation.
//!
//! Relative paths in a config file resolve against the file's directory.
//! Output layout under `out`:
//!
//! ```text
//! neighbors/<task>.json
//! <group>/mined.jsonl, <group>/mining_stats.json
//! <group>/checkpoint/...
//! <group>/predictions/<task>.jsonl
//! report.tsv
//! ```
//!
//! A group is one task, or all tasks joined with `+` when `multi_task` is set.
//! The top-level `seed` seeds model initialization and replaces `train.rng_seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gotune_core::trainer::MergedTasks;
use gotune_core::{
    evaluate, merge_tasks, train_go, train_sda, EvalExample, LabelDatastore, MinedExample, MiningConfig, ModelParams,
    Mode, NeighborSet, Report, ReportRow, TaskSpec, TrainConfig, TrainState,
};

use crate::checkpoint::Checkpoint;
use crate::digest::ConfigDigest;
use crate::error::{Context, Error, Result};
use crate::formats::{read_bytes, read_jsonl, read_text, write_atomic, write_jsonl};
use crate::mining::{expand_glob, mine_files};

fn default_k() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Output embeddings copied from the datastore rows.
    Datastore,
    /// All tensors random; `dim` picks the embedding width.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub tied: bool,
    pub init: Init,
    pub dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: 32, tied: false, init: Init::Datastore, dim: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub spec: PathBuf,
    pub eval: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub datastore: PathBuf,
    pub corpus: String,
    pub out: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub multi_task: bool,
    /// Defaults to [`MiningConfig::default`], with the multi-task cap for merged groups.
    #[serde(default)]
    pub mining: Option<MiningConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub tasks: Vec<TaskEntry>,
}

impl PipelineConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// Mining settings for a group of `tasks` tasks.
    pub fn mining_for(&self, tasks: usize) -> MiningConfig {
        self.mining.clone().unwrap_or_else(|| mining_default(tasks))
    }
}

pub fn mining_default(tasks: usize) -> MiningConfig {
    let mut cfg = MiningConfig::default();
    if tasks > 1 {
        cfg.total_cap = MiningConfig::MULTI_TASK_CAP;
    }
    cfg
}

/// Builds the initial model for a run.
pub fn init_model(ds: &LabelDatastore, section: &ModelSection, seed: u64) -> Result<ModelParams> {
    match section.init {
        Init::Datastore => ModelParams::init_from_datastore(ds, section.hidden, section.tied, seed),
        Init::Random => ModelParams::init(ds.tokens().to_vec(), section.dim, section.hidden, section.tied, seed),
    }
    .context("model init")
}

/// Dispatches on `cfg.mode`. SDA ignores the neighbor sets.
pub fn train(params: ModelParams, data: &[MinedExample], nsets: &[NeighborSet], cfg: &TrainConfig) -> Result<TrainState> {
    match cfg.mode {
        Mode::Sda => train_sda(params, data, cfg),
        Mode::Go => train_go(params, data, nsets, cfg),
    }
    .context("training")
}

#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub name: String,
    pub merged: MergedTasks,
    pub mined: Vec<MinedExample>,
    pub state: TrainState,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub groups: Vec<GroupOutcome>,
    pub out: PathBuf,
}

/// A group's directory name; file-system safe and stable.
pub fn group_dir(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' }).collect()
}

struct LoadedTask {
    spec: TaskSpec,
    eval: Vec<EvalExample>,
}

/// Runs the pipeline described by the config file at `path`.
pub fn run_pipeline(path: &Path, workers: usize) -> Result<Outcome> {
    let text = read_text(path)?;
    let cfg = PipelineConfig::parse(path, &text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, base, text.as_bytes(), workers)
}

/// Runs a parsed config. `config_bytes` feed the digest and should be the
/// bytes the config was parsed from.
pub fn run_config(cfg: &PipelineConfig, base: &Path, config_bytes: &[u8], workers: usize) -> Result<Outcome> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if cfg.tasks.is_empty() {
        return Err(Error::Data("pipeline config lists no tasks".to_string()));
    }
    let mut digest = ConfigDigest::new();
    digest.add("config", config_bytes);
    digest.add("seed", &cfg.seed.to_le_bytes());

    let ds_path = resolve(&cfg.datastore);
    let ds_bytes = read_bytes(&ds_path)?;
    digest.add("datastore", &ds_bytes);
    let ds = crate::formats::decode_goemb(&ds_path, &ds_bytes)?;

    let mut tasks = Vec::new();
    for entry in &cfg.tasks {
        let spec_path = resolve(&entry.spec);
        let spec_text = read_text(&spec_path)?;
        digest.add("task", spec_text.as_bytes());
        let spec = TaskSpec::parse(&spec_text).context(spec_path.display())?;
        let eval_path = resolve(&entry.eval);
        digest.add("eval", &read_bytes(&eval_path)?);
        let eval: Vec<EvalExample> = read_jsonl(&eval_path)?;
        tasks.push(LoadedTask { spec, eval });
    }

    let pattern = resolve(Path::new(&cfg.corpus));
    let shards = expand_glob(&pattern.to_string_lossy())?;
    for shard in &shards {
        let name = shard.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        digest.add("shard", name.as_bytes());
        digest.add("shard-bytes", &read_bytes(shard)?);
    }
    let config_digest = digest.finish();

    let out = resolve(&cfg.out);
    let groups: Vec<Vec<&LoadedTask>> =
        if cfg.multi_task { vec![tasks.iter().collect()] } else { tasks.iter().map(|t| vec![t]).collect() };

    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    for group in groups {
        let outcome = run_group(cfg, &ds, &group, &shards, &out, &config_digest, workers)?;
        rows.extend(outcome.rows.iter().cloned());
        outcomes.push(outcome);
    }
    let report = Report { rows, seed: cfg.seed, config_digest };
    write_atomic(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
    Ok(Outcome { report, groups: outcomes, out })
}

fn run_group(
    cfg: &PipelineConfig,
    ds: &LabelDatastore,
    group: &[&LoadedTask],
    shards: &[PathBuf],
    out: &Path,
    config_digest: &str,
    workers: usize,
) -> Result<GroupOutcome> {
    let specs: Vec<TaskSpec> = group.iter().map(|t| t.spec.clone()).collect();
    let merged = merge_tasks(&specs, ds, cfg.k).context("neighbor retrieval")?;
    let name = merged.targets.task.clone();
    for set in &merged.neighbor_sets {
        write_atomic(&out.join(format!("neighbors/{}.json", group_dir(&set.task))), set.to_json().as_bytes())?;
    }
    let dir = out.join(group_dir(&name));

    let mining = cfg.mining_for(specs.len());
    let (mined, stats) = mine_files(shards, &merged.targets, &mining, workers)?;
    write_jsonl(&dir.join("mined.jsonl"), &mined)?;
    let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_atomic(&dir.join("mining_stats.json"), stats_json.as_bytes())?;
    if mined.is_empty() {
        return Err(Error::Data(format!("{name}: mining found no examples in the corpus")));
    }

    let params = init_model(ds, &cfg.model, cfg.seed)?;
    let train_cfg = TrainConfig { rng_seed: cfg.seed, ..cfg.train.clone() };
    let state = train(params, &mined, &merged.neighbor_sets, &train_cfg)?;
    Checkpoint {
        model: state.params.clone(),
        weights: state.weights.clone(),
        history: state.history.clone(),
        config_digest: config_digest.to_string(),
        seed: cfg.seed,
    }
    .save(&dir.join("checkpoint"))?;

    let mut rows = Vec::new();
    for task in group {
        let (row, preds) = evaluate(&state.params, &task.spec, &task.eval).context(task.spec.name())?;
        write_jsonl(&dir.join(format!("predictions/{}.jsonl", group_dir(task.spec.name()))), &preds)?;
        rows.push(row);
    }
    Ok(GroupOutcome { name, merged, mined, state, rows })
}

/// Merges per-run reports into one. All inputs must share a seed; the merged
/// digest hashes the input digests in order.
pub fn merge_reports(reports: &[(PathBuf, Report)]) -> Result<Report> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Data("no reports to merge".to_string()));
    };
    let mut digest = ConfigDigest::new();
    let mut rows = Vec::new();
    for (path, r) in reports {
        if r.seed != first.seed {
            return Err(Error::format(path, format!("seed {} differs from {}", r.seed, first.seed)));
        }
        digest.add("report", r.config_digest.as_bytes());
        rows.extend(r.rows.iter().cloned());
    }
    Ok(Report { rows, seed: first.seed, config_digest: digest.finish() })
}

