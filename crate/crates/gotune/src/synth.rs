//! Synthetic benchmark worlds: an embedding export with planted label
//! geometry, a sharded raw-text corpus and held-out labelled examples.
//!
//! Each task has two classes along its own embedding axis. Per class there
//! are core neighbor words (strongly aligned with the seed, used in contexts
//! of that class) and noisy neighbor words (weakly aligned with the seed, but
//! used in contexts of the opposite class). Descriptor words carry the class
//! signal in the text but have no label geometry. Values come from uniform
//! noise on counter-based streams, so a world is a pure function of its seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gotune_core::rng::Stream;
use gotune_core::{EvalExample, LabelDatastore, TaskSpec};

use crate::error::{Context, Error, Result};
use crate::formats::{save_datastore, write_atomic, write_jsonl};
use crate::pipeline::{ModelSection, PipelineConfig, TaskEntry};
use gotune_core::{MiningConfig, Mode, TrainConfig};

#[derive(Debug, Clone)]
pub struct ClassDef {
    pub seed: &'static str,
    pub core: &'static [&'static str],
    pub noisy: &'static [&'static str],
    pub descriptors: &'static [&'static str],
}

#[derive(Debug, Clone)]
pub struct TaskDef {
    pub name: &'static str,
    pub template: &'static str,
    pub kind: &'static str,
    pub nouns: &'static [&'static str],
    pub classes: [ClassDef; 2],
}

pub fn sentiment_task() -> TaskDef {
    TaskDef {
        name: "sentiment",
        template: "Sentiment of the review [input] is [label]",
        kind: "sentiment",
        nouns: &["food", "service", "staff", "place", "room", "meal", "waiter", "view", "price", "menu", "coffee", "bed"],
        classes: [
            ClassDef {
                seed: "positive",
                core: &["good", "great", "excellent", "nice", "wonderful"],
                noisy: &[
                    "fine", "okay", "fair", "decent", "solid", "alright", "reasonable", "acceptable", "adequate",
                    "passable", "tolerable", "standard", "average", "ordinary",
                ],
                descriptors: &[
                    "delicious", "friendly", "fresh", "cozy", "tasty", "warm", "clean", "helpful", "lovely", "charming",
                    "bright", "generous",
                ],
            },
            ClassDef {
                seed: "negative",
                core: &["bad", "terrible", "awful", "poor", "horrible"],
                noisy: &[
                    "hard", "odd", "wild", "crazy", "insane", "wicked", "mad", "sick", "killer", "silly", "ridiculous",
                    "absurd", "unreal", "outrageous",
                ],
                descriptors: &[
                    "stale", "rude", "cold", "dirty", "bland", "slow", "noisy", "greasy", "soggy", "cramped", "sticky",
                    "dull",
                ],
            },
        ],
    }
}

pub fn topic_task() -> TaskDef {
    TaskDef {
        name: "topic",
        template: "Topic of the article [input] is [label]",
        kind: "topic",
        nouns: &["report", "article", "story", "news", "week", "city", "night", "crowd", "plan", "group"],
        classes: [
            ClassDef {
                seed: "sports",
                core: &["game", "team", "match", "league", "coach"],
                noisy: &[
                    "race", "contest", "rally", "fight", "run", "battle", "field", "play", "round", "defense",
                    "challenge", "pitch", "arena", "tackle",
                ],
                descriptors: &[
                    "goal", "striker", "stadium", "tournament", "referee", "playoffs", "goalkeeper", "halftime", "dribble",
                    "scoreboard", "midfield", "sprint",
                ],
            },
            ClassDef {
                seed: "politics",
                core: &["election", "senate", "vote", "policy", "congress"],
                noisy: &[
                    "party", "debate", "ruling", "draft", "trade", "bid", "deal", "term", "record", "office", "seat",
                    "capital", "union", "order",
                ],
                descriptors: &[
                    "minister", "parliament", "ballot", "governor", "legislation", "diplomat", "treaty", "cabinet",
                    "lawmakers", "referendum", "budget", "senator",
                ],
            },
        ],
    }
}

const FILLERS: &[&str] = &[
    "the", "a", "was", "were", "and", "it", "we", "our", "they", "very", "really", "quite", "with", "at", "of", "to",
    "in", "for", "this", "that", "is", "had", "there", "so", "but", "all", "about", "sentiment", "review", "topic",
    "overall", "felt", "seemed", "just", "too",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub shards: usize,
    pub docs_per_shard: usize,
    pub eval_per_class: usize,
    pub tasks: Vec<TaskDef>,
    /// Share of corpus sentences that use a noisy neighbor word.
    pub noisy_rate: f64,
    /// Projection of noisy neighbor embeddings on their seed's axis; core
    /// neighbors sit at 2 and seeds at 3.
    pub noisy_alignment: f64,
    /// How many of each class's noisy words are used (at most 14).
    pub noisy_per_class: usize,
    /// Replace one of the three descriptors in each held-out input with one
    /// of the other class.
    pub eval_contrast: bool,
    /// Share of corpus sentences that use the seed word itself.
    pub seed_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            dim: 16,
            shards: 4,
            docs_per_shard: 600,
            eval_per_class: 100,
            tasks: vec![sentiment_task()],
            noisy_rate: 0.5,
            noisy_alignment: 1.2,
            noisy_per_class: 7,
            eval_contrast: true,
            seed_rate: 0.02,
        }
    }
}

impl SynthConfig {
    /// Neighbors per seed that cover the seed, its core and its noisy words.
    pub fn k(&self) -> usize {
        self.tasks.iter().map(|t| 1 + t.classes[0].core.len().max(t.classes[1].core.len()) + self.noisy_per_class).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub eval: Vec<EvalExample>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub datastore: LabelDatastore,
    pub tasks: Vec<SynthTask>,
    pub shards: Vec<String>,
}

mod stream_ids {
    pub const EMBED: u64 = 1;
    pub const CORPUS: u64 = 1 << 20;
    pub const EVAL: u64 = 2 << 20;
}

fn pick<'a>(rng: &mut Stream, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

fn distinct<'a>(rng: &mut Stream, items: &[&'a str], n: usize) -> Vec<&'a str> {
    rng.sample_indices(items.len(), n).into_iter().map(|i| items[i]).collect()
}

fn build_datastore(cfg: &SynthConfig) -> Result<LabelDatastore> {
    assert!(cfg.dim > cfg.tasks.len(), "embedding dimension must exceed the number of tasks");
    let mut rows: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut rng = Stream::new(cfg.seed, stream_ids::EMBED);
    let axis_count = cfg.tasks.len();
    let vector = |rng: &mut Stream, axis: Option<(usize, f64)>, jitter: f64, noise: f64| -> Vec<f32> {
        (0..cfg.dim)
            .map(|i| {
                let base = match axis {
                    Some((a, mag)) if a == i => mag * (1.0 + rng.uniform(-jitter, jitter)),
                    _ if i < axis_count => rng.uniform(-0.1, 0.1),
                    _ => rng.uniform(-noise, noise),
                };
                base as f32
            })
            .collect()
    };
    let insert = |rows: &mut BTreeMap<String, Vec<f32>>, tok: &str, v: Vec<f32>| {
        rows.entry(tok.to_string()).or_insert(v);
    };
    for (ti, task) in cfg.tasks.iter().enumerate() {
        for (ci, class) in task.classes.iter().enumerate() {
            let sign = if ci == 0 { 1.0 } else { -1.0 };
            let v = vector(&mut rng, Some((ti, 3.0 * sign)), 0.0, 0.3);
            insert(&mut rows, class.seed, v);
            for w in class.core {
                let v = vector(&mut rng, Some((ti, 2.0 * sign)), 0.2, 0.5);
                insert(&mut rows, w, v);
            }
            for w in &class.noisy[..cfg.noisy_per_class] {
                let v = vector(&mut rng, Some((ti, cfg.noisy_alignment * sign)), 0.2, 0.5);
                insert(&mut rows, w, v);
            }
            for w in class.descriptors {
                let v = vector(&mut rng, None, 0.0, 0.5);
                insert(&mut rows, w, v);
            }
        }
        for w in task.nouns {
            let v = vector(&mut rng, None, 0.0, 0.5);
            insert(&mut rows, w, v);
        }
    }
    for w in FILLERS {
        let v = vector(&mut rng, None, 0.0, 0.5);
        insert(&mut rows, w, v);
    }
    for p in [".", ",", "!"] {
        let v = vector(&mut rng, None, 0.0, 0.5);
        insert(&mut rows, p, v);
    }
    let (tokens, values): (Vec<String>, Vec<Vec<f32>>) = rows.into_iter().unzip();
    LabelDatastore::new(tokens, values.concat(), cfg.dim).context("synthetic datastore")
}

fn clause(rng: &mut Stream, task: &TaskDef, class: &ClassDef) -> String {
    let d = distinct(rng, class.descriptors, 2);
    let n = distinct(rng, task.nouns, 2);
    match rng.below(3) {
        0 => format!("the {} was {} and the {} was {}", n[0], d[0], n[1], d[1]),
        1 => format!("{} {} and {} {}", d[0], n[0], d[1], n[1]),
        _ => format!("we had a {} {} with {} {}", d[0], n[0], d[1], n[1]),
    }
}

fn sentence(rng: &mut Stream, task: &TaskDef, class_idx: usize, cfg: &SynthConfig) -> String {
    let class = &task.classes[class_idx];
    let other = &task.classes[1 - class_idx];
    let body = clause(rng, task, class);
    let roll = rng.next_f64();
    let label = if roll < cfg.seed_rate {
        class.seed
    } else if roll < cfg.seed_rate + cfg.noisy_rate {
        // noisy words of the other class show up in this class's contexts
        pick(rng, &other.noisy[..cfg.noisy_per_class])
    } else {
        pick(rng, class.core)
    };
    match rng.below(3) {
        0 => format!("{body}, {label}."),
        1 => format!("It was {label}: {body}."),
        _ => format!("So {label} overall, {body}!"),
    }
}

fn eval_input(rng: &mut Stream, task: &TaskDef, class: &ClassDef, other: &ClassDef, contrast: bool) -> String {
    let d = distinct(rng, class.descriptors, 3);
    let n = distinct(rng, task.nouns, 2);
    let last = if contrast { pick(rng, other.descriptors) } else { d[2] };
    format!("the {} was {} and {} , the {} {}", n[0], d[0], d[1], n[1], last)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    if cfg.tasks.is_empty() {
        return Err(Error::Usage("synthetic world needs at least one task".to_string()));
    }
    let max_noisy = cfg.tasks.iter().flat_map(|t| &t.classes).map(|c| c.noisy.len()).min().unwrap_or(0);
    if cfg.noisy_per_class > max_noisy {
        return Err(Error::Usage(format!("noisy_per_class must be at most {max_noisy}")));
    }
    let datastore = build_datastore(cfg)?;
    let mut tasks = Vec::new();
    for (ti, def) in cfg.tasks.iter().enumerate() {
        let spec = TaskSpec::new(def.name, def.template, def.classes.iter().map(|c| c.seed), def.kind)
            .context(def.name)?;
        let mut rng = Stream::new(cfg.seed, stream_ids::EVAL + ti as u64);
        let mut eval = Vec::with_capacity(2 * cfg.eval_per_class);
        for i in 0..2 * cfg.eval_per_class {
            let (class, other) = (&def.classes[i % 2], &def.classes[1 - i % 2]);
            let input = eval_input(&mut rng, def, class, other, cfg.eval_contrast);
            eval.push(EvalExample {
                inputs: BTreeMap::from([("input".to_string(), input)]),
                gold: class.seed.to_string(),
            });
        }
        tasks.push(SynthTask { spec, eval });
    }
    let shards = (0..cfg.shards)
        .map(|s| {
            let mut rng = Stream::new(cfg.seed, stream_ids::CORPUS + s as u64);
            let mut text = String::new();
            for _ in 0..cfg.docs_per_shard {
                let task = &cfg.tasks[rng.below(cfg.tasks.len() as u64) as usize];
                let class = rng.below(2) as usize;
                let sentences = 1 + rng.below(3);
                for k in 0..sentences {
                    if k > 0 {
                        text.push(' ');
                    }
                    text.push_str(&sentence(&mut rng, task, class, cfg));
                }
                text.push('\n');
            }
            text
        })
        .collect();
    Ok(SynthWorld { datastore, tasks, shards })
}

/// Paths of a world written by [`write_world`], relative to its directory.
pub struct WorldLayout {
    pub datastore: PathBuf,
    pub corpus_glob: String,
    pub tasks: Vec<(PathBuf, PathBuf)>,
}

/// Pipeline settings for a synthetic world: output table frozen to the
/// datastore geometry, ten epochs, 4000 mined examples per task.
pub fn benchmark_config(cfg: &SynthConfig, layout: &WorldLayout, mode: Mode, out: &str) -> PipelineConfig {
    let tasks = layout.tasks.len();
    PipelineConfig {
        seed: cfg.seed,
        datastore: layout.datastore.clone(),
        corpus: layout.corpus_glob.clone(),
        out: PathBuf::from(out),
        k: cfg.k(),
        multi_task: tasks > 1,
        mining: Some(MiningConfig { total_cap: 4000 * tasks, ..MiningConfig::default() }),
        model: ModelSection::default(),
        train: TrainConfig { mode, epochs: 10, lr_model: 0.5, freeze_output: true, ..TrainConfig::default() },
        tasks: layout.tasks.iter().map(|(spec, eval)| TaskEntry { spec: spec.clone(), eval: eval.clone() }).collect(),
    }
}

/// Writes the world plus a `pipeline.toml` running go-tuning on it.
pub fn write_world(world: &SynthWorld, cfg: &SynthConfig, dir: &Path) -> Result<WorldLayout> {
    let datastore = PathBuf::from("datastore.goemb");
    save_datastore(&dir.join(&datastore), &world.datastore)?;
    for (i, shard) in world.shards.iter().enumerate() {
        write_atomic(&dir.join(format!("corpus/shard-{i:03}.txt")), shard.as_bytes())?;
    }
    let mut tasks = Vec::new();
    for t in &world.tasks {
        let spec = PathBuf::from(format!("tasks/{}.json", t.spec.name()));
        let eval = PathBuf::from(format!("eval/{}.jsonl", t.spec.name()));
        write_atomic(&dir.join(&spec), t.spec.to_json().as_bytes())?;
        write_jsonl(&dir.join(&eval), &t.eval)?;
        tasks.push((spec, eval));
    }
    let layout = WorldLayout { datastore, corpus_glob: "corpus/*.txt".to_string(), tasks };
    let pipeline = benchmark_config(cfg, &layout, Mode::Go, "run");
    write_atomic(&dir.join("pipeline.toml"), pipeline.to_toml().as_bytes())?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gotune_core::datastore::build_neighbor_set;

    #[test]
    fn deterministic() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.datastore, b.datastore);
        assert_eq!(a.shards, b.shards);
        let c = generate(&SynthConfig { seed: 8, ..SynthConfig::default() }).unwrap();
        assert_ne!(a.shards, c.shards);
    }

    #[test]
    fn planted_neighbors_rank_first() {
        let cfg = SynthConfig { tasks: vec![sentiment_task(), topic_task()], ..SynthConfig::default() };
        let world = generate(&cfg).unwrap();
        for (task, def) in world.tasks.iter().zip(&cfg.tasks) {
            let k = cfg.k();
            let set = build_neighbor_set(&world.datastore, &task.spec, k).unwrap();
            for class in &def.classes {
                let assigned: Vec<&str> = set.assigned_to(class.seed).map(|e| e.token.as_str()).collect();
                for w in class.core.iter().chain(&class.noisy[..cfg.noisy_per_class]) {
                    assert!(assigned.contains(w), "{w} missing from {} neighbors: {assigned:?}", class.seed);
                }
            }
        }
    }

    #[test]
    fn eval_is_balanced() {
        let world = generate(&SynthConfig::default()).unwrap();
        let eval = &world.tasks[0].eval;
        assert_eq!(eval.len(), 200);
        assert_eq!(eval.iter().filter(|e| e.gold == "positive").count(), 100);
    }
}
