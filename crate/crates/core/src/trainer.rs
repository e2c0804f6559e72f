//! Training loops: the SDA ablation (plain cross-entropy on mined targets) and
//! go-tuning, which alternates per epoch between a model phase on
//! KDE-weighted targets and a `phi` phase fitting the weights to the frozen
//! model. Also the multi-task label merge.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datastore::{build_neighbor_set_with, LabelDatastore, NeighborEntry, NeighborSet, RetrievalCache, Similarity};
use crate::error::{Error, Result};
use crate::example::MinedExample;
use crate::geometry::{phi_step, ConstraintBatch, GeometricWeights};
use crate::model::{Mlm, ModelParams, Scalar};
use crate::rng::{streams, Stream};
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sda,
    #[default]
    Go,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_phi: f64,
    pub phi_steps_per_epoch: usize,
    pub constraint_batch_size: usize,
    pub rng_seed: u64,
    pub line_search: bool,
    pub clip_norm: Option<f64>,
    /// Half-width of uniform noise added to the zero-initialized `phi`; 0 disables.
    pub phi_init_noise: f64,
    /// Keep the output embedding table (the shared table when tied) fixed.
    pub freeze_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Go,
            epochs: 5,
            batch_size: 16,
            lr_model: 0.5,
            lr_phi: 1.0,
            phi_steps_per_epoch: 4,
            constraint_batch_size: 32,
            rng_seed: 0,
            line_search: true,
            clip_norm: Some(5.0),
            phi_init_noise: 0.0,
            freeze_output: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_model > 0.0 && self.lr_model.is_finite()) {
            return bad("lr_model must be positive");
        }
        if !(self.lr_phi > 0.0 && self.lr_phi.is_finite()) {
            return bad("lr_phi must be positive");
        }
        if self.constraint_batch_size == 0 {
            return bad("constraint_batch_size must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if !(self.phi_init_noise >= 0.0) {
            return bad("phi_init_noise must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub model_loss: f64,
    /// Mean constraint loss after each `phi` step of the epoch; `None` when no step ran.
    pub constraint_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub weights: Vec<GeometricWeights>,
    pub model_steps: u64,
    pub phi_steps: u64,
    pub history: Vec<EpochLog>,
}

fn model_epoch(
    params: &mut ModelParams,
    data: &[MinedExample],
    cfg: &TrainConfig,
    epoch: usize,
    steps: &mut u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    Stream::new(cfg.rng_seed, streams::SHUFFLE_BASE + epoch as u64).shuffle(&mut order);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&MinedExample> = chunk.iter().map(|&i| &data[i]).collect();
        if batch.iter().all(|e| e.weight == 0.0) {
            continue;
        }
        let (loss, mut grads) = params.loss_wce(&batch)?;
        if cfg.freeze_output {
            let table = if params.shape().tied { &mut grads.emb } else { &mut grads.out };
            table.iter_mut().for_each(|g| *g = 0.0);
        }
        params.apply_gradients(&grads, cfg.lr_model, cfg.clip_norm);
        total += loss;
        batches += 1;
        *steps += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Fine-tunes on mined targets with every weight set to 1.
pub fn train_sda(params: ModelParams, dataset: &[MinedExample], cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.mode != Mode::Sda {
        return Err(Error::InvalidTrainConfig("train_sda requires mode = sda".to_string()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data: Vec<MinedExample> = dataset.iter().cloned().map(|e| MinedExample { weight: 1.0, ..e }).collect();
    let mut state = TrainState { params, weights: Vec::new(), model_steps: 0, phi_steps: 0, history: Vec::new() };
    for epoch in 0..cfg.epochs {
        let loss = model_epoch(&mut state.params, &data, cfg, epoch, &mut state.model_steps)?;
        state.history.push(EpochLog { model_loss: loss, constraint_loss: None });
    }
    Ok(state)
}

/// Where a target's weight comes from.
#[derive(Debug, Clone)]
enum Coverage {
    Seed,
    /// (weights record, neighbor position) pairs; the example weight is the
    /// mean of the covering `w_t`.
    Neighbor(Vec<(usize, usize)>),
}

fn coverage(dataset: &[MinedExample], nsets: &[NeighborSet], gws: &[GeometricWeights]) -> Result<Vec<Coverage>> {
    let seeds: BTreeSet<&str> = nsets.iter().flat_map(|n| n.seeds.iter().map(String::as_str)).collect();
    let mut by_token: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (g, gw) in gws.iter().enumerate() {
        for (t, tok) in gw.neighbor_tokens.iter().enumerate() {
            by_token.entry(tok.as_str()).or_default().push((g, t));
        }
    }
    dataset
        .iter()
        .map(|ex| {
            if seeds.contains(ex.target.as_str()) {
                Ok(Coverage::Seed)
            } else {
                by_token
                    .get(ex.target.as_str())
                    .map(|v| Coverage::Neighbor(v.clone()))
                    .ok_or_else(|| Error::UncoveredTarget(ex.target.clone()))
            }
        })
        .collect()
}

/// Seed and neighbor probabilities of `gw` at each example's mask position
/// under a frozen model.
pub fn constraint_batch<T: Scalar, E: core::borrow::Borrow<MinedExample>>(
    model: &Mlm<T>,
    gw: &GeometricWeights,
    examples: &[E],
) -> Result<ConstraintBatch> {
    let seed_row = model.row_of(&gw.seed).ok_or_else(|| Error::SeedNotInVocab(gw.seed.clone()))?;
    let rows = gw
        .neighbor_tokens
        .iter()
        .map(|t| model.row_of(t).ok_or_else(|| Error::TargetNotInVocab(t.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = ConstraintBatch { p_y: Vec::with_capacity(examples.len()), p_z: Vec::with_capacity(examples.len()) };
    for ex in examples {
        let ex = ex.borrow();
        let (p, _) = model.forward(&ex.tokens, ex.mask_index)?;
        batch.p_y.push(p[seed_row]);
        batch.p_z.push(rows.iter().map(|&r| p[r]).collect());
    }
    Ok(batch)
}

/// Go-tuning. Each epoch runs a model phase (weighted cross-entropy; a target
/// that is neighbor `z_t` of seed `y` has weight `w_t`, a seed target has
/// weight 1) and then a `phi` phase that never touches the model.
pub fn train_go(
    params: ModelParams,
    dataset: &[MinedExample],
    nsets: &[NeighborSet],
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.mode != Mode::Go {
        return Err(Error::InvalidTrainConfig("train_go requires mode = go".to_string()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut gws: Vec<GeometricWeights> = nsets.iter().flat_map(GeometricWeights::from_neighbor_set).collect();
    if cfg.phi_init_noise > 0.0 {
        for (i, gw) in gws.iter_mut().enumerate() {
            gw.perturb_phi(&mut Stream::new(cfg.rng_seed, streams::PHI_NOISE + i as u64), cfg.phi_init_noise);
        }
    }
    let cover = coverage(dataset, nsets, &gws)?;
    for gw in &gws {
        if params.row_of(&gw.seed).is_none() {
            return Err(Error::SeedNotInVocab(gw.seed.clone()));
        }
        if let Some(t) = gw.neighbor_tokens.iter().find(|t| params.row_of(t).is_none()) {
            return Err(Error::TargetNotInVocab(t.clone()));
        }
    }
    // examples whose target is the record's seed or one of its neighbors
    let pools: Vec<Vec<usize>> = gws
        .iter()
        .map(|gw| {
            dataset
                .iter()
                .enumerate()
                .filter(|(_, e)| e.target == gw.seed || gw.position(&e.target).is_some())
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut data: Vec<MinedExample> = dataset.to_vec();
    let mut state = TrainState { params, weights: Vec::new(), model_steps: 0, phi_steps: 0, history: Vec::new() };
    for epoch in 0..cfg.epochs {
        let w: Vec<Vec<f64>> = gws.iter().map(GeometricWeights::weights).collect::<Result<_>>()?;
        for (ex, c) in data.iter_mut().zip(&cover) {
            ex.weight = match c {
                Coverage::Seed => 1.0,
                Coverage::Neighbor(v) => v.iter().map(|&(g, t)| w[g][t]).sum::<f64>() / v.len() as f64,
            };
        }
        let model_loss = model_epoch(&mut state.params, &data, cfg, epoch, &mut state.model_steps)?;

        let mut constraint_total = 0.0;
        let mut constraint_count = 0usize;
        for step in 0..cfg.phi_steps_per_epoch {
            for (g, gw) in gws.iter_mut().enumerate() {
                let pool = &pools[g];
                if pool.is_empty() {
                    continue;
                }
                let stream = ((epoch * cfg.phi_steps_per_epoch + step) as u64)
                    .wrapping_mul(gws_len_hint(nsets))
                    .wrapping_add(g as u64);
                let picks = Stream::new(cfg.rng_seed, streams::PHI_BASE.wrapping_add(stream))
                    .sample_indices(pool.len(), cfg.constraint_batch_size);
                let examples: Vec<&MinedExample> = picks.iter().map(|&i| &dataset[pool[i]]).collect();
                let batch = constraint_batch(&state.params, gw, &examples)?;
                let outcome = phi_step(gw, &batch, cfg.lr_phi, cfg.line_search)?;
                constraint_total += outcome.loss_after;
                constraint_count += 1;
                state.phi_steps += 1;
            }
        }
        let constraint_loss = (constraint_count > 0).then(|| constraint_total / constraint_count as f64);
        state.history.push(EpochLog { model_loss, constraint_loss });
    }
    state.weights = gws;
    Ok(state)
}

// Upper bound on weight records per step, used to give every
// (epoch, step, record) triple its own sampling stream.
fn gws_len_hint(nsets: &[NeighborSet]) -> u64 {
    nsets.iter().map(|n| n.seeds.len() as u64).sum::<u64>().max(1)
}

/// Per-task neighbor sets plus the deduplicated union used as the mining
/// target set.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTasks {
    pub neighbor_sets: Vec<NeighborSet>,
    pub targets: NeighborSet,
    /// Number of distinct seed retrievals performed.
    pub retrievals: usize,
}

/// Multi-task merge. Seeds shared between tasks are retrieved once; each task
/// keeps its own neighbor set (and thus its own weight records). A token
/// claimed by several tasks keeps the highest-scoring claim in the target set,
/// the earlier task winning ties.
pub fn merge_tasks(specs: &[TaskSpec], ds: &LabelDatastore, k: usize) -> Result<MergedTasks> {
    let mut names = BTreeSet::new();
    for s in specs {
        if !names.insert(s.name()) {
            return Err(Error::DuplicateTask(s.name().to_string()));
        }
    }
    if specs.is_empty() {
        return Err(Error::EmptySeeds);
    }
    let mut cache = RetrievalCache::new(k, Similarity::Dot);
    let neighbor_sets = specs
        .iter()
        .map(|s| build_neighbor_set_with(ds, s, &mut cache))
        .collect::<Result<Vec<_>>>()?;
    let targets = if neighbor_sets.len() == 1 {
        neighbor_sets[0].clone()
    } else {
        union_targets(&neighbor_sets, k)
    };
    Ok(MergedTasks { neighbor_sets, targets, retrievals: cache.retrievals() })
}

fn union_targets(sets: &[NeighborSet], k: usize) -> NeighborSet {
    let mut best: BTreeMap<usize, &NeighborEntry> = BTreeMap::new();
    for set in sets {
        for e in &set.entries {
            match best.get(&e.row) {
                Some(prev) if prev.score >= e.score => {}
                _ => {
                    best.insert(e.row, e);
                }
            }
        }
    }
    let mut entries: Vec<NeighborEntry> = best.into_values().cloned().collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row)));
    let mut seeds: Vec<String> = Vec::new();
    for s in sets.iter().flat_map(|n| &n.seeds) {
        if !seeds.contains(s) {
            seeds.push(s.clone());
        }
    }
    let task = sets.iter().map(|n| n.task.as_str()).collect::<Vec<_>>().join("+");
    NeighborSet { task, entries, seeds, k_per_seed: k }
}
