//! Label-space datastore: every vocabulary token keyed by its prediction-layer
//! embedding, with exact top-k retrieval.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Raw dot product.
    #[default]
    Dot,
    Cosine,
}

/// Immutable token → embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDatastore {
    tokens: Vec<String>,
    embeddings: Vec<f32>,
    index: BTreeMap<String, usize>,
    dim: usize,
}

impl LabelDatastore {
    /// Builds a datastore from `tokens.len()` rows of `dim` values stored
    /// row-major in `embeddings`.
    pub fn new(tokens: Vec<String>, embeddings: Vec<f32>, dim: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        if dim == 0 {
            return Err(Error::DimensionMismatch("embedding dimension is zero".to_string()));
        }
        if embeddings.len() != tokens.len() * dim {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} tokens x {} dims needs {} values, got {}",
                tokens.len(),
                dim,
                tokens.len() * dim,
                embeddings.len()
            )));
        }
        if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / dim, col: i % dim });
        }
        let mut index = BTreeMap::new();
        for (row, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(['\n', '\r', '\t']) {
                return Err(Error::InvalidToken(tok.clone()));
            }
            if index.insert(tok.clone(), row).is_some() {
                return Err(Error::DuplicateToken(tok.clone()));
            }
        }
        Ok(LabelDatastore { tokens, embeddings, index, dim })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn token(&self, row: usize) -> &str {
        &self.tokens[row]
    }

    pub fn embedding(&self, token: &str) -> Option<&[f32]> {
        self.row_of(token).map(|r| self.row(r))
    }

    /// Similarity of two rows, accumulated in f64 in index order.
    pub fn score(&self, a: usize, b: usize, sim: Similarity) -> f64 {
        score_vectors(self.row(a), self.row(b), sim)
    }

    /// Top-k rows for the query row: descending score, ties by ascending row.
    /// The query row itself is a candidate.
    pub fn top_k(&self, query: usize, k: usize, sim: Similarity) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.len() {
            return Err(Error::KOutOfRange { k, max: self.len() });
        }
        let q = self.row(query);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for row in 0..self.len() {
            let cand = Candidate { score: score_vectors(q, self.row(row), sim), row };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|c| (c.row, c.score)).collect())
    }

    /// Nearest tokens to `seed` under the raw dot product.
    pub fn query_neighbors(&self, seed: &str, k: usize) -> Result<Vec<(String, f64)>> {
        self.query_neighbors_with(seed, k, Similarity::Dot)
    }

    pub fn query_neighbors_with(&self, seed: &str, k: usize, sim: Similarity) -> Result<Vec<(String, f64)>> {
        let row = self.row_of(seed).ok_or_else(|| Error::UnknownToken(seed.to_string()))?;
        Ok(self
            .top_k(row, k, sim)?
            .into_iter()
            .map(|(r, s)| (self.tokens[r].clone(), s))
            .collect())
    }
}

/// Scores never come back as `-0.0`, so exact ties compare equal under `total_cmp`.
pub fn score_vectors(a: &[f32], b: &[f32], sim: Similarity) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let score = match sim {
        Similarity::Dot => dot,
        Similarity::Cosine => {
            let na = libm::sqrt(a.iter().map(|&x| x as f64 * x as f64).sum());
            let nb = libm::sqrt(b.iter().map(|&x| x as f64 * x as f64).sum());
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        }
    };
    score + 0.0
}

// Ordered so that the "worst" candidate is the greatest: lower score first,
// then higher row.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.row.cmp(&other.row))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub token: String,
    pub score: f64,
    pub seed: String,
    /// Datastore row of `token`.
    pub row: usize,
}

/// Seed labels of one task together with their retrieved neighbor tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub task: String,
    pub entries: Vec<NeighborEntry>,
    pub seeds: Vec<String>,
    pub k_per_seed: usize,
}

impl NeighborSet {
    pub fn entry(&self, token: &str) -> Option<&NeighborEntry> {
        self.entries.iter().find(|e| e.token == token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entry(token).is_some()
    }

    /// Entries assigned to `seed`, in set order.
    pub fn assigned_to<'a>(&'a self, seed: &'a str) -> impl Iterator<Item = &'a NeighborEntry> + 'a {
        self.entries.iter().filter(move |e| e.seed == seed)
    }

    pub fn is_seed(&self, token: &str) -> bool {
        self.seeds.iter().any(|s| s == token)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: NeighborSet =
            serde_json::from_str(text).map_err(|e| Error::MalformedTask(alloc::format!("neighbor set: {e}")))?;
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if !self.is_seed(&e.seed) {
                return Err(Error::MalformedTask(alloc::format!("entry {:?} assigned to unknown seed {:?}", e.token, e.seed)));
            }
            if seen.insert(e.token.as_str(), ()).is_some() {
                return Err(Error::DuplicateToken(e.token.clone()));
            }
        }
        Ok(())
    }
}

/// Per-seed retrieval results shared across tasks, so a seed used by several
/// tasks is queried once.
#[derive(Debug, Clone)]
pub struct RetrievalCache {
    k: usize,
    sim: Similarity,
    hits: BTreeMap<String, Vec<(usize, f64)>>,
}

impl RetrievalCache {
    pub fn new(k: usize, sim: Similarity) -> Self {
        RetrievalCache { k, sim, hits: BTreeMap::new() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of distinct seeds retrieved so far.
    pub fn retrievals(&self) -> usize {
        self.hits.len()
    }

    fn get(&mut self, ds: &LabelDatastore, seed: &str) -> Result<&[(usize, f64)]> {
        if !self.hits.contains_key(seed) {
            let row = ds.row_of(seed).ok_or_else(|| Error::SeedNotInDatastore(seed.to_string()))?;
            let hits = ds.top_k(row, self.k, self.sim)?;
            self.hits.insert(seed.to_string(), hits);
        }
        Ok(self.hits.get(seed).map(Vec::as_slice).unwrap_or(&[]))
    }
}

/// Builds a task's neighbor set with raw dot-product retrieval.
pub fn build_neighbor_set(ds: &LabelDatastore, spec: &TaskSpec, k: usize) -> Result<NeighborSet> {
    build_neighbor_set_with(ds, spec, &mut RetrievalCache::new(k, Similarity::Dot))
}

/// Unions the per-seed top-k lists. A token retrieved for several seeds goes to
/// the one with the highest score (earlier seed on ties). Seed tokens are always
/// present and always assigned to themselves.
pub fn build_neighbor_set_with(ds: &LabelDatastore, spec: &TaskSpec, cache: &mut RetrievalCache) -> Result<NeighborSet> {
    let seeds = spec.seed_labels();
    let mut seed_rows = Vec::with_capacity(seeds.len());
    for s in seeds {
        seed_rows.push(ds.row_of(s).ok_or_else(|| Error::SeedNotInDatastore(s.clone()))?);
    }
    // row -> (score, seed index)
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (si, seed) in seeds.iter().enumerate() {
        for &(row, score) in cache.get(ds, seed)? {
            match best.get(&row) {
                Some(&(s, _)) if s >= score => {}
                _ => {
                    best.insert(row, (score, si));
                }
            }
        }
    }
    for (si, &row) in seed_rows.iter().enumerate() {
        best.insert(row, (ds.score(row, row, cache.sim), si));
    }
    let mut entries: Vec<NeighborEntry> = best
        .into_iter()
        .map(|(row, (score, si))| NeighborEntry {
            token: ds.token(row).to_string(),
            score,
            seed: seeds[si].clone(),
            row,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row)));
    Ok(NeighborSet {
        task: spec.name().to_string(),
        entries,
        seeds: seeds.to_vec(),
        k_per_seed: cache.k,
    })
}
