//! Extraction of task-aware masked-LM examples from raw text.
//!
//! A corpus is a sequence of shards; a shard is a sequence of documents (one
//! per line). Each shard is scanned independently by a [`ShardScanner`] and the
//! scans are combined by [`merge_scans`] in ascending shard order, which is the
//! only place caps are enforced. The output is therefore the same however the
//! shards were distributed over workers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datastore::NeighborSet;
use crate::error::{Error, Result};
use crate::example::{MinedExample, Source};
use crate::tokenize::{tokenize, MASK_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapPolicy {
    #[default]
    Proportional,
    Unlimited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub total_cap: usize,
    pub per_token_cap_policy: CapPolicy,
    pub min_sentence_tokens: usize,
    pub max_sentence_tokens: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            total_cap: 100_000,
            per_token_cap_policy: CapPolicy::Proportional,
            min_sentence_tokens: 5,
            max_sentence_tokens: 64,
        }
    }
}

impl MiningConfig {
    /// Default cap for multi-task mining.
    pub const MULTI_TASK_CAP: usize = 200_000;

    pub fn validate(&self) -> Result<()> {
        if self.total_cap == 0 {
            return Err(Error::InvalidMiningConfig("total_cap must be at least 1".to_string()));
        }
        if self.min_sentence_tokens > self.max_sentence_tokens {
            return Err(Error::InvalidMiningConfig(alloc::format!(
                "min_sentence_tokens {} exceeds max_sentence_tokens {}",
                self.min_sentence_tokens, self.max_sentence_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub documents_scanned: u64,
    pub sentences_scanned: u64,
    pub examples_emitted: u64,
    pub per_token_counts: BTreeMap<String, u64>,
}

impl MiningStats {
    pub fn absorb(&mut self, other: &MiningStats) {
        self.documents_scanned += other.documents_scanned;
        self.sentences_scanned += other.sentences_scanned;
        self.examples_emitted += other.examples_emitted;
        for (tok, n) in &other.per_token_counts {
            *self.per_token_counts.entry(tok.clone()).or_default() += n;
        }
    }
}

/// Splits after `.`, `!` or `?` when followed by whitespace or end of input.
/// Terminators stay with their sentence; blank pieces are dropped.
pub fn split_sentences(document: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = document.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_break {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &document[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &document[start..]);
    out
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, piece: &'a str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece);
    }
}

/// Per-token caps. Proportional: `total_cap / n` each, with the remainder
/// handed out one apiece to the highest-scoring entries. Unlimited: every
/// token may take the whole total cap.
pub fn balance_caps(nset: &NeighborSet, cfg: &MiningConfig) -> BTreeMap<String, usize> {
    let n = nset.entries.len();
    if n == 0 {
        return BTreeMap::new();
    }
    match cfg.per_token_cap_policy {
        CapPolicy::Unlimited => nset.entries.iter().map(|e| (e.token.clone(), cfg.total_cap)).collect(),
        CapPolicy::Proportional => {
            let base = cfg.total_cap / n;
            let extra = cfg.total_cap % n;
            let mut ranked: Vec<_> = nset.entries.iter().collect();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row)));
            ranked
                .into_iter()
                .enumerate()
                .map(|(i, e)| (e.token.clone(), base + usize::from(i < extra)))
                .collect()
        }
    }
}

struct Target<'a> {
    row: usize,
    seed: &'a str,
}

/// Candidate examples from one shard, in canonical order and already limited
/// to each token's cap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShardScan {
    pub shard: u64,
    pub candidates: Vec<MinedExample>,
    pub stats: MiningStats,
}

/// Streaming scanner over the documents of one shard.
pub struct ShardScanner<'a> {
    shard: u64,
    targets: BTreeMap<&'a str, Target<'a>>,
    caps: &'a BTreeMap<String, usize>,
    cfg: &'a MiningConfig,
    in_shard: BTreeMap<&'a str, usize>,
    scan: ShardScan,
    last_offset: Option<u64>,
}

impl<'a> ShardScanner<'a> {
    pub fn new(shard: u64, nset: &'a NeighborSet, caps: &'a BTreeMap<String, usize>, cfg: &'a MiningConfig) -> Self {
        let targets = nset
            .entries
            .iter()
            .map(|e| (e.token.as_str(), Target { row: e.row, seed: e.seed.as_str() }))
            .collect();
        ShardScanner {
            shard,
            targets,
            caps,
            cfg,
            in_shard: BTreeMap::new(),
            scan: ShardScan { shard, ..ShardScan::default() },
            last_offset: None,
        }
    }

    /// Feeds one document. Offsets must be strictly increasing.
    pub fn feed(&mut self, offset: u64, document: &str) {
        debug_assert!(self.last_offset.is_none_or(|o| o < offset), "offsets must increase");
        self.last_offset = Some(offset);
        self.scan.stats.documents_scanned += 1;
        // (row, sentence index, example)
        let mut found: Vec<(usize, usize, MinedExample)> = Vec::new();
        for (si, sentence) in split_sentences(document).into_iter().enumerate() {
            self.scan.stats.sentences_scanned += 1;
            let tokens = tokenize(sentence);
            if tokens.len() < self.cfg.min_sentence_tokens || tokens.len() > self.cfg.max_sentence_tokens {
                continue;
            }
            if tokens.iter().any(|t| t == MASK_TOKEN) {
                continue;
            }
            for (pos, tok) in tokens.iter().enumerate() {
                let Some(target) = self.targets.get(tok.as_str()) else { continue };
                if found.iter().any(|(r, s, _)| *s == si && *r == target.row) {
                    continue;
                }
                let mut masked = tokens.clone();
                masked[pos] = MASK_TOKEN.to_string();
                found.push((
                    target.row,
                    si,
                    MinedExample {
                        tokens: masked,
                        mask_index: pos,
                        target: tok.clone(),
                        seed: target.seed.to_string(),
                        weight: 1.0,
                        source: Source { shard: self.shard, offset },
                    },
                ));
            }
        }
        found.sort_by_key(|(row, si, _)| (*row, *si));
        for (_, _, ex) in found {
            let key = self.targets.get_key_value(ex.target.as_str()).map(|(k, _)| *k).unwrap_or("");
            let cap = self.caps.get(key).copied().unwrap_or(0);
            let used = self.in_shard.entry(key).or_default();
            // A candidate past its token's cap inside the shard can never be
            // accepted globally, so it is dropped here.
            if *used < cap {
                *used += 1;
                self.scan.candidates.push(ex);
            }
        }
    }

    pub fn finish(self) -> ShardScan {
        self.scan
    }
}

/// Applies caps over shard scans in ascending shard order.
pub fn merge_scans(
    mut scans: Vec<ShardScan>,
    caps: &BTreeMap<String, usize>,
    total_cap: usize,
) -> (Vec<MinedExample>, MiningStats) {
    scans.sort_by_key(|s| s.shard);
    let mut stats = MiningStats::default();
    let mut out = Vec::new();
    for scan in scans {
        stats.absorb(&scan.stats);
        for ex in scan.candidates {
            if out.len() >= total_cap {
                break;
            }
            let cap = caps.get(&ex.target).copied().unwrap_or(0);
            let count = stats.per_token_counts.entry(ex.target.clone()).or_default();
            if (*count as usize) < cap {
                *count += 1;
                out.push(ex);
            }
        }
    }
    stats.examples_emitted = out.len() as u64;
    (out, stats)
}

/// Single-threaded mining over in-memory shards (documents are lines).
pub fn mine<S: AsRef<str>>(
    shards: &[S],
    nset: &NeighborSet,
    cfg: &MiningConfig,
) -> Result<(Vec<MinedExample>, MiningStats)> {
    cfg.validate()?;
    if nset.entries.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let caps = balance_caps(nset, cfg);
    let scans = shards
        .iter()
        .enumerate()
        .map(|(id, text)| {
            let mut scanner = ShardScanner::new(id as u64, nset, &caps, cfg);
            for (offset, doc) in text.as_ref().lines().enumerate() {
                scanner.feed(offset as u64, doc);
            }
            scanner.finish()
        })
        .collect();
    Ok(merge_scans(scans, &caps, cfg.total_cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::NeighborEntry;
    use alloc::vec;

    fn nset(tokens: &[(&str, f64)]) -> NeighborSet {
        NeighborSet {
            task: "t".into(),
            entries: tokens
                .iter()
                .enumerate()
                .map(|(row, (t, s))| NeighborEntry { token: t.to_string(), score: *s, seed: "positive".into(), row })
                .collect(),
            seeds: vec!["positive".into(), "negative".into()],
            k_per_seed: tokens.len(),
        }
    }

    fn loose() -> MiningConfig {
        MiningConfig { min_sentence_tokens: 1, ..MiningConfig::default() }
    }

    #[test]
    fn splitting() {
        assert_eq!(split_sentences("Good food. Bad service!"), vec!["Good food.", "Bad service!"]);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("no terminator"), vec!["no terminator"]);
        assert_eq!(split_sentences("v1.2 is out? yes... ok"), vec!["v1.2 is out?", "yes...", "ok"]);
        assert_eq!(split_sentences(" . "), vec!["."]);
    }

    #[test]
    fn caps() {
        let set = nset(&[("a", 5.0), ("b", 4.0), ("c", 3.0)]);
        let cfg = |cap| MiningConfig { total_cap: cap, ..MiningConfig::default() };
        let caps = balance_caps(&set, &cfg(10));
        assert_eq!((caps["a"], caps["b"], caps["c"]), (4, 3, 3));
        let caps = balance_caps(&set, &cfg(9));
        assert_eq!((caps["a"], caps["b"], caps["c"]), (3, 3, 3));
        let one = nset(&[("a", 1.0)]);
        assert_eq!(balance_caps(&one, &cfg(7))["a"], 7);
        let unl = MiningConfig { per_token_cap_policy: CapPolicy::Unlimited, ..cfg(7) };
        assert_eq!(balance_caps(&set, &unl)["c"], 7);
    }

    #[test]
    fn mines_single_match() {
        let set = nset(&[("good", 2.0), ("bad", 1.0)]);
        let (ex, stats) = mine(&["The food was good.\nIt rained."], &set, &loose()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].tokens, vec!["the", "food", "was", MASK_TOKEN, "."]);
        assert_eq!(ex[0].target, "good");
        assert_eq!(ex[0].mask_index, 3);
        assert_eq!(ex[0].source, Source { shard: 0, offset: 0 });
        assert_eq!(stats.documents_scanned, 2);
        assert_eq!(stats.sentences_scanned, 2);
        assert_eq!(stats.examples_emitted, 1);
    }

    #[test]
    fn empty_corpus() {
        let set = nset(&[("good", 2.0)]);
        let (ex, stats) = mine::<&str>(&[], &set, &loose()).unwrap();
        assert!(ex.is_empty());
        assert_eq!(stats, MiningStats::default());
    }

    #[test]
    fn distinct_tokens_first_occurrence() {
        let set = nset(&[("good", 2.0), ("bad", 1.0)]);
        let (ex, _) = mine(&["good good bad"], &set, &loose()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].target.as_str(), ex[0].mask_index), ("good", 0));
        assert_eq!((ex[1].target.as_str(), ex[1].mask_index), ("bad", 2));
    }

    #[test]
    fn length_bounds_skip() {
        let set = nset(&[("good", 2.0)]);
        let cfg = MiningConfig { min_sentence_tokens: 3, max_sentence_tokens: 4, ..MiningConfig::default() };
        let (ex, _) = mine(&["good. so good. it is so good. it is really so good."], &set, &cfg).unwrap();
        let lens: Vec<usize> = ex.iter().map(|e| e.tokens.len()).collect();
        assert_eq!(lens, vec![3]);
    }

    #[test]
    fn caps_enforced_in_order() {
        let set = nset(&[("good", 2.0), ("bad", 1.0)]);
        let cfg = MiningConfig { total_cap: 3, ..loose() };
        let corpus = ["good bad\ngood bad", "good bad"];
        let (ex, stats) = mine(&corpus, &set, &cfg).unwrap();
        // caps: good 2, bad 1
        let got: Vec<(&str, u64, u64)> =
            ex.iter().map(|e| (e.target.as_str(), e.source.shard, e.source.offset)).collect();
        assert_eq!(got, vec![("good", 0, 0), ("bad", 0, 0), ("good", 0, 1)]);
        assert_eq!(stats.per_token_counts["good"], 2);
        assert_eq!(stats.per_token_counts["bad"], 1);
    }

    #[test]
    fn ordering_by_row_within_document() {
        // "bad" has the lower row, so it comes first despite appearing later
        let set = NeighborSet { entries: vec![
            NeighborEntry { token: "good".into(), score: 2.0, seed: "positive".into(), row: 9 },
            NeighborEntry { token: "bad".into(), score: 1.0, seed: "negative".into(), row: 3 },
        ], ..nset(&[]) };
        let (ex, _) = mine(&["good then bad. bad again"], &set, &loose()).unwrap();
        let got: Vec<(&str, usize)> = ex.iter().map(|e| (e.target.as_str(), e.tokens.len())).collect();
        assert_eq!(got, vec![("bad", 4), ("bad", 2), ("good", 4)]);
        assert_eq!(ex[0].seed, "negative");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(mine(&["x"], &nset(&[]), &loose()), Err(Error::EmptyNeighborSet));
        let cfg = MiningConfig { total_cap: 0, ..loose() };
        assert!(mine(&["x"], &nset(&[("a", 1.0)]), &cfg).is_err());
        let cfg = MiningConfig { min_sentence_tokens: 9, max_sentence_tokens: 2, ..loose() };
        assert!(mine(&["x"], &nset(&[("a", 1.0)]), &cfg).is_err());
    }
}
