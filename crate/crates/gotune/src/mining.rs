//! Shard-parallel mining over corpus files.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use gotune_core::miner::{balance_caps, merge_scans, ShardScan, ShardScanner};
use gotune_core::{MinedExample, MiningConfig, MiningStats, NeighborSet};
use rayon::prelude::*;

use crate::error::{Context, Error, Result};

/// Paths matching `pattern`, sorted; the position in this list is the shard id.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Usage(format!("bad glob {pattern:?}: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        out.push(p.map_err(|e| Error::read(e.path(), std::io::Error::other(e.to_string())))?);
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("{pattern}: no files match")));
    }
    Ok(out)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Data(format!("cannot start worker pool: {e}")))
}

fn scan_file(
    shard: u64,
    path: &Path,
    nset: &NeighborSet,
    caps: &std::collections::BTreeMap<String, usize>,
    cfg: &MiningConfig,
) -> Result<ShardScan> {
    let shard_err = |e: std::io::Error| Error::Read {
        path: path.to_path_buf(),
        source: std::io::Error::new(e.kind(), format!("shard {shard}: {e}")),
    };
    let file = File::open(path).map_err(shard_err)?;
    let mut scanner = ShardScanner::new(shard, nset, caps, cfg);
    for (offset, line) in BufReader::new(file).lines().enumerate() {
        scanner.feed(offset as u64, &line.map_err(shard_err)?);
    }
    Ok(scanner.finish())
}

fn check(nset: &NeighborSet, cfg: &MiningConfig) -> Result<()> {
    cfg.validate().context("mining config")?;
    if nset.entries.is_empty() {
        return Err(gotune_core::Error::EmptyNeighborSet).context("mining");
    }
    Ok(())
}

/// Mines shard files with up to `workers` threads. Output does not depend on
/// `workers`.
pub fn mine_files(
    shards: &[PathBuf],
    nset: &NeighborSet,
    cfg: &MiningConfig,
    workers: usize,
) -> Result<(Vec<MinedExample>, MiningStats)> {
    check(nset, cfg)?;
    let caps = balance_caps(nset, cfg);
    let scans = pool(workers)?.install(|| {
        shards
            .par_iter()
            .enumerate()
            .map(|(id, path)| scan_file(id as u64, path, nset, &caps, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(merge_scans(scans, &caps, cfg.total_cap))
}

/// In-memory variant of [`mine_files`]; documents are lines of each shard text.
pub fn mine_texts<S: AsRef<str> + Sync>(
    shards: &[S],
    nset: &NeighborSet,
    cfg: &MiningConfig,
    workers: usize,
) -> Result<(Vec<MinedExample>, MiningStats)> {
    check(nset, cfg)?;
    let caps = balance_caps(nset, cfg);
    let scans = pool(workers)?.install(|| {
        shards
            .par_iter()
            .enumerate()
            .map(|(id, text)| {
                let mut scanner = ShardScanner::new(id as u64, nset, &caps, cfg);
                for (offset, doc) in text.as_ref().lines().enumerate() {
                    scanner.feed(offset as u64, doc);
                }
                scanner.finish()
            })
            .collect::<Vec<_>>()
    });
    Ok(merge_scans(scans, &caps, cfg.total_cap))
}
