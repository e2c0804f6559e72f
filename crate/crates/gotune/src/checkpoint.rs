//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.gomlm          model parameters
//! <dir>/weights/NNN_<task>_<seed>.json   one per (task, seed)
//! <dir>/train_log.tsv        epoch, model_loss, constraint_loss
//! <dir>/config.digest        hex digest of the training inputs, then `seed=<u64>`
//! ```

use std::fs;
use std::path::Path;

use gotune_core::trainer::EpochLog;
use gotune_core::{GeometricWeights, ModelParams};

use crate::error::{Context, Error, Result};
use crate::formats::{load_model, read_text, save_model, write_atomic};

pub const MODEL_FILE: &str = "model.gomlm";
pub const WEIGHTS_DIR: &str = "weights";
pub const LOG_FILE: &str = "train_log.tsv";
pub const DIGEST_FILE: &str = "config.digest";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub weights: Vec<GeometricWeights>,
    pub history: Vec<EpochLog>,
    pub config_digest: String,
    /// Training seed, echoed into evaluation reports.
    pub seed: u64,
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn encode_log(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tmodel_loss\tconstraint_loss\n");
    for (i, h) in history.iter().enumerate() {
        let c = h.constraint_loss.map_or_else(|| "nan".to_string(), |v| v.to_string());
        s.push_str(&format!("{}\t{}\t{}\n", i + 1, h.model_loss, c));
    }
    s
}

fn parse_log(path: &Path, text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch\tmodel_loss\tconstraint_loss") {
        return Err(Error::format(path, "line 1: bad header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("line {}: malformed row", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let model_loss = f[1].parse().map_err(|_| bad())?;
            let constraint_loss = match f[2] {
                "nan" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            };
            Ok(EpochLog { model_loss, constraint_loss })
        })
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        save_model(&dir.join(MODEL_FILE), &self.model)?;
        let wdir = dir.join(WEIGHTS_DIR);
        if wdir.exists() {
            for entry in fs::read_dir(&wdir).map_err(|e| Error::write(&wdir, e))? {
                let p = entry.map_err(|e| Error::write(&wdir, e))?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    fs::remove_file(&p).map_err(|e| Error::write(&p, e))?;
                }
            }
        }
        for (i, gw) in self.weights.iter().enumerate() {
            let name = format!("{i:03}_{}_{}.json", file_stem(&gw.task), file_stem(&gw.seed));
            write_atomic(&wdir.join(name), gw.to_json().as_bytes())?;
        }
        write_atomic(&dir.join(LOG_FILE), encode_log(&self.history).as_bytes())?;
        write_atomic(&dir.join(DIGEST_FILE), format!("{}\nseed={}\n", self.config_digest, self.seed).as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = load_model(&dir.join(MODEL_FILE))?;
        let wdir = dir.join(WEIGHTS_DIR);
        let mut files = Vec::new();
        if wdir.exists() {
            for entry in fs::read_dir(&wdir).map_err(|e| Error::read(&wdir, e))? {
                let p = entry.map_err(|e| Error::read(&wdir, e))?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    files.push(p);
                }
            }
        }
        files.sort();
        let weights = files
            .iter()
            .map(|p| GeometricWeights::from_json(&read_text(p)?).context(p.display()))
            .collect::<Result<Vec<_>>>()?;
        let log_path = dir.join(LOG_FILE);
        let history = parse_log(&log_path, &read_text(&log_path)?)?;
        let digest_path = dir.join(DIGEST_FILE);
        let text = read_text(&digest_path)?;
        let mut lines = text.lines();
        let config_digest = lines.next().unwrap_or("").trim().to_string();
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&digest_path, "line 2: expected seed=<u64>"))?;
        Ok(Checkpoint { model, weights, history, config_digest, seed })
    }
}
