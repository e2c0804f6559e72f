//! Records exchanged between pipeline stages.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::MASK_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub shard: u64,
    pub offset: u64,
}

/// One masked sentence whose hidden token is a neighbor-set label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedExample {
    pub tokens: Vec<String>,
    pub mask_index: usize,
    pub target: String,
    pub seed: String,
    pub weight: f64,
    pub source: Source,
}

impl MinedExample {
    pub fn validate(&self) -> Result<()> {
        if self.mask_index >= self.tokens.len() {
            return Err(Error::InvalidMaskIndex { index: self.mask_index, len: self.tokens.len() });
        }
        if self.tokens[self.mask_index] != MASK_TOKEN {
            return Err(Error::InvalidMaskIndex { index: self.mask_index, len: self.tokens.len() });
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidModel(format!("example weight {} is not a nonnegative real", self.weight)));
        }
        Ok(())
    }

    /// The sentence tokens with the target put back in place of the mask.
    pub fn restored(&self) -> Vec<String> {
        let mut t = self.tokens.clone();
        if let Some(slot) = t.get_mut(self.mask_index) {
            *slot = self.target.clone();
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub inputs: BTreeMap<String, String>,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub task: String,
    pub correct: u64,
    pub n: u64,
}

impl ReportRow {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Per-task accuracies tagged with the random seed and a digest of the inputs
/// that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub config_digest: String,
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("task\taccuracy\tn\n");
        for row in &self.rows {
            s.push_str(&format!("{}\t{:.4}\t{}\n", row.task, row.accuracy(), row.n));
        }
        s.push_str(&format!("# seed={}\n# config={}\n", self.seed, self.config_digest));
        s
    }

    /// Parses the TSV form. Correct counts are recovered from the rounded
    /// accuracy, which is exact for `n < 10_000`.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::MalformedReport(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "task\taccuracy\tn")) => {}
            _ => return Err(bad(1, "expected header \"task\\taccuracy\\tn\"")),
        }
        let mut rows = Vec::new();
        let mut seed = None;
        let mut digest = None;
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("seed=") {
                    seed = Some(v.parse::<u64>().map_err(|_| bad(lineno, "bad seed"))?);
                } else if let Some(v) = comment.strip_prefix("config=") {
                    digest = Some(v.to_string());
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if seed.is_some() || digest.is_some() {
                return Err(bad(lineno, "row after trailing comments"));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(lineno, "expected 3 tab-separated fields"));
            }
            let acc: f64 = fields[1].parse().map_err(|_| bad(lineno, "bad accuracy"))?;
            let n: u64 = fields[2].parse().map_err(|_| bad(lineno, "bad n"))?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(bad(lineno, "accuracy outside [0, 1]"));
            }
            let correct = libm::round(acc * n as f64) as u64;
            let row = ReportRow { task: fields[0].to_string(), correct, n };
            if libm::fabs(row.accuracy() - acc) > 5.0e-5 + 1e-12 {
                return Err(bad(lineno, "accuracy is not a fraction of n"));
            }
            rows.push(row);
        }
        Ok(Report {
            rows,
            seed: seed.ok_or_else(|| bad(0, "missing # seed= line"))?,
            config_digest: digest.ok_or_else(|| bad(0, "missing # config= line"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn report_tsv_layout() {
        let r = Report {
            rows: vec![
                ReportRow { task: "sst2".into(), correct: 2, n: 3 },
                ReportRow { task: "cola".into(), correct: 1, n: 2 },
            ],
            seed: 42,
            config_digest: "ab12".into(),
        };
        assert_eq!(
            r.to_tsv(),
            "task\taccuracy\tn\nsst2\t0.6667\t3\ncola\t0.5000\t2\n# seed=42\n# config=ab12\n"
        );
        assert_eq!(Report::parse_tsv(&r.to_tsv()).unwrap(), r);
    }

    #[test]
    fn report_parse_errors() {
        assert!(Report::parse_tsv("nope\n").is_err());
        assert!(Report::parse_tsv("task\taccuracy\tn\nx\t0.5\n# seed=1\n# config=a\n").is_err());
        assert!(Report::parse_tsv("task\taccuracy\tn\nx\t0.5\t2\n# config=a\n").is_err());
        assert!(Report::parse_tsv("task\taccuracy\tn\nx\t0.4\t2\n# seed=1\n# config=a\n").is_err());
    }

    #[test]
    fn mined_example_json_shape() {
        let ex = MinedExample {
            tokens: vec!["the".into(), MASK_TOKEN.into()],
            mask_index: 1,
            target: "good".into(),
            seed: "positive".into(),
            weight: 1.0,
            source: Source { shard: 0, offset: 3 },
        };
        let s = serde_json::to_string(&ex).unwrap();
        assert_eq!(
            s,
            r#"{"tokens":["the","<mask>"],"mask_index":1,"target":"good","seed":"positive","weight":1.0,"source":{"shard":0,"offset":3}}"#
        );
        ex.validate().unwrap();
        assert_eq!(ex.restored(), vec!["the", "good"]);
        let bad = MinedExample { mask_index: 0, ..ex };
        assert!(bad.validate().is_err());
    }
}
