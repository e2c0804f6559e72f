//! On-disk formats: GOEMB datastores, TSV embedding imports, GOMLM model
//! files, JSON-Lines records and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gotune_core::model::{Shape, Tensors};
use gotune_core::{LabelDatastore, ModelParams};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Context, Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::read(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::read(path, e))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::write(path, e))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn line(&mut self, what: &str) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(self.path, format!("truncated file while reading {what}")))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(self.path, format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let need = n * 4;
        if self.bytes.len() - self.pos < need {
            return Err(Error::format(self.path, format!("truncated file while reading {what}")));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += need;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn header_fields<'a>(path: &Path, line: &'a str, magic: &str, count: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.first() != Some(&magic) {
        return Err(Error::format(path, format!("not a {magic} file")));
    }
    if fields.get(1) != Some(&"1") {
        return Err(Error::format(path, format!("unsupported {magic} version")));
    }
    if fields.len() != count {
        return Err(Error::format(path, format!("malformed {magic} header")));
    }
    Ok(fields)
}

fn parse_usize(path: &Path, s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::format(path, format!("bad {what} {s:?} in header")))
}

pub fn encode_goemb(ds: &LabelDatastore) -> Vec<u8> {
    let mut out = format!("GOEMB 1 {} {}\n", ds.len(), ds.dim()).into_bytes();
    for t in ds.tokens() {
        out.extend_from_slice(t.as_bytes());
        out.push(b'\n');
    }
    push_f32s(&mut out, ds.embeddings());
    out
}

pub fn decode_goemb(path: &Path, bytes: &[u8]) -> Result<LabelDatastore> {
    if !bytes.starts_with(b"GOEMB ") {
        return Err(Error::format(path, "not a GOEMB file"));
    }
    let mut r = Reader { bytes, pos: 0, path };
    let header = r.line("header")?;
    let f = header_fields(path, header, "GOEMB", 4)?;
    let v = parse_usize(path, f[2], "token count")?;
    let d = parse_usize(path, f[3], "dimension")?;
    let tokens = (0..v).map(|_| r.line("token list").map(str::to_string)).collect::<Result<Vec<_>>>()?;
    let values = r.f32s(v * d, "embedding matrix")?;
    r.finish()?;
    LabelDatastore::new(tokens, values, d).context(path.display())
}

pub fn save_datastore(path: &Path, ds: &LabelDatastore) -> Result<()> {
    write_atomic(path, &encode_goemb(ds))
}

pub fn load_datastore(path: &Path) -> Result<LabelDatastore> {
    decode_goemb(path, &read_bytes(path)?)
}

/// `token\tv1\t...\tvd` per line; `d` is fixed by the first row.
pub fn parse_tsv_embeddings(path: &Path, text: &str) -> Result<LabelDatastore> {
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or_default();
        let row: Vec<f32> = fields
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::format(path, format!("line {lineno}: bad value {f:?}")))
            })
            .collect::<Result<_>>()?;
        let d = *dim.get_or_insert(row.len());
        if row.len() != d || d == 0 {
            return Err(Error::format(path, format!("line {lineno}: expected {d} values, got {}", row.len())));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("line {lineno}: non-finite value in column {}", c + 1)));
        }
        tokens.push(token.to_string());
        values.extend(row);
    }
    LabelDatastore::new(tokens, values, dim.unwrap_or(0)).context(path.display())
}

pub fn import_tsv(path: &Path) -> Result<LabelDatastore> {
    parse_tsv_embeddings(path, &read_text(path)?)
}

pub fn encode_tsv(ds: &LabelDatastore) -> String {
    let mut s = String::new();
    for (row, tok) in ds.tokens().iter().enumerate() {
        s.push_str(tok);
        for v in ds.row(row) {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn encode_gomlm(model: &ModelParams) -> Vec<u8> {
    let Shape { vocab, dim, hidden, tied } = model.shape();
    let mut out = format!("GOMLM 1 {vocab} {dim} {hidden} {}\n", u8::from(tied)).into_bytes();
    for t in model.vocab() {
        out.extend_from_slice(t.as_bytes());
        out.push(b'\n');
    }
    for tensor in model.tensors().iter() {
        push_f32s(&mut out, tensor);
    }
    out
}

pub fn decode_gomlm(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    if !bytes.starts_with(b"GOMLM ") {
        return Err(Error::format(path, "not a GOMLM file"));
    }
    let mut r = Reader { bytes, pos: 0, path };
    let header = r.line("header")?;
    let f = header_fields(path, header, "GOMLM", 6)?;
    let vocab = parse_usize(path, f[2], "vocabulary size")?;
    let dim = parse_usize(path, f[3], "dimension")?;
    let hidden = parse_usize(path, f[4], "hidden size")?;
    let tied = match f[5] {
        "0" => false,
        "1" => true,
        other => return Err(Error::format(path, format!("bad tied flag {other:?}"))),
    };
    let shape = Shape { vocab, dim, hidden, tied };
    let tokens = (0..vocab).map(|_| r.line("vocabulary").map(str::to_string)).collect::<Result<Vec<_>>>()?;
    let tensors = Tensors {
        emb: r.f32s(vocab * dim, "E")?,
        out: if tied { Vec::new() } else { r.f32s(vocab * dim, "U")? },
        w1: r.f32s(dim * hidden, "W1")?,
        b1: r.f32s(hidden, "b1")?,
        w2: r.f32s(hidden * dim, "W2")?,
        b2: r.f32s(dim, "b2")?,
    };
    r.finish()?;
    ModelParams::from_parts(tokens, shape, tensors, 0).context(path.display())
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_gomlm(model))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_gomlm(path, &read_bytes(path)?)
}

pub fn encode_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        // records are plain data; serialization cannot fail
        s.push_str(&serde_json::to_string(r).unwrap_or_default());
        s.push('\n');
    }
    s
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_text(path)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, encode_jsonl(records).as_bytes())
}
