//! Deterministic lowercase word-level tokenizer.
//!
//! Text is lowercased first, then segmented: maximal runs of alphanumeric
//! characters form one token, every other non-whitespace character is a token
//! on its own, and the literal `<mask>` becomes [`MASK_TOKEN`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const MASK_TOKEN: &str = "<mask>";
pub const OOV_TOKEN: &str = "<unk>";

pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut run = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c.is_alphanumeric() {
            run.push(c);
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if !run.is_empty() {
            out.push(core::mem::take(&mut run));
        }
        if rest.starts_with(MASK_TOKEN) {
            out.push(MASK_TOKEN.to_string());
            rest = &rest[MASK_TOKEN.len()..];
            continue;
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
        rest = &rest[c.len_utf8()..];
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_ref());
    }
    s
}
