//! Task specifications and prompt template rendering.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{tokenize, MASK_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Input,
    Input1,
    Input2,
    Entity1,
    Entity2,
    Label,
}

impl Placeholder {
    pub const ALL: [Placeholder; 6] = [
        Placeholder::Input,
        Placeholder::Input1,
        Placeholder::Input2,
        Placeholder::Entity1,
        Placeholder::Entity2,
        Placeholder::Label,
    ];

    /// Bare name, as used for keys of input maps (`"input"`, `"entity1"`, ...).
    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Input => "input",
            Placeholder::Input1 => "input1",
            Placeholder::Input2 => "input2",
            Placeholder::Entity1 => "entity1",
            Placeholder::Entity2 => "entity2",
            Placeholder::Label => "label",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let bare = name
            .strip_prefix('[')
            .and_then(|n| n.strip_suffix(']'))
            .unwrap_or(name);
        Self::ALL.into_iter().find(|p| p.name() == bare)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

fn parse_template(template: &str) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut seen: Vec<Placeholder> = Vec::new();
    let mut rest = template;
    while !rest.is_empty() {
        let slot = Placeholder::ALL.into_iter().find(|p| {
            let tag = p.name();
            rest.len() >= tag.len() + 2
                && rest.as_bytes()[0] == b'['
                && rest[1..].starts_with(tag)
                && rest.as_bytes()[tag.len() + 1] == b']'
        });
        match slot {
            Some(p) => {
                if seen.contains(&p) {
                    return Err(Error::DuplicatePlaceholder(p.to_string()));
                }
                seen.push(p);
                if !text.is_empty() {
                    segments.push(Segment::Text(core::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(p));
                rest = &rest[p.name().len() + 2..];
            }
            None => {
                let c = rest.chars().next().unwrap_or_default();
                text.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    if !seen.contains(&Placeholder::Label) {
        return Err(Error::MissingLabelPlaceholder);
    }
    Ok(segments)
}

/// Serialized shape of a task document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDocument {
    pub name: String,
    pub template: String,
    pub seed_labels: Vec<String>,
    #[serde(default)]
    pub task_kind: String,
}

/// A validated zero-shot task: prompt template plus ordered seed labels.
///
/// Seed labels are stored in tokenizer-canonical (lowercase) form and are
/// guaranteed to be single tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    name: String,
    template: String,
    seed_labels: Vec<String>,
    task_kind: String,
    segments: Vec<Segment>,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        template: impl Into<String>,
        seed_labels: impl IntoIterator<Item = impl AsRef<str>>,
        task_kind: impl Into<String>,
    ) -> Result<Self> {
        let template = template.into();
        let segments = parse_template(&template)?;
        let mut seeds: Vec<String> = Vec::new();
        for raw in seed_labels {
            let raw = raw.as_ref();
            if raw.trim().is_empty() {
                return Err(Error::EmptySeed);
            }
            let toks = tokenize(raw);
            if toks.len() != 1 || toks[0] == MASK_TOKEN {
                return Err(Error::MultiTokenSeed { label: raw.to_string(), tokens: toks.len() });
            }
            let tok = toks.into_iter().next().unwrap_or_default();
            if seeds.contains(&tok) {
                return Err(Error::DuplicateSeed(tok));
            }
            seeds.push(tok);
        }
        match seeds.len() {
            0 => return Err(Error::EmptySeeds),
            1 => return Err(Error::TooFewSeeds(1)),
            _ => {}
        }
        Ok(TaskSpec {
            name: name.into(),
            template,
            seed_labels: seeds,
            task_kind: task_kind.into(),
            segments,
        })
    }

    /// Parses and validates a JSON task document.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: TaskDocument =
            serde_json::from_str(text).map_err(|e| Error::MalformedTask(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: TaskDocument) -> Result<Self> {
        if doc.name.is_empty() {
            return Err(Error::MalformedTask("empty task name".to_string()));
        }
        Self::new(doc.name, doc.template, &doc.seed_labels, doc.task_kind)
    }

    pub fn to_document(&self) -> TaskDocument {
        TaskDocument {
            name: self.name.clone(),
            template: self.template.clone(),
            seed_labels: self.seed_labels.clone(),
            task_kind: self.task_kind.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        // TaskDocument contains only strings; serialization cannot fail.
        serde_json::to_string_pretty(&self.to_document()).unwrap_or_default()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn seed_labels(&self) -> &[String] {
        &self.seed_labels
    }

    pub fn task_kind(&self) -> &str {
        &self.task_kind
    }

    /// Placeholders present in the template, in order of appearance.
    pub fn placeholders(&self) -> Vec<Placeholder> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(p) => Some(*p),
                Segment::Text(_) => None,
            })
            .collect()
    }

    pub fn label_position(&self, label: &str) -> Option<usize> {
        self.seed_labels.iter().position(|s| s == label)
    }

    /// Renders the template with `label` in the label slot.
    pub fn render_filled(&self, inputs: &BTreeMap<String, String>, label: &str) -> Result<Vec<String>> {
        let label = self
            .seed_labels
            .iter()
            .find(|s| s.as_str() == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let (tokens, _) = self.render(inputs, label)?;
        Ok(tokens)
    }

    /// Renders the template with the mask token in the label slot and returns
    /// the token list with the mask position.
    pub fn render_masked(&self, inputs: &BTreeMap<String, String>) -> Result<(Vec<String>, usize)> {
        self.render(inputs, MASK_TOKEN)
    }

    // Each segment is tokenized on its own so that the label slot always maps
    // to exactly one token, whatever characters surround it in the template.
    fn render(&self, inputs: &BTreeMap<String, String>, label_token: &str) -> Result<(Vec<String>, usize)> {
        let mut tokens = Vec::new();
        let mut label_index = 0;
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => tokens.extend(tokenize(t)),
                Segment::Slot(Placeholder::Label) => {
                    label_index = tokens.len();
                    tokens.push(label_token.to_string());
                }
                Segment::Slot(p) => {
                    let value = lookup_input(inputs, *p)
                        .ok_or_else(|| Error::MissingPlaceholderValue(p.to_string()))?;
                    let toks = tokenize(value);
                    if toks.iter().any(|t| t == MASK_TOKEN) {
                        return Err(Error::ReservedTokenInInput(p.to_string()));
                    }
                    tokens.extend(toks);
                }
            }
        }
        Ok((tokens, label_index))
    }
}

fn lookup_input(inputs: &BTreeMap<String, String>, p: Placeholder) -> Option<&str> {
    inputs
        .iter()
        .find(|(k, _)| Placeholder::from_name(k) == Some(p))
        .map(|(_, v)| v.as_str())
}
