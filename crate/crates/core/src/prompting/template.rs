use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShuntError};

/// Named slots a template may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Label,
    Confidence,
    Candidates,
    StageOutput,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Label => "label",
            Slot::Confidence => "confidence",
            Slot::Candidates => "candidates",
            Slot::StageOutput => "stage_output",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "label" => Slot::Label,
            "confidence" => Slot::Confidence,
            "candidates" => Slot::Candidates,
            "stage_output" => Slot::StageOutput,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Text(String),
    Slot(Slot),
}

/// `{name}` slot substitution; `{{` and `}}` produce literal braces.
#[derive(Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<Part>,
}

impl fmt::Debug for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Template").field(&self.source).finish()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for Template {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Template {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let source = String::deserialize(d)?;
        Template::parse(&source).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Template {
    type Err = ShuntError;

    fn from_str(s: &str) -> Result<Self> {
        Template::parse(s)
    }
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut text = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, ch)) = chars.next() {
            match ch {
                '{' if chars.peek().map(|&(_, c)| c) == Some('{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek().map(|&(_, c)| c) == Some('}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let rest = &source[i + 1..];
                    let end = rest
                        .find('}')
                        .ok_or_else(|| ShuntError::domain(format!("unclosed `{{` at byte {i} in template")))?;
                    let name = &rest[..end];
                    let slot = Slot::from_name(name)
                        .ok_or_else(|| ShuntError::domain(format!("unknown template slot `{{{name}}}`")))?;
                    if !text.is_empty() {
                        parts.push(Part::Text(std::mem::take(&mut text)));
                    }
                    parts.push(Part::Slot(slot));
                    for _ in 0..=name.chars().count() {
                        chars.next();
                    }
                }
                '}' => {
                    return Err(ShuntError::domain(format!("stray `}}` at byte {i} in template")));
                }
                c => text.push(c),
            }
        }
        if !text.is_empty() {
            parts.push(Part::Text(text));
        }
        Ok(Self {
            source: source.to_string(),
            parts,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out: Vec<Slot> = self
            .parts
            .iter()
            .filter_map(|p| match p {
                Part::Slot(s) => Some(*s),
                Part::Text(_) => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn has_slot(&self, slot: Slot) -> bool {
        self.parts.contains(&Part::Slot(slot))
    }

    /// Fails unless every slot used is in `allowed`.
    pub fn expect_slots(&self, allowed: &[Slot], what: &str) -> Result<()> {
        if let Some(s) = self.slots().into_iter().find(|s| !allowed.contains(s)) {
            return Err(ShuntError::domain(format!(
                "{what} template may not use slot `{{{}}}`",
                s.name()
            )));
        }
        Ok(())
    }

    pub fn render(&self, values: &BTreeMap<Slot, String>) -> Result<String> {
        let mut out = String::with_capacity(self.source.len());
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Slot(s) => out.push_str(
                    values
                        .get(s)
                        .ok_or_else(|| ShuntError::domain(format!("no value for template slot `{{{}}}`", s.name())))?,
                ),
            }
        }
        Ok(out)
    }

    pub fn render_one(&self, slot: Slot, value: &str) -> Result<String> {
        self.render(&BTreeMap::from([(slot, value.to_string())]))
    }
}
