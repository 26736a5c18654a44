//! Character-level NER corpora: the BMES column format and vocabularies.
//!
//! A corpus file holds one `char<TAB>tag` pair per line with a blank line
//! between sentences. Tags are `O` or `{B,M,E,S}-TYPE`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldEntity {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub kind: String,
}

impl GoldEntity {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        Self {
            start,
            end,
            kind: kind.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &GoldEntity) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub chars: Vec<char>,
    pub entities: Vec<GoldEntity>,
}

impl Sentence {
    pub fn new(chars: Vec<char>, entities: Vec<GoldEntity>) -> Result<Self> {
        let s = Self { chars, entities };
        s.validate()?;
        Ok(s)
    }

    pub fn from_text(text: &str) -> Self {
        Self {
            chars: text.chars().collect(),
            entities: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chars.is_empty() {
            return contract("sentence has no characters");
        }
        for e in &self.entities {
            if e.start > e.end || e.end >= self.chars.len() {
                return contract(format!(
                    "entity ({}, {}, {}) outside sentence of length {}",
                    e.start,
                    e.end,
                    e.kind,
                    self.chars.len()
                ));
            }
            if e.kind == NONE_TYPE {
                return contract("gold entity uses the reserved NONE type");
            }
        }
        Ok(())
    }

    pub fn is_flat(&self) -> bool {
        let mut sorted: Vec<&GoldEntity> = self.entities.iter().collect();
        sorted.sort();
        sorted.windows(2).all(|w| !w[0].overlaps(w[1]))
    }
}

fn split_line(line: &str) -> Option<(&str, &str)> {
    if let Some((c, t)) = line.split_once('\t') {
        return Some((c, t.trim()));
    }
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(t), None) => Some((c, t)),
        _ => None,
    }
}

struct OpenRun {
    start: usize,
    kind: String,
    line: usize,
}

/// Parses a BMES column corpus.
pub fn parse_column_corpus(text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut chars = Vec::new();
    let mut entities = Vec::new();
    let mut open: Option<OpenRun> = None;

    let mut finish = |chars: &mut Vec<char>,
                      entities: &mut Vec<GoldEntity>,
                      open: &mut Option<OpenRun>|
     -> Result<()> {
        if let Some(run) = open.take() {
            return Err(Error::Parse {
                line: run.line,
                msg: format!("entity {} opened here is never closed with E-", run.kind),
            });
        }
        if !chars.is_empty() {
            sentences.push(Sentence {
                chars: std::mem::take(chars),
                entities: std::mem::take(entities),
            });
        }
        Ok(())
    };

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            finish(&mut chars, &mut entities, &mut open)?;
            continue;
        }
        let (c, tag) = split_line(raw).ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `char<TAB>tag`, got {raw:?}"),
        })?;
        let mut it = c.chars();
        let ch = match (it.next(), it.next()) {
            (Some(ch), None) => ch,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected a single character, got {c:?}"),
                })
            }
        };
        let pos = chars.len();
        chars.push(ch);

        if tag == "O" {
            if let Some(run) = &open {
                return Err(Error::Parse {
                    line,
                    msg: format!("O inside open {} entity", run.kind),
                });
            }
            continue;
        }
        let (prefix, kind) = tag.split_once('-').ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown tag {tag:?}"),
        })?;
        if kind.is_empty() || kind == NONE_TYPE {
            return Err(Error::Parse {
                line,
                msg: format!("invalid entity type in tag {tag:?}"),
            });
        }
        match prefix {
            "B" | "S" => {
                if let Some(run) = &open {
                    return Err(Error::Parse {
                        line,
                        msg: format!("{prefix}- tag inside open {} entity", run.kind),
                    });
                }
                if prefix == "S" {
                    entities.push(GoldEntity::new(pos, pos, kind));
                } else {
                    open = Some(OpenRun {
                        start: pos,
                        kind: kind.to_string(),
                        line,
                    });
                }
            }
            "M" | "E" => {
                let run = open.as_ref().ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("{prefix}-{kind} without a preceding B-"),
                })?;
                if run.kind != kind {
                    return Err(Error::Parse {
                        line,
                        msg: format!("{prefix}-{kind} continues a {} entity", run.kind),
                    });
                }
                if prefix == "E" {
                    let run = open.take().expect("checked above");
                    entities.push(GoldEntity::new(run.start, pos, run.kind));
                }
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown tag prefix {other:?}"),
                })
            }
        }
    }
    finish(&mut chars, &mut entities, &mut open)?;
    Ok(sentences)
}

/// BMES tags for a flat sentence.
pub fn spans_to_bmes(sentence: &Sentence) -> Result<Vec<String>> {
    sentence.validate()?;
    if !sentence.is_flat() {
        return contract("overlapping entities cannot be expressed in BMES");
    }
    let mut tags = vec!["O".to_string(); sentence.len()];
    for e in &sentence.entities {
        if e.start == e.end {
            tags[e.start] = format!("S-{}", e.kind);
            continue;
        }
        tags[e.start] = format!("B-{}", e.kind);
        for t in tags.iter_mut().take(e.end).skip(e.start + 1) {
            *t = format!("M-{}", e.kind);
        }
        tags[e.end] = format!("E-{}", e.kind);
    }
    Ok(tags)
}

/// Serializes flat sentences to the column format.
pub fn write_column_corpus(sentences: &[Sentence]) -> Result<String> {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let tags = spans_to_bmes(s)?;
        for (c, t) in s.chars.iter().zip(tags) {
            let _ = writeln!(out, "{c}\t{t}");
        }
    }
    Ok(out)
}

pub const NONE_TYPE: &str = "NONE";
pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Character and type vocabularies.
///
/// Character ids 0 and 1 are reserved (unknown, padding); type id 0 is the
/// non-entity class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    chars: Vec<char>,
    types: Vec<String>,
    char_ids: HashMap<char, usize>,
    type_ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    chars: Vec<char>,
    types: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_lists(r.chars, r.types)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            chars: v.chars,
            types: v.types,
        }
    }
}

impl Vocab {
    /// `chars` and `types` exclude the reserved entries.
    pub fn from_lists(chars: Vec<char>, types: Vec<String>) -> Self {
        let char_ids = chars.iter().enumerate().map(|(k, c)| (*c, k + 2)).collect();
        let type_ids = types
            .iter()
            .enumerate()
            .map(|(k, t)| (t.clone(), k + 1))
            .collect();
        Self {
            chars,
            types,
            char_ids,
            type_ids,
        }
    }

    /// Sorted, so independent of sentence order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Result<Self> {
        let mut chars = BTreeSet::new();
        let mut types = BTreeSet::new();
        for s in sentences {
            chars.extend(s.chars.iter().copied());
            for e in &s.entities {
                if e.kind == NONE_TYPE {
                    return contract("gold entity uses the reserved NONE type");
                }
                types.insert(e.kind.clone());
            }
        }
        Ok(Self::from_lists(
            chars.into_iter().collect(),
            types.into_iter().collect(),
        ))
    }

    pub fn with_types(mut self, extra: impl IntoIterator<Item = String>) -> Self {
        let mut all: BTreeSet<String> = self.types.drain(..).collect();
        all.extend(extra);
        Self::from_lists(std::mem::take(&mut self.chars), all.into_iter().collect())
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, chars: &[char]) -> Vec<usize> {
        chars.iter().map(|c| self.char_id(*c)).collect()
    }

    /// Size of the embedding table including reserved rows.
    pub fn num_chars(&self) -> usize {
        self.chars.len() + 2
    }

    /// Number of classes including NONE.
    pub fn num_classes(&self) -> usize {
        self.types.len() + 1
    }

    pub fn type_id(&self, kind: &str) -> Option<usize> {
        self.type_ids.get(kind).copied()
    }

    pub fn type_name(&self, id: usize) -> &str {
        if id == 0 {
            NONE_TYPE
        } else {
            &self.types[id - 1]
        }
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}
