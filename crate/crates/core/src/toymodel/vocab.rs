use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::PromptTemplate;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const EXAMPLE_SEP: u32 = 3;
pub const IO_SEP: u32 = 4;
/// Label tokens occupy `FIRST_LABEL .. FIRST_LABEL + n_labels` in label-set order.
pub const FIRST_LABEL: u32 = 5;

/// Exact-match whitespace vocabulary that knows the prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_labels: usize,
    n_aliases: usize,
    example_sep: String,
    io_sep: String,
    label_sep: String,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    example_sep: String,
    io_sep: String,
    label_sep: String,
    n_labels: usize,
    #[serde(default)]
    n_aliases: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens: f.tokens,
            index,
            n_labels: f.n_labels,
            n_aliases: f.n_aliases,
            example_sep: f.example_sep,
            io_sep: f.io_sep,
            label_sep: f.label_sep,
        }
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            version: 1,
            example_sep: v.example_sep,
            io_sep: v.io_sep,
            label_sep: v.label_sep,
            n_labels: v.n_labels,
            n_aliases: v.n_aliases,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Build from the label set and raw (unsanitized) texts.
    pub fn build<'a>(
        label_set: &[String],
        texts: impl IntoIterator<Item = &'a str>,
        template: &PromptTemplate,
    ) -> Self {
        Self::with_aliases(label_set, texts, template, 0)
    }

    /// Like [`Vocab::build`], reserving `n_aliases` placeholder tokens right
    /// after the labels for relexicalized training.
    pub fn with_aliases<'a>(
        label_set: &[String],
        texts: impl IntoIterator<Item = &'a str>,
        template: &PromptTemplate,
        n_aliases: usize,
    ) -> Self {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<unk>".to_string(),
            template.eos_marker.clone(),
            template.example_sep_token().to_string(),
            template.io_sep_token().to_string(),
        ];
        tokens.extend(label_set.iter().cloned());
        tokens.extend((0..n_aliases).map(|k| format!("<alias_{k}>")));
        let reserved: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| {
                template
                    .sanitize(t)
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .filter(|w| !reserved.contains(w.as_str()))
            .collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            n_labels: label_set.len(),
            n_aliases,
            example_sep: template.example_sep.clone(),
            io_sep: template.io_sep.clone(),
            label_sep: template.label_sep.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_aliases(&self) -> usize {
        self.n_aliases
    }

    /// Ids of the alias placeholders.
    pub fn alias_range(&self) -> std::ops::Range<u32> {
        let start = FIRST_LABEL + self.n_labels as u32;
        start..start + self.n_aliases as u32
    }

    /// First id of an ordinary word token.
    pub fn word_start(&self) -> u32 {
        self.alias_range().end
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn label(&self, label_index: usize) -> &str {
        &self.tokens[FIRST_LABEL as usize + label_index]
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        let id = *self.index.get(label)?;
        let idx = id.checked_sub(FIRST_LABEL)? as usize;
        (idx < self.n_labels).then_some(idx)
    }

    /// Template-aware tokenization. Segments split on the example separator
    /// become `EXAMPLE_SEP`; within a segment the text before the io
    /// separator is whitespace tokenized, and the part after it is split on
    /// the label separator with each fragment mapped to a label token when
    /// it names one.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<u32> {
        let label_core = {
            let c = self.label_sep.trim();
            if c.is_empty() {
                self.label_sep.as_str()
            } else {
                c
            }
        };
        let mut ids = Vec::new();
        for (si, segment) in prompt.split(self.example_sep.as_str()).enumerate() {
            if si > 0 {
                ids.push(EXAMPLE_SEP);
            }
            match segment.split_once(self.io_sep.as_str()) {
                Some((text, out)) => {
                    ids.extend(text.split_whitespace().map(|w| self.id(w)));
                    ids.push(IO_SEP);
                    for fragment in out.split(label_core) {
                        let fragment = fragment.trim();
                        if fragment.is_empty() {
                            continue;
                        }
                        match self.label_index(fragment) {
                            Some(l) => ids.push(FIRST_LABEL + l as u32),
                            None => ids.extend(fragment.split_whitespace().map(|w| self.id(w))),
                        }
                    }
                }
                None => ids.extend(segment.split_whitespace().map(|w| self.id(w))),
            }
        }
        ids
    }

    /// Label indices of a serialized target, followed by the EOS class.
    pub fn encode_target(&self, target: &str) -> Result<Vec<usize>> {
        let core = {
            let c = self.label_sep.trim();
            if c.is_empty() {
                self.label_sep.as_str()
            } else {
                c
            }
        };
        let mut out = Vec::new();
        for fragment in target.split(core) {
            let fragment = fragment.trim();
            if fragment.is_empty() {
                continue;
            }
            out.push(
                self.label_index(fragment)
                    .ok_or_else(|| Error::UnknownLabel(fragment.to_string()))?,
            );
        }
        out.push(self.n_labels);
        Ok(out)
    }

    /// Join generated label indices back into text.
    pub fn decode_labels(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.label(l))
            .collect::<Vec<_>>()
            .join(&self.label_sep)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocab", e))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))
    }
}
