//! Closed-vocabulary prompts, prompt edits and attention reweighting.

use std::ops::Range;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::scale_block;
use crate::tensor::Tensor;
use crate::uvit::ReweightTarget;

pub const PAD: u32 = 0;

/// Words of the caption template, in id order after the pad token.
pub const TEMPLATE_WORDS: [&str; 9] = ["a", "large", "small", "bright", "dim", "circle", "square", "left", "right"];

/// Extra words available for prompt edits.
pub const EXTRA_WORDS: [&str; 8] = ["the", "and", "with", "shape", "top", "bottom", "soft", "sharp"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("prompt has {len} tokens, capacity is {max}")]
    TooLong { len: usize, max: usize },
    #[error("word '{0}' is not in the prompt")]
    WordAbsent(String),
    #[error("reweight scale {0} is negative; negative scales need the explicit override")]
    NegativeScale(f32),
    #[error("index {index} out of range for {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("reweight scale {0} is not finite")]
    NonFiniteScale(f32),
    #[error("t_edit {0} outside (0, 1]")]
    Gate(f64),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Word to id map with id 0 reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: IndexMap<String, u32>,
    capacity: usize,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S], capacity: usize) -> Result<Self> {
        if words.len() + 1 > capacity {
            return Err(PromptError::Vocabulary(format!(
                "{} words plus pad exceed capacity {capacity}",
                words.len()
            )));
        }
        let mut map = IndexMap::new();
        for (i, w) in words.iter().enumerate() {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(PromptError::Vocabulary(format!("invalid word {w:?}")));
            }
            if map.insert(w.to_string(), i as u32 + 1).is_some() {
                return Err(PromptError::Vocabulary(format!("duplicate word '{w}'")));
            }
        }
        Ok(Self { words: map, capacity })
    }

    /// Template and extra words in a fixed order.
    pub fn standard(capacity: usize) -> Result<Self> {
        let words: Vec<&str> = TEMPLATE_WORDS.iter().chain(EXTRA_WORDS.iter()).copied().collect();
        Self::new(&words, capacity)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.words.get_index(id as usize - 1).map(|(w, _)| w.as_str())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }

    /// Left-aligned ids padded to `len`.
    pub fn tokenize(&self, caption: &str, len: usize) -> Result<Vec<u32>> {
        let ids = caption
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| PromptError::UnknownWord(w.to_string())))
            .collect::<Result<Vec<u32>>>()?;
        pad(ids, len)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .filter(|&&id| id != PAD)
            .map(|&id| {
                self.word(id).ok_or(PromptError::OutOfRange {
                    index: id as usize,
                    len: self.len() + 1,
                })
            })
            .collect::<Result<Vec<&str>>>()?;
        Ok(words.join(" "))
    }

    /// Positions whose token is any of `targets`. Absent words are logged and skipped.
    pub fn find_target_tokens(&self, ids: &[u32], targets: &[&str]) -> Vec<usize> {
        let mut wanted = Vec::new();
        for &w in targets {
            match self.id(w) {
                Some(id) if ids.contains(&id) => wanted.push(id),
                _ => log::warn!("target word '{w}' not present in prompt"),
            }
        }
        ids.iter()
            .enumerate()
            .filter(|(_, id)| wanted.contains(id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn edit(&self, ids: &[u32], op: &PromptEdit, len: usize) -> Result<Vec<u32>> {
        let mut toks: Vec<u32> = ids.iter().copied().filter(|&id| id != PAD).collect();
        let lookup = |w: &str| self.id(w).ok_or_else(|| PromptError::UnknownWord(w.to_string()));
        match op {
            PromptEdit::Append(words) => {
                for w in words {
                    toks.push(lookup(w)?);
                }
            }
            PromptEdit::Remove(words) => {
                for w in words {
                    let id = lookup(w)?;
                    match toks.iter().position(|&t| t == id) {
                        Some(i) => {
                            toks.remove(i);
                        }
                        None => log::warn!("word '{w}' not present in prompt, nothing removed"),
                    }
                }
            }
            PromptEdit::Replace { from, to } => {
                let (a, b) = (lookup(from)?, lookup(to)?);
                if !toks.contains(&a) {
                    return Err(PromptError::WordAbsent(from.clone()));
                }
                toks.iter_mut().filter(|t| **t == a).for_each(|t| *t = b);
            }
        }
        pad(toks, len)
    }
}

fn pad(mut ids: Vec<u32>, len: usize) -> Result<Vec<u32>> {
    if ids.len() > len {
        return Err(PromptError::TooLong { len: ids.len(), max: len });
    }
    ids.resize(len, PAD);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptEdit {
    Append(Vec<String>),
    Remove(Vec<String>),
    Replace { from: String, to: String },
}

/// Scales `m[i, j]` by `c` for image rows `i` and columns `j` in `columns`.
/// `m` is one head's `[N, N]` post-softmax map; nothing is renormalized.
pub fn apply_reweight(m: &Tensor, columns: &[usize], c: f32, image_rows: Range<usize>) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(PromptError::OutOfRange { index: s.len(), len: 2 });
    }
    let n = s[0];
    if image_rows.end > n || image_rows.start > image_rows.end {
        return Err(PromptError::OutOfRange {
            index: image_rows.end,
            len: n,
        });
    }
    if let Some(&j) = columns.iter().find(|&&j| j >= n) {
        return Err(PromptError::OutOfRange { index: j, len: n });
    }
    let mut data = m.data().to_vec();
    scale_block(&mut data, n, image_rows, columns, c);
    Tensor::new(s.to_vec(), data).map_err(|_| PromptError::OutOfRange { index: 0, len: n })
}

/// Token reweighting request, gated to `0 < t < t_edit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightSpec {
    /// Prompt positions to rescale.
    pub positions: Vec<usize>,
    pub scale: f32,
    pub t_edit: f64,
    /// `None` applies to every block.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub allow_negative: bool,
}

impl ReweightSpec {
    pub fn new(positions: Vec<usize>, scale: f32, t_edit: f64) -> Self {
        Self {
            positions,
            scale,
            t_edit,
            blocks: None,
            allow_negative: false,
        }
    }

    pub fn validate(&self, prompt_len: usize, depth: usize) -> Result<()> {
        if self.scale < 0.0 && !self.allow_negative {
            return Err(PromptError::NegativeScale(self.scale));
        }
        if !self.scale.is_finite() {
            return Err(PromptError::NonFiniteScale(self.scale));
        }
        if let Some(&j) = self.positions.iter().find(|&&j| j >= prompt_len) {
            return Err(PromptError::OutOfRange { index: j, len: prompt_len });
        }
        if let Some(&b) = self.blocks.iter().flatten().find(|&&b| b >= depth) {
            return Err(PromptError::OutOfRange { index: b, len: depth });
        }
        if !(self.t_edit > 0.0 && self.t_edit <= 1.0) {
            return Err(PromptError::Gate(self.t_edit));
        }
        Ok(())
    }

    pub fn target(&self) -> ReweightTarget {
        ReweightTarget {
            positions: self.positions.clone(),
            scale: self.scale,
            blocks: self.blocks.clone(),
        }
    }
}
