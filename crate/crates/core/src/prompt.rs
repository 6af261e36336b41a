//! Prompts with annotated subject spans.

use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOCAB_SIZE: usize = 256;
/// Reserved id for padding; never produced by [`tokenize`].
pub const PAD_TOKEN: u32 = 0;

/// Maps a word to a toy-vocabulary id in `1..VOCAB_SIZE` with FNV-1a.
pub fn token_id(word: &str) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % (VOCAB_SIZE as u64 - 1)) as u32 + 1
}

/// Lowercased whitespace words with surrounding punctuation stripped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tokenize(text: &str) -> Vec<u32> {
    words(text).iter().map(|w| token_id(w)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub name: String,
    /// First token, inclusive.
    pub start: usize,
    /// One past the last token.
    pub end: usize,
}

impl SubjectSpan {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    /// Binary mask over `n_text` tokens.
    pub fn token_mask(&self, n_text: usize) -> Vec<bool> {
        (0..n_text).map(|t| self.contains(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub tokens: Vec<u32>,
    pub subjects: Vec<SubjectSpan>,
}

impl PromptSpec {
    pub fn new(text: impl Into<String>, subjects: Vec<SubjectSpan>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        Self::from_tokens(text, tokens, subjects)
    }

    pub fn from_tokens(text: String, tokens: Vec<u32>, subjects: Vec<SubjectSpan>) -> Result<Self> {
        let spec = Self {
            text,
            tokens,
            subjects,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks token ids and span invariants. Zero subjects is accepted here
    /// and means "no constraint"; user-facing layout files require at least one.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::arg("prompt has no tokens"));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Vocabulary {
                id,
                vocab: VOCAB_SIZE,
            });
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.start >= s.end {
                return Err(Error::arg(format!("subject {i} has an empty span")));
            }
            if s.end > self.tokens.len() {
                return Err(Error::arg(format!(
                    "subject {i} span [{}, {}) exceeds {} tokens",
                    s.start,
                    s.end,
                    self.tokens.len()
                )));
            }
            for (j, o) in self.subjects.iter().enumerate().take(i) {
                if s.start < o.end && o.start < s.end {
                    return Err(Error::arg(format!("subject spans {j} and {i} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn n_text(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_tokens(&self, i: usize) -> &[u32] {
        let s = &self.subjects[i];
        &self.tokens[s.start..s.end]
    }

    pub fn token_masks(&self) -> Vec<Vec<bool>> {
        self.subjects
            .iter()
            .map(|s| s.token_mask(self.n_text()))
            .collect()
    }
}

/// Arithmetic mean of rows `span.start..span.end`.
pub fn pool_span(emb: &Tensor, span: &SubjectSpan) -> Result<Vec<f64>> {
    if span.is_empty() {
        return Err(Error::arg("cannot pool an empty span"));
    }
    if span.end > emb.rows() {
        return Err(Error::arg(format!(
            "span [{}, {}) exceeds {} rows",
            span.start,
            span.end,
            emb.rows()
        )));
    }
    pool_rows(emb, span.start, span.end)
}

pub(crate) fn pool_rows(emb: &Tensor, start: usize, end: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; emb.cols()];
    for r in start..end {
        for (a, v) in acc.iter_mut().zip(emb.row(r)) {
            *a += v;
        }
    }
    let n = (end - start) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Full-prompt embeddings plus per-subject anchors and their pooled forms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub prompt: Tensor,
    pub anchors: Vec<Tensor>,
    pub pooled_prompt: Vec<Vec<f64>>,
    pub pooled_anchors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn build(encoder: &TextEncoder, spec: &PromptSpec) -> Result<Self> {
        let prompt = encoder.encode_prompt(spec)?;
        let anchors = encoder.encode_anchors(spec)?;
        let pooled_prompt = spec
            .subjects
            .iter()
            .map(|s| pool_span(&prompt, s))
            .collect::<Result<Vec<_>>>()?;
        let pooled_anchors = anchors
            .iter()
            .map(|a| pool_rows(a, 0, a.rows()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt,
            anchors,
            pooled_prompt,
            pooled_anchors,
        })
    }

    pub fn dim(&self) -> usize {
        self.prompt.cols()
    }
}
