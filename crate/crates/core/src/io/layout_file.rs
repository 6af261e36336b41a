//! Planner output: a prompt, the token grid and per-subject boxes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutBox, TokenGrid};
use crate::prompt::{tokenize, PromptSpec, SubjectSpan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub name: String,
    /// Half-open token range `[start, end)`.
    pub token_span: [usize; 2],
    pub boxes: Vec<LayoutBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub prompt: String,
    pub grid: TokenGrid,
    pub subjects: Vec<SubjectEntry>,
}

impl LayoutFile {
    /// Parses and validates; errors carry the JSON path of the offending value.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let file: LayoutFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::format(if path == "." { "$".into() } else { path }, e.into_inner().to_string())
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid
            .validate()
            .map_err(|e| Error::format("grid", e.to_string()))?;
        let n_tokens = tokenize(&self.prompt).len();
        if n_tokens == 0 {
            return Err(Error::format("prompt", "prompt has no words"));
        }
        if self.subjects.is_empty() {
            return Err(Error::format("subjects", "at least one subject is required"));
        }
        let mut names = HashSet::new();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.name.is_empty() {
                return Err(Error::format(format!("subjects[{i}].name"), "name is empty"));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::format(
                    format!("subjects[{i}].name"),
                    format!("duplicate subject name {:?}", s.name),
                ));
            }
            let [start, end] = s.token_span;
            if start >= end || end > n_tokens {
                return Err(Error::format(
                    format!("subjects[{i}].token_span"),
                    format!("[{start}, {end}) is not a non-empty range within the {n_tokens} prompt tokens"),
                ));
            }
            if let Some(j) = self.subjects[..i]
                .iter()
                .position(|o| start < o.token_span[1] && o.token_span[0] < end)
            {
                return Err(Error::format(
                    format!("subjects[{i}].token_span"),
                    format!("span overlaps subjects[{j}].token_span"),
                ));
            }
            if s.boxes.is_empty() {
                return Err(Error::format(format!("subjects[{i}].boxes"), "at least one box is required"));
            }
            for (b, bx) in s.boxes.iter().enumerate() {
                bx.validate(self.grid.frames)
                    .map_err(|(field, reason)| Error::format(format!("subjects[{i}].boxes[{b}].{field}"), reason))?;
            }
        }
        Ok(())
    }

    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        let spans = self
            .subjects
            .iter()
            .map(|s| SubjectSpan::new(s.name.clone(), s.token_span[0], s.token_span[1]))
            .collect();
        PromptSpec::new(self.prompt.clone(), spans)
    }

    pub fn prior_layout(&self) -> Vec<Vec<LayoutBox>> {
        self.subjects.iter().map(|s| s.boxes.clone()).collect()
    }

    pub fn subject_names(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.name.clone()).collect()
    }
}
