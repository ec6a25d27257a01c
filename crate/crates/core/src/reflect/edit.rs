//! Numbered-principle prompts and the structured edits applied to them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A system prompt split into free-form preamble and numbered principles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub preamble: String,
    pub principles: Vec<String>,
}

/// Parses `N. text` (any number, any spacing); returns the text.
fn numbered(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = t[digits..].strip_prefix('.')?;
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some(rest.trim())
}

impl SystemPrompt {
    /// Lines before the first numbered line form the preamble. Unnumbered
    /// lines after it continue the previous principle.
    pub fn parse(text: &str) -> Self {
        let mut preamble = Vec::new();
        let mut principles: Vec<String> = Vec::new();
        for line in text.lines() {
            match (numbered(line), principles.last_mut()) {
                (Some(p), _) => principles.push(p.to_string()),
                (None, Some(last)) if !line.trim().is_empty() => {
                    last.push(' ');
                    last.push_str(line.trim());
                }
                (None, Some(_)) => {}
                (None, None) => preamble.push(line),
            }
        }
        Self {
            preamble: preamble.join("\n").trim_end().to_string(),
            principles,
        }
    }

    pub fn apply(&self, script: &EditScript) -> Result<SystemPrompt, EditError> {
        let mut principles = self.principles.clone();
        for (pos, edit) in script.edits.iter().enumerate() {
            let fail = |kind| EditError { edit: pos, kind };
            let text = edit.text().trim();
            if text.is_empty() {
                return Err(fail(EditErrorKind::EmptyText));
            }
            if text.contains('\n') {
                return Err(fail(EditErrorKind::Multiline));
            }
            let check = |i: usize, len: usize| {
                if i < len {
                    Ok(())
                } else {
                    Err(fail(EditErrorKind::OutOfRange { index: i, len }))
                }
            };
            match edit {
                Edit::Add { .. } => principles.push(text.to_string()),
                Edit::Modify { index, .. } => {
                    check(*index, principles.len())?;
                    principles[*index] = text.to_string();
                }
                Edit::Merge { indices, .. } => {
                    if indices.len() < 2 {
                        return Err(fail(EditErrorKind::MergeTooFew(indices.len())));
                    }
                    let mut sorted = indices.clone();
                    sorted.sort_unstable();
                    if sorted.windows(2).any(|w| w[0] == w[1]) {
                        return Err(fail(EditErrorKind::DuplicateMergeIndex));
                    }
                    for &i in &sorted {
                        check(i, principles.len())?;
                    }
                    for &i in sorted.iter().rev() {
                        principles.remove(i);
                    }
                    principles.push(text.to_string());
                }
            }
        }
        Ok(SystemPrompt {
            preamble: self.preamble.clone(),
            principles,
        })
    }
}

impl fmt::Display for SystemPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        if !self.preamble.is_empty() {
            f.write_str(&self.preamble)?;
            first = false;
        }
        for (i, p) in self.principles.iter().enumerate() {
            if !first {
                f.write_str("\n")?;
            }
            write!(f, "{}. {p}", i + 1)?;
            first = false;
        }
        Ok(())
    }
}

/// Indices are 0-based positions in the principle list at the moment the
/// edit is applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    Add { text: String },
    Modify { index: usize, text: String },
    Merge { indices: Vec<usize>, text: String },
}

impl Edit {
    pub fn text(&self) -> &str {
        match self {
            Edit::Add { text } | Edit::Modify { text, .. } | Edit::Merge { text, .. } => text,
        }
    }

    /// Principle indices the edit reads.
    pub fn indices(&self) -> &[usize] {
        match self {
            Edit::Add { .. } => &[],
            Edit::Modify { index, .. } => std::slice::from_ref(index),
            Edit::Merge { indices, .. } => indices,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

impl EditScript {
    pub fn new(edits: Vec<Edit>) -> Self {
        Self { edits }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("edit #{edit}: {kind}")]
pub struct EditError {
    /// Position of the offending edit in the script.
    pub edit: usize,
    pub kind: EditErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditErrorKind {
    #[error("principle index {index} out of range for {len} principles")]
    OutOfRange { index: usize, len: usize },
    #[error("merge needs at least two indices, got {0}")]
    MergeTooFew(usize),
    #[error("merge lists an index twice")]
    DuplicateMergeIndex,
    #[error("principle text is empty")]
    EmptyText,
    #[error("principle text spans several lines")]
    Multiline,
}

/// Applies `script` to a prompt's numbered principles and renders the
/// result with contiguous numbering.
pub fn apply_edits(prompt_text: &str, script: &EditScript) -> Result<String, EditError> {
    Ok(SystemPrompt::parse(prompt_text).apply(script)?.to_string())
}
