//! Description generation for sign classes.
//!
//! Four stages run per sign: a retrieval-grounded primary description, a set
//! of synonym variants, a refined description with cross-references to other
//! signs replaced by expert passages, and part-tagged clauses obtained by
//! decomposing the refined text.

mod backend;
mod decompose;
mod kb;
mod pipeline;
mod refine;
mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::skeleton::PartId;

#[cfg(feature = "http")]
pub use backend::HttpBackend;
pub use backend::{GenerationRequest, Generator, MockBackend, RequestContext};
pub use decompose::{decompose_parts, split_clauses, PartLexicon};
pub use kb::{normalize_key, KnowledgeBase, Passage, Retrieved};
pub use pipeline::{
    generate_primary, generate_synonyms, read_corpus, read_records, run_pipeline, write_records,
    PipelineConfig, PipelineOutput, PipelineWarning,
};
pub use refine::{find_references, refine, split_sentences, NonActionFilter, Reference, RefineOutcome};
pub use template::{PromptTemplate, TemplateId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignEntry {
    pub class_id: usize,
    pub gloss: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionKind {
    Primary,
    Synonym,
    Refined,
    Part,
}

impl DescriptionKind {
    pub const ALL: [DescriptionKind; 4] = [Self::Primary, Self::Synonym, Self::Refined, Self::Part];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Primary => "primary",
            Self::Synonym => "synonym",
            Self::Refined => "refined",
            Self::Part => "part",
        }
    }
}

impl fmt::Display for DescriptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Generated,
    Expert,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub class_id: usize,
    pub kind: DescriptionKind,
    pub text: String,
    /// Non-empty exactly for part records.
    pub parts: Vec<PartId>,
    pub source: DescriptionSource,
}

impl DescriptionRecord {
    pub fn new(class_id: usize, kind: DescriptionKind, text: impl Into<String>, source: DescriptionSource) -> Self {
        Self {
            class_id,
            kind,
            text: text.into(),
            parts: Vec::new(),
            source,
        }
    }

    pub fn check(&self) -> crate::Result<()> {
        if self.text.trim().is_empty() {
            return Err(crate::Error::Format(format!("empty {} text for class {}", self.kind, self.class_id)));
        }
        if (self.kind == DescriptionKind::Part) == self.parts.is_empty() {
            return Err(crate::Error::Format(format!(
                "{} record for class {} has {} part tags",
                self.kind,
                self.class_id,
                self.parts.len()
            )));
        }
        Ok(())
    }
}
