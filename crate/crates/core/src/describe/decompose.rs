use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::backend::{GenerationRequest, Generator, RequestContext};
use super::template::{PromptTemplate, TemplateId};
use super::{DescriptionKind, DescriptionRecord, DescriptionSource};
use crate::error::{Error, Result};
use crate::skeleton::PartId;

static CLAUSE_BREAK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)[.;!?]+[\x22'”’)]*(?:\s+|$)|,\s*(?:and\s+)?then\s+").unwrap());
static ENUMERATOR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\((?:\d+|[ivx]+)\)\s*").unwrap());

const HAND_WORDS: &[&str] = &[
    "hand", "hands", "finger", "fingers", "fingertip", "fingertips", "thumb", "thumbs", "palm", "palms", "wrist",
    "wrists", "fist", "fists", "knuckle", "knuckles", "handshape",
];
const MOUTH_WORDS: &[&str] = &["lip", "lips", "tongue", "mouth", "teeth", "tooth"];
const FACE_WORDS: &[&str] = &[
    "brow", "brows", "eyebrow", "eyebrows", "cheek", "cheeks", "eye", "eyes", "forehead", "nose", "nostril",
    "nostrils", "chin", "face", "temple", "ear", "ears",
];
const BODY_WORDS: &[&str] = &[
    "arm", "arms", "forearm", "forearms", "shoulder", "shoulders", "torso", "chest", "elbow", "elbows", "body",
    "head", "waist", "trunk",
];

/// Keyword rules mapping a clause to the parts it involves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLexicon {
    /// Hand assumed when a clause names a hand without a side.
    pub dominant: PartId,
}

impl Default for PartLexicon {
    fn default() -> Self {
        Self {
            dominant: PartId::RightHand,
        }
    }
}

impl PartLexicon {
    pub fn tag(&self, clause: &str) -> BTreeSet<PartId> {
        let lower = clause.to_lowercase();
        let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        let has = |set: &[&str]| tokens.iter().any(|t| set.contains(t));
        let mut parts = BTreeSet::new();
        if has(MOUTH_WORDS) {
            parts.insert(PartId::Mouth);
        }
        if has(FACE_WORDS) {
            parts.insert(PartId::Face);
        }
        if has(BODY_WORDS) {
            parts.insert(PartId::Body);
        }
        if has(HAND_WORDS) {
            let mut left = false;
            let mut right = false;
            let mut both = false;
            for (i, t) in tokens.iter().enumerate() {
                let next_is_hand = tokens[i + 1..].iter().take(2).any(|n| HAND_WORDS.contains(n));
                match *t {
                    "left" if next_is_hand => left = true,
                    "right" if next_is_hand => right = true,
                    "both" | "two" | "other" | "each" if next_is_hand => both = true,
                    "hands" | "palms" | "fists" | "thumbs" | "wrists" => both = true,
                    _ => {}
                }
            }
            if both || (left && right) {
                parts.insert(PartId::LeftHand);
                parts.insert(PartId::RightHand);
            } else if left {
                parts.insert(PartId::LeftHand);
            } else if right {
                parts.insert(PartId::RightHand);
            } else {
                parts.insert(self.dominant);
            }
        }
        parts
    }
}

/// Clauses split at sentence ends, semicolons and ", then".
pub fn split_clauses(text: &str) -> Vec<String> {
    CLAUSE_BREAK
        .split(text)
        .map(|c| ENUMERATOR.replace(c, "").trim().trim_end_matches([',', ':']).trim().to_owned())
        .filter(|c| c.chars().any(char::is_alphanumeric))
        .collect()
}

fn as_sentence(clause: &str) -> String {
    let mut chars = clause.chars();
    let mut out = match chars.next() {
        Some(f) => f.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    };
    if !out.ends_with(['.', '!', '?']) {
        out.push('.');
    }
    out
}

/// Tags clauses by the lexicon. A clause naming no part continues the
/// previous clause's parts; one with no predecessor is dropped.
fn lexicon_clauses(text: &str, lexicon: &PartLexicon) -> Vec<(BTreeSet<PartId>, String)> {
    let mut out: Vec<(BTreeSet<PartId>, String)> = Vec::new();
    for clause in split_clauses(text) {
        let mut tags = lexicon.tag(&clause);
        if tags.is_empty() {
            match out.last() {
                Some((prev, _)) => tags = prev.clone(),
                None => continue,
            }
        }
        out.push((tags, as_sentence(&clause)));
    }
    out
}

/// Parses `parts: clause` lines from a live backend.
fn parse_tagged_lines(reply: &str) -> Option<Vec<(BTreeSet<PartId>, String)>> {
    let mut out = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (head, clause) = line.split_once(':')?;
        let tags: BTreeSet<PartId> = head
            .split([',', ' '])
            .filter(|t| !t.is_empty())
            .map(|t| t.trim().parse().ok())
            .collect::<Option<_>>()?;
        let clause = clause.trim();
        if tags.is_empty() || clause.is_empty() {
            return None;
        }
        out.push((tags, as_sentence(clause)));
    }
    (!out.is_empty()).then_some(out)
}

/// Part-tagged clauses of a refined description.
///
/// With the mock backend clauses are tagged by the lexicon; live backends
/// are asked for `parts: clause` lines, and unparsable replies fall back to
/// the lexicon. If no clause names a part the whole text is tagged as body.
pub fn decompose_parts(
    refined: &DescriptionRecord,
    backend: &dyn Generator,
    lexicon: &PartLexicon,
) -> Result<Vec<DescriptionRecord>> {
    if refined.kind != DescriptionKind::Refined {
        return Err(Error::Contract(format!("decompose expects a refined record, got {}", refined.kind)));
    }
    let template = PromptTemplate::builtin(TemplateId::P4);
    let request = GenerationRequest {
        template: TemplateId::P4,
        filled_prompt: template.fill(&BTreeMap::from([("description", refined.text.clone())]))?,
        context: RequestContext {
            description: Some(refined.text.clone()),
            ..Default::default()
        },
    };
    let reply = backend.generate(&request)?;
    let mut clauses = match backend.source() {
        DescriptionSource::Mock => None,
        _ => parse_tagged_lines(&reply),
    }
    .unwrap_or_else(|| lexicon_clauses(&reply, lexicon));
    if clauses.is_empty() {
        clauses.push((BTreeSet::from([PartId::Body]), refined.text.clone()));
    }
    Ok(clauses
        .into_iter()
        .map(|(tags, text)| DescriptionRecord {
            class_id: refined.class_id,
            kind: DescriptionKind::Part,
            text,
            parts: tags.into_iter().collect(),
            source: backend.source(),
        })
        .collect())
}
