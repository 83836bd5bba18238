use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

use super::backend::{GenerationRequest, Generator, RequestContext};
use super::kb::{normalize_key, KnowledgeBase};
use super::template::{PromptTemplate, TemplateId};
use super::{DescriptionKind, DescriptionRecord};
use crate::error::{Error, Result};

/// Passes of reference resolution; passages may themselves refer to signs.
const MAX_DEPTH: usize = 4;

const OPEN_QUOTE: &str = r#"["'“‘]"#;
const CLOSE_QUOTE: &str = r#"["'”’]"#;
const NAME: &str = r#"([^"'“”‘’]{1,40})"#;

static SIGN_REFERENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)\b(?:(?:make|makes|making|use|uses|using|form|forms|forming|do|does|perform|performs)\s+)?the\s+(manual\s+)?sign\s+(?:for\s+|of\s+)?{OPEN_QUOTE}{NAME}{CLOSE_QUOTE}"
    ))
    .unwrap()
});

static HANDSHAPE_REFERENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)\b(?:(?:use|uses|using|with|form|forms|forming|make|makes)\s+)?(?:the|a|an)\s+{OPEN_QUOTE}{NAME}{CLOSE_QUOTE}\s+hand\s?shape"
    ))
    .unwrap()
});

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{Alphabetic}\p{N}]+").unwrap());

/// A span of text that names another sign instead of describing it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reference {
    pub start: usize,
    pub end: usize,
    pub name: String,
    /// Manual-alphabet sign or handshape rather than a lexical sign.
    pub manual: bool,
}

/// All non-overlapping references in text order.
pub fn find_references(text: &str) -> Vec<Reference> {
    let mut refs: Vec<Reference> = SIGN_REFERENCE
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            Reference {
                start: m.start(),
                end: m.end(),
                name: c[2].trim().to_owned(),
                manual: c.get(1).is_some(),
            }
        })
        .collect();
    for c in HANDSHAPE_REFERENCE.captures_iter(text) {
        let m = c.get(0).unwrap();
        if refs.iter().all(|r| m.end() <= r.start || m.start() >= r.end) {
            refs.push(Reference {
                start: m.start(),
                end: m.end(),
                name: c[1].trim().to_owned(),
                manual: true,
            });
        }
    }
    refs.sort_by_key(|r| r.start);
    refs
}

/// Sentences with their terminal punctuation and closing quotes.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        current.push(c);
        i += 1;
        if matches!(c, '.' | '!' | '?') {
            while i < chars.len() && matches!(chars[i], '"' | '\'' | '”' | '’' | ')') {
                current.push(chars[i]);
                i += 1;
            }
            if i >= chars.len() || chars[i].is_whitespace() {
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_owned());
                }
                current.clear();
            }
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_owned());
    }
    out
}

/// Drops sentences that explain meaning or wording rather than movement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonActionFilter {
    phrases: Vec<String>,
}

impl Default for NonActionFilter {
    fn default() -> Self {
        Self::new([
            "homophonous",
            "homophone",
            "homophonic",
            "represents agreement",
            "represents",
            "symbolizes",
            "symbolises",
            "meaning",
            "means",
            "is derived from",
            "originates from",
        ])
    }
}

impl NonActionFilter {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(phrases: I) -> Self {
        Self {
            phrases: phrases
                .into_iter()
                .map(|p| normalize_key(p.as_ref()))
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn is_non_action(&self, sentence: &str) -> bool {
        let padded = format!(" {} ", normalize_key(sentence));
        self.phrases.iter().any(|p| padded.contains(&format!(" {p} ")))
    }

    /// Returns the kept text and the number of dropped sentences.
    pub fn apply(&self, text: &str) -> (String, usize) {
        let sentences = split_sentences(text);
        let total = sentences.len();
        let kept: Vec<String> = sentences.into_iter().filter(|s| !self.is_non_action(s)).collect();
        let dropped = total - kept.len();
        (kept.join(" "), dropped)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefineOutcome {
    pub record: DescriptionRecord,
    pub substitutions: usize,
    pub warnings: Vec<String>,
}

fn starts_sentence(prefix: &str) -> bool {
    let t = prefix.trim_end();
    t.is_empty() || t.ends_with(['.', '!', '?', ':', ')'])
}

/// Passage text shaped to stand in for a reference inside a sentence.
fn splice_text(prefix: &str, passage: &str) -> (usize, String) {
    let body = passage.trim().trim_end_matches('.').trim_end();
    // absorb words the passage repeats from right before the reference,
    // e.g. "One hand forms the manual sign Q" + "One hand with ..."
    let prefix_words: Vec<(usize, String)> = WORD
        .find_iter(prefix)
        .map(|m| (m.start(), m.as_str().to_lowercase()))
        .collect();
    let body_words: Vec<String> = WORD.find_iter(body).take(4).map(|m| m.as_str().to_lowercase()).collect();
    let mut cut = prefix.len();
    for k in (1..=body_words.len().min(prefix_words.len())).rev() {
        let tail = &prefix_words[prefix_words.len() - k..];
        let tail_end = {
            let (s, w) = &tail[k - 1];
            s + w.len()
        };
        if prefix[tail_end..].trim().is_empty() && tail.iter().map(|(_, w)| w).eq(body_words[..k].iter()) {
            cut = tail[0].0;
            break;
        }
    }
    let mut text = body.to_owned();
    if cut == prefix.len() && !starts_sentence(prefix) {
        let mut chars = text.chars();
        if let (Some(first), Some(second)) = (chars.next(), chars.clone().next()) {
            if first.is_uppercase() && second.is_lowercase() {
                text = first.to_lowercase().collect::<String>() + chars.as_str();
            }
        }
    }
    (cut, text)
}

/// Replaces resolvable references with knowledge-base passages.
///
/// Unresolvable references stay verbatim and produce one warning each.
fn resolve_references(text: &str, kb: &KnowledgeBase) -> (String, usize, Vec<String>) {
    let mut current = text.to_owned();
    let mut substitutions = 0;
    let mut unresolved = BTreeSet::new();
    for depth in 0..=MAX_DEPTH {
        let refs = find_references(&current);
        let (hits, misses): (Vec<_>, Vec<_>) = refs.into_iter().partition(|r| kb.lookup(&r.name).is_some());
        unresolved.extend(misses.into_iter().map(|r| r.name));
        if hits.is_empty() {
            break;
        }
        if depth == MAX_DEPTH {
            unresolved.extend(hits.into_iter().map(|r| format!("{} (nesting limit)", r.name)));
            break;
        }
        let mut next = String::with_capacity(current.len());
        let mut last = 0;
        for r in &hits {
            let passage = kb.lookup(&r.name).expect("partitioned on lookup");
            let (cut, body) = splice_text(&current[last..r.start], &passage.text);
            next.push_str(&current[last..last + cut]);
            next.push_str(&body);
            last = r.end;
        }
        next.push_str(&current[last..]);
        substitutions += hits.len();
        current = next;
    }
    let warnings = unresolved
        .into_iter()
        .map(|name| format!("unresolved sign reference {name:?}"))
        .collect();
    (current, substitutions, warnings)
}

fn squash_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reference resolution, non-action filtering and a refinement request.
///
/// Returns the refined text, the substitution count and warnings.
pub(crate) fn refine_text(
    text: &str,
    kb: &KnowledgeBase,
    backend: &dyn Generator,
    filter: &NonActionFilter,
    gloss: &str,
) -> Result<(String, usize, Vec<String>)> {
    let (resolved, substitutions, warnings) = resolve_references(text, kb);
    let (kept, _) = filter.apply(&squash_whitespace(&resolved));
    let template = PromptTemplate::builtin(TemplateId::P3);
    let request = GenerationRequest {
        template: TemplateId::P3,
        filled_prompt: template.fill(&BTreeMap::from([("description", kept.clone())]))?,
        context: RequestContext {
            gloss: gloss.to_owned(),
            description: Some(kept),
            ..Default::default()
        },
    };
    let generated = backend.generate(&request)?;
    let (out, _) = filter.apply(&squash_whitespace(&generated));
    if out.is_empty() {
        return Err(Error::Pipeline {
            stage: "refine",
            message: format!("nothing left of {text:?} after filtering"),
        });
    }
    Ok((out, substitutions, warnings))
}

pub fn refine(
    primary: &DescriptionRecord,
    kb: &KnowledgeBase,
    backend: &dyn Generator,
    filter: &NonActionFilter,
) -> Result<RefineOutcome> {
    if primary.kind != DescriptionKind::Primary {
        return Err(Error::Contract(format!("refine expects a primary record, got {}", primary.kind)));
    }
    let (text, substitutions, warnings) = refine_text(&primary.text, kb, backend, filter, "")?;
    Ok(RefineOutcome {
        record: DescriptionRecord::new(primary.class_id, DescriptionKind::Refined, text, backend.source()),
        substitutions,
        warnings,
    })
}
