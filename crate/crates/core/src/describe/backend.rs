use std::collections::BTreeMap;

use serde::Serialize;

use super::kb::normalize_key;
use super::template::TemplateId;
use super::DescriptionSource;
use crate::error::{Error, Result};

/// Structured inputs behind a filled prompt, for backends that do not parse
/// prompt text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RequestContext {
    pub gloss: String,
    pub passages: Vec<String>,
    pub description: Option<String>,
    pub variant: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GenerationRequest {
    #[serde(rename = "template_id")]
    pub template: TemplateId,
    pub filled_prompt: String,
    #[serde(skip)]
    pub context: RequestContext,
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String>;

    fn source(&self) -> DescriptionSource;
}

/// Deterministic stand-in for a language model.
///
/// Primary descriptions come from an internal gloss→text map (the model's
/// own knowledge), falling back to the best retrieved passage. Synonyms
/// apply a phrase substitution table; refinement and decomposition echo the
/// prepared description.
#[derive(Clone, Debug)]
pub struct MockBackend {
    knowledge: BTreeMap<String, String>,
    substitutions: Vec<(String, Vec<String>)>,
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            knowledge: BTreeMap::new(),
            substitutions: default_substitutions(),
            seed,
        }
    }

    pub fn with_knowledge<I, K, V>(mut self, entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        for (k, v) in entries {
            self.knowledge.insert(normalize_key(k.as_ref()), v.into());
        }
        self
    }

    pub fn with_substitutions(mut self, table: Vec<(String, Vec<String>)>) -> Self {
        self.substitutions = table;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn base_text(&self, ctx: &RequestContext) -> String {
        self.knowledge
            .get(&normalize_key(&ctx.gloss))
            .cloned()
            .unwrap_or_else(|| format!("Perform the sign for \"{}\" with one hand.", ctx.gloss))
    }

    /// Applies the substitution table in one pass; variant `v` picks a
    /// rotation of the alternatives so different variants differ where the
    /// table allows.
    pub fn paraphrase(&self, text: &str, variant: usize) -> String {
        let mut order: Vec<usize> = (0..self.substitutions.len())
            .filter(|&i| !self.substitutions[i].1.is_empty())
            .collect();
        if order.is_empty() {
            return text.to_owned();
        }
        // longest phrases first so multi-word entries win over their words
        order.sort_by_key(|&i| std::cmp::Reverse(self.substitutions[i].0.len()));
        let pattern = order
            .iter()
            .map(|&i| regex::escape(&self.substitutions[i].0))
            .collect::<Vec<_>>()
            .join("|");
        let re = regex::Regex::new(&format!(r"(?i)\b(?:{pattern})\b")).expect("escaped phrases form a valid pattern");
        re.replace_all(text, |c: &regex::Captures<'_>| {
            let matched = &c[0];
            let Some(i) = self
                .substitutions
                .iter()
                .position(|(p, alts)| !alts.is_empty() && p.eq_ignore_ascii_case(matched))
            else {
                return matched.to_owned();
            };
            let alts = &self.substitutions[i].1;
            let pick = &alts[(variant + i + self.seed as usize) % alts.len()];
            match_case(matched, pick)
        })
        .into_owned()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(0)
    }
}

fn match_case(matched: &str, replacement: &str) -> String {
    if matched.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        chars
            .next()
            .map(|f| f.to_uppercase().collect::<String>() + chars.as_str())
            .unwrap_or_default()
    } else {
        replacement.to_owned()
    }
}

fn default_substitutions() -> Vec<(String, Vec<String>)> {
    let table: &[(&str, &[&str])] = &[
        ("palm pushes forward", &["arm extends with palm facing outward", "palm presses outward"]),
        ("raise", &["lift", "bring up"]),
        ("lift", &["raise", "bring up"]),
        ("extend", &["stretch out", "straighten"]),
        ("quickly", &["rapidly", "briskly"]),
        ("slowly", &["gently", "unhurriedly"]),
        ("tap", &["touch lightly", "pat"]),
        ("circle", &["loop", "round path"]),
        ("arc", &["curve", "sweep"]),
        ("move", &["shift", "carry"]),
        ("touch", &["contact", "meet"]),
        ("wide", &["broad", "large"]),
        ("small", &["compact", "narrow"]),
        ("twice", &["two times", "in a double motion"]),
    ];
    table
        .iter()
        .map(|(p, alts)| (p.to_string(), alts.iter().map(|a| a.to_string()).collect()))
        .collect()
}

impl Generator for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        let ctx = &request.context;
        let text = match request.template {
            TemplateId::P1 => match self.knowledge.get(&normalize_key(&ctx.gloss)) {
                Some(t) => t.clone(),
                None => ctx.passages.first().cloned().unwrap_or_else(|| self.base_text(ctx)),
            },
            TemplateId::P2 => self.paraphrase(&self.base_text(ctx), ctx.variant),
            TemplateId::P3 | TemplateId::P4 => ctx.description.clone().ok_or_else(|| Error::Pipeline {
                stage: "backend",
                message: format!("{} request without a description", request.template),
            })?,
        };
        Ok(text)
    }

    fn source(&self) -> DescriptionSource {
        DescriptionSource::Mock
    }
}

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use serde::Deserialize;

    use super::{GenerationRequest, Generator};
    use crate::describe::DescriptionSource;
    use crate::error::{Error, Result};

    #[derive(Deserialize)]
    struct Reply {
        text: String,
    }

    /// JSON-over-HTTP generator: POSTs `{template_id, filled_prompt}` and
    /// expects `{text}` back.
    pub struct HttpBackend {
        agent: ureq::Agent,
        endpoint: String,
        retries: u32,
    }

    impl HttpBackend {
        pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Self {
            let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
            Self {
                agent,
                endpoint: endpoint.into(),
                retries,
            }
        }

        fn attempt(&self, request: &GenerationRequest) -> std::result::Result<String, ureq::Error> {
            let reply: Reply = self.agent.post(&self.endpoint).send_json(request)?.body_mut().read_json()?;
            Ok(reply.text)
        }
    }

    impl Generator for HttpBackend {
        fn generate(&self, request: &GenerationRequest) -> Result<String> {
            let mut last = None;
            for _ in 0..=self.retries {
                match self.attempt(request) {
                    Ok(text) => return Ok(text),
                    Err(e) => last = Some(e),
                }
            }
            Err(Error::Pipeline {
                stage: "backend",
                message: format!(
                    "{} request to {} failed: {}",
                    request.template,
                    self.endpoint,
                    last.map(|e| e.to_string()).unwrap_or_default()
                ),
            })
        }

        fn source(&self) -> DescriptionSource {
            DescriptionSource::Generated
        }
    }
}

#[cfg(feature = "http")]
pub use http::HttpBackend;
