use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backend::{GenerationRequest, Generator, RequestContext};
use super::decompose::{decompose_parts, PartLexicon};
use super::kb::KnowledgeBase;
use super::refine::{refine, NonActionFilter};
use super::template::{PromptTemplate, TemplateId};
use super::{DescriptionKind, DescriptionRecord, SignEntry};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Passages injected into the primary prompt.
    pub top_k: usize,
    pub synonyms: usize,
    pub filter: NonActionFilter,
    pub lexicon: PartLexicon,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            synonyms: 2,
            filter: NonActionFilter::default(),
            lexicon: PartLexicon::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineWarning {
    pub class_id: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineOutput {
    pub records: Vec<DescriptionRecord>,
    pub warnings: Vec<PipelineWarning>,
}

impl PipelineOutput {
    /// Texts of one kind grouped by class.
    pub fn texts_by_class(&self, kind: DescriptionKind) -> BTreeMap<usize, Vec<&DescriptionRecord>> {
        let mut out: BTreeMap<usize, Vec<&DescriptionRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.kind == kind) {
            out.entry(r.class_id).or_default().push(r);
        }
        out
    }
}

fn stage_error(stage: &'static str, entry: &SignEntry, e: Error) -> Error {
    match e {
        Error::Pipeline { .. } => e,
        other => Error::Pipeline {
            stage,
            message: format!("class {} ({}): {other}", entry.class_id, entry.gloss),
        },
    }
}

pub fn generate_primary(entry: &SignEntry, kb: &KnowledgeBase, backend: &dyn Generator, top_k: usize) -> Result<DescriptionRecord> {
    let hits = kb.retrieve(&entry.gloss, top_k)?;
    let passages: Vec<String> = hits
        .iter()
        .map(|h| {
            let p = kb.get(h.index).expect("retrieved index is in range");
            format!("{}: {}", p.key, p.text)
        })
        .collect();
    let bodies: Vec<String> = hits.iter().map(|h| kb.get(h.index).expect("in range").text.clone()).collect();
    let listing = if passages.is_empty() {
        "(none found)".to_owned()
    } else {
        passages.iter().map(|p| format!("- {p}")).collect::<Vec<_>>().join("\n")
    };
    let template = PromptTemplate::builtin(TemplateId::P1);
    let request = GenerationRequest {
        template: TemplateId::P1,
        filled_prompt: template.fill(&BTreeMap::from([("gloss", entry.gloss.clone()), ("passages", listing)]))?,
        context: RequestContext {
            gloss: entry.gloss.clone(),
            passages: bodies,
            ..Default::default()
        },
    };
    let text = backend.generate(&request).map_err(|e| stage_error("primary", entry, e))?;
    nonempty(entry, DescriptionKind::Primary, text, backend)
}

pub fn generate_synonyms(entry: &SignEntry, backend: &dyn Generator, count: usize) -> Result<Vec<DescriptionRecord>> {
    let template = PromptTemplate::builtin(TemplateId::P2);
    (0..count)
        .map(|variant| {
            let request = GenerationRequest {
                template: TemplateId::P2,
                filled_prompt: template
                    .fill(&BTreeMap::from([("gloss", entry.gloss.clone()), ("variant", (variant + 1).to_string())]))?,
                context: RequestContext {
                    gloss: entry.gloss.clone(),
                    variant,
                    ..Default::default()
                },
            };
            let text = backend.generate(&request).map_err(|e| stage_error("synonym", entry, e))?;
            nonempty(entry, DescriptionKind::Synonym, text, backend)
        })
        .collect()
}

fn nonempty(entry: &SignEntry, kind: DescriptionKind, text: String, backend: &dyn Generator) -> Result<DescriptionRecord> {
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err(Error::Pipeline {
            stage: if kind == DescriptionKind::Primary { "primary" } else { "synonym" },
            message: format!("empty {kind} text for class {}", entry.class_id),
        });
    }
    Ok(DescriptionRecord::new(entry.class_id, kind, text, backend.source()))
}

fn run_one(
    entry: &SignEntry,
    kb: &KnowledgeBase,
    backend: &dyn Generator,
    config: &PipelineConfig,
) -> Result<(Vec<DescriptionRecord>, Vec<PipelineWarning>)> {
    let primary = generate_primary(entry, kb, backend, config.top_k)?;
    let synonyms = generate_synonyms(entry, backend, config.synonyms)?;
    let refined = refine(&primary, kb, backend, &config.filter).map_err(|e| stage_error("refine", entry, e))?;
    let parts =
        decompose_parts(&refined.record, backend, &config.lexicon).map_err(|e| stage_error("decompose", entry, e))?;
    let warnings = refined
        .warnings
        .into_iter()
        .map(|message| PipelineWarning {
            class_id: entry.class_id,
            message,
        })
        .collect();
    let mut records = vec![primary];
    records.extend(synonyms);
    records.push(refined.record);
    records.extend(parts);
    Ok((records, warnings))
}

/// Runs all four stages for every sign, in corpus order.
pub fn run_pipeline(
    corpus: &[SignEntry],
    kb: &KnowledgeBase,
    backend: &dyn Generator,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    if config.synonyms == 0 {
        return Err(Error::Parameter("at least one synonym per sign is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in corpus {
        if !seen.insert(e.class_id) {
            return Err(Error::Format(format!("duplicate class id {} in corpus", e.class_id)));
        }
    }
    let per_sign: Vec<_> = corpus.par_iter().map(|e| run_one(e, kb, backend, config)).collect::<Result<_>>()?;
    let mut out = PipelineOutput::default();
    for (records, warnings) in per_sign {
        out.records.extend(records);
        out.warnings.extend(warnings);
    }
    Ok(out)
}

pub fn write_records(records: &[DescriptionRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<DescriptionRecord>> {
    let records: Vec<DescriptionRecord> = read_jsonl(reader)?;
    for r in &records {
        r.check()?;
    }
    Ok(records)
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<SignEntry>> {
    read_jsonl(reader)
}

#[cfg(test)]
mod tests {
    use super::super::{DescriptionSource, MockBackend};
    use super::*;
    use crate::skeleton::PartId;

    fn corpus() -> Vec<SignEntry> {
        ["devoted", "ambience", "thank you", "agree", "unknown-gloss"]
            .iter()
            .enumerate()
            .map(|(i, g)| SignEntry {
                class_id: i,
                gloss: (*g).into(),
            })
            .collect()
    }

    fn mock() -> MockBackend {
        MockBackend::new(7).with_knowledge([
            ("devoted", "Devoted: (I) Make the sign for \"love\". (II) Extend the thumb with one hand and place it on the palm of the other hand, then raise it upwards."),
            ("agree", "Make the sign for \"agree\"."),
        ])
    }

    #[test]
    fn every_sign_gets_every_kind() {
        let out = run_pipeline(&corpus(), &KnowledgeBase::reference(), &mock(), &PipelineConfig::default()).unwrap();
        for kind in DescriptionKind::ALL {
            let by = out.texts_by_class(kind);
            assert_eq!(by.len(), 5, "{kind}");
        }
        for r in &out.records {
            r.check().unwrap();
            assert!(r.parts.iter().all(|p| PartId::ALL.contains(p)));
            assert_eq!(r.source, DescriptionSource::Mock);
        }
        let refined = out.texts_by_class(DescriptionKind::Refined);
        assert!(refined[&0][0].text.contains("Gently caress the back of the thumb"));
        assert!(!refined[&3][0].text.contains("represents"));
    }

    #[test]
    fn byte_identical_output() {
        let kb = KnowledgeBase::reference();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let cfg = PipelineConfig::default();
        write_records(&run_pipeline(&corpus(), &kb, &mock(), &cfg).unwrap().records, &mut a).unwrap();
        write_records(&run_pipeline(&corpus(), &kb, &mock(), &cfg).unwrap().records, &mut b).unwrap();
        assert_eq!(a, b);
        let back = read_records(a.as_slice()).unwrap();
        let mut c = Vec::new();
        write_records(&back, &mut c).unwrap();
        assert_eq!(a, c);
        let line = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        assert!(line.starts_with(r#"{"class_id":0,"kind":"primary","text":"#));
    }

    #[test]
    fn rejects_duplicate_ids_and_zero_synonyms() {
        let kb = KnowledgeBase::reference();
        let mut c = corpus();
        c[1].class_id = 0;
        assert!(run_pipeline(&c, &kb, &mock(), &PipelineConfig::default()).is_err());
        let cfg = PipelineConfig {
            synonyms: 0,
            ..Default::default()
        };
        assert!(run_pipeline(&corpus(), &kb, &mock(), &cfg).is_err());
    }

    #[test]
    fn corpus_jsonl() {
        let c = read_corpus("{\"class_id\":3,\"gloss\":\"love\"}\n\n".as_bytes()).unwrap();
        assert_eq!(c, vec![SignEntry { class_id: 3, gloss: "love".into() }]);
    }
}
