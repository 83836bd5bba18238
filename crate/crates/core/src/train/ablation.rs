use rayon::prelude::*;

use super::config::{ContrastiveTerms, TrainConfig};
use super::trainer::{train, ClassTexts, RunMetrics};
use super::synth::Dataset;
use crate::error::{Error, Result};

/// Row name and the alignment terms it enables.
pub const ABLATION_ROWS: [(&str, ContrastiveTerms); 5] = [
    ("baseline", ContrastiveTerms::NONE),
    (
        "+synonym",
        ContrastiveTerms {
            global: false,
            synonym: true,
            parts: false,
        },
    ),
    (
        "+prompt",
        ContrastiveTerms {
            global: true,
            synonym: false,
            parts: false,
        },
    ),
    (
        "+multipart",
        ContrastiveTerms {
            global: false,
            synonym: false,
            parts: true,
        },
    ),
    ("all", ContrastiveTerms::ALL),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub terms: ContrastiveTerms,
    pub metrics: RunMetrics,
}

/// Trains one model per ablation row with otherwise identical settings.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, texts: &ClassTexts) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .par_iter()
        .map(|&(name, terms)| {
            let config = TrainConfig {
                terms,
                ..base.clone()
            };
            let outcome = train(&config, data, texts)?;
            Ok(AblationRow {
                name: name.to_owned(),
                terms,
                metrics: outcome.metrics,
            })
        })
        .collect()
}

/// One line per row with the final-epoch metrics.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "row",
        "global",
        "synonym",
        "parts",
        "loss_cls",
        "loss_con_multi",
        "loss_total",
        "train_top1",
        "eval_top1",
        "eval_top5",
    ])?;
    for r in rows {
        let last = r
            .metrics
            .last()
            .ok_or_else(|| Error::Evaluation(format!("ablation row {} has no epochs", r.name)))?;
        w.write_record([
            r.name.clone(),
            r.terms.global.to_string(),
            r.terms.synonym.to_string(),
            r.terms.parts.to_string(),
            last.loss_cls.to_string(),
            last.loss_con_multi.to_string(),
            last.loss_total.to_string(),
            last.train_top1.to_string(),
            last.eval_top1.to_string(),
            last.eval_top5.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
