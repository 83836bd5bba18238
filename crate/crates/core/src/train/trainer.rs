use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::synth::Dataset;
use crate::contrastive::{contrastive_term, multipart_term, total_term};
use crate::describe::{DescriptionKind, DescriptionRecord};
use crate::error::{Error, Result};
use crate::numerics::{ops, Tape, Tensor, Var};
use crate::skeleton::{Heads, InputNorm, PartId, SkeletonBatch, SkeletonEncoder, SkeletonSequence, Stream};
use crate::text_encoder;

/// Seed of the frozen text encoder, shared by every run.
pub const TEXT_ENCODER_SEED: u64 = 0x7e47_5eed;

const EVAL_BATCH: usize = 32;

/// Description strings grouped by class and kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassTexts {
    refined: BTreeMap<usize, Vec<String>>,
    synonyms: BTreeMap<usize, Vec<String>>,
    parts: BTreeMap<usize, BTreeMap<PartId, Vec<String>>>,
}

impl ClassTexts {
    pub fn from_records(records: &[DescriptionRecord]) -> Self {
        let mut out = Self::default();
        for r in records {
            match r.kind {
                DescriptionKind::Refined => out.refined.entry(r.class_id).or_default().push(r.text.clone()),
                DescriptionKind::Synonym => out.synonyms.entry(r.class_id).or_default().push(r.text.clone()),
                DescriptionKind::Part => {
                    for &p in &r.parts {
                        out.parts
                            .entry(r.class_id)
                            .or_default()
                            .entry(p)
                            .or_default()
                            .push(r.text.clone());
                    }
                }
                DescriptionKind::Primary => {}
            }
        }
        out
    }

    pub fn refined(&self, class: usize) -> &[String] {
        self.refined.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn synonyms(&self, class: usize) -> &[String] {
        self.synonyms.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Part-tagged clauses of `class` mentioning `part`; a clause tagged with
    /// several parts appears under each.
    pub fn part(&self, class: usize, part: PartId) -> &[String] {
        self.parts
            .get(&class)
            .and_then(|m| m.get(&part))
            .map_or(&[], Vec::as_slice)
    }

    /// Fails when a class lacks a refined or synonym text.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        for c in 0..num_classes {
            if self.refined(c).is_empty() || self.synonyms(c).is_empty() {
                return Err(Error::Config(format!("class {c} has no refined or synonym description")));
            }
        }
        Ok(())
    }
}

/// Frozen text features, optionally memoized.
struct TextBank {
    dim: usize,
    cache: Option<HashMap<String, Vec<f64>>>,
}

impl TextBank {
    fn new(dim: usize, cache: bool) -> Self {
        Self {
            dim,
            cache: cache.then(HashMap::new),
        }
    }

    fn matrix(&mut self, texts: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.dim);
        for &t in texts {
            match &mut self.cache {
                Some(cache) => {
                    if !cache.contains_key(t) {
                        let f = text_encoder::encode_text(t, self.dim, TEXT_ENCODER_SEED)?;
                        cache.insert(t.to_owned(), f.vector.into_data());
                    }
                    data.extend_from_slice(&cache[t]);
                }
                None => data.extend_from_slice(
                    text_encoder::encode_text(t, self.dim, TEXT_ENCODER_SEED)?.vector.data(),
                ),
            }
        }
        Tensor::matrix(texts.len(), self.dim, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_con_multi: f64,
    pub loss_total: f64,
    pub train_top1: f64,
    pub eval_top1: f64,
    pub eval_top5: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Accuracy of the fused streams, when several were trained.
    pub fused_top1: Option<f64>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub top1: f64,
    pub top5: f64,
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

impl Evaluation {
    /// Per-sample class probabilities.
    pub fn scores(&self) -> Result<Tensor> {
        ops::softmax(&self.logits, 1, 1.0)
    }
}

pub struct TrainOutcome {
    pub model: SkeletonEncoder,
    pub metrics: RunMetrics,
    /// Evaluation of the final model on the test split.
    pub evaluation: Evaluation,
}

/// Applies the configured input stream to every sequence.
pub fn prepare_stream(seqs: &[SkeletonSequence], stream: Stream, data: &Dataset) -> Result<Vec<SkeletonSequence>> {
    seqs.iter().map(|s| stream.apply(s, &data.layout)).collect()
}

/// Fraction of rows whose label ranks within the top `k` logits; ties rank
/// the lower class id first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() || rows == 0 {
        return Err(Error::Shape(format!("{rows} logit rows for {} labels", labels.len())));
    }
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        let row = logits.row(r);
        let rank = (0..classes)
            .filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

fn argmax_low_id(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Top-1/top-5 of the classifier head. Only the global path runs.
pub fn evaluate(model: &SkeletonEncoder, test: &[SkeletonSequence]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    let classes = model.config().num_classes;
    let mut data = Vec::with_capacity(test.len() * classes);
    let mut labels = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let batch = SkeletonBatch::from_sequences(chunk)?;
        data.extend_from_slice(model.predict_logits(&batch)?.data());
        labels.extend_from_slice(&batch.labels);
    }
    let logits = Tensor::matrix(test.len(), classes, data)?;
    Ok(Evaluation {
        top1: topk_accuracy(&logits, &labels, 1)?,
        top5: topk_accuracy(&logits, &labels, 5)?,
        logits,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub predictions: Vec<usize>,
    pub top1: f64,
}

/// Sums per-stream class-probability matrices and takes the argmax (lowest
/// class id on ties).
pub fn fuse_streams(scores: &[Tensor], labels: &[usize]) -> Result<Fusion> {
    let first = scores.first().ok_or_else(|| Error::Shape("no streams to fuse".into()))?;
    let (rows, classes) = first.dims2()?;
    if rows != labels.len() {
        return Err(Error::Shape(format!("{rows} score rows for {} labels", labels.len())));
    }
    let mut sum = vec![0.0; rows * classes];
    for s in scores {
        if s.shape() != first.shape() {
            return Err(Error::Shape("stream score shapes differ".into()));
        }
        for (acc, v) in sum.iter_mut().zip(s.data()) {
            *acc += v;
        }
    }
    let predictions: Vec<usize> = sum.chunks(classes).map(argmax_low_id).collect();
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(Fusion {
        top1: hits as f64 / rows as f64,
        predictions,
    })
}

struct BatchLoss {
    total: Var,
    cls: Var,
    multi: Option<Var>,
    logits: Var,
}

/// Texts for the given batch rows with their labels. Every row contributes
/// all texts of its class, so same-class rows repeat them and the per-sample
/// grouping stays intact.
fn gather<'t>(labels: &[usize], rows: &[usize], pick: impl Fn(usize) -> &'t [String]) -> (Vec<&'t str>, Vec<usize>) {
    let mut texts = Vec::new();
    let mut text_labels = Vec::new();
    for &r in rows {
        for s in pick(labels[r]) {
            texts.push(s.as_str());
            text_labels.push(labels[r]);
        }
    }
    (texts, text_labels)
}

/// Records the composite objective for one batch.
fn batch_objective(
    tape: &mut Tape,
    model: &SkeletonEncoder,
    vars: &[Var],
    batch: &SkeletonBatch,
    texts: &ClassTexts,
    bank: &mut TextBank,
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let terms = config.terms;
    let heads = if terms.parts {
        Heads::All
    } else if terms.any() {
        Heads::Global
    } else {
        Heads::Classifier
    };
    let out = model.forward(tape, vars, batch, heads)?;
    let cls = tape.cross_entropy(out.logits, &batch.labels)?;
    let cfg = config.contrastive();
    let labels = &batch.labels;
    let mut collected = Vec::new();

    let all_rows: Vec<usize> = (0..labels.len()).collect();
    if terms.global || terms.synonym {
        let global = out.global.expect("global head requested");
        if terms.global {
            let (t, l) = gather(labels, &all_rows, |c| texts.refined(c));
            let m = bank.matrix(&t)?;
            collected.push(contrastive_term(tape, global, &m, labels, &l, &cfg)?);
        }
        if terms.synonym {
            let (t, l) = gather(labels, &all_rows, |c| texts.synonyms(c));
            let m = bank.matrix(&t)?;
            collected.push(contrastive_term(tape, global, &m, labels, &l, &cfg)?);
        }
    }
    if terms.parts {
        for &(part, s_p) in &out.parts {
            let rows: Vec<usize> = all_rows
                .iter()
                .copied()
                .filter(|&r| !texts.part(labels[r], part).is_empty())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let (t, l) = gather(labels, &rows, |c| texts.part(c, part));
            let m = bank.matrix(&t)?;
            let skel = tape.gather_rows(s_p, &rows)?;
            let row_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            collected.push(contrastive_term(tape, skel, &m, &row_labels, &l, &cfg)?);
        }
    }
    let (total, multi) = if collected.is_empty() {
        (cls, None)
    } else {
        let multi = multipart_term(tape, &collected)?;
        (total_term(tape, cls, multi, &cfg)?, Some(multi))
    };
    Ok(BatchLoss {
        total,
        cls,
        multi,
        logits: out.logits,
    })
}

/// Value and gradients of the composite objective on one batch.
pub fn objective_gradients(
    model: &SkeletonEncoder,
    batch: &SkeletonBatch,
    texts: &ClassTexts,
    config: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut bank = TextBank::new(config.embed_dim, config.cache_text_features);
    let loss = batch_objective(&mut tape, model, &vars, batch, texts, &mut bank, config)?;
    let grads = tape.backward(loss.total)?;
    Ok((tape.value(loss.total).item()?, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Records the composite objective on `tape` with the given parameter
/// handles; the building block for gradient checking.
pub fn record_objective(
    tape: &mut Tape,
    model: &SkeletonEncoder,
    vars: &[Var],
    batch: &SkeletonBatch,
    texts: &ClassTexts,
    config: &TrainConfig,
) -> Result<Var> {
    let mut bank = TextBank::new(config.embed_dim, true);
    Ok(batch_objective(tape, model, vars, batch, texts, &mut bank, config)?.total)
}

/// Mini-batch SGD with weight decay on the composite objective.
pub fn train(config: &TrainConfig, data: &Dataset, texts: &ClassTexts) -> Result<TrainOutcome> {
    config.validate()?;
    if config.terms.any() {
        texts.check_classes(config.num_classes)?;
    }
    let train_set = prepare_stream(&data.train, config.stream, data)?;
    let test_set = prepare_stream(&data.test, config.stream, data)?;
    if train_set.is_empty() {
        return Err(Error::Shape("empty training set".into()));
    }
    let norm = if config.normalize_input {
        Some(InputNorm::fit(&train_set)?)
    } else {
        None
    };
    let mut model = SkeletonEncoder::new(config.encoder(), data.layout.clone(), config.seed)?.with_input_norm(norm)?;
    let mut bank = TextBank::new(config.embed_dim, config.cache_text_features);
    let mut metrics = RunMetrics::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_cls, mut sum_multi, mut sum_total) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = SkeletonBatch::from_sequences(chunk.iter().map(|&i| &train_set[i]))?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let loss = batch_objective(&mut tape, &model, &vars, &batch, texts, &mut bank, config)?;
            let total = tape.value(loss.total).item()?;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("loss is {total}"),
                });
            }
            sum_total += total;
            sum_cls += tape.value(loss.cls).item()?;
            if let Some(m) = loss.multi {
                sum_multi += tape.value(m).item()?;
            }
            let logits = tape.value(loss.logits);
            correct += batch
                .labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| argmax_low_id(logits.row(r)) == y)
                .count();
            batches += 1;
            let grads = tape.backward(loss.total)?;
            for (i, &v) in vars.iter().enumerate() {
                let g = grads.wrt(v);
                let decay = if model.is_decay_exempt(i) { 0.0 } else { config.weight_decay };
                let p = &mut model.params_mut()[i];
                for (w, gw) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (gw + decay * *w);
                }
                if p.data().iter().any(|w| !w.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        message: format!("parameter {i} is not finite"),
                    });
                }
            }
        }
        let eval = evaluate(&model, &test_set)?;
        let n = batches as f64;
        metrics.epochs.push(EpochMetrics {
            epoch,
            loss_cls: sum_cls / n,
            loss_con_multi: sum_multi / n,
            loss_total: sum_total / n,
            train_top1: correct as f64 / train_set.len() as f64,
            eval_top1: eval.top1,
            eval_top5: eval.top5,
        });
    }
    let evaluation = evaluate(&model, &test_set)?;
    Ok(TrainOutcome {
        model,
        metrics,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let perfect = Tensor::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 5.0]]).unwrap();
        assert_eq!(topk_accuracy(&perfect, &[0, 2], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&perfect, &[0, 2], 5).unwrap(), 1.0);
        // constant logits over 10 balanced classes: the tie rule ranks class
        // c at position c, so top-1 hits only class 0, top-5 classes 0..5
        let labels: Vec<usize> = (0..10).flat_map(|c| [c, c]).collect();
        let flat = Tensor::filled(&[20, 10], 0.3);
        assert_eq!(topk_accuracy(&flat, &labels, 1).unwrap(), 0.1);
        assert_eq!(topk_accuracy(&flat, &labels, 5).unwrap(), 0.5);
        assert!(topk_accuracy(&flat, &[11; 20], 1).is_err());
    }

    #[test]
    fn fusion_enumeration() {
        // per-row sums by hand: row0 [0.9,0.7,0.4] -> 0; row1 [0.6,0.6,0.8] -> 2;
        // row2 [0.5,1.1,0.4] -> 1; row3 [1.0,1.0,0.0] -> 0 (tie)
        let a = Tensor::from_rows(&[
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.5, 0.4],
            vec![0.4, 0.5, 0.1],
            vec![0.5, 0.5, 0.0],
        ])
        .unwrap();
        let b = Tensor::from_rows(&[
            vec![0.3, 0.4, 0.3],
            vec![0.5, 0.1, 0.4],
            vec![0.1, 0.6, 0.3],
            vec![0.5, 0.5, 0.0],
        ])
        .unwrap();
        let f = fuse_streams(&[a.clone(), b], &[0, 2, 2, 1]).unwrap();
        assert_eq!(f.predictions, vec![0, 2, 1, 0]);
        assert_eq!(f.top1, 0.5);
        let single = fuse_streams(std::slice::from_ref(&a), &[0, 2, 2, 1]).unwrap();
        let doubled = fuse_streams(&[a.clone(), a], &[0, 2, 2, 1]).unwrap();
        assert_eq!(single, doubled);
        assert!(fuse_streams(&[], &[]).is_err());
    }

    #[test]
    fn class_texts_replicate_multi_part_clauses() {
        use crate::describe::DescriptionSource;
        let mut r = DescriptionRecord::new(1, DescriptionKind::Part, "press cheek with thumb", DescriptionSource::Mock);
        r.parts = vec![PartId::RightHand, PartId::Face];
        let t = ClassTexts::from_records(&[r]);
        assert_eq!(t.part(1, PartId::Face), t.part(1, PartId::RightHand));
        assert!(t.part(1, PartId::Body).is_empty());
        assert!(t.check_classes(2).is_err());
    }
}
