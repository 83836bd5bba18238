//! Multi-positive skeleton/text alignment.
//!
//! For a batch of `B` skeleton embeddings and `M` text embeddings (several
//! texts may share a skeleton's class), the skeleton→text distribution is a
//! row softmax of the scaled cosine similarities and the text→skeleton
//! distribution a column softmax presented as `M×B`. Targets spread mass
//! uniformly over every same-label partner, and the loss is the mean of the
//! two directional `KL(target ‖ prediction)` row means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Tape, Tensor, Var};
use crate::skeleton::PartId;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight of the contrastive term in the composite objective.
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            alpha: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Skeleton features of one head against the batch's text features.
///
/// Texts are grouped by owning sample: sample `i` contributes `counts[i]`
/// consecutive rows of `text`.
#[derive(Clone, Debug)]
pub struct BatchPairing {
    skeleton: Tensor,
    text: Tensor,
    skeleton_labels: Vec<usize>,
    text_labels: Vec<usize>,
    counts: Vec<usize>,
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let (rows, _) = t.dims2()?;
    for r in 0..rows {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Parameter(format!("{what} row {r} has norm {norm}")));
        }
    }
    Ok(())
}

impl BatchPairing {
    pub fn new(
        skeleton: Tensor,
        text: Tensor,
        skeleton_labels: Vec<usize>,
        text_labels: Vec<usize>,
        counts: Vec<usize>,
    ) -> Result<Self> {
        let (b, d) = skeleton.dims2()?;
        let (m, d2) = text.dims2()?;
        if d != d2 {
            return Err(Error::Shape(format!("skeleton dim {d} vs text dim {d2}")));
        }
        if skeleton_labels.len() != b || text_labels.len() != m {
            return Err(Error::Shape("label counts do not match feature rows".into()));
        }
        if counts.len() != b || counts.iter().sum::<usize>() != m {
            return Err(Error::Shape(format!(
                "per-sample text counts must have {b} entries summing to {m}"
            )));
        }
        check_unit_rows(&skeleton, "skeleton")?;
        check_unit_rows(&text, "text")?;
        Ok(Self {
            skeleton,
            text,
            skeleton_labels,
            text_labels,
            counts,
        })
    }

    /// One text per skeleton, paired by position.
    pub fn one_to_one(skeleton: Tensor, text: Tensor, labels: Vec<usize>) -> Result<Self> {
        let b = labels.len();
        Self::new(skeleton, text, labels.clone(), labels, vec![1; b])
    }

    pub fn skeleton(&self) -> &Tensor {
        &self.skeleton
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn skeleton_labels(&self) -> &[usize] {
        &self.skeleton_labels
    }

    pub fn text_labels(&self) -> &[usize] {
        &self.text_labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Flattened text index of the `j`-th text of sample `i`.
    pub fn text_index(&self, sample: usize, j: usize) -> usize {
        self.counts[..sample].iter().sum::<usize>() + j
    }

    pub fn loss(&self, config: &ContrastiveConfig) -> Result<f64> {
        contrastive_loss(self, config)
    }
}

/// Cosine similarities of unit-norm rows, `B×M`.
pub fn similarity_matrix(skeleton: &Tensor, text: &Tensor) -> Result<Tensor> {
    ops::matmul_nt(skeleton, text)
}

/// Skeleton→text matching distribution: row softmax of `sim/τ`.
pub fn q_s2t(sim: &Tensor, temperature: f64) -> Result<Tensor> {
    ops::softmax(sim, 1, temperature)
}

/// Text→skeleton matching distribution: column softmax of `sim/τ`, as `M×B`.
pub fn q_t2s(sim: &Tensor, temperature: f64) -> Result<Tensor> {
    ops::transpose(&ops::softmax(sim, 0, temperature)?)
}

/// Uniform distribution over same-label columns for every row label.
///
/// Fails when a row label has no matching column.
pub fn match_distribution(row_labels: &[usize], col_labels: &[usize]) -> Result<Tensor> {
    if row_labels.is_empty() || col_labels.is_empty() {
        return Err(Error::Shape("empty label list".into()));
    }
    let cols = col_labels.len();
    let mut data = vec![0.0; row_labels.len() * cols];
    for (i, &label) in row_labels.iter().enumerate() {
        let matches = col_labels.iter().filter(|&&l| l == label).count();
        if matches == 0 {
            return Err(Error::DegeneratePairing { row: i });
        }
        let w = 1.0 / matches as f64;
        for (c, &l) in col_labels.iter().enumerate() {
            if l == label {
                data[i * cols + c] = w;
            }
        }
    }
    Tensor::matrix(row_labels.len(), cols, data)
}

/// Records the symmetric multi-positive loss for one head on `tape`.
///
/// `skeleton` is a `B×d` unit-norm value; `text` is a frozen `M×d` matrix.
pub fn contrastive_term(
    tape: &mut Tape,
    skeleton: Var,
    text: &Tensor,
    skeleton_labels: &[usize],
    text_labels: &[usize],
    config: &ContrastiveConfig,
) -> Result<Var> {
    config.validate()?;
    let p = match_distribution(skeleton_labels, text_labels)?;
    let p_t = match_distribution(text_labels, skeleton_labels)?;
    let t = tape.constant(text.clone());
    let sim = tape.matmul_nt(skeleton, t)?;
    let q = tape.softmax(sim, 1, config.temperature)?;
    let kl_s2t = tape.kl_divergence(p, q, 1)?;
    let s2t = tape.mean(kl_s2t)?;
    let sim_t = tape.transpose(sim)?;
    let q_t = tape.softmax(sim_t, 1, config.temperature)?;
    let kl_t2s = tape.kl_divergence(p_t, q_t, 1)?;
    let t2s = tape.mean(kl_t2s)?;
    let both = tape.sum(&[s2t, t2s])?;
    tape.scale(both, 0.5)
}

/// Symmetric multi-positive KL loss of one pairing.
pub fn contrastive_loss(pairing: &BatchPairing, config: &ContrastiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(pairing.skeleton.clone());
    let out = contrastive_term(
        &mut tape,
        s,
        &pairing.text,
        &pairing.skeleton_labels,
        &pairing.text_labels,
        config,
    )?;
    tape.value(out).item()
}

/// Mean of the evaluated terms; absent terms do not count toward `N`.
pub fn multipart_term(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Contract("multipart loss needs at least one term".into()));
    }
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Pairings feeding the multipart objective; any of them may be absent.
#[derive(Clone, Debug, Default)]
pub struct MultipartPairings {
    /// `S_g` against refined descriptions.
    pub global: Option<BatchPairing>,
    /// `S_g` against synonym variants.
    pub synonym: Option<BatchPairing>,
    /// `S_p` against part-tagged descriptions, per part.
    pub parts: BTreeMap<PartId, BatchPairing>,
}

impl MultipartPairings {
    pub fn term_count(&self) -> usize {
        usize::from(self.global.is_some()) + usize::from(self.synonym.is_some()) + self.parts.len()
    }
}

/// `(1/N)·Σ L_con` over the pairings present.
pub fn multipart_loss(pairings: &MultipartPairings, config: &ContrastiveConfig) -> Result<f64> {
    let terms: Vec<f64> = pairings
        .global
        .iter()
        .chain(pairings.synonym.iter())
        .chain(pairings.parts.values())
        .map(|p| contrastive_loss(p, config))
        .collect::<Result<_>>()?;
    if terms.is_empty() {
        return Err(Error::Contract("multipart loss needs at least one term".into()));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// `L_cls + α·L_con_multi`.
pub fn total_loss(cls: f64, contrastive: f64, config: &ContrastiveConfig) -> f64 {
    cls + config.alpha * contrastive
}

/// Tape form of [`total_loss`].
pub fn total_term(tape: &mut Tape, cls: Var, contrastive: Var, config: &ContrastiveConfig) -> Result<Var> {
    let weighted = tape.scale(contrastive, config.alpha)?;
    tape.sum(&[cls, weighted])
}
