//! Frozen hashed bag-of-tokens text encoder.
//!
//! Each folded token is hashed (64-bit FNV-1a) and expanded into a Gaussian
//! vector drawn from a generator seeded with `token_id ^ seed`. A text maps
//! to the count-weighted sum of its token vectors, L2 normalized.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::describe::DescriptionRecord;
use crate::error::{Error, Result};
use crate::instrument;
use crate::numerics::Tensor;

pub const DEFAULT_DIM: usize = 256;
pub const MIN_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    pub vector: Tensor,
    /// Position of the originating record in the encoded batch, if any.
    pub source: Option<usize>,
}

/// Lowercases, folds punctuation to whitespace and splits.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn token_id(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Unnormalized Gaussian direction assigned to one token.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_id(token) ^ seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Count-weighted sum of token vectors before normalization.
pub fn raw_embedding(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < MIN_DIM {
        return Err(Error::Parameter(format!("text dimension must be at least {MIN_DIM}, got {dim}")));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for token in tokenize(text) {
        *counts.entry(token).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Encoding(format!("no tokens in {text:?}")));
    }
    let mut sum = vec![0.0; dim];
    for (token, count) in &counts {
        let w = *count as f64;
        for (s, v) in sum.iter_mut().zip(token_vector(token, dim, seed)) {
            *s += w * v;
        }
    }
    Ok(sum)
}

pub fn encode_text(text: &str, dim: usize, seed: u64) -> Result<TextFeature> {
    instrument::count_text_encoder();
    let raw = raw_embedding(text, dim, seed)?;
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Encoding(format!("degenerate embedding for {text:?}")));
    }
    Ok(TextFeature {
        vector: Tensor::vector(raw.into_iter().map(|v| v / norm).collect())?,
        source: None,
    })
}

/// Encodes records in order; `source` holds each record's position.
pub fn encode_batch(records: &[DescriptionRecord], dim: usize, seed: u64) -> Result<Vec<TextFeature>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut f = encode_text(&r.text, dim, seed)?;
            f.source = Some(i);
            Ok(f)
        })
        .collect()
}

/// Stacks texts into an `M×d` matrix of unit rows.
pub fn encode_matrix<S: AsRef<str>>(texts: &[S], dim: usize, seed: u64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(texts.len() * dim);
    for t in texts {
        data.extend_from_slice(encode_text(t.as_ref(), dim, seed)?.vector.data());
    }
    Tensor::matrix(texts.len(), dim, data)
}
