use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::numerics::{ops, Tape, Tensor, Var};

use super::graph::{graph_conv, normalized_adjacency};
use super::layout::{check_permutation, PartId, SkeletonLayout};
use super::sequence::SkeletonSequence;

/// Encoder shape. Depth and width default to 3 layers of 64 channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub layers: usize,
    pub channels: usize,
    /// Shared skeleton/text embedding dimension.
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            layers: 3,
            channels: 64,
            embed_dim: 256,
            num_classes: 10,
        }
    }
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// Backbone, global pooling and classifier only: the inference path.
    Classifier,
    /// Classifier plus the global projection.
    Global,
    /// Classifier, global projection and the five part projections.
    All,
}

/// A batch of equally sized sequences flattened to `(B·T·N)×3` rows, ordered
/// by sample, then frame, then joint.
#[derive(Clone, Debug)]
pub struct SkeletonBatch {
    pub features: Tensor,
    pub batch: usize,
    pub frames: usize,
    pub joints: usize,
    pub labels: Vec<usize>,
}

impl SkeletonBatch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a SkeletonSequence>) -> Result<Self> {
        let seqs: Vec<&SkeletonSequence> = seqs.into_iter().collect();
        let first = seqs
            .first()
            .ok_or_else(|| Error::Shape("empty skeleton batch".into()))?;
        let (n, t) = (first.joints(), first.frames());
        let mut data = Vec::with_capacity(seqs.len() * n * t * 3);
        for s in &seqs {
            if (s.joints(), s.frames()) != (n, t) {
                return Err(Error::Shape("sequences in a batch must share N and T".into()));
            }
            for f in 0..t {
                for j in 0..n {
                    data.extend((0..3).map(|c| s.get(c, j, f)));
                }
            }
        }
        Ok(Self {
            features: Tensor::matrix(seqs.len() * t * n, 3, data)?,
            batch: seqs.len(),
            frames: t,
            joints: n,
            labels: seqs.iter().map(|s| s.label()).collect(),
        })
    }
}

/// Row groups that pool `joints` over every frame of each sample.
pub fn pooling_groups(joints: &[usize], batch: usize, frames: usize, n: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|b| {
            (0..frames)
                .flat_map(|t| joints.iter().map(move |&j| (b * frames + t) * n + j))
                .collect()
        })
        .collect()
}

/// Handles produced by [`SkeletonEncoder::forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    /// Last-layer joint features, `(B·T·N)×C`.
    pub features: Var,
    /// Global average pool, `B×C`.
    pub pooled: Var,
    pub logits: Var,
    /// Unit-norm global embedding `S_g`, `B×d`.
    pub global: Option<Var>,
    /// Part-pooled features before projection, `B×C` each.
    pub pooled_parts: Vec<(PartId, Var)>,
    /// Unit-norm part embeddings `S_p`, `B×d` each.
    pub parts: Vec<(PartId, Var)>,
}

/// Encoding of a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSkeleton {
    pub global: Tensor,
    pub parts: BTreeMap<PartId, Tensor>,
    pub logits: Tensor,
}

/// Stacked graph convolutions with a classifier and projection heads.
///
/// Parameters are kept in a flat list: per layer `(Θ, adjacency offset)`,
/// then classifier `(W, b)`, global projection `(W, b)` and the part
/// projection `(W, b)` shared by all five parts.
#[derive(Clone, Debug)]
pub struct SkeletonEncoder {
    config: EncoderConfig,
    layout: SkeletonLayout,
    adjacency: Tensor,
    params: Vec<Tensor>,
    input_norm: Option<InputNorm>,
}

/// Fixed per-joint, per-channel standardization applied to the input
/// before the first graph convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    /// `N×C_in`.
    pub mean: Tensor,
    /// `N×C_in`, reciprocal standard deviations.
    pub inv_std: Tensor,
}

impl InputNorm {
    /// Statistics over every frame of every sequence in `seqs`. Channels
    /// with (near) zero spread are only centered.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a SkeletonSequence>) -> Result<Self> {
        let mut iter = seqs.into_iter().peekable();
        let first = iter.peek().ok_or_else(|| Error::Shape("no sequences to fit".into()))?;
        let n = first.joints();
        let mut sum = vec![0.0; n * 3];
        let mut sq = vec![0.0; n * 3];
        let mut count = 0usize;
        for s in iter {
            if s.joints() != n {
                return Err(Error::Shape("sequences must share N".into()));
            }
            for f in 0..s.frames() {
                for j in 0..n {
                    for c in 0..3 {
                        let v = s.get(c, j, f);
                        sum[j * 3 + c] += v;
                        sq[j * 3 + c] += v * v;
                    }
                }
            }
            count += s.frames();
        }
        let k = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let std = (q / k - m * m).max(0.0).sqrt();
                if std > 1e-8 {
                    1.0 / std
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: Tensor::matrix(n, 3, mean)?,
            inv_std: Tensor::matrix(n, 3, inv_std)?,
        })
    }

    /// Standardizes `(B·T·N)×C` features in place.
    pub fn apply(&self, features: &mut Tensor) -> Result<()> {
        let (n, c) = self.mean.dims2()?;
        let (rows, cols) = features.dims2()?;
        if cols != c || rows % n != 0 {
            return Err(Error::Shape("features do not match the input normalization".into()));
        }
        let (mean, inv) = (self.mean.data(), self.inv_std.data());
        for (r, row) in features.data_mut().chunks_mut(c).enumerate() {
            let j = r % n;
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j * c + k]) * inv[j * c + k];
            }
        }
        Ok(())
    }

    fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let (n, c) = self.mean.dims2()?;
        let permute = |m: &Tensor| {
            let mut out = vec![0.0; n * c];
            for j in 0..n {
                out[perm[j] * c..(perm[j] + 1) * c].copy_from_slice(&m.data()[j * c..(j + 1) * c]);
            }
            Tensor::matrix(n, c, out)
        };
        Ok(Self {
            mean: permute(&self.mean)?,
            inv_std: permute(&self.inv_std)?,
        })
    }
}

impl SkeletonEncoder {
    pub fn new(config: EncoderConfig, layout: SkeletonLayout, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.channels == 0 || config.embed_dim == 0 {
            return Err(Error::Config("encoder needs layers, channels and embed_dim > 0".into()));
        }
        if config.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let n = layout.joint_count();
        let adjacency = normalized_adjacency(layout.edges(), n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |shape: &[usize], std: f64| -> Result<Tensor> {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
            let count = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..count).map(|_| normal.sample(&mut rng)).collect())
        };
        let mut params = Vec::new();
        let mut c_in = config.in_channels;
        for _ in 0..config.layers {
            let c_out = config.channels;
            params.push(gaussian(&[c_in, c_out], (2.0 / c_in as f64).sqrt())?);
            params.push(Tensor::zeros(&[n, n]));
            c_in = c_out;
        }
        let c = config.channels;
        let head_std = 1.0 / (c as f64).sqrt();
        params.push(gaussian(&[c, config.num_classes], head_std)?);
        params.push(Tensor::zeros(&[config.num_classes]));
        params.push(gaussian(&[c, config.embed_dim], head_std)?);
        params.push(gaussian(&[config.embed_dim], 0.1)?);
        params.push(gaussian(&[c, config.embed_dim], head_std)?);
        params.push(gaussian(&[config.embed_dim], 0.1)?);
        Ok(Self {
            config,
            layout,
            adjacency,
            params,
            input_norm: None,
        })
    }

    /// Rebuilds an encoder from stored parameters, checking their shapes.
    pub fn from_params(config: EncoderConfig, layout: SkeletonLayout, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::new(config.clone(), layout.clone(), 0)?;
        if params.len() != template.params.len()
            || params
                .iter()
                .zip(&template.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter list does not match encoder config".into()));
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &SkeletonLayout {
        &self.layout
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn with_input_norm(mut self, norm: Option<InputNorm>) -> Result<Self> {
        if let Some(m) = &norm {
            let n = self.layout.joint_count();
            let want = [n, self.config.in_channels];
            if m.mean.shape() != want || m.inv_std.shape() != want {
                return Err(Error::Shape("input normalization shape mismatch".into()));
            }
        }
        self.input_norm = norm;
        Ok(self)
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Replaces the fixed normalized adjacency.
    pub fn with_adjacency(mut self, adjacency: Tensor) -> Result<Self> {
        if adjacency.shape() != self.adjacency.shape() {
            return Err(Error::Shape("adjacency shape mismatch".into()));
        }
        self.adjacency = adjacency;
        Ok(self)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for l in 0..self.config.layers {
            names.push(format!("gcn{l}.theta"));
            names.push(format!("gcn{l}.adjacency_offset"));
        }
        for head in ["classifier", "global_proj", "part_proj"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    /// Whether parameter `index` is a bias or adjacency offset (exempt from
    /// weight decay).
    pub fn is_decay_exempt(&self, index: usize) -> bool {
        let backbone = 2 * self.config.layers;
        if index < backbone {
            index % 2 == 1
        } else {
            (index - backbone) % 2 == 1
        }
    }

    /// Relabels joints: layout, adjacency, offsets and expected input order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.layout.joint_count();
        check_permutation(perm, n)?;
        let permute = |m: &Tensor| -> Result<Tensor> {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[perm[i] * n + perm[j]] = m.at(i, j);
                }
            }
            Tensor::matrix(n, n, out)
        };
        let mut params = self.params.clone();
        for l in 0..self.config.layers {
            params[2 * l + 1] = permute(&params[2 * l + 1])?;
        }
        Ok(Self {
            config: self.config.clone(),
            layout: self.layout.permuted(perm)?,
            adjacency: permute(&self.adjacency)?,
            params,
            input_norm: self.input_norm.as_ref().map(|m| m.permuted(perm)).transpose()?,
        })
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &SkeletonBatch,
        heads: Heads,
    ) -> Result<EncoderOutputs> {
        let n = self.layout.joint_count();
        if batch.joints != n {
            return Err(Error::Shape(format!(
                "batch has {} joints, layout has {n}",
                batch.joints
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract("parameter handles do not match encoder".into()));
        }
        let layers = self.config.layers;
        let base = tape.constant(self.adjacency.clone());
        let mut input = batch.features.clone();
        if let Some(norm) = &self.input_norm {
            norm.apply(&mut input)?;
        }
        let mut x = tape.constant(input);
        for l in 0..layers {
            let adjacency = tape.add(base, vars[2 * l + 1])?;
            x = graph_conv(tape, adjacency, vars[2 * l], x)?;
        }
        let all: Vec<usize> = (0..n).collect();
        let groups = pooling_groups(&all, batch.batch, batch.frames, n);
        let pooled = tape.segment_mean(x, Arc::new(groups))?;
        let head = 2 * layers;
        let logits = affine(tape, pooled, vars[head], vars[head + 1])?;

        let global = match heads {
            Heads::Classifier => None,
            Heads::Global | Heads::All => {
                let z = affine(tape, pooled, vars[head + 2], vars[head + 3])?;
                Some(tape.l2_normalize(z, 1)?)
            }
        };
        let mut pooled_parts = Vec::new();
        let mut parts = Vec::new();
        if heads == Heads::All {
            for part in PartId::ALL {
                instrument::count_part_branch();
                let groups = pooling_groups(self.layout.joints(part), batch.batch, batch.frames, n);
                let p = tape.segment_mean(x, Arc::new(groups))?;
                let z = affine(tape, p, vars[head + 4], vars[head + 5])?;
                pooled_parts.push((part, p));
                parts.push((part, tape.l2_normalize(z, 1)?));
            }
        }
        Ok(EncoderOutputs {
            features: x,
            pooled,
            logits,
            global,
            pooled_parts,
            parts,
        })
    }

    /// Classifier logits for a batch, through the global path only.
    pub fn predict_logits(&self, batch: &SkeletonBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, batch, Heads::Classifier)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Full encoding of one sequence: `S_g`, the five `S_p`, and logits.
    pub fn encode(&self, seq: &SkeletonSequence) -> Result<EncodedSkeleton> {
        let batch = SkeletonBatch::from_sequences([seq])?;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, &batch, Heads::All)?;
        let row = |v: Var| -> Result<Tensor> {
            let t = tape.value(v);
            Tensor::vector(t.data().to_vec())
        };
        Ok(EncodedSkeleton {
            global: row(out.global.expect("all heads evaluated"))?,
            parts: out
                .parts
                .iter()
                .map(|&(p, v)| Ok((p, row(v)?)))
                .collect::<Result<_>>()?,
            logits: row(out.logits)?,
        })
    }
}

fn affine(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = tape.matmul(x, weight)?;
    tape.add_row_bias(z, bias)
}

/// Softmax cross-entropy of one logit vector against `label`.
pub fn classify_loss(logits: &Tensor, label: usize) -> Result<f64> {
    ops::cross_entropy(logits, &[label])
}
