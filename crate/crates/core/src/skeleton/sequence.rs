use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::layout::{check_permutation, SkeletonLayout};

/// One sample: `(x, y, confidence)` over `N` joints and `T` frames, stored as
/// a `3×N×T` tensor, plus its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    values: Tensor,
    label: usize,
}

impl SkeletonSequence {
    pub fn new(values: Tensor, label: usize) -> Result<Self> {
        let &[c, _, t] = values.shape() else {
            return Err(Error::Shape(format!(
                "sequence must be 3×N×T, got {:?}",
                values.shape()
            )));
        };
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if t < 2 {
            return Err(Error::Shape(format!("need at least 2 frames, got {t}")));
        }
        let seq = Self { values, label };
        let conf_len = seq.joints() * seq.frames();
        if let Some(v) = seq.values.data()[2 * conf_len..]
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Parameter(format!("confidence {v} outside [0, 1]")));
        }
        Ok(seq)
    }

    /// Builds a sequence from `f(channel, joint, frame)`.
    pub fn from_fn(
        joints: usize,
        frames: usize,
        label: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * joints * frames);
        for c in 0..3 {
            for j in 0..joints {
                for t in 0..frames {
                    data.push(f(c, j, t));
                }
            }
        }
        Self::new(Tensor::new(vec![3, joints, frames], data)?, label)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, channel: usize, joint: usize, frame: usize) -> f64 {
        let (n, t) = (self.joints(), self.frames());
        self.values.data()[(channel * n + joint) * t + frame]
    }

    /// Moves joint `j` to position `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.joints())?;
        let mut inverse = vec![0; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        Self::from_fn(self.joints(), self.frames(), self.label, |c, j, t| {
            self.get(c, inverse[j], t)
        })
    }
}

/// Bone vectors: each joint's coordinates minus its parent's.
///
/// Edges are `(parent, child)`. Joints without a parent get a zero bone.
/// The confidence is the smaller of the two endpoint confidences.
pub fn bone_stream(seq: &SkeletonSequence, edges: &[(usize, usize)]) -> Result<SkeletonSequence> {
    let n = seq.joints();
    let mut parent = vec![None; n];
    for &(p, c) in edges {
        if p >= n || c >= n {
            return Err(Error::Layout(format!("edge ({p}, {c}) out of range for {n} joints")));
        }
        parent[c] = Some(p);
    }
    SkeletonSequence::from_fn(n, seq.frames(), seq.label(), |c, j, t| match (c, parent[j]) {
        (2, Some(p)) => seq.get(2, j, t).min(seq.get(2, p, t)),
        (2, None) => seq.get(2, j, t),
        (_, Some(p)) => seq.get(c, j, t) - seq.get(c, p, t),
        (_, None) => 0.0,
    })
}

/// Frame differences `x[t+1] − x[t]`, zero at the last frame; confidence copied.
pub fn motion_stream(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let last = seq.frames() - 1;
    SkeletonSequence::from_fn(seq.joints(), seq.frames(), seq.label(), |c, j, t| {
        if c == 2 {
            seq.get(2, j, t)
        } else if t == last {
            0.0
        } else {
            seq.get(c, j, t + 1) - seq.get(c, j, t)
        }
    })
}

/// Input representation fed to the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    #[default]
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::Joint,
        Stream::Bone,
        Stream::JointMotion,
        Stream::BoneMotion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Bone => "bone",
            Stream::JointMotion => "joint_motion",
            Stream::BoneMotion => "bone_motion",
        }
    }

    pub fn apply(self, seq: &SkeletonSequence, layout: &SkeletonLayout) -> Result<SkeletonSequence> {
        match self {
            Stream::Joint => Ok(seq.clone()),
            Stream::Bone => bone_stream(seq, layout.edges()),
            Stream::JointMotion => motion_stream(seq),
            Stream::BoneMotion => motion_stream(&bone_stream(seq, layout.edges())?),
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream {s:?}")))
    }
}
