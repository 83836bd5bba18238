use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of keypoints per frame in the canonical layout.
pub const JOINT_COUNT: usize = 87;

/// One of the five anatomical joint groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartId {
    Body,
    LeftHand,
    RightHand,
    Mouth,
    Face,
}

impl PartId {
    pub const ALL: [PartId; 5] = [
        PartId::Body,
        PartId::LeftHand,
        PartId::RightHand,
        PartId::Mouth,
        PartId::Face,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartId::Body => "body",
            PartId::LeftHand => "left_hand",
            PartId::RightHand => "right_hand",
            PartId::Mouth => "mouth",
            PartId::Face => "face",
        }
    }

    /// Joint count of this part in the canonical layout.
    pub fn canonical_size(self) -> usize {
        match self {
            PartId::Body => 15,
            PartId::LeftHand | PartId::RightHand => 21,
            PartId::Mouth => 10,
            PartId::Face => 20,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Layout(format!("unknown part id {s:?}")))
    }
}

/// Joint membership of one part, as written in a layout file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Membership {
    Range { start: usize, len: usize },
    Joints { joints: Vec<usize> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartEntry {
    part: PartId,
    #[serde(flatten)]
    membership: Membership,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayoutFile {
    joint_count: usize,
    parts: Vec<PartEntry>,
    /// `(parent, child)` pairs.
    edges: Vec<(usize, usize)>,
}

/// The five-part joint partition and the oriented skeleton edges.
///
/// Edges are `(parent, child)`; each joint has at most one parent, which
/// gives the bone stream its orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonLayout {
    joint_count: usize,
    /// Joint lists indexed by [`PartId::index`].
    parts: [Vec<usize>; 5],
    edges: Vec<(usize, usize)>,
}

// Parent of each joint within a part, relative to the part's first joint.
const BODY_PARENTS: [Option<usize>; 15] = [
    None,     // 0 neck
    Some(0),  // 1 nose
    Some(1),  // 2 left eye
    Some(1),  // 3 right eye
    Some(2),  // 4 left ear
    Some(3),  // 5 right ear
    Some(0),  // 6 left shoulder
    Some(0),  // 7 right shoulder
    Some(6),  // 8 left elbow
    Some(7),  // 9 right elbow
    Some(8),  // 10 left wrist
    Some(9),  // 11 right wrist
    Some(14), // 12 left hip
    Some(14), // 13 right hip
    Some(0),  // 14 mid hip
];

fn hand_parents() -> Vec<Option<usize>> {
    // wrist, then four joints per finger chained from the wrist
    let mut parents = vec![None];
    for finger in 0..5 {
        let base = 1 + finger * 4;
        parents.push(Some(0));
        for k in 1..4 {
            parents.push(Some(base + k - 1));
        }
    }
    parents
}

fn chain_parents(len: usize) -> Vec<Option<usize>> {
    (0..len).map(|i| i.checked_sub(1)).collect()
}

fn face_parents() -> Vec<Option<usize>> {
    // jaw contour 0..9, left brow 9..14 from 0, right brow 14..19 from 8, nose tip 19 from 4
    let mut p = chain_parents(9);
    p.push(Some(0));
    p.extend((10..14).map(|i| Some(i - 1)));
    p.push(Some(8));
    p.extend((15..19).map(|i| Some(i - 1)));
    p.push(Some(4));
    p
}

impl SkeletonLayout {
    /// The canonical 87-joint layout: body 15, left hand 21, right hand 21,
    /// mouth 10, face 20, each part a tree, linked at the wrists and nose.
    pub fn standard() -> Self {
        let sizes = PartId::ALL.map(PartId::canonical_size);
        let mut starts = [0usize; 5];
        for i in 1..5 {
            starts[i] = starts[i - 1] + sizes[i - 1];
        }
        let parents: [Vec<Option<usize>>; 5] = [
            BODY_PARENTS.to_vec(),
            hand_parents(),
            hand_parents(),
            chain_parents(10),
            face_parents(),
        ];
        let mut edges = Vec::new();
        for (k, local) in parents.iter().enumerate() {
            debug_assert_eq!(local.len(), sizes[k]);
            for (j, parent) in local.iter().enumerate() {
                if let Some(p) = parent {
                    edges.push((starts[k] + p, starts[k] + j));
                }
            }
        }
        let body = starts[PartId::Body.index()];
        edges.push((body + 10, starts[PartId::LeftHand.index()]));
        edges.push((body + 11, starts[PartId::RightHand.index()]));
        edges.push((body + 1, starts[PartId::Mouth.index()]));
        edges.push((body + 1, starts[PartId::Face.index()]));
        let parts = std::array::from_fn(|k| (starts[k]..starts[k] + sizes[k]).collect());
        let layout = Self {
            joint_count: JOINT_COUNT,
            parts,
            edges,
        };
        debug_assert!(layout.validate().is_ok());
        layout
    }

    /// Builds and validates a layout from explicit part joint lists.
    pub fn new(joint_count: usize, parts: [Vec<usize>; 5], edges: Vec<(usize, usize)>) -> Result<Self> {
        let layout = Self {
            joint_count,
            parts,
            edges,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn joints(&self, part: PartId) -> &[usize] {
        &self.parts[part.index()]
    }

    pub fn part_of(&self, joint: usize) -> Option<PartId> {
        PartId::ALL
            .into_iter()
            .find(|p| self.parts[p.index()].contains(&joint))
    }

    /// Parent of each joint according to the oriented edges.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = vec![None; self.joint_count];
        for &(p, c) in &self.edges {
            parents[c] = Some(p);
        }
        parents
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count != JOINT_COUNT {
            return Err(Error::Layout(format!(
                "expected {JOINT_COUNT} joints, got {}",
                self.joint_count
            )));
        }
        let mut seen = vec![false; self.joint_count];
        for part in PartId::ALL {
            let joints = &self.parts[part.index()];
            if joints.len() != part.canonical_size() {
                return Err(Error::Layout(format!(
                    "part {part} has {} joints, expected {}",
                    joints.len(),
                    part.canonical_size()
                )));
            }
            for &j in joints {
                if j >= self.joint_count {
                    return Err(Error::Layout(format!("joint {j} of {part} out of range")));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Layout(format!("joint {j} belongs to two parts")));
                }
            }
        }
        let mut has_parent = vec![false; self.joint_count];
        for &(p, c) in &self.edges {
            if p >= self.joint_count || c >= self.joint_count {
                return Err(Error::Layout(format!("edge ({p}, {c}) out of range")));
            }
            if p == c {
                return Err(Error::Layout(format!("self edge at joint {p}")));
            }
            if std::mem::replace(&mut has_parent[c], true) {
                return Err(Error::Layout(format!("joint {c} has two parents")));
            }
        }
        self.check_acyclic()?;
        for part in PartId::ALL {
            self.check_part_connected(part)?;
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<()> {
        let parents = self.parents();
        for start in 0..self.joint_count {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > self.joint_count {
                    return Err(Error::Layout(format!("edge cycle through joint {start}")));
                }
            }
        }
        Ok(())
    }

    fn check_part_connected(&self, part: PartId) -> Result<()> {
        let members: BTreeSet<usize> = self.parts[part.index()].iter().copied().collect();
        let internal: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .filter(|(a, b)| members.contains(a) && members.contains(b))
            .collect();
        let first = *members.iter().next().expect("parts are non-empty");
        let mut reached = BTreeSet::from([first]);
        let mut frontier = vec![first];
        while let Some(j) = frontier.pop() {
            for &(a, b) in &internal {
                let other = if a == j {
                    b
                } else if b == j {
                    a
                } else {
                    continue;
                };
                if reached.insert(other) {
                    frontier.push(other);
                }
            }
        }
        if reached.len() != members.len() {
            return Err(Error::Layout(format!("part {part} is not connected")));
        }
        Ok(())
    }

    /// Relabels joint `j` as `perm[j]` throughout.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.joint_count)?;
        Self::new(
            self.joint_count,
            self.parts.clone().map(|js| js.iter().map(|&j| perm[j]).collect()),
            self.edges.iter().map(|&(p, c)| (perm[p], perm[c])).collect(),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(s)?;
        let mut parts: [Option<Vec<usize>>; 5] = Default::default();
        for entry in file.parts {
            let joints = match entry.membership {
                Membership::Range { start, len } => (start..start + len).collect(),
                Membership::Joints { joints } => joints,
            };
            if parts[entry.part.index()].replace(joints).is_some() {
                return Err(Error::Layout(format!("part {} listed twice", entry.part)));
            }
        }
        let mut resolved: [Vec<usize>; 5] = Default::default();
        for part in PartId::ALL {
            resolved[part.index()] = parts[part.index()]
                .take()
                .ok_or_else(|| Error::Layout(format!("part {part} missing")))?;
        }
        Self::new(file.joint_count, resolved, file.edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes with contiguous ranges where possible.
    pub fn to_json(&self) -> Result<String> {
        let parts = PartId::ALL
            .into_iter()
            .map(|part| {
                let joints = &self.parts[part.index()];
                let contiguous = joints.windows(2).all(|w| w[1] == w[0] + 1);
                let membership = if contiguous {
                    Membership::Range {
                        start: joints[0],
                        len: joints.len(),
                    }
                } else {
                    Membership::Joints {
                        joints: joints.clone(),
                    }
                };
                PartEntry { part, membership }
            })
            .collect();
        let file = LayoutFile {
            joint_count: self.joint_count,
            parts,
            edges: self.edges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Layout("not a permutation of the joints".into()));
    }
    Ok(())
}
