//! Synthetic sign corpus: each class moves a subset of the five parts along
//! circular arcs with class-specific radius, swept angle, starting angle and
//! placement. Arcs rather than full turns keep the start angle and the speed
//! visible after averaging over frames.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::describe::{run_pipeline, KnowledgeBase, MockBackend, Passage, PipelineConfig, PipelineOutput, SignEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{PartId, SkeletonLayout, SkeletonSequence, JOINT_COUNT};

const AMPLITUDES: [(f64, &str); 3] = [(0.04, "small"), (0.08, "medium"), (0.14, "wide")];
// quarter turns swept over the sequence
const FREQUENCIES: [(f64, &str); 3] = [(1.0, "slowly"), (2.0, "steadily"), (3.0, "quickly")];
const PHASES: [(f64, &str); 4] = [(0.0, "right"), (FRAC_PI_2, "top"), (PI, "left"), (3.0 * FRAC_PI_2, "bottom")];
const OFFSETS: [([f64; 2], &str); 4] = [
    ([0.0, 0.0], "in place"),
    ([0.0, 0.1], "held high"),
    ([0.0, -0.1], "held low"),
    ([0.1, 0.0], "held outward"),
];

const GLOSSES: &[&str] = &[
    "harbor", "lantern", "meadow", "thunder", "velvet", "orchard", "compass", "glacier", "ember", "willow", "canyon",
    "falcon", "marble", "saddle", "pepper", "ribbon", "quarry", "tunnel", "beacon", "cradle",
];
const COMPONENTS: &[&str] = &[
    "anchor", "bloom", "crest", "drift", "echo", "flare", "grove", "hinge", "inlet", "jolt", "knot", "ledge",
    "mist", "notch", "orbit", "prism", "quill", "ridge", "spire", "tide",
];

/// Arc trajectory of one part, stored as indices into the primitive grids
/// so that every parameter has a wording. `frequency` sets how many quarter
/// turns are swept over the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartMotion {
    pub amplitude: usize,
    pub frequency: usize,
    pub phase: usize,
    pub offset: usize,
}

impl PartMotion {
    pub fn amplitude_value(&self) -> f64 {
        AMPLITUDES[self.amplitude].0
    }

    pub fn frequency_value(&self) -> f64 {
        FREQUENCIES[self.frequency].0
    }

    pub fn phase_value(&self) -> f64 {
        PHASES[self.phase].0
    }

    pub fn offset_value(&self) -> [f64; 2] {
        OFFSETS[self.offset].0
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            amplitude: rng.random_range(0..AMPLITUDES.len()),
            frequency: rng.random_range(0..FREQUENCIES.len()),
            phase: rng.random_range(0..PHASES.len()),
            offset: rng.random_range(0..OFFSETS.len()),
        }
    }

    fn check(&self) -> Result<()> {
        if self.amplitude >= AMPLITUDES.len()
            || self.frequency >= FREQUENCIES.len()
            || self.phase >= PHASES.len()
            || self.offset >= OFFSETS.len()
        {
            return Err(Error::Parameter(format!("motion primitive out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSignSpec {
    pub class_id: usize,
    /// Indexed by [`PartId::index`].
    pub motions: [PartMotion; 5],
    pub active: [bool; 5],
    /// Standard deviation of per-coordinate Gaussian noise.
    pub noise: f64,
}

impl SyntheticSignSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.active.iter().any(|&a| a) {
            return Err(Error::Parameter(format!("class {} has no active part", self.class_id)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Parameter(format!("noise must be nonnegative, got {}", self.noise)));
        }
        self.motions.iter().try_for_each(PartMotion::check)
    }

    pub fn active_parts(&self) -> impl Iterator<Item = PartId> + '_ {
        PartId::ALL.into_iter().filter(|p| self.active[p.index()])
    }

    /// The parameters that distinguish classes: the active parts and their
    /// motions.
    fn signature(&self) -> Vec<(usize, PartMotion)> {
        self.active_parts().map(|p| (p.index(), self.motions[p.index()])).collect()
    }

    pub fn gloss(&self) -> String {
        word(GLOSSES, self.class_id)
    }

    /// Name of the expert component sign the class's last active part uses.
    pub fn component(&self) -> String {
        word(COMPONENTS, self.class_id)
    }

    /// One sentence per active part.
    pub fn part_sentences(&self) -> Vec<(PartId, String)> {
        self.active_parts()
            .map(|p| {
                let m = self.motions[p.index()];
                let subject = match p {
                    PartId::Body => "Sway the shoulders",
                    PartId::LeftHand => "Circle the left hand",
                    PartId::RightHand => "Circle the right hand",
                    PartId::Mouth => "Move the lips",
                    PartId::Face => "Move the eyebrows",
                };
                let text = format!(
                    "{subject} along a {} arc {}, starting from the {}, {}.",
                    AMPLITUDES[m.amplitude].1, FREQUENCIES[m.frequency].1, PHASES[m.phase].1, OFFSETS[m.offset].1
                );
                (p, text)
            })
            .collect()
    }
}

fn word(list: &[&str], i: usize) -> String {
    if i < list.len() {
        list[i].to_owned()
    } else {
        format!("{}{}", list[i % list.len()], i / list.len())
    }
}

/// Random class specs, pairwise distinct in at least one active primitive.
pub fn generate_specs(num_classes: usize, noise: f64, seed: u64) -> Result<Vec<SyntheticSignSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut seen = BTreeSet::new();
    let mut specs = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let spec = loop {
            let mut active = [false; 5];
            while !active.iter().any(|&a| a) {
                for a in &mut active {
                    *a = rng.random_bool(0.5);
                }
            }
            let motions = std::array::from_fn(|_| PartMotion::random(&mut rng));
            let spec = SyntheticSignSpec {
                class_id,
                motions,
                active,
                noise,
            };
            if seen.insert(spec.signature()) {
                break spec;
            }
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// Neutral 2-D position of every joint of the standard layout.
pub fn rest_pose() -> Vec<[f64; 2]> {
    const BODY: [[f64; 2]; 15] = [
        [0.0, 0.40],
        [0.0, 0.60],
        [-0.05, 0.65],
        [0.05, 0.65],
        [-0.10, 0.62],
        [0.10, 0.62],
        [-0.20, 0.40],
        [0.20, 0.40],
        [-0.30, 0.15],
        [0.30, 0.15],
        [-0.25, -0.05],
        [0.25, -0.05],
        [-0.12, -0.40],
        [0.12, -0.40],
        [0.0, -0.40],
    ];
    let mut pose: Vec<[f64; 2]> = BODY.to_vec();
    for side in [-1.0, 1.0] {
        let wrist = if side < 0.0 { BODY[10] } else { BODY[11] };
        pose.push(wrist);
        for finger in 0..5 {
            let angle = PI / 2.0 + side * (finger as f64 - 2.0) * 0.3;
            for k in 1..=4 {
                let r = 0.03 * k as f64;
                pose.push([wrist[0] + r * angle.cos(), wrist[1] + r * angle.sin()]);
            }
        }
    }
    for i in 0..10 {
        let a = TAU * i as f64 / 10.0;
        pose.push([0.03 * a.cos(), 0.55 + 0.015 * a.sin()]);
    }
    for i in 0..9 {
        let a = PI + PI * i as f64 / 8.0;
        pose.push([0.09 * a.cos(), 0.62 + 0.10 * a.sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            pose.push([side * (0.02 + 0.015 * i as f64), 0.69]);
        }
    }
    pose.push([0.0, 0.58]);
    debug_assert_eq!(pose.len(), JOINT_COUNT);
    pose
}

/// Per-sample nuisance drawn from a signer pool.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Signer {
    shift: [f64; 2],
    scale: f64,
    phase: f64,
}

fn signer_pool(rng: &mut ChaCha8Rng, size: usize) -> Vec<Signer> {
    (0..size)
        .map(|_| Signer {
            shift: [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)],
            scale: rng.random_range(0.95..1.05),
            phase: rng.random_range(-0.3..0.3),
        })
        .collect()
}

fn render(
    spec: &SyntheticSignSpec,
    layout: &SkeletonLayout,
    rest: &[[f64; 2]],
    frames: usize,
    signer: Signer,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    let n = layout.joint_count();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut values = vec![0.0; 3 * n * frames];
    for part in PartId::ALL {
        let m = spec.motions[part.index()];
        let active = spec.active[part.index()];
        for (local, &j) in layout.joints(part).iter().enumerate() {
            for t in 0..frames {
                let mut xy = rest[j];
                if active {
                    let angle = FRAC_PI_2 * m.frequency_value() * t as f64 / (frames - 1) as f64
                        + m.phase_value()
                        + signer.phase
                        + 0.05 * local as f64;
                    let off = m.offset_value();
                    xy[0] += off[0] + m.amplitude_value() * angle.cos();
                    xy[1] += off[1] + m.amplitude_value() * angle.sin();
                }
                for (c, v) in xy.iter().enumerate() {
                    let jitter = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    values[(c * n + j) * frames + t] = signer.scale * v + signer.shift[c] + jitter;
                }
                values[(2 * n + j) * frames + t] = 1.0;
            }
        }
    }
    SkeletonSequence::new(Tensor::new(vec![3, n, frames], values)?, spec.class_id)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: SkeletonLayout,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
}

#[derive(Serialize)]
struct SampleLine<'a> {
    split: &'a str,
    label: usize,
    /// `[3, N, T]`.
    shape: &'a [usize],
    values: &'a [f64],
}

impl Dataset {
    /// One JSON object per sequence: train split first, then test.
    pub fn write_jsonl(&self, mut writer: impl std::io::Write) -> Result<()> {
        for (split, seqs) in [("train", &self.train), ("test", &self.test)] {
            for s in seqs {
                let line = SampleLine {
                    split,
                    label: s.label(),
                    shape: s.values().shape(),
                    values: s.values().data(),
                };
                serde_json::to_writer(&mut writer, &line)?;
                writer.write_all(b"\n")?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

const TRAIN_SIGNERS: usize = 6;
const TEST_SIGNERS: usize = 3;

/// Renders `samples_per_class` sequences per class; the first
/// `train_fraction` of each class use the training signer pool, the rest a
/// disjoint test pool.
pub fn generate_dataset(
    specs: &[SyntheticSignSpec],
    samples_per_class: usize,
    frames: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    for s in specs {
        s.validate()?;
    }
    let layout = SkeletonLayout::standard();
    let rest = rest_pose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_pool = signer_pool(&mut rng, TRAIN_SIGNERS);
    let test_pool = signer_pool(&mut rng, TEST_SIGNERS);
    let n_train = (samples_per_class as f64 * train_fraction).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for spec in specs {
        for i in 0..samples_per_class {
            let (pool, out) = if i < n_train {
                (&train_pool, &mut train)
            } else {
                (&test_pool, &mut test)
            };
            let signer = *pool.choose(&mut rng).expect("pools are non-empty");
            out.push(render(spec, &layout, &rest, frames, signer, &mut rng)?);
        }
    }
    Ok(Dataset { layout, train, test })
}

/// Expert passages and the mock generator's prior knowledge for the
/// synthetic classes.
///
/// The generator knows every part but the last active one, which it only
/// names as a component sign; the knowledge base describes that component.
/// Its answers also carry a wording remark that refinement drops.
pub fn synthetic_sources(specs: &[SyntheticSignSpec], seed: u64) -> Result<(Vec<SignEntry>, KnowledgeBase, MockBackend)> {
    let mut passages = Vec::new();
    let mut knowledge = Vec::new();
    let mut corpus = Vec::new();
    for spec in specs {
        let gloss = spec.gloss();
        let component = spec.component();
        let mut sentences: Vec<String> = spec.part_sentences().into_iter().map(|(_, s)| s).collect();
        let last = sentences.pop().expect("validated specs have an active part");
        passages.push(Passage::new(component.clone(), last));
        sentences.push(format!("Then make the sign for \"{component}\"."));
        let mut cap = gloss.chars();
        let cap = cap.next().map(|c| c.to_uppercase().collect::<String>() + cap.as_str()).unwrap_or_default();
        sentences.push(format!("'{cap}' is homophonous with '{component}'."));
        knowledge.push((gloss.clone(), sentences.join(" ")));
        corpus.push(SignEntry {
            class_id: spec.class_id,
            gloss,
        });
    }
    Ok((corpus, KnowledgeBase::new(passages)?, MockBackend::new(seed).with_knowledge(knowledge)))
}

/// Runs the description pipeline over the synthetic classes.
pub fn build_description_set(specs: &[SyntheticSignSpec], synonyms: usize, seed: u64) -> Result<PipelineOutput> {
    let (corpus, kb, backend) = synthetic_sources(specs, seed)?;
    let config = PipelineConfig {
        synonyms,
        ..Default::default()
    };
    run_pipeline(&corpus, &kb, &backend, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::describe::DescriptionKind;

    #[test]
    fn specs_are_valid_and_distinct() {
        let specs = generate_specs(20, 0.0, 3).unwrap();
        let sigs: BTreeSet<_> = specs.iter().map(|s| s.signature()).collect();
        assert_eq!(sigs.len(), 20);
        assert!(specs.iter().all(|s| s.validate().is_ok()));
        assert_eq!(generate_specs(20, 0.0, 3).unwrap(), specs);
    }

    #[test]
    fn split_sizes() {
        let specs = generate_specs(10, 0.01, 0).unwrap();
        let d = generate_dataset(&specs, 20, 8, 0.8, 0).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (160, 40));
        assert_eq!(d.train[0].joints(), JOINT_COUNT);
        assert_eq!(d.train[0].frames(), 8);
    }

    #[test]
    fn deterministic_under_seed() {
        let specs = generate_specs(3, 0.02, 1).unwrap();
        let a = generate_dataset(&specs, 4, 6, 0.5, 9).unwrap();
        let b = generate_dataset(&specs, 4, 6, 0.5, 9).unwrap();
        assert_eq!(a.train[0].values(), b.train[0].values());
        assert_eq!(a.test[3].values(), b.test[3].values());
    }

    #[test]
    fn noiseless_same_class_matches_up_to_signer() {
        let specs = generate_specs(1, 0.0, 1).unwrap();
        // with one train signer every train sample is identical
        let d = generate_dataset(&specs, 10, 6, 0.5, 4).unwrap();
        let distinct: BTreeSet<Vec<u64>> = d
            .train
            .iter()
            .map(|s| s.values().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert!(distinct.len() <= TRAIN_SIGNERS);
    }

    #[test]
    fn left_hand_amplitude_only_moves_left_hand_rows() {
        let mut a = SyntheticSignSpec {
            class_id: 0,
            motions: [PartMotion {
                amplitude: 0,
                frequency: 1,
                phase: 0,
                offset: 0,
            }; 5],
            active: [true; 5],
            noise: 0.0,
        };
        let mut b = a.clone();
        b.motions[PartId::LeftHand.index()].amplitude = 2;
        a.class_id = 0;
        b.class_id = 0;
        let da = generate_dataset(&[a], 2, 5, 0.5, 11).unwrap();
        let db = generate_dataset(&[b], 2, 5, 0.5, 11).unwrap();
        let layout = SkeletonLayout::standard();
        let left: BTreeSet<usize> = layout.joints(PartId::LeftHand).iter().copied().collect();
        let (sa, sb) = (&da.train[0], &db.train[0]);
        let mut changed = BTreeSet::new();
        for c in 0..3 {
            for j in 0..JOINT_COUNT {
                for t in 0..5 {
                    if sa.get(c, j, t) != sb.get(c, j, t) {
                        changed.insert(j);
                    }
                }
            }
        }
        assert!(!changed.is_empty());
        assert!(changed.is_subset(&left));
    }

    #[test]
    fn descriptions_cover_active_parts() {
        let specs = generate_specs(6, 0.0, 2).unwrap();
        let out = build_description_set(&specs, 2, 0).unwrap();
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        let parts = out.texts_by_class(DescriptionKind::Part);
        let refined = out.texts_by_class(DescriptionKind::Refined);
        for spec in &specs {
            let tagged: BTreeSet<PartId> = parts[&spec.class_id].iter().flat_map(|r| r.parts.clone()).collect();
            let active: BTreeSet<PartId> = spec.active_parts().collect();
            assert_eq!(tagged, active, "class {}", spec.class_id);
            let t = &refined[&spec.class_id][0].text;
            assert!(!t.contains("homophonous") && !t.contains("the sign for"), "{t}");
        }
    }
}
