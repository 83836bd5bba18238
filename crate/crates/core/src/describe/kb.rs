use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, punctuation folded to spaces, whitespace collapsed.
pub fn normalize_key(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_set(text: &str) -> BTreeSet<String> {
    normalize_key(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub key: String,
    pub text: String,
}

impl Passage {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            text: text.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    /// Position of the passage in the knowledge base.
    pub index: usize,
    pub score: f64,
}

/// Expert passages keyed by sign name, searchable by key-token overlap.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    passages: Vec<Passage>,
    tokens: Vec<BTreeSet<String>>,
    by_key: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_key = HashMap::new();
        let mut tokens = Vec::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let key = normalize_key(&p.key);
            if key.is_empty() {
                return Err(Error::Format(format!("passage {i} has an empty key")));
            }
            if p.text.trim().is_empty() {
                return Err(Error::Format(format!("passage {:?} has empty text", p.key)));
            }
            if by_key.insert(key.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate knowledge key {key:?}")));
            }
            tokens.push(token_set(&p.key));
        }
        Ok(Self {
            passages,
            tokens,
            by_key,
        })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Passage> {
        self.passages.get(index)
    }

    /// Exact lookup after normalization.
    pub fn lookup(&self, key: &str) -> Option<&Passage> {
        self.by_key.get(&normalize_key(key)).map(|&i| &self.passages[i])
    }

    /// Top-`k` passages by Jaccard overlap of query and key tokens.
    ///
    /// Passages sharing no token with the query are omitted; ties keep
    /// knowledge-base order.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::Parameter("retrieval needs k >= 1".into()));
        }
        let q = token_set(query);
        let mut scored: Vec<Retrieved> = self
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(index, t)| {
                let inter = q.intersection(t).count();
                (inter > 0).then(|| Retrieved {
                    index,
                    score: inter as f64 / q.union(t).count() as f64,
                })
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut passages = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            passages.push(serde_json::from_str(&line)?);
        }
        Self::new(passages)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for p in &self.passages {
            serde_json::to_writer(&mut writer, p)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Small expert corpus shipped for tests and demos.
    pub fn reference() -> Self {
        let passages = REFERENCE_PASSAGES.iter().map(|(k, t)| Passage::new(*k, *t)).collect();
        Self::new(passages).expect("reference passages are well formed")
    }
}

const REFERENCE_PASSAGES: &[(&str, &str)] = &[
    (
        "love",
        "Gently caress the back of the thumb with one hand, expressing a feeling of \"tenderness\".",
    ),
    (
        "Q",
        "One hand with the right thumb down, the index and middle fingers together on top, the thumb, index, and middle fingers pinched together, the fingertips pointing forward and slightly to the left, the ring and little fingers bent, the fingertips touching the palm.",
    ),
    ("devoted", "Make the sign for \"love\". Extend the thumb with one hand and place it on the palm of the other hand, then raise it upwards."),
    ("ambience", "One hand forms the manual sign \"Q\", with the fingertips pointing inward, placed at the nostrils. Extend your index finger with one hand and make a big circle with your fingertips facing down."),
    ("one", "Extend the index finger of the right hand upward with the palm facing out. 'One' is homophonous with 'idea'."),
    ("agree", "Both index fingers point forward and move down together while the head nods once. This represents agreement."),
    ("thank you", "Touch the chin with the fingertips of the flat right hand, then move the hand forward and down."),
    ("good", "Raise the thumb of the right hand with the other fingers closed into a fist."),
    ("friend", "Hook the index fingers of both hands together, then reverse them."),
    ("help", "Place the right fist on the left palm and lift both hands upward together."),
    ("home", "Bring the fingertips of the right hand to the cheek near the mouth, then to the cheek near the ear."),
    ("water", "Tap the chin twice with the index finger of the right hand while the lips are slightly rounded."),
    ("eat", "Bring the bunched fingertips of the right hand to the lips repeatedly."),
    ("drink", "Curve the right hand like holding a cup and tip it toward the mouth."),
    ("sleep", "Lay the cheek on the open palm of the right hand and close the eyes."),
    ("learn", "Lift the fingers from the left palm to the forehead with the right hand."),
    ("teacher", "Form the sign for \"learn\", then move both flat hands down along the sides of the torso."),
    ("book", "Press both palms together and open them like the covers of a book."),
    ("happy", "Brush the chest upward twice with the flat right hand while smiling with raised cheeks."),
    ("sad", "Draw both open hands down in front of the face while the brows lower."),
    ("yes", "Nod the right fist up and down at the wrist like a nodding head."),
    ("no", "Snap the index and middle fingers of the right hand shut against the thumb."),
    ("A", "Close the right hand into a fist with the thumb resting along the side of the index finger."),
    ("B", "Hold the right hand flat with the four fingers together pointing up and the thumb folded across the palm."),
    ("C", "Curve the fingers and thumb of the right hand into the shape of the letter C."),
    ("shout", "Open the mouth wide and push the tongue forward while both hands rise from the chest past the face."),
];
