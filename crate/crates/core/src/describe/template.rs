use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use crate::error::{Error, Result};

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    P1,
    P2,
    P3,
    P4,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [Self::P1, Self::P2, Self::P3, Self::P4];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::P1 => "P1",
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P4 => "P4",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub text: String,
}

const PRIMARY: &str = "You are a sign language interpreter with access to a reference dictionary.
Describe how to perform the sign \"{gloss}\" as a sequence of concrete movements.
Mention the hands, fingers, arms, face and mouth where they take part.

Reference entries:
{passages}

Only describe actions. Do not explain meanings or word origins.";

const SYNONYM: &str = "Rewrite the description of the sign \"{gloss}\" in different words.
Keep every handshape, location and movement unchanged, but vary the phrasing.
This is variant number {variant}.";

const REFINE: &str = "The description below may point to other signs instead of describing them.
Each such reference has been replaced with its dictionary entry.
Merge the text into one fluent description of actions and drop anything that is not an action.

Description:
{description}";

const DECOMPOSE: &str = "Split the description below into short clauses.
Prefix each clause with the body parts it involves, chosen from:
body, left_hand, right_hand, mouth, face. Use one line per clause in the form
parts: clause

Description:
{description}";

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let text = match id {
            TemplateId::P1 => PRIMARY,
            TemplateId::P2 => SYNONYM,
            TemplateId::P3 => REFINE,
            TemplateId::P4 => DECOMPOSE,
        };
        Self { id, text: text.into() }
    }

    /// Slots the pipeline fills for each template.
    pub fn required_slots(id: TemplateId) -> &'static [&'static str] {
        match id {
            TemplateId::P1 => &["gloss", "passages"],
            TemplateId::P2 => &["gloss", "variant"],
            TemplateId::P3 | TemplateId::P4 => &["description"],
        }
    }

    pub fn slots(&self) -> BTreeSet<String> {
        SLOT.captures_iter(&self.text).map(|c| c[1].to_owned()).collect()
    }

    pub fn fill(&self, values: &BTreeMap<&str, String>) -> Result<String> {
        let mut missing = None;
        let out = SLOT.replace_all(&self.text, |c: &regex::Captures<'_>| match values.get(&c[1]) {
            Some(v) => v.clone(),
            None => {
                missing.get_or_insert_with(|| c[1].to_owned());
                String::new()
            }
        });
        match missing {
            Some(slot) => Err(Error::Pipeline {
                stage: "template",
                message: format!("{} is missing slot {slot:?}", self.id),
            }),
            None => Ok(out.into_owned()),
        }
    }
}
