//! Small closed vocabularies shared by every stage: conditions, probe pairs,
//! contrasts, tagged roles and stimulus keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Clause type of the embedded complement. `Bare` is the reference level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Bare,
    Infinitival,
    Finite,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Bare, Condition::Infinitival, Condition::Finite];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Bare => "bare",
            Condition::Infinitival => "infinitival",
            Condition::Finite => "finite",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bare" => Ok(Condition::Bare),
            "infinitival" => Ok(Condition::Infinitival),
            "finite" => Ok(Condition::Finite),
            other => Err(Error::Alignment(format!("unknown condition `{other}`"))),
        }
    }
}

/// Tagged word roles inside a stimulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Wh,
    EmbeddedSubject,
    EmbeddedVerb,
}

/// The two probed word pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    WhEsubj,
    EsubjEvb,
}

impl Pair {
    pub const ALL: [Pair; 2] = [Pair::WhEsubj, Pair::EsubjEvb];

    pub fn roles(self) -> (Role, Role) {
        match self {
            Pair::WhEsubj => (Role::Wh, Role::EmbeddedSubject),
            Pair::EsubjEvb => (Role::EmbeddedSubject, Role::EmbeddedVerb),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pair::WhEsubj => "wh_esubj",
            Pair::EsubjEvb => "esubj_evb",
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Treatment contrast against the bare baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    Fin,
    Inf,
}

impl Contrast {
    pub const ALL: [Contrast; 2] = [Contrast::Fin, Contrast::Inf];

    pub fn condition(self) -> Condition {
        match self {
            Contrast::Fin => Condition::Finite,
            Contrast::Inf => Condition::Infinitival,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Contrast::Fin => "fin",
            Contrast::Inf => "inf",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one stimulus: `<item_id>/<condition>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StimulusKey {
    pub item_id: u32,
    pub condition: Condition,
}

impl StimulusKey {
    pub fn new(item_id: u32, condition: Condition) -> Self {
        Self { item_id, condition }
    }
}

impl fmt::Display for StimulusKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.item_id, self.condition)
    }
}

impl FromStr for StimulusKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (id, cond) = s
            .trim()
            .split_once('/')
            .ok_or_else(|| Error::Alignment(format!("malformed stimulus key `{s}`")))?;
        let item_id = id
            .parse()
            .map_err(|_| Error::Alignment(format!("malformed item id in stimulus key `{s}`")))?;
        Ok(Self {
            item_id,
            condition: cond.parse()?,
        })
    }
}
