//! Three-condition wh-movement stimuli from a combinatorial lexicon.
//!
//! Every candidate item fixes one word per lexicon slot. Realizing an item
//! gives one sentence per condition:
//!
//! ```text
//! bare         What did SUBJ V_bare   OBJ_acc    V_base ?
//! infinitival  What did SUBJ V_inf    OBJ_acc to V_base ?
//! finite       What did SUBJ V_bridge OBJ_nom    V_past ?
//! ```
//!
//! Candidates live in a mixed-radix index space (matrix subject slowest,
//! embedded verb fastest); sampling shuffles that space with a seeded
//! ChaCha stream, so output depends only on `(lexicon, n, seed)`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::labels::{Condition, Role, StimulusKey};

/// Slot sizes of the published lexicon.
pub const PAPER_SHAPE: LexiconShape = LexiconShape {
    matrix_subjects: 7,
    embedded_subjects: 7,
    bare_verbs: 4,
    infinitival_verbs: 4,
    bridge_verbs: 7,
    embedded_verbs: 20,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconShape {
    pub matrix_subjects: usize,
    pub embedded_subjects: usize,
    pub bare_verbs: usize,
    pub infinitival_verbs: usize,
    pub bridge_verbs: usize,
    pub embedded_verbs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectPair {
    pub accusative: String,
    pub nominative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerbForms {
    pub base: String,
    pub past: String,
}

/// Whether matrix subjects come from their own list or reuse the embedded
/// nominatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectMode {
    #[default]
    Disjoint,
    Shared,
}

/// The combinatorial lexicon. Construct through [`Lexicon::new`] or
/// [`Lexicon::load`]; both validate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub matrix_subjects: Vec<String>,
    pub embedded_subjects: Vec<SubjectPair>,
    pub bare_verbs: Vec<String>,
    pub infinitival_verbs: Vec<String>,
    pub bridge_verbs: Vec<String>,
    pub embedded_verbs: Vec<VerbForms>,
}

fn s(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Lexicon {
    pub fn new(
        matrix_subjects: Vec<String>,
        embedded_subjects: Vec<SubjectPair>,
        bare_verbs: Vec<String>,
        infinitival_verbs: Vec<String>,
        bridge_verbs: Vec<String>,
        embedded_verbs: Vec<VerbForms>,
    ) -> Result<Self> {
        let lex = Self {
            matrix_subjects,
            embedded_subjects,
            bare_verbs,
            infinitival_verbs,
            bridge_verbs,
            embedded_verbs,
        };
        lex.validate()?;
        Ok(lex)
    }

    /// Default word list. The matrix verbs are the published classes; the
    /// subjects and embedded verbs fill the published slot counts and are
    /// meant to be edited.
    pub fn paper_default() -> Self {
        Self::with_mode(SubjectMode::Disjoint)
    }

    pub fn with_mode(mode: SubjectMode) -> Self {
        let embedded_subjects: Vec<SubjectPair> = [
            ("him", "he"),
            ("her", "she"),
            ("them", "they"),
            ("us", "we"),
            ("me", "I"),
            ("thee", "thou"),
            ("hir", "ze"),
        ]
        .iter()
        .map(|(a, n)| SubjectPair {
            accusative: a.to_string(),
            nominative: n.to_string(),
        })
        .collect();
        let matrix_subjects = match mode {
            SubjectMode::Disjoint => s(&["Mary", "John", "Anna", "David", "Sarah", "Peter", "Emma"]),
            SubjectMode::Shared => embedded_subjects.iter().map(|p| p.nominative.clone()).collect(),
        };
        let embedded_verbs = [
            ("eat", "ate"),
            ("buy", "bought"),
            ("sell", "sold"),
            ("break", "broke"),
            ("steal", "stole"),
            ("find", "found"),
            ("hide", "hid"),
            ("take", "took"),
            ("bring", "brought"),
            ("build", "built"),
            ("write", "wrote"),
            ("wash", "washed"),
            ("throw", "threw"),
            ("catch", "caught"),
            ("cook", "cooked"),
            ("fix", "fixed"),
            ("paint", "painted"),
            ("drop", "dropped"),
            ("carry", "carried"),
            ("open", "opened"),
        ]
        .iter()
        .map(|(b, p)| VerbForms {
            base: b.to_string(),
            past: p.to_string(),
        })
        .collect();
        Self::new(
            matrix_subjects,
            embedded_subjects,
            s(&["see", "watch", "make", "let"]),
            s(&["expect", "want", "allow", "need"]),
            s(&["think", "believe", "claim", "say", "know", "suppose", "report"]),
            embedded_verbs,
        )
        .expect("built-in lexicon is valid")
    }

    /// Reads a JSON lexicon and validates it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let lex: Lexicon = serde_json::from_str(&text)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn shape(&self) -> LexiconShape {
        LexiconShape {
            matrix_subjects: self.matrix_subjects.len(),
            embedded_subjects: self.embedded_subjects.len(),
            bare_verbs: self.bare_verbs.len(),
            infinitival_verbs: self.infinitival_verbs.len(),
            bridge_verbs: self.bridge_verbs.len(),
            embedded_verbs: self.embedded_verbs.len(),
        }
    }

    /// Errors unless the slot sizes equal [`PAPER_SHAPE`].
    pub fn check_paper_shape(&self) -> Result<()> {
        let shape = self.shape();
        if shape != PAPER_SHAPE {
            return Err(Error::Lexicon(format!(
                "slot sizes {shape:?} differ from the expected {PAPER_SHAPE:?}"
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let singles = [
            ("matrix_subjects", &self.matrix_subjects),
            ("bare_verbs", &self.bare_verbs),
            ("infinitival_verbs", &self.infinitival_verbs),
            ("bridge_verbs", &self.bridge_verbs),
        ];
        for (slot, words) in singles {
            if words.is_empty() {
                return Err(Error::Lexicon(format!("slot `{slot}` is empty")));
            }
            for w in words {
                check_token(slot, w)?;
            }
        }
        if self.embedded_subjects.is_empty() {
            return Err(Error::Lexicon("slot `embedded_subjects` is empty".into()));
        }
        for p in &self.embedded_subjects {
            check_token("embedded_subjects", &p.accusative)?;
            check_token("embedded_subjects", &p.nominative)?;
            if p.accusative == p.nominative {
                return Err(Error::Lexicon(format!(
                    "embedded subject `{}` has identical accusative and nominative forms",
                    p.accusative
                )));
            }
        }
        if self.embedded_verbs.is_empty() {
            return Err(Error::Lexicon("slot `embedded_verbs` is empty".into()));
        }
        for v in &self.embedded_verbs {
            check_token("embedded_verbs", &v.base)?;
            check_token("embedded_verbs", &v.past)?;
        }
        Ok(())
    }

    fn radices(&self) -> [u64; 6] {
        let sh = self.shape();
        [
            sh.matrix_subjects as u64,
            sh.embedded_subjects as u64,
            sh.bare_verbs as u64,
            sh.infinitival_verbs as u64,
            sh.bridge_verbs as u64,
            sh.embedded_verbs as u64,
        ]
    }

    fn product_size(&self) -> u64 {
        self.radices().iter().product()
    }

    /// Slot choices for a raw mixed-radix index.
    fn decode(&self, mut raw: u64) -> [usize; 6] {
        let radices = self.radices();
        let mut digits = [0usize; 6];
        for slot in (0..6).rev() {
            digits[slot] = (raw % radices[slot]) as usize;
            raw /= radices[slot];
        }
        digits
    }

    fn is_valid(&self, digits: &[usize; 6]) -> bool {
        let matrix = &self.matrix_subjects[digits[0]];
        let esubj = &self.embedded_subjects[digits[1]];
        let verbs = [
            &self.bare_verbs[digits[2]],
            &self.infinitival_verbs[digits[3]],
            &self.bridge_verbs[digits[4]],
        ];
        let subjects_differ =
            !matrix.eq_ignore_ascii_case(&esubj.accusative) && !matrix.eq_ignore_ascii_case(&esubj.nominative);
        let verbs_differ = verbs[0] != verbs[1] && verbs[0] != verbs[2] && verbs[1] != verbs[2];
        subjects_differ && verbs_differ
    }

    fn item(&self, item_id: u32, digits: &[usize; 6]) -> Item {
        Item {
            item_id,
            matrix_subject: self.matrix_subjects[digits[0]].clone(),
            embedded_subject: self.embedded_subjects[digits[1]].clone(),
            bare_verb: self.bare_verbs[digits[2]].clone(),
            infinitival_verb: self.infinitival_verbs[digits[3]].clone(),
            bridge_verb: self.bridge_verbs[digits[4]].clone(),
            embedded_verb: self.embedded_verbs[digits[5]].clone(),
        }
    }
}

fn check_token(slot: &str, word: &str) -> Result<()> {
    if word.is_empty() || word.chars().any(char::is_whitespace) || word.contains('?') {
        return Err(Error::Lexicon(format!(
            "slot `{slot}` entry `{word}` is not a single nonempty token"
        )));
    }
    Ok(())
}

/// One lexical frame, realized in all three conditions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u32,
    pub matrix_subject: String,
    pub embedded_subject: SubjectPair,
    pub bare_verb: String,
    pub infinitival_verb: String,
    pub bridge_verb: String,
    pub embedded_verb: VerbForms,
}

impl Item {
    /// True when the item satisfies the distinctness constraints.
    pub fn is_valid(&self) -> bool {
        let m = &self.matrix_subject;
        !m.eq_ignore_ascii_case(&self.embedded_subject.accusative)
            && !m.eq_ignore_ascii_case(&self.embedded_subject.nominative)
            && self.bare_verb != self.infinitival_verb
            && self.bare_verb != self.bridge_verb
            && self.infinitival_verb != self.bridge_verb
    }

    /// The item's words ignoring its id, for set comparisons.
    pub fn frame(&self) -> Item {
        Item {
            item_id: 0,
            ..self.clone()
        }
    }
}

/// The valid part of the lexicon's Cartesian product.
pub struct Candidates<'a> {
    lexicon: &'a Lexicon,
    raw: Vec<u64>,
}

impl<'a> Candidates<'a> {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Candidate with the given ordinal; its `item_id` is that ordinal.
    pub fn get(&self, ordinal: usize) -> Option<Item> {
        let raw = *self.raw.get(ordinal)?;
        Some(self.lexicon.item(ordinal as u32, &self.lexicon.decode(raw)))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Item> + '_ {
        self.raw
            .iter()
            .enumerate()
            .map(|(ordinal, &raw)| self.lexicon.item(ordinal as u32, &self.lexicon.decode(raw)))
    }
}

/// Every item satisfying the distinctness constraints, in index order.
pub fn enumerate_candidates(lexicon: &Lexicon) -> Candidates<'_> {
    let raw = (0..lexicon.product_size())
        .filter(|&r| lexicon.is_valid(&lexicon.decode(r)))
        .collect();
    Candidates { lexicon, raw }
}

/// Uniform sample of `n` distinct candidates, without replacement.
pub fn sample_items(lexicon: &Lexicon, n: usize, seed: u64) -> Result<Vec<Item>> {
    let candidates = enumerate_candidates(lexicon);
    if n > candidates.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut order: Vec<u32> = (0..candidates.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = order.partial_shuffle(&mut rng, n);
    Ok(picked
        .iter()
        .map(|&ordinal| candidates.get(ordinal as usize).expect("ordinal in range"))
        .collect())
}

/// 0-based word indices of the tagged roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Positions {
    pub wh: usize,
    pub embedded_subject: usize,
    pub embedded_verb: usize,
}

impl Positions {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Wh => self.wh,
            Role::EmbeddedSubject => self.embedded_subject,
            Role::EmbeddedVerb => self.embedded_verb,
        }
    }
}

/// One realized sentence. Field order is the JSONL record layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stimulus {
    pub item_id: u32,
    pub condition: Condition,
    pub text: String,
    pub positions: Positions,
}

impl Stimulus {
    pub fn key(&self) -> StimulusKey {
        StimulusKey::new(self.item_id, self.condition)
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// Whitespace split, with a trailing `?` split into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        match word.strip_suffix('?') {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push("?".to_string());
            }
            _ => out.push(word.to_string()),
        }
    }
    out
}

/// The three stimuli of an item, in bare, infinitival, finite order.
pub fn realize_stimuli(item: &Item) -> [Stimulus; 3] {
    let subj = &item.matrix_subject;
    let acc = &item.embedded_subject.accusative;
    let nom = &item.embedded_subject.nominative;
    let base = &item.embedded_verb.base;
    let past = &item.embedded_verb.past;
    let make = |condition, text: String, embedded_verb| Stimulus {
        item_id: item.item_id,
        condition,
        text,
        positions: Positions {
            wh: 0,
            embedded_subject: 4,
            embedded_verb,
        },
    };
    [
        make(
            Condition::Bare,
            format!("What did {subj} {} {acc} {base}?", item.bare_verb),
            5,
        ),
        make(
            Condition::Infinitival,
            format!("What did {subj} {} {acc} to {base}?", item.infinitival_verb),
            6,
        ),
        make(
            Condition::Finite,
            format!("What did {subj} {} {nom} {past}?", item.bridge_verb),
            5,
        ),
    ]
}

/// Sampled items realized in sample order, three stimuli per item.
pub fn build_stimulus_set(lexicon: &Lexicon, n: usize, seed: u64) -> Result<Vec<Stimulus>> {
    let items = sample_items(lexicon, n, seed)?;
    Ok(items.iter().flat_map(realize_stimuli).collect())
}

pub fn write_stimuli_jsonl<W: Write>(mut out: W, stimuli: &[Stimulus]) -> Result<()> {
    for stim in stimuli {
        serde_json::to_writer(&mut out, stim)?;
        out.write_all(b"\n").map_err(|e| Error::Io {
            path: "<stimulus writer>".into(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_stimuli_jsonl<R: BufRead>(input: R) -> Result<Vec<Stimulus>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::Io {
            path: "<stimulus reader>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let stim: Stimulus = serde_json::from_str(&line)?;
        if !seen.insert(stim.key()) {
            return Err(Error::Alignment(format!("duplicate stimulus {}", stim.key())));
        }
        out.push(stim);
    }
    Ok(out)
}
