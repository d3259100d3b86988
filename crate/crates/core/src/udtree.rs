//! CoNLL-U ingestion, undirected dependency-tree distances and the per-item
//! UD-distance invariance filter.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Condition, Pair, StimulusKey};
use crate::stimgen::Stimulus;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position.
    pub index: usize,
    pub form: String,
    /// 0 marks the root.
    pub head: usize,
    pub deprel: String,
}

/// A validated dependency tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSentence {
    pub stimulus_key: Option<StimulusKey>,
    pub sent_id: Option<String>,
    pub tokens: Vec<Token>,
}

impl ParsedSentence {
    /// Builds a sentence from `(form, head, deprel)` triples and validates it.
    pub fn from_heads<'a>(
        stimulus_key: Option<StimulusKey>,
        tokens: impl IntoIterator<Item = (&'a str, usize, &'a str)>,
    ) -> Result<Self> {
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(i, (form, head, deprel))| Token {
                index: i + 1,
                form: form.to_string(),
                head,
                deprel: deprel.to_string(),
            })
            .collect();
        let sent = Self {
            stimulus_key,
            sent_id: None,
            tokens,
        };
        sent.validate()?;
        Ok(sent)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stimulus key if present, else `sent_id`.
    pub fn lookup_key(&self) -> Option<String> {
        self.stimulus_key
            .map(|k| k.to_string())
            .or_else(|| self.sent_id.clone())
    }

    fn label(&self, ordinal: usize) -> String {
        self.lookup_key().unwrap_or_else(|| format!("#{ordinal}"))
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    fn validate(&self) -> Result<()> {
        self.validate_labelled(&self.label(0))
    }

    fn validate_labelled(&self, label: &str) -> Result<()> {
        let fail = |reason: String| Error::Conllu {
            sentence: label.to_string(),
            reason,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(fail("sentence has no tokens".into()));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i + 1 {
                return Err(fail(format!(
                    "token ids must run 1..={n} in order, found {} at line {}",
                    tok.index,
                    i + 1
                )));
            }
            if tok.head > n {
                return Err(fail(format!("token {} has head {} beyond {n}", tok.index, tok.head)));
            }
            if tok.head == tok.index {
                return Err(fail(format!("cycle: token {} is its own head", tok.index)));
            }
        }
        // every chain of heads must reach 0 within n steps
        for start in 1..=n {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(fail(format!("cycle in head graph reachable from token {start}")));
                }
            }
        }
        let roots: Vec<usize> = self.tokens.iter().filter(|t| t.head == 0).map(|t| t.index).collect();
        if roots.len() != 1 {
            return Err(fail(format!("expected exactly one root, found {roots:?}")));
        }
        Ok(())
    }

    fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while self.tokens[i - 1].head != 0 {
            i = self.tokens[i - 1].head;
            d += 1;
        }
        d
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.tokens.len() {
            return Err(Error::TokenIndex {
                index: i,
                len: self.tokens.len(),
            });
        }
        Ok(())
    }
}

fn parse_block(lines: &[&str], ordinal: usize) -> Result<ParsedSentence> {
    let mut stimulus_key = None;
    let mut sent_id = None;
    let mut tokens = Vec::new();
    let provisional = |sent_id: &Option<String>, key: &Option<StimulusKey>| {
        key.map(|k| k.to_string())
            .or_else(|| sent_id.clone())
            .unwrap_or_else(|| format!("#{ordinal}"))
    };
    for line in lines {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((name, value)) = comment.split_once('=') {
                match name.trim() {
                    "stimulus_key" => {
                        stimulus_key = Some(value.trim().parse().map_err(|e| Error::Conllu {
                            sentence: format!("#{ordinal}"),
                            reason: format!("bad stimulus_key comment: {e}"),
                        })?)
                    }
                    "sent_id" => sent_id = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let fail = |reason: String| Error::Conllu {
            sentence: provisional(&sent_id, &stimulus_key),
            reason,
        };
        if cols.len() != 10 {
            return Err(fail(format!("expected 10 tab-separated columns, got {}", cols.len())));
        }
        if cols[0].contains('-') {
            return Err(fail(format!("multiword token range `{}` is not supported", cols[0])));
        }
        if cols[0].contains('.') {
            return Err(fail(format!("empty node `{}` is not supported", cols[0])));
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| fail(format!("bad token id `{}`", cols[0])))?;
        let head: usize = cols[6]
            .parse()
            .map_err(|_| fail(format!("bad head `{}` for token {index}", cols[6])))?;
        tokens.push(Token {
            index,
            form: cols[1].to_string(),
            head,
            deprel: cols[7].to_string(),
        });
    }
    let sent = ParsedSentence {
        stimulus_key,
        sent_id,
        tokens,
    };
    sent.validate_labelled(&sent.label(ordinal))?;
    Ok(sent)
}

/// Parses a CoNLL-U document, one result per sentence, so a bad sentence
/// does not hide its neighbours.
pub fn parse_conllu_each(text: &str) -> Vec<Result<ParsedSentence>> {
    let mut out = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !block.is_empty() {
                out.push(parse_block(&block, out.len() + 1));
                block.clear();
            }
        } else {
            block.push(line);
        }
    }
    out
}

/// Parses a CoNLL-U document, failing on the first malformed sentence.
pub fn parse_conllu(text: &str) -> Result<Vec<ParsedSentence>> {
    parse_conllu_each(text).into_iter().collect()
}

/// Serializes sentences back to CoNLL-U with the unused columns as `_`.
pub fn write_conllu<W: Write>(mut out: W, sentences: &[ParsedSentence]) -> std::io::Result<()> {
    for sent in sentences {
        if let Some(k) = sent.stimulus_key {
            writeln!(out, "# stimulus_key = {k}")?;
        }
        if let Some(id) = &sent.sent_id {
            writeln!(out, "# sent_id = {id}")?;
        }
        for t in &sent.tokens {
            writeln!(
                out,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_",
                t.index, t.form, t.head, t.deprel
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Number of edges on the undirected path between 1-based tokens `i`, `j`.
pub fn tree_distance(sentence: &ParsedSentence, i: usize, j: usize) -> Result<usize> {
    sentence.check_index(i)?;
    sentence.check_index(j)?;
    let (mut a, mut b) = (i, j);
    let (mut da, mut db) = (sentence.depth(a), sentence.depth(b));
    let mut dist = 0;
    while da > db {
        a = sentence.tokens[a - 1].head;
        da -= 1;
        dist += 1;
    }
    while db > da {
        b = sentence.tokens[b - 1].head;
        db -= 1;
        dist += 1;
    }
    while a != b {
        a = sentence.tokens[a - 1].head;
        b = sentence.tokens[b - 1].head;
        dist += 2;
    }
    Ok(dist)
}

/// Dense symmetric matrix of pairwise tree distances, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let n = rows.len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>();
        assert_eq!(data.len(), n * n, "distance matrix must be square");
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.data.chunks(self.n.max(1)).map(<[u32]>::to_vec).collect()
    }

    /// Undirected edges `(i, j)` with `i < j` and distance 1.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// All pairwise distances, by breadth-first search from every token.
pub fn gold_distance_matrix(sentence: &ParsedSentence) -> DistanceMatrix {
    let n = sentence.len();
    let mut adj = vec![Vec::new(); n];
    for t in &sentence.tokens {
        if t.head != 0 {
            adj[t.index - 1].push(t.head - 1);
            adj[t.head - 1].push(t.index - 1);
        }
    }
    let mut data = vec![u32::MAX; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        data[src * n + src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = data[src * n + u];
            for &v in &adj[u] {
                if data[src * n + v] == u32::MAX {
                    data[src * n + v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n, data }
}

/// Per-condition distance of one pair and whether they all agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvarianceVerdict {
    pub item_id: u32,
    pub pair: Pair,
    pub distances: BTreeMap<Condition, usize>,
    pub pass: bool,
}

impl InvarianceVerdict {
    /// The wh-esubj deviation direction that cannot fake the predicted
    /// effect: infinitival strictly shorter than bare.
    pub fn shorter_in_infinitival(&self) -> bool {
        matches!(
            (self.distances.get(&Condition::Infinitival), self.distances.get(&Condition::Bare)),
            (Some(i), Some(b)) if i < b
        )
    }
}

/// Checks the stimulus words against the parse token by token.
pub fn check_alignment(parse: &ParsedSentence, stimulus: &Stimulus) -> Result<()> {
    let words = stimulus.tokens();
    let forms: Vec<&str> = parse.forms().collect();
    if forms.len() != words.len() {
        return Err(Error::Invariance {
            item_id: stimulus.item_id,
            reason: format!(
                "{}: parse has {} tokens, stimulus has {} words (retokenized?)",
                stimulus.key(),
                forms.len(),
                words.len()
            ),
        });
    }
    for (w, (form, word)) in forms.iter().zip(&words).enumerate() {
        if form != word {
            return Err(Error::Invariance {
                item_id: stimulus.item_id,
                reason: format!(
                    "{}: word {w} is `{word}` but CoNLL-U token {} is `{form}`",
                    stimulus.key(),
                    w + 1
                ),
            });
        }
    }
    Ok(())
}

/// Compares each pair's tree distance across the three conditions of one
/// item. `parses` and `stimuli` may come in any order; they are matched by
/// condition.
pub fn verify_invariance(parses: &[&ParsedSentence], stimuli: &[&Stimulus]) -> Result<[InvarianceVerdict; 2]> {
    let item_id = stimuli.first().map(|s| s.item_id).ok_or_else(|| Error::Invariance {
        item_id: 0,
        reason: "no stimuli supplied".into(),
    })?;
    let fail = |reason: String| Error::Invariance { item_id, reason };
    let mut by_cond: BTreeMap<Condition, (&ParsedSentence, &Stimulus)> = BTreeMap::new();
    for cond in Condition::ALL {
        let stim = stimuli
            .iter()
            .find(|s| s.condition == cond)
            .ok_or_else(|| fail(format!("missing {cond} stimulus")))?;
        if stim.item_id != item_id {
            return Err(fail(format!("stimulus {} belongs to another item", stim.key())));
        }
        let parse = parses
            .iter()
            .find(|p| p.stimulus_key == Some(stim.key()))
            .ok_or_else(|| fail(format!("missing {cond} parse")))?;
        check_alignment(parse, stim)?;
        by_cond.insert(cond, (*parse, *stim));
    }
    let verdict = |pair: Pair| -> Result<InvarianceVerdict> {
        let (ra, rb) = pair.roles();
        let mut distances = BTreeMap::new();
        for (cond, (parse, stim)) in &by_cond {
            let d = tree_distance(parse, stim.positions.get(ra) + 1, stim.positions.get(rb) + 1)?;
            distances.insert(*cond, d);
        }
        let first = distances[&Condition::Bare];
        let pass = distances.values().all(|&d| d == first);
        Ok(InvarianceVerdict {
            item_id,
            pair,
            distances,
            pass,
        })
    };
    Ok([verdict(Pair::WhEsubj)?, verdict(Pair::EsubjEvb)?])
}

/// An item dropped from every pair before any distance was compared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub item_id: u32,
    pub reason: String,
}

/// Runs [`verify_invariance`] for every item in `stimuli`. Items whose parses
/// are missing or misaligned are excluded with a reason.
pub fn verify_stimulus_set(
    stimuli: &[Stimulus],
    parses: &[ParsedSentence],
) -> (Vec<InvarianceVerdict>, Vec<Exclusion>) {
    let by_key: HashMap<StimulusKey, &ParsedSentence> =
        parses.iter().filter_map(|p| p.stimulus_key.map(|k| (k, p))).collect();
    let mut items: BTreeMap<u32, Vec<&Stimulus>> = BTreeMap::new();
    let mut order = Vec::new();
    for s in stimuli {
        let e = items.entry(s.item_id).or_default();
        if e.is_empty() {
            order.push(s.item_id);
        }
        e.push(s);
    }
    let mut verdicts = Vec::new();
    let mut excluded = Vec::new();
    for item_id in order {
        let stims = &items[&item_id];
        let found: Vec<&ParsedSentence> = stims.iter().filter_map(|s| by_key.get(&s.key()).copied()).collect();
        match verify_invariance(&found, stims) {
            Ok(v) => verdicts.extend(v),
            Err(e) => {
                log::warn!("excluding item {item_id}: {e}");
                excluded.push(Exclusion {
                    item_id,
                    reason: e.to_string(),
                });
            }
        }
    }
    (verdicts, excluded)
}

pub fn write_verdicts_jsonl<W: Write>(mut out: W, verdicts: &[InvarianceVerdict]) -> Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n").map_err(|e| Error::Io {
            path: "<verdict writer>".into(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_verdicts_jsonl<R: BufRead>(input: R) -> Result<Vec<InvarianceVerdict>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::Io {
            path: "<verdict reader>".into(),
            source: e,
        })?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Lookup of pass/fail per `(item, pair)`; absent entries count as failed.
#[derive(Debug, Clone, Default)]
pub struct VerdictTable {
    pass: HashMap<(u32, Pair), bool>,
}

impl VerdictTable {
    pub fn new(verdicts: &[InvarianceVerdict]) -> Self {
        Self {
            pass: verdicts.iter().map(|v| ((v.item_id, v.pair), v.pass)).collect(),
        }
    }

    /// Every item passes every pair.
    pub fn all_pass(item_ids: impl IntoIterator<Item = u32>) -> Self {
        let mut pass = HashMap::new();
        for id in item_ids {
            for pair in Pair::ALL {
                pass.insert((id, pair), true);
            }
        }
        Self { pass }
    }

    pub fn passes(&self, item_id: u32, pair: Pair) -> bool {
        self.pass.get(&(item_id, pair)).copied().unwrap_or(false)
    }
}
