//! Pseudo relevance labels for historical query turns.
//!
//! For turn `n` the current query `q_n` is retrieved alone to get a base MRR
//! `S_q`. Each earlier turn `h_i` is then appended (`q_n h_i`) and retrieved
//! again; `h_i` is labeled positive iff that MRR is strictly higher than `S_q`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, write_string, ConversationSession, Qrels, RankedList};
use crate::error::{Error, Result};
use crate::metrics::mrr;

/// Default retrieval depth used for scoring.
pub const DEFAULT_DEPTH: usize = 100;

/// Anything that can rank the collection for a free-text query.
pub trait Retriever {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<RankedList>;
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<RankedList> {
        (**self).retrieve_text(query, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// Query expansion strategy for a turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpansionForm {
    /// The current query alone.
    Raw,
    /// Every earlier turn, oldest first, then the current query.
    All,
    /// Earlier turns whose flag is set, oldest first, then the current query.
    /// Holds exactly `n - 1` flags for turn `n`.
    Prl(Vec<bool>),
}

/// Builds the query text for turn `n` (1-based) under an expansion form.
pub fn compose_query(session: &ConversationSession, n: usize, form: &ExpansionForm) -> Result<String> {
    if n < 1 || n > session.len() {
        return Err(Error::InvalidArgument(format!(
            "turn {n} out of range for session `{}` with {} turns",
            session.session_id,
            session.len()
        )));
    }
    let history = &session.turns[..n - 1];
    let current = &session.turns[n - 1].text;
    let selected: Vec<&str> = match form {
        ExpansionForm::Raw => Vec::new(),
        ExpansionForm::All => history.iter().map(|t| t.text.as_str()).collect(),
        ExpansionForm::Prl(flags) => {
            if flags.len() != history.len() {
                return Err(Error::InvalidArgument(format!(
                    "turn {n} of session `{}` needs {} labels, got {}",
                    session.session_id,
                    history.len(),
                    flags.len()
                )));
            }
            history
                .iter()
                .zip(flags)
                .filter(|(_, &keep)| keep)
                .map(|(t, _)| t.text.as_str())
                .collect()
        }
    };
    let mut parts = selected;
    parts.push(current);
    Ok(parts.join(" "))
}

/// Single-candidate expansion used for labeling: current query first.
pub fn expand_with(current: &str, candidate: &str) -> String {
    format!("{current} {candidate}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrLabel {
    pub session_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    #[serde(rename = "candidate")]
    pub candidate_index: usize,
    pub label: Label,
    pub base_score: f64,
    pub expanded_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLabel {
    pub session_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    pub term: String,
    pub label: Label,
    pub base_score: f64,
    pub expanded_score: f64,
}

/// Labels plus the turns that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct PrlOutput<L> {
    pub labels: Vec<L>,
    /// Query keys of turns with no relevant judgment.
    pub skipped: Vec<String>,
}

impl<L> Default for PrlOutput<L> {
    fn default() -> Self {
        Self {
            labels: Vec::new(),
            skipped: Vec::new(),
        }
    }
}

fn score(retriever: &impl Retriever, query: &str, key: &str, qrels: &Qrels, k: usize) -> Result<f64> {
    let list = retriever.retrieve_text(query, k)?.with_key(key);
    Ok(mrr(&list, qrels, usize::MAX))
}

/// Turn-level labels for every turn `n >= 2` of a session, ordered by turn
/// then candidate.
pub fn generate_prl(
    session: &ConversationSession,
    retriever: &impl Retriever,
    qrels: &Qrels,
    k: usize,
) -> Result<PrlOutput<PrLabel>> {
    let mut out = PrlOutput::default();
    for n in 2..=session.len() {
        let turn = session.turn(n);
        let key = turn.key();
        if qrels.relevant(&key).is_empty() {
            out.skipped.push(key);
            continue;
        }
        let base = score(retriever, &turn.text, &key, qrels, k)?;
        for i in 1..n {
            let expanded = expand_with(&turn.text, &session.turn(i).text);
            let s = score(retriever, &expanded, &key, qrels, k)?;
            out.labels.push(PrLabel {
                session_id: session.session_id.clone(),
                turn_index: n,
                candidate_index: i,
                label: Label::from_bool(s > base),
                base_score: base,
                expanded_score: s,
            });
        }
    }
    Ok(out)
}

pub fn generate_prl_all(
    sessions: &[ConversationSession],
    retriever: &impl Retriever,
    qrels: &Qrels,
    k: usize,
) -> Result<PrlOutput<PrLabel>> {
    let mut out = PrlOutput::default();
    for s in sessions {
        let part = generate_prl(s, retriever, qrels, k)?;
        out.labels.extend(part.labels);
        out.skipped.extend(part.skipped);
    }
    Ok(out)
}

/// Term-level labels: candidates are the distinct history tokens (first
/// occurrence order) that the current query does not already contain.
pub fn generate_term_prl(
    session: &ConversationSession,
    retriever: &impl Retriever,
    qrels: &Qrels,
    k: usize,
) -> Result<PrlOutput<TermLabel>> {
    let mut out = PrlOutput::default();
    for n in 2..=session.len() {
        let turn = session.turn(n);
        let key = turn.key();
        if qrels.relevant(&key).is_empty() {
            out.skipped.push(key);
            continue;
        }
        let mut seen: HashSet<String> = tokenize(&turn.text).into_iter().collect();
        let candidates: Vec<String> = session.turns[..n - 1]
            .iter()
            .flat_map(|t| tokenize(&t.text))
            .filter(|t| seen.insert(t.clone()))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let base = score(retriever, &turn.text, &key, qrels, k)?;
        for term in candidates {
            let s = score(retriever, &expand_with(&turn.text, &term), &key, qrels, k)?;
            out.labels.push(TermLabel {
                session_id: session.session_id.clone(),
                turn_index: n,
                term,
                label: Label::from_bool(s > base),
                base_score: base,
                expanded_score: s,
            });
        }
    }
    Ok(out)
}

/// Labels grouped per turn as flags ordered by candidate index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTable {
    turns: BTreeMap<(String, usize), Vec<bool>>,
}

impl LabelTable {
    /// Fails unless every labeled turn `n` has exactly candidates `1..n`.
    pub fn from_labels(labels: &[PrLabel]) -> Result<Self> {
        let mut grouped: BTreeMap<(String, usize), BTreeMap<usize, bool>> = BTreeMap::new();
        for l in labels {
            if l.candidate_index < 1 || l.candidate_index >= l.turn_index {
                return Err(Error::InvalidArgument(format!(
                    "label for session `{}` turn {} has candidate {} outside 1..{}",
                    l.session_id, l.turn_index, l.candidate_index, l.turn_index
                )));
            }
            grouped
                .entry((l.session_id.clone(), l.turn_index))
                .or_default()
                .insert(l.candidate_index, l.label.is_positive());
        }
        let mut turns = BTreeMap::new();
        for ((sid, n), flags) in grouped {
            if flags.len() != n - 1 {
                return Err(Error::InvalidArgument(format!(
                    "session `{sid}` turn {n} has {} labels, expected {}",
                    flags.len(),
                    n - 1
                )));
            }
            turns.insert((sid, n), flags.into_values().collect());
        }
        Ok(Self { turns })
    }

    pub fn insert(&mut self, session_id: impl Into<String>, turn: usize, flags: Vec<bool>) {
        self.turns.insert((session_id.into(), turn), flags);
    }

    pub fn get(&self, session_id: &str, turn: usize) -> Option<&[bool]> {
        self.turns
            .get(&(session_id.to_string(), turn))
            .map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &[bool])> {
        self.turns
            .iter()
            .map(|((s, n), f)| (s.as_str(), *n, f.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.turns.values().flatten().filter(|&&b| b).count();
        let total: usize = self.turns.values().map(Vec::len).sum();
        (pos, total - pos)
    }
}

pub fn save_labels<T: Serialize>(path: impl AsRef<Path>, labels: &[T]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    write_string(path.as_ref(), &out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<PrLabel>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
