//! Corpus, conversation and judgment types plus their on-disk formats.
//!
//! Formats:
//!
//! - corpus: JSON Lines, `{"id": ..., "text": ...}` per line
//! - sessions: JSON Lines, `{"session_id": ..., "turns": [{"text": ...}, ...]}`
//! - qrels: `query_key 0 doc_id grade` (TREC)
//! - runs: `query_key Q0 doc_id rank score tag` (TREC)

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Flat key identifying one query turn in qrels and run files.
pub fn query_key(session_id: &str, turn_index: usize) -> String {
    debug_assert!(turn_index >= 1, "turn indices are 1-based");
    format!("{session_id}_{turn_index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
}

/// Ordered set of documents with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    docs: Vec<Document>,
    lookup: HashMap<String, usize>,
}

impl Collection {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(docs.len());
        for (pos, doc) in docs.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document at position {pos} has an empty id"
                )));
            }
            if lookup.insert(doc.doc_id.clone(), pos).is_some() {
                return Err(Error::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        Ok(Self { docs, lookup })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, pos: usize) -> Option<&Document> {
        self.docs.get(pos)
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.lookup.get(doc_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTurn {
    pub session_id: String,
    /// 1-based.
    pub turn_index: usize,
    pub text: String,
}

impl QueryTurn {
    pub fn key(&self) -> String {
        query_key(&self.session_id, self.turn_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationSession {
    pub session_id: String,
    pub turns: Vec<QueryTurn>,
}

impl ConversationSession {
    /// Builds a session from turn texts in order; turn indices start at 1.
    pub fn new<S: AsRef<str>>(session_id: impl Into<String>, texts: &[S]) -> Result<Self> {
        let session_id = session_id.into();
        if texts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "session `{session_id}` has no turns"
            )));
        }
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| QueryTurn {
                session_id: session_id.clone(),
                turn_index: i + 1,
                text: t.as_ref().to_string(),
            })
            .collect();
        Ok(Self { session_id, turns })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Turn `n` (1-based). Panics when out of range.
    pub fn turn(&self, n: usize) -> &QueryTurn {
        assert!(
            n >= 1 && n <= self.turns.len(),
            "turn {n} out of range for session `{}` with {} turns",
            self.session_id,
            self.turns.len()
        );
        &self.turns[n - 1]
    }
}

/// Graded relevance judgments keyed by query key, then doc id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Later insertions for the same pair overwrite earlier ones.
    pub fn insert(&mut self, query_key: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_key.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_key: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_key)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judged(&self, query_key: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_key)
    }

    pub fn contains_query(&self, query_key: &str) -> bool {
        self.judgments.contains_key(query_key)
    }

    /// Doc ids with grade >= 1 for a query.
    pub fn relevant(&self, query_key: &str) -> HashSet<&str> {
        self.judgments
            .get(query_key)
            .map(|m| {
                m.iter()
                    .filter(|(_, g)| **g >= 1)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_keys(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// Ranked retrieval result for one query.
///
/// Entries are sorted by descending score with ties broken by ascending doc
/// id, and contain no duplicate doc ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_key: String,
    entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts, deduplicates (keeping the best score per doc) and truncates to `k`.
    pub fn from_scores(query_key: impl Into<String>, mut scored: Vec<(String, f64)>, k: usize) -> Self {
        scored.sort_by(rank_order);
        let mut seen = HashSet::with_capacity(scored.len());
        scored.retain(|(d, _)| seen.insert(d.clone()));
        scored.truncate(k);
        Self {
            query_key: query_key.into(),
            entries: scored,
        }
    }

    pub fn empty(query_key: impl Into<String>) -> Self {
        Self {
            query_key: query_key.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_key(mut self, query_key: impl Into<String>) -> Self {
        self.query_key = query_key.into();
        self
    }
}

/// Descending score, then ascending doc id.
pub(crate) fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, line)` for non-blank lines, 1-based.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut docs = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let doc: Document =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        docs.push(doc);
    }
    Collection::new(docs)
}

pub fn save_corpus(path: impl AsRef<Path>, collection: &Collection) -> Result<()> {
    let mut out = String::new();
    for doc in collection.iter() {
        out.push_str(&serde_json::to_string(doc)?);
        out.push('\n');
    }
    write_string(path.as_ref(), &out)
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    text: String,
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<ConversationSession>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut sessions = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let rec: SessionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let texts: Vec<String> = rec.turns.into_iter().map(|t| t.text).collect();
        let session = ConversationSession::new(rec.session_id, &texts)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn save_sessions(path: impl AsRef<Path>, sessions: &[ConversationSession]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        let rec = SessionRecord {
            session_id: s.session_id.clone(),
            turns: s
                .turns
                .iter()
                .map(|t| TurnRecord {
                    text: t.text.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_string(path.as_ref(), &out)
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (line_no, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 4 fields `query_key 0 doc_id grade`, found {}", fields.len()),
            ));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad grade `{}`", fields[3])))?;
        if grade < 0 {
            return Err(Error::parse(path, line_no, format!("negative grade {grade}")));
        }
        qrels.insert(fields[0], fields[2], grade as u32);
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read_to_string(path)?, path)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (key, docs) in &qrels.judgments {
        for (doc, grade) in docs {
            let _ = writeln!(out, "{key} 0 {doc} {grade}");
        }
    }
    out
}

pub fn save_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    write_string(path.as_ref(), &format_qrels(qrels))
}

pub fn format_run(run: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for list in run {
        for (rank, (doc, score)) in list.entries().iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {} {} {:.6} {}", list.query_key, doc, rank + 1, score, tag);
        }
    }
    out
}

pub fn save_run(path: impl AsRef<Path>, run: &[RankedList], tag: &str) -> Result<()> {
    write_string(path.as_ref(), &format_run(run, tag))
}

/// Parses a TREC run. Lists come back in first-appearance order of their
/// query keys; entries within a list are ordered by the rank column.
pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RankedList>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
    for (line_no, line) in content_lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 6 fields `query_key Q0 doc_id rank score tag`, found {}", f.len()),
            ));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad rank `{}`", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad score `{}`", f[4])))?;
        let key = f[0].to_string();
        if !rows.contains_key(&key) {
            order.push(key.clone());
        }
        rows.entry(key).or_default().push((rank, f[2].to_string(), score));
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let mut r = rows.remove(&key).unwrap_or_default();
            r.sort_by_key(|(rank, _, _)| *rank);
            let mut seen = HashSet::new();
            let entries = r
                .into_iter()
                .filter(|(_, d, _)| seen.insert(d.clone()))
                .map(|(_, d, s)| (d, s))
                .collect();
            RankedList {
                query_key: key,
                entries,
            }
        })
        .collect())
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    parse_run(&read_to_string(path)?, path)
}
