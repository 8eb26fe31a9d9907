//! Topic-switch analysis of relevance labels and per-turn comparison of two
//! runs.
//!
//! A turn's switch type is read off its candidate labels: if the previous
//! turn is useful the conversation stayed on topic; if nothing in the history
//! is useful the topic shifted; otherwise the user returned to an earlier
//! topic.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{query_key, Qrels, RankedList};
use crate::error::{Error, Result};
use crate::metrics::mrr;
use crate::prl::LabelTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SwitchType {
    TopicShift,
    TopicReturn,
    NoSwitch,
}

impl SwitchType {
    pub const ALL: [SwitchType; 3] = [SwitchType::TopicShift, SwitchType::TopicReturn, SwitchType::NoSwitch];
}

impl fmt::Display for SwitchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwitchType::TopicShift => "TopicShift",
            SwitchType::TopicReturn => "TopicReturn",
            SwitchType::NoSwitch => "NoSwitch",
        })
    }
}

/// Switch type of turn `n` from its `n - 1` candidate labels.
pub fn classify_switch(labels: &[bool]) -> Result<SwitchType> {
    let (&last, earlier) = labels
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("the first turn has no switch type".into()))?;
    Ok(if last {
        SwitchType::NoSwitch
    } else if earlier.iter().any(|&l| l) {
        SwitchType::TopicReturn
    } else {
        SwitchType::TopicShift
    })
}

/// `1 + number of topic shifts`.
pub fn topics_per_conversation(switches: &[SwitchType]) -> usize {
    1 + switches.iter().filter(|&&s| s == SwitchType::TopicShift).count()
}

/// Switch type of every labeled turn, keyed by query key.
pub fn switch_map(labels: &LabelTable) -> Result<BTreeMap<String, SwitchType>> {
    labels
        .iter()
        .map(|(sid, n, flags)| Ok((query_key(sid, n), classify_switch(flags)?)))
        .collect()
}

/// Topic count of every session in `labels`.
pub fn session_topic_counts(labels: &LabelTable) -> Result<BTreeMap<String, usize>> {
    let mut per_session: BTreeMap<String, Vec<SwitchType>> = BTreeMap::new();
    for (sid, _, flags) in labels.iter() {
        per_session.entry(sid.to_string()).or_default().push(classify_switch(flags)?);
    }
    Ok(per_session
        .into_iter()
        .map(|(sid, switches)| (sid, topics_per_conversation(&switches)))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Items in the reference judgment.
    pub count: usize,
    /// Of those, items the other judgment agrees on.
    pub shared: usize,
    pub percent: f64,
}

impl Overlap {
    fn new(count: usize, shared: usize) -> Self {
        let percent = if count == 0 {
            0.0
        } else {
            100.0 * shared as f64 / count as f64
        };
        Self { count, shared, percent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Per switch type under `a`: turns of that type and how many `b` types the same.
    pub switch_level: BTreeMap<SwitchType, Overlap>,
    /// Positive candidates under `a` that are also positive under `b`.
    pub candidate_level: Overlap,
}

/// Agreement of judgment `b` with reference judgment `a`.
pub fn judgment_agreement(a: &LabelTable, b: &LabelTable) -> Result<AgreementReport> {
    let a_turns: Vec<_> = a.iter().collect();
    let b_turns: Vec<_> = b.iter().collect();
    let same_index = a_turns.len() == b_turns.len()
        && a_turns
            .iter()
            .zip(&b_turns)
            .all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2.len() == y.2.len());
    if !same_index {
        return Err(Error::InvalidArgument(
            "judgments cover different (session, turn, candidate) sets".into(),
        ));
    }
    let mut counts: BTreeMap<SwitchType, (usize, usize)> = SwitchType::ALL.iter().map(|&t| (t, (0, 0))).collect();
    let (mut positives, mut shared_positives) = (0, 0);
    for ((_, _, fa), (_, _, fb)) in a_turns.iter().zip(&b_turns) {
        let ta = classify_switch(fa)?;
        let tb = classify_switch(fb)?;
        let entry = counts.entry(ta).or_default();
        entry.0 += 1;
        if ta == tb {
            entry.1 += 1;
        }
        for (&x, &y) in fa.iter().zip(fb.iter()) {
            if x {
                positives += 1;
                if y {
                    shared_positives += 1;
                }
            }
        }
    }
    Ok(AgreementReport {
        switch_level: counts
            .into_iter()
            .map(|(t, (count, shared))| (t, Overlap::new(count, shared)))
            .collect(),
        candidate_level: Overlap::new(positives, shared_positives),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
    Tie,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub success: usize,
    pub failure: usize,
    pub tie: usize,
}

impl OutcomeCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Success => self.success += 1,
            Outcome::Failure => self.failure += 1,
            Outcome::Tie => self.tie += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.success + self.failure + self.tie
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub query: String,
    pub mrr_selected: f64,
    pub mrr_all: f64,
    pub outcome: Outcome,
    pub switch: Option<SwitchType>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessFailure {
    pub turns: Vec<TurnOutcome>,
    pub totals: OutcomeCounts,
    pub by_switch: BTreeMap<SwitchType, OutcomeCounts>,
    /// Query keys present in only one of the runs.
    pub skipped: Vec<String>,
}

pub fn outcome(mrr_selected: f64, mrr_all: f64) -> Outcome {
    if mrr_selected > mrr_all {
        Outcome::Success
    } else if mrr_selected < mrr_all {
        Outcome::Failure
    } else {
        Outcome::Tie
    }
}

/// Per-turn comparison of a selective-expansion run against the
/// all-expansion run, histogrammed by switch type.
pub fn success_failure(
    run_selected: &[RankedList],
    run_all: &[RankedList],
    qrels: &Qrels,
    switches: &BTreeMap<String, SwitchType>,
) -> SuccessFailure {
    let by_key = |run: &'_ [RankedList]| -> BTreeMap<String, f64> {
        run.iter()
            .map(|l| (l.query_key.clone(), mrr(l, qrels, usize::MAX)))
            .collect()
    };
    let selected = by_key(run_selected);
    let all = by_key(run_all);
    let mut report = SuccessFailure::default();
    for (key, &a) in &selected {
        let Some(&b) = all.get(key) else {
            report.skipped.push(key.clone());
            continue;
        };
        let o = outcome(a, b);
        let switch = switches.get(key).copied();
        report.totals.add(o);
        if let Some(t) = switch {
            report.by_switch.entry(t).or_default().add(o);
        }
        report.turns.push(TurnOutcome {
            query: key.clone(),
            mrr_selected: a,
            mrr_all: b,
            outcome: o,
            switch,
        });
    }
    report
        .skipped
        .extend(all.keys().filter(|k| !selected.contains_key(*k)).cloned());
    report.skipped.sort();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicsSummary {
    pub mean: f64,
    pub per_session: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub switch_counts: BTreeMap<SwitchType, usize>,
    pub topics_per_conv: TopicsSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_failure: Option<SuccessFailure>,
}

/// Switch counts and topic counts under `labels`, plus optional agreement
/// with `predicted` and run comparison.
pub fn analyze(
    labels: &LabelTable,
    predicted: Option<&LabelTable>,
    runs: Option<(&[RankedList], &[RankedList], &Qrels)>,
) -> Result<AnalysisReport> {
    let switches = switch_map(labels)?;
    let mut switch_counts: BTreeMap<SwitchType, usize> = SwitchType::ALL.iter().map(|&t| (t, 0)).collect();
    for t in switches.values() {
        *switch_counts.entry(*t).or_default() += 1;
    }
    let per_session = session_topic_counts(labels)?;
    let mean = if per_session.is_empty() {
        0.0
    } else {
        per_session.values().sum::<usize>() as f64 / per_session.len() as f64
    };
    let agreement = predicted.map(|p| judgment_agreement(labels, p)).transpose()?;
    let success_failure = runs.map(|(sel, all, qrels)| success_failure(sel, all, qrels, &switches));
    Ok(AnalysisReport {
        switch_counts,
        topics_per_conv: TopicsSummary { mean, per_session },
        agreement,
        success_failure,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per switch type: turn count and, when available, outcome counts.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("switch_type\tturns\tsuccess\tfailure\ttie\n");
        let empty = HashMap::new();
        let hist: HashMap<SwitchType, OutcomeCounts> = self
            .success_failure
            .as_ref()
            .map(|sf| sf.by_switch.iter().map(|(k, v)| (*k, *v)).collect())
            .unwrap_or(empty);
        for t in SwitchType::ALL {
            let c = hist.get(&t).copied().unwrap_or_default();
            out.push_str(&format!(
                "{t}\t{}\t{}\t{}\t{}\n",
                self.switch_counts.get(&t).copied().unwrap_or(0),
                c.success,
                c.failure,
                c.tie
            ));
        }
        out
    }
}
