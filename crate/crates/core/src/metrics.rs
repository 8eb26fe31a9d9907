//! trec_eval-style ranking metrics: MRR, NDCG@k (linear gain) and Recall@k.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Qrels, RankedList};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricSpec {
    /// Reciprocal rank; `None` means the full retrieved list.
    Mrr(Option<usize>),
    Ndcg(usize),
    Recall(usize),
}

impl MetricSpec {
    /// The reporting set: MRR, NDCG@3, Recall@10, Recall@20, Recall@100.
    pub fn standard() -> Vec<MetricSpec> {
        vec![
            MetricSpec::Mrr(None),
            MetricSpec::Ndcg(3),
            MetricSpec::Recall(10),
            MetricSpec::Recall(20),
            MetricSpec::Recall(100),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MetricSpec::Mrr(Some(0)) | MetricSpec::Ndcg(0) | MetricSpec::Recall(0) => {
                Err(Error::InvalidArgument(format!("{self}: cutoff must be >= 1")))
            }
            _ => Ok(()),
        }
    }

    pub fn compute(&self, ranked: &RankedList, qrels: &Qrels) -> f64 {
        match *self {
            MetricSpec::Mrr(cutoff) => mrr(ranked, qrels, cutoff.unwrap_or(usize::MAX)),
            MetricSpec::Ndcg(k) => ndcg_at_k(ranked, qrels, k),
            MetricSpec::Recall(k) => recall_at_k(ranked, qrels, k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Mrr(None) => write!(f, "MRR"),
            MetricSpec::Mrr(Some(k)) => write!(f, "MRR@{k}"),
            MetricSpec::Ndcg(k) => write!(f, "NDCG@{k}"),
            MetricSpec::Recall(k) => write!(f, "Recall@{k}"),
        }
    }
}

impl std::str::FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown metric `{s}`"));
        let (name, k) = match s.split_once('@') {
            Some((n, k)) => (n, Some(k.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let spec = match (name.to_ascii_lowercase().as_str(), k) {
            ("mrr", k) => MetricSpec::Mrr(k),
            ("ndcg", Some(k)) => MetricSpec::Ndcg(k),
            ("recall", Some(k)) => MetricSpec::Recall(k),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Reciprocal rank of the first document with grade >= 1 within `cutoff`.
pub fn mrr(ranked: &RankedList, qrels: &Qrels, cutoff: usize) -> f64 {
    ranked
        .doc_ids()
        .take(cutoff)
        .position(|d| qrels.grade(&ranked.query_key, d) >= 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let dcg: f64 = ranked
        .doc_ids()
        .take(k)
        .enumerate()
        .map(|(i, d)| qrels.grade(&ranked.query_key, d) as f64 / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = qrels
        .judged(&ranked.query_key)
        .map(|m| m.values().copied().filter(|&g| g > 0).collect())
        .unwrap_or_default();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let relevant = qrels.relevant(&ranked.query_key);
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.doc_ids().take(k).filter(|d| relevant.contains(d)).count();
    hits as f64 / relevant.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
}

/// Per-query values and unweighted means over the queries in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Queries in the run with no judged relevant document; they score 0.
    pub unjudged: Vec<String>,
    /// Judged queries the run does not cover; they do not enter the means.
    pub missing: Vec<String>,
    #[serde(skip)]
    order: Vec<String>,
}

impl EvalReport {
    pub fn mean(&self, spec: MetricSpec) -> Option<f64> {
        self.metrics.get(&spec.to_string()).map(|m| m.mean)
    }

    pub fn value(&self, spec: MetricSpec, query_key: &str) -> Option<f64> {
        self.metrics
            .get(&spec.to_string())
            .and_then(|m| m.per_query.get(query_key))
            .copied()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            metrics: &'a BTreeMap<String, MetricSummary>,
            unjudged: &'a [String],
            missing: &'a [String],
        }
        Ok(serde_json::to_string_pretty(&Out {
            metrics: &self.metrics,
            unjudged: &self.unjudged,
            missing: &self.missing,
        })?)
    }

    /// One row per query plus a final `all` row of means.
    pub fn to_tsv(&self) -> String {
        let names: Vec<&String> = self.order.iter().collect();
        let mut out = String::from("query");
        for n in &names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        let queries: Vec<&String> = names
            .first()
            .map(|n| self.metrics[*n].per_query.keys().collect())
            .unwrap_or_default();
        for q in queries {
            out.push_str(q);
            for n in &names {
                let _ = write!(out, "\t{:.6}", self.metrics[*n].per_query[q]);
            }
            out.push('\n');
        }
        out.push_str("all");
        for n in &names {
            let _ = write!(out, "\t{:.6}", self.metrics[*n].mean);
        }
        out.push('\n');
        out
    }
}

pub fn evaluate_run(run: &[RankedList], qrels: &Qrels, specs: &[MetricSpec]) -> Result<EvalReport> {
    for s in specs {
        s.validate()?;
    }
    let mut metrics = BTreeMap::new();
    for spec in specs {
        let per_query: BTreeMap<String, f64> = run
            .iter()
            .map(|l| (l.query_key.clone(), spec.compute(l, qrels)))
            .collect();
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        metrics.insert(spec.to_string(), MetricSummary { mean, per_query });
    }
    let mut unjudged: Vec<String> = run
        .iter()
        .filter(|l| qrels.relevant(&l.query_key).is_empty())
        .map(|l| l.query_key.clone())
        .collect();
    unjudged.sort();
    unjudged.dedup();
    let covered: std::collections::HashSet<&str> = run.iter().map(|l| l.query_key.as_str()).collect();
    let missing = qrels
        .query_keys()
        .filter(|k| !covered.contains(k))
        .map(str::to_string)
        .collect();
    Ok(EvalReport {
        metrics,
        unjudged,
        missing,
        order: specs.iter().map(|s| s.to_string()).collect(),
    })
}
