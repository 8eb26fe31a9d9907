//! Inverted index with BM25 ranking.
//!
//! ```text
//! score(d, q) = sum over unique t in q of
//!     idf(t) * tf(t,d) * (k1 + 1) / (tf(t,d) + k1 * (1 - b + b * dl(d) / avgdl))
//! idf(t) = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Query terms are deduplicated before scoring and zero-score documents are
//! never returned.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, write_string, Collection, RankedList};
use crate::error::{Error, Result};
use crate::prl::Retriever;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

const INDEX_FORMAT: &str = "convsel-bm25-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidArgument(format!("bm25 k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidArgument(format!("bm25 b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_doc_len: f64,
    params: Bm25Params,
}

impl InvertedIndex {
    pub fn build(collection: &Collection, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_ids = Vec::with_capacity(collection.len());
        let mut doc_len = Vec::with_capacity(collection.len());
        for (pos, doc) in collection.iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_len.push(tokens.len() as u32);
            doc_ids.push(doc.doc_id.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            // positions are visited in increasing order, so postings stay sorted
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting { doc: pos, tf: count });
            }
        }
        let avg_doc_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        Ok(Self {
            postings,
            doc_ids,
            doc_len,
            avg_doc_len,
            params,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_len(&self, pos: usize) -> u32 {
        self.doc_len[pos]
    }

    pub fn doc_id(&self, pos: usize) -> &str {
        &self.doc_ids[pos]
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn tf(&self, term: &str, pos: usize) -> u32 {
        let p = self.postings(term);
        p.binary_search_by_key(&pos, |x| x.doc).map(|i| p[i].tf).unwrap_or(0)
    }

    /// Lucene-style idf; strictly positive for every term, including unseen ones.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, dl: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * dl as f64 / self.avg_doc_len;
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Top-`k` documents for a tokenized query.
    pub fn retrieve(&self, query_tokens: &[String], k: usize) -> RankedList {
        if self.num_docs() == 0 || k == 0 {
            return RankedList::empty("");
        }
        // Per-term contributions are summed in sorted order so documents with
        // the same multiset of contributions get bit-identical scores and
        // fall through to the doc-id tie-break.
        let mut parts: Vec<Vec<f64>> = vec![Vec::new(); self.num_docs()];
        let mut touched = Vec::new();
        let mut seen = HashSet::new();
        for term in query_tokens {
            if !seen.insert(term.as_str()) {
                continue;
            }
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in postings {
                if parts[p.doc].is_empty() {
                    touched.push(p.doc);
                }
                parts[p.doc].push(idf * self.term_weight(p.tf, self.doc_len[p.doc]));
            }
        }
        let scored = touched
            .into_iter()
            .map(|d| {
                let mut c = std::mem::take(&mut parts[d]);
                c.sort_by(f64::total_cmp);
                (d, c.iter().sum::<f64>())
            })
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (self.doc_ids[d].clone(), s))
            .collect();
        RankedList::from_scores("", scored, k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let postings: BTreeMap<&str, Vec<(usize, u32)>> = self
            .postings
            .iter()
            .map(|(t, ps)| (t.as_str(), ps.iter().map(|p| (p.doc, p.tf)).collect()))
            .collect();
        let file = IndexFile {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            k1: self.params.k1,
            b: self.params.b,
            doc_ids: self.doc_ids.clone(),
            doc_len: self.doc_len.clone(),
            postings: postings
                .into_iter()
                .map(|(t, v)| (t.to_string(), v))
                .collect(),
        };
        write_string(path.as_ref(), &serde_json::to_string(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(text)?;
        if file.format != INDEX_FORMAT {
            return Err(Error::Config(format!("not a bm25 index (format `{}`)", file.format)));
        }
        if file.version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                kind: "bm25 index",
                expected: INDEX_VERSION,
                found: file.version,
            });
        }
        if file.doc_ids.len() != file.doc_len.len() {
            return Err(Error::Config("bm25 index: doc_ids and doc_len differ in length".into()));
        }
        let params = Bm25Params {
            k1: file.k1,
            b: file.b,
        };
        params.validate()?;
        let n = file.doc_ids.len();
        let mut postings = HashMap::with_capacity(file.postings.len());
        for (term, list) in file.postings {
            if list.iter().any(|&(d, _)| d >= n) || list.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Config(format!("bm25 index: corrupt postings for `{term}`")));
            }
            postings.insert(term, list.into_iter().map(|(doc, tf)| Posting { doc, tf }).collect());
        }
        let avg_doc_len = if n == 0 {
            0.0
        } else {
            file.doc_len.iter().map(|&l| l as f64).sum::<f64>() / n as f64
        };
        Ok(Self {
            postings,
            doc_ids: file.doc_ids,
            doc_len: file.doc_len,
            avg_doc_len,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

impl Retriever for InvertedIndex {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<RankedList> {
        Ok(self.retrieve(&tokenize(query), k))
    }
}
