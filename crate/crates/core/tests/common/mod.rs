//! Helpers shared by integration tests: finite differences and a brute-force
//! BM25 + reciprocal-rank oracle written independently of the library.

#![allow(dead_code)]

use std::collections::HashMap;

/// Central differences `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
pub fn central_difference(params: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, 1e-7)` over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every document from scratch on each query: no postings, no caches
/// beyond document token lists.
pub struct BruteBm25 {
    ids: Vec<String>,
    docs: Vec<Vec<String>>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl BruteBm25 {
    pub fn new<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>, k1: f64, b: f64) -> Self {
        let (ids, docs): (Vec<String>, Vec<Vec<String>>) =
            docs.into_iter().map(|(id, text)| (id.to_string(), words(text))).unzip();
        let total: usize = docs.iter().map(Vec::len).sum();
        let avgdl = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self { ids, docs, avgdl, k1, b }
    }

    pub fn scores(&self, query: &str) -> Vec<(String, f64)> {
        let mut terms = words(query);
        let mut seen = std::collections::HashSet::new();
        terms.retain(|t| seen.insert(t.clone()));
        let n = self.docs.len() as f64;
        let df: HashMap<&str, f64> = terms
            .iter()
            .map(|t| (t.as_str(), self.docs.iter().filter(|d| d.contains(t)).count() as f64))
            .collect();
        let mut out = Vec::new();
        for (id, doc) in self.ids.iter().zip(&self.docs) {
            let dl = doc.len() as f64;
            let mut s = 0.0;
            for t in &terms {
                let tf = doc.iter().filter(|w| *w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let d = df[t.as_str()];
                let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
                s += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl));
            }
            if s > 0.0 {
                out.push((id.clone(), s));
            }
        }
        // Scores equal up to rounding count as ties, broken by ascending id.
        out.sort_by(|a, b| {
            let (qa, qb) = ((a.1 * 1e9).round() as i64, (b.1 * 1e9).round() as i64);
            qb.cmp(&qa).then_with(|| a.0.cmp(&b.0))
        });
        out
    }

    /// Reciprocal rank of the first relevant document within the top `k`.
    pub fn reciprocal_rank(&self, query: &str, relevant: &[&str], k: usize) -> f64 {
        self.scores(query)
            .iter()
            .take(k)
            .position(|(id, _)| relevant.contains(&id.as_str()))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    }
}
