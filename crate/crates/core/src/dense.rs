//! Toy dual encoder: length-normalized term-frequency vectors projected by a
//! learned linear map, scored by dot product.
//!
//! The query projection `W_q` is trainable. The passage projection `W_p` is
//! fixed at initialization and no training routine ever writes to it.
//!
//! Both matrices are `d x V` conceptually; in memory each vocabulary column is
//! stored contiguously (`V` blocks of `d` values).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, write_string, Collection, RankedList};
use crate::error::{Error, Result};
use crate::prl::Retriever;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_VOCAB_CAP: usize = 20_000;
pub const DEFAULT_LR: f64 = 0.05;

const ENCODER_FORMAT: &str = "convsel-dense-encoder";
const ENCODER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Passage,
}

/// Sparse input vector: `(column, weight)` pairs sorted by column.
pub type TfVector = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEncoder {
    dim: usize,
    vocab: Vec<String>,
    columns: HashMap<String, usize>,
    w_query: Vec<f64>,
    w_passage: Vec<f64>,
}

impl DenseEncoder {
    /// Vocabulary is the `vocab_cap` most frequent corpus terms (ties by term).
    /// `W_p` is a seeded semi-orthogonal random matrix (orthonormalized along its
    /// smaller dimension, entries of unit mean square); `W_q` starts as a copy.
    pub fn new(collection: &Collection, dim: usize, vocab_cap: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("encoder dim must be >= 2, got {dim}")));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for doc in collection.iter() {
            for t in tokenize(&doc.text) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut terms: Vec<(String, usize)> = freq.into_iter().collect();
        terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        terms.truncate(vocab_cap);
        let vocab: Vec<String> = terms.into_iter().map(|(t, _)| t).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 3f64.sqrt();
        let mut w_passage: Vec<f64> = (0..vocab.len() * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        semi_orthogonalize(&mut w_passage, dim, vocab.len());
        Ok(Self::from_parts(dim, vocab, w_passage.clone(), w_passage))
    }

    fn from_parts(dim: usize, vocab: Vec<String>, w_query: Vec<f64>, w_passage: Vec<f64>) -> Self {
        let columns = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            dim,
            vocab,
            columns,
            w_query,
            w_passage,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn column(&self, term: &str) -> Option<usize> {
        self.columns.get(term).copied()
    }

    pub fn query_weights(&self) -> &[f64] {
        &self.w_query
    }

    pub fn query_weights_mut(&mut self) -> &mut [f64] {
        &mut self.w_query
    }

    pub fn passage_weights(&self) -> &[f64] {
        &self.w_passage
    }

    /// `tf / max(1, |tokens|)` over in-vocabulary tokens.
    pub fn tf_vector(&self, tokens: &[String]) -> TfVector {
        let norm = tokens.len().max(1) as f64;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in tokens {
            if let Some(c) = self.column(t) {
                *counts.entry(c).or_default() += 1;
            }
        }
        counts.into_iter().map(|(c, n)| (c, n as f64 / norm)).collect()
    }

    pub fn project(&self, x: &TfVector, side: Side) -> Vec<f64> {
        let w = match side {
            Side::Query => &self.w_query,
            Side::Passage => &self.w_passage,
        };
        let mut v = vec![0.0; self.dim];
        for &(c, weight) in x {
            let col = &w[c * self.dim..(c + 1) * self.dim];
            for (out, &wv) in v.iter_mut().zip(col) {
                *out += weight * wv;
            }
        }
        v
    }

    pub fn encode(&self, tokens: &[String], side: Side) -> Vec<f64> {
        self.project(&self.tf_vector(tokens), side)
    }

    pub fn encode_text(&self, text: &str, side: Side) -> Vec<f64> {
        self.encode(&tokenize(text), side)
    }

    /// Adds `-lr * grad` to `W_q`.
    pub fn apply_query_gradient(&mut self, grad: &SparseGrad, lr: f64) {
        assert_eq!(grad.dim, self.dim, "gradient dim mismatch");
        for (&c, g) in &grad.cols {
            let col = &mut self.w_query[c * self.dim..(c + 1) * self.dim];
            for (w, &gv) in col.iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &self.to_json()?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EncoderFile {
            format: ENCODER_FORMAT.to_string(),
            version: ENCODER_VERSION,
            dim: self.dim,
            vocab: self.vocab.clone(),
            w_query: self.rows(&self.w_query),
            w_passage: self.rows(&self.w_passage),
        };
        Ok(serde_json::to_string(&file)?)
    }

    fn rows(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let v = self.vocab.len();
        (0..self.dim)
            .map(|r| (0..v).map(|c| w[c * self.dim + r]).collect())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EncoderFile = serde_json::from_str(text)?;
        if file.format != ENCODER_FORMAT {
            return Err(Error::Config(format!("not a dense encoder (format `{}`)", file.format)));
        }
        if file.version != ENCODER_VERSION {
            return Err(Error::VersionMismatch {
                kind: "dense encoder",
                expected: ENCODER_VERSION,
                found: file.version,
            });
        }
        let v = file.vocab.len();
        let unrows = |rows: &[Vec<f64>], name: &str| -> Result<Vec<f64>> {
            if rows.len() != file.dim || rows.iter().any(|r| r.len() != v) {
                return Err(Error::Config(format!("dense encoder: {name} is not {} x {v}", file.dim)));
            }
            let mut w = vec![0.0; v * file.dim];
            for (r, row) in rows.iter().enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    w[c * file.dim + r] = x;
                }
            }
            Ok(w)
        };
        let wq = unrows(&file.w_query, "W_q")?;
        let wp = unrows(&file.w_passage, "W_p")?;
        Ok(Self::from_parts(file.dim, file.vocab, wq, wp))
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    format: String,
    version: u32,
    dim: usize,
    vocab: Vec<String>,
    w_query: Vec<Vec<f64>>,
    w_passage: Vec<Vec<f64>>,
}

/// Modified Gram-Schmidt over the rows (`V >= d`) or columns (`V < d`) of a
/// column-major `d x V` matrix, rescaled so entries keep unit mean square.
/// Term columns then overlap as little as `d` dimensions allow.
fn semi_orthogonalize(w: &mut [f64], dim: usize, vocab: usize) {
    if vocab == 0 {
        return;
    }
    // Vector `j` of the family, element `e`, lives at `at(j, e)`: rows when
    // there are at least as many terms as dimensions, columns otherwise.
    let rows = vocab >= dim;
    let (count, len) = if rows { (dim, vocab) } else { (vocab, dim) };
    let at = |j: usize, e: usize| if rows { e * dim + j } else { j * dim + e };
    let target = (len as f64).sqrt();
    for j in 0..count {
        for prev in 0..j {
            let proj: f64 = (0..len).map(|e| w[at(j, e)] * w[at(prev, e)]).sum::<f64>() / (target * target);
            for e in 0..len {
                w[at(j, e)] -= proj * w[at(prev, e)];
            }
        }
        let norm = (0..len).map(|e| w[at(j, e)].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for e in 0..len {
                w[at(j, e)] *= target / norm;
            }
        }
    }
}

/// Gradient over `W_q`, stored per touched vocabulary column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    dim: usize,
    cols: BTreeMap<usize, Vec<f64>>,
}

impl SparseGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            cols: BTreeMap::new(),
        }
    }

    /// Accumulates `scale * dir ⊗ x`.
    pub fn add_outer(&mut self, dir: &[f64], x: &TfVector, scale: f64) {
        for &(c, weight) in x {
            let col = self.cols.entry(c).or_insert_with(|| vec![0.0; self.dim]);
            for (g, &d) in col.iter_mut().zip(dir) {
                *g += scale * weight * d;
            }
        }
    }

    pub fn add(&mut self, other: &SparseGrad, scale: f64) {
        for (&c, g) in &other.cols {
            let col = self.cols.entry(c).or_insert_with(|| vec![0.0; self.dim]);
            for (a, &b) in col.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    /// Column-major dense copy with `vocab_size` columns.
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size * self.dim];
        for (&c, g) in &self.cols {
            out[c * self.dim..(c + 1) * self.dim].copy_from_slice(g);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.cols.values().flatten().all(|&g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.cols.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Passage vectors for one `(encoder, collection)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageMatrix {
    dim: usize,
    doc_ids: Vec<String>,
    vectors: Vec<f64>,
}

impl PassageMatrix {
    pub fn build(encoder: &DenseEncoder, collection: &Collection) -> Self {
        let mut vectors = Vec::with_capacity(collection.len() * encoder.dim);
        for doc in collection.iter() {
            vectors.extend(encoder.encode_text(&doc.text, Side::Passage));
        }
        Self {
            dim: encoder.dim,
            doc_ids: collection.iter().map(|d| d.doc_id.clone()).collect(),
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn doc_id(&self, pos: usize) -> &str {
        &self.doc_ids[pos]
    }

    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.vectors.chunks_exact(self.dim).map(|p| dot(query, p)).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Exhaustive dot-product search over precomputed passage vectors.
pub struct DenseRetriever<'a> {
    encoder: &'a DenseEncoder,
    passages: &'a PassageMatrix,
}

impl<'a> DenseRetriever<'a> {
    pub fn new(encoder: &'a DenseEncoder, passages: &'a PassageMatrix) -> Self {
        Self { encoder, passages }
    }

    pub fn retrieve(&self, query_tokens: &[String], k: usize) -> RankedList {
        let q = self.encoder.encode(query_tokens, Side::Query);
        let scored = self
            .passages
            .scores(&q)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (self.passages.doc_id(i).to_string(), s))
            .collect();
        RankedList::from_scores("", scored, k)
    }
}

impl Retriever for DenseRetriever<'_> {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<RankedList> {
        Ok(self.retrieve(&tokenize(query), k))
    }
}

/// One contrastive example: a query, its positive passage and sampled negatives
/// (collection positions).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub query: String,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingBatch {
    pub fn validate(&self, num_docs: usize) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::InvalidArgument("training batch needs at least one negative".into()));
        }
        if self.positive >= num_docs || self.negatives.iter().any(|&n| n >= num_docs) {
            return Err(Error::InvalidArgument("training batch refers to a missing passage".into()));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::InvalidArgument("positive passage listed among negatives".into()));
        }
        Ok(())
    }
}

/// `ln(sum exp(x))`, shifted by the max.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-ln softmax(xs)[target]`, computed on margins relative to the target so
/// small losses keep their precision.
pub fn neg_log_softmax(xs: &[f64], target: usize) -> f64 {
    let t = xs[target];
    let m = xs.iter().map(|x| x - t).fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        let rest: f64 = xs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, x)| (x - t).exp())
            .sum();
        rest.ln_1p()
    } else {
        m + xs.iter().map(|x| (x - t - m).exp()).sum::<f64>().ln()
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Contrastive loss given a query vector, positive first.
///
/// Returns the loss and `dL/dq`.
pub fn contrastive_from_vectors(query: &[f64], passages: &[&[f64]]) -> (f64, Vec<f64>) {
    let scores: Vec<f64> = passages.iter().map(|p| dot(query, p)).collect();
    let loss = neg_log_softmax(&scores, 0);
    let probs = softmax(&scores);
    let mut grad = vec![0.0; query.len()];
    for (j, (p, pi)) in passages.iter().zip(&probs).enumerate() {
        let coef = if j == 0 { pi - 1.0 } else { *pi };
        for (g, &pv) in grad.iter_mut().zip(p.iter()) {
            *g += coef * pv;
        }
    }
    (loss, grad)
}

/// Contrastive ranking loss of one batch and its gradient over `W_q`.
pub fn ranking_loss(
    encoder: &DenseEncoder,
    passages: &PassageMatrix,
    batch: &TrainingBatch,
) -> (f64, SparseGrad) {
    let x = encoder.tf_vector(&tokenize(&batch.query));
    let q = encoder.project(&x, Side::Query);
    let mut ps: Vec<&[f64]> = Vec::with_capacity(batch.negatives.len() + 1);
    ps.push(passages.vector(batch.positive));
    ps.extend(batch.negatives.iter().map(|&n| passages.vector(n)));
    let (loss, dq) = contrastive_from_vectors(&q, &ps);
    let mut grad = SparseGrad::new(encoder.dim);
    grad.add_outer(&dq, &x, 1.0);
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            epochs: 10,
            negatives: 4,
            seed: 0,
        }
    }
}

impl RetrieverTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("need at least one negative per example".into()));
        }
        Ok(())
    }
}

/// Seeded visiting order and negative samples, shared by every trainer that
/// steps through `(query, positive)` examples so their runs line up.
pub struct Schedule {
    rng: ChaCha8Rng,
    num_docs: usize,
    negatives: usize,
}

impl Schedule {
    pub fn new(seed: u64, num_docs: usize, negatives: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            num_docs,
            negatives,
        }
    }

    pub fn epoch_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Uniform draws without replacement, excluding `positive`.
    pub fn sample_negatives(&mut self, positive: usize) -> Vec<usize> {
        let available = self.num_docs.saturating_sub(1);
        let k = self.negatives.min(available);
        let picked = rand::seq::index::sample(&mut self.rng, available, k);
        picked
            .into_iter()
            .map(|i| if i >= positive { i + 1 } else { i })
            .collect()
    }
}

/// A `(query text, positive doc position)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryExample {
    pub query: String,
    pub positive: usize,
}

/// Per-epoch mean losses recorded while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Gradient descent on `W_q`, one step per example in seeded shuffled order.
pub fn train_retriever(
    mut encoder: DenseEncoder,
    passages: &PassageMatrix,
    examples: &[QueryExample],
    config: &RetrieverTrainConfig,
) -> Result<(DenseEncoder, TrainLog)> {
    config.validate()?;
    let mut log = TrainLog::default();
    if examples.is_empty() || passages.len() < 2 {
        return Ok((encoder, log));
    }
    let mut schedule = Schedule::new(config.seed, passages.len(), config.negatives);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for idx in schedule.epoch_order(examples.len()) {
            let ex = &examples[idx];
            let batch = TrainingBatch {
                query: ex.query.clone(),
                positive: ex.positive,
                negatives: schedule.sample_negatives(ex.positive),
            };
            let (loss, grad) = ranking_loss(&encoder, passages, &batch);
            total += loss;
            encoder.apply_query_gradient(&grad, config.lr);
        }
        log.epoch_loss.push(total / examples.len() as f64);
    }
    Ok((encoder, log))
}

/// Mean contrastive loss of `examples` under fixed negatives drawn from `seed`.
pub fn mean_loss(
    encoder: &DenseEncoder,
    passages: &PassageMatrix,
    examples: &[QueryExample],
    negatives: usize,
    seed: u64,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut schedule = Schedule::new(seed, passages.len(), negatives);
    examples
        .iter()
        .map(|ex| {
            let batch = TrainingBatch {
                query: ex.query.clone(),
                positive: ex.positive,
                negatives: schedule.sample_negatives(ex.positive),
            };
            ranking_loss(encoder, passages, &batch).0
        })
        .sum::<f64>()
        / examples.len() as f64
}

/// Ad-hoc training pairs drawn from the corpus itself: for each document,
/// `per_doc` queries of `len` tokens sampled from its own text.
pub fn doc_pseudo_queries(collection: &Collection, per_doc: usize, len: usize, seed: u64) -> Vec<QueryExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (pos, doc) in collection.iter().enumerate() {
        let tokens = tokenize(&doc.text);
        if tokens.is_empty() {
            continue;
        }
        for _ in 0..per_doc {
            let picked: Vec<&str> = tokens
                .choose_multiple(&mut rng, len.min(tokens.len()))
                .map(String::as_str)
                .collect();
            out.push(QueryExample {
                query: picked.join(" "),
                positive: pos,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;
    use crate::testutil::{central_difference, max_relative_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn corpus(texts: &[&str]) -> Collection {
        Collection::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document { doc_id: format!("D{}", i + 1), text: t.to_string() })
                .collect(),
        )
        .unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn gram(w: &[f64], count: usize, len: usize, at: impl Fn(usize, usize) -> usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|i| (0..count).map(|j| (0..len).map(|e| w[at(i, e)] * w[at(j, e)]).sum()).collect())
            .collect()
    }

    #[test]
    fn passage_projection_is_semi_orthogonal() {
        // More terms than dimensions: the rows are orthogonal with squared norm = vocab size.
        let wide = DenseEncoder::new(&corpus(&["a b c d e f g", "h i j k l"]), 4, 100, 3).unwrap();
        let v = wide.vocab_size();
        let g = gram(wide.passage_weights(), 4, v, |r, c| c * 4 + r);
        // Fewer terms than dimensions: the columns are orthogonal with squared norm = dim.
        let tall = DenseEncoder::new(&corpus(&["a b", "c"]), 8, 100, 3).unwrap();
        let h = gram(tall.passage_weights(), 3, 8, |c, r| c * 8 + r);
        for (m, norm) in [(g, v as f64), (h, 8.0)] {
            for (i, row) in m.iter().enumerate() {
                for (j, x) in row.iter().enumerate() {
                    let want = if i == j { norm } else { 0.0 };
                    assert!((x - want).abs() < 1e-9, "({i},{j}) = {x}, want {want}");
                }
            }
        }
        assert_eq!(wide.query_weights(), wide.passage_weights());
    }

    #[test]
    fn encode_edge_cases() {
        let enc = DenseEncoder::new(&corpus(&["a b c", "b c d"]), 8, 100, 1).unwrap();
        assert_eq!(enc.encode(&[], Side::Query), vec![0.0; 8]);
        assert_eq!(enc.encode(&toks("zz yy"), Side::Query), vec![0.0; 8]);
        let one = enc.encode(&toks("a b"), Side::Passage);
        let two = enc.encode(&toks("a a b"), Side::Passage);
        let ca = enc.column("a").unwrap();
        let cb = enc.column("b").unwrap();
        let wp = enc.passage_weights();
        for r in 0..8 {
            assert!((one[r] - (wp[ca * 8 + r] + wp[cb * 8 + r]) / 2.0).abs() < 1e-12);
            assert!((two[r] - (2.0 * wp[ca * 8 + r] + wp[cb * 8 + r]) / 3.0).abs() < 1e-12);
        }
        assert!(DenseEncoder::new(&corpus(&["a"]), 1, 10, 0).is_err());
    }

    #[test]
    fn vocab_capped_by_frequency() {
        let enc = DenseEncoder::new(&corpus(&["a a a b b c", "a b d"]), 4, 2, 0).unwrap();
        assert_eq!(enc.vocab(), &["a".to_string(), "b".to_string()]);
        assert_eq!(enc.query_weights(), enc.passage_weights());
    }

    #[test]
    fn identity_like_encoder_prefers_shared_terms() {
        // Columns are unit basis vectors, so dot products count shared mass.
        let c = corpus(&["apple pie", "bread loaf", "queen mirror"]);
        let mut enc = DenseEncoder::new(&c, 6, 100, 0).unwrap();
        let v = enc.vocab_size();
        let mut w = vec![0.0; v * 6];
        for col in 0..v {
            w[col * 6 + col] = 1.0;
        }
        enc = DenseEncoder::from_parts(6, enc.vocab.clone(), w.clone(), w);
        let pm = PassageMatrix::build(&enc, &c);
        let r = DenseRetriever::new(&enc, &pm);
        let list = r.retrieve(&toks("mirror please"), 10);
        assert_eq!(list.entries()[0].0, "D3");
        assert!((list.entries()[0].1 - 0.25).abs() < 1e-12);
        assert_eq!(list.len(), 3);
        let zero = r.retrieve(&toks("unknown"), 10);
        let ids: Vec<&str> = zero.doc_ids().collect();
        assert_eq!(ids, vec!["D1", "D2", "D3"]);
        assert!(zero.entries().iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn loss_reference_values() {
        let q = [1.0, 0.0];
        let same = [0.5, 0.3];
        let ps: Vec<&[f64]> = vec![&same; 5];
        let (l, _) = contrastive_from_vectors(&q, &ps);
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let pos = [10.0, 0.0];
        let neg = [-10.0, 0.0];
        let ps: Vec<&[f64]> = vec![&pos, &neg, &neg, &neg, &neg];
        let (l, _) = contrastive_from_vectors(&q, &ps);
        assert!(l <= 1e-8 && l > 0.0);
    }

    #[test]
    fn loss_decreases_as_positive_score_rises() {
        let neg = [0.3, -0.2];
        let mut prev = f64::INFINITY;
        for s in -5..10 {
            let pos = [s as f64, 0.0];
            let ps: Vec<&[f64]> = vec![&pos, &neg, &neg];
            let (l, _) = contrastive_from_vectors(&[1.0, 0.0], &ps);
            assert!(l > 0.0 && l < prev);
            prev = l;
        }
    }

    fn random_setup(seed: u64) -> (DenseEncoder, PassageMatrix, TrainingBatch) {
        let c = corpus(&[
            "alpha beta gamma",
            "beta delta",
            "gamma epsilon zeta alpha",
            "eta theta",
            "alpha theta iota",
            "kappa beta beta",
        ]);
        let mut enc = DenseEncoder::new(&c, 5, 100, seed).unwrap();
        // move W_q away from W_p so the test is generic
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for w in enc.query_weights_mut() {
            *w += rng.gen_range(-0.5..0.5);
        }
        let pm = PassageMatrix::build(&enc, &c);
        let batch = TrainingBatch {
            query: "alpha beta theta alpha".into(),
            positive: (seed % 6) as usize,
            negatives: (0..6).filter(|&i| i != (seed % 6) as usize).take(4).collect(),
        };
        (enc, pm, batch)
    }

    #[test]
    fn ranking_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (enc, pm, batch) = random_setup(seed);
            batch.validate(pm.len()).unwrap();
            let (_, grad) = ranking_loss(&enc, &pm, &batch);
            let analytic = grad.to_dense(enc.vocab_size());
            let numeric = central_difference(enc.query_weights(), 1e-5, |w| {
                let mut e = enc.clone();
                e.query_weights_mut().copy_from_slice(w);
                ranking_loss(&e, &pm, &batch).0
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn batch_validation() {
        let ok = TrainingBatch { query: "q".into(), positive: 0, negatives: vec![1, 2] };
        assert!(ok.validate(3).is_ok());
        assert!(TrainingBatch { negatives: vec![0, 1], ..ok.clone() }.validate(3).is_err());
        assert!(TrainingBatch { negatives: vec![], ..ok.clone() }.validate(3).is_err());
        assert!(TrainingBatch { negatives: vec![5], ..ok }.validate(3).is_err());
    }

    fn twenty_docs() -> Collection {
        let texts: Vec<String> = (0..20)
            .map(|i| format!("topic{} word{} shared{} filler", i % 5, i, i % 3))
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        corpus(&refs)
    }

    #[test]
    fn training_reduces_loss_and_freezes_passages() {
        let c = twenty_docs();
        let enc = DenseEncoder::new(&c, 16, 1000, 3).unwrap();
        let pm = PassageMatrix::build(&enc, &c);
        let examples: Vec<QueryExample> = (0..20)
            .map(|i| QueryExample { query: format!("word{i} topic{}", i % 5), positive: i })
            .collect();
        let wp = enc.passage_weights().to_vec();
        let cfg = RetrieverTrainConfig { lr: 0.05, epochs: 50, negatives: 4, seed: 9 };
        let (trained, log) = train_retriever(enc, &pm, &examples, &cfg).unwrap();
        assert_eq!(log.epoch_loss.len(), 50);
        assert!(log.epoch_loss[49] < log.epoch_loss[0], "{:?}", log.epoch_loss);
        assert_eq!(trained.passage_weights(), &wp[..]);
    }

    #[test]
    fn training_no_ops() {
        let c = twenty_docs();
        let enc = DenseEncoder::new(&c, 8, 1000, 3).unwrap();
        let pm = PassageMatrix::build(&enc, &c);
        let ex = vec![QueryExample { query: "word1".into(), positive: 1 }];
        let cfg = RetrieverTrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(train_retriever(enc.clone(), &pm, &ex, &cfg).unwrap().0, enc);
        let cfg = RetrieverTrainConfig { epochs: 3, ..Default::default() };
        assert_eq!(train_retriever(enc.clone(), &pm, &[], &cfg).unwrap().0, enc);
        let bad = RetrieverTrainConfig { lr: 0.0, ..Default::default() };
        assert!(train_retriever(enc, &pm, &ex, &bad).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let c = twenty_docs();
        let enc = DenseEncoder::new(&c, 8, 1000, 3).unwrap();
        let pm = PassageMatrix::build(&enc, &c);
        let ex = doc_pseudo_queries(&c, 2, 2, 5);
        let cfg = RetrieverTrainConfig { epochs: 3, seed: 4, ..Default::default() };
        let a = train_retriever(enc.clone(), &pm, &ex, &cfg).unwrap();
        let b = train_retriever(enc, &pm, &ex, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_exclude_positive() {
        let mut s = Schedule::new(1, 10, 4);
        for pos in 0..10 {
            let n = s.sample_negatives(pos);
            assert_eq!(n.len(), 4);
            assert!(!n.contains(&pos));
            assert!(n.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn json_round_trip_and_version() {
        let enc = DenseEncoder::new(&twenty_docs(), 4, 1000, 2).unwrap();
        let back = DenseEncoder::from_json(&enc.to_json().unwrap()).unwrap();
        assert_eq!(back, enc);
        let bumped = enc.to_json().unwrap().replace("\"version\":1", "\"version\":2");
        assert!(matches!(DenseEncoder::from_json(&bumped), Err(Error::VersionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn duplicated_query_encodes_identically(words in proptest::collection::vec("[a-e]", 0..6)) {
            let enc = DenseEncoder::new(&corpus(&["a b c d", "e a"]), 4, 100, 7).unwrap();
            let t: Vec<String> = words.clone();
            let mut doubled = t.clone();
            doubled.extend(t.iter().cloned());
            let a = enc.encode(&t, Side::Query);
            let b = enc.encode(&doubled, Side::Query);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ranking_loss_positive(s in proptest::collection::vec(-40.0f64..40.0, 2..8)) {
            let vecs: Vec<[f64; 1]> = s.iter().map(|&x| [x]).collect();
            let ps: Vec<&[f64]> = vecs.iter().map(|v| &v[..]).collect();
            let (l, _) = contrastive_from_vectors(&[1.0], &ps);
            prop_assert!(l > 0.0 || s[1..].iter().all(|&x| s[0] - x > 700.0));
        }
    }
}
