//! Pairwise selector deciding whether a historical turn should expand the
//! current query.
//!
//! A two-class linear softmax over five hand-built pair features, trained on
//! pseudo relevance labels with class-weighted cross-entropy:
//!
//! ```text
//! w[y]   = |negative| / |class y|          (so w_neg = 1)
//! loss_i = -w[y_i] * log softmax(U z_i + b)[y_i]
//! ```
//!
//! where `z_i` is the standardized feature vector. The batch loss is the mean.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, write_string, ConversationSession};
use crate::dense::{cosine, neg_log_softmax, softmax, DenseEncoder, Side};
use crate::error::{Error, Result};
use crate::prl::{compose_query, ExpansionForm, LabelTable};
use crate::sparse::InvertedIndex;

pub const NUM_FEATURES: usize = 5;
pub const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Class index of the positive ("useful for expansion") class.
pub const POSITIVE: usize = 1;
pub const NEGATIVE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos: f64,
    pub neg: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { pos: 1.0, neg: 1.0 };

    pub fn for_class(&self, positive: bool) -> f64 {
        if positive {
            self.pos
        } else {
            self.neg
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            pos: self.pos * c,
            neg: self.neg * c,
        }
    }
}

/// `w[y] = |negative| / |class y|`.
pub fn class_weights(labels: &[bool]) -> Result<ClassWeights> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    Ok(ClassWeights {
        pos: negatives as f64 / positives as f64,
        neg: 1.0,
    })
}

/// Pair features for (current query, candidate turn).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Token-set Jaccard overlap.
    pub jaccard: f64,
    /// Cosine of the query-side encodings.
    pub dense_cos: f64,
    /// `i / (n - 1)`.
    pub recency: f64,
    /// `|h_i| / max(1, |q_n|)` clipped to `[0, 4]`.
    pub len_ratio: f64,
    /// Sum of idf over shared terms.
    pub idf_overlap: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.jaccard,
            self.dense_cos,
            self.recency,
            self.len_ratio,
            self.idf_overlap,
        ]
    }

    pub fn from_array(a: [f64; NUM_FEATURES]) -> Self {
        Self {
            jaccard: a[0],
            dense_cos: a[1],
            recency: a[2],
            len_ratio: a[3],
            idf_overlap: a[4],
        }
    }
}

/// Computes selector features from an encoder and a BM25 index (for idf).
pub struct FeatureExtractor<'a> {
    encoder: &'a DenseEncoder,
    index: &'a InvertedIndex,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(encoder: &'a DenseEncoder, index: &'a InvertedIndex) -> Self {
        Self { encoder, index }
    }

    pub fn pair(&self, current: &str, candidate: &str, i: usize, n: usize) -> FeatureVector {
        let q = tokenize(current);
        let h = tokenize(candidate);
        let qs: HashSet<&str> = q.iter().map(String::as_str).collect();
        let hs: HashSet<&str> = h.iter().map(String::as_str).collect();
        let shared: Vec<&str> = qs.intersection(&hs).copied().collect();
        let union = qs.union(&hs).count();
        let jaccard = if union == 0 {
            0.0
        } else {
            shared.len() as f64 / union as f64
        };
        let dense_cos = cosine(
            &self.encoder.encode(&q, Side::Query),
            &self.encoder.encode(&h, Side::Query),
        );
        let recency = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
        let len_ratio = (h.len() as f64 / q.len().max(1) as f64).clamp(0.0, 4.0);
        let idf_overlap = shared.iter().map(|t| self.index.idf(t)).sum();
        FeatureVector {
            jaccard,
            dense_cos,
            recency,
            len_ratio,
            idf_overlap,
        }
    }

    /// Features of every candidate `h_1..h_{n-1}` for turn `n`.
    pub fn turn(&self, session: &ConversationSession, n: usize) -> Vec<FeatureVector> {
        let current = &session.turn(n).text;
        (1..n)
            .map(|i| self.pair(current, &session.turn(i).text, i, n))
            .collect()
    }
}

/// Per-feature standardization fitted on the training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; NUM_FEATURES],
    pub scale: [f64; NUM_FEATURES],
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self {
            mean: [0.0; NUM_FEATURES],
            scale: [1.0; NUM_FEATURES],
        }
    }
}

impl FeatureScaler {
    pub fn fit(features: &[FeatureVector]) -> Self {
        if features.is_empty() {
            return Self::default();
        }
        let n = features.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f.to_array()) {
                *m += x / n;
            }
        }
        let mut var = [0.0; NUM_FEATURES];
        for f in features {
            for ((v, x), m) in var.iter_mut().zip(f.to_array()).zip(mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale = var.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn transform(&self, f: &FeatureVector) -> [f64; NUM_FEATURES] {
        let mut z = f.to_array();
        for ((x, m), s) in z.iter_mut().zip(self.mean).zip(self.scale) {
            *x = (*x - m) / s;
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    /// Class logit weights, row 0 negative, row 1 positive.
    #[serde(rename = "U")]
    pub u: [[f64; NUM_FEATURES]; 2],
    pub b: [f64; 2],
    pub w_pos: f64,
    pub w_neg: f64,
    pub feature_version: u32,
    pub scaler: FeatureScaler,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorGrad {
    pub u: [[f64; NUM_FEATURES]; 2],
    pub b: [f64; 2],
}

impl SelectorModel {
    /// Small seeded random weights; no standardization.
    pub fn init(weights: ClassWeights, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = [[0.0; NUM_FEATURES]; 2];
        for row in u.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.gen_range(-0.01..0.01);
            }
        }
        Self {
            u,
            b: [0.0; 2],
            w_pos: weights.pos,
            w_neg: weights.neg,
            feature_version: FEATURE_VERSION,
            scaler: FeatureScaler::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn weights(&self) -> ClassWeights {
        ClassWeights {
            pos: self.w_pos,
            neg: self.w_neg,
        }
    }

    pub fn logits(&self, f: &FeatureVector) -> [f64; 2] {
        let z = self.scaler.transform(f);
        let mut out = self.b;
        for (o, row) in out.iter_mut().zip(&self.u) {
            *o += row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    pub fn positive_probability(&self, f: &FeatureVector) -> f64 {
        softmax(&self.logits(f))[POSITIVE]
    }

    pub fn predict(&self, f: &FeatureVector) -> bool {
        self.positive_probability(f) >= self.threshold
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        if model.feature_version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                kind: "selector features",
                expected: FEATURE_VERSION,
                found: model.feature_version,
            });
        }
        Ok(model)
    }
}

/// Weighted cross-entropy of one example from raw logits.
///
/// Returns the loss and `dloss/dlogits`.
pub fn weighted_ce(logits: &[f64; 2], positive: bool, weights: ClassWeights) -> (f64, [f64; 2]) {
    let gold = if positive { POSITIVE } else { NEGATIVE };
    let w = weights.for_class(positive);
    let loss = w * neg_log_softmax(logits, gold);
    let p = softmax(logits);
    let mut d = [w * p[0], w * p[1]];
    d[gold] -= w;
    (loss, d)
}

/// Mean weighted cross-entropy over samples and its gradient over `(U, b)`.
pub fn weighted_ce_loss(model: &SelectorModel, samples: &[(FeatureVector, bool)]) -> (f64, SelectorGrad) {
    let mut grad = SelectorGrad {
        u: [[0.0; NUM_FEATURES]; 2],
        b: [0.0; 2],
    };
    if samples.is_empty() {
        return (0.0, grad);
    }
    let n = samples.len() as f64;
    let weights = model.weights();
    let mut total = 0.0;
    for (f, positive) in samples {
        let z = model.scaler.transform(f);
        let (loss, d) = weighted_ce(&model.logits(f), *positive, weights);
        total += loss;
        for (c, &dc) in d.iter().enumerate() {
            grad.b[c] += dc / n;
            for (g, x) in grad.u[c].iter_mut().zip(&z) {
                *g += dc * x / n;
            }
        }
    }
    (total / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorHyper {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Use class weights; otherwise every class weighs 1.
    pub weighted: bool,
    pub threshold: f64,
}

impl Default for SelectorHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 300,
            seed: 0,
            weighted: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Full-batch gradient descent on labeled feature vectors.
pub fn train_on_samples(samples: &[(FeatureVector, bool)], hyper: &SelectorHyper) -> Result<SelectorModel> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("selector training set is empty".into()));
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", hyper.lr)));
    }
    let labels: Vec<bool> = samples.iter().map(|(_, l)| *l).collect();
    let weights = class_weights(&labels)?;
    let weights = if hyper.weighted {
        weights
    } else {
        ClassWeights::UNIFORM
    };
    let mut model = SelectorModel::init(weights, hyper.seed);
    model.threshold = hyper.threshold;
    let features: Vec<FeatureVector> = samples.iter().map(|(f, _)| *f).collect();
    model.scaler = FeatureScaler::fit(&features);
    for _ in 0..hyper.epochs {
        let (_, g) = weighted_ce_loss(&model, samples);
        for c in 0..2 {
            model.b[c] -= hyper.lr * g.b[c];
            for (w, gv) in model.u[c].iter_mut().zip(&g.u[c]) {
                *w -= hyper.lr * gv;
            }
        }
    }
    Ok(model)
}

/// Feature/label pairs for every labeled turn in `sessions`.
pub fn build_samples(
    labels: &LabelTable,
    sessions: &[ConversationSession],
    extractor: &FeatureExtractor<'_>,
) -> Vec<(FeatureVector, bool)> {
    let mut out = Vec::new();
    for s in sessions {
        for n in 2..=s.len() {
            if let Some(flags) = labels.get(&s.session_id, n) {
                out.extend(extractor.turn(s, n).into_iter().zip(flags.iter().copied()));
            }
        }
    }
    out
}

pub fn train_selector(
    labels: &LabelTable,
    sessions: &[ConversationSession],
    extractor: &FeatureExtractor<'_>,
    hyper: &SelectorHyper,
) -> Result<SelectorModel> {
    train_on_samples(&build_samples(labels, sessions, extractor), hyper)
}

/// Per-candidate decisions for turn `n` and the resulting query text. Falls
/// back to the raw query when nothing is selected.
pub fn predict_and_expand(
    model: &SelectorModel,
    extractor: &FeatureExtractor<'_>,
    session: &ConversationSession,
    n: usize,
) -> Result<(Vec<bool>, String)> {
    if n < 1 || n > session.len() {
        return Err(Error::InvalidArgument(format!(
            "turn {n} out of range for session `{}`",
            session.session_id
        )));
    }
    let selections: Vec<bool> = extractor.turn(session, n).iter().map(|f| model.predict(f)).collect();
    let text = compose_query(session, n, &ExpansionForm::Prl(selections.clone()))?;
    Ok((selections, text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Positive-class precision.
    pub precision: f64,
    /// Positive-class recall.
    pub recall: f64,
    /// Positive-class F1.
    pub f1: f64,
    pub negative_precision: f64,
    pub negative_recall: f64,
    pub negative_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub support_pos: usize,
    pub support_neg: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn classification_report(predictions: &[bool], gold: &[bool]) -> Result<ClassificationReport> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("classification report of an empty set".into()));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let negative_precision = ratio(tn, tn + fneg);
    let negative_recall = ratio(tn, tn + fp);
    let pos_f1 = f1(precision, recall);
    let neg_f1 = f1(negative_precision, negative_recall);
    Ok(ClassificationReport {
        precision,
        recall,
        f1: pos_f1,
        negative_precision,
        negative_recall,
        negative_f1: neg_f1,
        macro_precision: (precision + negative_precision) / 2.0,
        macro_recall: (recall + negative_recall) / 2.0,
        macro_f1: (pos_f1 + neg_f1) / 2.0,
        accuracy: ratio(tp + tn, gold.len()),
        support_pos: tp + fneg,
        support_neg: tn + fp,
    })
}

impl ClassificationReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "precision\trecall\tf1\tmacro_f1\taccuracy\n{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.precision, self.recall, self.f1, self.macro_f1, self.accuracy
        )
    }
}
