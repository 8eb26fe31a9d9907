//! Joint selector–retriever fine-tuning.
//!
//! The retriever reads the concatenated history `q^all`; a per-turn selector
//! head classifies each history turn from its own query-side encoding, so the
//! selector loss also shapes `W_q`:
//!
//! ```text
//! L = alpha * L_S + L_R
//! L_R = contrastive loss of encode(q^all) against (p+, p-_1..p-_K)
//! L_S = mean_i  w[y_i] * -log softmax(V encode(h_i) + c)[y_i]
//! ```
//!
//! `W_p` stays frozen. With `alpha = 0` the parameter trajectory of `W_q`
//! matches [`train_retriever`](crate::dense::train_retriever) on the same
//! examples and seed exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, write_string, Collection, ConversationSession, Qrels};
use crate::dense::{
    contrastive_from_vectors, dot, DenseEncoder, DenseRetriever, PassageMatrix, QueryExample, Schedule, Side,
    SparseGrad,
};
use crate::error::{Error, Result};
use crate::prl::{compose_query, generate_prl_all, ExpansionForm, LabelTable, DEFAULT_DEPTH};
use crate::selector::{class_weights, weighted_ce, ClassWeights};

const HEAD_FORMAT: &str = "convsel-selector-head";
const HEAD_VERSION: u32 = 1;
/// Offset separating the head's initialization stream from the schedule's.
const HEAD_SEED_OFFSET: u64 = 0x5e1e_c70d;

/// Query-side encoding of history turn `i` (1-based, `i < n`).
pub fn turn_segment_repr(encoder: &DenseEncoder, session: &ConversationSession, n: usize, i: usize) -> Vec<f64> {
    assert!(
        i >= 1 && i < n && n <= session.len(),
        "turn segment {i} out of range for turn {n} of session `{}`",
        session.session_id
    );
    encoder.encode_text(&session.turn(i).text, Side::Query)
}

/// Two-class logits `V r + c` over a turn-segment representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorHead {
    /// Row 0 scores the negative class, row 1 the positive class.
    pub v: [Vec<f64>; 2],
    pub c: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    format: String,
    version: u32,
    #[serde(rename = "V")]
    v: [Vec<f64>; 2],
    c: [f64; 2],
}

impl SelectorHead {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_SEED_OFFSET));
        let mut row = || (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect::<Vec<f64>>();
        Self {
            v: [row(), row()],
            c: [0.0; 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.v[0].len()
    }

    pub fn logits(&self, repr: &[f64]) -> [f64; 2] {
        [dot(&self.v[0], repr) + self.c[0], dot(&self.v[1], repr) + self.c[1]]
    }

    pub fn positive_probability(&self, repr: &[f64]) -> f64 {
        crate::dense::softmax(&self.logits(repr))[1]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = HeadFile {
            format: HEAD_FORMAT.to_string(),
            version: HEAD_VERSION,
            v: self.v.clone(),
            c: self.c,
        };
        write_string(path.as_ref(), &serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: HeadFile = serde_json::from_str(&text)?;
        if file.format != HEAD_FORMAT {
            return Err(Error::Config(format!("not a selector head (format `{}`)", file.format)));
        }
        if file.version != HEAD_VERSION {
            return Err(Error::VersionMismatch {
                kind: "selector head",
                expected: HEAD_VERSION,
                found: file.version,
            });
        }
        if file.v[0].len() != file.v[1].len() || !file.v.iter().flatten().chain(&file.c).all(|x| x.is_finite()) {
            return Err(Error::Config("selector head: rows differ in length or hold non-finite values".into()));
        }
        Ok(Self { v: file.v, c: file.c })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub v: [Vec<f64>; 2],
    pub c: [f64; 2],
}

impl HeadGrad {
    fn zeros(dim: usize) -> Self {
        Self {
            v: [vec![0.0; dim], vec![0.0; dim]],
            c: [0.0; 2],
        }
    }
}

/// One training instance: turn `n` of a session with its gold passage.
#[derive(Debug, Clone, PartialEq)]
pub struct JointExample<'a> {
    pub session: &'a ConversationSession,
    pub n: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub l_r: f64,
    pub l_s: f64,
    pub total: f64,
    pub grad_query: SparseGrad,
    pub grad_head: HeadGrad,
}

/// Loss and gradients over `(W_q, V, c)` for one turn.
///
/// `labels` holds the n−1 candidate labels of the turn. Without labels (or
/// for `n = 1`) the selector term is 0.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    encoder: &DenseEncoder,
    head: &SelectorHead,
    passages: &PassageMatrix,
    example: &JointExample<'_>,
    negatives: &[usize],
    labels: Option<&[bool]>,
    weights: ClassWeights,
    alpha: f64,
) -> Result<JointLoss> {
    let JointExample { session, n, positive } = *example;
    let labels = labels.unwrap_or_default();
    if !labels.is_empty() && labels.len() != n - 1 {
        return Err(Error::InvalidArgument(format!(
            "turn {n} of session `{}` needs {} labels, got {}",
            session.session_id,
            n - 1,
            labels.len()
        )));
    }
    let dim = encoder.dim();
    let query = compose_query(session, n, &ExpansionForm::All)?;
    let x = encoder.tf_vector(&tokenize(&query));
    let q = encoder.project(&x, Side::Query);
    let mut ps: Vec<&[f64]> = Vec::with_capacity(negatives.len() + 1);
    ps.push(passages.vector(positive));
    ps.extend(negatives.iter().map(|&j| passages.vector(j)));
    let (l_r, dq) = contrastive_from_vectors(&q, &ps);
    let mut grad_query = SparseGrad::new(dim);
    grad_query.add_outer(&dq, &x, 1.0);

    let mut l_s = 0.0;
    let mut grad_head = HeadGrad::zeros(dim);
    if !labels.is_empty() {
        let m = labels.len() as f64;
        let mut grad_sel = SparseGrad::new(dim);
        for (i, &label) in (1..n).zip(labels) {
            let xi = encoder.tf_vector(&tokenize(&session.turn(i).text));
            let r = encoder.project(&xi, Side::Query);
            let (loss, d) = weighted_ce(&head.logits(&r), label, weights);
            l_s += loss / m;
            let mut dr = vec![0.0; dim];
            for (cls, &dc) in d.iter().enumerate() {
                grad_head.c[cls] += alpha * dc / m;
                for ((gv, &rv), (drv, &hv)) in grad_head.v[cls]
                    .iter_mut()
                    .zip(&r)
                    .zip(dr.iter_mut().zip(&head.v[cls]))
                {
                    *gv += alpha * dc * rv / m;
                    *drv += dc * hv / m;
                }
            }
            grad_sel.add_outer(&dr, &xi, 1.0);
        }
        if alpha != 0.0 {
            grad_query.add(&grad_sel, alpha);
        }
    }
    Ok(JointLoss {
        l_r,
        l_s,
        total: alpha * l_s + l_r,
        grad_query,
        grad_head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negatives: usize,
    /// Regenerate labels with the current encoder every this many epochs (0 = never).
    pub refresh_prl_every: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: crate::dense::DEFAULT_LR,
            epochs: 10,
            seed: 0,
            negatives: 4,
            refresh_prl_every: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("need at least one negative per example".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointEpoch {
    pub epoch: usize,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    pub total: f64,
}

pub fn format_log(log: &[JointEpoch]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Training turns: every turn of `sessions` with a judged-relevant passage in
/// the collection, the lowest doc id serving as positive.
pub fn joint_examples<'a>(
    sessions: &'a [ConversationSession],
    collection: &Collection,
    qrels: &Qrels,
) -> Vec<JointExample<'a>> {
    let mut out = Vec::new();
    for s in sessions {
        for n in 1..=s.len() {
            let key = s.turn(n).key();
            let mut relevant: Vec<&str> = qrels.relevant(&key).into_iter().collect();
            relevant.sort_unstable();
            if let Some(positive) = relevant.iter().find_map(|d| collection.position(d)) {
                out.push(JointExample { session: s, n, positive });
            }
        }
    }
    out
}

/// The `q^all` retriever-only examples matching [`joint_examples`].
pub fn retriever_examples(examples: &[JointExample<'_>]) -> Result<Vec<QueryExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(QueryExample {
                query: compose_query(e.session, e.n, &ExpansionForm::All)?,
                positive: e.positive,
            })
        })
        .collect()
}

fn turn_labels<'t>(table: &'t LabelTable, example: &JointExample<'_>) -> Option<&'t [bool]> {
    table
        .get(&example.session.session_id, example.n)
        .filter(|flags| flags.len() + 1 == example.n)
}

/// Gradient descent on `W_q`, `V`, `c`, one example at a time in the shared
/// seeded order. Turns whose labels are missing contribute only `L_R`.
pub fn train_joint(
    mut encoder: DenseEncoder,
    sessions: &[ConversationSession],
    labels: &LabelTable,
    collection: &Collection,
    qrels: &Qrels,
    config: &JointConfig,
) -> Result<(DenseEncoder, SelectorHead, Vec<JointEpoch>)> {
    config.validate()?;
    let examples = joint_examples(sessions, collection, qrels);
    if examples.is_empty() {
        return Err(Error::InvalidArgument("joint training set is empty".into()));
    }
    let passages = PassageMatrix::build(&encoder, collection);
    let mut table = labels.clone();
    let flags: Vec<bool> = examples
        .iter()
        .filter_map(|e| turn_labels(&table, e))
        .flatten()
        .copied()
        .collect();
    let weights = if flags.is_empty() {
        ClassWeights::UNIFORM
    } else {
        class_weights(&flags)?
    };
    let mut head = SelectorHead::init(encoder.dim(), config.seed);
    let mut schedule = Schedule::new(config.seed, passages.len(), config.negatives);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.refresh_prl_every > 0 && epoch > 0 && epoch % config.refresh_prl_every == 0 {
            let retriever = DenseRetriever::new(&encoder, &passages);
            let fresh = generate_prl_all(sessions, &retriever, qrels, DEFAULT_DEPTH)?;
            table = LabelTable::from_labels(&fresh.labels)?;
        }
        let (mut l_r, mut l_s, mut total) = (0.0, 0.0, 0.0);
        for idx in schedule.epoch_order(examples.len()) {
            let ex = &examples[idx];
            let negatives = schedule.sample_negatives(ex.positive);
            let turn = turn_labels(&table, ex);
            let loss = joint_loss(&encoder, &head, &passages, ex, &negatives, turn, weights, config.alpha)?;
            l_r += loss.l_r;
            l_s += loss.l_s;
            total += loss.total;
            encoder.apply_query_gradient(&loss.grad_query, config.lr);
            for cls in 0..2 {
                head.c[cls] -= config.lr * loss.grad_head.c[cls];
                for (w, g) in head.v[cls].iter_mut().zip(&loss.grad_head.v[cls]) {
                    *w -= config.lr * g;
                }
            }
        }
        let m = examples.len() as f64;
        log.push(JointEpoch {
            epoch: epoch + 1,
            l_r: l_r / m,
            l_s: l_s / m,
            total: total / m,
        });
    }
    Ok((encoder, head, log))
}
