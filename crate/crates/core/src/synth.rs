//! Seeded synthetic conversational search data.
//!
//! Layout of the generated world:
//!
//! - A global pool of topics. Each topic owns `docs_per_topic` documents and
//!   draws [`TERMS_PER_TOPIC`] terms from a shared topic-term pool, so any
//!   single topic term is ambiguous across several topics while a pair of them
//!   mostly pins one topic down.
//! - Facet terms: document `j` of every topic carries facet `j`. A facet alone
//!   matches one document in every topic.
//! - Cue terms: one per topic, used only in queries and never in documents.
//!   They carry no retrieval signal but let a pairwise classifier notice that
//!   two turns talk about the same thing.
//!
//! - Background terms pad every document to the same length.
//!
//! Every session is a sequence of contiguous topic blocks. Each turn asks for
//! one document of its block's topic with `[topic term, facet, cue]`. Within
//! a block every turn uses a different topic term, so an earlier same-topic
//! turn contributes a new term that narrows retrieval to the right topic. With
//! probability `noise_rate` each slot is replaced by a random topic term.
//!
//! Before returning, the generator labels each session with BM25 pseudo
//! relevance labels and checks that every noise-free same-topic pair is
//! positive. Sessions failing the check are redrawn.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{query_key, Collection, ConversationSession, Document, Qrels};
use crate::error::{Error, Result};
use crate::prl::{generate_prl, DEFAULT_DEPTH};
use crate::selector::{FeatureVector, NUM_FEATURES};
use crate::sparse::{Bm25Params, InvertedIndex};

pub const TERMS_PER_TOPIC: usize = 6;
const MIN_BACKGROUND: usize = 5;
const MAX_TOPIC_POOL: usize = 60;
/// Background terms per document. Every document has the same length so the
/// dense encoder's length normalization cannot reorder equally good matches.
const FILLER_PER_DOC: usize = 3;
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_sessions: usize,
    pub turns_per_session: usize,
    pub num_topics_per_session: usize,
    pub docs_per_topic: usize,
    /// Size of the global topic pool; the corpus has `num_topics * docs_per_topic` documents.
    pub num_topics: usize,
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_sessions: 200,
            turns_per_session: 8,
            num_topics_per_session: 3,
            docs_per_topic: 10,
            num_topics: 200,
            vocab_size: 280,
            noise_rate: 0.1,
            seed: 7,
        }
    }
}

/// How the vocabulary splits into term classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct VocabPlan {
    facets: usize,
    topic_pool: usize,
    cues: usize,
    background: usize,
}

impl SynthSpec {
    fn plan(&self) -> Result<VocabPlan> {
        let infeasible = |why: String| Err(Error::InvalidArgument(format!("infeasible synth spec: {why}")));
        if self.num_sessions == 0 || self.turns_per_session == 0 {
            return infeasible("need at least one session with one turn".into());
        }
        if self.num_topics_per_session == 0 || self.num_topics_per_session > self.turns_per_session {
            return infeasible(format!(
                "num_topics_per_session must be in 1..={}",
                self.turns_per_session
            ));
        }
        if self.num_topics_per_session > self.num_topics {
            return infeasible("more topics per session than topics in the pool".into());
        }
        if self.docs_per_topic == 0 {
            return infeasible("docs_per_topic must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return infeasible(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        let facets = self.docs_per_topic;
        let cues = self.num_topics;
        let fixed = facets + cues;
        let rest = self.vocab_size.saturating_sub(fixed);
        let topic_pool = rest.saturating_sub(MIN_BACKGROUND).min(MAX_TOPIC_POOL);
        let background = rest - topic_pool;
        if topic_pool < 2 * TERMS_PER_TOPIC || background < MIN_BACKGROUND {
            return infeasible(format!(
                "vocab_size {} too small: need at least {} ({} facets, {} cues, {} topic terms, {} background terms)",
                self.vocab_size,
                fixed + 2 * TERMS_PER_TOPIC + MIN_BACKGROUND,
                facets,
                cues,
                2 * TERMS_PER_TOPIC,
                MIN_BACKGROUND
            ));
        }
        Ok(VocabPlan {
            facets,
            topic_pool,
            cues,
            background,
        })
    }
}

/// Ground truth kept alongside the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub session_id: String,
    /// Topic id of each turn.
    pub topics: Vec<usize>,
    /// Whether any slot of each turn was replaced by noise.
    pub noisy: Vec<bool>,
}

impl SessionTruth {
    /// Number of distinct topic blocks.
    pub fn num_topics(&self) -> usize {
        1 + self.topics.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub collection: Collection,
    pub sessions: Vec<ConversationSession>,
    pub qrels: Qrels,
    pub truth: Vec<SessionTruth>,
    /// Sessions that were redrawn after failing the labeling self-check.
    pub redraws: usize,
}

struct World {
    words: Vec<String>,
    plan: VocabPlan,
    /// Topic-term ids (indices into the topic pool) per topic.
    topic_terms: Vec<Vec<usize>>,
}

impl World {
    fn facet(&self, j: usize) -> &str {
        &self.words[j]
    }

    fn topic_term(&self, p: usize) -> &str {
        &self.words[self.plan.facets + p]
    }

    fn cue(&self, t: usize) -> &str {
        &self.words[self.plan.facets + self.plan.topic_pool + t]
    }

    fn background(&self, b: usize) -> &str {
        &self.words[self.plan.facets + self.plan.topic_pool + self.plan.cues + b]
    }
}

/// Distinct pronounceable pseudo-words in a seeded order.
fn pseudo_words(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONS: &[u8] = b"bcdfghjklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables: Vec<String> = CONS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let s = syllables.len();
    let mut ids: Vec<usize> = (0..s * s * s).collect();
    ids.shuffle(rng);
    ids.truncate(count);
    ids.into_iter()
        .map(|i| format!("{}{}{}", syllables[i / (s * s)], syllables[(i / s) % s], syllables[i % s]))
        .collect()
}

/// Splits `n` turns into `k` non-empty contiguous blocks; returns block sizes.
fn block_sizes(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, n - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let plan = spec.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_words = plan.facets + plan.topic_pool + plan.cues + plan.background;
    let words = pseudo_words(total_words, &mut rng);
    let topic_terms: Vec<Vec<usize>> = (0..spec.num_topics)
        .map(|_| rand::seq::index::sample(&mut rng, plan.topic_pool, TERMS_PER_TOPIC).into_vec())
        .collect();
    let world = World {
        words,
        plan,
        topic_terms,
    };

    // Documents, with ids assigned in shuffled order so id tie-breaks carry no topic signal.
    let num_docs = spec.num_topics * spec.docs_per_topic;
    let mut id_order: Vec<usize> = (0..num_docs).collect();
    id_order.shuffle(&mut rng);
    let width = num_docs.to_string().len();
    let mut docs = Vec::with_capacity(num_docs);
    for t in 0..spec.num_topics {
        for j in 0..spec.docs_per_topic {
            let mut tokens: Vec<&str> = world.topic_terms[t].iter().map(|&p| world.topic_term(p)).collect();
            tokens.push(world.facet(j));
            for _ in 0..FILLER_PER_DOC {
                tokens.push(world.background(rng.gen_range(0..plan.background)));
            }
            tokens.shuffle(&mut rng);
            docs.push(Document {
                doc_id: format!("D{:0width$}", id_order[t * spec.docs_per_topic + j]),
                text: tokens.join(" "),
            });
        }
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let doc_id_of = |t: usize, j: usize| format!("D{:0width$}", id_order[t * spec.docs_per_topic + j]);
    let collection = Collection::new(docs)?;
    let index = InvertedIndex::build(&collection, Bm25Params::default())?;

    let sid_width = spec.num_sessions.to_string().len();
    let mut sessions = Vec::with_capacity(spec.num_sessions);
    let mut truth = Vec::with_capacity(spec.num_sessions);
    let mut qrels = Qrels::new();
    let mut redraws = 0;
    for s in 0..spec.num_sessions {
        let sid = format!("S{s:0sid_width$}");
        let mut attempt = 0;
        loop {
            let (session, t, gold, anchors) = draw_session(&sid, spec, &world, &mut rng)?;
            let mut local = Qrels::new();
            for (n, &(topic, facet)) in gold.iter().enumerate() {
                local.insert(query_key(&sid, n + 1), doc_id_of(topic, facet), 1);
            }
            if self_check(&session, &t, &anchors, &index, &local)? {
                for (n, &(topic, facet)) in gold.iter().enumerate() {
                    qrels.insert(query_key(&sid, n + 1), doc_id_of(topic, facet), 1);
                }
                sessions.push(session);
                truth.push(t);
                break;
            }
            attempt += 1;
            redraws += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(Error::InvalidArgument(format!(
                    "infeasible synth spec: session {sid} failed the labeling self-check {MAX_ATTEMPTS} times"
                )));
            }
        }
    }
    Ok(SynthData {
        collection,
        sessions,
        qrels,
        truth,
        redraws,
    })
}

/// A drawn session, its truth, `(topic, facet)` gold and planted topic term per turn.
type Draw = (ConversationSession, SessionTruth, Vec<(usize, usize)>, Vec<usize>);

fn draw_session(
    sid: &str,
    spec: &SynthSpec,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> Result<Draw> {
    let topics = rand::seq::index::sample(rng, spec.num_topics, spec.num_topics_per_session).into_vec();
    let sizes = block_sizes(spec.turns_per_session, spec.num_topics_per_session, rng);
    let mut texts = Vec::with_capacity(spec.turns_per_session);
    let mut turn_topics = Vec::with_capacity(spec.turns_per_session);
    let mut noisy = Vec::with_capacity(spec.turns_per_session);
    let mut gold = Vec::with_capacity(spec.turns_per_session);
    let mut anchors = Vec::with_capacity(spec.turns_per_session);
    for (&t, &size) in topics.iter().zip(&sizes) {
        let mut order = world.topic_terms[t].clone();
        order.shuffle(rng);
        for j in 0..size {
            let facet = rng.gen_range(0..spec.docs_per_topic);
            let anchor = order[j % TERMS_PER_TOPIC];
            anchors.push(anchor);
            let mut slots: Vec<String> = vec![
                world.topic_term(anchor).to_string(),
                world.facet(facet).to_string(),
                world.cue(t).to_string(),
            ];
            let mut any_noise = false;
            for slot in slots.iter_mut() {
                if rng.gen_bool(spec.noise_rate) {
                    *slot = world.topic_term(rng.gen_range(0..world.plan.topic_pool)).to_string();
                    any_noise = true;
                }
            }
            slots.shuffle(rng);
            texts.push(slots.join(" "));
            turn_topics.push(t);
            noisy.push(any_noise);
            gold.push((t, facet));
        }
    }
    let session = ConversationSession::new(sid, &texts)?;
    Ok((
        session,
        SessionTruth {
            session_id: sid.to_string(),
            topics: turn_topics,
            noisy,
        },
        gold,
        anchors,
    ))
}

/// Every noise-free same-topic pair must be labeled positive by BM25 labeling.
/// Pairs planted with the same topic term are exempt: the candidate adds no
/// topic evidence the current query lacks (blocks longer than the topic's
/// term list wrap around).
fn self_check(
    session: &ConversationSession,
    truth: &SessionTruth,
    anchors: &[usize],
    index: &InvertedIndex,
    qrels: &Qrels,
) -> Result<bool> {
    let labels = generate_prl(session, index, qrels, DEFAULT_DEPTH)?;
    Ok(labels.labels.iter().all(|l| {
        let (n, i) = (l.turn_index - 1, l.candidate_index - 1);
        let planted = truth.topics[n] == truth.topics[i]
            && anchors[n] != anchors[i]
            && !truth.noisy[n]
            && !truth.noisy[i];
        !planted || l.label.is_positive()
    }))
}

/// Distinct topic ids used across the sessions.
pub fn topics_used(truth: &[SessionTruth]) -> BTreeSet<usize> {
    truth.iter().flat_map(|t| t.topics.iter().copied()).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Feature samples whose class is decided by the Jaccard feature alone
/// (positives above 0.6, negatives below 0.4); roughly 1 positive in 3.
pub fn separable_feature_set(n: usize, seed: u64) -> Vec<(FeatureVector, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let positive = rng.gen_bool(1.0 / 3.0);
            let jaccard = if positive {
                rng.gen_range(0.6..1.0)
            } else {
                rng.gen_range(0.0..0.4)
            };
            let f = FeatureVector {
                jaccard,
                dense_cos: rng.gen_range(-1.0..1.0),
                recency: rng.gen_range(0.0..1.0),
                len_ratio: rng.gen_range(0.0..4.0),
                idf_overlap: rng.gen_range(0.0..10.0),
            };
            (f, positive)
        })
        .collect()
}

/// Overlapping Gaussian classes: `positives` samples centered half a unit above
/// `negatives` samples on every feature.
pub fn imbalanced_feature_set(positives: usize, negatives: usize, seed: u64) -> Vec<(FeatureVector, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives + negatives);
    for k in 0..positives + negatives {
        let positive = k < positives;
        let shift = if positive { 0.5 } else { 0.0 };
        let mut a = [0.0; NUM_FEATURES];
        for x in a.iter_mut() {
            *x = gaussian(&mut rng) + shift;
        }
        out.push((FeatureVector::from_array(a), positive));
    }
    out.shuffle(&mut rng);
    out
}
