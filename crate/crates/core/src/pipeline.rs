//! Config-driven pipeline stages over a fixed workdir layout.
//!
//! ```text
//! workdir/
//!   index/    bm25.json, dense.json
//!   prl/      labels.jsonl, skipped.txt, term_labels.jsonl, selector_predictions.jsonl
//!   models/   selector.json, joint_encoder.json, joint_head.json
//!   runs/     <retriever>_<form>.run
//!   reports/  *.json, *.tsv, joint_log.jsonl
//! ```
//!
//! Stages: `index` → `prl` → `selector-train` / `joint-train` → `retrieve`
//! → `evaluate` / `analyze`. `synth` and `fig2` stand alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisReport};
use crate::data::{
    load_corpus, load_qrels, load_run, load_sessions, save_corpus, save_qrels, save_run, save_sessions,
    write_string, Collection, ConversationSession, Qrels, RankedList,
};
use crate::dense::{
    doc_pseudo_queries, train_retriever, DenseEncoder, DenseRetriever, PassageMatrix, RetrieverTrainConfig,
};
use crate::error::{Error, Result};
use crate::joint::{format_log, train_joint, JointConfig};
use crate::metrics::{evaluate_run, EvalReport, MetricSpec};
use crate::prl::{
    compose_query, generate_prl_all, generate_term_prl, load_labels, save_labels, ExpansionForm, Label,
    LabelTable, PrLabel, Retriever, TermLabel,
};
use crate::selector::{
    build_samples, classification_report, predict_and_expand, train_selector, ClassificationReport,
    FeatureExtractor, SelectorHyper, SelectorModel,
};
use crate::sparse::{Bm25Params, InvertedIndex};
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

impl RetrieverKind {
    pub fn name(self) -> &'static str {
        match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
        }
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(RetrieverKind::Bm25),
            "dense" => Ok(RetrieverKind::Dense),
            other => Err(Error::Config(format!("unknown retriever `{other}` (expected bm25 or dense)"))),
        }
    }
}

/// Flat key/value run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub sessions: PathBuf,
    pub qrels: PathBuf,
    pub workdir: PathBuf,
    pub retriever: RetrieverKind,
    /// Retrieval depth.
    pub k: usize,
    pub seed: u64,
    /// Share of sessions (taken from the end) held out for testing.
    pub test_fraction: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub dense_dim: usize,
    pub dense_vocab_cap: usize,
    pub dense_lr: f64,
    pub dense_epochs: usize,
    pub dense_negatives: usize,
    /// Pseudo-queries sampled per document for the initial dense training.
    pub dense_pseudo_queries: usize,
    pub dense_pseudo_len: usize,
    pub selector_lr: f64,
    pub selector_epochs: usize,
    pub selector_threshold: f64,
    pub selector_weighted: bool,
    pub joint_alpha: f64,
    pub joint_lr: f64,
    pub joint_epochs: usize,
    pub joint_negatives: usize,
    pub joint_refresh_prl_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bm25 = Bm25Params::default();
        let dense = RetrieverTrainConfig::default();
        let selector = SelectorHyper::default();
        let joint = JointConfig::default();
        Self {
            corpus: "corpus.jsonl".into(),
            sessions: "sessions.jsonl".into(),
            qrels: "qrels.txt".into(),
            workdir: "work".into(),
            retriever: RetrieverKind::Bm25,
            k: crate::prl::DEFAULT_DEPTH,
            seed: 0,
            test_fraction: 0.2,
            bm25_k1: bm25.k1,
            bm25_b: bm25.b,
            dense_dim: crate::dense::DEFAULT_DIM,
            dense_vocab_cap: crate::dense::DEFAULT_VOCAB_CAP,
            dense_lr: dense.lr,
            dense_epochs: 5,
            dense_negatives: dense.negatives,
            dense_pseudo_queries: 2,
            dense_pseudo_len: 3,
            selector_lr: selector.lr,
            selector_epochs: selector.epochs,
            selector_threshold: selector.threshold,
            selector_weighted: selector.weighted,
            joint_alpha: joint.alpha,
            joint_lr: joint.lr,
            joint_epochs: joint.epochs,
            joint_negatives: joint.negatives,
            joint_refresh_prl_every: joint.refresh_prl_every,
        }
    }
}

const PATH_KEYS: [&str; 4] = ["corpus", "sessions", "qrels", "workdir"];

/// Parses `value` as a TOML scalar, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Parses TOML text, resolving relative paths against `base`, then applies
    /// `key=value` overrides (override paths stay as given).
    pub fn from_toml(text: &str, base: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(base) = base {
            for key in PATH_KEYS {
                if let Some(toml::Value::String(p)) = table.get(key) {
                    let resolved = base.join(p);
                    table.insert(key.to_string(), toml::Value::String(resolved.to_string_lossy().into_owned()));
                }
            }
        }
        for (key, value) in overrides {
            table.insert(key.clone(), override_value(value));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file (or defaults when `path` is `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, p.parent(), overrides)
            }
            None => Self::from_toml("", None, overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if self.dense_dim < 2 {
            return Err(Error::Config(format!("dense_dim must be >= 2, got {}", self.dense_dim)));
        }
        if !(0.0..=1.0).contains(&self.selector_threshold) {
            return Err(Error::Config(format!(
                "selector_threshold must be in [0, 1], got {}",
                self.selector_threshold
            )));
        }
        self.bm25().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.dense_train().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.joint().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.selector_lr > 0.0 && self.selector_lr.is_finite()) {
            return Err(Error::Config(format!("selector_lr must be > 0, got {}", self.selector_lr)));
        }
        Ok(())
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    pub fn dense_train(&self) -> RetrieverTrainConfig {
        RetrieverTrainConfig {
            lr: self.dense_lr,
            epochs: self.dense_epochs,
            negatives: self.dense_negatives,
            seed: self.seed,
        }
    }

    pub fn selector(&self) -> SelectorHyper {
        SelectorHyper {
            lr: self.selector_lr,
            epochs: self.selector_epochs,
            seed: self.seed,
            weighted: self.selector_weighted,
            threshold: self.selector_threshold,
        }
    }

    pub fn joint(&self) -> JointConfig {
        JointConfig {
            alpha: self.joint_alpha,
            lr: self.joint_lr,
            epochs: self.joint_epochs,
            seed: self.seed,
            negatives: self.joint_negatives,
            refresh_prl_every: self.joint_refresh_prl_every,
        }
    }

    pub fn workdir(&self) -> Workdir {
        Workdir::new(&self.workdir)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Artifact locations inside a workdir.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bm25_index(&self) -> PathBuf {
        self.root.join("index/bm25.json")
    }

    pub fn dense_encoder(&self) -> PathBuf {
        self.root.join("index/dense.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("prl/labels.jsonl")
    }

    pub fn skipped(&self) -> PathBuf {
        self.root.join("prl/skipped.txt")
    }

    pub fn term_labels(&self) -> PathBuf {
        self.root.join("prl/term_labels.jsonl")
    }

    pub fn selector_predictions(&self) -> PathBuf {
        self.root.join("prl/selector_predictions.jsonl")
    }

    pub fn selector_model(&self) -> PathBuf {
        self.root.join("models/selector.json")
    }

    pub fn joint_encoder(&self) -> PathBuf {
        self.root.join("models/joint_encoder.json")
    }

    pub fn joint_head(&self) -> PathBuf {
        self.root.join("models/joint_head.json")
    }

    pub fn run(&self, retriever: &str, form: Form) -> PathBuf {
        self.root.join(format!("runs/{retriever}_{}.run", form.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

/// Fails with the producing subcommand named when `path` does not exist.
pub fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

/// Query form used by `retrieve`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Raw,
    All,
    /// Expansion with the stored pseudo relevance labels.
    Prl,
    /// Expansion with the trained selector's predictions.
    Selector,
}

impl Form {
    pub fn name(self) -> &'static str {
        match self {
            Form::Raw => "raw",
            Form::All => "all",
            Form::Prl => "prl",
            Form::Selector => "selector",
        }
    }
}

impl FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Form::Raw),
            "all" => Ok(Form::All),
            "prl" => Ok(Form::Prl),
            "selector" => Ok(Form::Selector),
            other => Err(Error::InvalidArgument(format!(
                "unknown form `{other}` (expected raw, all, prl or selector)"
            ))),
        }
    }
}

/// Which sessions a stage runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected all, train or test)"
            ))),
        }
    }
}

/// Positional split: the last `round(len * test_fraction)` sessions are held out.
pub fn split_sessions(sessions: &[ConversationSession], test_fraction: f64) -> (&[ConversationSession], &[ConversationSession]) {
    let n_test = ((sessions.len() as f64) * test_fraction).round() as usize;
    sessions.split_at(sessions.len() - n_test.min(sessions.len()))
}

fn select_split(sessions: &[ConversationSession], test_fraction: f64, split: Split) -> &[ConversationSession] {
    let (train, test) = split_sessions(sessions, test_fraction);
    match split {
        Split::All => sessions,
        Split::Train => train,
        Split::Test => test,
    }
}

/// Corpus, sessions and qrels named by a config.
pub struct Inputs {
    pub collection: Collection,
    pub sessions: Vec<ConversationSession>,
    pub qrels: Qrels,
}

impl Inputs {
    pub fn load(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            collection: load_corpus(&config.corpus)?,
            sessions: load_sessions(&config.sessions)?,
            qrels: load_qrels(&config.qrels)?,
        })
    }
}

/// A retriever loaded from workdir artifacts.
pub enum LoadedRetriever {
    Bm25(InvertedIndex),
    Dense(DenseEncoder, PassageMatrix),
}

impl Retriever for LoadedRetriever {
    fn retrieve_text(&self, query: &str, k: usize) -> Result<RankedList> {
        match self {
            LoadedRetriever::Bm25(index) => index.retrieve_text(query, k),
            LoadedRetriever::Dense(encoder, passages) => DenseRetriever::new(encoder, passages).retrieve_text(query, k),
        }
    }
}

fn load_retriever(
    kind: RetrieverKind,
    work: &Workdir,
    collection: &Collection,
    encoder_path: Option<&Path>,
) -> Result<LoadedRetriever> {
    match kind {
        RetrieverKind::Bm25 => {
            require(&work.bm25_index(), "index")?;
            Ok(LoadedRetriever::Bm25(InvertedIndex::load(work.bm25_index())?))
        }
        RetrieverKind::Dense => {
            let path = match encoder_path {
                Some(p) => p.to_path_buf(),
                None => {
                    require(&work.dense_encoder(), "index")?;
                    work.dense_encoder()
                }
            };
            let encoder = DenseEncoder::load(&path)?;
            let passages = PassageMatrix::build(&encoder, collection);
            Ok(LoadedRetriever::Dense(encoder, passages))
        }
    }
}

/// Fresh encoder trained on pseudo-queries drawn from the corpus itself.
pub fn train_dense_encoder(collection: &Collection, config: &RunConfig) -> Result<DenseEncoder> {
    let encoder = DenseEncoder::new(collection, config.dense_dim, config.dense_vocab_cap, config.seed)?;
    let passages = PassageMatrix::build(&encoder, collection);
    let examples = doc_pseudo_queries(collection, config.dense_pseudo_queries, config.dense_pseudo_len, config.seed);
    let (encoder, _) = train_retriever(encoder, &passages, &examples, &config.dense_train())?;
    Ok(encoder)
}

/// Expansion choice per turn for one run.
pub enum FormSource<'a> {
    Raw,
    All,
    /// Labels per turn; unlabeled turns fall back to the raw query.
    Labels(&'a LabelTable),
}

/// One ranked list per turn of every session, keyed by query key.
pub fn run_form(
    retriever: &impl Retriever,
    sessions: &[ConversationSession],
    form: &FormSource<'_>,
    k: usize,
) -> Result<Vec<RankedList>> {
    let mut run = Vec::new();
    for s in sessions {
        for n in 1..=s.len() {
            let expansion = match form {
                FormSource::Raw => ExpansionForm::Raw,
                FormSource::All => ExpansionForm::All,
                FormSource::Labels(table) => match table.get(&s.session_id, n) {
                    Some(flags) => ExpansionForm::Prl(flags.to_vec()),
                    None => ExpansionForm::Raw,
                },
            };
            let query = compose_query(s, n, &expansion)?;
            run.push(retriever.retrieve_text(&query, k)?.with_key(s.turn(n).key()));
        }
    }
    Ok(run)
}

pub fn fig2_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::Mrr(None),
        MetricSpec::Ndcg(3),
        MetricSpec::Recall(10),
        MetricSpec::Recall(100),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub retriever: String,
    pub form: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fig2Report {
    pub rows: Vec<Fig2Row>,
}

impl Fig2Report {
    pub fn get(&self, retriever: &str, form: &str, metric: MetricSpec) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.retriever == retriever && r.form == form)
            .and_then(|r| r.metrics.get(&metric.to_string()).copied())
    }

    pub fn to_tsv(&self) -> String {
        let specs = fig2_metrics();
        let mut out = String::from("retriever\tform");
        for s in &specs {
            let _ = write!(out, "\t{s}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", row.retriever, row.form);
            for s in &specs {
                let _ = write!(out, "\t{:.4}", row.metrics.get(&s.to_string()).copied().unwrap_or(0.0));
            }
            out.push('\n');
        }
        out
    }
}

/// Raw, all and gold-PRL expansion evaluated under `retriever`, with the gold
/// labels generated by that same retriever.
pub fn compare_forms(
    name: &str,
    retriever: &impl Retriever,
    sessions: &[ConversationSession],
    qrels: &Qrels,
    k: usize,
) -> Result<Vec<Fig2Row>> {
    let labels = generate_prl_all(sessions, retriever, qrels, k)?;
    let table = LabelTable::from_labels(&labels.labels)?;
    let specs = fig2_metrics();
    let mut rows = Vec::new();
    for (form, source) in [
        ("raw", FormSource::Raw),
        ("all", FormSource::All),
        ("gold-prl", FormSource::Labels(&table)),
    ] {
        let run = run_form(retriever, sessions, &source, k)?;
        let report = evaluate_run(&run, qrels, &specs)?;
        rows.push(Fig2Row {
            retriever: name.to_string(),
            form: form.to_string(),
            metrics: specs
                .iter()
                .map(|s| (s.to_string(), report.mean(*s).unwrap_or(0.0)))
                .collect(),
        });
    }
    Ok(rows)
}

/// The expansion-form comparison under BM25 and under the pseudo-query-trained
/// dense encoder.
pub fn fig2(inputs: &Inputs, config: &RunConfig) -> Result<Fig2Report> {
    let index = InvertedIndex::build(&inputs.collection, config.bm25())?;
    let mut rows = compare_forms("bm25", &index, &inputs.sessions, &inputs.qrels, config.k)?;
    let encoder = train_dense_encoder(&inputs.collection, config)?;
    let passages = PassageMatrix::build(&encoder, &inputs.collection);
    let dense = DenseRetriever::new(&encoder, &passages);
    rows.extend(compare_forms("dense", &dense, &inputs.sessions, &inputs.qrels, config.k)?);
    Ok(Fig2Report { rows })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_string(path, &serde_json::to_string_pretty(value)?)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn cmd_index(config: &RunConfig) -> Result<String> {
    let collection = load_corpus(&config.corpus)?;
    let work = config.workdir();
    let index = InvertedIndex::build(&collection, config.bm25())?;
    index.save(work.bm25_index())?;
    let encoder = train_dense_encoder(&collection, config)?;
    encoder.save(work.dense_encoder())?;
    Ok(format!(
        "indexed {} documents\nwrote {}\nwrote {} (dim {}, vocab {})\n",
        collection.len(),
        display(&work.bm25_index()),
        display(&work.dense_encoder()),
        encoder.dim(),
        encoder.vocab_size()
    ))
}

pub fn cmd_prl_generate(config: &RunConfig, terms: bool) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let work = config.workdir();
    let retriever = load_retriever(config.retriever, &work, &inputs.collection, None)?;
    let out = generate_prl_all(&inputs.sessions, &retriever, &inputs.qrels, config.k)?;
    save_labels(work.labels(), &out.labels)?;
    let mut skipped = out.skipped.join("\n");
    if !skipped.is_empty() {
        skipped.push('\n');
    }
    write_string(&work.skipped(), &skipped)?;
    let pos = out.labels.iter().filter(|l| l.label.is_positive()).count();
    let mut msg = format!(
        "{} labels ({} positive, {} negative), {} turns skipped without relevant documents\nwrote {}\n",
        out.labels.len(),
        pos,
        out.labels.len() - pos,
        out.skipped.len(),
        display(&work.labels())
    );
    if terms {
        let mut term_labels: Vec<TermLabel> = Vec::new();
        for s in &inputs.sessions {
            term_labels.extend(generate_term_prl(s, &retriever, &inputs.qrels, config.k)?.labels);
        }
        save_labels(work.term_labels(), &term_labels)?;
        let _ = writeln!(msg, "{} term labels\nwrote {}", term_labels.len(), display(&work.term_labels()));
    }
    Ok(msg)
}

fn load_label_table(work: &Workdir) -> Result<(Vec<PrLabel>, LabelTable)> {
    require(&work.labels(), "prl")?;
    let labels = load_labels(work.labels())?;
    let table = LabelTable::from_labels(&labels)?;
    Ok((labels, table))
}

fn load_feature_inputs(work: &Workdir) -> Result<(DenseEncoder, InvertedIndex)> {
    require(&work.bm25_index(), "index")?;
    require(&work.dense_encoder(), "index")?;
    Ok((DenseEncoder::load(work.dense_encoder())?, InvertedIndex::load(work.bm25_index())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub w_pos: f64,
    pub w_neg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<ClassificationReport>,
}

pub fn cmd_selector_train(config: &RunConfig) -> Result<String> {
    let sessions = load_sessions(&config.sessions)?;
    let work = config.workdir();
    let (_, table) = load_label_table(&work)?;
    let (encoder, index) = load_feature_inputs(&work)?;
    let extractor = FeatureExtractor::new(&encoder, &index);
    let (train, test) = split_sessions(&sessions, config.test_fraction);
    let model = train_selector(&table, train, &extractor, &config.selector())?;
    model.save(work.selector_model())?;
    let train_samples = build_samples(&table, train, &extractor).len();
    let test_samples = build_samples(&table, test, &extractor);
    let test_report = if test_samples.is_empty() {
        None
    } else {
        let pred: Vec<bool> = test_samples.iter().map(|(f, _)| model.predict(f)).collect();
        let gold: Vec<bool> = test_samples.iter().map(|(_, y)| *y).collect();
        Some(classification_report(&pred, &gold)?)
    };
    let report = SelectorReport {
        train_samples,
        test_samples: test_samples.len(),
        w_pos: model.w_pos,
        w_neg: model.w_neg,
        test: test_report,
    };
    write_json(&work.report("selector.json"), &report)?;
    let mut msg = format!(
        "trained on {} candidates (w_pos {:.4}, w_neg {:.4})\nwrote {}\n",
        train_samples,
        model.w_pos,
        model.w_neg,
        display(&work.selector_model())
    );
    if let Some(r) = &report.test {
        write_string(&work.report("selector.tsv"), &r.to_tsv())?;
        msg.push_str(&r.to_tsv());
    }
    Ok(msg)
}

/// One selector decision, written next to the labels it is compared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorPrediction {
    pub session_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    #[serde(rename = "candidate")]
    pub candidate_index: usize,
    pub label: Label,
}

pub fn predictions_table(predictions: &[SelectorPrediction]) -> LabelTable {
    let mut grouped: BTreeMap<(String, usize), Vec<bool>> = BTreeMap::new();
    for p in predictions {
        grouped
            .entry((p.session_id.clone(), p.turn_index))
            .or_default()
            .push(p.label.is_positive());
    }
    let mut table = LabelTable::default();
    for ((sid, n), flags) in grouped {
        table.insert(sid, n, flags);
    }
    table
}

pub struct RetrieveArgs<'a> {
    pub form: Form,
    pub split: Split,
    /// Dense encoder to use instead of `index/dense.json`.
    pub encoder: Option<&'a Path>,
}

pub fn cmd_retrieve(config: &RunConfig, args: &RetrieveArgs<'_>) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let work = config.workdir();
    let sessions = select_split(&inputs.sessions, config.test_fraction, args.split);
    let retriever = load_retriever(config.retriever, &work, &inputs.collection, args.encoder)?;
    let mut extra = String::new();
    let run = match args.form {
        Form::Raw => run_form(&retriever, sessions, &FormSource::Raw, config.k)?,
        Form::All => run_form(&retriever, sessions, &FormSource::All, config.k)?,
        Form::Prl => {
            let (_, table) = load_label_table(&work)?;
            run_form(&retriever, sessions, &FormSource::Labels(&table), config.k)?
        }
        Form::Selector => {
            require(&work.selector_model(), "selector-train")?;
            let model = SelectorModel::load(work.selector_model())?;
            let (encoder, index) = load_feature_inputs(&work)?;
            let extractor = FeatureExtractor::new(&encoder, &index);
            let mut run = Vec::new();
            let mut predictions = Vec::new();
            for s in sessions {
                for n in 1..=s.len() {
                    let (selected, query) = predict_and_expand(&model, &extractor, s, n)?;
                    predictions.extend(selected.iter().enumerate().map(|(i, &sel)| SelectorPrediction {
                        session_id: s.session_id.clone(),
                        turn_index: n,
                        candidate_index: i + 1,
                        label: Label::from_bool(sel),
                    }));
                    run.push(retriever.retrieve_text(&query, config.k)?.with_key(s.turn(n).key()));
                }
            }
            save_labels(work.selector_predictions(), &predictions)?;
            let _ = writeln!(extra, "wrote {}", display(&work.selector_predictions()));
            run
        }
    };
    let path = work.run(config.retriever.name(), args.form);
    save_run(&path, &run, &format!("convsel-{}-{}", config.retriever.name(), args.form.name()))?;
    Ok(format!("{} queries\n{extra}wrote {}\n", run.len(), display(&path)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub examples: usize,
    pub test_mrr_all_before: Option<f64>,
    pub test_mrr_all_after: Option<f64>,
}

pub fn cmd_joint_train(config: &RunConfig) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let work = config.workdir();
    let (_, table) = load_label_table(&work)?;
    require(&work.dense_encoder(), "index")?;
    let base = DenseEncoder::load(work.dense_encoder())?;
    let (train, test) = split_sessions(&inputs.sessions, config.test_fraction);
    let (encoder, head, log) = train_joint(base.clone(), train, &table, &inputs.collection, &inputs.qrels, &config.joint())?;
    encoder.save(work.joint_encoder())?;
    head.save(work.joint_head())?;
    write_string(&work.report("joint_log.jsonl"), &format_log(&log)?)?;
    let test_mrr = |enc: &DenseEncoder| -> Result<Option<f64>> {
        if test.is_empty() {
            return Ok(None);
        }
        let passages = PassageMatrix::build(enc, &inputs.collection);
        let run = run_form(&DenseRetriever::new(enc, &passages), test, &FormSource::All, config.k)?;
        Ok(evaluate_run(&run, &inputs.qrels, &[MetricSpec::Mrr(None)])?.mean(MetricSpec::Mrr(None)))
    };
    let report = JointReport {
        examples: crate::joint::joint_examples(train, &inputs.collection, &inputs.qrels).len(),
        test_mrr_all_before: test_mrr(&base)?,
        test_mrr_all_after: test_mrr(&encoder)?,
    };
    write_json(&work.report("joint.json"), &report)?;
    let mut msg = String::new();
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        let _ = writeln!(
            msg,
            "epoch {}: L_R {:.4} L_S {:.4} total {:.4}\nepoch {}: L_R {:.4} L_S {:.4} total {:.4}",
            first.epoch, first.l_r, first.l_s, first.total, last.epoch, last.l_r, last.l_s, last.total
        );
    }
    if let (Some(b), Some(a)) = (report.test_mrr_all_before, report.test_mrr_all_after) {
        let _ = writeln!(msg, "held-out MRR with q^all: {b:.4} -> {a:.4}");
    }
    let _ = writeln!(msg, "wrote {}\nwrote {}", display(&work.joint_encoder()), display(&work.joint_head()));
    Ok(msg)
}

pub fn cmd_evaluate(config: &RunConfig, run_path: &Path, metrics: &[MetricSpec]) -> Result<(EvalReport, String)> {
    let qrels = load_qrels(&config.qrels)?;
    if !run_path.exists() {
        return Err(Error::MissingArtifact {
            path: run_path.to_path_buf(),
            producer: "retrieve",
        });
    }
    let run = load_run(run_path)?;
    let specs = if metrics.is_empty() {
        MetricSpec::standard()
    } else {
        metrics.to_vec()
    };
    let report = evaluate_run(&run, &qrels, &specs)?;
    let stem = run_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let work = config.workdir();
    write_string(&work.report(&format!("{stem}.eval.json")), &report.to_json()?)?;
    write_string(&work.report(&format!("{stem}.eval.tsv")), &report.to_tsv())?;
    let mut msg = String::new();
    for s in &specs {
        let _ = writeln!(msg, "{s}\t{:.4}", report.mean(*s).unwrap_or(0.0));
    }
    if !report.unjudged.is_empty() {
        let _ = writeln!(msg, "({} run queries without judgments ignored)", report.unjudged.len());
    }
    Ok((report, msg))
}

pub fn cmd_analyze(config: &RunConfig) -> Result<(AnalysisReport, String)> {
    let work = config.workdir();
    let (_, table) = load_label_table(&work)?;
    let predicted = if work.selector_predictions().exists() {
        let text = std::fs::read_to_string(work.selector_predictions())
            .map_err(|e| Error::io(work.selector_predictions(), e))?;
        let mut preds = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            preds.push(serde_json::from_str::<SelectorPrediction>(line)?);
        }
        // Compare only on the turns the selector ran over.
        let pt = predictions_table(&preds);
        let mut gold = LabelTable::default();
        for (sid, n, _) in pt.iter() {
            if let Some(flags) = table.get(sid, n) {
                gold.insert(sid, n, flags.to_vec());
            }
        }
        let mut restricted = LabelTable::default();
        for (sid, n, flags) in pt.iter() {
            if gold.get(sid, n).is_some() {
                restricted.insert(sid, n, flags.to_vec());
            }
        }
        Some((gold, restricted))
    } else {
        None
    };
    let r = config.retriever.name();
    let (sel_path, all_path) = (work.run(r, Form::Selector), work.run(r, Form::All));
    let runs = if sel_path.exists() && all_path.exists() {
        Some((load_run(&sel_path)?, load_run(&all_path)?, load_qrels(&config.qrels)?))
    } else {
        None
    };
    let mut report = analyze(
        &table,
        None,
        runs.as_ref().map(|(a, b, q)| (a.as_slice(), b.as_slice(), q)),
    )?;
    if let Some((gold, pred)) = &predicted {
        report.agreement = Some(crate::analysis::judgment_agreement(gold, pred)?);
    }
    write_string(&work.report("analysis.json"), &report.to_json()?)?;
    write_string(&work.report("analysis.tsv"), &report.to_tsv())?;
    let mut msg = report.to_tsv();
    let _ = writeln!(msg, "mean topics per conversation\t{:.3}", report.topics_per_conv.mean);
    let _ = writeln!(msg, "wrote {}", display(&work.report("analysis.json")));
    Ok((report, msg))
}

pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<String> {
    let data = generate(spec)?;
    save_corpus(out_dir.join("corpus.jsonl"), &data.collection)?;
    save_sessions(out_dir.join("sessions.jsonl"), &data.sessions)?;
    save_qrels(out_dir.join("qrels.txt"), &data.qrels)?;
    let mut truth = String::new();
    for t in &data.truth {
        truth.push_str(&serde_json::to_string(t)?);
        truth.push('\n');
    }
    write_string(&out_dir.join("truth.jsonl"), &truth)?;
    write_string(&out_dir.join("spec.json"), &serde_json::to_string_pretty(spec)?)?;
    let config = RunConfig {
        seed: spec.seed,
        ..RunConfig::default()
    };
    write_string(
        &out_dir.join("run.toml"),
        &format!("# Paths are relative to this file.\n{}", config.to_toml()?),
    )?;
    Ok(format!(
        "{} documents, {} sessions, {} judged turns ({} sessions redrawn by the self-check)\nwrote {}\n",
        data.collection.len(),
        data.sessions.len(),
        data.qrels.len(),
        data.redraws,
        display(out_dir)
    ))
}

pub fn cmd_fig2(config: &RunConfig) -> Result<(Fig2Report, String)> {
    let inputs = Inputs::load(config)?;
    let report = fig2(&inputs, config)?;
    let work = config.workdir();
    write_json(&work.report("fig2.json"), &report)?;
    write_string(&work.report("fig2.tsv"), &report.to_tsv())?;
    let msg = format!("{}wrote {}\n", report.to_tsv(), display(&work.report("fig2.tsv")));
    Ok((report, msg))
}
