//! Per-instance bipartite attribute graph: attribute proposal, edge
//! construction, activation from decoder states and label induction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::corpus::{write_jsonl, EmbeddingTable, Instance, LabelVocabulary};
use crate::error::{Error, Result};
use crate::nn::init_uniform;
use crate::tensor::{cosine, Matrix};

pub const DEFAULT_THETA_C: f64 = 0.1;
pub const DEFAULT_THETA_S: f64 = 0.2;

/// Placeholder that replaces the mention in a proposer query.
pub const MASK: &str = "[MASK]";

/// Version tag of the shipped stop-word list.
pub const STOP_LIST_VERSION: &str = "en-v1";

static STOP_WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();

fn stop_words() -> &'static HashSet<&'static str> {
    STOP_WORDS.get_or_init(|| {
        include_str!("stopwords_en_v1.txt")
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

/// Case-insensitive membership in the shipped stop list.
pub fn is_stop_word(word: &str) -> bool {
    stop_words().contains(word.to_lowercase().as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Context,
    Entity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProposal {
    pub word: String,
    pub score: f64,
    pub source: AttributeSource,
}

/// Sentence with the mention replaced by a single [`MASK`] token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedQuery {
    pub id: String,
    pub tokens: Vec<String>,
    pub mask_index: usize,
}

impl MaskedQuery {
    pub fn from_instance(instance: &Instance) -> Self {
        let mut tokens = instance.left_tokens.clone();
        let mask_index = tokens.len();
        tokens.push(MASK.to_string());
        tokens.extend(instance.right_tokens.iter().cloned());
        Self {
            id: instance.id.clone(),
            tokens,
            mask_index,
        }
    }

    /// Key used by the lookup-table proposer.
    pub fn key(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Scores candidate words for the masked span.
pub trait MaskedWordProposer: Send + Sync {
    fn propose(&self, query: &MaskedQuery) -> Result<Vec<(String, f64)>>;
}

/// Deterministic proposer keyed by the masked sentence text.
#[derive(Debug, Clone, Default)]
pub struct LookupProposer {
    table: HashMap<String, Vec<(String, f64)>>,
}

impl LookupProposer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, masked_sentence: impl Into<String>, candidates: Vec<(String, f64)>) {
        self.table.insert(masked_sentence.into(), candidates);
    }
}

impl MaskedWordProposer for LookupProposer {
    fn propose(&self, query: &MaskedQuery) -> Result<Vec<(String, f64)>> {
        self.table
            .get(&query.key())
            .cloned()
            .ok_or_else(|| Error::Proposer {
                id: query.id.clone(),
                message: format!("no entry for `{}`", query.key()),
            })
    }
}

/// Proposer backed by a candidates file, one JSON object per line:
/// `{"id": ..., "candidates": [[word, prob], ...]}`. Lookup is by instance id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedProposer {
    by_id: HashMap<String, Vec<(String, f64)>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CandidateLine {
    id: String,
    candidates: Vec<(String, f64)>,
}

impl PrecomputedProposer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, candidates: Vec<(String, f64)>) {
        self.by_id.insert(id.into(), candidates);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: CandidateLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.by_id.insert(row.id, row.candidates);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ids: Vec<&String> = self.by_id.keys().collect();
        ids.sort();
        let rows: Vec<CandidateLine> = ids
            .into_iter()
            .map(|id| CandidateLine {
                id: id.clone(),
                candidates: self.by_id[id].clone(),
            })
            .collect();
        write_jsonl(path, &rows)
    }
}

impl MaskedWordProposer for PrecomputedProposer {
    fn propose(&self, query: &MaskedQuery) -> Result<Vec<(String, f64)>> {
        self.by_id
            .get(&query.id)
            .cloned()
            .ok_or_else(|| Error::Proposer {
                id: query.id.clone(),
                message: "no precomputed candidates".into(),
            })
    }
}

/// Splits mention tokens into words.
pub trait Segmenter: Send + Sync {
    fn segment(&self, tokens: &[String]) -> Vec<String>;
}

/// Splits on whitespace and on every character that is neither alphanumeric
/// nor an apostrophe.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleSegmenter;

impl Segmenter for RuleSegmenter {
    fn segment(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .flat_map(|t| t.split(|c: char| !(c.is_alphanumeric() || c == '\'')))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }
}

pub fn propose_context_attributes(
    instance: &Instance,
    proposer: &dyn MaskedWordProposer,
    theta_c: f64,
) -> Result<Vec<AttributeProposal>> {
    let query = MaskedQuery::from_instance(instance);
    let candidates = proposer.propose(&query).map_err(|e| match e {
        Error::Proposer { .. } => e,
        other => Error::Proposer {
            id: instance.id.clone(),
            message: other.to_string(),
        },
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (word, prob) in candidates {
        let word = word.to_lowercase();
        if prob > theta_c && !is_stop_word(&word) && !word.is_empty() && seen.insert(word.clone()) {
            out.push(AttributeProposal {
                word,
                score: prob.clamp(0.0, 1.0),
                source: AttributeSource::Context,
            });
        }
    }
    Ok(out)
}

pub fn propose_entity_attributes(instance: &Instance) -> Vec<AttributeProposal> {
    propose_entity_attributes_with(instance, &RuleSegmenter)
}

pub fn propose_entity_attributes_with(
    instance: &Instance,
    segmenter: &dyn Segmenter,
) -> Vec<AttributeProposal> {
    let mut seen = HashSet::new();
    segmenter
        .segment(&instance.mention_tokens)
        .into_iter()
        .map(|w| w.to_lowercase())
        .filter(|w| !is_stop_word(w) && seen.insert(w.clone()))
        .map(|word| AttributeProposal {
            word,
            score: 1.0,
            source: AttributeSource::Entity,
        })
        .collect()
}

/// Context and entity attributes. A failing proposer degrades to entity
/// attributes only.
pub fn collect_attributes(
    instance: &Instance,
    proposer: Option<&dyn MaskedWordProposer>,
    theta_c: f64,
) -> Vec<AttributeProposal> {
    let mut out = match proposer {
        Some(p) => match propose_context_attributes(instance, p, theta_c) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("event=proposer_fallback id={} error=\"{e}\"", instance.id);
                Vec::new()
            }
        },
        None => Vec::new(),
    };
    out.extend(propose_entity_attributes(instance));
    out
}

/// Word whose embedding stands for a label: the last word of a multi-word
/// label.
pub fn label_head(label: &str) -> &str {
    label
        .rsplit(['_', ' ', '/'])
        .find(|w| !w.is_empty())
        .unwrap_or(label)
}

fn embed(table: &EmbeddingTable, word: &str) -> Vec<f64> {
    match table.get(word) {
        Some(v) => v.to_vec(),
        None => table.lookup(&word.to_lowercase()),
    }
}

/// Label-node embeddings, shared by every graph over the same vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    /// |L| × d_g.
    pub vectors: Matrix,
}

impl LabelEmbeddings {
    pub fn new(vocab: &LabelVocabulary, table: &EmbeddingTable) -> Self {
        let rows: Vec<Vec<f64>> = vocab
            .labels()
            .iter()
            .map(|l| embed(table, label_head(l)))
            .collect();
        Self {
            vectors: Matrix::from_rows(&rows, table.dimension()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteAttributeGraph {
    pub attributes: Vec<String>,
    /// n_a × d_g, fixed.
    pub attribute_embeddings: Matrix,
    /// n_a × |L| cosine relatedness.
    pub edges: Matrix,
}

impl BipartiteAttributeGraph {
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_labels(&self) -> usize {
        self.edges.cols()
    }

    /// Graph from explicit embeddings; edges are their cosines.
    pub fn from_embeddings(
        attributes: Vec<String>,
        attribute_embeddings: Matrix,
        label_embeddings: &Matrix,
    ) -> Self {
        let (n_a, n_l) = (attributes.len(), label_embeddings.rows());
        let mut edges = Matrix::zeros(n_a, n_l);
        for i in 0..n_a {
            for j in 0..n_l {
                edges.set(
                    i,
                    j,
                    cosine(attribute_embeddings.row(i), label_embeddings.row(j)),
                );
            }
        }
        Self {
            attributes,
            attribute_embeddings,
            edges,
        }
    }
}

pub fn build_graph(
    proposals: &[AttributeProposal],
    vocab: &LabelVocabulary,
    table: &EmbeddingTable,
) -> BipartiteAttributeGraph {
    build_graph_with(proposals, &LabelEmbeddings::new(vocab, table), table)
}

pub fn build_graph_with(
    proposals: &[AttributeProposal],
    labels: &LabelEmbeddings,
    table: &EmbeddingTable,
) -> BipartiteAttributeGraph {
    let mut seen = HashSet::new();
    let words: Vec<String> = proposals
        .iter()
        .filter(|p| seen.insert(p.word.clone()))
        .map(|p| p.word.clone())
        .collect();
    let rows: Vec<Vec<f64>> = words.iter().map(|w| embed(table, w)).collect();
    let emb = Matrix::from_rows(&rows, table.dimension());
    BipartiteAttributeGraph::from_embeddings(words, emb, &labels.vectors)
}

/// Trainable state projection `W_s` (d_s × d_g).
#[derive(Debug, Clone, Copy)]
pub struct BagParameters {
    pub state_projection: ParamId,
}

const STATE_PROJECTION: &str = "bag.state_projection";

impl BagParameters {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_s: usize, d_g: usize) -> Self {
        let w = init_uniform(rng, d_s, d_g, d_s);
        Self {
            state_projection: store.add(STATE_PROJECTION, ParamGroup::Decoder, w),
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        store
            .id(STATE_PROJECTION)
            .map(|state_projection| Self { state_projection })
            .ok_or_else(|| Error::Config(format!("parameter store lacks {STATE_PROJECTION}")))
    }
}

/// `ReLU(cos(W_s s_t, W_a v_i))` for every attribute.
pub fn activate(s_t: &[f64], graph: &BipartiteAttributeGraph, w_s: &Matrix) -> Result<Vec<f64>> {
    if s_t.len() != w_s.rows() || graph.attribute_embeddings.cols() != w_s.cols() {
        return Err(Error::Dimension(format!(
            "state width {} and attribute width {} do not fit W_s {}x{}",
            s_t.len(),
            graph.attribute_embeddings.cols(),
            w_s.rows(),
            w_s.cols()
        )));
    }
    let projected = Matrix::row_vector(s_t.to_vec()).matmul(w_s);
    Ok((0..graph.num_attributes())
        .map(|i| cosine(projected.data(), graph.attribute_embeddings.row(i)).max(0.0))
        .collect())
}

/// Label scores and the induced set for one step.
pub fn induce(
    attr_scores: &[f64],
    graph: &BipartiteAttributeGraph,
    theta_s: f64,
) -> (Vec<f64>, BTreeSet<usize>) {
    assert_eq!(attr_scores.len(), graph.num_attributes());
    let mut scores = vec![0.0; graph.num_labels()];
    for (i, &a) in attr_scores.iter().enumerate() {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += a * graph.edges.get(i, j);
        }
    }
    let induced = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > theta_s)
        .map(|(j, _)| j)
        .collect();
    (scores, induced)
}

/// Graph constants for one instance's BAG.
#[derive(Debug, Clone, Copy)]
pub struct BagVars {
    /// Row-normalised attribute embeddings, transposed: d_g × n_a.
    attributes_t: Var,
    edges: Var,
}

impl BagVars {
    /// `None` for an empty graph, whose label scores are identically zero.
    pub fn new(g: &mut Graph, graph: &BipartiteAttributeGraph) -> Option<Self> {
        if graph.num_attributes() == 0 {
            return None;
        }
        let a = g.input(graph.attribute_embeddings.clone());
        let a = g.normalize_rows(a);
        let attributes_t = g.transpose(a);
        let edges = g.input(graph.edges.clone());
        Some(Self {
            attributes_t,
            edges,
        })
    }
}

/// Attribute scores (1 × n_a) on the graph.
pub fn activate_on(g: &mut Graph, params: BagParameters, s_t: Var, bag: BagVars) -> Var {
    let ws = g.param(params.state_projection);
    let p = g.matmul(s_t, ws);
    let p = g.normalize_rows(p);
    let cos = g.matmul(p, bag.attributes_t);
    g.relu(cos)
}

/// Label scores (1 × |L|) on the graph.
pub fn label_scores_on(g: &mut Graph, params: BagParameters, s_t: Var, bag: BagVars) -> Var {
    let a = activate_on(g, params, s_t, bag);
    g.matmul(a, bag.edges)
}

/// Precomputed-attribute file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub id: String,
    pub attributes: Vec<AttributeProposal>,
}

pub fn write_attribute_file(path: impl AsRef<Path>, records: &[AttributeRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_attribute_file(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, Vec<AttributeProposal>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttributeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.id, rec.attributes);
    }
    Ok(out)
}
