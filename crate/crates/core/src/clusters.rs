//! Suspicious cluster extraction, ranking, and near-identical pair analysis.
//!
//! A cluster is the set of same-sub-stream edges on one app in the burst
//! tick of a microcluster event.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{AnomalyRecord, MicroclusterEvent};
use crate::ingest::TickIndex;
use crate::partition::SubstreamLabel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("event for app {app_id} ({substream}) at tick {tick} has no scored edges")]
    InconsistentRun {
        app_id: String,
        substream: SubstreamLabel,
        tick: u64,
    },
    #[error("no embedding for review_id {0}")]
    MissingEmbedding(String),
    #[error("embedding file: {0}")]
    Embeddings(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuspiciousCluster {
    pub app_id: String,
    pub substream: SubstreamLabel,
    pub tick: TickIndex,
    pub members: Vec<AnomalyRecord>,
    pub mean_score: f64,
}

impl SuspiciousCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// One cluster per event, holding every scored edge of the event's app,
/// sub-stream and burst tick in stream order.
pub fn collect_clusters(
    events: &[MicroclusterEvent],
    records: &[AnomalyRecord],
) -> Result<Vec<SuspiciousCluster>, ClusterError> {
    let wanted: BTreeSet<(&str, SubstreamLabel, TickIndex)> = events
        .iter()
        .map(|e| (e.app_id.as_str(), e.substream, e.burst_tick))
        .collect();
    let mut groups: HashMap<(&str, SubstreamLabel, TickIndex), Vec<AnomalyRecord>> = HashMap::new();
    for r in records {
        let key = (r.edge.app_id.as_str(), r.substream, r.tick);
        if wanted.contains(&key) {
            groups.entry(key).or_default().push(r.clone());
        }
    }
    events
        .iter()
        .map(|e| {
            let key = (e.app_id.as_str(), e.substream, e.burst_tick);
            let members = groups.get(&key).cloned().unwrap_or_default();
            if members.is_empty() {
                return Err(ClusterError::InconsistentRun {
                    app_id: e.app_id.clone(),
                    substream: e.substream,
                    tick: e.burst_tick.get(),
                });
            }
            let mean_score = members.iter().map(|m| m.score).sum::<f64>() / members.len() as f64;
            Ok(SuspiciousCluster {
                app_id: e.app_id.clone(),
                substream: e.substream,
                tick: e.burst_tick,
                members,
                mean_score,
            })
        })
        .collect()
}

fn suspicion_order(a: &SuspiciousCluster, b: &SuspiciousCluster) -> Ordering {
    b.mean_score
        .total_cmp(&a.mean_score)
        .then_with(|| b.size().cmp(&a.size()))
        .then_with(|| a.app_id.cmp(&b.app_id))
        .then_with(|| a.tick.cmp(&b.tick))
        .then_with(|| a.substream.cmp(&b.substream))
}

/// The `k` clusters with the highest mean score.
pub fn rank_clusters(mut clusters: Vec<SuspiciousCluster>, k: usize) -> Vec<SuspiciousCluster> {
    clusters.sort_by(suspicion_order);
    clusters.truncate(k);
    clusters
}

/// Unit-norm review embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    /// Term features keyed by name; absent terms are zero.
    Sparse(BTreeMap<String, f64>),
    Dense(Vec<f64>),
}

impl Embedding {
    fn is_zero(&self) -> bool {
        match self {
            Embedding::Sparse(m) => m.values().all(|&v| v == 0.0),
            Embedding::Dense(v) => v.iter().all(|&x| x == 0.0),
        }
    }

    /// Cosine similarity in `[-1, 1]`; zero when either side is the zero vector.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        if self.is_zero() || other.is_zero() {
            return 0.0;
        }
        if self == other {
            return 1.0;
        }
        let dot = match (self, other) {
            (Embedding::Sparse(a), Embedding::Sparse(b)) => {
                let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
                small
                    .iter()
                    .filter_map(|(k, v)| large.get(k).map(|w| v * w))
                    .sum::<f64>()
            }
            (Embedding::Dense(a), Embedding::Dense(b)) if a.len() == b.len() => {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
            _ => 0.0,
        };
        dot.clamp(-1.0, 1.0)
    }
}

fn l2_normalize(values: &mut [f64]) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values {
            *v /= norm;
        }
    }
}

pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn embed(&self, review_id: &str, text: &str) -> Result<Embedding, ClusterError>;
}

/// Lowercases, drops punctuation, and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Term-frequency vectors over word unigrams and bigrams of the normalized text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalEmbedder;

impl LexicalEmbedder {
    pub fn embed_text(&self, text: &str) -> Embedding {
        let normalized = normalize_text(text);
        let tokens: Vec<&str> = normalized.split(' ').filter(|t| !t.is_empty()).collect();
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for tok in &tokens {
            *counts.entry(format!("1:{tok}")).or_default() += 1.0;
        }
        for pair in tokens.windows(2) {
            *counts
                .entry(format!("2:{} {}", pair[0], pair[1]))
                .or_default() += 1.0;
        }
        let mut values: Vec<f64> = counts.values().copied().collect();
        l2_normalize(&mut values);
        Embedding::Sparse(counts.into_keys().zip(values).collect())
    }
}

impl EmbeddingProvider for LexicalEmbedder {
    fn name(&self) -> &str {
        "lexical"
    }

    fn embed(&self, _review_id: &str, text: &str) -> Result<Embedding, ClusterError> {
        Ok(self.embed_text(text))
    }
}

/// Precomputed vectors looked up by `review_id`.
#[derive(Debug, Clone, Default)]
pub struct ExternalEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbeddingLine {
    review_id: String,
    vector: Vec<f64>,
}

impl ExternalEmbeddings {
    /// Loads `{review_id, vector:[...]}` lines; every vector must share one dimension.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, ClusterError> {
        let mut out = ExternalEmbeddings::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ClusterError::Embeddings(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| ClusterError::Embeddings(format!("line {}: {e}", i + 1)))?;
            if out.vectors.is_empty() {
                out.dim = parsed.vector.len();
            } else if parsed.vector.len() != out.dim {
                return Err(ClusterError::Embeddings(format!(
                    "line {}: dimension {} differs from {}",
                    i + 1,
                    parsed.vector.len(),
                    out.dim
                )));
            }
            let mut v = parsed.vector;
            l2_normalize(&mut v);
            out.vectors.insert(parsed.review_id, v);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for ExternalEmbeddings {
    fn name(&self) -> &str {
        "file"
    }

    fn embed(&self, review_id: &str, _text: &str) -> Result<Embedding, ClusterError> {
        self.vectors
            .get(review_id)
            .map(|v| Embedding::Dense(v.clone()))
            .ok_or_else(|| ClusterError::MissingEmbedding(review_id.to_string()))
    }
}

/// An unordered review pair; `review_id_a < review_id_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub review_id_a: String,
    pub review_id_b: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairAnalysis {
    /// Pairs at or above the threshold, most similar first.
    pub pairs: Vec<SimilarityPair>,
    pub flagged: BTreeSet<String>,
    /// Members without text, left out of the comparison.
    pub textless: usize,
}

/// Compares every pair of texted members and keeps those with similarity `>= tau`.
pub fn near_identical_pairs(
    cluster: &SuspiciousCluster,
    provider: &dyn EmbeddingProvider,
    tau: f64,
) -> Result<PairAnalysis, ClusterError> {
    let mut textless = 0;
    let mut embedded = Vec::new();
    for m in &cluster.members {
        match &m.edge.text {
            Some(text) => embedded.push((
                m.edge.review_id.as_str(),
                provider.embed(&m.edge.review_id, text)?,
            )),
            None => textless += 1,
        }
    }

    let mut pairs = Vec::new();
    for (i, (id_a, emb_a)) in embedded.iter().enumerate() {
        for (id_b, emb_b) in &embedded[i + 1..] {
            let similarity = emb_a.cosine(emb_b);
            if similarity >= tau {
                let (a, b) = if id_a <= id_b {
                    (id_a, id_b)
                } else {
                    (id_b, id_a)
                };
                pairs.push(SimilarityPair {
                    review_id_a: a.to_string(),
                    review_id_b: b.to_string(),
                    similarity,
                });
            }
        }
    }
    pairs.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| x.review_id_a.cmp(&y.review_id_a))
            .then_with(|| x.review_id_b.cmp(&y.review_id_b))
    });
    let flagged = pairs
        .iter()
        .flat_map(|p| [p.review_id_a.clone(), p.review_id_b.clone()])
        .collect();
    Ok(PairAnalysis {
        pairs,
        flagged,
        textless,
    })
}

/// One entry of the cluster report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub app_id: String,
    pub substream: SubstreamLabel,
    pub tick: u64,
    pub size: usize,
    pub mean_score: f64,
    pub flagged_count: usize,
    pub pair_count: usize,
    pub textless_count: usize,
    pub provider: String,
    pub tau: f64,
    pub top_pairs: Vec<SimilarityPair>,
}

impl ClusterReport {
    pub fn new(
        cluster: &SuspiciousCluster,
        analysis: &PairAnalysis,
        provider: &str,
        tau: f64,
        max_pairs: usize,
    ) -> Self {
        ClusterReport {
            app_id: cluster.app_id.clone(),
            substream: cluster.substream,
            tick: cluster.tick.get(),
            size: cluster.size(),
            mean_score: cluster.mean_score,
            flagged_count: analysis.flagged.len(),
            pair_count: analysis.pairs.len(),
            textless_count: analysis.textless,
            provider: provider.to_string(),
            tau,
            top_pairs: analysis.pairs.iter().take(max_pairs).cloned().collect(),
        }
    }
}

/// Opens and loads an embedding sidecar file.
pub fn load_embeddings(path: &std::path::Path) -> Result<ExternalEmbeddings, ClusterError> {
    let file = std::fs::File::open(path)
        .map_err(|e| ClusterError::Embeddings(format!("{}: {e}", path.display())))?;
    ExternalEmbeddings::from_jsonl(io::BufReader::new(file))
}
