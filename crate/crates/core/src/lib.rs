//! Streaming detection of lockstep review behavior.
//!
//! Reviews are modelled as a time-ordered edge stream over a dynamic bipartite
//! reviewer/app graph. The stream is split into rating-boosting and
//! rating-sinking sub-streams, each sub-stream is scored by a sketch-backed
//! chi-squared detector, bursts are flagged as microclusters, and the most
//! suspicious clusters are checked for near-identical review text.

pub mod clusters;
pub mod detector;
pub mod ingest;
pub mod partition;
pub mod sketch;
pub mod stats;
pub mod synth;

pub use clusters::{
    collect_clusters, near_identical_pairs, rank_clusters, ClusterError, ClusterReport, Embedding,
    EmbeddingProvider, ExternalEmbeddings, LexicalEmbedder, PairAnalysis, SimilarityPair,
    SuspiciousCluster,
};
pub use detector::{
    check_microcluster, run_detector, AnomalyRecord, Detector, DetectorConfig, DetectorError,
    MicroclusterEvent,
};
pub use ingest::{
    parse_apps, parse_reviews, to_tick, AppCatalog, AppRecord, ErrorReason, InputFormat, LineError,
    ReviewEdge, TickError, TickIndex,
};
pub use partition::{classify, partition_stream, Partition, PartitionCounts, SubstreamLabel};
pub use sketch::{CountMinSketch, SketchGeometry};
pub use stats::{
    ecdf, shared_reviewer_graph, summarize, welch_t, DatasetSummary, EcdfPoints,
    SharedReviewerEdge, StatsError, Tail, WelchResult,
};
pub use synth::{
    gen_background, generate, inject_lockstep, GeneratedStream, Injection, ScoreMode, SynthSpec,
    TruthRecord,
};
