//! Boost/sink split of the review stream.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ingest::{AppCatalog, ReviewEdge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubstreamLabel {
    /// Score at or above the app's overall rating.
    Boost,
    /// Score below the app's overall rating.
    Sink,
    /// App missing from the catalog.
    Unpartitioned,
}

impl SubstreamLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SubstreamLabel::Boost => "boost",
            SubstreamLabel::Sink => "sink",
            SubstreamLabel::Unpartitioned => "unpartitioned",
        }
    }
}

impl fmt::Display for SubstreamLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubstreamLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "boost" => Ok(SubstreamLabel::Boost),
            "sink" => Ok(SubstreamLabel::Sink),
            "unpartitioned" => Ok(SubstreamLabel::Unpartitioned),
            other => Err(format!("unknown sub-stream `{other}`")),
        }
    }
}

pub fn classify(edge: &ReviewEdge, catalog: &AppCatalog) -> SubstreamLabel {
    match catalog.rating(&edge.app_id) {
        None => SubstreamLabel::Unpartitioned,
        Some(rating) if f64::from(edge.score) >= rating => SubstreamLabel::Boost,
        Some(_) => SubstreamLabel::Sink,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub boost: usize,
    pub sink: usize,
    pub unpartitioned: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub boost: Vec<ReviewEdge>,
    pub sink: Vec<ReviewEdge>,
    pub unpartitioned: Vec<ReviewEdge>,
}

impl Partition {
    pub fn counts(&self) -> PartitionCounts {
        PartitionCounts {
            boost: self.boost.len(),
            sink: self.sink.len(),
            unpartitioned: self.unpartitioned.len(),
        }
    }
}

/// Routes every edge to exactly one sub-stream, preserving relative order.
pub fn partition_stream<I>(edges: I, catalog: &AppCatalog) -> Partition
where
    I: IntoIterator<Item = ReviewEdge>,
{
    let mut out = Partition::default();
    for edge in edges {
        match classify(&edge, catalog) {
            SubstreamLabel::Boost => out.boost.push(edge),
            SubstreamLabel::Sink => out.sink.push(edge),
            SubstreamLabel::Unpartitioned => out.unpartitioned.push(edge),
        }
    }
    out
}
