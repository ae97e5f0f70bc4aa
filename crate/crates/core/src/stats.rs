//! Welch's t-test, empirical CDFs, the shared-reviewer app network, and dataset counts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::ingest::{AppCatalog, ReviewEdge};
use crate::partition::{classify, SubstreamLabel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("sample needs at least 2 values, got {0}")]
    TooSmall(usize),
    #[error("both samples have zero variance")]
    DegenerateSamples,
    #[error("empty input")]
    Empty,
    #[error("non-finite value in sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// `H1: mean_a > mean_b`.
    #[default]
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub tail: Tail,
    /// The p-value selected by `tail`.
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// Beyond this many degrees of freedom the t tail is taken from the normal.
const NORMAL_DF: f64 = 1e6;

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn t_upper_tail(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if df > NORMAL_DF {
        return 0.5 * erfc(t / std::f64::consts::SQRT_2);
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let x = df / (df + t * t);
    let half = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    welch_t_with(a, b, Tail::Greater)
}

pub fn welch_t_with(a: &[f64], b: &[f64], tail: Tail) -> Result<WelchResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooSmall(s.len()));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (mean_a, var_a) = mean_var(a);
    let (mean_b, var_b) = mean_var(b);
    if var_a == 0.0 && var_b == 0.0 {
        return Err(StatsError::DegenerateSamples);
    }
    let (n_a, n_b) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (var_a / n_a, var_b / n_b);
    let se2 = qa + qb;
    let t = (mean_a - mean_b) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (n_a - 1.0) + qb * qb / (n_b - 1.0));
    let upper = t_upper_tail(t, df);
    let p_two_sided = (2.0 * upper.min(1.0 - upper)).min(1.0);
    let p_one_sided = upper;
    Ok(WelchResult {
        t,
        df,
        p_one_sided,
        p_two_sided,
        tail,
        p_value: match tail {
            Tail::Greater => p_one_sided,
            Tail::TwoSided => p_two_sided,
        },
        mean_a,
        mean_b,
        var_a,
        var_b,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Distinct sample values with the fraction of the sample at or below each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoints {
    pub points: Vec<(f64, f64)>,
}

impl EcdfPoints {
    /// `F(x)`, the fraction of the sample `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.points.partition_point(|&(v, _)| v <= x);
        if idx == 0 {
            0.0
        } else {
            self.points[idx - 1].1
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["value", "fraction"])?;
        for (v, f) in &self.points {
            out.write_record([v.to_string(), f.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn ecdf(values: &[f64]) -> Result<EcdfPoints, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == v {
            continue;
        }
        let fraction = if i + 1 == n {
            1.0
        } else {
            (i + 1) as f64 / n as f64
        };
        points.push((v, fraction));
    }
    Ok(EcdfPoints { points })
}

/// Apps `app_a < app_b` and the number of distinct reviewers they share.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedReviewerEdge {
    pub app_a: String,
    pub app_b: String,
    pub weight: usize,
}

pub fn shared_reviewer_graph(edges: &[ReviewEdge]) -> Vec<SharedReviewerEdge> {
    let mut apps_by_reviewer: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in edges {
        apps_by_reviewer
            .entry(e.reviewer_id.as_str())
            .or_default()
            .insert(e.app_id.as_str());
    }
    let mut weights: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for apps in apps_by_reviewer.values() {
        let apps: Vec<&str> = apps.iter().copied().collect();
        for (i, a) in apps.iter().enumerate() {
            for b in &apps[i + 1..] {
                *weights.entry((a, b)).or_default() += 1;
            }
        }
    }
    weights
        .into_iter()
        .map(|((a, b), weight)| SharedReviewerEdge {
            app_a: a.to_string(),
            app_b: b.to_string(),
            weight,
        })
        .collect()
}

/// Per-app sum of shared-reviewer weights, largest first.
pub fn shared_reviewer_totals(graph: &[SharedReviewerEdge]) -> Vec<(String, usize)> {
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for e in graph {
        *totals.entry(&e.app_a).or_default() += e.weight;
        *totals.entry(&e.app_b).or_default() += e.weight;
    }
    let mut out: Vec<(String, usize)> = totals
        .into_iter()
        .map(|(a, w)| (a.to_string(), w))
        .collect();
    out.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub reviews: usize,
    pub distinct_reviewers: usize,
    pub apps: usize,
    pub boost: usize,
    pub sink: usize,
    pub unpartitioned: usize,
}

pub fn summarize(edges: &[ReviewEdge], catalog: &AppCatalog) -> DatasetSummary {
    let mut reviewers = HashSet::new();
    let mut apps = HashSet::new();
    let mut out = DatasetSummary {
        reviews: edges.len(),
        ..Default::default()
    };
    for e in edges {
        reviewers.insert(e.reviewer_id.as_str());
        apps.insert(e.app_id.as_str());
        match classify(e, catalog) {
            SubstreamLabel::Boost => out.boost += 1,
            SubstreamLabel::Sink => out.sink += 1,
            SubstreamLabel::Unpartitioned => out.unpartitioned += 1,
        }
    }
    out.distinct_reviewers = reviewers.len();
    out.apps = apps.len();
    out
}
