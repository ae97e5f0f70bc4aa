//! Synthetic review streams: Poisson background traffic plus injected lockstep bursts.
//!
//! Generation uses ChaCha8 seeded from `SynthSpec::seed`. Background draws come
//! from ChaCha stream 0 and injection `i` from stream `i + 1`, so adding an
//! injection never perturbs the background.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AppCatalog, AppRecord, ReviewEdge};

/// Every synthetic app carries this overall rating.
pub const SYNTH_RATING: f64 = 3.5;

pub const PRNG_NAME: &str = "chacha8";

const TEMPLATES: [&str; 8] = [
    "good app",
    "very good app",
    "best app",
    "very best app",
    "nice app",
    "good earning app",
    "very good for earning app",
    "super app",
];

const VOCAB: [&str; 96] = [
    "the",
    "app",
    "points",
    "offers",
    "withdraw",
    "money",
    "time",
    "task",
    "survey",
    "reward",
    "coins",
    "paypal",
    "gift",
    "card",
    "level",
    "game",
    "install",
    "waiting",
    "support",
    "email",
    "never",
    "always",
    "crash",
    "update",
    "login",
    "account",
    "balance",
    "cashout",
    "minimum",
    "limit",
    "days",
    "week",
    "month",
    "hours",
    "video",
    "ads",
    "many",
    "few",
    "slow",
    "fast",
    "payment",
    "received",
    "pending",
    "credited",
    "missing",
    "referral",
    "code",
    "friend",
    "bonus",
    "daily",
    "streak",
    "spin",
    "wheel",
    "lucky",
    "scratch",
    "tickets",
    "redeem",
    "voucher",
    "amazon",
    "google",
    "play",
    "store",
    "phone",
    "battery",
    "storage",
    "permission",
    "location",
    "contacts",
    "camera",
    "screen",
    "overlay",
    "notification",
    "spam",
    "texts",
    "trust",
    "honest",
    "fake",
    "legit",
    "scam",
    "earned",
    "lost",
    "progress",
    "reset",
    "wallet",
    "transfer",
    "bank",
    "upi",
    "rupees",
    "dollars",
    "euro",
    "first",
    "second",
    "third",
    "again",
    "please",
    "fix",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Boost,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub app_id: String,
    pub tick: u64,
    pub n_edges: usize,
    pub n_reviewers_used: usize,
    pub score_mode: ScoreMode,
    /// Fixed reviewer ids to cycle over; drawn from the pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_ids: Option<Vec<String>>,
}

fn default_period() -> u64 {
    86_400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_apps: usize,
    pub n_reviewers: usize,
    pub ticks: u64,
    /// Expected background reviews per app per tick.
    pub background_rate: f64,
    #[serde(default)]
    pub injections: Vec<Injection>,
    pub seed: u64,
    #[serde(default)]
    pub origin: i64,
    #[serde(default = "default_period")]
    pub period: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
}

impl SynthSpec {
    pub fn app_id(i: usize) -> String {
        format!("a{i}")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_apps == 0 || self.n_reviewers == 0 || self.ticks == 0 || self.period == 0 {
            return bad("n_apps, n_reviewers, ticks and period must be positive".into());
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return bad(format!(
                "background_rate {} must be finite and >= 0",
                self.background_rate
            ));
        }
        for (i, inj) in self.injections.iter().enumerate() {
            if !(1..=self.ticks).contains(&inj.tick) {
                return bad(format!(
                    "injection {i}: tick {} outside 1..={}",
                    inj.tick, self.ticks
                ));
            }
            let known = inj
                .app_id
                .strip_prefix('a')
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n < self.n_apps && Self::app_id(n) == inj.app_id);
            if !known {
                return bad(format!("injection {i}: unknown app {}", inj.app_id));
            }
            if inj.n_edges > 0 {
                let pool = inj.reviewer_ids.as_ref().map_or(self.n_reviewers, Vec::len);
                if inj.n_reviewers_used == 0 || inj.n_reviewers_used > pool {
                    return bad(format!(
                        "injection {i}: n_reviewers_used {} must lie in 1..={pool}",
                        inj.n_reviewers_used
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn catalog(&self) -> AppCatalog {
        (0..self.n_apps)
            .map(|i| AppRecord {
                app_id: Self::app_id(i),
                overall_rating: SYNTH_RATING,
                install_count: None,
                name: None,
            })
            .collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn tick_timestamp(&self, tick: u64, rng: &mut ChaCha8Rng) -> i64 {
        let start = self.origin + ((tick - 1) * self.period) as i64;
        start + 1 + rng.random_range(0..self.period) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub review_id: String,
    pub injected: bool,
    pub injection_index: Option<usize>,
}

/// A generated stream, sorted by timestamp, with its ground truth kept apart.
#[derive(Debug, Clone, Default)]
pub struct GeneratedStream {
    pub edges: Vec<ReviewEdge>,
    truth: HashMap<String, Option<usize>>,
}

impl GeneratedStream {
    fn fresh_id(&self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let id = format!("{:016x}", rng.random::<u64>());
            if !self.truth.contains_key(&id) {
                return id;
            }
        }
    }

    fn push(&mut self, edge: ReviewEdge, injection: Option<usize>) {
        self.truth.insert(edge.review_id.clone(), injection);
        self.edges.push(edge);
    }

    fn sort(&mut self) {
        self.edges.sort_by_key(|e| e.timestamp);
    }

    /// Injection index of a review, `None` for background.
    pub fn injection_of(&self, review_id: &str) -> Option<usize> {
        self.truth.get(review_id).copied().flatten()
    }

    pub fn is_injected(&self, review_id: &str) -> bool {
        self.injection_of(review_id).is_some()
    }

    /// Truth records in stream order.
    pub fn truth(&self) -> Vec<TruthRecord> {
        self.edges
            .iter()
            .map(|e| {
                let idx = self.injection_of(&e.review_id);
                TruthRecord {
                    review_id: e.review_id.clone(),
                    injected: idx.is_some(),
                    injection_index: idx,
                }
            })
            .collect()
    }

    pub fn write_truth_jsonl<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for record in self.truth() {
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(6..=14);
    (0..len)
        .map(|_| *VOCAB.choose(rng).expect("non-empty vocabulary"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Poisson background: per app and tick, `Poisson(background_rate)` reviews by
/// uniformly drawn reviewers, each a fair coin between a boosting score {4, 5}
/// and a sinking score {1, 2, 3} relative to a 3.5 rating.
pub fn gen_background(spec: &SynthSpec) -> Result<GeneratedStream, SynthError> {
    spec.validate()?;
    let mut rng = spec.rng(0);
    let mut out = GeneratedStream::default();
    let poisson = if spec.background_rate > 0.0 {
        Some(Poisson::new(spec.background_rate).map_err(|e| SynthError::Invalid(e.to_string()))?)
    } else {
        None
    };
    for tick in 1..=spec.ticks {
        for app in 0..spec.n_apps {
            let count = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
            for _ in 0..count {
                let review_id = out.fresh_id(&mut rng);
                let reviewer = rng.random_range(0..spec.n_reviewers);
                let score = if rng.random_bool(0.5) {
                    rng.random_range(4..=5)
                } else {
                    rng.random_range(1..=3)
                };
                let timestamp = spec.tick_timestamp(tick, &mut rng);
                let text = random_text(&mut rng);
                out.push(
                    ReviewEdge {
                        review_id,
                        reviewer_id: format!("u{reviewer}"),
                        app_id: SynthSpec::app_id(app),
                        timestamp,
                        score,
                        text: Some(text),
                    },
                    None,
                );
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Appends `injection.n_edges` reviews on the target app inside the target tick.
pub fn inject_lockstep(
    stream: &mut GeneratedStream,
    spec: &SynthSpec,
    injection: &Injection,
    index: usize,
) -> Result<(), SynthError> {
    if injection.n_edges == 0 {
        return Ok(());
    }
    let mut rng = spec.rng(index as u64 + 1);
    let reviewers: Vec<String> = match &injection.reviewer_ids {
        Some(ids) => ids
            .iter()
            .take(injection.n_reviewers_used)
            .cloned()
            .collect(),
        None => rand::seq::index::sample(&mut rng, spec.n_reviewers, injection.n_reviewers_used)
            .into_iter()
            .map(|i| format!("u{i}"))
            .collect(),
    };
    let score = match injection.score_mode {
        ScoreMode::Boost => 5,
        ScoreMode::Sink => 1,
    };
    for i in 0..injection.n_edges {
        let review_id = stream.fresh_id(&mut rng);
        let timestamp = spec.tick_timestamp(injection.tick, &mut rng);
        let text = TEMPLATES.choose(&mut rng).expect("templates").to_string();
        stream.push(
            ReviewEdge {
                review_id,
                reviewer_id: reviewers[i % reviewers.len()].clone(),
                app_id: injection.app_id.clone(),
                timestamp,
                score,
                text: Some(text),
            },
            Some(index),
        );
    }
    stream.sort();
    Ok(())
}

/// Background plus every injection in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<GeneratedStream, SynthError> {
    let mut stream = gen_background(spec)?;
    for (i, injection) in spec.injections.iter().enumerate() {
        inject_lockstep(&mut stream, spec, injection, i)?;
    }
    Ok(stream)
}
