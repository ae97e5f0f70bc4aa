//! Sketch-backed streaming microcluster detector for one sub-stream.
//!
//! Every edge is scored with a chi-squared statistic comparing its app's
//! count in the current tick against the app's historical mean. At each tick
//! boundary the tick's count is merged into the history, unless the tick
//! scored above the filter threshold, in which case the prior mean is merged
//! instead so the burst does not inflate later expectations. Separately, the
//! raw per-tick counts are checked for a burst of more than `burst_factor`
//! times the previous tick's count.
//!
//! The hypothesis-test entity is the app node within its sub-stream, so the
//! sketches are keyed by `app_id`.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{to_tick, ReviewEdge, TickError, TickIndex};
use crate::partition::SubstreamLabel;
use crate::sketch::{CountMinSketch, SketchGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Timestamp that opens tick 1, in seconds.
    pub origin: i64,
    /// Detection period `T` in seconds.
    pub period: u64,
    /// Burst ratio `β`; must exceed 1.
    pub burst_factor: f64,
    /// Per-tick decay `α` of the current-count sketch.
    pub decay: f64,
    /// Ticks scoring above `θ` are filtered out of the history.
    #[serde(with = "float_or_inf")]
    pub filter_threshold: f64,
    /// Floor for the previous-tick count in the burst ratio.
    pub min_prior: f64,
    pub sketch: SketchGeometry,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            origin: 0,
            period: 86_400,
            burst_factor: 2.0,
            decay: 0.6,
            filter_threshold: 1000.0,
            min_prior: 1.0,
            sketch: SketchGeometry::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |msg: &str| Err(DetectorError::InvalidConfig(msg.to_string()));
        if self.period == 0 {
            return bad("period must be positive");
        }
        if self.burst_factor.is_nan() || self.burst_factor <= 1.0 {
            return bad("burst_factor must be greater than 1");
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1]");
        }
        if self.filter_threshold.is_nan() || self.filter_threshold <= 0.0 {
            return bad("filter_threshold must be positive");
        }
        if !self.min_prior.is_finite() || self.min_prior < 0.0 {
            return bad("min_prior must be a non-negative number");
        }
        if self.sketch.rows == 0 || self.sketch.cols == 0 {
            return bad("sketch rows and cols must be positive");
        }
        Ok(())
    }

    /// `key=value` lines describing the full configuration, in a fixed order.
    pub fn describe(&self) -> Vec<(String, String)> {
        let seeds = self
            .sketch
            .row_seeds()
            .iter()
            .map(|s| format!("{s:#018x}"))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("origin".into(), self.origin.to_string()),
            ("period".into(), self.period.to_string()),
            ("burst_factor".into(), self.burst_factor.to_string()),
            ("decay".into(), self.decay.to_string()),
            ("filter_threshold".into(), self.filter_threshold.to_string()),
            ("min_prior".into(), self.min_prior.to_string()),
            ("sketch_rows".into(), self.sketch.rows.to_string()),
            ("sketch_cols".into(), self.sketch.cols.to_string()),
            ("sketch_seed".into(), self.sketch.seed.to_string()),
            ("sketch_row_seeds".into(), seeds),
        ]
    }
}

/// Serde helper that writes non-finite floats as `"inf"`/`"-inf"` strings.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("edge {review_id} at tick {tick} arrived after tick {current}")]
    TimeRegression {
        review_id: String,
        tick: u64,
        current: u64,
    },
    #[error("edge {review_id}: {source}")]
    Tick {
        review_id: String,
        #[source]
        source: TickError,
    },
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyRecord {
    pub edge: ReviewEdge,
    pub substream: SubstreamLabel,
    pub tick: TickIndex,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroclusterEvent {
    pub app_id: String,
    pub substream: SubstreamLabel,
    /// Tick `n`; the burst happened in `n + 1`.
    pub prior_tick: TickIndex,
    pub burst_tick: TickIndex,
    pub prior_count: f64,
    pub burst_count: f64,
    pub ratio: f64,
}

/// Snapshot of the sketch estimates for one app.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppTickState {
    /// Decayed current count `a`.
    pub current: f64,
    /// Provisional total `s`: history plus the current tick's raw count.
    pub total: f64,
    pub tick: TickIndex,
}

/// Chi-squared statistic `(a - s/t)^2 t^2 / (s (t - 1))`; zero when `t = 1` or `s = 0`.
pub fn chi_squared_score(current: f64, total: f64, tick: u64) -> f64 {
    if tick <= 1 || total <= 0.0 {
        return 0.0;
    }
    let t = tick as f64;
    let diff = current - total / t;
    diff * diff * t * t / (total * (t - 1.0))
}

/// Evaluates the burst condition `c(n+1) / max(c(n), c_min) > β`.
pub fn check_microcluster(
    app_id: &str,
    substream: SubstreamLabel,
    prior_tick: TickIndex,
    prior_count: f64,
    burst_count: f64,
    burst_factor: f64,
    min_prior: f64,
) -> Option<MicroclusterEvent> {
    let denom = prior_count.max(min_prior);
    let ratio = if denom > 0.0 {
        burst_count / denom
    } else if burst_count > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (ratio > burst_factor).then(|| MicroclusterEvent {
        app_id: app_id.to_string(),
        substream,
        prior_tick,
        burst_tick: prior_tick.next(),
        prior_count,
        burst_count,
        ratio,
    })
}

#[derive(Debug, Clone, Copy)]
struct TickRegister {
    count: u64,
    last_score: f64,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    substream: SubstreamLabel,
    decayed: CountMinSketch,
    current: CountMinSketch,
    history: CountMinSketch,
    tick: Option<TickIndex>,
    active: BTreeMap<String, TickRegister>,
    previous: HashMap<String, u64>,
    events: Vec<MicroclusterEvent>,
}

impl Detector {
    pub fn new(config: DetectorConfig, substream: SubstreamLabel) -> Result<Self, DetectorError> {
        config.validate()?;
        let sketch = || CountMinSketch::new(config.sketch);
        Ok(Self {
            decayed: sketch(),
            current: sketch(),
            history: sketch(),
            config,
            substream,
            tick: None,
            active: BTreeMap::new(),
            previous: HashMap::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn current_tick(&self) -> Option<TickIndex> {
        self.tick
    }

    /// Total counters held by the sketches; independent of stream length.
    pub fn counter_len(&self) -> usize {
        self.decayed.counter_len() + self.current.counter_len() + self.history.counter_len()
    }

    pub fn app_state(&self, app_id: &str) -> Option<AppTickState> {
        let tick = self.tick?;
        let key = app_id.as_bytes();
        Some(AppTickState {
            current: self.decayed.estimate(key),
            total: self.history.estimate(key) + self.current.estimate(key),
            tick,
        })
    }

    pub fn score_edge(&mut self, edge: ReviewEdge) -> Result<AnomalyRecord, DetectorError> {
        let tick =
            to_tick(edge.timestamp, self.config.origin, self.config.period).map_err(|source| {
                DetectorError::Tick {
                    review_id: edge.review_id.clone(),
                    source,
                }
            })?;
        self.score_at(edge, tick)
    }

    /// Scores `edge` as arriving in `tick`, closing any earlier ticks first.
    pub fn score_at(
        &mut self,
        edge: ReviewEdge,
        tick: TickIndex,
    ) -> Result<AnomalyRecord, DetectorError> {
        match self.tick {
            Some(cur) if tick < cur => {
                return Err(DetectorError::TimeRegression {
                    review_id: edge.review_id,
                    tick: tick.get(),
                    current: cur.get(),
                })
            }
            Some(cur) if tick > cur => self.advance(cur, tick),
            Some(_) => {}
            None => self.tick = Some(tick),
        }

        let key = edge.app_id.as_bytes();
        self.current.insert(key, 1.0);
        self.decayed.insert(key, 1.0);
        let a = self.decayed.estimate(key);
        let s = self.history.estimate(key) + self.current.estimate(key);
        let score = chi_squared_score(a, s, tick.get());

        let reg = self
            .active
            .entry(edge.app_id.clone())
            .or_insert(TickRegister {
                count: 0,
                last_score: 0.0,
            });
        reg.count += 1;
        reg.last_score = score;

        Ok(AnomalyRecord {
            edge,
            substream: self.substream,
            tick,
            score,
        })
    }

    fn advance(&mut self, from: TickIndex, to: TickIndex) {
        self.end_of_tick(from);
        let gap = to.get() - from.get();
        if gap > 1 {
            self.previous.clear();
        }
        let steps = i32::try_from(gap).unwrap_or(i32::MAX);
        self.decayed.decay(self.config.decay.powi(steps));
        self.current.clear();
        self.tick = Some(to);
    }

    /// Closes tick `n`: conditional merge into the history and the burst check.
    fn end_of_tick(&mut self, n: TickIndex) {
        let active = std::mem::take(&mut self.active);
        let t = n.get();
        for (app, reg) in &active {
            let key = app.as_bytes();
            let merged = if reg.last_score > self.config.filter_threshold && t >= 2 {
                self.history.estimate(key) / (t - 1) as f64
            } else {
                reg.count as f64
            };
            self.history.insert(key, merged);

            if t >= 2 {
                let prior = self.previous.get(app).copied().unwrap_or(0);
                if let Some(event) = check_microcluster(
                    app,
                    self.substream,
                    TickIndex::new(t - 1).expect("t >= 2"),
                    prior as f64,
                    reg.count as f64,
                    self.config.burst_factor,
                    self.config.min_prior,
                ) {
                    self.events.push(event);
                }
            }
        }
        self.previous = active
            .into_iter()
            .map(|(app, reg)| (app, reg.count))
            .collect();
    }

    /// Closes the open tick. Further edges must belong to later ticks.
    pub fn flush(&mut self) {
        if let Some(cur) = self.tick {
            if !self.active.is_empty() {
                self.end_of_tick(cur);
            }
        }
    }

    pub fn drain_events(&mut self) -> Vec<MicroclusterEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Scores a time-sorted sub-stream in one pass and returns all records and events.
pub fn run_detector<I>(
    substream: I,
    label: SubstreamLabel,
    config: &DetectorConfig,
) -> Result<(Vec<AnomalyRecord>, Vec<MicroclusterEvent>), DetectorError>
where
    I: IntoIterator<Item = ReviewEdge>,
{
    let mut detector = Detector::new(config.clone(), label)?;
    let records = substream
        .into_iter()
        .map(|edge| detector.score_edge(edge))
        .collect::<Result<Vec<_>, _>>()?;
    detector.flush();
    Ok((records, detector.drain_events()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub review_id: String,
    pub app_id: String,
    pub reviewer_id: String,
    pub tick: u64,
    pub substream: SubstreamLabel,
    pub score: f64,
}

impl From<&AnomalyRecord> for ScoreRow {
    fn from(r: &AnomalyRecord) -> Self {
        ScoreRow {
            review_id: r.edge.review_id.clone(),
            app_id: r.edge.app_id.clone(),
            reviewer_id: r.edge.reviewer_id.clone(),
            tick: r.tick.get(),
            substream: r.substream,
            score: r.score,
        }
    }
}

/// Writes the scores CSV, preceded by `# key=value` lines echoing `config`.
pub fn write_scores_csv<W: Write>(
    mut writer: W,
    config: &DetectorConfig,
    records: &[AnomalyRecord],
) -> io::Result<()> {
    for (key, value) in config.describe() {
        writeln!(writer, "# {key}={value}")?;
    }
    let mut out = csv::Writer::from_writer(writer);
    for record in records {
        out.serialize(ScoreRow::from(record))
            .map_err(io::Error::other)?;
    }
    out.flush()
}

/// Reads a scores CSV, skipping `#` comment lines.
pub fn read_scores_csv<R: io::Read>(reader: R) -> io::Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    rdr.deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_events_jsonl<W: Write>(mut writer: W, events: &[MicroclusterEvent]) -> io::Result<()> {
    for event in events {
        serde_json::to_writer(&mut writer, event)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: io::BufRead>(reader: R) -> io::Result<Vec<MicroclusterEvent>> {
    let mut events = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}
