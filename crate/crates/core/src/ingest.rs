//! Review log and app catalog ingestion.
//!
//! Both readers are single pass: records are validated one at a time and bad
//! records become [`LineError`]s instead of aborting the parse.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// One review event: reviewer `reviewer_id` rated app `app_id` at `timestamp`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEdge {
    pub review_id: String,
    pub reviewer_id: String,
    pub app_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
    /// Star rating, 1 through 5.
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppRecord {
    pub app_id: String,
    /// Overall store rating in `[1, 5]`.
    pub overall_rating: f64,
    pub install_count: Option<u64>,
    pub name: Option<String>,
}

/// App metadata keyed by id. Iteration follows insertion order.
#[derive(Debug, Clone, Default)]
pub struct AppCatalog {
    index: HashMap<String, usize>,
    records: Vec<AppRecord>,
}

impl AppCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record unless the id is already present. Returns whether it was inserted.
    pub fn insert(&mut self, record: AppRecord) -> bool {
        if self.index.contains_key(&record.app_id) {
            return false;
        }
        self.index.insert(record.app_id.clone(), self.records.len());
        self.records.push(record);
        true
    }

    pub fn get(&self, app_id: &str) -> Option<&AppRecord> {
        self.index.get(app_id).map(|&i| &self.records[i])
    }

    pub fn rating(&self, app_id: &str) -> Option<f64> {
        self.get(app_id).map(|r| r.overall_rating)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AppRecord> {
        self.records.iter()
    }

    /// Writes the catalog as CSV with header `app_id,overall_rating,install_count,name`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["app_id", "overall_rating", "install_count", "name"])?;
        for r in &self.records {
            out.write_record([
                r.app_id.clone(),
                r.overall_rating.to_string(),
                r.install_count.map(|c| c.to_string()).unwrap_or_default(),
                r.name.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

impl FromIterator<AppRecord> for AppCatalog {
    fn from_iter<I: IntoIterator<Item = AppRecord>>(iter: I) -> Self {
        let mut catalog = AppCatalog::new();
        for record in iter {
            catalog.insert(record);
        }
        catalog
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReason {
    Syntax,
    Range,
    MissingField,
    Duplicate,
}

impl fmt::Display for ErrorReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorReason::Syntax => "syntax",
            ErrorReason::Range => "range",
            ErrorReason::MissingField => "missing_field",
            ErrorReason::Duplicate => "duplicate",
        })
    }
}

/// A rejected input record. Serializes as the sidecar report line `{line, reason, raw}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based physical line number.
    pub line: usize,
    pub reason: ErrorReason,
    pub raw: String,
    #[serde(skip)]
    pub detail: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {} ({})", self.line, self.reason, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

#[derive(Debug, Default)]
pub struct ParsedReviews {
    pub edges: Vec<ReviewEdge>,
    pub errors: Vec<LineError>,
    /// Number of non-blank records seen, valid or not.
    pub records: usize,
}

impl ParsedReviews {
    pub fn error_rate(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.errors.len() as f64 / self.records as f64
        }
    }
}

#[derive(Debug, Default)]
pub struct ParsedApps {
    pub catalog: AppCatalog,
    pub errors: Vec<LineError>,
    pub records: usize,
}

struct Reject(ErrorReason, String);

impl Reject {
    fn missing(field: &str) -> Self {
        Reject(
            ErrorReason::MissingField,
            format!("missing field `{field}`"),
        )
    }
    fn syntax(msg: impl Into<String>) -> Self {
        Reject(ErrorReason::Syntax, msg.into())
    }
    fn range(msg: impl Into<String>) -> Self {
        Reject(ErrorReason::Range, msg.into())
    }
    fn at(self, line: usize, raw: &str) -> LineError {
        LineError {
            line,
            reason: self.0,
            raw: raw.to_string(),
            detail: self.1,
        }
    }
}

const REVIEW_FIELDS: [&str; 6] = [
    "review_id",
    "reviewer_id",
    "app_id",
    "timestamp",
    "score",
    "text",
];

/// Parses a review log, keeping input order. Duplicate `review_id`s keep the first occurrence.
pub fn parse_reviews<R: BufRead>(reader: R, format: InputFormat) -> io::Result<ParsedReviews> {
    let mut out = ParsedReviews::default();
    let mut seen = HashSet::new();
    let mut push = |line: usize, raw: &str, result: Result<ReviewEdge, Reject>| match result {
        Ok(edge) if !seen.insert(edge.review_id.clone()) => {
            let detail = format!("duplicate review_id `{}`", edge.review_id);
            out.errors
                .push(Reject(ErrorReason::Duplicate, detail).at(line, raw));
        }
        Ok(edge) => out.edges.push(edge),
        Err(reject) => out.errors.push(reject.at(line, raw)),
    };

    let mut records = 0;
    match format {
        InputFormat::Jsonl => {
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                records += 1;
                push(i + 1, &line, review_from_json(&line));
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
            let headers = rdr.headers().map_err(csv_io)?.clone();
            let columns: Vec<Option<usize>> = REVIEW_FIELDS
                .iter()
                .map(|name| headers.iter().position(|h| h.trim() == *name))
                .collect();
            for record in rdr.records() {
                records += 1;
                match record {
                    Ok(record) => {
                        let line = record.position().map_or(0, |p| p.line() as usize);
                        let raw = record.iter().collect::<Vec<_>>().join(",");
                        let field = |i: usize| columns[i].and_then(|c| record.get(c));
                        push(line, &raw, review_from_fields(field));
                    }
                    Err(err) => {
                        let line = err.position().map_or(0, |p| p.line() as usize);
                        push(line, "", Err(Reject::syntax(err.to_string())));
                    }
                }
            }
        }
    }
    out.records = records;
    Ok(out)
}

fn csv_io(err: csv::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, err)
}

fn review_from_json(line: &str) -> Result<ReviewEdge, Reject> {
    let value: Value = serde_json::from_str(line).map_err(|e| Reject::syntax(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Reject::syntax("record is not a JSON object"));
    };
    let review_id = json_id(&obj, "review_id")?;
    let reviewer_id = json_id(&obj, "reviewer_id")?;
    let app_id = json_id(&obj, "app_id")?;
    let timestamp = check_timestamp(json_int(&obj, "timestamp")?)?;
    let score = check_score(json_int(&obj, "score")?)?;
    let text = match obj.get("text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Reject::syntax("`text` must be a string")),
    };
    Ok(ReviewEdge {
        review_id,
        reviewer_id,
        app_id,
        timestamp,
        score,
        text,
    })
}

fn json_id(obj: &Map<String, Value>, key: &str) -> Result<String, Reject> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(Reject::missing(key)),
        Some(Value::String(s)) if s.is_empty() => Err(Reject::missing(key)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Reject::syntax(format!("`{key}` must be a string"))),
    }
}

fn json_int(obj: &Map<String, Value>, key: &str) -> Result<i64, Reject> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(Reject::missing(key)),
        Some(Value::Number(n)) => n
            .as_i64()
            .ok_or_else(|| Reject::syntax(format!("`{key}` must be an integer"))),
        Some(_) => Err(Reject::syntax(format!("`{key}` must be an integer"))),
    }
}

fn review_from_fields<'a>(field: impl Fn(usize) -> Option<&'a str>) -> Result<ReviewEdge, Reject> {
    let required = |i: usize| -> Result<&'a str, Reject> {
        match field(i) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Reject::missing(REVIEW_FIELDS[i])),
        }
    };
    let int = |i: usize| -> Result<i64, Reject> {
        let v = required(i)?;
        v.trim()
            .parse::<i64>()
            .map_err(|_| Reject::syntax(format!("`{}` must be an integer", REVIEW_FIELDS[i])))
    };
    Ok(ReviewEdge {
        review_id: required(0)?.to_string(),
        reviewer_id: required(1)?.to_string(),
        app_id: required(2)?.to_string(),
        timestamp: check_timestamp(int(3)?)?,
        score: check_score(int(4)?)?,
        text: field(5).filter(|t| !t.is_empty()).map(str::to_string),
    })
}

fn check_timestamp(ts: i64) -> Result<i64, Reject> {
    if ts < 0 {
        Err(Reject::range(format!("timestamp {ts} is negative")))
    } else {
        Ok(ts)
    }
}

fn check_score(score: i64) -> Result<u8, Reject> {
    if (1..=5).contains(&score) {
        Ok(score as u8)
    } else {
        Err(Reject::range(format!("score {score} outside 1..=5")))
    }
}

const APP_FIELDS: [&str; 4] = ["app_id", "overall_rating", "install_count", "name"];

/// Parses an app catalog CSV. Duplicate ids keep the first record.
pub fn parse_apps<R: io::Read>(reader: R) -> io::Result<ParsedApps> {
    let mut out = ParsedApps::default();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_io)?.clone();
    let columns: Vec<Option<usize>> = APP_FIELDS
        .iter()
        .map(|name| headers.iter().position(|h| h.trim() == *name))
        .collect();
    for record in rdr.records() {
        out.records += 1;
        let record = match record {
            Ok(r) => r,
            Err(err) => {
                let line = err.position().map_or(0, |p| p.line() as usize);
                out.errors
                    .push(Reject::syntax(err.to_string()).at(line, ""));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line() as usize);
        let raw = record.iter().collect::<Vec<_>>().join(",");
        let field = |i: usize| {
            columns[i]
                .and_then(|c| record.get(c))
                .map(str::trim)
                .filter(|v| !v.is_empty())
        };
        match app_from_fields(field) {
            Ok(app) => {
                let id = app.app_id.clone();
                if !out.catalog.insert(app) {
                    let detail = format!("duplicate app_id `{id}`");
                    out.errors
                        .push(Reject(ErrorReason::Duplicate, detail).at(line, &raw));
                }
            }
            Err(reject) => out.errors.push(reject.at(line, &raw)),
        }
    }
    Ok(out)
}

fn app_from_fields<'a>(field: impl Fn(usize) -> Option<&'a str>) -> Result<AppRecord, Reject> {
    let app_id = field(0)
        .ok_or_else(|| Reject::missing("app_id"))?
        .to_string();
    let rating: f64 = field(1)
        .ok_or_else(|| Reject::missing("overall_rating"))?
        .parse()
        .map_err(|_| Reject::syntax("`overall_rating` must be a number"))?;
    if !(1.0..=5.0).contains(&rating) {
        return Err(Reject::range(format!(
            "overall_rating {rating} outside [1, 5]"
        )));
    }
    let install_count = field(2)
        .map(|v| {
            v.parse::<u64>()
                .map_err(|_| Reject::syntax("`install_count` must be a non-negative integer"))
        })
        .transpose()?;
    Ok(AppRecord {
        app_id,
        overall_rating: rating,
        install_count,
        name: field(3).map(str::to_string),
    })
}

/// Writes edges as JSONL, one object per line.
pub fn write_reviews_jsonl<W: Write>(mut writer: W, edges: &[ReviewEdge]) -> io::Result<()> {
    for edge in edges {
        serde_json::to_writer(&mut writer, edge)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the sidecar error report, one `{line, reason, raw}` object per line.
pub fn write_errors_jsonl<W: Write>(mut writer: W, errors: &[LineError]) -> io::Result<()> {
    for err in errors {
        serde_json::to_writer(&mut writer, err)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Detection period index `n`, always at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct TickIndex(u64);

impl TickIndex {
    pub const FIRST: TickIndex = TickIndex(1);

    pub fn new(n: u64) -> Option<Self> {
        (n >= 1).then_some(TickIndex(n))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Self {
        TickIndex(self.0 + 1)
    }
}

impl TryFrom<u64> for TickIndex {
    type Error = String;
    fn try_from(n: u64) -> Result<Self, String> {
        TickIndex::new(n).ok_or_else(|| "tick index must be >= 1".to_string())
    }
}

impl From<TickIndex> for u64 {
    fn from(t: TickIndex) -> u64 {
        t.0
    }
}

impl fmt::Display for TickIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TickError {
    #[error("timestamp {timestamp} is before origin {origin}")]
    BeforeOrigin { timestamp: i64, origin: i64 },
    #[error("detection period must be positive")]
    ZeroPeriod,
}

/// Maps a timestamp to the unique `n` with `origin + (n-1)T < ts <= origin + nT`.
/// The origin itself belongs to tick 1.
pub fn to_tick(timestamp: i64, origin: i64, period: u64) -> Result<TickIndex, TickError> {
    if period == 0 {
        return Err(TickError::ZeroPeriod);
    }
    if timestamp < origin {
        return Err(TickError::BeforeOrigin { timestamp, origin });
    }
    let elapsed = (timestamp as i128 - origin as i128) as u128;
    let n = elapsed.div_ceil(period as u128).max(1);
    Ok(TickIndex(n.min(u64::MAX as u128) as u64))
}
