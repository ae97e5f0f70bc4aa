//! Command-line front end: each stage reads and writes plain files so stages
//! can be rerun independently, and `pipeline` chains them end to end.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lockstep_core::clusters::{
    collect_clusters, near_identical_pairs, rank_clusters, ClusterReport, EmbeddingProvider,
    ExternalEmbeddings, LexicalEmbedder, SuspiciousCluster,
};
use lockstep_core::detector::{
    read_events_jsonl, read_scores_csv, run_detector, write_events_jsonl, write_scores_csv,
    AnomalyRecord, DetectorConfig, MicroclusterEvent,
};
use lockstep_core::ingest::{
    parse_apps, parse_reviews, write_errors_jsonl, write_reviews_jsonl, AppCatalog, InputFormat,
    LineError, ReviewEdge, TickIndex,
};
use lockstep_core::partition::{partition_stream, PartitionCounts, SubstreamLabel};
use lockstep_core::sketch::SketchGeometry;
use lockstep_core::stats::{
    ecdf, shared_reviewer_graph, shared_reviewer_totals, summarize, welch_t_with, DatasetSummary,
    Tail, WelchResult,
};
use lockstep_core::synth::{self, SynthSpec};

pub const EXIT_PARSE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

/// Files written by `pipeline`, besides the manifest.
pub const PIPELINE_OUTPUTS: [&str; 7] = [
    "scores.csv",
    "events.jsonl",
    "clusters.json",
    "cdf_boost.csv",
    "cdf_sink.csv",
    "summary.json",
    "parse_errors.jsonl",
];
pub const MANIFEST: &str = "manifest.json";

/// An error carrying the process exit code it should map to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error,
        }
    }
    fn parse(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_PARSE,
            error,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "lockstep",
    version,
    about = "Lockstep review fraud detection over edge streams"
)]
pub struct Cli {
    /// JSON config file; its keys mirror the long flag names (with underscores).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a review log, write normalized JSONL and a parse-error sidecar.
    Ingest(IngestArgs),
    /// Score both sub-streams and emit microcluster events.
    Score(ScoreArgs),
    /// Rank suspicious clusters from a scoring run and report near-identical pairs.
    Clusters(ClustersArgs),
    /// Write every near-identical pair of the top clusters as JSONL.
    Pairs(ClustersArgs),
    /// Statistical summaries.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Generate a synthetic review stream with injected lockstep bursts.
    Synth(SynthArgs),
    /// Run ingest, partition, scoring, clusters and stats end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Jsonl,
    Csv,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => InputFormat::Jsonl,
            FormatArg::Csv => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderArg {
    Lexical,
    File,
}

/// Tunables shared by several subcommands. Unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Review file format; guessed from the extension when unset.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Origin timestamp of tick 1 (seconds).
    #[arg(long, allow_hyphen_values = true)]
    pub origin: Option<i64>,
    /// Detection period in seconds [default: 86400].
    #[arg(long)]
    pub period: Option<u64>,
    /// Burst factor beta (> 1) [default: 2].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Decay alpha in [0, 1] [default: 0.6].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Filter threshold theta (> 0, `inf` disables filtering) [default: 1000].
    #[arg(long)]
    pub theta: Option<f64>,
    /// Floor for the previous-tick count in the burst ratio [default: 1].
    #[arg(long)]
    pub c_min: Option<f64>,
    #[arg(long)]
    pub sketch_rows: Option<usize>,
    #[arg(long)]
    pub sketch_cols: Option<usize>,
    #[arg(long)]
    pub sketch_seed: Option<u64>,
    /// Number of clusters to analyse [default: 50].
    #[arg(long)]
    pub top: Option<usize>,
    /// Similarity threshold [default: 0.95 lexical, 1.0 file].
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderArg>,
    /// Embedding sidecar JSONL for `--provider file`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Maximum tolerated fraction of rejected input records [default: 0.01].
    #[arg(long)]
    pub max_error_rate: Option<f64>,
}

macro_rules! merge_fields {
    ($lhs:ident, $rhs:ident, $($f:ident),*) => {
        Settings { $($f: $lhs.$f.clone().or_else(|| $rhs.$f.clone()),)* }
    };
}

impl Settings {
    /// `self` wins over `file`.
    pub fn over(&self, file: &Settings) -> Settings {
        merge_fields!(
            self,
            file,
            format,
            origin,
            period,
            beta,
            alpha,
            theta,
            c_min,
            sketch_rows,
            sketch_cols,
            sketch_seed,
            top,
            tau,
            provider,
            embeddings,
            max_error_rate
        )
    }

    pub fn detector(&self) -> DetectorConfig {
        let d = DetectorConfig::default();
        DetectorConfig {
            origin: self.origin.unwrap_or(d.origin),
            period: self.period.unwrap_or(d.period),
            burst_factor: self.beta.unwrap_or(d.burst_factor),
            decay: self.alpha.unwrap_or(d.decay),
            filter_threshold: self.theta.unwrap_or(d.filter_threshold),
            min_prior: self.c_min.unwrap_or(d.min_prior),
            sketch: SketchGeometry {
                rows: self.sketch_rows.unwrap_or(d.sketch.rows),
                cols: self.sketch_cols.unwrap_or(d.sketch.cols),
                seed: self.sketch_seed.unwrap_or(d.sketch.seed),
            },
        }
    }

    pub fn provider(&self) -> ProviderArg {
        self.provider.unwrap_or(ProviderArg::Lexical)
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(match self.provider() {
            ProviderArg::Lexical => 0.95,
            ProviderArg::File => 1.0,
        })
    }

    pub fn top(&self) -> usize {
        self.top.unwrap_or(50)
    }

    pub fn max_error_rate(&self) -> f64 {
        self.max_error_rate.unwrap_or(0.01)
    }

    fn format_for(&self, path: &Path) -> InputFormat {
        self.format
            .map_or_else(|| InputFormat::from_path(path), Into::into)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub reviews: PathBuf,
    /// Optional catalog; when given, the partition summary is printed.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Normalized JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    /// Parse-error sidecar JSONL.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub reviews: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    /// Scores CSV output.
    #[arg(long)]
    pub scores: PathBuf,
    /// Microcluster events JSONL output.
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct ClustersArgs {
    /// Reviews file the scores were computed from (provides review text).
    #[arg(long)]
    pub reviews: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    /// Output file; stdout when unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Welch's t-test between two CSV columns (`PATH:COLUMN`).
    Ttest(TtestArgs),
    /// Empirical CDF of the `score` column of a scores CSV.
    Cdf(CdfArgs),
    /// Shared-reviewer app network as `app_a,app_b,weight`.
    Network(NetworkArgs),
    /// Dataset counts.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    /// Keep only rows of sample a whose column matches, as `COLUMN=VALUE`.
    #[arg(long)]
    pub filter_a: Option<String>,
    #[arg(long)]
    pub filter_b: Option<String>,
    #[arg(long)]
    pub two_sided: bool,
}

#[derive(Debug, Args)]
pub struct CdfArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Restrict to one sub-stream.
    #[arg(long)]
    pub substream: Option<SubstreamLabel>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetworkArgs {
    #[arg(long)]
    pub reviews: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[arg(long)]
    pub reviews: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthSpec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSONL `{review_id, injected, injection_index}`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write the synthetic app catalog CSV.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub reviews: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub settings: Settings,
}

/// Parses arguments, runs the command, and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("lockstep: error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let file_settings = match &cli.config {
        Some(path) => load_settings(path).map_err(Failure::config)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args, &file_settings),
        Command::Score(args) => cmd_score(args, &file_settings),
        Command::Clusters(args) => cmd_clusters(args, &file_settings, false),
        Command::Pairs(args) => cmd_clusters(args, &file_settings, true),
        Command::Stats(cmd) => cmd_stats(cmd, &file_settings),
        Command::Synth(args) => cmd_synth(args),
        Command::Pipeline(args) => cmd_pipeline(args, &file_settings, cli.config.as_deref()),
    }
}

pub fn load_settings(path: &Path) -> anyhow::Result<Settings> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn open(path: &Path) -> CmdResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(Failure::config)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn validated(settings: &Settings) -> CmdResult<DetectorConfig> {
    let config = settings.detector();
    config.validate().map_err(|e| Failure::config(e.into()))?;
    let tau = settings.tau();
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Failure::config(anyhow!("tau {tau} must lie in (0, 1]")));
    }
    if settings.provider() == ProviderArg::File && settings.embeddings.is_none() {
        return Err(Failure::config(anyhow!(
            "--provider file requires --embeddings"
        )));
    }
    let rate = settings.max_error_rate();
    if !(0.0..=1.0).contains(&rate) {
        return Err(Failure::config(anyhow!(
            "max_error_rate {rate} must lie in [0, 1]"
        )));
    }
    Ok(config)
}

fn announce(config: &DetectorConfig) {
    eprintln!(
        "lockstep: sketch {}x{} seed={} row_seeds={:x?}",
        config.sketch.rows,
        config.sketch.cols,
        config.sketch.seed,
        config.sketch.row_seeds()
    );
}

struct Inputs {
    edges: Vec<ReviewEdge>,
    catalog: AppCatalog,
    errors: Vec<LineError>,
}

/// Reads and validates reviews (sorted by time, ties in input order) and the catalog,
/// failing with exit code 2 when too many records are rejected.
fn read_inputs(reviews: &Path, catalog: &Path, settings: &Settings) -> CmdResult<Inputs> {
    let review_file = open(reviews)?;
    let catalog_file = open(catalog)?;
    let parsed = parse_reviews(review_file, settings.format_for(reviews))
        .with_context(|| format!("reading {}", reviews.display()))
        .map_err(Failure::parse)?;
    let apps = parse_apps(catalog_file)
        .with_context(|| format!("reading {}", catalog.display()))
        .map_err(Failure::parse)?;
    let records = parsed.records + apps.records;
    let rejected = parsed.errors.len() + apps.errors.len();
    let rate = if records == 0 {
        0.0
    } else {
        rejected as f64 / records as f64
    };
    if rate > settings.max_error_rate() {
        return Err(Failure::parse(anyhow!(
            "{rejected} of {records} input records rejected ({:.2}% > {:.2}%); first: {}",
            100.0 * rate,
            100.0 * settings.max_error_rate(),
            parsed
                .errors
                .iter()
                .chain(&apps.errors)
                .next()
                .map(ToString::to_string)
                .unwrap_or_default()
        )));
    }
    let mut edges = parsed.edges;
    edges.sort_by_key(|e| e.timestamp);
    let mut errors = parsed.errors;
    errors.extend(apps.errors);
    Ok(Inputs {
        edges,
        catalog: apps.catalog,
        errors,
    })
}

struct Scored {
    records: Vec<AnomalyRecord>,
    events: Vec<MicroclusterEvent>,
    boost_scores: Vec<f64>,
    sink_scores: Vec<f64>,
    counts: PartitionCounts,
}

/// Partitions the stream and runs one detector per sub-stream in parallel.
fn score_streams(
    edges: Vec<ReviewEdge>,
    catalog: &AppCatalog,
    config: &DetectorConfig,
) -> CmdResult<Scored> {
    let parts = partition_stream(edges, catalog);
    let counts = parts.counts();
    let (boost, sink) = std::thread::scope(|scope| {
        let boost = scope.spawn(|| run_detector(parts.boost, SubstreamLabel::Boost, config));
        let sink = run_detector(parts.sink, SubstreamLabel::Sink, config);
        (boost.join().expect("boost detector panicked"), sink)
    });
    let (mut records, mut events) = boost.context("scoring boost sub-stream")?;
    let (sink_records, sink_events) = sink.context("scoring sink sub-stream")?;
    let boost_scores = records.iter().map(|r| r.score).collect();
    let sink_scores = sink_records.iter().map(|r| r.score).collect();
    records.extend(sink_records);
    events.extend(sink_events);
    Ok(Scored {
        records,
        events,
        boost_scores,
        sink_scores,
        counts,
    })
}

fn provider_for(settings: &Settings) -> CmdResult<Box<dyn EmbeddingProvider>> {
    Ok(match settings.provider() {
        ProviderArg::Lexical => Box::new(LexicalEmbedder),
        ProviderArg::File => {
            let path = settings.embeddings.as_deref().expect("validated");
            let reader = open(path)?;
            Box::new(
                ExternalEmbeddings::from_jsonl(reader).map_err(|e| Failure::config(anyhow!(e)))?,
            )
        }
    })
}

struct ClusterOutput {
    reports: Vec<ClusterReport>,
    pairs: Vec<PairLine>,
}

#[derive(Debug, Serialize)]
struct PairLine {
    app_id: String,
    substream: SubstreamLabel,
    tick: u64,
    review_id_a: String,
    review_id_b: String,
    similarity: f64,
}

const REPORT_PAIRS: usize = 10;

fn analyse_clusters(
    events: &[MicroclusterEvent],
    records: &[AnomalyRecord],
    settings: &Settings,
) -> CmdResult<ClusterOutput> {
    let provider = provider_for(settings)?;
    let tau = settings.tau();
    let clusters = collect_clusters(events, records).map_err(|e| anyhow!(e))?;
    let ranked: Vec<SuspiciousCluster> = rank_clusters(clusters, settings.top());
    let mut reports = Vec::with_capacity(ranked.len());
    let mut pairs = Vec::new();
    for cluster in &ranked {
        let analysis =
            near_identical_pairs(cluster, provider.as_ref(), tau).map_err(|e| anyhow!(e))?;
        reports.push(ClusterReport::new(
            cluster,
            &analysis,
            provider.name(),
            tau,
            REPORT_PAIRS,
        ));
        pairs.extend(analysis.pairs.into_iter().map(|p| PairLine {
            app_id: cluster.app_id.clone(),
            substream: cluster.substream,
            tick: cluster.tick.get(),
            review_id_a: p.review_id_a,
            review_id_b: p.review_id_b,
            similarity: p.similarity,
        }));
    }
    Ok(ClusterOutput { reports, pairs })
}

fn write_json<T: Serialize, W: Write>(mut w: W, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> anyhow::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_ingest(args: IngestArgs, file: &Settings) -> CmdResult {
    let settings = args.settings.over(file);
    let reader = open(&args.reviews)?;
    let parsed = parse_reviews(reader, settings.format_for(&args.reviews))
        .with_context(|| format!("reading {}", args.reviews.display()))
        .map_err(Failure::parse)?;
    let mut out = create(&args.out)?;
    write_reviews_jsonl(&mut out, &parsed.edges).context("writing reviews")?;
    out.flush().context("writing reviews")?;
    if let Some(path) = &args.errors {
        write_errors_jsonl(create(path)?, &parsed.errors).context("writing error report")?;
    }
    let partition = match &args.catalog {
        Some(path) => {
            let apps = parse_apps(open(path)?).map_err(|e| Failure::parse(e.into()))?;
            Some(partition_stream(parsed.edges.iter().cloned(), &apps.catalog).counts())
        }
        None => None,
    };
    let summary = serde_json::json!({
        "records": parsed.records,
        "valid": parsed.edges.len(),
        "errors": parsed.errors.len(),
        "partition": partition,
    });
    write_json(io::stdout().lock(), &summary)?;
    if parsed.error_rate() > settings.max_error_rate() {
        return Err(Failure::parse(anyhow!(
            "{} of {} records rejected",
            parsed.errors.len(),
            parsed.records
        )));
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs, file: &Settings) -> CmdResult {
    let settings = args.settings.over(file);
    let config = validated(&settings)?;
    announce(&config);
    let inputs = read_inputs(&args.reviews, &args.catalog, &settings)?;
    let scored = score_streams(inputs.edges, &inputs.catalog, &config)?;
    let mut w = create(&args.scores)?;
    write_scores_csv(&mut w, &config, &scored.records).context("writing scores")?;
    w.flush().context("writing scores")?;
    let mut w = create(&args.events)?;
    write_events_jsonl(&mut w, &scored.events).context("writing events")?;
    w.flush().context("writing events")?;
    write_json(io::stdout().lock(), &scored.counts)?;
    Ok(())
}

/// Joins scores CSV rows back onto their review edges.
fn load_scored_run(
    reviews: &Path,
    scores: &Path,
    settings: &Settings,
) -> CmdResult<Vec<AnomalyRecord>> {
    let parsed = parse_reviews(open(reviews)?, settings.format_for(reviews))
        .with_context(|| format!("reading {}", reviews.display()))
        .map_err(Failure::parse)?;
    let mut by_id: HashMap<String, ReviewEdge> = parsed
        .edges
        .into_iter()
        .map(|e| (e.review_id.clone(), e))
        .collect();
    let rows = read_scores_csv(open(scores)?)
        .with_context(|| format!("reading {}", scores.display()))
        .map_err(Failure::parse)?;
    rows.into_iter()
        .map(|row| {
            let edge = by_id.remove(&row.review_id).ok_or_else(|| {
                Failure::parse(anyhow!(
                    "scored review {} not in reviews file",
                    row.review_id
                ))
            })?;
            let tick = TickIndex::new(row.tick)
                .ok_or_else(|| Failure::parse(anyhow!("review {}: tick 0", row.review_id)))?;
            Ok(AnomalyRecord {
                edge,
                substream: row.substream,
                tick,
                score: row.score,
            })
        })
        .collect()
}

fn cmd_clusters(args: ClustersArgs, file: &Settings, pairs_only: bool) -> CmdResult {
    let settings = args.settings.over(file);
    validated(&settings)?;
    let records = load_scored_run(&args.reviews, &args.scores, &settings)?;
    let events = read_events_jsonl(open(&args.events)?).map_err(|e| Failure::parse(e.into()))?;
    let out = analyse_clusters(&events, &records, &settings)?;
    let w = output(args.out.as_deref())?;
    if pairs_only {
        write_jsonl(w, &out.pairs)?;
    } else {
        write_json(w, &out.reports)?;
    }
    Ok(())
}

/// Reads one numeric column from a CSV file, with an optional `COLUMN=VALUE` row filter.
fn read_column(spec: &str, filter: Option<&str>) -> CmdResult<Vec<f64>> {
    let (path, column) = spec
        .rsplit_once(':')
        .ok_or_else(|| Failure::config(anyhow!("expected PATH:COLUMN, got `{spec}`")))?;
    let filter = filter
        .map(|f| {
            f.split_once('=')
                .ok_or_else(|| Failure::config(anyhow!("expected COLUMN=VALUE, got `{f}`")))
        })
        .transpose()?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(open(Path::new(path))?);
    let headers = rdr.headers().map_err(|e| Failure::parse(e.into()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::config(anyhow!("{path}: no column `{name}`")))
    };
    let idx = find(column)?;
    let filter = filter.map(|(c, v)| find(c).map(|i| (i, v))).transpose()?;
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Failure::parse(e.into()))?;
        if let Some((fi, fv)) = filter {
            if record.get(fi) != Some(fv) {
                continue;
            }
        }
        let cell = record.get(idx).unwrap_or("");
        let v: f64 = cell.trim().parse().map_err(|_| {
            Failure::parse(anyhow!(
                "{path}: `{cell}` in column {column} is not a number"
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_stats(cmd: StatsCommand, file: &Settings) -> CmdResult {
    match cmd {
        StatsCommand::Ttest(args) => {
            let a = read_column(&args.a, args.filter_a.as_deref())?;
            let b = read_column(&args.b, args.filter_b.as_deref())?;
            let tail = if args.two_sided {
                Tail::TwoSided
            } else {
                Tail::Greater
            };
            let result = welch_t_with(&a, &b, tail).map_err(|e| Failure::parse(e.into()))?;
            write_json(io::stdout().lock(), &result)?;
        }
        StatsCommand::Cdf(args) => {
            let rows =
                read_scores_csv(open(&args.scores)?).map_err(|e| Failure::parse(e.into()))?;
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| args.substream.is_none_or(|s| s == r.substream))
                .map(|r| r.score)
                .collect();
            let points = ecdf(&values).map_err(|e| Failure::parse(e.into()))?;
            points
                .write_csv(output(args.out.as_deref())?)
                .context("writing cdf")?;
        }
        StatsCommand::Network(args) => {
            let settings = args.settings.over(file);
            let parsed = parse_reviews(open(&args.reviews)?, settings.format_for(&args.reviews))
                .map_err(|e| Failure::parse(e.into()))?;
            let graph = shared_reviewer_graph(&parsed.edges);
            let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
            for edge in &graph {
                w.serialize(edge).context("writing network")?;
            }
            w.flush().context("writing network")?;
        }
        StatsCommand::Summary(args) => {
            let settings = args.settings.over(file);
            let inputs = read_inputs(&args.reviews, &args.catalog, &settings)?;
            write_json(
                io::stdout().lock(),
                &summarize(&inputs.edges, &inputs.catalog),
            )?;
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))
        .map_err(Failure::config)?;
    let mut spec: SynthSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.spec.display()))
        .map_err(Failure::config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    eprintln!(
        "lockstep: synth prng={} seed={}",
        synth::PRNG_NAME,
        spec.seed
    );
    let stream = synth::generate(&spec).map_err(|e| Failure::config(e.into()))?;
    let mut w = create(&args.out)?;
    write_reviews_jsonl(&mut w, &stream.edges).context("writing reviews")?;
    w.flush().context("writing reviews")?;
    let mut w = create(&args.truth)?;
    stream.write_truth_jsonl(&mut w).context("writing truth")?;
    w.flush().context("writing truth")?;
    if let Some(path) = &args.catalog {
        spec.catalog()
            .write_csv(create(path)?)
            .context("writing catalog")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PipelineSummary {
    dataset: DatasetSummary,
    partition: PartitionCounts,
    parse_errors: usize,
    events: usize,
    /// Welch's test of mean boost score > mean sink score; null when undefined.
    boost_vs_sink: Option<WelchResult>,
    boost_vs_sink_error: Option<String>,
    top_shared_reviewer_apps: Vec<(String, usize)>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    detector: DetectorConfig,
    sketch_row_seeds: Vec<u64>,
    provider: ProviderArg,
    embeddings: Option<InputDigest>,
    tau: f64,
    top: usize,
    max_error_rate: f64,
    inputs: Vec<InputDigest>,
    outputs: Vec<&'static str>,
    runtime_ms: u128,
}

fn digest(path: &Path) -> anyhow::Result<InputDigest> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

fn cmd_pipeline(args: PipelineArgs, file: &Settings, config_path: Option<&Path>) -> CmdResult {
    let started = Instant::now();
    let settings = args.settings.over(file);
    let config = validated(&settings)?;
    announce(&config);

    // Outputs are staged next to the target and moved in only on success.
    let parent = match args.out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)
        .with_context(|| format!("creating {}", parent.display()))
        .map_err(Failure::config)?;
    let staging = tempfile::Builder::new()
        .prefix(".lockstep-staging-")
        .tempdir_in(&parent)
        .context("creating staging directory")?;
    let stage = |name: &str| staging.path().join(name);

    let inputs = read_inputs(&args.reviews, &args.catalog, &settings)?;
    let dataset = summarize(&inputs.edges, &inputs.catalog);
    let network = shared_reviewer_totals(&shared_reviewer_graph(&inputs.edges));
    let parse_errors = inputs.errors.len();
    write_errors_jsonl(create(&stage("parse_errors.jsonl"))?, &inputs.errors)
        .context("writing parse errors")?;

    let scored = score_streams(inputs.edges, &inputs.catalog, &config)?;
    let mut w = create(&stage("scores.csv"))?;
    write_scores_csv(&mut w, &config, &scored.records).context("writing scores")?;
    w.flush().context("writing scores")?;
    let mut w = create(&stage("events.jsonl"))?;
    write_events_jsonl(&mut w, &scored.events).context("writing events")?;
    w.flush().context("writing events")?;

    let clusters = analyse_clusters(&scored.events, &scored.records, &settings)?;
    write_json(create(&stage("clusters.json"))?, &clusters.reports)?;

    for (name, scores) in [
        ("cdf_boost.csv", &scored.boost_scores),
        ("cdf_sink.csv", &scored.sink_scores),
    ] {
        let mut w = create(&stage(name))?;
        match ecdf(scores) {
            Ok(points) => points.write_csv(&mut w).context("writing cdf")?,
            Err(_) => w.write_all(b"value,fraction\n").context("writing cdf")?,
        }
        w.flush().context("writing cdf")?;
    }

    let welch = welch_t_with(&scored.boost_scores, &scored.sink_scores, Tail::Greater);
    let summary = PipelineSummary {
        dataset,
        partition: scored.counts,
        parse_errors,
        events: scored.events.len(),
        boost_vs_sink_error: welch.as_ref().err().map(ToString::to_string),
        boost_vs_sink: welch.ok(),
        top_shared_reviewer_apps: network.into_iter().take(5).collect(),
    };
    write_json(create(&stage("summary.json"))?, &summary)?;

    let mut inputs_digest = vec![digest(&args.reviews)?, digest(&args.catalog)?];
    if let Some(path) = config_path {
        inputs_digest.push(digest(path)?);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        sketch_row_seeds: config.sketch.row_seeds(),
        detector: config,
        provider: settings.provider(),
        embeddings: settings.embeddings.as_deref().map(digest).transpose()?,
        tau: settings.tau(),
        top: settings.top(),
        max_error_rate: settings.max_error_rate(),
        inputs: inputs_digest,
        outputs: PIPELINE_OUTPUTS.to_vec(),
        runtime_ms: started.elapsed().as_millis(),
    };
    write_json(create(&stage(MANIFEST))?, &manifest)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for name in PIPELINE_OUTPUTS.iter().chain([&MANIFEST]) {
        fs::rename(stage(name), args.out_dir.join(name))
            .with_context(|| format!("moving {name} into {}", args.out_dir.display()))?;
    }
    eprintln!(
        "lockstep: {} reviews, {} events, {} clusters -> {}",
        scored.records.len(),
        scored.events.len(),
        clusters.reports.len(),
        args.out_dir.display()
    );
    Ok(())
}
