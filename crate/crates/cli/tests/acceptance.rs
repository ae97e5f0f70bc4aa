//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p lockstep-cli --test acceptance` (add `--release` for
//! representative timings).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::oracle::{brute_force_bursts, exact_scores};
use common::streams::{collision_free, params, random_case, ticks_of};
use lockstep_core::clusters::{
    collect_clusters, near_identical_pairs, LexicalEmbedder, SuspiciousCluster,
};
use lockstep_core::detector::{run_detector, AnomalyRecord, DetectorConfig, MicroclusterEvent};
use lockstep_core::ingest::{parse_apps, parse_reviews, InputFormat, TickIndex};
use lockstep_core::partition::{partition_stream, SubstreamLabel};
use lockstep_core::sketch::{CountMinSketch, SketchGeometry};
use lockstep_core::stats::{summarize, welch_t};
use lockstep_core::synth::{generate, GeneratedStream, Injection, ScoreMode, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    out.detail = format!("{} [{:.2}s]", out.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        if elapsed > limit {
            out.pass = false;
            out.detail = format!("{} exceeds {:.0}s limit", out.detail, limit.as_secs_f64());
        }
    }
    out
}

fn background_spec(seed: u64, injections: Vec<Injection>) -> SynthSpec {
    SynthSpec {
        n_apps: 20,
        n_reviewers: 1000,
        ticks: 30,
        background_rate: 2.0,
        injections,
        seed,
        origin: 0,
        period: 86_400,
    }
}

fn boost_burst(app: &str, tick: u64, n_edges: usize, mode: ScoreMode) -> Injection {
    Injection {
        app_id: app.to_string(),
        tick,
        n_edges,
        n_reviewers_used: 20,
        score_mode: mode,
        reviewer_ids: None,
    }
}

struct Run {
    stream: GeneratedStream,
    boost: (Vec<AnomalyRecord>, Vec<MicroclusterEvent>),
    sink: (Vec<AnomalyRecord>, Vec<MicroclusterEvent>),
}

fn run_both(spec: &SynthSpec, config: &DetectorConfig) -> Run {
    let stream = generate(spec).expect("valid spec");
    let parts = partition_stream(stream.edges.iter().cloned(), &spec.catalog());
    assert!(parts.unpartitioned.is_empty());
    let boost = run_detector(parts.boost, SubstreamLabel::Boost, config).expect("boost run");
    let sink = run_detector(parts.sink, SubstreamLabel::Sink, config).expect("sink run");
    Run {
        stream,
        boost,
        sink,
    }
}

/// Nearest-rank percentile.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

fn sketch_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let keys: Vec<String> = (0..500).map(|i| format!("key-{i}")).collect();
    let inserts: Vec<usize> = (0..100_000)
        .map(|_| rng.random_range(0..keys.len()))
        .collect();
    let mut exact = vec![0.0; keys.len()];
    for &k in &inserts {
        exact[k] += 1.0;
    }
    // Collision-free regime: every key isolated in at least one row.
    let geometry = (0..)
        .map(|seed| SketchGeometry {
            rows: 8,
            cols: 4096,
            seed,
        })
        .find(|g| collision_free(*g, &keys))
        .expect("some seed is collision-free");
    let mut wide = CountMinSketch::new(geometry);
    let mut narrow = CountMinSketch::new(SketchGeometry {
        rows: 3,
        cols: 1,
        seed: 9,
    });
    for &k in &inserts {
        wide.insert(keys[k].as_bytes(), 1.0);
        narrow.insert(keys[k].as_bytes(), 1.0);
    }
    let wrong = (0..keys.len())
        .filter(|&k| wide.estimate(keys[k].as_bytes()) != exact[k])
        .count();
    let total = inserts.len() as f64;
    let narrow_ok = keys.iter().all(|k| narrow.estimate(k.as_bytes()) == total);
    outcome(
        wrong == 0 && narrow_ok,
        format!(
            "{wrong}/500 wide-sketch mismatches (8x4096, seed {}), cols=1 total-count {}",
            geometry.seed,
            if narrow_ok { "ok" } else { "wrong" }
        ),
    )
}

fn detector_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut edges_total, mut score_mismatch, mut burst_mismatch, mut retries) = (0, 0, 0, 0);
    for _ in 0..100 {
        let (spec, mut config) = random_case(&mut rng);
        let apps: Vec<String> = (0..spec.n_apps).map(SynthSpec::app_id).collect();
        while !collision_free(config.sketch, &apps) {
            config.sketch.seed += 1;
            retries += 1;
        }
        let edges = generate(&spec).expect("valid spec").edges;
        if edges.len() > 10_000 {
            return outcome(false, format!("generated {} edges (> 10^4)", edges.len()));
        }
        edges_total += edges.len();
        let stream = ticks_of(&edges, &config);
        let (records, events) = run_detector(edges, SubstreamLabel::Boost, &config).expect("run");
        let want = exact_scores(&stream, params(&config));
        score_mismatch += records
            .iter()
            .zip(&want)
            .filter(|(r, w)| r.score.to_bits() != w.to_bits())
            .count();
        let mut got: Vec<_> = events
            .iter()
            .map(|e| (e.app_id.clone(), e.prior_tick.get(), e.burst_tick.get()))
            .collect();
        got.sort_by(|a, b| (a.2, &a.0).cmp(&(b.2, &b.0)));
        if got != brute_force_bursts(&stream, params(&config)) {
            burst_mismatch += 1;
        }
    }
    outcome(
        score_mismatch == 0 && burst_mismatch == 0,
        format!(
            "{edges_total} edges over 100 streams: {score_mismatch} score mismatches (bitwise), \
             {burst_mismatch} streams with burst mismatches, {retries} seed bumps"
        ),
    )
}

fn injection_recall() -> Outcome {
    let config = DetectorConfig::default();
    let (mut fired, mut above) = (0, 0);
    for seed in 0..100 {
        let spec = background_spec(seed, vec![boost_burst("a7", 11, 100, ScoreMode::Boost)]);
        let run = run_both(&spec, &config);
        let (records, events) = &run.boost;
        if events
            .iter()
            .any(|e| e.app_id == "a7" && e.burst_tick == TickIndex::new(11).unwrap())
        {
            fired += 1;
        }
        let (injected, mut background): (Vec<&AnomalyRecord>, Vec<&AnomalyRecord>) = records
            .iter()
            .partition(|r| run.stream.is_injected(&r.edge.review_id));
        let mean = injected.iter().map(|r| r.score).sum::<f64>() / injected.len() as f64;
        let mut bg: Vec<f64> = background.drain(..).map(|r| r.score).collect();
        if mean > percentile(&mut bg, 0.99) {
            above += 1;
        }
    }
    outcome(
        fired >= 99 && above >= 95,
        format!("burst fired in {fired}/100 seeds (need 99), injected mean > background p99 in {above}/100 (need 95)"),
    )
}

fn false_positives() -> Outcome {
    let config = DetectorConfig {
        burst_factor: 4.0,
        ..DetectorConfig::default()
    };
    let (mut events, mut pairs) = (0usize, 0usize);
    for seed in 0..100 {
        let spec = background_spec(1000 + seed, Vec::new());
        let run = run_both(&spec, &config);
        events += run.boost.1.len() + run.sink.1.len();
        // Every (app, tick) with a predecessor, on both sub-streams.
        pairs += 2 * spec.n_apps * (spec.ticks as usize - 1);
    }
    let rate = events as f64 / pairs as f64;
    outcome(
        rate <= 0.01,
        format!(
            "{events} firings over {pairs} (app, tick) pairs = {:.3}% (limit 1%)",
            100.0 * rate
        ),
    )
}

fn anti_poisoning() -> Outcome {
    let filtered = DetectorConfig::default();
    let unfiltered = DetectorConfig {
        filter_threshold: f64::INFINITY,
        ..filtered.clone()
    };
    let peak = |records: &[AnomalyRecord], tick: u64| {
        records
            .iter()
            .filter(|r| r.edge.app_id == "a7" && r.tick.get() == tick)
            .map(|r| r.score)
            .fold(0.0, f64::max)
    };
    let (mut ok, mut engaged, mut strict) = (0, 0, 0);
    for seed in 0..100 {
        let spec = background_spec(
            2000 + seed,
            vec![
                boost_burst("a7", 10, 300, ScoreMode::Boost),
                boost_burst("a7", 20, 300, ScoreMode::Boost),
            ],
        );
        let with = run_both(&spec, &filtered).boost.0;
        let without = run_both(&spec, &unfiltered).boost.0;
        let (pf, pu) = (peak(&with, 20), peak(&without, 20));
        if pf >= pu {
            ok += 1;
        }
        if pf > pu {
            strict += 1;
        }
        if peak(&with, 10) > filtered.filter_threshold {
            engaged += 1;
        }
    }
    outcome(
        ok == 100,
        format!(
            "second-burst peak filtered >= unfiltered in {ok}/100 seeds \
             (strictly greater in {strict}; filter engaged on first burst in {engaged})"
        ),
    )
}

fn boost_over_sink() -> Outcome {
    let config = DetectorConfig::default();
    let mut ok = 0;
    let mut worst_p: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut apps: Vec<usize> = (0..20).collect();
        for i in 0..4 {
            let j = rng.random_range(i..apps.len());
            apps.swap(i, j);
        }
        // One tick for all four bursts: burst scores grow with the tick index, so
        // only the 3:1 load differs between the sub-streams.
        let tick = rng.random_range(5..=25);
        let injections = apps[..4]
            .iter()
            .enumerate()
            .map(|(i, &app)| {
                let mode = if i < 3 {
                    ScoreMode::Boost
                } else {
                    ScoreMode::Sink
                };
                boost_burst(&SynthSpec::app_id(app), tick, 100, mode)
            })
            .collect();
        let run = run_both(&background_spec(3000 + seed, injections), &config);
        let a: Vec<f64> = run.boost.0.iter().map(|r| r.score).collect();
        let b: Vec<f64> = run.sink.0.iter().map(|r| r.score).collect();
        if let Ok(w) = welch_t(&a, &b) {
            worst_p = worst_p.max(w.p_one_sided);
            if w.t > 0.0 && w.p_one_sided < 0.01 {
                ok += 1;
            }
        }
    }
    outcome(
        ok >= 95,
        format!(
            "t > 0 and one-sided p < 0.01 in {ok}/100 seeds (need 95); largest p {worst_p:.2e}"
        ),
    )
}

fn pair_ground_truth() -> Outcome {
    let config = DetectorConfig::default();
    let tau = 0.95;
    let (mut clusters_seen, mut clusters_ok, mut worst) = (0, 0, 1.0f64);
    let mut control_pairs = 0;
    for seed in 0..20 {
        let spec = background_spec(
            4000 + seed,
            vec![boost_burst("a7", 11, 100, ScoreMode::Boost)],
        );
        let run = run_both(&spec, &config);
        let (records, events) = &run.boost;
        let clusters = collect_clusters(events, records).expect("consistent run");
        for c in clusters
            .iter()
            .filter(|c| c.app_id == "a7" && c.tick.get() == 11)
        {
            let analysis = near_identical_pairs(c, &LexicalEmbedder, tau).expect("lexical");
            let frac = analysis.flagged.len() as f64 / c.size() as f64;
            clusters_seen += 1;
            worst = worst.min(frac);
            if frac >= 0.9 {
                clusters_ok += 1;
            }
        }
        // Control: background reviews carry independent random texts.
        let members: Vec<AnomalyRecord> = records
            .iter()
            .filter(|r| !run.stream.is_injected(&r.edge.review_id))
            .take(100)
            .cloned()
            .collect();
        let control = SuspiciousCluster {
            app_id: "control".into(),
            substream: SubstreamLabel::Boost,
            tick: TickIndex::FIRST,
            mean_score: 0.0,
            members,
        };
        control_pairs += near_identical_pairs(&control, &LexicalEmbedder, tau)
            .expect("lexical")
            .pairs
            .len();
    }
    outcome(
        clusters_seen == 20 && clusters_ok == 20 && control_pairs == 0,
        format!(
            "{clusters_ok}/{clusters_seen} injected clusters with flagged/size >= 0.9 (min {worst:.3}); \
             control clusters: {control_pairs} pairs"
        ),
    )
}

fn welch_oracle() -> Outcome {
    let w = welch_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).expect("valid samples");
    let same = welch_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).expect("valid samples");
    let pass = (w.t + 3.674).abs() <= 0.001 && (w.df - 4.0).abs() <= 0.001 && same.t == 0.0;
    outcome(
        pass,
        format!(
            "t = {:.4}, df = {:.4}; identical samples t = {}",
            w.t, w.df, same.t
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = background_spec(5, vec![boost_burst("a7", 11, 100, ScoreMode::Boost)]);
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_lockstep");
    let run = |args: &[&dyn AsRef<std::ffi::OsStr>]| {
        let status = Command::new(bin)
            .args(args.iter().map(|a| a.as_ref()))
            .stderr(std::process::Stdio::null())
            .status()
            .expect("spawn lockstep");
        status.success()
    };
    let (reviews, truth, catalog) = (
        dir.path().join("r.jsonl"),
        dir.path().join("t.jsonl"),
        dir.path().join("c.csv"),
    );
    if !run(&[
        &"synth",
        &"--spec",
        &spec_path,
        &"--out",
        &reviews,
        &"--truth",
        &truth,
        &"--catalog",
        &catalog,
    ]) {
        return outcome(false, "synth failed");
    }
    let outs = [dir.path().join("run1"), dir.path().join("run2")];
    for out in &outs {
        if !run(&[
            &"pipeline",
            &"--reviews",
            &reviews,
            &"--catalog",
            &catalog,
            &"--out-dir",
            out,
        ]) {
            return outcome(false, "pipeline failed");
        }
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap_or_default();
    let mut differing = Vec::new();
    for f in ["scores.csv", "events.jsonl", "clusters.json"] {
        let a = read(&outs[0], f);
        if a.is_empty() || a != read(&outs[1], f) {
            differing.push(f);
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "scores.csv, events.jsonl, clusters.json byte-identical across reruns".to_string()
        } else {
            format!("differing or empty: {differing:?}")
        },
    )
}

/// Set LOCKSTEP_DATASET_REVIEWS and LOCKSTEP_DATASET_CATALOG to run this check.
fn dataset_summary() -> Option<Outcome> {
    let reviews = std::env::var_os("LOCKSTEP_DATASET_REVIEWS")?;
    let catalog = std::env::var_os("LOCKSTEP_DATASET_CATALOG")?;
    let open = |p: &std::ffi::OsStr| std::fs::File::open(p).map(std::io::BufReader::new);
    let (Ok(r), Ok(c)) = (open(&reviews), open(&catalog)) else {
        return Some(outcome(false, "dataset files unreadable"));
    };
    let parsed =
        parse_reviews(r, InputFormat::from_path(Path::new(&reviews))).expect("read reviews");
    let apps = parse_apps(c).expect("read catalog");
    let s = summarize(&parsed.edges, &apps.catalog);
    let pass = s.reviews == 319_198 && s.distinct_reviewers == 301_188 && s.apps == 60;
    Some(outcome(
        pass,
        format!(
            "{} reviews, {} reviewers, {} apps; boost {} (published 215759), sink {} (published 103439), \
             {} parse errors",
            s.reviews,
            s.distinct_reviewers,
            s.apps,
            s.boost,
            s.sink,
            parsed.errors.len()
        ),
    ))
}

fn main() -> ExitCode {
    // Tolerate libtest-style flags passed through by `cargo test`.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: Vec<Criterion> = vec![
        (
            "sketch-oracle",
            Box::new(|| timed(Some(Duration::from_secs(5)), sketch_oracle)),
        ),
        ("detector-oracle", Box::new(|| timed(None, detector_oracle))),
        (
            "injection-recall",
            Box::new(|| timed(Some(Duration::from_secs(30)), injection_recall)),
        ),
        (
            "false-positive-control",
            Box::new(|| timed(None, false_positives)),
        ),
        (
            "filtering-anti-poisoning",
            Box::new(|| timed(None, anti_poisoning)),
        ),
        ("boost-over-sink", Box::new(|| timed(None, boost_over_sink))),
        (
            "pair-ground-truth",
            Box::new(|| timed(None, pair_ground_truth)),
        ),
        ("welch-unit-oracle", Box::new(|| timed(None, welch_oracle))),
        ("determinism", Box::new(|| timed(None, determinism))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let out = check();
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    match dataset_summary() {
        Some(out) => {
            if !out.pass {
                failed += 1;
            }
            println!(
                "{} dataset-summary: {}",
                if out.pass { "PASS" } else { "FAIL" },
                out.detail
            );
        }
        None => println!(
            "SKIP dataset-summary: LOCKSTEP_DATASET_REVIEWS / LOCKSTEP_DATASET_CATALOG not set"
        ),
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
