//! Random synthetic streams and configs for oracle comparisons.

#![allow(dead_code)]

use super::oracle::OracleParams;
use lockstep_core::detector::DetectorConfig;
use lockstep_core::ingest::{to_tick, ReviewEdge};
use lockstep_core::sketch::{CountMinSketch, SketchGeometry};
use lockstep_core::synth::{Injection, ScoreMode, SynthSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WIDE: SketchGeometry = SketchGeometry {
    rows: 4,
    cols: 8192,
    seed: 0xfeed,
};

pub fn params(c: &DetectorConfig) -> OracleParams {
    OracleParams {
        alpha: c.decay,
        theta: c.filter_threshold,
        beta: c.burst_factor,
        c_min: c.min_prior,
    }
}

/// Every app owns its bucket in at least one row, which makes the min estimate exact.
pub fn collision_free(geometry: SketchGeometry, apps: &[String]) -> bool {
    let sketch = CountMinSketch::new(geometry);
    apps.iter().all(|app| {
        (0..geometry.rows).any(|row| {
            let b = sketch.bucket(row, app.as_bytes());
            apps.iter()
                .filter(|other| *other != app)
                .all(|other| sketch.bucket(row, other.as_bytes()) != b)
        })
    })
}

pub fn assert_collision_free(geometry: SketchGeometry, apps: &[String]) {
    assert!(
        collision_free(geometry, apps),
        "sketch collides for some app; pick another seed"
    );
}

pub fn ticks_of(edges: &[ReviewEdge], config: &DetectorConfig) -> Vec<(String, u64)> {
    edges
        .iter()
        .map(|e| {
            let t = to_tick(e.timestamp, config.origin, config.period).unwrap();
            (e.app_id.clone(), t.get())
        })
        .collect()
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (SynthSpec, DetectorConfig) {
    let n_apps = rng.random_range(1..=60);
    let ticks = rng.random_range(1..=50);
    let max_rate = (4000.0 / (n_apps as f64 * ticks as f64)).min(15.0);
    let n_injections = rng.random_range(0..=3);
    let injections = (0..n_injections)
        .map(|_| Injection {
            app_id: SynthSpec::app_id(rng.random_range(0..n_apps)),
            tick: rng.random_range(1..=ticks),
            n_edges: rng.random_range(0..=400),
            n_reviewers_used: rng.random_range(1..=30),
            score_mode: if rng.random_bool(0.5) {
                ScoreMode::Boost
            } else {
                ScoreMode::Sink
            },
            reviewer_ids: None,
        })
        .collect();
    let spec = SynthSpec {
        n_apps,
        n_reviewers: 300,
        ticks,
        background_rate: rng.random_range(0.0..max_rate),
        injections,
        seed: rng.random(),
        origin: 0,
        period: 86_400,
    };
    let config = DetectorConfig {
        decay: *[0.0, 0.3, 0.6, 1.0].get(rng.random_range(0..4)).unwrap(),
        filter_threshold: *[5.0, 50.0, 1000.0, f64::INFINITY]
            .get(rng.random_range(0..4))
            .unwrap(),
        burst_factor: rng.random_range(1.1..5.0),
        min_prior: *[0.0, 1.0, 2.5].get(rng.random_range(0..3)).unwrap(),
        sketch: WIDE,
        ..DetectorConfig::default()
    };
    (spec, config)
}
