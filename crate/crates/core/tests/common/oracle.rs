//! Exact hash-map reimplementation of the detector, used as a test oracle.
//!
//! Counts are kept per app with no hashing, so it agrees with the sketch-backed
//! detector exactly whenever the sketch has no collisions. Arithmetic is done in
//! the same order (decay by `alpha^gap`, same score expression) so agreement is
//! bit-for-bit rather than approximate.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Copy)]
pub struct OracleParams {
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
    pub c_min: f64,
}

/// `(app, prior_tick, burst_tick)` for every burst the oracle detects.
pub type BurstKey = (String, u64, u64);

fn score(a: f64, s: f64, t: u64) -> f64 {
    if t <= 1 || s <= 0.0 {
        return 0.0;
    }
    let t = t as f64;
    let diff = a - s / t;
    diff * diff * t * t / (s * (t - 1.0))
}

/// Merges a finished tick into the history: the prior mean if its last score exceeded theta.
fn close_tick<'a>(
    t: u64,
    theta: f64,
    this_tick: &mut BTreeMap<&'a str, (u64, f64)>,
    history: &mut HashMap<&'a str, f64>,
) {
    for (app, (count, last)) in std::mem::take(this_tick) {
        let h = history.entry(app).or_insert(0.0);
        let merged = if last > theta && t >= 2 {
            *h / (t - 1) as f64
        } else {
            count as f64
        };
        *h += merged;
    }
}

/// Scores a time-sorted `(app, tick)` stream with exact per-app counters.
pub fn exact_scores(stream: &[(String, u64)], p: OracleParams) -> Vec<f64> {
    let mut decayed: HashMap<&str, f64> = HashMap::new();
    let mut history: HashMap<&str, f64> = HashMap::new();
    // app -> (edges this tick, score of the latest edge)
    let mut this_tick: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
    let mut tick: Option<u64> = None;
    let mut out = Vec::with_capacity(stream.len());

    for (app, t) in stream {
        let (app, t) = (app.as_str(), *t);
        if let Some(cur) = tick {
            assert!(t >= cur, "oracle input must be time-sorted");
            if t > cur {
                close_tick(cur, p.theta, &mut this_tick, &mut history);
                let factor = p.alpha.powi((t - cur) as i32);
                for v in decayed.values_mut() {
                    *v = if factor == 0.0 { 0.0 } else { *v * factor };
                }
            }
        }
        tick = Some(t);
        let entry = this_tick.entry(app).or_insert((0, 0.0));
        entry.0 += 1;
        let a = {
            let d = decayed.entry(app).or_insert(0.0);
            *d += 1.0;
            *d
        };
        let s = history.get(app).copied().unwrap_or(0.0) + entry.0 as f64;
        let sc = score(a, s, t);
        entry.1 = sc;
        out.push(sc);
    }
    out
}

/// Brute force over per-(app, tick) counts: every `(app, n+1)` with a burst
/// `c(n+1) / max(c(n), c_min) > beta`, in burst-tick then app order.
pub fn brute_force_bursts(stream: &[(String, u64)], p: OracleParams) -> Vec<BurstKey> {
    let mut counts: BTreeMap<(u64, &str), f64> = BTreeMap::new();
    for (app, t) in stream {
        *counts.entry((*t, app.as_str())).or_default() += 1.0;
    }
    let mut out = Vec::new();
    for (&(t, app), &c) in &counts {
        if t < 2 {
            continue;
        }
        let prior = counts.get(&(t - 1, app)).copied().unwrap_or(0.0);
        let denom = prior.max(p.c_min);
        let ratio = if denom > 0.0 {
            c / denom
        } else {
            f64::INFINITY
        };
        if ratio > p.beta {
            out.push((app.to_string(), t - 1, t));
        }
    }
    out
}
