//! Count-min sketch with real-valued, decayable counters.

use serde::{Deserialize, Serialize};

/// Sketch dimensions plus the base seed the per-row hash seeds are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchGeometry {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl Default for SketchGeometry {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 1024,
            seed: 0x5eed_1ab5,
        }
    }
}

impl SketchGeometry {
    /// Per-row hash seeds, one splitmix64 step per row.
    pub fn row_seeds(&self) -> Vec<u64> {
        let mut state = self.seed;
        (0..self.rows).map(|_| splitmix64(&mut state)).collect()
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded FNV-1a followed by a splitmix finalizer.
fn hash_key(key: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &byte in key {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut state = h;
    splitmix64(&mut state)
}

#[derive(Debug, Clone)]
pub struct CountMinSketch {
    rows: usize,
    cols: usize,
    seeds: Vec<u64>,
    /// Row-major `rows * cols` counters.
    counters: Vec<f64>,
}

impl CountMinSketch {
    /// # Panics
    /// If either dimension is zero.
    pub fn new(geometry: SketchGeometry) -> Self {
        assert!(
            geometry.rows > 0 && geometry.cols > 0,
            "sketch dimensions must be positive"
        );
        Self {
            rows: geometry.rows,
            cols: geometry.cols,
            seeds: geometry.row_seeds(),
            counters: vec![0.0; geometry.rows * geometry.cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Number of allocated counters; fixed for the lifetime of the sketch.
    pub fn counter_len(&self) -> usize {
        self.counters.len()
    }

    /// Column of `key` in `row`.
    pub fn bucket(&self, row: usize, key: &[u8]) -> usize {
        (hash_key(key, self.seeds[row]) % self.cols as u64) as usize
    }

    pub fn insert(&mut self, key: &[u8], weight: f64) {
        debug_assert!(weight >= 0.0, "negative sketch weight");
        for row in 0..self.rows {
            let idx = row * self.cols + self.bucket(row, key);
            self.counters[idx] += weight;
        }
    }

    pub fn estimate(&self, key: &[u8]) -> f64 {
        (0..self.rows)
            .map(|row| self.counters[row * self.cols + self.bucket(row, key)])
            .fold(f64::INFINITY, f64::min)
    }

    /// Multiplies every counter by `alpha`.
    pub fn decay(&mut self, alpha: f64) {
        debug_assert!((0.0..=1.0).contains(&alpha), "decay factor outside [0, 1]");
        if alpha == 1.0 {
            return;
        }
        if alpha == 0.0 {
            self.clear();
            return;
        }
        for c in &mut self.counters {
            *c *= alpha;
        }
    }

    pub fn clear(&mut self) {
        self.counters.fill(0.0);
    }

    pub fn counters(&self) -> &[f64] {
        &self.counters
    }
}
