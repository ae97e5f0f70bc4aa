//! Benchmarks for `lockstep-core`; see `benches/throughput.rs`.
