//! Criterion benchmarks for `qbm-core`; see `benches/`.
