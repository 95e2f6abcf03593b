//! Criterion benchmarks for the separator; see `benches/`.
