//! Criterion benchmarks for the `ctxcrf` hot paths; see `benches/`.
