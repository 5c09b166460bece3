//! Criterion benchmarks for the authorization hot path; see `benches/`.
