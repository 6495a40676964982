//! Criterion benchmarks for `deffa-core`; see `benches/`.
