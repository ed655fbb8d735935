//! Criterion benchmarks for the calidro core crate; see `benches/`.
