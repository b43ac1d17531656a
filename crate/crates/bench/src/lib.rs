//! Criterion benchmarks for the flashlab kernels live in `benches/`.
