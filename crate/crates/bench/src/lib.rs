//! Criterion benchmarks for the numeric kernels and model forward passes; see `benches/`.
