//! Criterion benchmarks for the deepdp kernels live in `benches/`.
