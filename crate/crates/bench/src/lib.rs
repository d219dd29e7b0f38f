//! Criterion benchmarks for core kernels and networks live in `benches/`.
