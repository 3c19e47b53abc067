//! Criterion benchmarks for the `blockdep` kernels live in `benches/`.
