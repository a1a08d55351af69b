//! Criterion benchmarks for the compute kernels live in `benches/`; this
//! library target is empty.
