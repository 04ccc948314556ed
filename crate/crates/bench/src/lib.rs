//! Benchmark fixtures; the benchmarks themselves live in `benches/`.
