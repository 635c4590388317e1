//! Criterion benchmarks for `ovseg`; the benchmarks live under `benches/`.
