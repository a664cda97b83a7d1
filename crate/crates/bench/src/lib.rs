//! Benchmarks for the filter/smoother live in `benches/`.
