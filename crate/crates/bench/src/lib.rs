//! Criterion benchmarks for the hot paths of `gea-core`; run with `cargo bench -p gea-bench`.
