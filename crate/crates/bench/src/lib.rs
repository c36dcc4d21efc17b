//! Criterion benches for the synthesis pipeline and the numerical kernels.
//! Run with `cargo bench -p darkforge-bench`.
