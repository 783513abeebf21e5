//! Library half of the `scentree` binary: the benchmark experiments live
//! here so integration tests can drive them in-process.

pub mod experiments;
