//! Benchmarks for the task runtime: scheduling overhead on spin tasks
//! (independent tasks and a dependency grid), a distributed blocked matrix
//! product, and a distributed blocked Cholesky factorization. Each checks
//! its own result.

pub mod blocks;
pub mod cholesky;
pub mod config;
pub mod error;
pub mod gemm2d;
pub mod launch;
pub mod micro;
pub mod output;
pub mod spin;

pub use config::{run, BenchConfig, BenchKind, Report, TransportKind};
pub use error::{BenchError, Result};
