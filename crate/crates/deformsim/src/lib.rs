//! Deformable-attention kernels and a schedule-aware cache-locality simulator.
//!
//! The crate models the memory behaviour of multi-scale deformable attention
//! (MSDeformAttn) workloads end to end:
//!
//! - [`attention`] - floating-point reference and fused single-pass kernels,
//!   including bilinear sampling and per-query softmax.
//! - [`fixedpoint`] - a bit-true mixed-precision (W8A8->A18 / W16A8->A28)
//!   re-implementation of the fused pass with a Padé-based exponential.
//! - [`scheduler`] - distance-based out-of-order query ordering (greedy L1
//!   nearest neighbour inside a lookup window) plus a cyclic bitonic sorter
//!   cost model.
//! - [`cache`] - trace-driven cache simulation: analytic stall time, a
//!   direct-mapped baseline, and a ping-pong region-prefetch model with
//!   stall/energy accounting.
//! - [`workload`] - synthetic workload generators, top-k query pruning, and
//!   the gather/scatter index remap.
//!
//! All functions are pure over immutable inputs and deterministic for a fixed
//! seed; independent batches or simulation runs can execute in parallel.

pub mod attention;
pub mod cache;
pub mod error;
pub mod fixedpoint;
pub mod scheduler;
pub mod workload;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
