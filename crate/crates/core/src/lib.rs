//! Streamed generalized attention.
//!
//! Attention whose row normalization is any normalized operation
//! `N(x)_i = a1(x_i) / b(sum_j a2(x_j))` can be computed in a single fused
//! pass over key/value chunks, keeping only an `(o, z)` accumulator per query
//! row. This crate provides:
//!
//! * [`tensor`]: row-major dense tensors, matmul, binary16 rounding.
//! * [`normalizers`]: the `(a1, a2, b)` triple with SoftMax, spherical (L2)
//!   and signed-L1 instances.
//! * [`streaming`]: the `(o, z)` accumulator, merge and finalize.
//! * [`attention`]: naive and streamed generalized attention, grouped-query
//!   multi-head attention, multiplicity-weighted keys.
//! * [`grn`]: a gene-regulatory-network transformer built on spherical
//!   attention.
//! * [`costmodel`]: byte, FLOP and special-function counts for naive vs
//!   streamed attention.
//! * [`io`]: the `NCT1` tensor container, parameter manifests and CSV export.

pub mod attention;
pub mod costmodel;
pub mod error;
pub mod grn;
pub mod io;
pub mod normalizers;
pub mod rng;
pub mod streaming;
pub mod tensor;

pub use error::{Error, Result};
