//! Obfuscation laboratory for a compact ARM-flavored mini instruction set.
//!
//! The crate has three halves that meet in the middle:
//!
//! - [`obf`] re-implements the three classic O-LLVM passes (instruction
//!   substitution, bogus control flow, control-flow flattening) over the
//!   mini ISA and emits ground truth alongside the transformed program.
//! - [`detect`], [`inssub_deob`], [`bcf_deob`], [`symexec`] and [`cff_deob`]
//!   form the deobfuscation pipeline: fingerprinting, taint-guided pattern
//!   rewrites, opaque-predicate resolution, and flow-sensitive chopped
//!   symbolic execution that rebuilds the original control flow.
//! - [`metrics`] scores recovery quality: opcode-vector Euclidean distance,
//!   assignment-based CFG edit distance / similarity, and a fixed
//!   1,500-input I/O equivalence harness backed by the [`ir`] interpreter.

pub mod bcf_deob;
pub mod cff_deob;
pub mod detect;
pub mod error;
pub mod inssub_deob;
pub mod ir;
pub mod metrics;
pub mod obf;
pub mod symexec;

pub use error::{Error, Result};
