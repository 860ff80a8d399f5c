//! Core library for desk-scale lifelong model editing with a
//! mixture-of-experts adaptor.
//!
//! Everything in this crate is pure computation over heap-allocated
//! buffers: dense `f64` kernels, a tiny decoder-only transformer that is
//! frozen after pretraining, a bypass MoE adaptor that grows one expert
//! per edit batch, editing-order planners, and the reliability /
//! generality / locality metric suite. File formats, CSV reports and the
//! command-line driver live in the companion `moedit` crate.
//!
//! The crate is `no_std` (with `alloc`) and routes all transcendental
//! math through `libm`, so identical seeds produce bit-identical runs on
//! every platform.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adaptor;
pub mod backbone;
pub mod dataset;
pub mod editing;
pub mod eval;
pub mod numerics;
pub mod planner;

pub(crate) mod math;
