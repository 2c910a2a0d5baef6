//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Var`] evaluates
//! eagerly and records what it needs for the backward pass. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns
//! [`Grads`] for every node that (transitively) depends on a leaf created with
//! `requires_grad = true`.
//!
//! The engine is generic over [`Real`] so the same loss code runs in `f32`
//! during training and in `f64` under finite-difference checks.

mod conv;
mod graph;
mod norm;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use conv::Conv2dConfig;
pub use graph::{Grads, Graph, Var};
pub use norm::BatchStats;

/// Floating point element type usable by the engine.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
{
    /// Short dtype tag stored in checkpoints.
    const DTYPE: &'static str;
    /// Byte width of one element.
    const WIDTH: usize;

    fn lit(v: f64) -> Self;

    fn write_le(values: &[Self], out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    }
}
