//! A miniature pre-norm decoder transformer with hand-written backward pass.
//!
//! Training runs in `f32`; the same code instantiated at `f64` backs the
//! finite-difference gradient check.

mod adapter;
mod gradcheck;
mod io;
mod model;
mod params;
mod schedule;
mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use adapter::adapter_merge;
pub use gradcheck::{grad_check, GradCheckReport, GradMutation};
pub use io::{
    export_attention, read_attention, read_loss_curve, write_attention, write_loss_curve,
    AttentionDump, Checkpoint,
};
pub use model::{
    batch_example_losses, batch_loss_and_grad, cross_entropy, forward, loss, loss_and_grad,
    nep_targets, Example, ForwardOutput, Gradients,
};
pub use params::{AdapterSet, LayerAdapter, LayerWeights, ModelConfig, ModelParams, Weights};
pub use schedule::lr_at;
pub use train::{
    evaluate_nep_loss, mlm_example, train, train_with_hook, CurvePoint, TrainConfig, TrainOutput,
};

/// Floating-point element type of model tensors.
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + Default
    + PartialOrd
    + Send
    + Sync
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Neg<Output = Self>
    + Sum
    + Serialize
    + DeserializeOwned
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn c(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMaskMode {
    /// Position `t` attends only to positions `<= t`.
    #[default]
    Causal,
    /// Full attention, trained with masked-token prediction.
    BidirectionalMlm,
}
