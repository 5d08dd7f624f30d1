// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation_norm;
pub mod constants;
pub mod dynamics;
pub mod harness;
pub mod numeric;
pub mod weight_norm;
