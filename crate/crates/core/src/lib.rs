// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Analysis toolkit for scalar nonlinear difference equations with additive
//! perturbations and feedback controllers.

pub mod cli;
pub mod control;
pub mod equilibria;
pub mod expr;
pub mod stability;
pub mod system;
