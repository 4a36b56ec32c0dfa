//! Numerical laboratory for very weak solutions of asymptotically linear
//! elliptic systems on 2-D P1 finite elements.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`] structured triangulations, piecewise fields, gradients,
//!   weighted quadrature, the text dump format and the boundary reflection;
//! * [`weights`] discrete Hardy–Littlewood maximal operators and the
//!   Muckenhoupt toolkit;
//! * [`truncation`] the Lipschitz truncation operator;
//! * [`operators`] nonlinear operator specifications and sampled structural
//!   certificates;
//! * [`solvers`] the linear Ã-solver, the comparison fixed point for the
//!   nonlinear problem, right-hand-side truncation and point loads;
//! * [`lab`] estimate verification, biting sets and div–curl experiments.

pub mod error;
pub mod lab;
pub mod mesh;
pub mod operators;
pub mod report;
pub mod solvers;
pub mod truncation;
pub mod weights;

pub use error::{Error, Result};

/// A point of the plane.
pub type Point = [f64; 2];
