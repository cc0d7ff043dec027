//! Toolkit for stochastic differential-algebraic equations (SDAEs)
//!
//! ```text
//! dx = f(x,u) dt + sigma(x,u) dW,    g(x,u) = -int Gamma(x,u) dW
//! ```
//!
//! with state `x` in R^n, algebraic variable `u` in R^m, p constraints and a
//! d-dimensional Wiener process. The crate classifies a problem (index 1,
//! high index, uncontrollable noise, ill-posed), reduces index-1 problems to
//! plain SDEs, reduces the index of high-index problems, checks the
//! contraction condition for local existence, and builds two approximate
//! solvers for high-index problems: a characteristic-function construction
//! that keeps the constraint inside an epsilon band, and a stabilizing gain
//! that bounds the probability of leaving that band. All simulation is
//! fixed-step Euler-Maruyama driven by counter-based seeded noise.
//!
//! Start with [`problem::builtin`] or [`problem::load_problem`], then
//! [`problem::classify`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected; the `Expr`
// constructors are named after the operations they build.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::needless_range_loop)]

pub mod bounded;
pub mod cli;
pub mod error;
pub mod expr;
pub mod index1;
pub mod integrator;
pub mod linalg;
pub mod montecarlo;
pub mod picard;
pub mod problem;
pub mod reduction;
pub mod rng;
pub mod unit_prob;
pub mod wellposed;

pub use error::{Error, Result};
