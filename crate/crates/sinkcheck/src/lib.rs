//! Entropic optimal transport on discrete measures.
//!
//! The crate runs Sinkhorn's algorithm in log domain and checks, on concrete
//! discretizations, the identities and inequalities that govern its
//! convergence:
//!
//! | quantity | where |
//! |---|---|
//! | softmin operators Ψ, Φ and the iterates (φⁿ, ψⁿ) | [`sinkhorn`] |
//! | Sinkhorn plans π^{n,n}, π^{n+1,n} and their wrong marginals | [`sinkhorn`] |
//! | conditionals, covariance/Hessian identities, Λ estimates | [`diagnostics`] |
//! | KL stability of optimal plans | [`diagnostics::stability_gap`] |
//! | exact W₂² and W_ω for small instances | [`exact_ot`] |
//! | closed-form contraction factors and the Gaussian recursion | [`rate_theory`] |
//!
//! Measures are finite weighted point sets ([`measures::DiscreteMeasure`]) on
//! Euclidean space or the unit sphere; costs come with gradient and Hessian
//! oracles ([`costs::CostModel`]).
//!
//! ```
//! use sinkcheck::costs::{CostModel, Geometry};
//! use sinkcheck::measures::DiscreteMeasure;
//! use sinkcheck::sinkhorn::{solve_reference, EotProblem};
//!
//! let g = Geometry::Euclidean(1);
//! let rho = DiscreteMeasure::uniform(g, vec![vec![0.0], vec![1.0]])?;
//! let nu = DiscreteMeasure::uniform(g, vec![vec![0.0], vec![2.0]])?;
//! let problem = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, 1.0)?;
//! let reference = solve_reference(&problem, 1e-13, 10_000);
//! assert!(reference.converged);
//! # Ok::<(), sinkcheck::Error>(())
//! ```

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costs;
pub mod diagnostics;
mod error;
pub mod exact_ot;
pub mod measures;
pub mod numerics;
pub mod rate_theory;
pub mod sinkhorn;

pub use error::{Error, Result};
