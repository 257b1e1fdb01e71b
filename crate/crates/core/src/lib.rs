//! Numerical construction of stochastic flows for SDEs
//!
//! ```text
//! dX_t = b(X_t) dt + σ(X_t) dW_t
//! ```
//!
//! with a drift `b` that is only locally Hölder continuous and may grow
//! linearly. The drift is removed by the change of variables `Ψ = I + ψ`,
//! where `ψ` solves the resolvent system `λψ − Lψ = b` (computed here by
//! Monte Carlo). The conjugated SDE for `Y = Ψ(X)` has Lipschitz
//! coefficients, so the flow and its spatial derivative can be simulated
//! there and mapped back. Semigroup gradients are estimated with the
//! Bismut–Elworthy–Li weight.
//!
//! Module map:
//!
//! * [`coeffs`]: drift and diffusion models, presets, empirical checks of
//!   the standing hypotheses.
//! * [`mollify`]: `b ∗ ϑ_n` smoothing with analytic kernel derivatives.
//! * [`paths`]: refinement-consistent Brownian drivers, Euler–Maruyama and
//!   the first variation equation.
//! * [`resolvent`]: Feynman–Kac solution of the resolvent system and the
//!   λ search.
//! * [`zvonkin`]: the transform, its inverse, conjugated flows, stability.
//! * [`bel`]: semigroup, BEL and finite-difference gradients, decay probe.

// `!(x > 0.0)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas.
#![allow(clippy::needless_range_loop)]

pub mod bel;
pub mod coeffs;
pub mod error;
pub mod linalg;
pub mod mollify;
pub mod paths;
pub mod resolvent;
pub mod seed;
pub mod stats;
pub mod zvonkin;

pub use bel::{GradientEstimate, Observable};
pub use coeffs::{DiffusionSpec, DriftField, HypothesisReport};
pub use error::{FlowError, Result};
pub use mollify::{MollifiedDrift, MollifierKernel};
pub use paths::{BrownianDriver, PathRecord, TimeGrid, VariationRecord};
pub use resolvent::{ResolventConfig, ResolventSolution};
pub use zvonkin::{ConjugatedCoeffs, TransformConfig, ZvonkinTransform};
