//! Numerical study of one-dimensional Hamilton-Jacobi equations
//! `u_t + 1/2 |u_x|^2 + V(x/eps) = 0` whose potential `V(x) = -U(xi x)` is the
//! trace of a nonnegative function on a higher-dimensional torus along a
//! Diophantine direction `xi`.
//!
//! The crate computes the effective (homogenized) Hamiltonian and Lagrangian,
//! exact correctors, generalized characteristics, oscillatory and homogenized
//! solutions, and runs the empirical rate experiments that compare measured
//! convergence exponents against their predicted values.
//!
//! Module map:
//! - [`torus`]: quasi-periodic potentials, prototype suspensions, Diophantine
//!   estimation.
//! - [`quad`]: deterministic adaptive quadrature (torus, line, Sobolev norms).
//! - [`effective`]: effective Hamiltonian/Lagrangian and correctors.
//! - [`ergodic`]: Birkhoff averages, quantitative equidistribution, inclusion
//!   lengths.
//! - [`dynamics`]: characteristics at fixed energy and velocity-rate fits.
//! - [`homog`]: oscillatory vs. homogenized solutions, a monotone finite
//!   difference reference solver, and the rate sweep.

pub mod dynamics;
pub mod effective;
pub mod ergodic;
pub mod homog;
pub mod quad;
pub mod torus;
