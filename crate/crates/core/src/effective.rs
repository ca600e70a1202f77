//! The effective Hamiltonian, its Legendre transform, and exact correctors.
//!
//! For the mechanical Hamiltonian `H(p, x) = p^2/2 + V(x)` with
//! `V(x) = -U(xi x)` nonpositive, the effective Hamiltonian `Hbar` is flat at
//! zero on `[-p0, p0]` with `p0 = int sqrt(2U)`, and for `|p| > p0` it is the
//! inverse of the strictly increasing momentum map
//! `phi(mu) = int sqrt(2 (mu + U))`, where both integrals run over the torus.
//! A model holds a dyadic table of `(mu, phi(mu), psi(mu))` rows, with
//! `psi = d phi / d mu = int (2 (mu + U))^{-1/2}`, and every exported value is
//! polished against fresh quadratures so the table only serves as a bracket
//! and starting guess.

use crate::ergodic::{fit_linear_model, FitModel, RateFit, ERROR_FLOOR};
use crate::quad::{self, QuadError, QuadratureSpec};
use crate::torus::{Potential, SuspensionKind, TorusError};
use rayon::prelude::*;
use std::error::Error;
use std::fmt;

/// Default upper end of the energy table.
pub const DEFAULT_MU_MAX: f64 = 10.0;
/// Dyadic table size: `mu = 0` plus `mu_max * 2^{-k}` for `k = 58 .. 0`.
const MU_TABLE_LEVELS: usize = 59;
/// Width at which interpolant bisection hands over to secant polish.
const ROOT_BISECTION_WIDTH: f64 = 1e-10;
/// Residual target for inversions: `|phi(mu*) - p| <= RESIDUAL_REL * max(1, |p|)`.
const RESIDUAL_REL: f64 = 1e-8;
/// Extra secant steps allowed when the pinned two do not reach the residual.
const MAX_POLISH_STEPS: usize = 12;

#[derive(Debug)]
pub enum EffectiveError {
    InvalidInput(String),
    /// The requested momentum or energy lies beyond the tabulated range.
    OutOfTable { requested: f64, limit: f64 },
    /// One-sided quantity queried exactly at the edge of the flat part.
    FlatEdge { p0: f64 },
    /// Too few samples rose above the round-off floor to fit a rate.
    FlatSignal { floor: f64 },
    Quad(QuadError),
    Torus(TorusError),
}

impl fmt::Display for EffectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectiveError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            EffectiveError::OutOfTable { requested, limit } => {
                write!(f, "{requested} lies beyond the tabulated range (limit {limit})")
            }
            EffectiveError::FlatEdge { p0 } => {
                write!(f, "quantity is one-sided at the flat-part edge p0 = {p0}")
            }
            EffectiveError::FlatSignal { floor } => {
                write!(f, "signal sits below the {floor:.1e} floor; fit suppressed")
            }
            EffectiveError::Quad(e) => write!(f, "quadrature failure: {e}"),
            EffectiveError::Torus(e) => write!(f, "torus failure: {e}"),
        }
    }
}

impl Error for EffectiveError {}

impl From<QuadError> for EffectiveError {
    fn from(e: QuadError) -> Self {
        EffectiveError::Quad(e)
    }
}

impl From<TorusError> for EffectiveError {
    fn from(e: TorusError) -> Self {
        EffectiveError::Torus(e)
    }
}

impl From<crate::ergodic::ErgodicError> for EffectiveError {
    fn from(e: crate::ergodic::ErgodicError) -> Self {
        match e {
            crate::ergodic::ErgodicError::Saturated { floor } => {
                EffectiveError::FlatSignal { floor }
            }
            other => EffectiveError::InvalidInput(other.to_string()),
        }
    }
}

/// One energy level of the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuRow {
    pub mu: f64,
    pub phi: f64,
    pub psi: f64,
}

/// `psi(0) = int (2U)^{-1/2}`, which decides the slope of `Hbar` at `p0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZeroSlope {
    Convergent(f64),
    Divergent,
}

/// Outcome of the shared Legendre-transform head: a decided value, or a
/// critical-energy bracket on the interpolated table awaiting refinement.
enum LRoot {
    Value(f64),
    Bracket { lo: f64, hi: f64, psi_target: f64 },
}

/// Tabulated effective Hamiltonian for one potential.
#[derive(Debug, Clone)]
pub struct EffectiveModel {
    potential: Potential,
    p0: f64,
    rows: Vec<MuRow>,
    psi0: ZeroSlope,
    mu_max: f64,
    quad_spec: QuadratureSpec,
}

fn torus_center(p: &Potential) -> [f64; 2] {
    let m = p.suspension().minimizer();
    [m[0], m[1]]
}

/// The momentum map increases, but near `mu = 0` its increments fall below
/// one ulp of `p0`, so quadrature rounding can produce ties or hair-width
/// inversions. Those are clamped to nondecreasing; a decrease beyond the
/// quadrature tolerance is a real failure.
fn sanitize_monotone(rows: &mut [MuRow], spec: &QuadratureSpec) -> Result<(), EffectiveError> {
    for i in 1..rows.len() {
        if rows[i].phi < rows[i - 1].phi {
            let drop = rows[i - 1].phi - rows[i].phi;
            let tol = 100.0 * (spec.abs_tol + spec.rel_tol * rows[i].phi.abs());
            if drop > tol {
                return Err(EffectiveError::InvalidInput(format!(
                    "momentum map decreased by {drop:e} between mu = {} and mu = {}",
                    rows[i - 1].mu,
                    rows[i].mu
                )));
            }
            rows[i].phi = rows[i - 1].phi;
        }
    }
    Ok(())
}

/// `int_{T^2} sqrt(2 (mu + U))`, the momentum carried by the energy level `mu`.
pub fn phi_integral(
    p: &Potential,
    mu: f64,
    spec: &QuadratureSpec,
) -> Result<f64, EffectiveError> {
    if !(mu >= 0.0) {
        return Err(EffectiveError::InvalidInput(format!("mu must be nonnegative, got {mu}")));
    }
    let u = p.suspension();
    let f = |y0: f64, y1: f64| (2.0 * (mu + u.eval2(y0, y1))).sqrt();
    Ok(quad::torus_integral(&f, Some(torus_center(p)), spec)?.value)
}

/// `int_{T^2} (2 (mu + U))^{-1/2} = d phi / d mu`, the reciprocal group velocity.
pub fn psi_integral(
    p: &Potential,
    mu: f64,
    spec: &QuadratureSpec,
) -> Result<f64, EffectiveError> {
    if !(mu > 0.0) {
        return Err(EffectiveError::InvalidInput(format!("psi needs mu > 0, got {mu}")));
    }
    let u = p.suspension();
    let f = |y0: f64, y1: f64| 1.0 / (2.0 * (mu + u.eval2(y0, y1))).sqrt();
    Ok(quad::torus_integral(&f, Some(torus_center(p)), spec)?.value)
}

/// `int_{T^2} (2 (mu + U))^{-3/2}`, which drives the second derivative.
fn chi_integral(p: &Potential, mu: f64, spec: &QuadratureSpec) -> Result<f64, EffectiveError> {
    if !(mu > 0.0) {
        return Err(EffectiveError::InvalidInput(format!("chi needs mu > 0, got {mu}")));
    }
    let u = p.suspension();
    let f = |y0: f64, y1: f64| (2.0 * (mu + u.eval2(y0, y1))).powf(-1.5);
    Ok(quad::torus_integral(&f, Some(torus_center(p)), spec)?.value)
}

/// Threshold momentum `p0 = int_{T^2} sqrt(2U)`: the width of the flat part.
pub fn compute_p0(p: &Potential, spec: &QuadratureSpec) -> Result<f64, EffectiveError> {
    phi_integral(p, 0.0, spec)
}

impl EffectiveModel {
    /// Builds the dyadic table for energies up to `mu_max`.
    pub fn build(
        potential: Potential,
        mu_max: f64,
        spec: &QuadratureSpec,
    ) -> Result<Self, EffectiveError> {
        spec.validate()?;
        if !(mu_max > 0.0) || !mu_max.is_finite() {
            return Err(EffectiveError::InvalidInput(format!(
                "mu_max must be positive and finite, got {mu_max}"
            )));
        }
        let p0 = compute_p0(&potential, spec)?;
        let u = potential.suspension();
        let psi0 = {
            let f = |y0: f64, y1: f64| 1.0 / (2.0 * u.eval2(y0, y1)).sqrt();
            match quad::torus_integral(&f, Some(torus_center(&potential)), spec) {
                Ok(q) => ZeroSlope::Convergent(q.value),
                Err(QuadError::DivergenceSuspected { .. }) => ZeroSlope::Divergent,
                Err(e) => return Err(e.into()),
            }
        };
        let mus: Vec<f64> =
            (0..MU_TABLE_LEVELS).map(|i| mu_max * 0.5f64.powi((MU_TABLE_LEVELS - 1 - i) as i32)).collect();
        let computed: Vec<Result<MuRow, EffectiveError>> = mus
            .par_iter()
            .map(|&mu| {
                Ok(MuRow {
                    mu,
                    phi: phi_integral(&potential, mu, spec)?,
                    psi: psi_integral(&potential, mu, spec)?,
                })
            })
            .collect();
        let mut rows = Vec::with_capacity(MU_TABLE_LEVELS + 1);
        rows.push(MuRow {
            mu: 0.0,
            phi: p0,
            psi: match psi0 {
                ZeroSlope::Convergent(v) => v,
                ZeroSlope::Divergent => f64::INFINITY,
            },
        });
        for r in computed {
            rows.push(r?);
        }
        sanitize_monotone(&mut rows, spec)?;
        Ok(EffectiveModel { potential, p0, rows, psi0, mu_max, quad_spec: spec.clone() })
    }

    /// Builds with `mu_max` doubled from the default until the table covers
    /// momenta up to `p_target` and gradients up to `q_target`.
    pub fn build_covering(
        potential: Potential,
        p_target: Option<f64>,
        q_target: Option<f64>,
        spec: &QuadratureSpec,
    ) -> Result<Self, EffectiveError> {
        spec.validate()?;
        let probe = QuadratureSpec { abs_tol: 1e-8, rel_tol: 1e-8, ..spec.clone() };
        let mut mu_max = DEFAULT_MU_MAX;
        for _ in 0..40 {
            let p_ok = match p_target {
                Some(p) => phi_integral(&potential, mu_max, &probe)? >= p.abs(),
                None => true,
            };
            let q_ok = match q_target {
                Some(q) => 1.0 / psi_integral(&potential, mu_max, &probe)? >= q.abs(),
                None => true,
            };
            if p_ok && q_ok {
                return Self::build(potential, mu_max, spec);
            }
            mu_max *= 2.0;
        }
        Err(EffectiveError::InvalidInput(
            "table range doubling failed to reach the requested momentum or gradient".into(),
        ))
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }

    pub fn rows(&self) -> &[MuRow] {
        &self.rows
    }

    pub fn zero_slope(&self) -> ZeroSlope {
        self.psi0
    }

    pub fn quad_spec(&self) -> &QuadratureSpec {
        &self.quad_spec
    }

    /// One-sided derivative of `Hbar` at `p0`: zero exactly when
    /// `int (2U)^{-1/2}` diverges, else its reciprocal.
    pub fn prime_at_p0(&self) -> f64 {
        match self.psi0 {
            ZeroSlope::Convergent(v) => 1.0 / v,
            ZeroSlope::Divergent => 0.0,
        }
    }

    /// Interpolated `phi` on `[mu_k, mu_{k+1}]`, cubic Hermite with the
    /// tabulated slopes; the first interval uses a local power law when the
    /// slope at zero is infinite.
    fn phi_interp(&self, mu: f64) -> f64 {
        let rows = &self.rows;
        let i = match rows.binary_search_by(|r| r.mu.total_cmp(&mu)) {
            Ok(i) => return rows[i].phi,
            Err(i) => i.clamp(1, rows.len() - 1),
        };
        let lo = rows[i - 1];
        let hi = rows[i];
        if i == 1 && !lo.psi.is_finite() {
            // Infinite slope at mu = 0: interpolate p0 + A mu^alpha through the
            // next two rows.
            let r2 = rows[2.min(rows.len() - 1)];
            let d1 = hi.phi - self.p0;
            let d2 = r2.phi - self.p0;
            let alpha = if d2 > d1 && r2.mu > hi.mu {
                ((d2 / d1).ln() / (r2.mu / hi.mu).ln()).clamp(0.05, 1.0)
            } else {
                0.5
            };
            return self.p0 + d1 * (mu / hi.mu).powf(alpha);
        }
        let h = hi.mu - lo.mu;
        let t = (mu - lo.mu) / h;
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        h00 * lo.phi + h10 * h * lo.psi + h01 * hi.phi + h11 * h * hi.psi
    }

    /// Interpolated `psi`, piecewise power law through the tabulated rows
    /// (exact for the leading small-`mu` asymptotics).
    fn psi_interp(&self, mu: f64) -> f64 {
        let rows = &self.rows;
        let first_pos = 1;
        if mu <= rows[first_pos].mu {
            match self.psi0 {
                ZeroSlope::Convergent(_) => {
                    // Finite limit: linear between psi(0) and the first row.
                    let lo = rows[0];
                    let hi = rows[first_pos];
                    let t = (mu - lo.mu) / (hi.mu - lo.mu);
                    return lo.psi + t * (hi.psi - lo.psi);
                }
                ZeroSlope::Divergent => {
                    // Power blow-up: extrapolate from the first two rows.
                    let a = rows[first_pos];
                    let b = rows[first_pos + 1];
                    let slope = (b.psi / a.psi).ln() / (b.mu / a.mu).ln();
                    return a.psi * (mu / a.mu).powf(slope);
                }
            }
        }
        let i = match rows[first_pos..].binary_search_by(|r| r.mu.total_cmp(&mu)) {
            Ok(i) => return rows[first_pos + i].psi,
            Err(i) => (first_pos + i).clamp(first_pos + 1, rows.len() - 1),
        };
        let lo = rows[i - 1];
        let hi = rows[i];
        let t = (mu / lo.mu).ln() / (hi.mu / lo.mu).ln();
        (lo.psi.ln() + t * (hi.psi.ln() - lo.psi.ln())).exp()
    }

    /// `phi(mu)` from the table, or from a fresh quadrature when `spec` asks
    /// for tighter tolerances than the table was built with.
    pub fn phi(&self, mu: f64, spec: Option<&QuadratureSpec>) -> Result<f64, EffectiveError> {
        if !(mu >= 0.0) {
            return Err(EffectiveError::InvalidInput(format!(
                "mu must be nonnegative, got {mu}"
            )));
        }
        if mu > self.mu_max {
            return Err(EffectiveError::OutOfTable { requested: mu, limit: self.mu_max });
        }
        if let Some(s) = spec {
            if s.abs_tol < self.quad_spec.abs_tol || s.rel_tol < self.quad_spec.rel_tol {
                return phi_integral(&self.potential, mu, s);
            }
        }
        Ok(self.phi_interp(mu))
    }

    /// Inverts the momentum map: the energy level `mu` with `phi(mu) = |p|`,
    /// zero inside the flat part. Bisection on the interpolant brackets the
    /// root to width 1e-10, then secant steps against fresh quadratures polish
    /// it until `|phi(mu) - |p|| <= 1e-8 max(1, |p|)`.
    pub fn effective_h(&self, p: f64) -> Result<f64, EffectiveError> {
        if !p.is_finite() {
            return Err(EffectiveError::InvalidInput(format!("momentum must be finite, got {p}")));
        }
        let target = p.abs();
        if target <= self.p0 {
            return Ok(0.0);
        }
        let top = self.rows.last().unwrap();
        if target > top.phi {
            return Err(EffectiveError::OutOfTable { requested: target, limit: top.phi });
        }
        // Bracket on the table, bisect the interpolant.
        let mut lo = 0.0;
        let mut hi = top.mu;
        for w in self.rows.windows(2) {
            if w[1].phi >= target {
                lo = w[0].mu;
                hi = w[1].mu;
                break;
            }
        }
        while hi - lo > ROOT_BISECTION_WIDTH * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.phi_interp(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Secant polish against the true momentum map.
        let tol = RESIDUAL_REL * target.max(1.0);
        let mut a = lo.max(f64::MIN_POSITIVE);
        let mut b = hi;
        let mut fa = phi_integral(&self.potential, a, &self.quad_spec)? - target;
        if fa.abs() <= tol {
            return Ok(a);
        }
        let mut fb = phi_integral(&self.potential, b, &self.quad_spec)? - target;
        for _ in 0..MAX_POLISH_STEPS {
            if fb.abs() <= tol {
                return Ok(b);
            }
            if fb == fa {
                break;
            }
            let c = (b - fb * (b - a) / (fb - fa)).max(0.0);
            a = b;
            fa = fb;
            b = c;
            fb = phi_integral(&self.potential, b, &self.quad_spec)? - target;
        }
        if fb.abs() <= tol {
            Ok(b)
        } else {
            Err(EffectiveError::InvalidInput(format!(
                "inversion stalled at residual {fb:e} for p = {p}"
            )))
        }
    }

    /// `Hbar'(p)`: zero on the open flat part, the tabulated dichotomy value
    /// at `p0` itself, and `sign(p) / psi(mu)` beyond.
    pub fn effective_h_prime(&self, p: f64) -> Result<f64, EffectiveError> {
        let target = p.abs();
        if target < self.p0 {
            return Ok(0.0);
        }
        if target == self.p0 {
            return Ok(p.signum() * self.prime_at_p0());
        }
        let mu = self.effective_h(p)?;
        let psi = psi_integral(&self.potential, mu, &self.quad_spec)?;
        Ok(p.signum() / psi)
    }

    /// `Hbar''(p) = chi(mu) / psi(mu)^3` with `chi = int (2 (mu+U))^{-3/2}`;
    /// zero strictly inside the flat part, one-sided (an error) at its edge.
    pub fn effective_h_second(&self, p: f64) -> Result<f64, EffectiveError> {
        let target = p.abs();
        if target < self.p0 {
            return Ok(0.0);
        }
        if target == self.p0 {
            return Err(EffectiveError::FlatEdge { p0: self.p0 });
        }
        let mu = self.effective_h(p)?;
        let psi = psi_integral(&self.potential, mu, &self.quad_spec)?;
        let chi = chi_integral(&self.potential, mu, &self.quad_spec)?;
        Ok(chi / (psi * psi * psi))
    }

    /// Shared head of the Legendre transform: either the value is decided
    /// outright (origin, flat cone, sub-table critical energy) or the
    /// critical energy is bracketed on the interpolated table.
    fn l_root(&self, q: f64) -> Result<LRoot, EffectiveError> {
        if !q.is_finite() {
            return Err(EffectiveError::InvalidInput(format!("gradient must be finite, got {q}")));
        }
        let target = q.abs();
        if target == 0.0 {
            return Ok(LRoot::Value(0.0));
        }
        if target <= self.prime_at_p0() {
            return Ok(LRoot::Value(self.p0 * target));
        }
        let top = self.rows.last().unwrap();
        let q_max = 1.0 / top.psi;
        if target > q_max {
            return Err(EffectiveError::OutOfTable { requested: target, limit: q_max });
        }
        // psi is strictly decreasing; find psi(mu) = 1 / |q|.
        let psi_target = 1.0 / target;
        let first = self.rows[1];
        if psi_target >= first.psi {
            let mu_est = match self.psi0 {
                ZeroSlope::Convergent(v) if v > first.psi => {
                    first.mu * (v - psi_target) / (v - first.psi)
                }
                ZeroSlope::Convergent(_) => 0.0,
                ZeroSlope::Divergent => {
                    let b = self.rows[2];
                    let slope = (b.psi / first.psi).ln() / (b.mu / first.mu).ln();
                    if slope < 0.0 {
                        first.mu * (psi_target / first.psi).powf(1.0 / slope)
                    } else {
                        0.0
                    }
                }
            };
            let mu_est = mu_est.clamp(0.0, first.mu);
            return Ok(LRoot::Value(target * self.phi_interp(mu_est) - mu_est));
        }
        let mut lo = 0.0;
        let mut hi = top.mu;
        for w in self.rows.windows(2) {
            if w[1].psi <= psi_target {
                lo = w[0].mu;
                hi = w[1].mu;
                break;
            }
        }
        while hi - lo > ROOT_BISECTION_WIDTH * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.psi_interp(mid) > psi_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(LRoot::Bracket { lo, hi, psi_target })
    }

    /// Table-only Legendre transform: the critical energy stays on the
    /// interpolated table instead of being polished by fresh quadrature.
    /// Cheap enough for dense grid scans; `effective_l` sharpens the winner.
    pub(crate) fn effective_l_table(&self, q: f64) -> Result<f64, EffectiveError> {
        match self.l_root(q)? {
            LRoot::Value(v) => Ok(v),
            LRoot::Bracket { lo, hi, psi_target } => {
                let mu = 0.5 * (lo + hi);
                Ok((1.0 / psi_target) * self.phi_interp(mu) - mu)
            }
        }
    }

    /// Effective Lagrangian `Lbar(q) = sup_p (pq - Hbar(p))`.
    ///
    /// On the flat cone `|q| < Hbar'(p0+)` the supremum sits at `p0` and
    /// `Lbar = p0 |q|`; beyond it the critical point solves
    /// `psi(mu) = 1 / |q|` and `Lbar = |q| phi(mu) - mu`. Critical energies
    /// below the first tabulated level are resolved from the table's own
    /// small-`mu` extrapolations, where fresh quadrature has nothing sharper
    /// to add and the whole correction to `p0 |q|` is below round-off.
    pub fn effective_l(&self, q: f64) -> Result<f64, EffectiveError> {
        let target = q.abs();
        let (lo, hi, psi_target) = match self.l_root(q)? {
            LRoot::Value(v) => return Ok(v),
            LRoot::Bracket { lo, hi, psi_target } => (lo, hi, psi_target),
        };
        let tol = RESIDUAL_REL * psi_target.max(1.0);
        let mut a = lo.max(f64::MIN_POSITIVE);
        let mut b = hi;
        let mut fa = psi_integral(&self.potential, a, &self.quad_spec)? - psi_target;
        let mut mu_star = b;
        if fa.abs() <= tol {
            mu_star = a;
        } else {
            let mut fb = psi_integral(&self.potential, b, &self.quad_spec)? - psi_target;
            let mut ok = false;
            for _ in 0..MAX_POLISH_STEPS {
                if fb.abs() <= tol {
                    mu_star = b;
                    ok = true;
                    break;
                }
                if fb == fa {
                    break;
                }
                let c = (b - fb * (b - a) / (fb - fa)).max(f64::MIN_POSITIVE);
                a = b;
                fa = fb;
                b = c;
                fb = psi_integral(&self.potential, b, &self.quad_spec)? - psi_target;
            }
            if !ok {
                if fb.abs() <= 1e-4 * psi_target.max(1.0) {
                    mu_star = b;
                } else {
                    return Err(EffectiveError::InvalidInput(format!(
                        "Legendre critical point stalled at residual {fb:e} for q = {q}"
                    )));
                }
            }
        }
        let phi_star = phi_integral(&self.potential, mu_star, &self.quad_spec)?;
        Ok(target * phi_star - mu_star)
    }

    /// Exact corrector `v_p(x) = sign(p) int_0^x sqrt(2 (mu + U(xi s))) ds - p x`
    /// with `mu = Hbar(p)`; requires `|p| >= p0` and vanishes at `x = 0`.
    pub fn corrector_value(&self, p: f64, x: f64) -> Result<f64, EffectiveError> {
        let mu = self.corrector_energy(p)?;
        self.corrector_value_at(p, mu, x)
    }

    /// Energy level used by the corrector; split out so sweeps can reuse it.
    pub fn corrector_energy(&self, p: f64) -> Result<f64, EffectiveError> {
        if p.abs() < self.p0 * (1.0 - 1e-12) {
            return Err(EffectiveError::InvalidInput(format!(
                "correctors need |p| >= p0 = {}, got {p}",
                self.p0
            )));
        }
        if p.abs() <= self.p0 {
            Ok(0.0)
        } else {
            self.effective_h(p)
        }
    }

    fn corrector_value_at(&self, p: f64, mu: f64, x: f64) -> Result<f64, EffectiveError> {
        if x == 0.0 {
            return Ok(0.0);
        }
        let (a, b, orient) = if x > 0.0 { (0.0, x, 1.0) } else { (x, 0.0, -1.0) };
        let spec = QuadratureSpec {
            abs_tol: self.quad_spec.abs_tol * (b - a).max(1.0),
            rel_tol: self.quad_spec.rel_tol,
            max_subdivisions: self
                .quad_spec
                .max_subdivisions
                .max(4 * ((b - a) / quad::orbit_panel_hint(self.potential.frequency())).ceil()
                    as usize),
            polar_refinement_radius: self.quad_spec.polar_refinement_radius,
        };
        let q = quad::line_integral_sqrt(&self.potential, mu, a, b, &spec)?;
        Ok(p.signum() * orient * q.value - p * x)
    }

    /// `|v_p(t) / t|` sampled on a horizon grid and fitted as a power law;
    /// the `exponent` field is the decay rate `theta` (positive means the
    /// corrector grows sublinearly like `t^{1 - theta}`).
    pub fn corrector_growth_fit(
        &self,
        p: f64,
        t_grid: &[f64],
    ) -> Result<(RateFit, Vec<(f64, f64)>), EffectiveError> {
        if t_grid.len() < 4 {
            return Err(EffectiveError::InvalidInput(format!(
                "a growth fit needs at least 4 horizons, got {}",
                t_grid.len()
            )));
        }
        let mu = self.corrector_energy(p)?;
        let mut order: Vec<usize> = (0..t_grid.len()).collect();
        order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
        let mut samples = vec![(0.0, 0.0); t_grid.len()];
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &i in &order {
            let t = t_grid[i];
            if !(t > 0.0) || !t.is_finite() {
                return Err(EffectiveError::InvalidInput(format!(
                    "horizons must be positive, got {t}"
                )));
            }
            // v_p(t) accumulates segment by segment; only the sqrt integral
            // needs extending.
            let spec = QuadratureSpec {
                abs_tol: self.quad_spec.abs_tol * (t - prev).max(1.0),
                rel_tol: self.quad_spec.rel_tol,
                max_subdivisions: self.quad_spec.max_subdivisions.max(
                    4 * ((t - prev) / quad::orbit_panel_hint(self.potential.frequency())).ceil()
                        as usize,
                ),
                polar_refinement_radius: self.quad_spec.polar_refinement_radius,
            };
            let q = quad::line_integral_sqrt(&self.potential, mu, prev, t, &spec)?;
            acc += q.value;
            prev = t;
            let v = p.signum() * acc - p * t;
            samples[i] = (t, (v / t).abs());
        }
        let usable: Vec<(f64, f64)> =
            samples.iter().filter(|&&(_, w)| w >= ERROR_FLOOR).cloned().collect();
        if usable.len() < 4 {
            return Err(EffectiveError::FlatSignal { floor: ERROR_FLOOR });
        }
        let xs: Vec<f64> = usable.iter().map(|&(t, _)| t).collect();
        let ys: Vec<f64> = usable.iter().map(|&(_, w)| w).collect();
        let mut fit = fit_linear_model(&xs, &ys, FitModel::PowerLaw)?;
        fit.exponent = -fit.exponent;
        Ok((fit, samples))
    }

    /// Serializes the table as versioned CSV: a version line, a `mu,phi`
    /// header, and one row per energy level with round-trippable floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("effective-table-v1\nmu,phi\n");
        for r in &self.rows {
            out.push_str(&format!("{:?},{:?}\n", r.mu, r.phi));
        }
        out
    }

    /// Rebuilds a model from [`EffectiveModel::to_csv`] output. The `mu,phi`
    /// pairs are restored bit for bit; the slope column is recomputed by
    /// quadrature since the format carries only the two pinned columns.
    pub fn from_csv(
        potential: Potential,
        spec: &QuadratureSpec,
        text: &str,
    ) -> Result<Self, EffectiveError> {
        spec.validate()?;
        let mut lines = text.lines();
        match lines.next() {
            Some("effective-table-v1") => {}
            other => {
                return Err(EffectiveError::InvalidInput(format!(
                    "unsupported table version {other:?}"
                )))
            }
        }
        if lines.next() != Some("mu,phi") {
            return Err(EffectiveError::InvalidInput("missing mu,phi header".into()));
        }
        let mut pairs = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| {
                EffectiveError::InvalidInput(format!("malformed table row {line:?}"))
            })?;
            let mu: f64 = a.parse().map_err(|_| {
                EffectiveError::InvalidInput(format!("malformed mu in row {line:?}"))
            })?;
            let phi: f64 = b.parse().map_err(|_| {
                EffectiveError::InvalidInput(format!("malformed phi in row {line:?}"))
            })?;
            pairs.push((mu, phi));
        }
        if pairs.len() < 4 || pairs[0].0 != 0.0 {
            return Err(EffectiveError::InvalidInput(
                "table must start at mu = 0 and carry at least 4 rows".into(),
            ));
        }
        for w in pairs.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 >= w[0].1) {
                return Err(EffectiveError::InvalidInput(
                    "table rows must increase in mu and never decrease in phi".into(),
                ));
            }
        }
        let u = potential.suspension();
        let psi0 = {
            let f = |y0: f64, y1: f64| 1.0 / (2.0 * u.eval2(y0, y1)).sqrt();
            match quad::torus_integral(&f, Some(torus_center(&potential)), spec) {
                Ok(q) => ZeroSlope::Convergent(q.value),
                Err(QuadError::DivergenceSuspected { .. }) => ZeroSlope::Divergent,
                Err(e) => return Err(e.into()),
            }
        };
        let slopes: Vec<Result<f64, EffectiveError>> = pairs[1..]
            .par_iter()
            .map(|&(mu, _)| psi_integral(&potential, mu, spec))
            .collect();
        let mut rows = Vec::with_capacity(pairs.len());
        rows.push(MuRow {
            mu: 0.0,
            phi: pairs[0].1,
            psi: match psi0 {
                ZeroSlope::Convergent(v) => v,
                ZeroSlope::Divergent => f64::INFINITY,
            },
        });
        for ((mu, phi), psi) in pairs[1..].iter().zip(slopes) {
            rows.push(MuRow { mu: *mu, phi: *phi, psi: psi? });
        }
        let mu_max = rows.last().unwrap().mu;
        let p0 = rows[0].phi;
        Ok(EffectiveModel { potential, p0, rows, psi0, mu_max, quad_spec: spec.clone() })
    }
}

/// Predicted modulus of continuity of `Hbar'` at the flat-part edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HolderPrediction {
    /// `Hbar' ~ Hbar^beta` with this exponent.
    Power(f64),
    /// Reciprocal-log modulus (the borderline well).
    LogModulus,
}

/// How the effective Hamiltonian leaves its flat part.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub gamma: f64,
    pub predicted: HolderPrediction,
    /// One-sided `Hbar'` at `p0`: zero or `1 / psi(0)`.
    pub measured_prime_at_p0: f64,
    /// Fit of `log Hbar'` against `log Hbar` (or against a reciprocal log for
    /// the borderline well) over momenta in `(p0, p0 + 0.5]`.
    pub asymptotic_fit: RateFit,
}

/// Predicted edge behaviour for a prototype well of the given exponent.
pub fn predicted_holder(gamma: f64) -> HolderPrediction {
    if gamma == 2.0 {
        HolderPrediction::LogModulus
    } else if gamma > 2.0 {
        HolderPrediction::Power(0.5 - 1.0 / gamma)
    } else if gamma > 2.0 / 3.0 {
        HolderPrediction::Power(1.0 / gamma - 0.5)
    } else {
        HolderPrediction::Power(1.0)
    }
}

/// Measures how `Hbar'` vanishes (or not) at the flat-part edge and compares
/// with the prototype prediction. Requires a prototype suspension.
pub fn regularity_report(
    model: &EffectiveModel,
    n_samples: usize,
) -> Result<RegularityReport, EffectiveError> {
    let u = model.potential().suspension();
    if matches!(u.kind(), SuspensionKind::TrigPolynomial) {
        return Err(EffectiveError::InvalidInput(
            "regularity predictions are defined for prototype wells".into(),
        ));
    }
    if n_samples < 4 {
        return Err(EffectiveError::InvalidInput(format!(
            "a regularity fit needs at least 4 samples, got {n_samples}"
        )));
    }
    let gamma = u.gamma();
    let p0 = model.p0();
    let mut hs = Vec::with_capacity(n_samples);
    let mut dhs = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        // Geometric spacing toward p0 resolves the asymptotic regime.
        let dp = 0.5 * 10f64.powf(-2.5 * (n_samples - 1 - i) as f64 / (n_samples - 1) as f64);
        let p = p0 + dp;
        let h = model.effective_h(p)?;
        let dh = model.effective_h_prime(p)?;
        if h > 0.0 && dh > 0.0 {
            hs.push(h);
            dhs.push(dh);
        }
    }
    if hs.len() < 4 {
        return Err(EffectiveError::FlatSignal { floor: ERROR_FLOOR });
    }
    let fit = if gamma == 2.0 {
        // Hbar' ~ 1 / log(1 / Hbar): fit against the reciprocal log.
        let xs: Vec<f64> = hs.iter().map(|h| 1.0 / (1.0 / h).ln()).collect();
        fit_linear_model(&xs, &dhs, FitModel::LogLaw)?
    } else {
        fit_linear_model(&hs, &dhs, FitModel::PowerLaw)?
    };
    Ok(RegularityReport {
        gamma,
        predicted: predicted_holder(gamma),
        measured_prime_at_p0: model.prime_at_p0(),
        asymptotic_fit: fit,
    })
}
