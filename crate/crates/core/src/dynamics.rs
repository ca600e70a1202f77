//! Characteristics of `H(p, x) = p^2/2 + V(x)` and their long-time velocity.
//!
//! On the energy level `r >= 0` a forward characteristic from `x0` satisfies
//! `eta' = sqrt(2 (r - V(eta)))` with `V = -U(xi .)`, so its position is the
//! inverse of the time-of-flight map `tau(y) = int_{x0}^{y} dx / sqrt(2 (r +
//! U(xi x)))`. Inverting `tau` is cheaper and better conditioned than
//! stepping the ODE: near a zero of `r + U` the speed collapses and explicit
//! steppers grind, while the flight integral develops an integrable near-pole
//! that adaptive panels resolve. The marcher below walks panels of the flight
//! integral, accumulating elapsed time and mechanical action together, and
//! refines the final panel until the time residual is negligible against the
//! horizon.

use crate::effective::{self, EffectiveError, EffectiveModel};
use crate::ergodic::{fit_linear_model, FitModel, RateFit};
use crate::quad::{self, QuadError};
use crate::torus::{Potential, SuspensionKind};
use std::error::Error;
use std::fmt;

/// Smallest velocity error a fit treats as signal rather than round-off.
pub const VELOCITY_FLOOR: f64 = 1e-10;
/// Internal relative time residual of endpoint inversion. Held two orders
/// below [`VELOCITY_FLOOR`] so velocity samples are limited by the dynamics,
/// not by where the inversion chose to stop.
const RESIDUAL_REL: f64 = 1e-12;
/// Per-panel relative quadrature error.
const PANEL_REL_TOL: f64 = 1e-10;
/// Halvings allowed while resolving one panel.
const MAX_PANEL_DEPTH: usize = 80;

/// Direction of a characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

/// One characteristic: a potential, an energy level, a direction, a start.
#[derive(Debug, Clone)]
pub struct Characteristic {
    pub potential: Potential,
    pub r: f64,
    pub branch: Branch,
    pub x0: f64,
}

#[derive(Debug)]
pub enum DynamicsError {
    InvalidInput(String),
    /// The start sits exactly on a zero of `r + U`: the constant curve
    /// `eta = x0` is the characteristic and no finite flight leaves it.
    StationaryStart { x0: f64 },
    /// Velocity errors sat below [`VELOCITY_FLOOR`]; the trajectory already
    /// moves at its limit speed and a rate fit would measure round-off.
    FlatSignal { floor: f64 },
    Effective(EffectiveError),
    Quad(QuadError),
}

impl fmt::Display for DynamicsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DynamicsError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            DynamicsError::StationaryStart { x0 } => {
                write!(f, "characteristic is stationary at x0 = {x0}")
            }
            DynamicsError::FlatSignal { floor } => {
                write!(f, "velocity errors sit below the {floor:.1e} floor; fit suppressed")
            }
            DynamicsError::Effective(e) => write!(f, "effective model failure: {e}"),
            DynamicsError::Quad(e) => write!(f, "quadrature failure: {e}"),
        }
    }
}

impl Error for DynamicsError {}

impl From<EffectiveError> for DynamicsError {
    fn from(e: EffectiveError) -> Self {
        DynamicsError::Effective(e)
    }
}

impl From<QuadError> for DynamicsError {
    fn from(e: QuadError) -> Self {
        DynamicsError::Quad(e)
    }
}

impl From<crate::ergodic::ErgodicError> for DynamicsError {
    fn from(e: crate::ergodic::ErgodicError) -> Self {
        DynamicsError::InvalidInput(e.to_string())
    }
}

/// Where a marcher stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlightStop {
    /// Reached the requested time; the field is the endpoint.
    Endpoint(f64),
    /// The running action bound crossed the abort threshold first.
    Aborted,
}

/// Incremental inverter of the time-of-flight map. Feeding it increasing
/// horizons continues the same flight, so a whole time grid costs one pass.
pub struct FlightMarcher<'a> {
    potential: &'a Potential,
    r: f64,
    dir: f64,
    x: f64,
    time: f64,
    arc: f64,
    h: f64,
    h_base: f64,
}

impl<'a> FlightMarcher<'a> {
    pub fn new(
        potential: &'a Potential,
        r: f64,
        x0: f64,
        branch: Branch,
    ) -> Result<Self, DynamicsError> {
        if !r.is_finite() || r < 0.0 {
            return Err(DynamicsError::InvalidInput(format!(
                "energy level must be nonnegative and finite, got {r}"
            )));
        }
        if !x0.is_finite() {
            return Err(DynamicsError::InvalidInput(format!("start must be finite, got {x0}")));
        }
        let h_base = 4.0 * quad::orbit_panel_hint(potential.frequency());
        Ok(FlightMarcher {
            potential,
            r,
            dir: match branch {
                Branch::Plus => 1.0,
                Branch::Minus => -1.0,
            },
            x: x0,
            time: 0.0,
            arc: 0.0,
            h: h_base,
            h_base,
        })
    }

    pub fn position(&self) -> f64 {
        self.x
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Unsigned action integral `int sqrt(2 (r + U))` accumulated along the
    /// path so far.
    pub fn arc(&self) -> f64 {
        self.arc
    }

    #[inline]
    fn speed(&self, x: f64) -> f64 {
        (2.0 * (self.r + self.potential.u_along(x))).sqrt()
    }

    fn width_floor(&self) -> f64 {
        1e-14 * self.x.abs().max(1.0)
    }

    /// Time and action over the signed panel of width `w` ahead of `x`.
    fn panel(&self, x: f64, w: f64) -> ((f64, f64), (f64, f64)) {
        let f = |u: f64| {
            let v = self.speed(u);
            (1.0 / v, v)
        };
        let (a, b) = if self.dir > 0.0 { (x, x + w) } else { (x - w, x) };
        quad::gk15_two(&f, a, b)
    }

    /// Advances until the accumulated time reaches `s_target`, or until the
    /// accumulated action exceeds `arc_abort`.
    pub fn advance_until(
        &mut self,
        s_target: f64,
        arc_abort: Option<f64>,
    ) -> Result<FlightStop, DynamicsError> {
        if !s_target.is_finite() || s_target < self.time {
            return Err(DynamicsError::InvalidInput(format!(
                "horizon {s_target} lies before the current time {}",
                self.time
            )));
        }
        if self.time == 0.0 && self.arc == 0.0 && self.speed(self.x) == 0.0 {
            return Err(DynamicsError::StationaryStart { x0: self.x });
        }
        let time_tol = RESIDUAL_REL * s_target.max(1.0);
        loop {
            if let Some(bound) = arc_abort {
                if self.arc > bound {
                    return Ok(FlightStop::Aborted);
                }
            }
            let remaining = s_target - self.time;
            if remaining <= time_tol {
                return Ok(FlightStop::Endpoint(self.x));
            }
            // Resolve one panel, halving until its own error estimate passes.
            let mut w = self.h;
            let floor = self.width_floor();
            let mut depth = 0;
            let (mut t, mut s) = loop {
                let ((t, te), (s, _)) = self.panel(self.x, w);
                let resolved = t.is_finite() && te <= PANEL_REL_TOL * t.max(1e-3);
                if resolved || depth >= MAX_PANEL_DEPTH || w <= floor {
                    break (t, s);
                }
                w *= 0.5;
                depth += 1;
            };
            if !t.is_finite() {
                // Unresolvable pole at the current position: the speed
                // vanishes here and the crossing outlives any horizon.
                self.time = s_target;
                return Ok(FlightStop::Endpoint(self.x));
            }
            if t <= remaining - time_tol {
                self.x += self.dir * w;
                self.time += t;
                self.arc += s;
                self.h = (2.0 * w).min(self.h_base);
                continue;
            }
            // The horizon lands inside this panel: bisect down to it.
            loop {
                if w <= floor || t <= time_tol {
                    self.x += self.dir * w;
                    self.arc += s;
                    self.time = (self.time + t).min(s_target);
                    return Ok(FlightStop::Endpoint(self.x));
                }
                let half = 0.5 * w;
                let ((tl, _), (sl, _)) = self.panel(self.x, half);
                if !tl.is_finite() {
                    self.time = s_target;
                    return Ok(FlightStop::Endpoint(self.x));
                }
                if self.time + tl <= s_target - time_tol {
                    self.x += self.dir * half;
                    self.time += tl;
                    self.arc += sl;
                    if s_target - self.time <= time_tol {
                        return Ok(FlightStop::Endpoint(self.x));
                    }
                    let ((tr, _), (sr, _)) = self.panel(self.x, half);
                    w = half;
                    t = tr;
                    s = sr;
                } else {
                    w = half;
                    t = tl;
                    s = sl;
                }
            }
        }
    }
}

/// Position after flowing for time `s` along the characteristic. The endpoint
/// satisfies the time-of-flight equation with residual well under
/// `1e-8 * max(1, s)`.
pub fn characteristic_endpoint(c: &Characteristic, s: f64) -> Result<f64, DynamicsError> {
    if !s.is_finite() || s < 0.0 {
        return Err(DynamicsError::InvalidInput(format!(
            "flight time must be nonnegative and finite, got {s}"
        )));
    }
    let mut m = FlightMarcher::new(&c.potential, c.r, c.x0, c.branch)?;
    if s == 0.0 {
        if c.r == 0.0 && m.speed(c.x0) == 0.0 {
            return Err(DynamicsError::StationaryStart { x0: c.x0 });
        }
        return Ok(c.x0);
    }
    match m.advance_until(s, None)? {
        FlightStop::Endpoint(y) => Ok(y),
        FlightStop::Aborted => unreachable!("no abort bound was set"),
    }
}

/// Default horizon grid for velocity fits: 8 points, geometric in
/// `[10^2, 10^5]`.
pub fn default_time_grid() -> Vec<f64> {
    (0..8).map(|j| 10f64.powf(2.0 + 3.0 * j as f64 / 7.0)).collect()
}

fn velocity_samples(
    potential: &Potential,
    r: f64,
    p_sign: f64,
    t_grid: &[f64],
) -> Result<Vec<(f64, f64)>, DynamicsError> {
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    for &i in &order {
        if !t_grid[i].is_finite() || t_grid[i] <= 0.0 {
            return Err(DynamicsError::InvalidInput(format!(
                "horizons must be positive, got {}",
                t_grid[i]
            )));
        }
    }
    let branch = if p_sign >= 0.0 { Branch::Plus } else { Branch::Minus };
    let mut m = FlightMarcher::new(potential, r, 0.0, branch)?;
    let mut samples = vec![(0.0, 0.0); t_grid.len()];
    for &i in &order {
        let t = t_grid[i];
        let y = match m.advance_until(t, None)? {
            FlightStop::Endpoint(y) => y,
            FlightStop::Aborted => unreachable!("no abort bound was set"),
        };
        samples[i] = (t, y / t);
    }
    Ok(samples)
}

fn decay_fit(samples: &[(f64, f64)], v_inf: f64) -> Result<RateFit, DynamicsError> {
    let usable: Vec<(f64, f64)> = samples
        .iter()
        .map(|&(t, v)| (t, (v - v_inf).abs()))
        .filter(|&(_, e)| e >= VELOCITY_FLOOR)
        .collect();
    if usable.len() < 4 {
        return Err(DynamicsError::FlatSignal { floor: VELOCITY_FLOOR });
    }
    let xs: Vec<f64> = usable.iter().map(|&(t, _)| t).collect();
    let ys: Vec<f64> = usable.iter().map(|&(_, e)| e).collect();
    let mut fit = fit_linear_model(&xs, &ys, FitModel::PowerLaw)?;
    fit.exponent = -fit.exponent;
    Ok(fit)
}

/// Fits the decay of `|eta(t)/t - Hbar'(p)|` on a horizon grid. The
/// `exponent` field is the decay rate (positive means convergence like
/// `t^{-exponent}`). Returns the fit and the `(t, eta(t)/t)` samples.
///
/// The limit velocity is evaluated at the same inverted energy the flight
/// runs on, so exactly solvable wells register as flat signal rather than as
/// the inversion's residual.
pub fn velocity_average_rate(
    model: &EffectiveModel,
    p: f64,
    t_grid: &[f64],
) -> Result<(RateFit, Vec<(f64, f64)>), DynamicsError> {
    if t_grid.len() < 4 {
        return Err(DynamicsError::InvalidInput(format!(
            "a velocity fit needs at least 4 horizons, got {}",
            t_grid.len()
        )));
    }
    let r = model.effective_h(p)?;
    let v_inf = if r > 0.0 {
        p.signum() / effective::psi_integral(model.potential(), r, model.quad_spec())?
    } else {
        model.effective_h_prime(p)?
    };
    let samples = velocity_samples(model.potential(), r, p, t_grid)?;
    let fit = decay_fit(&samples, v_inf)?;
    Ok((fit, samples))
}

/// Fits the decay of `|eta(t)/t|` on the zero energy level, where the limit
/// velocity vanishes. Requires a prototype well deeper than the borderline
/// (`gamma > 2`); shallower wells keep a positive limit speed at threshold,
/// so this observable would not decay.
pub fn critical_velocity_rate(
    model: &EffectiveModel,
    t_grid: &[f64],
) -> Result<(RateFit, Vec<(f64, f64)>), DynamicsError> {
    if t_grid.len() < 4 {
        return Err(DynamicsError::InvalidInput(format!(
            "a velocity fit needs at least 4 horizons, got {}",
            t_grid.len()
        )));
    }
    let u = model.potential().suspension();
    if matches!(u.kind(), SuspensionKind::TrigPolynomial) || !(u.gamma() > 2.0) {
        return Err(DynamicsError::InvalidInput(
            "the critical rate is defined for prototype wells with exponent above 2".into(),
        ));
    }
    let samples = velocity_samples(model.potential(), 0.0, 1.0, t_grid)?;
    let fit = decay_fit(&samples, 0.0)?;
    Ok((fit, samples))
}

/// Predicted decay shape of the threshold velocity error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityRatePrediction {
    Power(f64),
    ReciprocalLog,
}

/// First-order prediction of the threshold velocity convergence rate by well
/// depth.
pub fn predicted_velocity_rate(gamma: f64) -> VelocityRatePrediction {
    if gamma == 2.0 {
        VelocityRatePrediction::ReciprocalLog
    } else if gamma > 2.0 {
        VelocityRatePrediction::Power((gamma - 2.0) / (3.0 * gamma - 2.0))
    } else {
        VelocityRatePrediction::Power((2.0 - gamma) / (2.0 * (2.0 + gamma)))
    }
}

/// Sharper critical-momentum prediction after accounting once for the time
/// spent crossing near-minimizer traps.
pub fn improved_critical_exponent(gamma: f64) -> f64 {
    crate::ergodic::improved_growth_exponent(gamma)
}
