//! Deterministic adaptive quadrature.
//!
//! Three families of integrals drive everything downstream: integrals over
//! the 2-torus whose integrands may have a power singularity at a known
//! point, line integrals along quasi-periodic orbits, and truncated Fourier
//! Sobolev norms. All rules are Gauss-Kronrod 7-15 panels with deterministic
//! refinement order, so results are reproducible bit-for-bit per build.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::torus::{Frequency, Potential, Suspension};

/// Tolerances and budgets for one integration call.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Radius of the square around the singular point that is integrated in
    /// polar coordinates.
    pub polar_refinement_radius: f64,
}

impl QuadratureSpec {
    pub fn new(
        abs_tol: f64,
        rel_tol: f64,
        max_subdivisions: usize,
        polar_refinement_radius: f64,
    ) -> Result<Self, QuadError> {
        let spec = QuadratureSpec { abs_tol, rel_tol, max_subdivisions, polar_refinement_radius };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), QuadError> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(QuadError::InvalidSpec("tolerances must be positive".into()));
        }
        if self.max_subdivisions < 1 {
            return Err(QuadError::InvalidSpec("max_subdivisions must be at least 1".into()));
        }
        if !(self.polar_refinement_radius > 0.0 && self.polar_refinement_radius < 0.5) {
            return Err(QuadError::InvalidSpec(
                "polar_refinement_radius must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_subdivisions: 20_000,
            polar_refinement_radius: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuadError {
    InvalidSpec(String),
    /// Refinement kept increasing the running total (or ran out of budget);
    /// carries the partial sums observed while the suspicion formed.
    DivergenceSuspected { partial_sums: Vec<f64> },
    /// The integrand has a non-integrable pole inside the interval.
    SingularInterval { location: f64 },
}

impl fmt::Display for QuadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuadError::InvalidSpec(msg) => write!(f, "invalid quadrature spec: {msg}"),
            QuadError::DivergenceSuspected { partial_sums } => write!(
                f,
                "divergence suspected after {} partial sums (last {:?})",
                partial_sums.len(),
                partial_sums.last()
            ),
            QuadError::SingularInterval { location } => {
                write!(f, "integrand pole inside the interval, near x = {location}")
            }
        }
    }
}

impl std::error::Error for QuadError {}

/// Value with an estimated absolute error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

// Gauss-Kronrod 7-15 abscissae and weights on [-1, 1]. Positive abscissae
// only; the rule is symmetric. Entries at odd indices (and the center) are
// the embedded 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One Gauss-Kronrod 7-15 panel for two integrands sharing their evaluation
/// points: returns `((integral, error), (integral, error))`.
pub fn gk15_two<F: Fn(f64) -> (f64, f64)>(
    f: &F,
    a: f64,
    b: f64,
) -> ((f64, f64), (f64, f64)) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let (fc0, fc1) = f(c);
    let mut sk0 = WGK[7] * fc0;
    let mut sg0 = WG[3] * fc0;
    let mut sk1 = WGK[7] * fc1;
    let mut sg1 = WG[3] * fc1;
    for i in 0..7 {
        let dx = h * XGK[i];
        let (l0, l1) = f(c - dx);
        let (r0, r1) = f(c + dx);
        sk0 += WGK[i] * (l0 + r0);
        sk1 += WGK[i] * (l1 + r1);
        if i % 2 == 1 {
            sg0 += WG[i / 2] * (l0 + r0);
            sg1 += WG[i / 2] * (l1 + r1);
        }
    }
    ((sk0 * h, ((sk0 - sg0) * h).abs()), (sk1 * h, ((sk1 - sg1) * h).abs()))
}

/// One Gauss-Kronrod 7-15 panel: returns (integral, error estimate).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut sk = WGK[7] * fc;
    let mut sg = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        sk += WGK[i] * (f1 + f2);
        if i % 2 == 1 {
            sg += WG[i / 2] * (f1 + f2);
        }
    }
    (sk * h, ((sk - sg) * h).abs())
}

fn gk15_try<F: FnMut(f64) -> Result<f64, QuadError>>(
    f: &mut F,
    a: f64,
    b: f64,
) -> Result<(f64, f64), QuadError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut sk = WGK[7] * fc;
    let mut sg = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let f1 = f(c - dx)?;
        let f2 = f(c + dx)?;
        sk += WGK[i] * (f1 + f2);
        if i % 2 == 1 {
            sg += WG[i / 2] * (f1 + f2);
        }
    }
    Ok((sk * h, ((sk - sg) * h).abs()))
}

/// Total-order wrapper so panel errors can key a BinaryHeap.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn locate_bad_node<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    if !f(c).is_finite() {
        return c;
    }
    for i in 0..7 {
        let dx = h * XGK[i];
        for x in [c - dx, c + dx] {
            if !f(x).is_finite() {
                return x;
            }
        }
    }
    c
}

/// Adaptive 1D integration of `f` over `[a, b]`.
///
/// `panel_hint` caps the initial panel length (orbit integrands pass
/// `min(0.25, 1/|xi|)` so the fastest oscillation is resolved). With
/// `watch_singular` set, refinement that localizes an exploding integrand
/// reports a [`QuadError::SingularInterval`] instead of exhausting the
/// budget.
pub fn line_integral<F: Fn(f64) -> f64 + Sync>(
    f: &F,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
    panel_hint: f64,
    watch_singular: bool,
) -> Result<Quadrature, QuadError> {
    spec.validate()?;
    if !(a.is_finite() && b.is_finite()) {
        return Err(QuadError::InvalidSpec("endpoints must be finite".into()));
    }
    if a == b {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    if a > b {
        return Err(QuadError::InvalidSpec("interval endpoints out of order".into()));
    }
    let hint = if panel_hint.is_finite() && panel_hint > 0.0 { panel_hint } else { b - a };
    let n0 = (((b - a) / hint).ceil() as usize).clamp(1, 8_000_000);
    let scale = a.abs().max(b.abs()).max(1.0);
    let width_floor = 1e-12 * scale;

    #[derive(Clone, Copy)]
    struct Panel {
        a: f64,
        b: f64,
        val: f64,
        err: f64,
    }

    let h = (b - a) / n0 as f64;
    let mut panels: Vec<Panel> = (0..n0)
        .into_par_iter()
        .map(|i| {
            let pa = a + i as f64 * h;
            let pb = if i + 1 == n0 { b } else { a + (i + 1) as f64 * h };
            let (val, err) = gk15(f, pa, pb);
            Panel { a: pa, b: pb, val, err }
        })
        .collect();

    let mut heap: BinaryHeap<(OrdF64, Reverse<usize>)> = BinaryHeap::with_capacity(panels.len());
    let mut sum_val = 0.0;
    let mut sum_err = 0.0;
    for (i, p) in panels.iter().enumerate() {
        if !p.val.is_finite() || !p.err.is_finite() {
            if watch_singular {
                return Err(QuadError::SingularInterval { location: locate_bad_node(f, p.a, p.b) });
            }
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![f64::INFINITY] });
        }
        sum_val += p.val;
        sum_err += p.err;
        heap.push((OrdF64(p.err), Reverse(i)));
    }

    let mut frozen_err = 0.0;
    let mut splits = 0usize;
    loop {
        let tol = spec.abs_tol.max(spec.rel_tol * sum_val.abs());
        if sum_err + frozen_err <= tol {
            return Ok(Quadrature { value: sum_val, error: sum_err + frozen_err });
        }
        if frozen_err > tol && sum_err <= frozen_err {
            // Floor-width panels hold error that no further split can
            // reduce, and everything refinable is already below that level.
            // The value is converged as far as f64 panel widths allow, so
            // report it with the honest (larger than requested) error bar
            // instead of burning the budget on panels that cannot help.
            return Ok(Quadrature { value: sum_val, error: sum_err + frozen_err });
        }
        let Some((OrdF64(err), Reverse(idx))) = heap.pop() else {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        };
        let parent = panels[idx];
        debug_assert_eq!(err, parent.err);
        if splits >= spec.max_subdivisions {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        }
        let width = parent.b - parent.a;
        if width <= width_floor {
            if watch_singular {
                let mid = 0.5 * (parent.a + parent.b);
                if f(mid).abs() > 1e8 {
                    return Err(QuadError::SingularInterval { location: mid });
                }
            }
            sum_err -= parent.err;
            frozen_err += parent.err;
            continue;
        }
        splits += 1;
        let mid = 0.5 * (parent.a + parent.b);
        let (v1, e1) = gk15(f, parent.a, mid);
        let (v2, e2) = gk15(f, mid, parent.b);
        if !(v1.is_finite() && v2.is_finite() && e1.is_finite() && e2.is_finite()) {
            if watch_singular {
                let loc = if !(v1.is_finite() && e1.is_finite()) {
                    locate_bad_node(f, parent.a, mid)
                } else {
                    locate_bad_node(f, mid, parent.b)
                };
                return Err(QuadError::SingularInterval { location: loc });
            }
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        }
        sum_val += v1 + v2 - parent.val;
        sum_err += e1 + e2 - parent.err;
        let i1 = panels.len();
        panels[idx] = Panel { a: parent.a, b: mid, val: v1, err: e1 };
        panels.push(Panel { a: mid, b: parent.b, val: v2, err: e2 });
        heap.push((OrdF64(e1), Reverse(idx)));
        heap.push((OrdF64(e2), Reverse(i1)));
    }
}

/// `int_a^b sqrt(2 (mu + U(xi x))) dx`. Bounded integrand; panels sized to
/// the fastest orbit oscillation.
pub fn line_integral_sqrt(
    p: &Potential,
    mu: f64,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<Quadrature, QuadError> {
    if !(mu >= 0.0) {
        return Err(QuadError::InvalidSpec(format!("mu must be nonnegative, got {mu}")));
    }
    let hint = orbit_panel_hint(p.frequency());
    line_integral(&|x| (2.0 * (mu + p.u_along(x))).sqrt(), a, b, spec, hint, false)
}

/// `int_a^b dx / sqrt(2 (r - V(x)))` with `V = -U(xi .)`: the time-of-flight
/// kernel. A pole of the integrand inside the interval is reported as
/// [`QuadError::SingularInterval`].
pub fn line_integral_inv_sqrt(
    p: &Potential,
    r: f64,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<Quadrature, QuadError> {
    if !(r >= 0.0) {
        return Err(QuadError::InvalidSpec(format!("r must be nonnegative, got {r}")));
    }
    let hint = orbit_panel_hint(p.frequency());
    line_integral(&|x| 1.0 / (2.0 * (r + p.u_along(x))).sqrt(), a, b, spec, hint, true)
}

/// Initial panel length resolving the fastest oscillation of `U(xi x)`.
pub fn orbit_panel_hint(xi: &Frequency) -> f64 {
    (1.0 / xi.norm()).min(0.25)
}

const RADIAL_MAX_LEVELS: usize = 96;
const DIVERGENCE_GROWTH: f64 = 1.1;
const DIVERGENCE_RUN: usize = 6;

/// Integrates `g(r) r dr` over `(0, r_max]` by dyadic shells toward the
/// origin. Partial sums growing by more than 10% per doubling for 6
/// consecutive doublings are reported as suspected divergence.
fn radial_dyadic<G: Fn(f64) -> f64>(
    g: &G,
    r_max: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64), QuadError> {
    let mut total = 0.0;
    let mut err = 0.0;
    let mut partials: Vec<f64> = Vec::new();
    let mut run = 0usize;
    let mut hi = r_max;
    let mut prev_inc = f64::INFINITY;
    for level in 0..RADIAL_MAX_LEVELS {
        let lo = 0.5 * hi;
        let (v, e) = gk15(&|r| g(r) * r, lo, hi);
        if !v.is_finite() || !e.is_finite() {
            // The shell radius reached the scale where the integrand's
            // argument rounds to zero. Clearly decaying increments mean the
            // integral converged and the unresolvable tail goes into the
            // error; otherwise keep the divergence suspicion. The last one
            // or two increments before the floor are polluted by value
            // quantization, so measure decay over a four-level window.
            let n = partials.len();
            if n >= 6 {
                let inc_last = (partials[n - 1] - partials[n - 2]).abs();
                let inc_back = (partials[n - 5] - partials[n - 6]).abs();
                if inc_last <= 0.6 * inc_back {
                    let ratio = (inc_last / inc_back).powf(0.25).min(0.9);
                    return Ok((total, err + inc_last * ratio / (1.0 - ratio)));
                }
            }
            return Err(QuadError::DivergenceSuspected { partial_sums: partials });
        }
        let new_total = total + v;
        if level >= 1 && total.abs() > 0.0 {
            if new_total.abs() > DIVERGENCE_GROWTH * total.abs() && v.abs() > 1e-3 * abs_tol {
                run += 1;
            } else {
                run = 0;
            }
        }
        partials.push(new_total);
        total = new_total;
        err += e;
        if run >= DIVERGENCE_RUN {
            // Sustained shell growth is divergence only while the core keeps
            // feeding it: a non-integrable power holds `g(r) r^2` at the
            // scale of the shell increments all the way down, while a bounded
            // integrand (a positive level floor) collapses it. Probe well
            // below the current shell before flagging, so a floor several
            // levels deeper is not mistaken for divergence.
            let mut core_feed = 0.0f64;
            let mut core_wild = false;
            for scale in [1e-6, 1e-8] {
                let s = lo * scale;
                let gv = g(s);
                if !gv.is_finite() {
                    core_wild = true;
                    break;
                }
                core_feed = core_feed.max(gv.abs() * s * s);
            }
            if core_wild || core_feed >= 0.1 * v.abs() {
                return Err(QuadError::DivergenceSuspected { partial_sums: partials });
            }
            run = 0;
        }
        let stop = abs_tol.max(rel_tol * total.abs());
        if level >= 3 && v.abs() <= stop {
            // Geometric tail estimate for the unintegrated core.
            let ratio = (v.abs() / prev_inc).min(0.9);
            err += v.abs() * ratio / (1.0 - ratio);
            return Ok((total, err));
        }
        prev_inc = v.abs().max(1e-300);
        hi = lo;
    }
    Ok((total, err + prev_inc))
}

/// Polar integration of `f` over the square `|x - x0|_inf <= rho`.
fn polar_square<F: Fn(f64, f64) -> f64 + Sync>(
    f: &F,
    x0: [f64; 2],
    rho: f64,
    abs_target: f64,
    rel_tol: f64,
) -> Result<(f64, f64), QuadError> {
    let octant = std::f64::consts::FRAC_PI_4;
    let ray = |theta: f64| -> Result<f64, QuadError> {
        let (c, s) = (theta.cos(), theta.sin());
        let r_max = rho / c.abs().max(s.abs());
        let g = |r: f64| f(x0[0] + r * c, x0[1] + r * s);
        radial_dyadic(&g, r_max, abs_target * 2e-2, rel_tol * 1e-2).map(|(v, _)| v)
    };

    let results: Vec<Result<(f64, f64), QuadError>> = (0..8)
        .into_par_iter()
        .map(|k| {
            let ta = k as f64 * octant;
            let tb = (k + 1) as f64 * octant;
            // Theta panels per octant, refined against the octant share of
            // the absolute target.
            let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
            let evaluate = |a: f64, b: f64| -> Result<(f64, f64), QuadError> {
                gk15_try(&mut |t| ray(t), a, b)
            };
            let (v, e) = evaluate(ta, tb)?;
            panels.push((ta, tb, v, e));
            let target = abs_target / 8.0;
            for _ in 0..64 {
                let sum_err: f64 = panels.iter().map(|p| p.3).sum();
                let sum_val: f64 = panels.iter().map(|p| p.2).sum();
                if sum_err <= target.max(rel_tol * 0.125 * sum_val.abs()) {
                    break;
                }
                let (worst, _) = panels
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| p.3.total_cmp(&q.3).then(j.cmp(i)))
                    .expect("octant panel list is never empty");
                let (a, b, _, _) = panels[worst];
                let m = 0.5 * (a + b);
                let left = evaluate(a, m)?;
                let right = evaluate(m, b)?;
                panels[worst] = (a, m, left.0, left.1);
                panels.push((m, b, right.0, right.1));
            }
            let v: f64 = panels.iter().map(|p| p.2).sum();
            let e: f64 = panels.iter().map(|p| p.3).sum();
            Ok((v, e))
        })
        .collect();

    let mut val = 0.0;
    let mut err = 0.0;
    for r in results {
        let (v, e) = r?;
        val += v;
        err += e;
    }
    Ok((val, err))
}

#[derive(Clone, Copy)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    val: f64,
    err: f64,
}

fn gk15_2d<F: Fn(f64, f64) -> f64>(f: &F, x0: f64, x1: f64, y0: f64, y1: f64) -> (f64, f64) {
    let cx = 0.5 * (x0 + x1);
    let hx = 0.5 * (x1 - x0);
    let cy = 0.5 * (y0 + y1);
    let hy = 0.5 * (y1 - y0);
    let mut xs = [0.0f64; 15];
    let mut ys = [0.0f64; 15];
    let mut wxk = [0.0f64; 15];
    let mut wyk = [0.0f64; 15];
    let mut wxg = [0.0f64; 15];
    let mut wyg = [0.0f64; 15];
    for i in 0..7 {
        xs[i] = cx - hx * XGK[i];
        xs[14 - i] = cx + hx * XGK[i];
        ys[i] = cy - hy * XGK[i];
        ys[14 - i] = cy + hy * XGK[i];
        wxk[i] = WGK[i];
        wxk[14 - i] = WGK[i];
        wyk[i] = WGK[i];
        wyk[14 - i] = WGK[i];
        if i % 2 == 1 {
            wxg[i] = WG[i / 2];
            wxg[14 - i] = WG[i / 2];
            wyg[i] = WG[i / 2];
            wyg[14 - i] = WG[i / 2];
        }
    }
    xs[7] = cx;
    ys[7] = cy;
    wxk[7] = WGK[7];
    wyk[7] = WGK[7];
    wxg[7] = WG[3];
    wyg[7] = WG[3];

    let mut sk = 0.0;
    let mut sg = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let mut row_k = 0.0;
        let mut row_g = 0.0;
        for (j, &y) in ys.iter().enumerate() {
            let v = f(x, y);
            row_k += wyk[j] * v;
            row_g += wyg[j] * v;
        }
        sk += wxk[i] * row_k;
        sg += wxg[i] * row_g;
    }
    let val = sk * hx * hy;
    let err = ((sk - sg) * hx * hy).abs();
    (val, err)
}

fn adaptive_rects<F: Fn(f64, f64) -> f64 + Sync>(
    f: &F,
    rects: Vec<(f64, f64, f64, f64)>,
    abs_budget: f64,
    rel_tol: f64,
    external_val: f64,
    external_err: f64,
    max_subdivisions: usize,
) -> Result<(f64, f64), QuadError> {
    let mut panels: Vec<Rect> = rects
        .into_par_iter()
        .map(|(x0, x1, y0, y1)| {
            let (val, err) = gk15_2d(f, x0, x1, y0, y1);
            Rect { x0, x1, y0, y1, val, err }
        })
        .collect();
    let mut heap: BinaryHeap<(OrdF64, Reverse<usize>)> = BinaryHeap::new();
    let mut sum_val = 0.0;
    let mut sum_err = 0.0;
    for (i, p) in panels.iter().enumerate() {
        if !p.val.is_finite() || !p.err.is_finite() {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![f64::INFINITY] });
        }
        sum_val += p.val;
        sum_err += p.err;
        heap.push((OrdF64(p.err), Reverse(i)));
    }
    let mut splits = 0usize;
    let mut frozen = 0.0;
    loop {
        let total = external_val + sum_val;
        let tol = abs_budget.max(rel_tol * total.abs() - external_err);
        if sum_err + frozen <= tol {
            return Ok((sum_val, sum_err + frozen));
        }
        let Some((_, Reverse(idx))) = heap.pop() else {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        };
        if splits >= max_subdivisions {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        }
        let r = panels[idx];
        let w = r.x1 - r.x0;
        let h = r.y1 - r.y0;
        if w.max(h) < 1e-9 {
            sum_err -= r.err;
            frozen += r.err;
            continue;
        }
        splits += 1;
        let (ra, rb) = if w >= h {
            let m = 0.5 * (r.x0 + r.x1);
            ((r.x0, m, r.y0, r.y1), (m, r.x1, r.y0, r.y1))
        } else {
            let m = 0.5 * (r.y0 + r.y1);
            ((r.x0, r.x1, r.y0, m), (r.x0, r.x1, m, r.y1))
        };
        let (v1, e1) = gk15_2d(f, ra.0, ra.1, ra.2, ra.3);
        let (v2, e2) = gk15_2d(f, rb.0, rb.1, rb.2, rb.3);
        if !(v1.is_finite() && v2.is_finite() && e1.is_finite() && e2.is_finite()) {
            return Err(QuadError::DivergenceSuspected { partial_sums: vec![sum_val] });
        }
        sum_val += v1 + v2 - r.val;
        sum_err += e1 + e2 - r.err;
        let i1 = panels.len();
        panels[idx] = Rect { x0: ra.0, x1: ra.1, y0: ra.2, y1: ra.3, val: v1, err: e1 };
        panels.push(Rect { x0: rb.0, x1: rb.1, y0: rb.2, y1: rb.3, val: v2, err: e2 });
        heap.push((OrdF64(e1), Reverse(idx)));
        heap.push((OrdF64(e2), Reverse(i1)));
    }
}

/// Integral of a 1-periodic integrand over the 2-torus.
///
/// When `singular_center` is given, the square of side
/// `2 * polar_refinement_radius` around it is integrated in polar
/// coordinates (dyadic shells toward the center), which both resolves
/// integrable power singularities and detects non-integrable ones; the rest
/// of the fundamental domain is covered by adaptive tensor panels. The
/// integrand must be 1-periodic in each variable: it is evaluated at points
/// shifted by the center, possibly outside `[0,1)`.
pub fn torus_integral<F: Fn(f64, f64) -> f64 + Sync>(
    f: &F,
    singular_center: Option<[f64; 2]>,
    spec: &QuadratureSpec,
) -> Result<Quadrature, QuadError> {
    spec.validate()?;
    match singular_center {
        None => {
            let (val, err) = adaptive_rects(
                f,
                vec![(0.0, 1.0, 0.0, 1.0)],
                spec.abs_tol,
                spec.rel_tol,
                0.0,
                0.0,
                spec.max_subdivisions,
            )?;
            Ok(Quadrature { value: val, error: err })
        }
        Some(x0) => {
            let rho = spec.polar_refinement_radius;
            let (inner_val, inner_err) =
                polar_square(f, x0, rho, 0.5 * spec.abs_tol, spec.rel_tol)?;
            // Four rectangles tile the complement of the inner square within
            // the centered fundamental domain [x0 - 1/2, x0 + 1/2]^2.
            let (cx, cy) = (x0[0], x0[1]);
            let rects = vec![
                (cx - 0.5, cx - rho, cy - 0.5, cy + 0.5),
                (cx + rho, cx + 0.5, cy - 0.5, cy + 0.5),
                (cx - rho, cx + rho, cy - 0.5, cy - rho),
                (cx - rho, cx + rho, cy + rho, cy + 0.5),
            ];
            let abs_budget = (spec.abs_tol - inner_err).max(0.1 * spec.abs_tol);
            let (outer_val, outer_err) = adaptive_rects(
                f,
                rects,
                abs_budget,
                spec.rel_tol,
                inner_val,
                inner_err,
                spec.max_subdivisions,
            )?;
            Ok(Quadrature { value: inner_val + outer_val, error: inner_err + outer_err })
        }
    }
}

/// Fixed-grid tensor fallback for dimensions above 2: composite
/// Gauss-Kronrod panels per axis, doubled until two passes agree.
pub fn torus_integral_nd<F: Fn(&[f64]) -> f64 + Sync>(
    f: &F,
    dim: usize,
    spec: &QuadratureSpec,
) -> Result<Quadrature, QuadError> {
    spec.validate()?;
    if dim < 2 {
        return Err(QuadError::InvalidSpec("dimension must be at least 2".into()));
    }
    let mut panels_per_axis = 2usize;
    let mut prev: Option<f64> = None;
    let mut passes = 0usize;
    loop {
        let nodes = composite_axis_nodes(panels_per_axis);
        let total: f64 = tensor_sum(f, &nodes, dim);
        if let Some(p) = prev {
            let diff = (total - p).abs();
            if diff <= spec.abs_tol.max(spec.rel_tol * total.abs()) {
                return Ok(Quadrature { value: total, error: diff });
            }
        }
        prev = Some(total);
        panels_per_axis *= 2;
        passes += 1;
        if passes > 8 || panels_per_axis.pow(dim as u32) > 4_000_000 {
            return Err(QuadError::DivergenceSuspected {
                partial_sums: vec![prev.unwrap_or(f64::NAN)],
            });
        }
    }
}

fn composite_axis_nodes(panels: usize) -> Vec<(f64, f64)> {
    let h = 1.0 / panels as f64;
    let mut out = Vec::with_capacity(panels * 15);
    for p in 0..panels {
        let c = (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        for i in 0..7 {
            out.push((c - half * XGK[i], WGK[i] * half));
            out.push((c + half * XGK[i], WGK[i] * half));
        }
        out.push((c, WGK[7] * half));
    }
    out
}

fn tensor_sum<F: Fn(&[f64]) -> f64 + Sync>(f: &F, nodes: &[(f64, f64)], dim: usize) -> f64 {
    if dim == 1 {
        return nodes.iter().map(|(x, w)| w * f(&[*x])).sum();
    }
    nodes
        .par_iter()
        .map(|(x, w)| {
            let mut point = vec![0.0; dim];
            point[0] = *x;
            w * tensor_sum_inner(f, nodes, &mut point, 1)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

fn tensor_sum_inner<F: Fn(&[f64]) -> f64>(
    f: &F,
    nodes: &[(f64, f64)],
    point: &mut Vec<f64>,
    axis: usize,
) -> f64 {
    if axis == point.len() {
        return f(point);
    }
    let mut s = 0.0;
    for (x, w) in nodes {
        point[axis] = *x;
        s += w * tensor_sum_inner(f, nodes, point, axis + 1);
    }
    s
}

/// Which field of a suspension feeds the spectral norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralField {
    /// `sqrt(U)`.
    SqrtSuspension,
    /// `U` itself.
    Suspension,
}

/// Truncated Sobolev norm from grid samples: the weighted spectrum sum
/// `(sum_kappa (1 + |kappa|^2)^s |f_hat(kappa)|^2)^{1/2}` over the modes the
/// N x N grid resolves. `samples` holds row-major values on the uniform grid
/// `(j0/N, j1/N)`.
pub fn sobolev_norm_of_samples(
    samples: &[Complex64],
    n: usize,
    s: f64,
) -> Result<f64, QuadError> {
    if !n.is_power_of_two() || n < 64 {
        return Err(QuadError::InvalidSpec(format!(
            "grid size must be a power of two at least 64, got {n}"
        )));
    }
    if !(s >= 0.0) {
        return Err(QuadError::InvalidSpec(format!("Sobolev index must be nonnegative, got {s}")));
    }
    let coeffs = fourier_coefficients(samples, n)?;
    let mut sum = 0.0;
    for j0 in 0..n {
        let k0 = wrap_frequency(j0, n);
        for j1 in 0..n {
            let k1 = wrap_frequency(j1, n);
            let amp = coeffs[j0 * n + j1].norm_sqr();
            let weight = (1.0 + (k0 * k0 + k1 * k1) as f64).powf(s);
            sum += weight * amp;
        }
    }
    Ok(sum.sqrt())
}

/// Row-major samples of `sqrt(U)` or `U` on the uniform N x N torus grid.
pub fn suspension_samples(u: &Suspension, n: usize, field: SpectralField) -> Vec<Complex64> {
    let h = 1.0 / n as f64;
    (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let j0 = idx / n;
            let j1 = idx % n;
            let v = u.eval2(j0 as f64 * h, j1 as f64 * h);
            let v = match field {
                SpectralField::SqrtSuspension => v.sqrt(),
                SpectralField::Suspension => v,
            };
            Complex64::new(v, 0.0)
        })
        .collect()
}

/// The Fourier coefficients of N x N grid samples: `out[j0 * n + j1]` is
/// `f_hat(kappa)` for `kappa = (wrap(j0), wrap(j1))` with frequencies above
/// `n/2` wrapped to negative values.
pub fn fourier_coefficients(samples: &[Complex64], n: usize) -> Result<Vec<Complex64>, QuadError> {
    if !n.is_power_of_two() || n < 64 {
        return Err(QuadError::InvalidSpec(format!(
            "grid size must be a power of two at least 64, got {n}"
        )));
    }
    if samples.len() != n * n {
        return Err(QuadError::InvalidSpec(format!(
            "expected {} samples, got {}",
            n * n,
            samples.len()
        )));
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut data = samples.to_vec();
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::default(); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
    let norm_factor = 1.0 / (n as f64 * n as f64);
    for v in &mut data {
        *v *= norm_factor;
    }
    Ok(data)
}

/// Maps a DFT bin index to its signed frequency.
#[inline]
pub fn wrap_frequency(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Truncated Sobolev norm of `sqrt(U)` or `U` on an N x N grid.
/// Nondecreasing in both `s` and `N`.
pub fn sobolev_norm(
    u: &Suspension,
    s: f64,
    n: usize,
    field: SpectralField,
) -> Result<f64, QuadError> {
    if u.dim() != 2 {
        return Err(QuadError::InvalidSpec("spectral norms are computed on the 2-torus".into()));
    }
    if !n.is_power_of_two() || n < 64 {
        return Err(QuadError::InvalidSpec(format!(
            "grid size must be a power of two at least 64, got {n}"
        )));
    }
    sobolev_norm_of_samples(&suspension_samples(u, n, field), n, s)
}
