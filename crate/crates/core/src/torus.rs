//! Quasi-periodic potentials on the line.
//!
//! A potential here is the trace `V(x) = -U(xi * x)` of a nonnegative
//! function `U` on the n-torus (a "suspension") along the orbit of an
//! irrational direction `xi`. The module provides the two prototype
//! suspension families, user-supplied trigonometric polynomials, and an
//! empirical estimator for the Diophantine exponent of `xi`.

use std::fmt;

use rayon::prelude::*;

/// Inner products `|xi . kappa|` below this are treated as exact resonances.
pub const RESONANCE_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TorusError {
    InvalidFrequency(String),
    InvalidSuspension(String),
    DimensionMismatch { expected: usize, got: usize },
}

impl fmt::Display for TorusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TorusError::InvalidFrequency(msg) => write!(f, "invalid frequency: {msg}"),
            TorusError::InvalidSuspension(msg) => write!(f, "invalid suspension: {msg}"),
            TorusError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for TorusError {}

/// Fractional part mapped to `[0, 1)`.
#[inline]
pub fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// An irrational direction on the n-torus, with optional empirical
/// Diophantine data attached by [`estimate_diophantine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Frequency {
    components: Vec<f64>,
    /// Estimated Diophantine exponent; at least `n - 1` when set.
    pub estimated_sigma: Option<f64>,
    /// Estimated Diophantine constant compatible with `estimated_sigma`.
    pub estimated_c: Option<f64>,
    /// Cutoff used for the estimate, if any.
    pub resonance_cutoff: Option<u32>,
}

impl Frequency {
    pub fn new(components: Vec<f64>) -> Result<Self, TorusError> {
        if components.len() < 2 {
            return Err(TorusError::InvalidFrequency(format!(
                "need at least 2 components, got {}",
                components.len()
            )));
        }
        if components.iter().any(|c| !c.is_finite() || *c == 0.0) {
            return Err(TorusError::InvalidFrequency(
                "components must be finite and nonzero".into(),
            ));
        }
        Ok(Frequency { components, estimated_sigma: None, estimated_c: None, resonance_cutoff: None })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Runs [`estimate_diophantine`] and stores the result on success.
    /// A resonant frequency is reported as an error.
    pub fn with_estimate(mut self, cutoff: u32) -> Result<Self, TorusError> {
        match estimate_diophantine(&self, cutoff)? {
            DiophantineScan::Estimate { sigma, c } => {
                self.estimated_sigma = Some(sigma);
                self.estimated_c = Some(c);
                self.resonance_cutoff = Some(cutoff);
                Ok(self)
            }
            DiophantineScan::Resonant { kappa } => Err(TorusError::InvalidFrequency(format!(
                "resonant frequency: xi . {kappa:?} vanishes"
            ))),
        }
    }
}

/// Result of scanning `0 < |kappa|_inf <= cutoff` for small values of
/// `|xi . kappa|`.
#[derive(Debug, Clone, PartialEq)]
pub enum DiophantineScan {
    /// `|xi . kappa| >= c |kappa|^{-sigma}` holds on the scanned window,
    /// `sigma` is the least grid exponent whose constant is stable in the
    /// outer half of the window, and `c` is the exact window minimum of
    /// `|xi . kappa| |kappa|^sigma`.
    Estimate { sigma: f64, c: f64 },
    /// Some `|xi . kappa|` fell below [`RESONANCE_THRESHOLD`].
    Resonant { kappa: Vec<i64> },
}

/// A record `(t, m)` with `t = |xi . kappa|` minimal among all scanned
/// `kappa` of Euclidean norm `<= m`.
#[derive(Debug, Clone, Copy)]
struct ScanRecord {
    t: f64,
    m: f64,
    shell: u32,
}

fn shell_min_2d(xi: &[f64], s: i64) -> (f64, f64, [i64; 2]) {
    // Canonical half-lattice: first nonzero component positive.
    let (a, b) = (xi[0], xi[1]);
    let mut best = (f64::INFINITY, 0.0, [0i64, 0i64]);
    let mut consider = |k1: i64, k2: i64| {
        let t = (a * k1 as f64 + b * k2 as f64).abs();
        if t < best.0 {
            let m = ((k1 * k1 + k2 * k2) as f64).sqrt();
            best = (t, m, [k1, k2]);
        }
    };
    for k2 in -s..=s {
        consider(s, k2);
    }
    for k1 in 1..s {
        consider(k1, s);
        consider(k1, -s);
    }
    consider(0, s);
    best
}

fn shell_min_nd(xi: &[f64], s: i64) -> (f64, f64, Vec<i64>) {
    let n = xi.len();
    let mut kappa = vec![-s; n];
    let mut best = (f64::INFINITY, 0.0, vec![0i64; n]);
    loop {
        if kappa.iter().any(|k| k.abs() == s) {
            // Canonical half-lattice.
            if kappa.iter().find(|k| **k != 0).copied().unwrap_or(0) > 0 {
                let t: f64 = kappa.iter().zip(xi).map(|(k, x)| *k as f64 * x).sum::<f64>().abs();
                if t < best.0 {
                    let m = kappa.iter().map(|k| (k * k) as f64).sum::<f64>().sqrt();
                    best = (t, m, kappa.clone());
                }
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            kappa[i] += 1;
            if kappa[i] <= s {
                break;
            }
            kappa[i] = -s;
            i += 1;
        }
    }
}

/// Scans the lattice window `0 < |kappa|_inf <= cutoff` and estimates the
/// Diophantine exponent of `xi` on the grid
/// `{n-1, n-1+0.05, ..., n+1}`: the estimate is the least grid exponent
/// whose window constant does not improve by more than 5% on the outer
/// half of the window. Requires `cutoff >= 2`.
pub fn estimate_diophantine(
    xi: &Frequency,
    cutoff: u32,
) -> Result<DiophantineScan, TorusError> {
    if cutoff < 2 {
        return Err(TorusError::InvalidFrequency(format!(
            "resonance cutoff must be at least 2, got {cutoff}"
        )));
    }
    let n = xi.dim();
    let comps = xi.components();

    let shell_results: Vec<(f64, f64, Vec<i64>)> = (1..=cutoff as i64)
        .into_par_iter()
        .map(|s| {
            if n == 2 {
                let (t, m, k) = shell_min_2d(comps, s);
                (t, m, k.to_vec())
            } else {
                shell_min_nd(comps, s)
            }
        })
        .collect();

    for (t, _, k) in &shell_results {
        if *t < RESONANCE_THRESHOLD {
            return Ok(DiophantineScan::Resonant { kappa: k.clone() });
        }
    }

    // Records: shells where the minimal |xi . kappa| drops. Any kappa that is
    // not a record is dominated for every exponent sigma >= 0.
    let mut records: Vec<ScanRecord> = Vec::new();
    let mut best_t = f64::INFINITY;
    for (i, (t, m, _)) in shell_results.iter().enumerate() {
        if *t < best_t {
            best_t = *t;
            records.push(ScanRecord { t: *t, m: *m, shell: (i + 1) as u32 });
        }
    }

    let window_min = |sigma: f64, max_shell: u32| -> f64 {
        records
            .iter()
            .filter(|r| r.shell <= max_shell)
            .map(|r| r.t * r.m.powf(sigma))
            .fold(f64::INFINITY, f64::min)
    };

    let half = (cutoff / 2).max(1);
    let lo = (n - 1) as f64;
    let mut chosen = lo + 2.0;
    let mut k_grid = 0u32;
    loop {
        let sigma = lo + 0.05 * k_grid as f64;
        if sigma > lo + 2.0 + 1e-12 {
            break;
        }
        let inner = window_min(sigma, half);
        let full = window_min(sigma, cutoff);
        if full >= 0.95 * inner {
            chosen = sigma;
            break;
        }
        k_grid += 1;
    }

    // Exact window constant for the chosen exponent (records are exact
    // shell minima of t, not of t * m^sigma, so rescan once).
    let c = (1..=cutoff as i64)
        .into_par_iter()
        .map(|s| {
            if n == 2 {
                let (a, b) = (comps[0], comps[1]);
                let mut best = f64::INFINITY;
                let mut consider = |k1: i64, k2: i64| {
                    let t = (a * k1 as f64 + b * k2 as f64).abs();
                    let m2 = (k1 * k1 + k2 * k2) as f64;
                    let v = t * m2.powf(chosen / 2.0);
                    if v < best {
                        best = v;
                    }
                };
                for k2 in -s..=s {
                    consider(s, k2);
                }
                for k1 in 1..s {
                    consider(k1, s);
                    consider(k1, -s);
                }
                consider(0, s);
                best
            } else {
                let (t, m, _) = shell_min_nd(comps, s);
                t * m.powf(chosen)
            }
        })
        .reduce(|| f64::INFINITY, f64::min);

    Ok(DiophantineScan::Estimate { sigma: chosen, c })
}

/// Exponentiation by the shape exponent, specialized for the common
/// integer and half-integer cases.
#[derive(Debug, Clone, Copy, PartialEq)]
enum GammaPower {
    Integer(i32),
    HalfInteger(i32),
    General(f64),
}

impl GammaPower {
    fn of(gamma: f64) -> Self {
        let r = gamma.round();
        if (gamma - r).abs() < 1e-14 && r >= 1.0 && r <= 64.0 {
            GammaPower::Integer(r as i32)
        } else {
            let h = (gamma - 0.5).round();
            if (gamma - 0.5 - h).abs() < 1e-14 && h >= 0.0 && h <= 64.0 {
                GammaPower::HalfInteger(h as i32)
            } else {
                GammaPower::General(gamma)
            }
        }
    }

    #[inline]
    fn apply(self, base: f64) -> f64 {
        match self {
            GammaPower::Integer(k) => base.powi(k),
            GammaPower::HalfInteger(k) => base.powi(k) * base.sqrt(),
            GammaPower::General(g) => base.powf(g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuspensionKind {
    PrototypeA1,
    PrototypeA2,
    TrigPolynomial,
}

/// One Hermitian mode pair: `cos_amp * cos(2 pi kappa . x) + sin_amp * sin(2 pi kappa . x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigMode {
    pub kappa: Vec<i64>,
    pub cos_amp: f64,
    pub sin_amp: f64,
}

/// A nonnegative function on the n-torus raised to the shape exponent
/// `gamma`: `U = base^gamma` where the base is one of
/// - prototype 1: `n - sum_i sin(2 pi x_i)`, minimized at `(1/4, ..., 1/4)`,
/// - prototype 2: `n - sum_i cos(2 pi x_i)`, minimized at `(0, ..., 0)`,
/// - a user trigonometric polynomial certified nonnegative by grid scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Suspension {
    kind: SuspensionKind,
    gamma: f64,
    power: GammaPower,
    dim: usize,
    constant: f64,
    modes: Vec<TrigMode>,
    minimizer: Vec<f64>,
    min_value: f64,
    nonneg_margin: f64,
}

impl Suspension {
    pub fn prototype_a1(dim: usize, gamma: f64) -> Result<Self, TorusError> {
        Self::prototype(SuspensionKind::PrototypeA1, dim, gamma)
    }

    pub fn prototype_a2(dim: usize, gamma: f64) -> Result<Self, TorusError> {
        Self::prototype(SuspensionKind::PrototypeA2, dim, gamma)
    }

    fn prototype(kind: SuspensionKind, dim: usize, gamma: f64) -> Result<Self, TorusError> {
        if dim < 2 {
            return Err(TorusError::InvalidSuspension("dimension must be at least 2".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(TorusError::InvalidSuspension(format!("gamma must be positive, got {gamma}")));
        }
        let minimizer = match kind {
            SuspensionKind::PrototypeA1 => vec![0.25; dim],
            SuspensionKind::PrototypeA2 => vec![0.0; dim],
            SuspensionKind::TrigPolynomial => unreachable!(),
        };
        Ok(Suspension {
            kind,
            gamma,
            power: GammaPower::of(gamma),
            dim,
            constant: 0.0,
            modes: Vec::new(),
            minimizer,
            min_value: 0.0,
            nonneg_margin: 0.0,
        })
    }

    /// Constant suspension `U == c` (a trigonometric polynomial with no modes).
    pub fn constant(dim: usize, c: f64) -> Result<Self, TorusError> {
        Self::trig_polynomial(dim, c, Vec::new(), 1.0)
    }

    /// A trigonometric polynomial base raised to `gamma`. The base is
    /// certified nonnegative on a scan grid plus a Lipschitz margin; a
    /// certainly negative sample is rejected.
    pub fn trig_polynomial(
        dim: usize,
        constant: f64,
        modes: Vec<TrigMode>,
        gamma: f64,
    ) -> Result<Self, TorusError> {
        if dim < 2 {
            return Err(TorusError::InvalidSuspension("dimension must be at least 2".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(TorusError::InvalidSuspension(format!("gamma must be positive, got {gamma}")));
        }
        for m in &modes {
            if m.kappa.len() != dim {
                return Err(TorusError::DimensionMismatch { expected: dim, got: m.kappa.len() });
            }
            if m.kappa.iter().all(|k| *k == 0) {
                return Err(TorusError::InvalidSuspension(
                    "zero mode must go into the constant term".into(),
                ));
            }
            if !m.cos_amp.is_finite() || !m.sin_amp.is_finite() {
                return Err(TorusError::InvalidSuspension("mode amplitudes must be finite".into()));
            }
        }
        let mut s = Suspension {
            kind: SuspensionKind::TrigPolynomial,
            gamma,
            power: GammaPower::of(gamma),
            dim,
            constant,
            modes,
            minimizer: vec![0.0; dim],
            min_value: 0.0,
            nonneg_margin: 0.0,
        };
        // Scan the base for its minimum; grid sized so the total point count
        // stays near 1024^2 in any dimension.
        let per_dim: usize = match dim {
            2 => 1024,
            3 => 101,
            _ => 31.min(((1 << 20) as f64).powf(1.0 / dim as f64) as usize).max(8),
        };
        let grad_bound: f64 = s
            .modes
            .iter()
            .map(|m| {
                let k2: f64 = m.kappa.iter().map(|k| (k * k) as f64).sum();
                2.0 * std::f64::consts::PI
                    * k2.sqrt()
                    * (m.cos_amp * m.cos_amp + m.sin_amp * m.sin_amp).sqrt()
            })
            .sum();
        let h = 1.0 / per_dim as f64;
        let margin = grad_bound * h * (dim as f64).sqrt() / 2.0;

        let mut idx = vec![0usize; dim];
        let mut best = (f64::INFINITY, vec![0.0; dim]);
        let mut y = vec![0.0; dim];
        loop {
            for (d, i) in idx.iter().enumerate() {
                y[d] = *i as f64 * h;
            }
            let v = s.base_eval(&y);
            if v < best.0 {
                best = (v, y.clone());
            }
            let mut d = 0;
            loop {
                if d == dim {
                    break;
                }
                idx[d] += 1;
                if idx[d] < per_dim {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }
        if best.0 < -1e-9 {
            return Err(TorusError::InvalidSuspension(format!(
                "base takes the negative value {} at {:?}",
                best.0, best.1
            )));
        }
        s.minimizer = best.1;
        s.min_value = GammaPower::of(gamma).apply(best.0.max(0.0));
        s.nonneg_margin = margin;
        Ok(s)
    }

    pub fn kind(&self) -> SuspensionKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Location of the scanned or analytic minimum of `U`.
    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    /// Value of `U` at the minimizer (0 for the prototypes).
    pub fn min_value(&self) -> f64 {
        self.min_value
    }

    /// Certification margin of the nonnegativity scan (0 for prototypes).
    pub fn nonneg_margin(&self) -> f64 {
        self.nonneg_margin
    }

    /// Upper bound for `sup U`.
    pub fn sup_bound(&self) -> f64 {
        let base = match self.kind {
            SuspensionKind::PrototypeA1 | SuspensionKind::PrototypeA2 => 2.0 * self.dim as f64,
            SuspensionKind::TrigPolynomial => {
                self.constant
                    + self
                        .modes
                        .iter()
                        .map(|m| m.cos_amp.abs() + m.sin_amp.abs())
                        .sum::<f64>()
            }
        };
        self.power.apply(base.max(0.0))
    }

    /// Upper bound for `|grad base|` (the polynomial under the exponent).
    pub fn base_gradient_bound(&self) -> f64 {
        match self.kind {
            SuspensionKind::PrototypeA1 | SuspensionKind::PrototypeA2 => {
                2.0 * std::f64::consts::PI * (self.dim as f64).sqrt()
            }
            SuspensionKind::TrigPolynomial => self
                .modes
                .iter()
                .map(|m| {
                    let k2: f64 = m.kappa.iter().map(|k| (k * k) as f64).sum();
                    2.0 * std::f64::consts::PI
                        * k2.sqrt()
                        * (m.cos_amp * m.cos_amp + m.sin_amp * m.sin_amp).sqrt()
                })
                .sum(),
        }
    }

    #[inline]
    fn base_eval(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.dim);
        match self.kind {
            SuspensionKind::PrototypeA1 => {
                let mut b = self.dim as f64;
                for v in y {
                    b -= (2.0 * std::f64::consts::PI * v).sin();
                }
                b
            }
            SuspensionKind::PrototypeA2 => {
                let mut b = self.dim as f64;
                for v in y {
                    b -= (2.0 * std::f64::consts::PI * v).cos();
                }
                b
            }
            SuspensionKind::TrigPolynomial => {
                let mut b = self.constant;
                for m in &self.modes {
                    let mut phase = 0.0;
                    for (k, v) in m.kappa.iter().zip(y) {
                        phase += *k as f64 * v;
                    }
                    phase *= 2.0 * std::f64::consts::PI;
                    b += m.cos_amp * phase.cos() + m.sin_amp * phase.sin();
                }
                b
            }
        }
    }

    /// Evaluates `U` at a point of the torus (coordinates taken mod 1 by the
    /// trigonometric functions themselves; pass reduced coordinates for
    /// bit-stable composition with [`Potential::eval`]).
    pub fn eval(&self, y: &[f64]) -> f64 {
        if y.len() != self.dim {
            // Mirrors the error contract without forcing a Result on the hot
            // path; dimension bugs are programmer errors.
            panic!("suspension dimension {} but point has {}", self.dim, y.len());
        }
        self.power.apply(self.base_eval(y).max(0.0))
    }

    /// Two-dimensional fast path used by the quadrature hot loops.
    #[inline]
    pub fn eval2(&self, y0: f64, y1: f64) -> f64 {
        debug_assert_eq!(self.dim, 2);
        let base = match self.kind {
            SuspensionKind::PrototypeA1 => {
                2.0 - (2.0 * std::f64::consts::PI * y0).sin()
                    - (2.0 * std::f64::consts::PI * y1).sin()
            }
            SuspensionKind::PrototypeA2 => {
                2.0 - (2.0 * std::f64::consts::PI * y0).cos()
                    - (2.0 * std::f64::consts::PI * y1).cos()
            }
            SuspensionKind::TrigPolynomial => {
                let mut b = self.constant;
                for m in &self.modes {
                    let phase = 2.0
                        * std::f64::consts::PI
                        * (m.kappa[0] as f64 * y0 + m.kappa[1] as f64 * y1);
                    b += m.cos_amp * phase.cos() + m.sin_amp * phase.sin();
                }
                b
            }
        };
        self.power.apply(base.max(0.0))
    }
}

/// `V(x) = -U(xi x)`: nonpositive, quasi-periodic.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    suspension: Suspension,
    frequency: Frequency,
}

impl Potential {
    pub fn new(suspension: Suspension, frequency: Frequency) -> Result<Self, TorusError> {
        if suspension.dim() != frequency.dim() {
            return Err(TorusError::DimensionMismatch {
                expected: suspension.dim(),
                got: frequency.dim(),
            });
        }
        Ok(Potential { suspension, frequency })
    }

    pub fn suspension(&self) -> &Suspension {
        &self.suspension
    }

    pub fn frequency(&self) -> &Frequency {
        &self.frequency
    }

    /// The orbit point `frac(xi x)` on the torus.
    pub fn orbit_point(&self, x: f64) -> Vec<f64> {
        self.frequency.components().iter().map(|c| frac(c * x)).collect()
    }

    /// `U(xi x)`; always `>= 0`.
    #[inline]
    pub fn u_along(&self, x: f64) -> f64 {
        let c = self.frequency.components();
        if c.len() == 2 {
            self.suspension.eval2(frac(c[0] * x), frac(c[1] * x))
        } else {
            let y = self.orbit_point(x);
            self.suspension.eval(&y)
        }
    }

    /// `V(x) = -U(xi x)`; always `<= 0`.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        -self.u_along(x)
    }

    /// Upper bound for `sup U = sup |V|`.
    pub fn sup_u(&self) -> f64 {
        self.suspension.sup_bound()
    }
}
