//! Declarative point-process regression models.
//!
//! A model is the tuple `(g, K, X, n, Θ)`: a baseline `g(t, θ) ∈ ℝ^d`, a kernel
//! `K(t, s, θ) ∈ ℝ^{d×d0}`, a covariate source `X ∈ ℝ^{d0}`, the intensity scale `n` and a
//! box-shaped parameter space `Θ ⊂ ℝ^p`. All parametric pieces are written in terms of
//! [`Coef`] slots, each either a fixed number or a coordinate of `θ`, which keeps
//! derivatives with respect to `θ` exact and cheap.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::quad::adaptive_gk;
use crate::simulate::PointPath;
use crate::{Error, Result};

/// A scalar model coefficient: either a constant or the coordinate `θ[param]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Fixed(f64),
    Param { param: usize },
}

impl Coef {
    #[inline]
    pub fn value(&self, theta: &[f64]) -> f64 {
        match *self {
            Coef::Fixed(v) => v,
            Coef::Param { param } => theta[param],
        }
    }

    #[inline]
    pub fn index(&self) -> Option<usize> {
        match *self {
            Coef::Fixed(_) => None,
            Coef::Param { param } => Some(param),
        }
    }

    /// Range of the coefficient over the closed parameter box.
    pub fn range(&self, space: &ParamSpace) -> (f64, f64) {
        match *self {
            Coef::Fixed(v) => (v, v),
            Coef::Param { param } => (space.lower[param], space.upper[param]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeHorizon {
    pub t_hat0: f64,
    pub t0: f64,
    pub t1: f64,
}

impl TimeHorizon {
    pub fn new(t_hat0: f64, t0: f64, t1: f64) -> Result<Self> {
        let h = Self { t_hat0, t0, t1 };
        h.check()?;
        Ok(h)
    }

    /// Horizon with no pre-sample stretch (`T̂0 = T0`).
    pub fn observed(t0: f64, t1: f64) -> Result<Self> {
        Self::new(t0, t0, t1)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.t_hat0.is_finite() && self.t0.is_finite() && self.t1.is_finite()) {
            return Err(Error::ModelDefinition("horizon must be finite".into()));
        }
        if !(self.t_hat0 <= self.t0 && self.t0 < self.t1) {
            return Err(Error::ModelDefinition(format!(
                "horizon requires t_hat0 <= t0 < t1, got ({}, {}, {})",
                self.t_hat0, self.t0, self.t1
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.t1 - self.t0
    }

    /// `T* = (T0 + T1) / 2`.
    pub fn center(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }
}

/// Bounded open box `Θ = Π (lower_i, upper_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let s = Self { lower, upper };
        s.check()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::ModelDefinition(
                "param_space lower/upper lengths differ".into(),
            ));
        }
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::ModelDefinition(format!(
                    "param_space coordinate {i} needs finite lower < upper, got ({l}, {u})"
                )));
            }
        }
        Ok(())
    }

    pub fn contains_closed(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x >= l && x <= u)
    }

    pub fn contains_open(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x > l && x < u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn project(&self, theta: &mut [f64]) {
        for ((x, &l), &u) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(l, u);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueDriver {
    pub component: usize,
    /// Queue change in units of `q` when `component` fires (+1 limit, -1 cancel/market).
    pub delta: i64,
}

/// Per-component rate of a queue-reactive baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentRate {
    Constant {
        rate: Coef,
    },
    /// `rate · Q(t-)` where `Q` is a queue size in units of `q`, started at `initial` and
    /// moved by the drivers' events, floored at zero.
    QueueProportional {
        rate: Coef,
        initial: i64,
        drivers: Vec<QueueDriver>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BaselineSpec {
    /// `g_α(t) = rates[α]`.
    Constant { rates: Vec<Coef> },
    /// `g_α(t) = Σ_ℓ coeffs[ℓ][α] · t^ℓ`.
    Polynomial { coeffs: Vec<Vec<Coef>> },
    /// `g_α(t) = curvature[α] · (t - T*)² + level[α]` with `T* = (T0 + T1) / 2`.
    CenteredQuadratic {
        curvature: Vec<Coef>,
        level: Vec<Coef>,
    },
    /// `g_α(t) = scale[α] · profile_α(t)` with piecewise-linear profiles on `times`,
    /// held constant outside the knot range.
    Tabulated {
        times: Vec<f64>,
        profiles: Vec<Vec<f64>>,
        scale: Vec<Coef>,
    },
    /// Path-dependent baselines driven by order-book queue sizes.
    QueueReactive { rates: Vec<ComponentRate> },
}

/// Mutable baseline state carried along a path (queue sizes for queue-reactive models).
#[derive(Clone, Debug, Default)]
pub struct BaselineState {
    queues: Vec<i64>,
}

impl BaselineState {
    pub fn new(spec: &BaselineSpec) -> Self {
        match spec {
            BaselineSpec::QueueReactive { rates } => Self {
                queues: rates
                    .iter()
                    .map(|r| match r {
                        ComponentRate::QueueProportional { initial, .. } => (*initial).max(0),
                        ComponentRate::Constant { .. } => 0,
                    })
                    .collect(),
            },
            _ => Self::default(),
        }
    }

    /// Register an event of component `comp`.
    pub fn on_event(&mut self, spec: &BaselineSpec, comp: usize) {
        if let BaselineSpec::QueueReactive { rates } = spec {
            for (q, r) in self.queues.iter_mut().zip(rates) {
                if let ComponentRate::QueueProportional { drivers, .. } = r {
                    for dr in drivers.iter().filter(|d| d.component == comp) {
                        *q = (*q + dr.delta).max(0);
                    }
                }
            }
        }
    }

    pub fn queue(&self, alpha: usize) -> Option<i64> {
        self.queues.get(alpha).copied()
    }
}

fn interp(times: &[f64], vals: &[f64], t: f64) -> f64 {
    let n = times.len();
    if n == 0 {
        return 0.0;
    }
    if t <= times[0] {
        return vals[0];
    }
    if t >= times[n - 1] {
        return vals[n - 1];
    }
    let k = times.partition_point(|&x| x <= t) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    vals[k] + w * (vals[k + 1] - vals[k])
}

fn interp_integral(times: &[f64], vals: &[f64], a: f64, b: f64) -> f64 {
    if b <= a || times.is_empty() {
        return 0.0;
    }
    let mut pts: Vec<f64> = vec![a];
    pts.extend(times.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    pts.windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (interp(times, vals, w[0]) + interp(times, vals, w[1])))
        .sum()
}

impl BaselineSpec {
    pub fn dim(&self) -> usize {
        match self {
            BaselineSpec::Constant { rates } => rates.len(),
            BaselineSpec::Polynomial { coeffs } => coeffs.first().map_or(0, |c| c.len()),
            BaselineSpec::CenteredQuadratic { level, .. } => level.len(),
            BaselineSpec::Tabulated { scale, .. } => scale.len(),
            BaselineSpec::QueueReactive { rates } => rates.len(),
        }
    }

    pub fn is_path_dependent(&self) -> bool {
        matches!(self, BaselineSpec::QueueReactive { .. })
    }

    /// Every coefficient slot of the baseline.
    pub fn coefs(&self) -> Vec<Coef> {
        match self {
            BaselineSpec::Constant { rates } => rates.clone(),
            BaselineSpec::Polynomial { coeffs } => coeffs.iter().flatten().copied().collect(),
            BaselineSpec::CenteredQuadratic { curvature, level } => {
                curvature.iter().chain(level).copied().collect()
            }
            BaselineSpec::Tabulated { scale, .. } => scale.clone(),
            BaselineSpec::QueueReactive { rates } => rates
                .iter()
                .map(|r| match r {
                    ComponentRate::Constant { rate } => *rate,
                    ComponentRate::QueueProportional { rate, .. } => *rate,
                })
                .collect(),
        }
    }

    fn check(&self, d: usize, horizon: &TimeHorizon) -> Result<()> {
        let bad = |m: String| Err(Error::ModelDefinition(m));
        match self {
            BaselineSpec::Polynomial { coeffs } => {
                if coeffs.is_empty() || coeffs.iter().any(|c| c.len() != d) {
                    return bad(format!("polynomial baseline needs coefficient rows of length {d}"));
                }
            }
            BaselineSpec::CenteredQuadratic { curvature, level } => {
                if curvature.len() != d || level.len() != d {
                    return bad(format!("centered quadratic baseline needs {d} curvatures and levels"));
                }
            }
            BaselineSpec::Tabulated { times, profiles, scale } => {
                if scale.len() != d || profiles.len() != d {
                    return bad(format!("tabulated baseline needs {d} profiles and scales"));
                }
                if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("tabulated baseline times must be strictly increasing".into());
                }
                if profiles.iter().any(|p| p.len() != times.len()) {
                    return bad("tabulated baseline profile length differs from times".into());
                }
            }
            BaselineSpec::QueueReactive { rates } => {
                for r in rates {
                    if let ComponentRate::QueueProportional { drivers, .. } = r {
                        if drivers.iter().any(|dr| dr.component >= d) {
                            return bad("queue driver refers to an unknown component".into());
                        }
                    }
                }
            }
            BaselineSpec::Constant { .. } => {}
        }
        if self.dim() != d {
            return bad(format!(
                "baseline has {} components but d = {d}",
                self.dim()
            ));
        }
        let _ = horizon;
        Ok(())
    }

    /// Calls `f(coef, basis)` for every term of `g_α(t) = Σ coef · basis(t)`.
    #[inline]
    pub fn for_each_term(
        &self,
        alpha: usize,
        t: f64,
        horizon: &TimeHorizon,
        state: &BaselineState,
        mut f: impl FnMut(Coef, f64),
    ) {
        match self {
            BaselineSpec::Constant { rates } => f(rates[alpha], 1.0),
            BaselineSpec::Polynomial { coeffs } => {
                let mut tp = 1.0;
                for row in coeffs {
                    f(row[alpha], tp);
                    tp *= t;
                }
            }
            BaselineSpec::CenteredQuadratic { curvature, level } => {
                let dt = t - horizon.center();
                f(curvature[alpha], dt * dt);
                f(level[alpha], 1.0);
            }
            BaselineSpec::Tabulated { times, profiles, scale } => {
                f(scale[alpha], interp(times, &profiles[alpha], t))
            }
            BaselineSpec::QueueReactive { rates } => match &rates[alpha] {
                ComponentRate::Constant { rate } => f(*rate, 1.0),
                ComponentRate::QueueProportional { rate, .. } => {
                    f(*rate, state.queue(alpha).unwrap_or(0).max(0) as f64)
                }
            },
        }
    }

    /// Same as [`for_each_term`](Self::for_each_term) with each basis function integrated
    /// over `[a, b]`. For queue-reactive baselines the state must be constant on `[a, b]`.
    #[inline]
    pub fn for_each_term_integral(
        &self,
        alpha: usize,
        a: f64,
        b: f64,
        horizon: &TimeHorizon,
        state: &BaselineState,
        mut f: impl FnMut(Coef, f64),
    ) {
        match self {
            BaselineSpec::Constant { rates } => f(rates[alpha], b - a),
            BaselineSpec::Polynomial { coeffs } => {
                let (mut pa, mut pb) = (a, b);
                for (l, row) in coeffs.iter().enumerate() {
                    f(row[alpha], (pb - pa) / (l as f64 + 1.0));
                    pa *= a;
                    pb *= b;
                }
            }
            BaselineSpec::CenteredQuadratic { curvature, level } => {
                let c = horizon.center();
                let (da, db) = (a - c, b - c);
                f(curvature[alpha], (db * db * db - da * da * da) / 3.0);
                f(level[alpha], b - a);
            }
            BaselineSpec::Tabulated { times, profiles, scale } => {
                f(scale[alpha], interp_integral(times, &profiles[alpha], a, b))
            }
            BaselineSpec::QueueReactive { rates } => match &rates[alpha] {
                ComponentRate::Constant { rate } => f(*rate, b - a),
                ComponentRate::QueueProportional { rate, .. } => {
                    f(*rate, state.queue(alpha).unwrap_or(0).max(0) as f64 * (b - a))
                }
            },
        }
    }

    pub fn value(
        &self,
        alpha: usize,
        t: f64,
        theta: &[f64],
        horizon: &TimeHorizon,
        state: &BaselineState,
    ) -> f64 {
        let mut v = 0.0;
        self.for_each_term(alpha, t, horizon, state, |c, b| v += c.value(theta) * b);
        v
    }

    pub fn integral(
        &self,
        alpha: usize,
        a: f64,
        b: f64,
        theta: &[f64],
        horizon: &TimeHorizon,
        state: &BaselineState,
    ) -> f64 {
        let mut v = 0.0;
        self.for_each_term_integral(alpha, a, b, horizon, state, |c, x| v += c.value(theta) * x);
        v
    }

    /// Upper bound of `g_α` on `[a, b]` (exact for constant, quadratic and tabulated
    /// baselines, a Lipschitz bound for higher-degree polynomials).
    pub fn sup_on(
        &self,
        alpha: usize,
        a: f64,
        b: f64,
        theta: &[f64],
        horizon: &TimeHorizon,
        state: &BaselineState,
    ) -> f64 {
        match self {
            BaselineSpec::Constant { .. } | BaselineSpec::QueueReactive { .. } => {
                self.value(alpha, a, theta, horizon, state)
            }
            BaselineSpec::CenteredQuadratic { curvature, .. } => {
                let ga = self.value(alpha, a, theta, horizon, state);
                let gb = self.value(alpha, b, theta, horizon, state);
                let mut m = ga.max(gb);
                let c = horizon.center();
                if curvature[alpha].value(theta) < 0.0 && c > a && c < b {
                    m = m.max(self.value(alpha, c, theta, horizon, state));
                }
                m
            }
            BaselineSpec::Polynomial { coeffs } => {
                let ga = self.value(alpha, a, theta, horizon, state);
                let gb = self.value(alpha, b, theta, horizon, state);
                if coeffs.len() <= 2 {
                    return ga.max(gb);
                }
                let r = a.abs().max(b.abs());
                let lip: f64 = coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(l, row)| l as f64 * row[alpha].value(theta).abs() * r.powi(l as i32 - 1))
                    .sum();
                ga.max(gb) + lip * (b - a)
            }
            BaselineSpec::Tabulated { times, profiles, scale } => {
                let s = scale[alpha].value(theta);
                let prof = &profiles[alpha];
                let mut m = interp(times, prof, a).max(interp(times, prof, b));
                let mut mn = interp(times, prof, a).min(interp(times, prof, b));
                for (t, v) in times.iter().zip(prof) {
                    if *t > a && *t < b {
                        m = m.max(*v);
                        mn = mn.min(*v);
                    }
                }
                if s >= 0.0 {
                    s * m
                } else {
                    s * mn
                }
            }
        }
    }

    /// Polynomial coefficients in powers of `t` at `θ`, for the polynomial-type families.
    pub fn as_polynomial(&self, theta: &[f64], horizon: &TimeHorizon) -> Option<VecPoly> {
        match self {
            BaselineSpec::Constant { rates } => Some(VecPoly {
                coeffs: vec![rates.iter().map(|c| c.value(theta)).collect()],
            }),
            BaselineSpec::Polynomial { coeffs } => Some(VecPoly {
                coeffs: coeffs
                    .iter()
                    .map(|row| row.iter().map(|c| c.value(theta)).collect())
                    .collect(),
            }),
            BaselineSpec::CenteredQuadratic { curvature, level } => {
                let c = horizon.center();
                let g1: Vec<f64> = curvature.iter().map(|x| x.value(theta)).collect();
                let g2: Vec<f64> = level.iter().map(|x| x.value(theta)).collect();
                Some(VecPoly {
                    coeffs: vec![
                        g1.iter().zip(&g2).map(|(a, b)| a * c * c + b).collect(),
                        g1.iter().map(|a| -2.0 * c * a).collect(),
                        g1,
                    ],
                })
            }
            _ => None,
        }
    }
}

/// A vector-valued polynomial `Σ_ℓ coeffs[ℓ] · t^ℓ` with `coeffs[ℓ] ∈ ℝ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecPoly {
    pub coeffs: Vec<Vec<f64>>,
}

impl VecPoly {
    pub fn constant(g: Vec<f64>) -> Self {
        Self { coeffs: vec![g] }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.first().map_or(0, |c| c.len())
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut tp = 1.0;
        for row in &self.coeffs {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c * tp;
            }
            tp *= t;
        }
        out
    }

    pub fn derivative(&self) -> VecPoly {
        if self.coeffs.len() <= 1 {
            return VecPoly::constant(vec![0.0; self.dim()]);
        }
        VecPoly {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(l, row)| row.iter().map(|c| c * l as f64).collect())
                .collect(),
        }
    }

    /// Coefficients of the same polynomial in powers of `(t - origin)`.
    pub fn shifted(&self, origin: f64) -> VecPoly {
        let deg = self.degree();
        let d = self.dim();
        let mut out = vec![vec![0.0; d]; deg + 1];
        // t^ℓ = Σ_k C(ℓ,k) origin^{ℓ-k} (t - origin)^k
        for (l, row) in self.coeffs.iter().enumerate() {
            let mut binom = 1.0;
            for k in 0..=l {
                if k > 0 {
                    binom = binom * (l - k + 1) as f64 / k as f64;
                }
                let w = binom * origin.powi((l - k) as i32);
                for (o, c) in out[k].iter_mut().zip(row) {
                    *o += w * c;
                }
            }
        }
        VecPoly { coeffs: out }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    Zero,
    /// `K(t, s) = A · exp(-b (t - s))`.
    Exponential { a: Vec<Vec<Coef>>, b: Coef },
    /// `K(t, s) = c · (t - s)^power · exp(-decay (t - s))` with `c` entrywise.
    PowerLawExp {
        scale: Vec<Vec<Coef>>,
        decay: Coef,
        power: Coef,
    },
    /// `K(t, s) = scale · φ(t - s)` with `φ` piecewise linear on the lag grid
    /// `0, lag_step, 2·lag_step, …` and zero beyond the last knot.
    Tabulated {
        scale: Vec<Vec<Coef>>,
        lag_step: f64,
        values: Vec<f64>,
    },
}

/// Second-order jet of a scalar with respect to up to two shape parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub d: [f64; 2],
    pub dd: [[f64; 2]; 2],
}

impl Jet2 {
    #[inline]
    pub fn add_scaled(&mut self, w: f64, o: &Jet2) {
        self.v += w * o.v;
        self.d[0] += w * o.d[0];
        self.d[1] += w * o.d[1];
        self.dd[0][0] += w * o.dd[0][0];
        self.dd[0][1] += w * o.dd[0][1];
        self.dd[1][0] += w * o.dd[1][0];
        self.dd[1][1] += w * o.dd[1][1];
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ShapeKind<'a> {
    Zero,
    Exp,
    PowerExp,
    Tab { step: f64, values: &'a [f64] },
}

/// Lag profile `φ(τ; ψ)` of a kernel resolved at a parameter value; `ψ` holds the
/// (at most two) shape parameters.
#[derive(Clone, Copy, Debug)]
pub struct Shape<'a> {
    pub kind: ShapeKind<'a>,
    pub psi: [f64; 2],
    pub slots: [Coef; 2],
    pub nshape: usize,
}

/// `∫_0^L u^k e^{-b u} du` for `k = 0, 1, 2`.
pub fn exp_moments(b: f64, len: f64) -> [f64; 3] {
    let x = b * len;
    if x.abs() < 0.5 {
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let mut term = len.powi(k as i32 + 1);
            let mut s = term / (k as f64 + 1.0);
            for m in 1..30 {
                term *= -x / m as f64;
                s += term / (k + m + 1) as f64;
                if term.abs() < 1e-18 * s.abs() {
                    break;
                }
            }
            *o = s;
        }
        out
    } else {
        let e = (-x).exp();
        [
            (1.0 - e) / b,
            (1.0 - e * (1.0 + x)) / (b * b),
            (2.0 - e * (2.0 + 2.0 * x + x * x)) / (b * b * b),
        ]
    }
}

impl<'a> Shape<'a> {
    #[inline]
    pub fn jet(&self, tau: f64, order: u8) -> Jet2 {
        match self.kind {
            ShapeKind::Zero => Jet2::default(),
            ShapeKind::Exp => {
                let e = (-self.psi[0] * tau).exp();
                let mut j = Jet2 { v: e, ..Jet2::default() };
                if order >= 1 {
                    j.d[0] = -tau * e;
                }
                if order >= 2 {
                    j.dd[0][0] = tau * tau * e;
                }
                j
            }
            ShapeKind::PowerExp => {
                let (c, p) = (self.psi[0], self.psi[1]);
                if tau <= 0.0 {
                    let v = if p == 0.0 { 1.0 } else { 0.0 };
                    return Jet2 { v, ..Jet2::default() };
                }
                let lt = tau.ln();
                let v = (p * lt - c * tau).exp();
                let mut j = Jet2 { v, ..Jet2::default() };
                if order >= 1 {
                    j.d = [-tau * v, lt * v];
                }
                if order >= 2 {
                    j.dd = [[tau * tau * v, -tau * lt * v], [-tau * lt * v, lt * lt * v]];
                }
                j
            }
            ShapeKind::Tab { step, values } => Jet2 {
                v: tab_value(step, values, tau),
                ..Jet2::default()
            },
        }
    }

    /// `∫_0^L φ(τ) dτ` together with its shape derivatives.
    pub fn integral(&self, len: f64, order: u8) -> Jet2 {
        if len <= 0.0 {
            return Jet2::default();
        }
        match self.kind {
            ShapeKind::Zero => Jet2::default(),
            ShapeKind::Exp => {
                let m = exp_moments(self.psi[0], len);
                let mut j = Jet2 { v: m[0], ..Jet2::default() };
                if order >= 1 {
                    j.d[0] = -m[1];
                }
                if order >= 2 {
                    j.dd[0][0] = m[2];
                }
                j
            }
            ShapeKind::PowerExp => {
                let this = *self;
                let r = adaptive_gk(
                    &move |tau: f64| {
                        let j = this.jet(tau, 2);
                        [j.v, j.d[0], j.d[1], j.dd[0][0], j.dd[0][1], j.dd[1][1]]
                    },
                    0.0,
                    len,
                    1e-11,
                );
                let mut j = Jet2 { v: r[0], ..Jet2::default() };
                if order >= 1 {
                    j.d = [r[1], r[2]];
                }
                if order >= 2 {
                    j.dd = [[r[3], r[4]], [r[4], r[5]]];
                }
                j
            }
            ShapeKind::Tab { step, values } => Jet2 {
                v: tab_integral(step, values, len),
                ..Jet2::default()
            },
        }
    }

    /// Supremum of `φ` over `[ta, tb]`, `0 <= ta <= tb`.
    pub fn sup_on(&self, ta: f64, tb: f64) -> f64 {
        match self.kind {
            ShapeKind::Zero => 0.0,
            ShapeKind::Exp => {
                if self.psi[0] >= 0.0 {
                    self.jet(ta, 0).v
                } else {
                    self.jet(tb, 0).v
                }
            }
            ShapeKind::PowerExp => {
                let (c, p) = (self.psi[0], self.psi[1]);
                let mode = if c > 0.0 && p > 0.0 {
                    p / c
                } else if p > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                let at = mode.clamp(ta, tb);
                if at <= 0.0 && p < 0.0 {
                    f64::INFINITY
                } else {
                    self.jet(at, 0).v.max(self.jet(ta, 0).v).max(self.jet(tb, 0).v)
                }
            }
            ShapeKind::Tab { step, values } => {
                let mut m = tab_value(step, values, ta).max(tab_value(step, values, tb));
                let k0 = (ta / step).ceil() as usize;
                let k1 = ((tb / step).floor() as usize).min(values.len().saturating_sub(1));
                for v in values.iter().take(k1 + 1).skip(k0) {
                    m = m.max(*v);
                }
                m
            }
        }
    }

    /// Whether `φ` is nonincreasing on `[0, ∞)`.
    pub fn is_nonincreasing(&self) -> bool {
        match self.kind {
            ShapeKind::Zero => true,
            ShapeKind::Exp => self.psi[0] >= 0.0,
            ShapeKind::PowerExp => self.psi[1] == 0.0 && self.psi[0] >= 0.0,
            ShapeKind::Tab { values, .. } => values.windows(2).all(|w| w[1] <= w[0]),
        }
    }
}

fn tab_value(step: f64, values: &[f64], tau: f64) -> f64 {
    if tau < 0.0 || values.is_empty() {
        return 0.0;
    }
    let x = tau / step;
    let k = x.floor() as usize;
    if k + 1 >= values.len() {
        return if k + 1 == values.len() && x == k as f64 { values[k] } else { 0.0 };
    }
    let w = x - k as f64;
    values[k] + w * (values[k + 1] - values[k])
}

fn tab_integral(step: f64, values: &[f64], len: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let last = (values.len() - 1) as f64 * step;
    let len = len.min(last);
    let kmax = (len / step).floor() as usize;
    let mut s = 0.0;
    for k in 0..kmax.min(values.len() - 1) {
        s += 0.5 * step * (values[k] + values[k + 1]);
    }
    let rest = len - kmax as f64 * step;
    if rest > 0.0 && kmax + 1 < values.len() {
        let v_end = tab_value(step, values, len);
        s += 0.5 * rest * (values[kmax] + v_end);
    }
    s
}

impl KernelSpec {
    pub fn scale_coefs(&self) -> Option<&Vec<Vec<Coef>>> {
        match self {
            KernelSpec::Zero => None,
            KernelSpec::Exponential { a, .. } => Some(a),
            KernelSpec::PowerLawExp { scale, .. } | KernelSpec::Tabulated { scale, .. } => {
                Some(scale)
            }
        }
    }

    pub fn shape(&self, theta: &[f64]) -> Shape<'_> {
        let z = Coef::Fixed(0.0);
        match self {
            KernelSpec::Zero => Shape { kind: ShapeKind::Zero, psi: [0.0; 2], slots: [z, z], nshape: 0 },
            KernelSpec::Exponential { b, .. } => Shape {
                kind: ShapeKind::Exp,
                psi: [b.value(theta), 0.0],
                slots: [*b, z],
                nshape: 1,
            },
            KernelSpec::PowerLawExp { decay, power, .. } => Shape {
                kind: ShapeKind::PowerExp,
                psi: [decay.value(theta), power.value(theta)],
                slots: [*decay, *power],
                nshape: 2,
            },
            KernelSpec::Tabulated { lag_step, values, .. } => Shape {
                kind: ShapeKind::Tab { step: *lag_step, values },
                psi: [0.0; 2],
                slots: [z, z],
                nshape: 0,
            },
        }
    }

    /// Resolved scale matrix `d × d0`, row-major; empty for the zero kernel.
    pub fn scale_values(&self, theta: &[f64]) -> Vec<f64> {
        self.scale_coefs()
            .map(|m| m.iter().flatten().map(|c| c.value(theta)).collect())
            .unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, KernelSpec::Zero)
    }

    pub fn coefs(&self) -> Vec<Coef> {
        let mut v: Vec<Coef> = self
            .scale_coefs()
            .map(|m| m.iter().flatten().copied().collect())
            .unwrap_or_default();
        match self {
            KernelSpec::Exponential { b, .. } => v.push(*b),
            KernelSpec::PowerLawExp { decay, power, .. } => {
                v.push(*decay);
                v.push(*power);
            }
            _ => {}
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateJump {
    pub time: f64,
    pub increments: Vec<f64>,
}

/// Source of the explanatory process `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum CovariateSpec {
    /// `X = N / n` (Hawkes-type feedback).
    SelfExciting,
    /// A given nondecreasing path, stored as jumps. The jumps here are used when
    /// simulating; likelihood evaluation reads the covariate carried by the path.
    ExternalPath {
        dim: usize,
        #[serde(default)]
        jumps: Vec<CovariateJump>,
    },
    /// `X = (N / n, V)`: self-exciting columns first, then the external ones.
    Mixed {
        external_dim: usize,
        #[serde(default)]
        jumps: Vec<CovariateJump>,
    },
}

impl CovariateSpec {
    pub fn d0(&self, d: usize) -> usize {
        match self {
            CovariateSpec::SelfExciting => d,
            CovariateSpec::ExternalPath { dim, .. } => *dim,
            CovariateSpec::Mixed { external_dim, .. } => d + external_dim,
        }
    }

    pub fn is_self_exciting(&self) -> bool {
        !matches!(self, CovariateSpec::ExternalPath { .. })
    }

    pub fn external_dim(&self) -> usize {
        match self {
            CovariateSpec::SelfExciting => 0,
            CovariateSpec::ExternalPath { dim, .. } => *dim,
            CovariateSpec::Mixed { external_dim, .. } => *external_dim,
        }
    }

    /// Column offset of the external block inside `X`.
    pub fn external_offset(&self, d: usize) -> usize {
        match self {
            CovariateSpec::Mixed { .. } => d,
            _ => 0,
        }
    }

    pub fn external_jumps(&self) -> &[CovariateJump] {
        match self {
            CovariateSpec::SelfExciting => &[],
            CovariateSpec::ExternalPath { jumps, .. } | CovariateSpec::Mixed { jumps, .. } => jumps,
        }
    }
}

/// Full description of one point-process regression model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub horizon: TimeHorizon,
    pub n: u64,
    pub baseline: BaselineSpec,
    pub kernel: KernelSpec,
    pub covariate: CovariateSpec,
    pub param_space: ParamSpace,
    /// Declares that `λ` must never vanish; validation then requires `g > 0`.
    #[serde(default)]
    pub require_positive: bool,
}

impl ModelSpec {
    /// Homogeneous Poisson model, `θ = (μ_1, …, μ_d)`.
    pub fn poisson(d: usize, horizon: TimeHorizon, n: u64, space: ParamSpace) -> Self {
        Self {
            d,
            horizon,
            n,
            baseline: BaselineSpec::Constant { rates: (0..d).map(|i| Coef::Param { param: i }).collect() },
            kernel: KernelSpec::Zero,
            covariate: CovariateSpec::SelfExciting,
            param_space: space,
            require_positive: false,
        }
    }

    /// Self-exciting exponential Hawkes model with `θ = (g_1..g_d, A row-major, b)`.
    pub fn exp_hawkes(d: usize, horizon: TimeHorizon, n: u64, space: ParamSpace) -> Self {
        Self {
            d,
            horizon,
            n,
            baseline: BaselineSpec::Constant { rates: (0..d).map(|i| Coef::Param { param: i }).collect() },
            kernel: KernelSpec::Exponential {
                a: (0..d)
                    .map(|r| (0..d).map(|c| Coef::Param { param: d + r * d + c }).collect())
                    .collect(),
                b: Coef::Param { param: d + d * d },
            },
            covariate: CovariateSpec::SelfExciting,
            param_space: space,
            require_positive: false,
        }
    }

    /// Two-dimensional Hawkes model with baseline `γ1 (t - T*)² + γ2`, kernel `A e^{-b(t-s)}`
    /// and `θ = (γ1 (2), γ2 (2), A row-major (4), b)`.
    pub fn quadratic_hawkes_2d(horizon: TimeHorizon, n: u64, space: ParamSpace) -> Self {
        let p = |i: usize| Coef::Param { param: i };
        Self {
            d: 2,
            horizon,
            n,
            baseline: BaselineSpec::CenteredQuadratic { curvature: vec![p(0), p(1)], level: vec![p(2), p(3)] },
            kernel: KernelSpec::Exponential { a: vec![vec![p(4), p(5)], vec![p(6), p(7)]], b: p(8) },
            covariate: CovariateSpec::SelfExciting,
            param_space: space,
            require_positive: true,
        }
    }

    pub fn with_n(&self, n: u64) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn p(&self) -> usize {
        self.param_space.dim()
    }

    pub fn d0(&self) -> usize {
        self.covariate.d0(self.d)
    }

    pub fn n_f64(&self) -> f64 {
        self.n as f64
    }

    /// Shape and index consistency of all parts.
    pub fn check_shapes(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::ModelDefinition("d must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::ModelDefinition("n must be positive".into()));
        }
        self.horizon.check()?;
        self.param_space.check()?;
        self.baseline.check(self.d, &self.horizon)?;
        let d0 = self.d0();
        if let Some(m) = self.kernel.scale_coefs() {
            if m.len() != self.d || m.iter().any(|r| r.len() != d0) {
                return Err(Error::ModelDefinition(format!(
                    "kernel must be {} x {d0} to match the covariate",
                    self.d
                )));
            }
        }
        if let KernelSpec::Tabulated { lag_step, values, .. } = &self.kernel {
            if !(*lag_step > 0.0) || values.len() < 2 {
                return Err(Error::ModelDefinition(
                    "tabulated kernel needs lag_step > 0 and at least two values".into(),
                ));
            }
        }
        let ext = self.covariate.external_dim();
        for j in self.covariate.external_jumps() {
            if j.increments.len() != ext {
                return Err(Error::ModelDefinition(
                    "covariate jump has the wrong number of increments".into(),
                ));
            }
        }
        let p = self.p();
        for c in self.baseline.coefs().iter().chain(self.kernel.coefs().iter()) {
            if let Some(i) = c.index() {
                if i >= p {
                    return Err(Error::ModelDefinition(format!(
                        "coefficient refers to parameter {i} but p = {p}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.p() {
            return Err(Error::ModelDefinition(format!(
                "θ has length {} but p = {}",
                theta.len(),
                self.p()
            )));
        }
        if !self.param_space.contains_closed(theta) {
            return Err(Error::Domain(format!("θ = {theta:?} lies outside the parameter box")));
        }
        Ok(())
    }

    /// Which coordinates of `θ` enter the baseline.
    pub fn baseline_params(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.baseline.coefs().iter().filter_map(|c| c.index()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// `λ(t, θ)` given the history of `path` strictly before `t`.
pub fn intensity_at(model: &ModelSpec, theta: &[f64], t: f64, path: &PointPath) -> Result<Vec<f64>> {
    model.check_shapes()?;
    model.check_theta(theta)?;
    let h = &model.horizon;
    if !(t >= h.t0 && t <= h.t1) {
        return Err(Error::Domain(format!("t = {t} outside [{}, {}]", h.t0, h.t1)));
    }
    let mut state = BaselineState::new(&model.baseline);
    for (s, c) in path.all_events() {
        if s < t {
            state.on_event(&model.baseline, c);
        }
    }
    let d0 = model.d0();
    let shape = model.kernel.shape(theta);
    let mut phi = vec![0.0; d0];
    if !model.kernel.is_zero() {
        for jump in path.covariate_jumps(model) {
            if jump.time < t {
                phi[jump.col] += jump.size * shape.jet(t - jump.time, 0).v;
            }
        }
    }
    let scale = model.kernel.scale_values(theta);
    Ok((0..model.d)
        .map(|a| {
            let g = model.baseline.value(a, t, theta, h, &state);
            let k: f64 = if scale.is_empty() {
                0.0
            } else {
                (0..d0).map(|j| scale[a * d0 + j] * phi[j]).sum()
            };
            g + k
        })
        .collect())
}

/// One entry of a [`ValidationReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Offending `(t, θ)` when a check fails.
    pub witness_t: Option<f64>,
    pub witness_theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const CHECK_SHAPES: &str = "shape_consistency";
pub const CHECK_BASELINE_NONNEG: &str = "baseline_nonnegative";
pub const CHECK_KERNEL_NONNEG: &str = "kernel_nonnegative";
pub const CHECK_BASELINE_POSITIVE: &str = "baseline_strictly_positive";

/// Grid resolution (points along the time axis) for baseline screening.
pub const DEFAULT_VALIDATION_GRID: usize = 512;

pub fn validate_model(model: &ModelSpec) -> ValidationReport {
    validate_model_with_grid(model, DEFAULT_VALIDATION_GRID)
}

/// Points of the closed box to screen for a function that is affine in the listed
/// coordinates: all corners when there are few, otherwise a deterministic grid sample.
fn screening_points(space: &ParamSpace, coords: &[usize], per_axis: usize) -> Vec<Vec<f64>> {
    let center = space.center();
    let k = coords.len();
    if k <= 12 {
        (0..1usize << k)
            .map(|mask| {
                let mut th = center.clone();
                for (bit, &i) in coords.iter().enumerate() {
                    th[i] = if mask >> bit & 1 == 1 { space.upper[i] } else { space.lower[i] };
                }
                th
            })
            .collect()
    } else {
        let mut rng = crate::rng::StreamRng::new(0x5eed, 0);
        (0..4096)
            .map(|_| {
                let mut th = center.clone();
                for &i in coords {
                    let u = rng.below(per_axis) as f64 / (per_axis - 1) as f64;
                    th[i] = space.lower[i] + u * (space.upper[i] - space.lower[i]);
                }
                th
            })
            .collect()
    }
}

pub fn validate_model_with_grid(model: &ModelSpec, grid: usize) -> ValidationReport {
    let mut checks = Vec::new();
    let shapes = model.check_shapes();
    checks.push(ValidationCheck {
        name: CHECK_SHAPES.into(),
        passed: shapes.is_ok(),
        detail: match &shapes {
            Ok(()) => "ok".into(),
            Err(e) => format!("{e}"),
        },
        witness_t: None,
        witness_theta: None,
    });
    if shapes.is_err() {
        return ValidationReport { checks };
    }
    let h = &model.horizon;
    let grid = grid.max(2);
    let bparams = model.baseline_params();
    let points = screening_points(&model.param_space, &bparams, grid);
    let state = BaselineState::new(&model.baseline);
    let mut min_g = f64::INFINITY;
    let mut witness: Option<(f64, Vec<f64>)> = None;
    for th in &points {
        for k in 0..grid {
            let t = h.t0 + (h.t1 - h.t0) * k as f64 / (grid - 1) as f64;
            for a in 0..model.d {
                let g = if model.baseline.is_path_dependent() {
                    // queue sizes are nonnegative, so only the rate matters
                    let mut m = f64::INFINITY;
                    model.baseline.for_each_term(a, t, h, &state, |c, _| m = m.min(c.value(th)));
                    m
                } else {
                    model.baseline.value(a, t, th, h, &state)
                };
                if g < min_g {
                    min_g = g;
                    witness = Some((t, th.clone()));
                }
            }
        }
    }
    let nonneg = min_g >= 0.0;
    checks.push(ValidationCheck {
        name: CHECK_BASELINE_NONNEG.into(),
        passed: nonneg,
        detail: format!("min baseline over grid = {min_g:.6e}"),
        witness_t: if nonneg { None } else { witness.as_ref().map(|w| w.0) },
        witness_theta: if nonneg { None } else { witness.as_ref().map(|w| w.1.clone()) },
    });

    let mut kernel_ok = true;
    let mut kdetail = String::from("ok");
    let mut kwitness = None;
    if let Some(m) = model.kernel.scale_coefs() {
        for c in m.iter().flatten() {
            let (lo, _) = c.range(&model.param_space);
            if lo < 0.0 {
                kernel_ok = false;
                kdetail = format!("kernel scale can be negative (min {lo})");
                if let Some(i) = c.index() {
                    let mut th = model.param_space.center();
                    th[i] = lo;
                    kwitness = Some(th);
                }
            }
        }
    }
    match &model.kernel {
        KernelSpec::Tabulated { values, .. } if values.iter().any(|v| *v < 0.0) => {
            kernel_ok = false;
            kdetail = "tabulated kernel has negative values".into();
        }
        KernelSpec::PowerLawExp { power, .. } => {
            let (lo, _) = power.range(&model.param_space);
            if lo <= -1.0 {
                kernel_ok = false;
                kdetail = format!("power-law exponent {lo} makes the kernel non-integrable");
            }
        }
        _ => {}
    }
    checks.push(ValidationCheck {
        name: CHECK_KERNEL_NONNEG.into(),
        passed: kernel_ok,
        detail: kdetail,
        witness_t: None,
        witness_theta: kwitness,
    });

    if model.require_positive {
        let pos = min_g > 0.0;
        checks.push(ValidationCheck {
            name: CHECK_BASELINE_POSITIVE.into(),
            passed: pos,
            detail: format!("min baseline over grid = {min_g:.6e}"),
            witness_t: if pos { None } else { witness.as_ref().map(|w| w.0) },
            witness_theta: if pos { None } else { witness.map(|w| w.1) },
        });
    }
    ValidationReport { checks }
}
