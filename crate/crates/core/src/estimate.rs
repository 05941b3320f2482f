//! Quasi maximum likelihood and quasi Bayesian estimation.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::likelihood::{evaluate, quasi_loglik, LikelihoodEval, Order};
use crate::linalg::{from_rows, to_rows};
use crate::model::{ModelSpec, ParamSpace};
use crate::quad::{gauss_legendre, ExactSum};
use crate::rng::StreamRng;
use crate::simulate::PointPath;
use crate::special::{chi2_quantile, normal_quantile};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmleOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    /// Relative tolerance on the projected gradient: `‖g‖ ≤ tol · (1 + |ℓn|)`.
    pub grad_tol: f64,
    /// Seed of the Latin-hypercube start design.
    pub seed: u64,
    pub trace: bool,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self { n_starts: 8, max_iter: 500, grad_tol: 1e-6, seed: 0x51a7, trace: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub start: usize,
    pub iter: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmleResult {
    pub theta_hat: Vec<f64>,
    pub loglik: f64,
    /// Norm of the gradient projected onto the feasible directions of the box.
    pub grad_norm: f64,
    /// `Γn(θ̂) = -n⁻¹ ∂²ℓn(θ̂)`.
    pub observed_info: Vec<Vec<f64>>,
    /// `sqrt(diag((n Γn)⁻¹))`; absent when `Γn(θ̂)` is not positive definite.
    pub stderr: Option<Vec<f64>>,
    pub n_restarts_used: usize,
    pub converged: bool,
    pub at_boundary: bool,
    pub n: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TracePoint>,
}

struct Local {
    theta: Vec<f64>,
    eval: LikelihoodEval,
    grad_norm: f64,
    converged: bool,
}

fn eval2(model: &ModelSpec, path: &PointPath, theta: &[f64]) -> Result<LikelihoodEval> {
    evaluate(model, theta, path, Order::Hessian)
}

fn projected_gradient(space: &ParamSpace, theta: &[f64], g: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut pg = g.to_vec();
    let mut active = vec![false; g.len()];
    for i in 0..g.len() {
        let eps = 1e-12 * (space.upper[i] - space.lower[i]);
        if (theta[i] <= space.lower[i] + eps && g[i] < 0.0) || (theta[i] >= space.upper[i] - eps && g[i] > 0.0) {
            pg[i] = 0.0;
            active[i] = true;
        }
    }
    (pg, active)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton direction on the free coordinates when the reduced negative Hessian is
/// positive definite.
fn newton_direction(e: &LikelihoodEval, active: &[bool]) -> Option<Vec<f64>> {
    let free: Vec<usize> = (0..active.len()).filter(|&i| !active[i]).collect();
    if free.is_empty() {
        return None;
    }
    let k = free.len();
    let m = DMatrix::from_fn(k, k, |a, b| -e.hessian[free[a]][free[b]]);
    let chol = Cholesky::new(m)?;
    let rhs = DVector::from_fn(k, |a, _| e.gradient[free[a]]);
    let d = chol.solve(&rhs);
    let mut out = vec![0.0; active.len()];
    for (a, &i) in free.iter().enumerate() {
        out[i] = d[a];
    }
    Some(out)
}

fn scaled_gradient(e: &LikelihoodEval, pg: &[f64], space: &ParamSpace) -> Vec<f64> {
    let w = space.widths();
    pg.iter()
        .enumerate()
        .map(|(i, g)| {
            let c = e.hessian[i][i].abs();
            if c > 0.0 {
                g / c
            } else {
                g.signum() * w[i]
            }
        })
        .collect()
}

fn line_search(
    model: &ModelSpec,
    path: &PointPath,
    theta: &[f64],
    cur: &LikelihoodEval,
    dir: &[f64],
) -> Result<Option<Vec<f64>>> {
    let space = &model.param_space;
    let mut alpha = 1.0;
    for _ in 0..60 {
        let mut cand: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t + alpha * d).collect();
        space.project(&mut cand);
        let step: Vec<f64> = cand.iter().zip(theta).map(|(a, b)| a - b).collect();
        if norm(&step) == 0.0 {
            return Ok(None);
        }
        let v = quasi_loglik(model, &cand, path)?;
        let slope: f64 = cur.gradient.iter().zip(&step).map(|(g, s)| g * s).sum();
        if v.is_finite() && v >= cur.value + 1e-4 * slope && v >= cur.value {
            return Ok(Some(cand));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

fn ascend(
    model: &ModelSpec,
    path: &PointPath,
    start: Vec<f64>,
    opts: &QmleOptions,
    start_idx: usize,
    trace: &mut Vec<TracePoint>,
) -> Result<Option<Local>> {
    let space = &model.param_space;
    let mut theta = start;
    let mut e = eval2(model, path, &theta)?;
    if !e.feasible {
        return Ok(None);
    }
    let mut converged = false;
    let mut gnorm = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let (pg, active) = projected_gradient(space, &theta, &e.gradient);
        gnorm = norm(&pg);
        if opts.trace {
            trace.push(TracePoint { start: start_idx, iter, theta: theta.clone(), loglik: e.value, grad_norm: gnorm });
        }
        if gnorm <= opts.grad_tol * (1.0 + e.value.abs()) {
            converged = true;
            polish(model, path, &mut theta, &mut e, &mut gnorm)?;
            break;
        }
        let mut next = None;
        if let Some(d) = newton_direction(&e, &active) {
            next = line_search(model, path, &theta, &e, &d)?;
        }
        if next.is_none() {
            let d = scaled_gradient(&e, &pg, space);
            next = line_search(model, path, &theta, &e, &d)?;
        }
        let Some(cand) = next else {
            // no ascent possible at working precision
            converged = gnorm <= 1e3 * opts.grad_tol * (1.0 + e.value.abs());
            break;
        };
        let ne = eval2(model, path, &cand)?;
        let stalled = (ne.value - e.value).abs() <= 1e-15 * (1.0 + e.value.abs())
            && norm(&cand.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>()) <= 1e-14 * (1.0 + norm(&theta));
        theta = cand;
        e = ne;
        if stalled {
            let (pg, _) = projected_gradient(space, &theta, &e.gradient);
            gnorm = norm(&pg);
            converged = gnorm <= 1e3 * opts.grad_tol * (1.0 + e.value.abs());
            break;
        }
    }
    if !converged {
        let (pg, _) = projected_gradient(space, &theta, &e.gradient);
        gnorm = norm(&pg);
        converged = gnorm <= opts.grad_tol * (1.0 + e.value.abs());
    }
    Ok(Some(Local { theta, eval: e, grad_norm: gnorm, converged }))
}

/// Undamped Newton steps, kept while the projected gradient shrinks, take a converged
/// point to working precision. Near the optimum the gain in `ℓn` is below its rounding
/// noise, so a line search on values would reject them.
fn polish(model: &ModelSpec, path: &PointPath, theta: &mut Vec<f64>, e: &mut LikelihoodEval, gnorm: &mut f64) -> Result<()> {
    let space = &model.param_space;
    for _ in 0..3 {
        let (_, active) = projected_gradient(space, theta, &e.gradient);
        let Some(d) = newton_direction(e, &active) else { break };
        let mut cand: Vec<f64> = theta.iter().zip(&d).map(|(t, s)| t + s).collect();
        space.project(&mut cand);
        let ne = eval2(model, path, &cand)?;
        if !ne.feasible || !ne.value.is_finite() || ne.value < e.value - 1e-12 * (1.0 + e.value.abs()) {
            break;
        }
        let (pg, _) = projected_gradient(space, &cand, &ne.gradient);
        let g = norm(&pg);
        if !(g < *gnorm) {
            break;
        }
        *theta = cand;
        *e = ne;
        *gnorm = g;
    }
    Ok(())
}

/// Box center followed by a Latin-hypercube design.
pub fn start_points(space: &ParamSpace, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let p = space.dim();
    let mut out = vec![space.center()];
    let m = count.saturating_sub(1);
    if m == 0 {
        return out;
    }
    let mut rng = StreamRng::new(seed, 0);
    let mut cols: Vec<Vec<usize>> = Vec::with_capacity(p);
    for _ in 0..p {
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        cols.push(perm);
    }
    for k in 0..m {
        let th = (0..p)
            .map(|i| {
                let u = (cols[i][k] as f64 + rng.uniform()) / m as f64;
                // keep starts off the faces
                let u = 0.02 + 0.96 * u;
                space.lower[i] + u * (space.upper[i] - space.lower[i])
            })
            .collect();
        out.push(th);
    }
    out.truncate(count.max(1));
    out
}

/// Maximizer of `ℓn` over the closed parameter box.
pub fn qmle(model: &ModelSpec, path: &PointPath, opts: &QmleOptions) -> Result<QmleResult> {
    model.check_shapes()?;
    let starts = start_points(&model.param_space, opts.n_starts, opts.seed);
    let mut best: Option<Local> = None;
    let mut used = 0;
    let mut trace = Vec::new();
    for (k, s) in starts.into_iter().enumerate() {
        let Some(loc) = ascend(model, path, s, opts, k, &mut trace)? else { continue };
        used += 1;
        // ties keep the earlier start
        if best.as_ref().map_or(true, |b| loc.eval.value > b.eval.value) {
            best = Some(loc);
        }
    }
    let best = best.ok_or_else(|| Error::EstimationFailed("every start point is infeasible".into()))?;
    let n = model.n_f64();
    let p = model.p();
    let space = &model.param_space;
    let at_boundary = (0..p).any(|i| {
        let eps = 1e-10 * (space.upper[i] - space.lower[i]);
        best.theta[i] <= space.lower[i] + eps || best.theta[i] >= space.upper[i] - eps
    });
    let neg_h = DMatrix::from_fn(p, p, |i, j| -best.eval.hessian[i][j]);
    let stderr = Cholesky::new(neg_h.clone()).map(|c| {
        let inv = c.inverse();
        (0..p).map(|i| inv[(i, i)].sqrt()).collect()
    });
    Ok(QmleResult {
        theta_hat: best.theta,
        loglik: best.eval.value,
        grad_norm: best.grad_norm,
        observed_info: to_rows(&(neg_h / n)),
        stderr,
        n_restarts_used: used,
        converged: best.converged,
        at_boundary,
        n: model.n,
        trace,
    })
}

/// Prior density on the parameter box.
pub enum Prior {
    /// Constant density `scale` on the box.
    Uniform { scale: f64 },
    Custom(Box<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Prior {
    pub fn uniform() -> Self {
        Prior::Uniform { scale: 1.0 }
    }

    fn density(&self, theta: &[f64]) -> Result<f64> {
        let v = match self {
            Prior::Uniform { scale } => *scale,
            Prior::Custom(f) => f(theta),
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("prior density {v} at {theta:?} is not positive and finite")));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QbeMethod {
    TensorQuadrature,
    ImportanceSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QbeOptions {
    /// Gauss–Legendre nodes per axis.
    pub nodes: usize,
    /// Half-width of the integration window in standard errors around `θ̂`
    /// (intersected with the box); `None` integrates over the whole box.
    pub window_stderr: Option<f64>,
    pub is_draws: usize,
    pub seed: u64,
    pub method: Option<QbeMethod>,
    pub qmle: QmleOptions,
}

impl Default for QbeOptions {
    fn default() -> Self {
        Self {
            nodes: 64,
            window_stderr: Some(8.0),
            is_draws: 50_000,
            seed: 0x9be,
            method: None,
            qmle: QmleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QbeResult {
    pub theta_tilde: Vec<f64>,
    /// `log ∫ exp(ℓn(θ)) ϖ(θ) dθ` over the integration domain.
    pub log_normalizer: f64,
    pub method: QbeMethod,
    /// Quadrature: change against a half-node rule. Sampling: largest delta-method standard error.
    pub error_estimate: f64,
}

/// Posterior mean under `prior` for the quasi likelihood of `path`.
pub fn qbe(model: &ModelSpec, path: &PointPath, prior: &Prior, opts: &QbeOptions) -> Result<QbeResult> {
    let fit = qmle(model, path, &opts.qmle)?;
    qbe_with_qmle(model, path, prior, opts, &fit)
}

/// As [`qbe`] reusing an existing maximization.
pub fn qbe_with_qmle(
    model: &ModelSpec,
    path: &PointPath,
    prior: &Prior,
    opts: &QbeOptions,
    fit: &QmleResult,
) -> Result<QbeResult> {
    let log_h = |th: &[f64]| quasi_loglik(model, th, path);
    let cov = fit.stderr.as_ref().map(|_| {
        let n = fit.n as f64;
        let info = from_rows(&fit.observed_info) * n;
        info.try_inverse().map(|m| to_rows(&m))
    });
    let cov = cov.flatten();
    posterior_mean(&log_h, &model.param_space, &fit.theta_hat, fit.loglik, fit.stderr.as_deref(), cov.as_deref(), prior, opts)
}

/// Posterior mean of `exp(log_h) · prior` on `space`, centered at `(center, center_value)`.
///
/// `stderr` sets the quadrature window and `cov` the sampling proposal; both are optional.
#[allow(clippy::too_many_arguments)]
pub fn posterior_mean(
    log_h: &dyn Fn(&[f64]) -> Result<f64>,
    space: &ParamSpace,
    center: &[f64],
    center_value: f64,
    stderr: Option<&[f64]>,
    cov: Option<&[Vec<f64>]>,
    prior: &Prior,
    opts: &QbeOptions,
) -> Result<QbeResult> {
    if let Prior::Uniform { scale } = prior {
        if !(*scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config("uniform prior scale must be positive".into()));
        }
    }
    // densities enter relative to the center, so rescaling the prior cancels exactly
    let prior_ref = prior.density(center)?;
    let p = space.dim();
    let method = opts.method.unwrap_or(if p <= 3 { QbeMethod::TensorQuadrature } else { QbeMethod::ImportanceSampling });
    match method {
        QbeMethod::TensorQuadrature => {
            let (lo, hi) = window(space, center, stderr, opts.window_stderr);
            let full = tensor_mean(log_h, &lo, &hi, opts.nodes.max(2), center_value, prior, prior_ref)?;
            let half = tensor_mean(log_h, &lo, &hi, (opts.nodes / 2).max(2), center_value, prior, prior_ref)?;
            let err = full.0.iter().zip(&half.0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            Ok(QbeResult { theta_tilde: full.0, log_normalizer: full.1 + prior_ref.ln(), method, error_estimate: err })
        }
        QbeMethod::ImportanceSampling => {
            let mut r = importance_mean(log_h, space, center, center_value, cov, prior, prior_ref, opts)?;
            r.log_normalizer += prior_ref.ln();
            Ok(r)
        }
    }
}

fn window(space: &ParamSpace, center: &[f64], stderr: Option<&[f64]>, k: Option<f64>) -> (Vec<f64>, Vec<f64>) {
    match (stderr, k) {
        (Some(se), Some(k)) => {
            let lo = (0..space.dim()).map(|i| (center[i] - k * se[i]).max(space.lower[i])).collect();
            let hi = (0..space.dim()).map(|i| (center[i] + k * se[i]).min(space.upper[i])).collect();
            (lo, hi)
        }
        _ => (space.lower.clone(), space.upper.clone()),
    }
}

fn tensor_mean(
    log_h: &dyn Fn(&[f64]) -> Result<f64>,
    lo: &[f64],
    hi: &[f64],
    nodes: usize,
    center_value: f64,
    prior: &Prior,
    prior_ref: f64,
) -> Result<(Vec<f64>, f64)> {
    let p = lo.len();
    let (xi, wi) = gauss_legendre(nodes);
    let mid: Vec<f64> = (0..p).map(|i| 0.5 * (lo[i] + hi[i])).collect();
    let half: Vec<f64> = (0..p).map(|i| 0.5 * (hi[i] - lo[i])).collect();
    let total = nodes.pow(p as u32);
    let mut logs = Vec::with_capacity(total);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; p];
    let mut th = vec![0.0; p];
    let mut off = vec![0.0; p];
    for _ in 0..total {
        let mut logw = 0.0;
        for i in 0..p {
            off[i] = half[i] * xi[idx[i]];
            th[i] = mid[i] + off[i];
            logw += (wi[idx[i]] * half[i]).ln();
        }
        let l = log_h(&th)?;
        let lp = (prior.density(&th)? / prior_ref).ln();
        logs.push(l - center_value + lp + logw);
        offs.push(off.clone());
        for i in (0..p).rev() {
            idx[i] += 1;
            if idx[i] < nodes {
                break;
            }
            idx[i] = 0;
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NumericalFailure("posterior mass underflows on every node".into()));
    }
    // offsets from the window midpoint are summed exactly, so a symmetric field on a
    // symmetric window returns the midpoint itself
    let mut z = ExactSum::new();
    let mut num: Vec<ExactSum> = (0..p).map(|_| ExactSum::new()).collect();
    for (l, o) in logs.iter().zip(&offs) {
        let w = (l - m).exp();
        z.add(w);
        for i in 0..p {
            num[i].add(w * o[i]);
        }
    }
    let z = z.value();
    if !(z > 0.0) {
        return Err(Error::NumericalFailure("posterior normalizer underflows".into()));
    }
    let mean = (0..p).map(|i| (mid[i] + num[i].value() / z).clamp(lo[i], hi[i])).collect();
    Ok((mean, z.ln() + m + center_value))
}

#[allow(clippy::too_many_arguments)]
fn importance_mean(
    log_h: &dyn Fn(&[f64]) -> Result<f64>,
    space: &ParamSpace,
    center: &[f64],
    center_value: f64,
    cov: Option<&[Vec<f64>]>,
    prior: &Prior,
    prior_ref: f64,
    opts: &QbeOptions,
) -> Result<QbeResult> {
    let p = space.dim();
    let mut rng = StreamRng::new(opts.seed, 1);
    // Gaussian proposal at the maximizer, uniform on the box when the curvature is unusable
    let chol = cov.and_then(|c| Cholesky::new(from_rows(c)));
    let draws = opts.is_draws.max(2);
    let mut logs = Vec::with_capacity(draws);
    let mut pts = Vec::with_capacity(draws);
    let vol: f64 = space.widths().iter().map(|w| w.ln()).sum();
    for _ in 0..draws {
        let (th, log_q) = match &chol {
            Some(c) => {
                let z = DVector::from_fn(p, |_, _| rng.normal());
                let x = c.l() * &z;
                let th: Vec<f64> = (0..p).map(|i| center[i] + x[i]).collect();
                let log_det: f64 = (0..p).map(|i| c.l()[(i, i)].ln()).sum();
                let lq = -0.5 * z.dot(&z) - log_det - 0.5 * p as f64 * (2.0 * core::f64::consts::PI).ln();
                (th, lq)
            }
            None => {
                let th: Vec<f64> = (0..p).map(|i| space.lower[i] + rng.uniform() * (space.upper[i] - space.lower[i])).collect();
                (th, -vol)
            }
        };
        if !space.contains_closed(&th) {
            continue;
        }
        let l = log_h(&th)?;
        let lp = (prior.density(&th)? / prior_ref).ln();
        logs.push(l - center_value + lp - log_q);
        pts.push(th);
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NumericalFailure("importance weights all vanish".into()));
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut mean = vec![0.0; p];
    for (wk, th) in w.iter().zip(&pts) {
        for i in 0..p {
            mean[i] += wk * th[i];
        }
    }
    mean.iter_mut().for_each(|x| *x /= z);
    let mut se = 0.0f64;
    for i in 0..p {
        let v: f64 = w.iter().zip(&pts).map(|(wk, th)| wk * wk * (th[i] - mean[i]).powi(2)).sum::<f64>() / (z * z);
        se = se.max(v.sqrt());
    }
    space.project(&mut mean);
    let log_norm = (z / draws as f64).ln() + m + center_value;
    Ok(QbeResult { theta_tilde: mean, log_normalizer: log_norm, method: QbeMethod::ImportanceSampling, error_estimate: se })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub level: f64,
    pub center: Vec<f64>,
    /// Per-coordinate intervals `θ̂_i ± z · stderr_i`.
    pub intervals: Vec<(f64, f64)>,
    /// Ellipsoid `{θ : (θ - θ̂)ᵀ M (θ - θ̂) ≤ radius_sq}` with `M = n Γn(θ̂)`.
    pub ellipsoid_matrix: Vec<Vec<f64>>,
    pub radius_sq: f64,
}

impl ConfidenceRegion {
    pub fn contains(&self, theta: &[f64]) -> bool {
        let p = self.center.len();
        let mut q = 0.0;
        for i in 0..p {
            for j in 0..p {
                q += (theta[i] - self.center[i]) * self.ellipsoid_matrix[i][j] * (theta[j] - self.center[j]);
            }
        }
        q <= self.radius_sq
    }

    pub fn interval_contains(&self, i: usize, x: f64) -> bool {
        x >= self.intervals[i].0 && x <= self.intervals[i].1
    }
}

pub fn confidence_region(result: &QmleResult, level: f64) -> Result<ConfidenceRegion> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Domain(format!("confidence level {level} must lie in [0, 1)")));
    }
    let se = result
        .stderr
        .as_ref()
        .ok_or_else(|| Error::DegenerateInformation("observed information is not positive definite".into()))?;
    let z = if level == 0.0 { 0.0 } else { normal_quantile(0.5 + 0.5 * level) };
    let p = se.len();
    let n = result.n as f64;
    Ok(ConfidenceRegion {
        level,
        center: result.theta_hat.clone(),
        intervals: (0..p).map(|i| (result.theta_hat[i] - z * se[i], result.theta_hat[i] + z * se[i])).collect(),
        ellipsoid_matrix: result.observed_info.iter().map(|r| r.iter().map(|x| x * n).collect()).collect(),
        radius_sq: if level == 0.0 { 0.0 } else { chi2_quantile(p as f64, level) },
    })
}
