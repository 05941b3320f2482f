//! Monte Carlo studies of the estimators against their Gaussian limit, and the
//! large-deviation probe of the local likelihood-ratio field.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use qlapp_core::asymptotics::{default_step, gamma_matrix, limit_intensity};
use qlapp_core::estimate::{confidence_region, qbe_with_qmle, qmle, Prior, QbeOptions, QmleOptions};
use qlapp_core::likelihood::quasi_loglik;
use qlapp_core::linalg::{from_rows, inverse, sym_power, to_rows};
use qlapp_core::rng::StreamRng;
use qlapp_core::simulate::{simulate, SimMethod, SimOptions};
use qlapp_core::special::{anderson_darling_normal, anderson_darling_pvalue, wilson_interval};
use qlapp_core::{KernelSpec, ModelSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::io::{read_json, read_model, write_json};

/// Model given inline or as a path to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Inline(Box<ModelSpec>),
    File(PathBuf),
}

impl ModelSource {
    pub fn load(&self) -> Result<ModelSpec> {
        match self {
            ModelSource::Inline(m) => {
                m.check_shapes()?;
                Ok((**m).clone())
            }
            ModelSource::File(p) => read_model(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Qmle,
    Qbe,
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Qmle, Estimator::Qbe]
}

fn default_moment_orders() -> Vec<u32> {
    vec![1, 2, 4]
}

fn default_level() -> f64 {
    0.95
}

fn default_gaussian_draws() -> usize {
    1_000_000
}

fn default_qbe() -> QbeOptions {
    QbeOptions { nodes: 16, ..QbeOptions::default() }
}

fn default_qmle() -> QmleOptions {
    QmleOptions { n_starts: 4, ..QmleOptions::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub model: ModelSource,
    pub theta_star: Vec<f64>,
    pub n_values: Vec<u64>,
    pub replicates: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    /// Orders `k` of the moment functionals `|u|^k`.
    #[serde(default = "default_moment_orders")]
    pub moment_orders: Vec<u32>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Defaults to exact simulation for exponential kernels and thinning otherwise.
    #[serde(default)]
    pub sim_method: Option<SimMethod>,
    #[serde(default = "default_qmle")]
    pub qmle: QmleOptions,
    #[serde(default = "default_qbe")]
    pub qbe: QbeOptions,
    /// Nominal level of the coverage intervals.
    #[serde(default = "default_level")]
    pub level: f64,
    /// Draws for Gaussian-limit moments without a closed form.
    #[serde(default = "default_gaussian_draws")]
    pub gaussian_draws: usize,
}

impl McConfig {
    pub fn new(model: ModelSpec, theta_star: Vec<f64>, n_values: Vec<u64>, replicates: usize, seed: u64) -> Self {
        Self {
            model: ModelSource::Inline(Box::new(model)),
            theta_star,
            n_values,
            replicates,
            estimators: default_estimators(),
            seed,
            moment_orders: default_moment_orders(),
            out_dir: None,
            sim_method: None,
            qmle: default_qmle(),
            qbe: default_qbe(),
            level: default_level(),
            gaussian_draws: default_gaussian_draws(),
        }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.replicates < 2 {
            return Err(AppError::Invalid("replicates must be at least 2".into()));
        }
        if self.n_values.is_empty() || self.n_values[0] == 0 || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AppError::Invalid("n_values must be positive and strictly increasing".into()));
        }
        if self.estimators.is_empty() {
            return Err(AppError::Invalid("no estimator selected".into()));
        }
        if self.moment_orders.contains(&0) {
            return Err(AppError::Invalid("moment orders must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(AppError::Invalid("level must lie in (0, 1)".into()));
        }
        model.check_theta(&self.theta_star)?;
        if !model.param_space.contains_open(&self.theta_star) {
            return Err(AppError::Invalid("θ* must lie inside the open parameter box".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    /// SHA-256 of the config; the output directory does not affect results and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub simulation: usize,
    pub qmle: usize,
    pub qbe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityStat {
    pub coordinate: usize,
    pub anderson_darling: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub k: u32,
    /// `E|√n(θ̂ - θ*)|^k` over the successful replicates.
    pub empirical: f64,
    /// `E|Γ^{-1/2} ζ|^k`.
    pub gaussian: Option<f64>,
    /// `|empirical - gaussian| / gaussian`.
    pub rel_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub successes: usize,
    pub bias: Vec<f64>,
    /// Standard error of each bias coordinate.
    pub bias_se: Vec<f64>,
    /// Sample covariance of `√n(θ̂ - θ*)`.
    pub covariance: Vec<Vec<f64>>,
    /// `‖cov - Γ⁻¹‖_F / ‖Γ⁻¹‖_F`.
    pub frobenius_gap: Option<f64>,
    /// Per coordinate of `Γ^{1/2} √n(θ̂ - θ*)` against N(0, 1).
    pub normality: Vec<NormalityStat>,
    pub moments: Vec<MomentRow>,
    /// Fraction of successful replicates whose interval covers `θ*_i`; QMLE only.
    pub coverage: Option<Vec<f64>>,
    /// `√n(θ̂ - θ*)` per successful replicate, in replicate order.
    pub scaled_errors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NSummary {
    pub n: u64,
    pub replicates: usize,
    pub failures: FailureCounts,
    pub qmle: Option<EstimatorSummary>,
    pub qbe: Option<EstimatorSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub config_hash: String,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    pub gamma: Option<Vec<Vec<f64>>>,
    pub gamma_inv: Option<Vec<Vec<f64>>>,
    /// `(k, E|Γ^{-1/2} ζ|^k)`.
    pub gaussian_moments: Vec<(u32, f64)>,
    /// Set when `Γ` could not be computed, so only raw statistics are reported.
    pub diagnostics_only: bool,
    pub per_n: Vec<NSummary>,
}

impl McSummary {
    pub fn at(&self, n: u64) -> Option<&NSummary> {
        self.per_n.iter().find(|s| s.n == n)
    }
}

/// `E|X|^k` for `X ~ N(0, Σ)`: closed forms for `k = 2, 4` and for `k = 1` when `p = 1`,
/// Monte Carlo with `draws` samples otherwise.
pub fn gaussian_moment(sigma: &DMatrix<f64>, k: u32, draws: usize, seed: u64) -> Result<f64> {
    let p = sigma.nrows();
    let tr = sigma.trace();
    match k {
        2 => return Ok(tr),
        4 => return Ok(tr * tr + 2.0 * (sigma * sigma).trace()),
        1 if p == 1 => return Ok((sigma[(0, 0)] * 2.0 / std::f64::consts::PI).sqrt()),
        _ => {}
    }
    let root = sym_power(sigma, 0.5)?;
    let mut rng = StreamRng::new(seed, u64::MAX - k as u64);
    let mut z = DVector::zeros(p);
    let mut acc = 0.0;
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = rng.normal();
        }
        acc += (&root * &z).norm().powi(k as i32);
    }
    Ok(acc / draws as f64)
}

fn sim_options(model: &ModelSpec, method: Option<SimMethod>, seed: u64, stream: u64) -> SimOptions {
    let exact = matches!(model.kernel, KernelSpec::Exponential { .. });
    let base = match method {
        Some(SimMethod::Thinning) => SimOptions::thinning(seed),
        Some(SimMethod::ExpExact) => SimOptions::exp_exact(seed),
        None if exact => SimOptions::exp_exact(seed),
        None => SimOptions::thinning(seed),
    };
    base.with_stream(stream)
}

/// Outcome of one replicate.
#[derive(Clone, Debug)]
enum Replicate {
    SimFailed,
    QmleFailed,
    Done { theta_hat: Vec<f64>, covers: Option<Vec<bool>>, theta_tilde: Option<Vec<f64>> },
}

fn run_replicate(model: &ModelSpec, cfg: &McConfig, stream: u64) -> Replicate {
    let Ok(path) = simulate(model, &cfg.theta_star, &sim_options(model, cfg.sim_method, cfg.seed, stream)) else {
        return Replicate::SimFailed;
    };
    let Ok(fit) = qmle(model, &path, &cfg.qmle) else {
        return Replicate::QmleFailed;
    };
    let covers = confidence_region(&fit, cfg.level)
        .ok()
        .map(|ci| (0..cfg.theta_star.len()).map(|i| ci.interval_contains(i, cfg.theta_star[i])).collect());
    let theta_tilde = if cfg.estimators.contains(&Estimator::Qbe) {
        qbe_with_qmle(model, &path, &Prior::uniform(), &cfg.qbe, &fit).ok().map(|r| r.theta_tilde)
    } else {
        None
    };
    Replicate::Done { theta_hat: fit.theta_hat, covers, theta_tilde }
}

struct Limit<'a> {
    gamma_half: Option<DMatrix<f64>>,
    gamma_inv: Option<&'a DMatrix<f64>>,
    moments: &'a [(u32, f64)],
}

fn summarize(
    estimates: &[Vec<f64>],
    theta_star: &[f64],
    n: u64,
    lim: &Limit<'_>,
    orders: &[u32],
    covers: Option<&[Option<Vec<bool>>]>,
) -> Option<EstimatorSummary> {
    let m = estimates.len();
    if m < 2 {
        return None;
    }
    let p = theta_star.len();
    let sn = (n as f64).sqrt();
    let scaled: Vec<Vec<f64>> =
        estimates.iter().map(|th| th.iter().zip(theta_star).map(|(a, b)| sn * (a - b)).collect()).collect();
    let mf = m as f64;
    let mean: Vec<f64> = (0..p).map(|i| scaled.iter().map(|u| u[i]).sum::<f64>() / mf).collect();
    let mut cov = DMatrix::zeros(p, p);
    for u in &scaled {
        for i in 0..p {
            for j in 0..p {
                cov[(i, j)] += (u[i] - mean[i]) * (u[j] - mean[j]);
            }
        }
    }
    cov /= mf - 1.0;
    let bias: Vec<f64> = mean.iter().map(|x| x / sn).collect();
    let bias_se: Vec<f64> = (0..p).map(|i| (cov[(i, i)] / mf).sqrt() / sn).collect();
    let frobenius_gap = lim.gamma_inv.map(|gi| (&cov - gi).norm() / gi.norm());
    let normality = match &lim.gamma_half {
        Some(h) => {
            let z: Vec<DVector<f64>> = scaled.iter().map(|u| h * DVector::from_column_slice(u)).collect();
            (0..p)
                .map(|i| {
                    let xs: Vec<f64> = z.iter().map(|v| v[i]).collect();
                    let a2 = anderson_darling_normal(&xs);
                    NormalityStat { coordinate: i, anderson_darling: a2, p_value: anderson_darling_pvalue(m, a2) }
                })
                .collect()
        }
        None => Vec::new(),
    };
    let moments = orders
        .iter()
        .map(|&k| {
            let empirical =
                scaled.iter().map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt().powi(k as i32)).sum::<f64>() / mf;
            let gaussian = lim.moments.iter().find(|(kk, _)| *kk == k).map(|x| x.1);
            let rel_gap = gaussian.map(|g| (empirical - g).abs() / g);
            MomentRow { k, empirical, gaussian, rel_gap }
        })
        .collect();
    let coverage = covers.map(|cs| {
        (0..p).map(|i| cs.iter().filter(|c| c.as_ref().is_some_and(|v| v[i])).count() as f64 / mf).collect()
    });
    Some(EstimatorSummary {
        successes: m,
        bias,
        bias_se,
        covariance: to_rows(&cov),
        frobenius_gap,
        normality,
        moments,
        coverage,
        scaled_errors: scaled,
    })
}

/// Largest tolerated share of failed replicates at any `n`.
pub const MAX_FAILURE_RATE: f64 = 0.2;

/// Runs the study on the current rayon pool. Replicates run in parallel and are folded in
/// replicate order, so the summary does not depend on the number of threads.
pub fn mc_study(cfg: &McConfig) -> Result<McSummary> {
    let model = cfg.model.load()?;
    cfg.validate(&model)?;

    let gamma = limit_intensity(&model, &cfg.theta_star, default_step(&model.horizon))
        .and_then(|lim| gamma_matrix(&lim))
        .ok()
        .map(|g| from_rows(&g.gamma));
    let gamma_inv = gamma.as_ref().and_then(|g| inverse(g, "Γ").ok().map(|x| x.0));
    let mut gaussian_moments = Vec::new();
    if let Some(gi) = &gamma_inv {
        for &k in &cfg.moment_orders {
            gaussian_moments.push((k, gaussian_moment(gi, k, cfg.gaussian_draws, cfg.seed)?));
        }
    }
    let lim = Limit {
        gamma_half: gamma.as_ref().and_then(|g| sym_power(g, 0.5).ok()),
        gamma_inv: gamma_inv.as_ref(),
        moments: &gaussian_moments,
    };

    let mut per_n = Vec::with_capacity(cfg.n_values.len());
    for (idx, &n) in cfg.n_values.iter().enumerate() {
        let m = model.with_n(n);
        let reps: Vec<Replicate> = (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|r| run_replicate(&m, cfg, ((idx as u64) << 32) | r))
            .collect();
        let mut failures = FailureCounts::default();
        let mut hats = Vec::new();
        let mut covers = Vec::new();
        let mut tildes = Vec::new();
        for r in reps {
            match r {
                Replicate::SimFailed => failures.simulation += 1,
                Replicate::QmleFailed => failures.qmle += 1,
                Replicate::Done { theta_hat, covers: c, theta_tilde } => {
                    hats.push(theta_hat);
                    covers.push(c);
                    if cfg.estimators.contains(&Estimator::Qbe) {
                        match theta_tilde {
                            Some(t) => tildes.push(t),
                            None => failures.qbe += 1,
                        }
                    }
                }
            }
        }
        let failed = failures.simulation + failures.qmle + failures.qbe;
        if failed as f64 > MAX_FAILURE_RATE * cfg.replicates as f64 {
            return Err(AppError::Aborted(format!(
                "n = {n}: {failed} of {} replicates failed ({failures:?})",
                cfg.replicates
            )));
        }
        let qmle = if cfg.estimators.contains(&Estimator::Qmle) {
            summarize(&hats, &cfg.theta_star, n, &lim, &cfg.moment_orders, Some(&covers))
        } else {
            None
        };
        let qbe = summarize(&tildes, &cfg.theta_star, n, &lim, &cfg.moment_orders, None);
        per_n.push(NSummary { n, replicates: cfg.replicates, failures, qmle, qbe });
    }
    Ok(McSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        theta_star: cfg.theta_star.clone(),
        gamma: gamma.as_ref().map(to_rows),
        gamma_inv: gamma_inv.as_ref().map(to_rows),
        gaussian_moments,
        diagnostics_only: gamma_inv.is_none(),
        per_n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PldiOptions {
    /// Grid points per axis of the local parameter box; defaults to 61 for `p <= 2`
    /// and 11 for `p = 3`.
    pub per_axis: Option<usize>,
    pub refine: bool,
    pub sim_method: Option<SimMethod>,
    /// Normal quantile of the Wilson intervals.
    pub z: f64,
}

impl Default for PldiOptions {
    fn default() -> Self {
        Self { per_axis: None, refine: true, sim_method: None, z: 1.959963984540054 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PldiRow {
    pub r: f64,
    pub hits: usize,
    pub trials: usize,
    pub probability: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PldiTable {
    pub n: u64,
    pub replicates: usize,
    pub failures: usize,
    /// Replicates where the grid alone missed and refinement raised the grid supremum
    /// by more than 1e-3 in log.
    pub coarse_grid: usize,
    pub rows: Vec<PldiRow>,
}

impl PldiTable {
    /// Whether consecutive Wilson intervals are ordered (both endpoints nonincreasing in `r`).
    pub fn nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].wilson_lo <= w[0].wilson_lo && w[1].wilson_hi <= w[0].wilson_hi)
    }
}

struct LocalField<'a> {
    model: &'a ModelSpec,
    path: &'a qlapp_core::PointPath,
    theta_star: &'a [f64],
    l_star: f64,
    sn: f64,
}

impl LocalField<'_> {
    fn log_z(&self, u: &[f64]) -> f64 {
        let th: Vec<f64> = self.theta_star.iter().zip(u).map(|(t, x)| t + x / self.sn).collect();
        match quasi_loglik(self.model, &th, self.path) {
            Ok(l) if l > f64::NEG_INFINITY => l - self.l_star,
            _ => f64::NEG_INFINITY,
        }
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compass search for the largest `log ℤ` on `{|u| >= r} ∩ box`, started at `u0`;
/// stops once `target` is reached.
#[allow(clippy::too_many_arguments)]
fn refine(field: &LocalField<'_>, lo: &[f64], hi: &[f64], r: f64, u0: &[f64], v0: f64, step0: &[f64], target: f64) -> f64 {
    let mut u = u0.to_vec();
    let mut best = v0;
    let mut step: Vec<f64> = step0.iter().map(|s| 0.5 * s).collect();
    let min_step: Vec<f64> = step0.iter().map(|s| 1e-4 * s).collect();
    while best < target && step.iter().zip(&min_step).any(|(s, m)| s > m) {
        let mut moved = false;
        for i in 0..u.len() {
            for sgn in [1.0, -1.0] {
                let mut c = u.clone();
                c[i] = (c[i] + sgn * step[i]).clamp(lo[i], hi[i]);
                let len = norm(&c);
                if len < r {
                    // slide back onto the sphere |u| = r
                    if len == 0.0 {
                        continue;
                    }
                    c.iter_mut().for_each(|x| *x *= r / len);
                    if c.iter().zip(lo.iter().zip(hi)).any(|(x, (a, b))| x < a || x > b) {
                        continue;
                    }
                }
                if c == u {
                    continue;
                }
                let v = field.log_z(&c);
                if v > best {
                    best = v;
                    u = c;
                    moved = true;
                }
            }
        }
        if !moved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    best
}

/// Empirical `P[sup_{|u| >= r} ℤn(u) >= e^{-r}]` over `replicates` simulated paths, with the
/// supremum taken over a grid of the local box `𝕌n` and, where the grid misses, refined
/// around the best grid point of each orthant.
pub fn pldi_probe(
    model: &ModelSpec,
    theta_star: &[f64],
    n: u64,
    r_grid: &[f64],
    replicates: usize,
    seed: u64,
    opts: &PldiOptions,
) -> Result<PldiTable> {
    let p = model.p();
    if p > 3 {
        return Err(qlapp_core::Error::UnsupportedMethod(format!("the probe grids at most 3 parameters, got {p}")).into());
    }
    model.check_theta(theta_star)?;
    if replicates == 0 || r_grid.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(AppError::Invalid("need replicates > 0 and finite r >= 0".into()));
    }
    let m = model.with_n(n);
    let sn = (n as f64).sqrt();
    let space = &m.param_space;
    let lo: Vec<f64> = (0..p).map(|i| (space.lower[i] - theta_star[i]) * sn).collect();
    let hi: Vec<f64> = (0..p).map(|i| (space.upper[i] - theta_star[i]) * sn).collect();
    let k = opts.per_axis.unwrap_or(if p <= 2 { 61 } else { 11 }).max(2);
    let spacing: Vec<f64> = (0..p).map(|i| (hi[i] - lo[i]) / (k - 1) as f64).collect();
    let axis = |i: usize, j: usize| if j + 1 == k { hi[i] } else { lo[i] + j as f64 * spacing[i] };
    let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
    for i in 0..p {
        let mut next = Vec::with_capacity(grid.len() * k);
        for g in &grid {
            for j in 0..k {
                let mut u = g.clone();
                u.push(axis(i, j));
                next.push(u);
            }
        }
        grid = next;
    }
    // u = 0 belongs to every set with r = 0
    grid.push(vec![0.0; p]);
    // nearest first: a hit is usually found close to the origin and ends the scan early
    grid.sort_by(|a, b| norm(a).total_cmp(&norm(b)));
    let norms: Vec<f64> = grid.iter().map(|u| norm(u)).collect();

    let outcomes: Vec<Option<(Vec<bool>, bool)>> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let path = simulate(&m, theta_star, &sim_options(&m, opts.sim_method, seed, rep)).ok()?;
            let l_star = quasi_loglik(&m, theta_star, &path).ok().filter(|l| l.is_finite())?;
            let field = LocalField { model: &m, path: &path, theta_star, l_star, sn };
            let mut hits = vec![false; r_grid.len()];
            let mut vals = Vec::with_capacity(grid.len());
            for (u, &nu) in grid.iter().zip(&norms) {
                let v = if nu == 0.0 { 0.0 } else { field.log_z(u) };
                vals.push(v);
                for (h, &r) in hits.iter_mut().zip(r_grid) {
                    *h |= nu >= r && v >= -r;
                }
                if hits.iter().all(|h| *h) {
                    return Some((hits, false));
                }
            }
            let mut coarse = false;
            for (h, &r) in hits.iter_mut().zip(r_grid) {
                if *h {
                    continue;
                }
                // best grid point per orthant: {|u| >= r} can split into separate pieces
                let mut seeds: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
                for (i, &v) in vals.iter().enumerate() {
                    if norms[i] < r {
                        continue;
                    }
                    let key = grid[i].iter().enumerate().fold(0u32, |acc, (j, x)| acc | (u32::from(*x < 0.0) << j));
                    let e = seeds.entry(key).or_insert((i, v));
                    if v > e.1 {
                        *e = (i, v);
                    }
                }
                if seeds.is_empty() || !opts.refine {
                    continue;
                }
                let grid_sup = seeds.values().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let mut sup = grid_sup;
                for &(i, v) in seeds.values().filter(|s| s.1.is_finite()) {
                    sup = sup.max(refine(&field, &lo, &hi, r, &grid[i], v, &spacing, -r));
                    if sup >= -r {
                        break;
                    }
                }
                if sup - grid_sup > 1e-3 {
                    coarse = true;
                }
                *h = sup >= -r;
            }
            Some((hits, coarse))
        })
        .collect();

    let done: Vec<&(Vec<bool>, bool)> = outcomes.iter().flatten().collect();
    let trials = done.len();
    let rows = r_grid
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let hits = done.iter().filter(|o| o.0[j]).count();
            let (wilson_lo, wilson_hi) = wilson_interval(hits, trials, opts.z);
            let probability = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
            PldiRow { r, hits, trials, probability, wilson_lo, wilson_hi }
        })
        .collect();
    Ok(PldiTable {
        n,
        replicates,
        failures: replicates - trials,
        coarse_grid: done.iter().filter(|o| o.1).count(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub summary: McSummary,
}

pub const MANIFEST: &str = "manifest.json";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AppError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the tables as CSV next to a JSON manifest that carries the full summary.
/// An empty summary produces the manifest alone.
pub fn export(summary: &McSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut files = Vec::new();
    if !summary.per_n.is_empty() {
        let long = dir.join("statistics_long.csv");
        let mut w = csv::Writer::from_path(&long).map_err(csv_err(&long))?;
        w.write_record(["n", "estimator", "statistic", "value"]).map_err(csv_err(&long))?;
        let mut rows: Vec<(u64, &str, String, f64)> = Vec::new();
        for s in &summary.per_n {
            rows.push((s.n, "all", "failures_simulation".into(), s.failures.simulation as f64));
            rows.push((s.n, "all", "failures_qmle".into(), s.failures.qmle as f64));
            rows.push((s.n, "all", "failures_qbe".into(), s.failures.qbe as f64));
            for (name, est) in [("qmle", &s.qmle), ("qbe", &s.qbe)] {
                let Some(e) = est else { continue };
                rows.push((s.n, name, "successes".into(), e.successes as f64));
                for (i, b) in e.bias.iter().enumerate() {
                    rows.push((s.n, name, format!("bias_{i}"), *b));
                }
                for (i, row) in e.covariance.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        rows.push((s.n, name, format!("cov_{i}_{j}"), *v));
                    }
                }
                if let Some(g) = e.frobenius_gap {
                    rows.push((s.n, name, "frobenius_gap".into(), g));
                }
                for a in &e.normality {
                    rows.push((s.n, name, format!("ad_{}", a.coordinate), a.anderson_darling));
                    rows.push((s.n, name, format!("ad_p_{}", a.coordinate), a.p_value));
                }
                for mrow in &e.moments {
                    rows.push((s.n, name, format!("moment_{}", mrow.k), mrow.empirical));
                    if let Some(g) = mrow.rel_gap {
                        rows.push((s.n, name, format!("moment_gap_{}", mrow.k), g));
                    }
                }
                for (i, c) in e.coverage.iter().flatten().enumerate() {
                    rows.push((s.n, name, format!("coverage_{i}"), *c));
                }
            }
        }
        for (n, est, stat, v) in rows {
            w.write_record([n.to_string(), est.to_string(), stat, v.to_string()]).map_err(csv_err(&long))?;
        }
        w.flush().map_err(|e| AppError::io(&long, e))?;
        files.push(long);

        let reps = dir.join("replicates.csv");
        let mut w = csv::Writer::from_path(&reps).map_err(csv_err(&reps))?;
        let p = summary.theta_star.len();
        let mut header = vec!["n".to_string(), "estimator".to_string(), "index".to_string()];
        header.extend((0..p).map(|i| format!("u_{i}")));
        w.write_record(&header).map_err(csv_err(&reps))?;
        for s in &summary.per_n {
            for (name, est) in [("qmle", &s.qmle), ("qbe", &s.qbe)] {
                let Some(e) = est else { continue };
                for (idx, u) in e.scaled_errors.iter().enumerate() {
                    let mut rec = vec![s.n.to_string(), name.to_string(), idx.to_string()];
                    rec.extend(u.iter().map(|x| x.to_string()));
                    w.write_record(&rec).map_err(csv_err(&reps))?;
                }
            }
        }
        w.flush().map_err(|e| AppError::io(&reps, e))?;
        files.push(reps);
    }
    let names = files.iter().filter_map(|f| f.file_name()).map(|s| s.to_string_lossy().into_owned()).collect();
    let mut versions = BTreeMap::new();
    versions.insert("qlapp".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let manifest = Manifest {
        config_hash: summary.config_hash.clone(),
        seed: summary.seed,
        versions,
        files: names,
        summary: summary.clone(),
    };
    let mpath = dir.join(MANIFEST);
    write_json(&mpath, &manifest)?;
    files.push(mpath);
    Ok(files)
}

pub fn import(dir: &Path) -> Result<McSummary> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    Ok(m.summary)
}
