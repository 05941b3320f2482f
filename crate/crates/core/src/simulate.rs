//! Sampling paths of `N` and compensator diagnostics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::engine::{self, KernelCtx, KernelState};
use crate::model::{BaselineState, CovariateJump, Jet2, KernelSpec, ModelSpec, TimeHorizon};
use crate::rng::StreamRng;
use crate::special::{ks_pvalue, ks_statistic};
use crate::{Error, Result};

/// Realized event times of `N` on `(T0, T1]` together with the covariate history.
///
/// `presample` holds events on `(T̂0, T0]`, which only feed the kernel, and `external`
/// the jumps of the external covariate block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPath {
    pub horizon: TimeHorizon,
    pub n: u64,
    pub events: Vec<Vec<f64>>,
    #[serde(default)]
    pub presample: Vec<Vec<f64>>,
    #[serde(default)]
    pub external: Vec<CovariateJump>,
}

/// A single covariate jump resolved to a column of `X`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnJump {
    pub time: f64,
    pub col: usize,
    pub size: f64,
}

impl PointPath {
    pub fn empty(horizon: TimeHorizon, n: u64, d: usize) -> Self {
        Self { horizon, n, events: vec![Vec::new(); d], presample: vec![Vec::new(); d], external: Vec::new() }
    }

    pub fn new(horizon: TimeHorizon, n: u64, events: Vec<Vec<f64>>) -> Result<Self> {
        let d = events.len();
        let p = Self { horizon, n, events, presample: vec![Vec::new(); d], external: Vec::new() };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.events.len()
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum::<usize>()
            + self.presample.iter().map(Vec::len).sum::<usize>()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.events.iter().map(Vec::len).collect()
    }

    /// Observed events `(time, component)` in time order.
    pub fn merged_events(&self) -> Vec<(f64, usize)> {
        merge(&self.events)
    }

    /// Pre-sample and observed events in time order.
    pub fn all_events(&self) -> Vec<(f64, usize)> {
        let mut v = merge(&self.presample);
        v.extend(self.merged_events());
        v
    }

    /// Every jump of `X` in time order.
    pub fn covariate_jumps(&self, model: &ModelSpec) -> Vec<ColumnJump> {
        let mut v = Vec::new();
        if model.covariate.is_self_exciting() {
            let size = 1.0 / model.n_f64();
            for (time, col) in self.all_events() {
                v.push(ColumnJump { time, col, size });
            }
        }
        let off = model.covariate.external_offset(model.d);
        for j in &self.external {
            for (k, &size) in j.increments.iter().enumerate() {
                if size != 0.0 {
                    v.push(ColumnJump { time: j.time, col: off + k, size });
                }
            }
        }
        v.sort_by(|a, b| a.time.total_cmp(&b.time));
        v
    }

    /// `N_t` per component, counting observed events at or before `t`.
    pub fn counts_at(&self, t: f64) -> Vec<usize> {
        self.events.iter().map(|e| e.partition_point(|&s| s <= t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.horizon;
        h.check().map_err(|e| Error::InvalidPath(format!("{e}")))?;
        if self.n == 0 {
            return Err(Error::InvalidPath("n must be positive".into()));
        }
        if !self.presample.is_empty() && self.presample.len() != self.events.len() {
            return Err(Error::InvalidPath("presample and events differ in width".into()));
        }
        for (a, ev) in self.events.iter().enumerate() {
            if ev.iter().any(|&t| !(t > h.t0 && t <= h.t1)) {
                return Err(Error::InvalidPath(format!(
                    "component {a} has events outside ({}, {}]",
                    h.t0, h.t1
                )));
            }
            if ev.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidPath(format!(
                    "component {a} times are not strictly increasing"
                )));
            }
        }
        for (a, ev) in self.presample.iter().enumerate() {
            if ev.iter().any(|&t| !(t > h.t_hat0 && t <= h.t0)) {
                return Err(Error::InvalidPath(format!(
                    "component {a} has pre-sample events outside ({}, {}]",
                    h.t_hat0, h.t0
                )));
            }
            if ev.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidPath(format!(
                    "component {a} pre-sample times are not strictly increasing"
                )));
            }
        }
        let all = self.all_events();
        if let Some(w) = all.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidPath(format!(
                "components {} and {} share a jump at t = {}",
                w[0].1, w[1].1, w[0].0
            )));
        }
        if self.external.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(Error::InvalidPath("external jumps must be sorted by time".into()));
        }
        for j in &self.external {
            if !(j.time >= h.t_hat0 && j.time <= h.t1) {
                return Err(Error::InvalidPath(format!("external jump at {} outside the horizon", j.time)));
            }
            if j.increments.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidPath("external covariate must be nondecreasing".into()));
            }
        }
        Ok(())
    }
}

fn merge(per: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = per
        .iter()
        .enumerate()
        .flat_map(|(a, e)| e.iter().map(move |&t| (t, a)))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    Thinning,
    ExpExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub seed: u64,
    /// Stream index inside the seed (replicate number in Monte Carlo studies).
    #[serde(default)]
    pub stream: u64,
    pub method: SimMethod,
    pub majorant_refresh: f64,
}

impl SimOptions {
    pub fn thinning(seed: u64) -> Self {
        Self { seed, stream: 0, method: SimMethod::Thinning, majorant_refresh: 0.1 }
    }

    pub fn exp_exact(seed: u64) -> Self {
        Self { seed, stream: 0, method: SimMethod::ExpExact, majorant_refresh: 0.1 }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }
}

struct SimState<'a> {
    model: &'a ModelSpec,
    theta: &'a [f64],
    ctx: KernelCtx<'a>,
    ks: KernelState,
    base: BaselineState,
    t: f64,
    inv_n: f64,
    selfx: bool,
    events: Vec<Vec<f64>>,
    presample: Vec<Vec<f64>>,
    last: f64,
    phi: Vec<Jet2>,
}

impl<'a> SimState<'a> {
    fn advance(&mut self, t: f64) {
        self.ks.advance(t, None);
        self.t = t;
    }

    fn lambda(&mut self, t: f64, out: &mut [f64]) {
        if !self.ctx.zero {
            self.ks.phi(&self.ctx.shape, t, 0, &mut self.phi);
        }
        let d0 = self.ctx.d0;
        let h = self.model.horizon;
        for (a, o) in out.iter_mut().enumerate() {
            let mut v = self.model.baseline.value(a, t, self.theta, &h, &self.base);
            if !self.ctx.zero {
                for j in 0..d0 {
                    v += self.ctx.scale[a * d0 + j] * self.phi[j].v;
                }
            }
            *o = v;
        }
    }

    /// Upper bound of the total intensity on `(t, w]`.
    fn envelope(&mut self, w: f64) -> f64 {
        let t = self.t;
        let h = self.model.horizon;
        let d0 = self.ctx.d0;
        let mut sup_phi = vec![0.0; d0];
        if !self.ctx.zero {
            match &self.ks {
                KernelState::Exp { b, s, .. } => {
                    let grow = (-*b * (w - t)).exp().max(1.0);
                    for (o, st) in sup_phi.iter_mut().zip(s) {
                        *o = st[0] * grow;
                    }
                }
                KernelState::Generic { jumps } => {
                    for &(s, col, size) in jumps {
                        sup_phi[col] += size * self.ctx.shape.sup_on(t - s, w - s);
                    }
                }
            }
        }
        let mut total = 0.0;
        for a in 0..self.model.d {
            let mut v = self.model.baseline.sup_on(a, t, w, self.theta, &h, &self.base).max(0.0);
            if !self.ctx.zero {
                for (j, sp) in sup_phi.iter().enumerate() {
                    v += self.ctx.scale[a * d0 + j].max(0.0) * sp;
                }
            }
            total += v;
        }
        total
    }

    fn record(&mut self, t: f64, alpha: usize) {
        if t <= self.model.horizon.t0 {
            self.presample[alpha].push(t);
        } else {
            self.events[alpha].push(t);
        }
        if self.selfx && !self.ctx.zero {
            self.ks.add_jump(t, alpha, self.inv_n);
        }
        self.base.on_event(&self.model.baseline, alpha);
        self.last = t;
    }

    fn apply_external(&mut self, jumps: &[CovariateJump], idx: &mut usize, upto: f64) {
        let off = self.model.covariate.external_offset(self.model.d);
        while *idx < jumps.len() && jumps[*idx].time <= upto {
            let j = &jumps[*idx];
            if !self.ctx.zero {
                for (k, &dx) in j.increments.iter().enumerate() {
                    if dx != 0.0 {
                        self.ks.add_jump(j.time, off + k, dx);
                    }
                }
            }
            *idx += 1;
        }
    }
}

fn pick(lams: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    for (a, &l) in lams.iter().enumerate() {
        acc += l;
        if target < acc {
            return a;
        }
    }
    lams.iter().rposition(|&l| l > 0.0).unwrap_or(0)
}

/// Draw one path of `N` under `θ*`.
pub fn simulate(model: &ModelSpec, theta_star: &[f64], opts: &SimOptions) -> Result<PointPath> {
    model.check_shapes()?;
    model.check_theta(theta_star)?;
    if !(opts.majorant_refresh > 0.0) {
        return Err(Error::Config("majorant_refresh must be positive".into()));
    }
    let report = crate::model::validate_model(model);
    if !report.passed() {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        return Err(Error::ModelDefinition(format!("model fails validation: {failed:?}")));
    }
    let h = model.horizon;
    let selfx = model.covariate.is_self_exciting();
    let start = if selfx { h.t_hat0 } else { h.t0 };
    let ctx = KernelCtx::new(model, theta_star);
    let ks = KernelState::new(&ctx, h.t_hat0.min(start));
    let d0 = ctx.d0;
    let mut st = SimState {
        model,
        theta: theta_star,
        ctx,
        ks,
        base: BaselineState::new(&model.baseline),
        t: h.t_hat0,
        inv_n: 1.0 / model.n_f64(),
        selfx,
        events: vec![Vec::new(); model.d],
        presample: vec![Vec::new(); model.d],
        last: f64::NEG_INFINITY,
        phi: vec![Jet2::default(); d0],
    };
    let mut jumps: Vec<CovariateJump> = model.covariate.external_jumps().to_vec();
    jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut jidx = 0;
    st.apply_external(&jumps, &mut jidx, start);
    st.advance(start);
    let mut rng = StreamRng::new(opts.seed, opts.stream);
    match opts.method {
        SimMethod::Thinning => thinning(&mut st, &jumps, &mut jidx, &mut rng, opts.majorant_refresh)?,
        SimMethod::ExpExact => {
            if !matches!(model.kernel, KernelSpec::Exponential { .. })
                || !matches!(model.covariate, crate::model::CovariateSpec::SelfExciting)
            {
                return Err(Error::UnsupportedMethod(
                    "exp_exact needs an exponential kernel and a self-exciting covariate".into(),
                ));
            }
            exp_exact(&mut st, &mut rng)?;
        }
    }
    let presample = if selfx { st.presample } else { vec![Vec::new(); model.d] };
    let path = PointPath { horizon: h, n: model.n, events: st.events, presample, external: jumps };
    path.validate().map_err(|e| Error::Internal(format!("simulated path invalid: {e}")))?;
    Ok(path)
}

fn thinning(
    st: &mut SimState,
    jumps: &[CovariateJump],
    jidx: &mut usize,
    rng: &mut StreamRng,
    refresh: f64,
) -> Result<()> {
    let t1 = st.model.horizon.t1;
    let n = st.model.n_f64();
    let mut lams = vec![0.0; st.model.d];
    loop {
        if st.t >= t1 {
            return Ok(());
        }
        let mut w = (st.t + refresh).min(t1);
        if let Some(j) = jumps.get(*jidx) {
            w = w.min(j.time);
        }
        let bound = st.envelope(w);
        if !bound.is_finite() {
            return Err(Error::Internal("thinning envelope is not finite".into()));
        }
        let cand = if bound > 0.0 { st.t + rng.exp1() / (n * bound) } else { f64::INFINITY };
        if cand > w {
            st.advance(w);
            st.apply_external(jumps, jidx, w);
            continue;
        }
        if cand <= st.last || cand <= st.t {
            // tie at machine precision: draw again
            continue;
        }
        st.advance(cand);
        st.lambda(cand, &mut lams);
        let total: f64 = lams.iter().sum();
        if total > bound * (1.0 + 1e-9) + 1e-300 {
            return Err(Error::Internal(format!(
                "intensity {total} exceeds thinning envelope {bound} at t = {cand}"
            )));
        }
        if rng.uniform() * bound < total {
            let a = pick(&lams, total, rng.uniform());
            st.record(cand, a);
        }
    }
}

fn exp_exact(st: &mut SimState, rng: &mut StreamRng) -> Result<()> {
    let h = st.model.horizon;
    let n = st.model.n_f64();
    let b = st.ctx.shape.psi[0];
    let d = st.model.d;
    let d0 = st.ctx.d0;
    let mut lams = vec![0.0; d];
    loop {
        let t = st.t;
        if t >= h.t1 {
            return Ok(());
        }
        let KernelState::Exp { s, .. } = &st.ks else {
            return Err(Error::Internal("exp_exact without recursive state".into()));
        };
        // kernel part of the total intensity at t+
        let mut k0 = 0.0;
        for a in 0..d {
            for j in 0..d0 {
                k0 += st.ctx.scale[a * d0 + j] * s[j][0];
            }
        }
        let comp = |u: f64| -> f64 {
            let mut c = 0.0;
            for a in 0..d {
                c += st.model.baseline.integral(a, t, t + u, st.theta, &h, &st.base);
            }
            c + k0 * exp_moments0(b, u)
        };
        let rate = |u: f64| -> f64 {
            let mut c = 0.0;
            for a in 0..d {
                c += st.model.baseline.value(a, t + u, st.theta, &h, &st.base);
            }
            c + k0 * (-b * u).exp()
        };
        let target = rng.exp1() / n;
        let span = h.t1 - t;
        if comp(span) < target {
            st.advance(h.t1);
            return Ok(());
        }
        let (mut lo, mut hi) = (0.0, span);
        let mut u = (target / rate(0.0).max(1e-300)).min(span);
        for _ in 0..200 {
            let f = comp(u) - target;
            if f > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            if hi - lo <= 1e-15 * (1.0 + t.abs()) || f.abs() <= 1e-15 * target {
                break;
            }
            let r = rate(u);
            let next = if r > 0.0 { u - f / r } else { f64::NAN };
            u = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        let cand = t + u;
        if cand <= st.last || cand <= t {
            st.advance(t + u.max(0.0));
            continue;
        }
        st.advance(cand);
        st.lambda(cand, &mut lams);
        let total: f64 = lams.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Internal(format!("zero intensity at accepted time {cand}")));
        }
        let a = pick(&lams, total, rng.uniform());
        st.record(cand, a);
    }
}

fn exp_moments0(b: f64, u: f64) -> f64 {
    crate::model::exp_moments(b, u)[0]
}

/// `∫_{T0}^{t} n λ(s, θ) ds` per component.
pub fn compensator(model: &ModelSpec, theta: &[f64], path: &PointPath, t: f64) -> Result<Vec<f64>> {
    Ok(compensator_many(model, theta, path, &[t])?.remove(0))
}

/// Compensator at several sorted times.
pub fn compensator_many(
    model: &ModelSpec,
    theta: &[f64],
    path: &PointPath,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    model.check_shapes()?;
    model.check_theta(theta)?;
    engine::check_path(model, path)?;
    let h = model.horizon;
    for &t in times {
        if !(t >= h.t0 && t <= h.t1) {
            return Err(Error::Domain(format!("t = {t} outside [{}, {}]", h.t0, h.t1)));
        }
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain("compensator times must be sorted".into()));
    }
    let out = engine::sweep(model, theta, path, 0, None, times, false)?;
    let n = model.n_f64();
    Ok(out
        .queries
        .into_iter()
        .map(|v| v.into_iter().map(|x| n * x).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescalingComponent {
    pub n_events: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub insufficient_data: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescalingReport {
    pub components: Vec<RescalingComponent>,
}

impl RescalingReport {
    pub fn insufficient_data(&self) -> bool {
        self.components.iter().any(|c| c.insufficient_data)
    }

    pub fn min_p_value(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| !c.insufficient_data)
            .map(|c| c.p_value)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Minimum number of events for a meaningful time-rescaling test.
pub const MIN_RESCALING_EVENTS: usize = 10;

/// Kolmogorov–Smirnov test of the compensator increments between events against Exp(1).
pub fn time_rescaling_check(model: &ModelSpec, theta_star: &[f64], path: &PointPath) -> Result<RescalingReport> {
    let merged = path.merged_events();
    let times: Vec<f64> = merged.iter().map(|e| e.0).collect();
    let comp = compensator_many(model, theta_star, path, &times)?;
    let mut prev = vec![0.0; model.d];
    let mut incs: Vec<Vec<f64>> = vec![Vec::new(); model.d];
    for ((_, a), c) in merged.iter().zip(&comp) {
        incs[*a].push(c[*a] - prev[*a]);
        prev[*a] = c[*a];
    }
    let components = incs
        .into_iter()
        .map(|tau| {
            let k = tau.len();
            if k < MIN_RESCALING_EVENTS {
                return RescalingComponent {
                    n_events: k,
                    ks_statistic: f64::NAN,
                    p_value: f64::NAN,
                    insufficient_data: true,
                };
            }
            let u: Vec<f64> = tau.iter().map(|x| 1.0 - (-x).exp()).collect();
            let ks = ks_statistic(&u, |x| x.clamp(0.0, 1.0));
            RescalingComponent { n_events: k, ks_statistic: ks, p_value: ks_pvalue(k, ks), insufficient_data: false }
        })
        .collect();
    Ok(RescalingReport { components })
}
