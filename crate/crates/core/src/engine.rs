//! Shared sweep over a path: intensity jets at events and integrated intensity jets.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::model::{exp_moments, BaselineState, Coef, Jet2, ModelSpec, Shape, ShapeKind};
use crate::simulate::PointPath;
use crate::{Error, Result};

/// Intensities below this value count as zero.
pub(crate) const LAMBDA_FLOOR: f64 = 1e-300;

/// Resolved kernel pieces at one `θ`.
pub(crate) struct KernelCtx<'a> {
    pub shape: Shape<'a>,
    pub scale: Vec<f64>,
    pub scale_idx: Vec<Option<usize>>,
    pub shape_idx: [Option<usize>; 2],
    pub d0: usize,
    pub zero: bool,
}

impl<'a> KernelCtx<'a> {
    pub fn new(model: &'a ModelSpec, theta: &[f64]) -> Self {
        let shape = model.kernel.shape(theta);
        let mut shape_idx = [None, None];
        for (k, slot) in shape_idx.iter_mut().enumerate().take(shape.nshape) {
            *slot = shape.slots[k].index();
        }
        let scale_idx = model
            .kernel
            .scale_coefs()
            .map(|m| m.iter().flatten().map(Coef::index).collect())
            .unwrap_or_default();
        Self {
            shape,
            scale: model.kernel.scale_values(theta),
            scale_idx,
            shape_idx,
            d0: model.d0(),
            zero: model.kernel.is_zero(),
        }
    }

    pub fn is_exp(&self) -> bool {
        matches!(self.shape.kind, ShapeKind::Exp)
    }
}

/// Jet of a scalar with respect to the full parameter vector.
pub(crate) struct JetBuf {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    p: usize,
}

impl JetBuf {
    pub fn new(p: usize) -> Self {
        Self { v: 0.0, g: vec![0.0; p], h: vec![0.0; p * p], p }
    }

    fn reset(&mut self) {
        self.v = 0.0;
        self.g.iter_mut().for_each(|x| *x = 0.0);
        self.h.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Jet of `Σ_terms coef · basis + Σ_j a_αj · Φ_j` where `Φ_j` carries shape derivatives.
pub(crate) fn assemble(
    ctx: &KernelCtx,
    alpha: usize,
    base: &[(Coef, f64)],
    phi: &[Jet2],
    theta: &[f64],
    order: u8,
    out: &mut JetBuf,
) {
    out.reset();
    let p = out.p;
    for &(c, b) in base {
        out.v += c.value(theta) * b;
        if order >= 1 {
            if let Some(i) = c.index() {
                out.g[i] += b;
            }
        }
    }
    if ctx.zero {
        return;
    }
    let ns = ctx.shape.nshape;
    for (j, ph) in phi.iter().enumerate().take(ctx.d0) {
        let a = ctx.scale[alpha * ctx.d0 + j];
        out.v += a * ph.v;
        if order == 0 {
            continue;
        }
        let ai = ctx.scale_idx[alpha * ctx.d0 + j];
        if let Some(i) = ai {
            out.g[i] += ph.v;
        }
        for k in 0..ns {
            if let Some(m) = ctx.shape_idx[k] {
                out.g[m] += a * ph.d[k];
            }
        }
        if order < 2 {
            continue;
        }
        for k in 0..ns {
            let Some(m) = ctx.shape_idx[k] else { continue };
            if let Some(i) = ai {
                out.h[i * p + m] += ph.d[k];
                out.h[m * p + i] += ph.d[k];
            }
            for l in 0..ns {
                if let Some(r) = ctx.shape_idx[l] {
                    out.h[m * p + r] += a * ph.dd[k][l];
                }
            }
        }
    }
}

/// History of covariate jumps as seen by the kernel.
pub(crate) enum KernelState {
    /// `s[j] = [Σ ΔX e^{-bτ}, Σ ΔX τ e^{-bτ}, Σ ΔX τ² e^{-bτ}]` at time `t`.
    Exp { b: f64, t: f64, s: Vec<[f64; 3]> },
    Generic { jumps: Vec<(f64, usize, f64)> },
}

impl KernelState {
    pub fn new(ctx: &KernelCtx, t_start: f64) -> Self {
        if ctx.is_exp() {
            KernelState::Exp { b: ctx.shape.psi[0], t: t_start, s: vec![[0.0; 3]; ctx.d0] }
        } else {
            KernelState::Generic { jumps: Vec::new() }
        }
    }

    /// Move the recursive state forward to `t`, adding `∫ Φ` over the step to `acc`.
    pub fn advance(&mut self, t: f64, acc: Option<&mut [Jet2]>) {
        if let KernelState::Exp { b, t: t_cur, s } = self {
            let dt = t - *t_cur;
            if dt <= 0.0 {
                return;
            }
            if let Some(acc) = acc {
                let m = exp_moments(*b, dt);
                for (a, st) in acc.iter_mut().zip(s.iter()) {
                    a.v += st[0] * m[0];
                    a.d[0] -= st[1] * m[0] + st[0] * m[1];
                    a.dd[0][0] += st[2] * m[0] + 2.0 * st[1] * m[1] + st[0] * m[2];
                }
            }
            let e = (-*b * dt).exp();
            for st in s.iter_mut() {
                st[2] = e * (st[2] + 2.0 * dt * st[1] + dt * dt * st[0]);
                st[1] = e * (st[1] + dt * st[0]);
                st[0] *= e;
            }
            *t_cur = t;
        }
    }

    /// Register a jump at the current time.
    pub fn add_jump(&mut self, t: f64, col: usize, size: f64) {
        match self {
            KernelState::Exp { s, .. } => s[col][0] += size,
            KernelState::Generic { jumps } => jumps.push((t, col, size)),
        }
    }

    /// `Φ_j(t) = Σ_{s < t} ΔX_j(s) φ(t - s)` with shape derivatives. For the recursive
    /// state, `t` must be the current time and jumps at `t` not yet registered.
    pub fn phi(&self, shape: &Shape, t: f64, order: u8, out: &mut [Jet2]) {
        out.iter_mut().for_each(|x| *x = Jet2::default());
        match self {
            KernelState::Exp { s, .. } => {
                for (o, st) in out.iter_mut().zip(s) {
                    o.v = st[0];
                    o.d[0] = -st[1];
                    o.dd[0][0] = st[2];
                }
            }
            KernelState::Generic { jumps } => {
                let support = match shape.kind {
                    ShapeKind::Tab { step, values } => step * (values.len() - 1) as f64,
                    _ => f64::INFINITY,
                };
                for &(s, col, size) in jumps.iter().rev() {
                    if s >= t {
                        continue;
                    }
                    if t - s > support {
                        break;
                    }
                    let j = shape.jet(t - s, order);
                    out[col].add_scaled(size, &j);
                }
            }
        }
    }

    /// `∫_{t0}^{t} Φ_j(u) du` from the stored jumps (generic state only).
    pub fn cum_integral(&self, shape: &Shape, t0: f64, t: f64, order: u8, out: &mut [Jet2]) {
        out.iter_mut().for_each(|x| *x = Jet2::default());
        if let KernelState::Generic { jumps } = self {
            for &(s, col, size) in jumps {
                if s >= t {
                    continue;
                }
                let mut j = shape.integral(t - s, order);
                if s < t0 {
                    let k = shape.integral(t0 - s, order);
                    j.add_scaled(-1.0, &k);
                }
                out[col].add_scaled(size, &j);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Eval(usize),
    Query(usize),
    Jump(usize, f64),
    Queue(usize),
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    t: f64,
    rank: u8,
    kind: Kind,
}

fn timeline(model: &ModelSpec, path: &PointPath, queries: &[f64]) -> Vec<Entry> {
    let inv_n = 1.0 / model.n_f64();
    let selfx = model.covariate.is_self_exciting();
    let path_dep = model.baseline.is_path_dependent();
    let mut v = Vec::with_capacity(3 * path.total_events() + queries.len());
    for (alpha, times) in path.presample.iter().enumerate() {
        for &t in times {
            if selfx {
                v.push(Entry { t, rank: 1, kind: Kind::Jump(alpha, inv_n) });
            }
            if path_dep {
                v.push(Entry { t, rank: 1, kind: Kind::Queue(alpha) });
            }
        }
    }
    for (alpha, times) in path.events.iter().enumerate() {
        for &t in times {
            v.push(Entry { t, rank: 0, kind: Kind::Eval(alpha) });
            if selfx {
                v.push(Entry { t, rank: 1, kind: Kind::Jump(alpha, inv_n) });
            }
            if path_dep {
                v.push(Entry { t, rank: 1, kind: Kind::Queue(alpha) });
            }
        }
    }
    let off = model.covariate.external_offset(model.d);
    for jump in &path.external {
        for (k, &dx) in jump.increments.iter().enumerate() {
            if dx != 0.0 {
                v.push(Entry { t: jump.time, rank: 1, kind: Kind::Jump(off + k, dx) });
            }
        }
    }
    for (i, &q) in queries.iter().enumerate() {
        v.push(Entry { t: q, rank: 0, kind: Kind::Query(i) });
    }
    v.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.rank.cmp(&b.rank)));
    v
}

/// Result of one sweep. Integrals exclude the factor `n`.
pub(crate) struct EvalOut {
    pub feasible: bool,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub per_component: Vec<f64>,
    pub event_counts: Vec<usize>,
    pub queries: Vec<Vec<f64>>,
}

pub(crate) fn check_path(model: &ModelSpec, path: &PointPath) -> Result<()> {
    path.validate()?;
    if path.d() != model.d {
        return Err(Error::InvalidPath(alloc::format!(
            "path has {} components but the model has d = {}",
            path.d(),
            model.d
        )));
    }
    if path.n != model.n {
        return Err(Error::InvalidPath(alloc::format!(
            "path was generated with n = {} but the model has n = {}",
            path.n,
            model.n
        )));
    }
    let (ph, mh) = (&path.horizon, &model.horizon);
    if ph.t0 != mh.t0 || ph.t1 != mh.t1 || ph.t_hat0 != mh.t_hat0 {
        return Err(Error::InvalidPath("path horizon differs from the model horizon".into()));
    }
    if path.external.iter().any(|j| j.increments.len() != model.covariate.external_dim()) {
        return Err(Error::InvalidPath("external covariate width differs from the model".into()));
    }
    Ok(())
}

/// One pass over the path at `θ`.
///
/// `order` selects value (0), gradient (1) or Hessian (2). `mask` restricts the
/// likelihood to a subset of components. `queries` are sorted times in `[T0, T1]` at which
/// the cumulative integrated intensity `∫_{T0}^{q} λ` is recorded; when `events` is false the
/// log terms are skipped.
pub(crate) fn sweep(
    model: &ModelSpec,
    theta: &[f64],
    path: &PointPath,
    order: u8,
    mask: Option<&[bool]>,
    queries: &[f64],
    events: bool,
) -> Result<EvalOut> {
    let d = model.d;
    let p = model.p();
    let h = model.horizon;
    let n = model.n_f64();
    let ctx = KernelCtx::new(model, theta);
    let path_dep = model.baseline.is_path_dependent();
    let use_rec = ctx.is_exp();
    let included = |a: usize| mask.map_or(true, |m| m[a]);

    let mut state = BaselineState::new(&model.baseline);
    let mut ks = KernelState::new(&ctx, h.t_hat0.min(h.t0));
    let mut kint = vec![Jet2::default(); ctx.d0];
    let mut phi = vec![Jet2::default(); ctx.d0];
    let mut terms: Vec<(Coef, f64)> = Vec::with_capacity(8);
    let mut base_int: Vec<Vec<(Coef, f64)>> = vec![Vec::new(); d];
    if path_dep {
        for (a, bi) in base_int.iter_mut().enumerate() {
            model.baseline.for_each_term(a, h.t0, &h, &state, |c, _| bi.push((c, 0.0)));
        }
    }
    let mut jet = JetBuf::new(p);
    let mut out = EvalOut {
        feasible: true,
        value: 0.0,
        grad: vec![0.0; p],
        hess: vec![0.0; p * p],
        per_component: vec![0.0; d],
        event_counts: vec![0; d],
        queries: vec![Vec::new(); queries.len()],
    };

    let entries = timeline(model, path, queries);
    let mut cur = h.t_hat0.min(h.t0);
    if let Some(first) = entries.first() {
        cur = cur.min(first.t);
    }

    // moves the state to `t`, integrating over the part inside [T0, T1]
    let advance = |t: f64,
                       cur: &mut f64,
                       ks: &mut KernelState,
                       kint: &mut [Jet2],
                       base_int: &mut [Vec<(Coef, f64)>],
                       state: &BaselineState| {
        if t <= *cur {
            return;
        }
        let a = cur.max(h.t0);
        let b = t.min(h.t1);
        if use_rec {
            if *cur < h.t0 && t > h.t0 {
                ks.advance(h.t0, None);
            }
            ks.advance(t, if b > a { Some(kint) } else { None });
        }
        if path_dep && b > a {
            for (al, bi) in base_int.iter_mut().enumerate() {
                let mut k = 0;
                model.baseline.for_each_term_integral(al, a, b, &h, state, |_, x| {
                    bi[k].1 += x;
                    k += 1;
                });
            }
        }
        *cur = t;
    };

    for e in &entries {
        advance(e.t, &mut cur, &mut ks, &mut kint, &mut base_int, &state);
        match e.kind {
            Kind::Eval(alpha) => {
                if !events || !included(alpha) {
                    continue;
                }
                terms.clear();
                model.baseline.for_each_term(alpha, e.t, &h, &state, |c, b| terms.push((c, b)));
                if !ctx.zero {
                    ks.phi(&ctx.shape, e.t, order, &mut phi);
                }
                assemble(&ctx, alpha, &terms, &phi, theta, order, &mut jet);
                out.event_counts[alpha] += 1;
                if !(jet.v >= LAMBDA_FLOOR) {
                    out.feasible = false;
                    if !queries.is_empty() {
                        continue;
                    }
                    out.value = f64::NEG_INFINITY;
                    out.per_component[alpha] = f64::NEG_INFINITY;
                    return Ok(out);
                }
                let lv = jet.v.ln();
                out.value += lv;
                out.per_component[alpha] += lv;
                if order >= 1 {
                    let inv = 1.0 / jet.v;
                    for i in 0..p {
                        out.grad[i] += jet.g[i] * inv;
                    }
                    if order >= 2 {
                        let inv2 = inv * inv;
                        for i in 0..p {
                            for j in 0..p {
                                out.hess[i * p + j] +=
                                    jet.h[i * p + j] * inv - jet.g[i] * jet.g[j] * inv2;
                            }
                        }
                    }
                }
            }
            Kind::Query(qi) => {
                let q = e.t;
                let mut kq = vec![Jet2::default(); ctx.d0];
                if !ctx.zero {
                    if use_rec {
                        kq.copy_from_slice(&kint);
                    } else {
                        ks.cum_integral(&ctx.shape, h.t0, q, 0, &mut kq);
                    }
                }
                let mut vals = Vec::with_capacity(d);
                for a in 0..d {
                    terms.clear();
                    if path_dep {
                        terms.extend_from_slice(&base_int[a]);
                    } else {
                        model.baseline.for_each_term_integral(a, h.t0, q.max(h.t0), &h, &state, |c, x| {
                            terms.push((c, x))
                        });
                    }
                    assemble(&ctx, a, &terms, &kq, theta, 0, &mut jet);
                    vals.push(jet.v);
                }
                out.queries[qi] = vals;
            }
            Kind::Jump(col, size) => {
                if !ctx.zero {
                    ks.add_jump(e.t, col, size);
                }
            }
            Kind::Queue(alpha) => state.on_event(&model.baseline, alpha),
        }
    }
    advance(h.t1, &mut cur, &mut ks, &mut kint, &mut base_int, &state);

    if !events {
        return Ok(out);
    }
    if !ctx.zero && !use_rec {
        ks.cum_integral(&ctx.shape, h.t0, h.t1, order, &mut kint);
    }
    for a in 0..d {
        if !included(a) {
            continue;
        }
        terms.clear();
        if path_dep {
            terms.extend_from_slice(&base_int[a]);
        } else {
            model.baseline.for_each_term_integral(a, h.t0, h.t1, &h, &state, |c, x| {
                terms.push((c, x))
            });
        }
        assemble(&ctx, a, &terms, &kint, theta, order, &mut jet);
        out.value -= n * jet.v;
        out.per_component[a] -= n * jet.v;
        if order >= 1 {
            for i in 0..p {
                out.grad[i] -= n * jet.g[i];
            }
            if order >= 2 {
                for i in 0..p * p {
                    out.hess[i] -= n * jet.h[i];
                }
            }
        }
    }
    if !out.feasible {
        out.value = f64::NEG_INFINITY;
    }
    Ok(out)
}
