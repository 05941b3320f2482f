#![allow(dead_code)]

use qlapp_core::model::{intensity_at, Jet2};
use qlapp_core::{ModelSpec, ParamSpace, PointPath, TimeHorizon};

pub fn poisson(mu_lo: f64, mu_hi: f64, n: u64, t1: f64) -> ModelSpec {
    ModelSpec::poisson(
        1,
        TimeHorizon::observed(0.0, t1).unwrap(),
        n,
        ParamSpace::new(vec![mu_lo], vec![mu_hi]).unwrap(),
    )
}

/// 1D exponential Hawkes `(g, A, b)` on `[0, t1]`.
pub fn hawkes1(n: u64, t1: f64) -> ModelSpec {
    ModelSpec::exp_hawkes(
        1,
        TimeHorizon::observed(0.0, t1).unwrap(),
        n,
        ParamSpace::new(vec![0.2, 0.05, 0.5], vec![4.0, 3.0, 8.0]).unwrap(),
    )
}

/// Same model on a box wide enough to hold the sampling spread of the decay at desk-scale `n`.
pub fn hawkes_wide(n: u64, t1: f64) -> ModelSpec {
    ModelSpec {
        param_space: ParamSpace::new(vec![0.05, 0.0, 0.05], vec![5.0, 5.0, 20.0]).unwrap(),
        ..hawkes1(n, t1)
    }
}

pub fn path1(model: &ModelSpec, times: &[f64]) -> PointPath {
    PointPath::new(model.horizon, model.n, vec![times.to_vec()]).unwrap()
}

/// `∫_a^b f` by composite Simpson with `m` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Likelihood by the raw definition: `λ` recomputed at every event from the full history,
/// integral by Simpson between consecutive events.
pub fn brute_loglik(model: &ModelSpec, theta: &[f64], path: &PointPath) -> f64 {
    let h = model.horizon;
    let mut v = 0.0;
    for (t, a) in path.merged_events() {
        v += intensity_at(model, theta, t, path).unwrap()[a].ln();
    }
    let mut cuts = vec![h.t0];
    cuts.extend(path.merged_events().iter().map(|e| e.0).filter(|&t| t < h.t1));
    for j in &path.external {
        if j.time > h.t0 && j.time < h.t1 {
            cuts.push(j.time);
        }
    }
    cuts.push(h.t1);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        // right limit at a: the jump at a must already count
        let f = |t: f64| {
            let tt = if t <= a { a.next_up() } else { t };
            intensity_at(model, theta, tt, path).unwrap().iter().sum::<f64>()
        };
        // t = a + (b - a) s² smooths power-type kinks at the segment start
        let g = |s: f64| f(a + (b - a) * s * s) * 2.0 * (b - a) * s;
        v -= model.n as f64 * simpson(g, 0.0, 1.0, 400);
    }
    v
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn zero_jet() -> Jet2 {
    Jet2::default()
}
