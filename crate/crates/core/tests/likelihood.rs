mod common;

use common::*;
use qlapp_core::likelihood::{
    self, component_logliks, delta_n, evaluate, fd_gradient, hessian, lamn_residual, quasi_loglik,
    quasi_loglik_masked, random_field_z, score, y_field, Order,
};
use qlapp_core::model::{intensity_at, CovariateJump};
use qlapp_core::simulate::{simulate, SimOptions};
use qlapp_core::{BaselineSpec, Coef, CovariateSpec, KernelSpec, ModelSpec, ParamSpace, TimeHorizon};

#[test]
fn poisson_closed_forms() {
    let m = poisson(0.01, 5.0, 10, 1.0);
    let path = path1(&m, &[0.1, 0.4, 0.9]);
    assert!((quasi_loglik(&m, &[1.0], &path).unwrap() + 10.0).abs() < 1e-12);
    let v = quasi_loglik(&m, &[2.0], &path).unwrap();
    assert!((v - (3.0 * 2f64.ln() - 20.0)).abs() < 1e-12);
    assert!((v + 17.9206).abs() < 1e-4);
    assert!(score(&m, &[0.3], &path).unwrap()[0].abs() < 1e-12);
    assert!((score(&m, &[1.0], &path).unwrap()[0] + 7.0).abs() < 1e-12);
    assert!((hessian(&m, &[1.0], &path).unwrap()[0][0] + 3.0).abs() < 1e-12);
}

#[test]
fn hawkes_matches_brute_force() {
    let m = hawkes1(1, 1.0);
    let path = path1(&m, &[0.3, 0.8]);
    let theta = [1.0, 1.0, 2.0];
    let fast = quasi_loglik(&m, &theta, &path).unwrap();
    let slow = brute_loglik(&m, &theta, &path);
    assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
}

#[test]
fn recursive_matches_double_sum_on_simulated_paths() {
    let m = hawkes1(50, 2.0);
    for seed in 0..5 {
        let path = simulate(&m, &[1.0, 1.0, 2.0], &SimOptions::exp_exact(seed)).unwrap();
        for theta in [[1.0, 1.0, 2.0], [0.5, 2.0, 4.0], [3.0, 0.1, 0.7]] {
            let fast = quasi_loglik(&m, &theta, &path).unwrap();
            let slow = brute_loglik(&m, &theta, &path);
            assert!((fast - slow).abs() < 1e-8 * (1.0 + slow.abs()), "{fast} vs {slow}");
        }
    }
}

#[test]
fn intensity_examples() {
    let m = ModelSpec {
        baseline: BaselineSpec::Constant { rates: vec![Coef::Fixed(0.0)] },
        kernel: KernelSpec::Exponential { a: vec![vec![Coef::Fixed(1.0)]], b: Coef::Fixed(0.0) },
        ..hawkes1(1, 1.0)
    };
    let path = path1(&m, &[0.2, 0.5]);
    let th = [1.0, 1.0, 2.0];
    assert_eq!(intensity_at(&m, &th, 0.7, &path).unwrap(), vec![2.0]);
    let h = hawkes1(1, 2.0);
    let p = path1(&h, &[0.5]);
    let v = intensity_at(&h, &[1.0, 1.0, 2.0], 1.0, &p).unwrap()[0];
    assert!((v - (1.0 + (-1f64).exp())).abs() < 1e-14);
    // left limit: the event at t itself does not count
    let v0 = intensity_at(&h, &[1.0, 1.0, 2.0], 0.5, &p).unwrap()[0];
    assert_eq!(v0, 1.0);
}

fn mixed_models() -> Vec<(ModelSpec, Vec<f64>)> {
    let hz = TimeHorizon::new(-0.5, 0.0, 3.0).unwrap();
    let p = |i| Coef::Param { param: i };
    let mut v = Vec::new();
    // 2D exponential Hawkes with presample
    v.push((
        ModelSpec::exp_hawkes(2, hz, 30, ParamSpace::new(vec![0.1; 7], vec![5.0; 7]).unwrap()),
        vec![1.0, 0.7, 0.8, 0.3, 0.2, 0.6, 2.5],
    ));
    // quadratic baseline 2D
    v.push((
        ModelSpec::quadratic_hawkes_2d(hz, 30, ParamSpace::new(vec![0.01; 9], vec![5.0; 9]).unwrap()),
        vec![0.3, 0.2, 1.0, 0.8, 0.5, 0.2, 0.1, 0.4, 2.0],
    ));
    // power-law kernel with shape parameters
    v.push((
        ModelSpec {
            d: 1,
            horizon: hz,
            n: 20,
            baseline: BaselineSpec::Polynomial { coeffs: vec![vec![p(0)], vec![Coef::Fixed(0.1)]] },
            kernel: KernelSpec::PowerLawExp { scale: vec![vec![p(1)]], decay: p(2), power: p(3) },
            covariate: CovariateSpec::SelfExciting,
            param_space: ParamSpace::new(vec![0.1, 0.1, 0.5, 0.1], vec![5.0, 5.0, 6.0, 2.0]).unwrap(),
            require_positive: false,
        },
        vec![1.0, 1.5, 2.0, 0.5],
    ));
    // external covariate, mixed
    v.push((
        ModelSpec {
            d: 1,
            horizon: hz,
            n: 20,
            baseline: BaselineSpec::Constant { rates: vec![p(0)] },
            kernel: KernelSpec::Exponential { a: vec![vec![p(1), p(2)]], b: p(3) },
            covariate: CovariateSpec::Mixed {
                external_dim: 1,
                jumps: (0..12).map(|k| CovariateJump { time: -0.4 + 0.29 * k as f64, increments: vec![0.3] }).collect(),
            },
            param_space: ParamSpace::new(vec![0.1, 0.0, 0.0, 0.5], vec![5.0, 3.0, 3.0, 6.0]).unwrap(),
            require_positive: false,
        },
        vec![1.0, 0.5, 0.8, 2.0],
    ));
    v
}

#[test]
fn score_and_hessian_match_finite_differences() {
    for (m, truth) in mixed_models() {
        let path = simulate(&m, &truth, &SimOptions::thinning(11)).unwrap();
        assert!(path.total_events() > 5);
        let mut theta = truth.clone();
        theta[0] *= 1.1;
        let g = score(&m, &theta, &path).unwrap();
        let fd = fd_gradient(&m, &theta, &path, 1e-6).unwrap();
        assert!(rel_err(&g, &fd) < 1e-5, "{g:?} vs {fd:?}");
        let hs = hessian(&m, &theta, &path).unwrap();
        for i in 0..theta.len() {
            let h = 1e-5 * theta[i].abs().max(1.0);
            let mut tp = theta.clone();
            tp[i] += h;
            let gp = score(&m, &tp, &path).unwrap();
            tp[i] -= 2.0 * h;
            let gm = score(&m, &tp, &path).unwrap();
            let col: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let an: Vec<f64> = (0..theta.len()).map(|j| hs[j][i]).collect();
            assert!(rel_err(&an, &col) < 1e-4, "col {i}: {an:?} vs {col:?}");
        }
        for i in 0..theta.len() {
            for j in 0..theta.len() {
                assert_eq!(hs[i][j], hs[j][i]);
            }
        }
        let slow = brute_loglik(&m, &theta, &path);
        let fast = quasi_loglik(&m, &theta, &path).unwrap();
        assert!((fast - slow).abs() < 1e-7 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }
}

#[test]
fn components_add_up() {
    for (m, truth) in mixed_models() {
        let path = simulate(&m, &truth, &SimOptions::thinning(3)).unwrap();
        let total = quasi_loglik(&m, &truth, &path).unwrap();
        let parts = component_logliks(&m, &truth, &path).unwrap();
        let mut masked = 0.0;
        for a in 0..m.d {
            let mask: Vec<bool> = (0..m.d).map(|b| b == a).collect();
            masked += quasi_loglik_masked(&m, &truth, &path, &mask).unwrap();
        }
        assert!((parts.iter().sum::<f64>() - total).abs() < 1e-9 * (1.0 + total.abs()));
        assert!((masked - total).abs() < 1e-9 * (1.0 + total.abs()));
    }
}

#[test]
fn zero_intensity_is_infeasible() {
    let m = ModelSpec {
        baseline: BaselineSpec::Constant { rates: vec![Coef::Fixed(0.0)] },
        kernel: KernelSpec::Exponential { a: vec![vec![Coef::Param { param: 0 }]], b: Coef::Fixed(1.0) },
        param_space: ParamSpace::new(vec![0.0], vec![2.0]).unwrap(),
        ..hawkes1(1, 1.0)
    };
    let path = path1(&m, &[0.3, 0.6]);
    let e = evaluate(&m, &[1.0], &path, Order::Hessian).unwrap();
    assert!(!e.feasible);
    assert_eq!(e.value, f64::NEG_INFINITY);
    assert!(score(&m, &[1.0], &path).is_err());
}

#[test]
fn random_field_identities() {
    let m = poisson(0.01, 5.0, 100, 1.0);
    let times: Vec<f64> = (1..=12).map(|k| k as f64 / 13.0).collect();
    let path = path1(&m, &times);
    let z = random_field_z(&m, &[0.1], &[1.0], &path).unwrap();
    assert!((z.log_z - (12.0 * 2f64.ln() - 10.0)).abs() < 1e-10);
    assert!((z.log_z + 1.6822).abs() < 1e-4);
    assert!((z.z - z.log_z.exp()).abs() == 0.0);
    let z0 = random_field_z(&m, &[0.1], &[0.0], &path).unwrap();
    assert_eq!(z0.z, 1.0);
    let y = y_field(&m, &path, &[0.2], &[0.1]).unwrap();
    assert!((z.log_z - 100.0 * y).abs() < 1e-10);
    let d = delta_n(&m, &[0.1], &path).unwrap();
    assert!((d[0] - 2.0).abs() < 1e-10);
    assert_eq!(lamn_residual(&m, &[0.1], &[0.0], &path, &[vec![10.0]]).unwrap(), 0.0);
    assert!(random_field_z(&m, &[0.1], &[-2.0], &path).is_err());
    // closed form of 𝕐n for the Poisson model
    let yf = y_field(&m, &path, &[0.3], &[0.1]).unwrap();
    let oracle = 12.0 / 100.0 * 3f64.ln() - 0.2;
    assert!((yf - oracle).abs() < 1e-12);
}

#[test]
fn linear_model_has_quadratic_field() {
    // the integral term is linear in θ, so the LAMN residual is the log-term Taylor remainder;
    // with all events at a baseline that depends linearly on θ and zero events the residual
    // is exactly the quadrature error
    let m = poisson(0.01, 5.0, 100, 1.0);
    let path = path1(&m, &[]);
    let r = lamn_residual(&m, &[1.0], &[1.5], &path, &[vec![0.0]]).unwrap();
    assert!(r.abs() < 1e-8);
    let _ = likelihood::observed_information(&m, &[1.0], &path).unwrap();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[test]
fn score_is_centred_at_the_truth() {
    let m = hawkes1(100, 1.0);
    let truth = [1.0, 1.0, 2.0];
    let reps = 2000;
    let draws: Vec<Vec<f64>> = (0..reps)
        .map(|s| {
            let path = simulate(&m, &truth, &SimOptions::exp_exact(404).with_stream(s)).unwrap();
            delta_n(&m, &truth, &path).unwrap()
        })
        .collect();
    for i in 0..3 {
        let mean = draws.iter().map(|d| d[i]).sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "coordinate {i}: mean {mean} se {se}");
    }
}

#[test]
fn lamn_residual_shrinks() {
    let mu = 2.0;
    let u = [1.5];
    let mut meds = Vec::new();
    for n in [100u64, 400, 1600] {
        let m = poisson(0.01, 10.0, n, 1.0);
        let gamma = [vec![1.0 / mu]];
        let r: Vec<f64> = (0..500)
            .map(|s| {
                let path = simulate(&m, &[mu], &SimOptions::thinning(9).with_stream(s)).unwrap();
                lamn_residual(&m, &[mu], &u, &path, &gamma).unwrap().abs()
            })
            .collect();
        meds.push(median(r));
    }
    assert!(meds[0] > meds[1] && meds[1] > meds[2], "{meds:?}");
}

#[test]
fn field_approaches_its_limit() {
    use qlapp_core::asymptotics::{default_step, limit_intensity_star, y_limit_many};
    use qlapp_core::rng::StreamRng;
    let truth = [1.0, 1.0, 2.0];
    let base = hawkes1(100, 1.0);
    let lim = limit_intensity_star(&base, &truth, default_step(&base.horizon)).unwrap();
    let s = &base.param_space;
    let mut rng = StreamRng::new(1, 0);
    let grid: Vec<Vec<f64>> = (0..101)
        .map(|_| (0..3).map(|i| s.lower[i] + rng.uniform() * (s.upper[i] - s.lower[i])).collect())
        .collect();
    let y = y_limit_many(&base, &grid, &lim).unwrap();
    let mut meds = Vec::new();
    for n in [100u64, 400, 1600] {
        let m = hawkes1(n, 1.0);
        let gaps: Vec<f64> = (0..200)
            .map(|seed| {
                let path = simulate(&m, &truth, &SimOptions::exp_exact(17).with_stream(seed)).unwrap();
                grid.iter()
                    .zip(&y)
                    .map(|(th, yl)| (y_field(&m, &path, th, &truth).unwrap() - yl).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        meds.push(median(gaps));
    }
    assert!(meds[0] > meds[1] && meds[1] > meds[2], "{meds:?}");
}
