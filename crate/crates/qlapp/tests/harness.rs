use nalgebra::DMatrix;
use proptest::prelude::*;
use qlapp::harness::*;
use qlapp::AppError;
use qlapp_core::simulate::{simulate, SimMethod, SimOptions};
use qlapp_core::{Coef, KernelSpec, ModelSpec, ParamSpace, TimeHorizon};

fn poisson(n: u64) -> ModelSpec {
    ModelSpec::poisson(1, TimeHorizon::observed(0.0, 1.0).unwrap(), n, ParamSpace::new(vec![0.01], vec![10.0]).unwrap())
}

fn hawkes() -> ModelSpec {
    ModelSpec::exp_hawkes(
        1,
        TimeHorizon::observed(0.0, 1.0).unwrap(),
        100,
        ParamSpace::new(vec![0.05, 0.0, 0.05], vec![5.0, 5.0, 20.0]).unwrap(),
    )
}

fn poisson_config(reps: usize) -> McConfig {
    let mut c = McConfig::new(poisson(100), vec![2.0], vec![400], reps, 11);
    c.estimators = vec![Estimator::Qmle];
    c
}

#[test]
fn poisson_variance_and_bias() {
    let s = mc_study(&poisson_config(1000)).unwrap();
    let r = s.at(400).unwrap();
    let q = r.qmle.as_ref().unwrap();
    assert_eq!(q.successes, 1000);
    // Γ⁻¹ = μ* / (T1 - T0)
    let var = q.covariance[0][0];
    assert!((var - 2.0).abs() <= 0.1 * 2.0, "{var}");
    assert!(q.bias[0].abs() <= 3.0 * q.bias_se[0], "{} {}", q.bias[0], q.bias_se[0]);
    assert!((s.gamma_inv.as_ref().unwrap()[0][0] - 2.0).abs() < 1e-9);
    assert!(!s.diagnostics_only);
    assert_eq!(r.failures, FailureCounts::default());
}

#[test]
fn hawkes_gap_shrinks() {
    let mut c = McConfig::new(hawkes(), vec![1.0, 1.0, 2.0], vec![100, 400, 1600], 300, 5);
    c.estimators = vec![Estimator::Qmle];
    let s = mc_study(&c).unwrap();
    let gaps: Vec<f64> = s.per_n.iter().map(|r| r.qmle.as_ref().unwrap().frobenius_gap.unwrap()).collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn gaussian_moments_match_closed_forms() {
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    assert_eq!(gaussian_moment(&s, 2, 0, 1).unwrap(), 3.0);
    // E|X|⁴ = (tr Σ)² + 2 tr Σ²
    assert!((gaussian_moment(&s, 4, 0, 1).unwrap() - (9.0 + 2.0 * 5.5)).abs() < 1e-12);
    let one = DMatrix::from_element(1, 1, 4.0);
    assert!((gaussian_moment(&one, 1, 0, 1).unwrap() - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
    // isotropic plane: |X| is Rayleigh, E|X| = σ √(π/2), E|X|³ = 3σ³ √(π/2)
    let iso = DMatrix::from_diagonal_element(2, 2, 0.25);
    let mc1 = gaussian_moment(&iso, 1, 1_000_000, 7).unwrap();
    let mc3 = gaussian_moment(&iso, 3, 1_000_000, 7).unwrap();
    let r = (std::f64::consts::PI / 2.0).sqrt();
    assert!((mc1 - 0.5 * r).abs() < 3e-3, "{mc1}");
    assert!((mc3 - 3.0 * 0.125 * r).abs() < 5e-3, "{mc3}");
}

#[test]
fn study_is_deterministic_across_thread_counts() {
    let mut c = McConfig::new(hawkes(), vec![1.0, 1.0, 2.0], vec![50, 100], 6, 3);
    c.qbe.nodes = 6;
    c.gaussian_draws = 1000;
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| mc_study(&c)).unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| mc_study(&c)).unwrap();
    assert_eq!(one, three);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let f1 = export(&one, d1.path()).unwrap();
    export(&three, d2.path()).unwrap();
    for f in &f1 {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
    }
    // QMLE and QBE come from the same paths
    let r = &one.per_n[0];
    assert_eq!(r.qmle.as_ref().unwrap().successes, r.qbe.as_ref().unwrap().successes + r.failures.qbe);
}

#[test]
fn export_round_trip() {
    let s = mc_study(&poisson_config(20)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export(&s, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    assert_eq!(import(dir.path()).unwrap(), s);
    let long = std::fs::read_to_string(dir.path().join("statistics_long.csv")).unwrap();
    assert!(long.starts_with("n,estimator,statistic,value\n"));
    assert!(long.contains("400,qmle,frobenius_gap,"));
}

#[test]
fn empty_summary_writes_only_the_manifest() {
    let s = McSummary {
        config_hash: "x".into(),
        seed: 0,
        theta_star: vec![1.0],
        gamma: None,
        gamma_inv: None,
        gaussian_moments: vec![],
        diagnostics_only: true,
        per_n: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let files = export(&s, dir.path()).unwrap();
    assert_eq!(files, vec![dir.path().join(MANIFEST)]);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert_eq!(import(dir.path()).unwrap(), s);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = poisson_config(1);
    assert!(matches!(mc_study(&c), Err(AppError::Invalid(_))));
    c.replicates = 5;
    c.n_values = vec![400, 100];
    assert_eq!(mc_study(&c).unwrap_err().exit_code(), 2);
    c.n_values = vec![100];
    c.theta_star = vec![20.0];
    assert_eq!(mc_study(&c).unwrap_err().exit_code(), 2);
}

#[test]
fn failing_replicates_abort_the_study() {
    // exact simulation is not available for this kernel, so every replicate fails
    let mut m = poisson(100);
    m.kernel = KernelSpec::PowerLawExp {
        scale: vec![vec![Coef::Fixed(0.5)]],
        decay: Coef::Fixed(1.0),
        power: Coef::Fixed(0.5),
    };
    let mut c = McConfig::new(m, vec![2.0], vec![100], 5, 1);
    c.sim_method = Some(SimMethod::ExpExact);
    match mc_study(&c) {
        Err(e @ AppError::Aborted(_)) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains("simulation: 5"), "{e}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pldi_probe_poisson() {
    let m = poisson(100);
    let t = pldi_probe(&m, &[2.0], 400, &[0.0, 2.0, 5.0], 2000, 9, &PldiOptions::default()).unwrap();
    assert_eq!(t.failures, 0);
    assert_eq!(t.rows[0].probability, 1.0);
    let (p2, p5) = (&t.rows[1], &t.rows[2]);
    assert!(p5.probability < p2.probability);
    assert!(p5.wilson_hi <= p2.wilson_hi && p5.wilson_lo <= p2.wilson_lo);
    assert!(t.nonincreasing());
    // closed form: log ℤ(u) = N log(1 + u / (√n μ*)) - √n u is concave, so the supremum
    // over each ray of {|u| >= r} sits at the clamped maximizer
    let n = 400u64;
    let sn = (n as f64).sqrt();
    let (lo, hi) = ((0.01 - 2.0) * sn, (10.0 - 2.0) * sn);
    let rs = [1.0, 2.0, 4.0, 8.0];
    let a = pldi_probe(&m, &[2.0], n, &rs, 300, 4, &PldiOptions::default()).unwrap();
    let mn = m.with_n(n);
    let mut oracle = [0usize; 4];
    for rep in 0..300 {
        let path = simulate(&mn, &[2.0], &SimOptions::thinning(4).with_stream(rep)).unwrap();
        let k = path.total_events() as f64;
        let f = |u: f64| k * (1.0 + u / (sn * 2.0)).ln() - sn * u;
        let u_hat = sn * (k / n as f64 - 2.0);
        for (j, &r) in rs.iter().enumerate() {
            let right = if r <= hi { f(u_hat.clamp(r, hi)) } else { f64::NEG_INFINITY };
            let left = if -r >= lo { f(u_hat.clamp(lo, -r)) } else { f64::NEG_INFINITY };
            if right.max(left) >= -r {
                oracle[j] += 1;
            }
        }
    }
    for (row, want) in a.rows.iter().zip(oracle) {
        assert!(row.hits.abs_diff(want) <= 1, "r = {}: {} vs {want}", row.r, row.hits);
    }
}

#[test]
fn pldi_probe_is_limited_to_three_parameters() {
    let m = ModelSpec::poisson(4, TimeHorizon::observed(0.0, 1.0).unwrap(), 10, ParamSpace::new(vec![0.1; 4], vec![1.0; 4]).unwrap());
    let e = pldi_probe(&m, &[0.5; 4], 10, &[1.0], 10, 0, &PldiOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn hash_tracks_the_config(seed in any::<u64>(), reps in 2usize..1000, other in any::<u64>()) {
        let mut a = poisson_config(reps);
        a.seed = seed;
        let b = a.clone();
        prop_assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = other;
        prop_assert_eq!(a.hash() == c.hash(), seed == other);
        let mut d = a.clone();
        d.level = 0.9;
        prop_assert_ne!(a.hash(), d.hash());
    }
}
