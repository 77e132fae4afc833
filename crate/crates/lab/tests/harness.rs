use sgvi_core::noise::trial_seed;
use sgvi_core::schemes::{Method, SchemeId};
use sgvi_core::{BuiltinSystem, PhaseState, SolverConfig, WienerPath};
use sgvi_lab::harness::*;
use sgvi_lab::LabError;

fn kubo_spec(methods: Vec<Method>, n_paths: usize) -> ConvergenceSpec {
    ConvergenceSpec {
        methods,
        z0: PhaseState::scalar(0.0, 1.0),
        t_final: 3.2,
        dt_levels: vec![0.0025, 0.005, 0.01, 0.02],
        n_paths,
        seed: 42,
        reference: Reference::Exact,
        truncation: None,
        solver: SolverConfig::default(),
    }
}

fn scheme(id: SchemeId) -> Method {
    Method::Scheme(id)
}

#[test]
fn fit_order_recovers_power_laws() {
    let dt = [0.0025, 0.005, 0.01, 0.02];
    let lin: Vec<f64> = dt.iter().map(|d| 3.0 * d).collect();
    let pow: Vec<f64> = dt.iter().map(|d: &f64| 0.7 * d.powf(1.5)).collect();
    assert!((fit_order(&dt, &lin).unwrap() - 1.0).abs() < 1e-12);
    assert!((fit_order(&dt, &pow).unwrap() - 1.5).abs() < 1e-12);
    assert!(fit_order(&dt, &[1.0, 0.0, 1.0, 1.0]).is_err());
    assert!(fit_order(&dt[..1], &lin[..1]).is_err());
}

/// Midpoint on Kubo rotates by `2 atan(ε/2)` per step with `ε = Δt + βΔW`;
/// the exact flow rotates by `Σε`. Recompute the harness errors from that.
#[test]
fn kubo_midpoint_errors_match_rotation_oracle() {
    let beta = 0.1;
    let n_paths = 200;
    let spec = kubo_spec(vec![scheme(SchemeId::P1N1Q2Gau)], n_paths);
    let r = ms_convergence(&BuiltinSystem::Kubo { beta }, &spec).unwrap();
    let fine_dt = 0.0025;
    let n_fine = 1280;
    let mut e2 = [0.0; 4];
    for i in 0..n_paths {
        let path = WienerPath::sample(trial_seed(42, i as u64), n_fine, fine_dt, 1, false).unwrap();
        for (l, f) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let c = path.coarsen(f).unwrap();
            let mut lag = 0.0;
            for k in 0..c.n_steps {
                let eps = c.dt + beta * c.dw[k];
                lag += 2.0 * (eps / 2.0).atan() - eps;
            }
            e2[l] += 4.0 * (lag / 2.0).sin().powi(2);
        }
    }
    let oracle: Vec<f64> = e2.iter().map(|s| (s / n_paths as f64).sqrt()).collect();
    let got = &r.methods[0].levels;
    for l in 0..4 {
        assert!(
            (got[l].ms_error - oracle[l]).abs() <= 1e-6 * oracle[l],
            "level {l}: {} vs {}",
            got[l].ms_error,
            oracle[l]
        );
    }
    // On this grid the Δt² part of the lag is as large as the Δt part, so
    // the fitted slope sits near 1.2 rather than 1.
    let slope = fit_order(&spec.dt_levels, &oracle).unwrap();
    assert!((slope - r.methods[0].fitted_order).abs() < 1e-5);
    assert!(slope > 1.15 && slope < 1.3, "{slope}");
}

#[test]
fn noise_free_midpoint_is_second_order() {
    let spec = kubo_spec(vec![scheme(SchemeId::P1N1Q2Gau)], 4);
    let r = ms_convergence(&BuiltinSystem::Kubo { beta: 0.0 }, &spec).unwrap();
    assert!(
        (r.methods[0].fitted_order - 2.0).abs() < 0.01,
        "{}",
        r.methods[0].fitted_order
    );
}

#[test]
fn taylor_reference_converges_faster_than_order_one() {
    let spec = kubo_spec(vec![Method::Taylor32, Method::Milstein], 200);
    let r = ms_convergence(&BuiltinSystem::Kubo { beta: 0.1 }, &spec).unwrap();
    let taylor = r.method("taylor32").unwrap();
    let milstein = r.method("milstein").unwrap();
    assert!(taylor.fitted_order >= 1.4, "{}", taylor.fitted_order);
    assert!(milstein.fitted_order >= 0.85, "{}", milstein.fitted_order);
    assert!(!milstein.symplectic && taylor.levels.iter().all(|l| l.ms_error > 0.0));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let spec = kubo_spec(vec![scheme(SchemeId::P2N2Q2Lob), scheme(SchemeId::P1N3Q4Lob)], 64);
    let sys = BuiltinSystem::Kubo { beta: 0.1 };
    let one = with_threads(Some(1), || ms_convergence(&sys, &spec)).unwrap().unwrap();
    let four = with_threads(Some(4), || ms_convergence(&sys, &spec)).unwrap().unwrap();
    assert_eq!(one, four);
    assert!(with_threads(Some(0), || ()).is_err());
}

#[test]
fn simpson_and_milne_variants_overlap() {
    let mut spec = kubo_spec(vec![scheme(SchemeId::P1N3Q4Lob), scheme(SchemeId::P1N3Q4Mil)], 1000);
    spec.dt_levels = vec![0.005, 0.01];
    let r = ms_convergence(&BuiltinSystem::Kubo { beta: 0.1 }, &spec).unwrap();
    let a = r.methods[0].levels[0].ms_error;
    let b = r.methods[1].levels[0].ms_error;
    assert!((a - b).abs() <= 0.02 * a.max(b), "{a} vs {b}");
}

/// At β = 0.1 the order-3/2 scheme's error on Synchrotron is essentially its
/// deterministic error, which is second order.
#[test]
fn order_three_halves_error_is_deterministic_at_weak_noise() {
    let spec = |n_paths| ConvergenceSpec {
        methods: vec![scheme(SchemeId::Sprk32Milstein)],
        z0: PhaseState::scalar(0.0, 1.0),
        t_final: 3.2,
        dt_levels: vec![0.08, 0.16],
        n_paths,
        seed: 42,
        reference: Reference::FineStep { refine: 32 },
        truncation: None,
        solver: SolverConfig::default(),
    };
    let noisy = ms_convergence(&BuiltinSystem::Synchrotron { beta: 0.1 }, &spec(100)).unwrap();
    let quiet = ms_convergence(&BuiltinSystem::Synchrotron { beta: 0.0 }, &spec(2)).unwrap();
    for l in 0..2 {
        let ratio = noisy.methods[0].levels[l].ms_error / quiet.methods[0].levels[l].ms_error;
        assert!((ratio - 1.0).abs() < 0.1, "level {l}: ratio {ratio}");
    }
    assert!((quiet.methods[0].fitted_order - 2.0).abs() < 0.1);
}

#[test]
fn convergence_rejects_bad_setups() {
    let sys = BuiltinSystem::Synchrotron { beta: 0.1 };
    let spec = kubo_spec(vec![scheme(SchemeId::P1N1Q1Rec)], 10);
    assert!(matches!(ms_convergence(&sys, &spec), Err(LabError::Validation(_))));
    let mut s = kubo_spec(vec![scheme(SchemeId::P1N1Q2Gau)], 10);
    s.dt_levels = vec![0.003, 0.02];
    assert!(ms_convergence(&BuiltinSystem::Kubo { beta: 0.1 }, &s).is_err());
    // P1N1Q1Rec needs h independent of p, which Kubo violates
    let s = kubo_spec(vec![scheme(SchemeId::P1N1Q1Rec)], 10);
    let e = ms_convergence(&BuiltinSystem::Kubo { beta: 0.1 }, &s).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

fn energy_spec(method: Method, dt: f64, t_final: f64, n_paths: usize) -> EnergySpec {
    EnergySpec {
        method,
        z0: PhaseState::scalar(0.0, 1.0),
        t_final,
        dt,
        n_paths,
        seed: 42,
        record_every: 1,
        keep_paths: true,
        truncation: None,
        solver: SolverConfig::default(),
    }
}

#[test]
fn excess_trial_failures_abort_the_run() {
    let sys = BuiltinSystem::Anharmonic { gamma: 0.1, beta: 0.1 };
    let e = energy_experiment(&sys, &energy_spec(Method::Milstein, 0.05, 100.0, 50)).unwrap_err();
    assert!(matches!(e, LabError::Experiment(_)));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn kubo_midpoint_energy_is_flat_on_every_path() {
    let sys = BuiltinSystem::Kubo { beta: 0.1 };
    let r = energy_experiment(&sys, &energy_spec(scheme(SchemeId::P1N1Q2Gau), 0.25, 50.0, 8)).unwrap();
    let paths = r.per_path.unwrap();
    assert_eq!(paths.len(), 8);
    assert!(paths.iter().flatten().all(|h| (h - 0.5).abs() < 1e-10));
    assert!(r.slope.abs() < 1e-10);
}

#[test]
fn milstein_energy_on_kubo_blows_up() {
    let sys = BuiltinSystem::Kubo { beta: 0.1 };
    let rows = trajectory(
        &sys,
        Method::Milstein,
        &PhaseState::scalar(0.0, 1.0),
        100.0,
        0.05,
        42,
        &[],
        None,
        &SolverConfig::default(),
    )
    .unwrap();
    let dev: Vec<f64> = rows.iter().map(|r| (r.h - 0.5).abs()).collect();
    let early = dev[..dev.len() / 10].iter().cloned().fold(0.0, f64::max);
    assert!(dev[dev.len() - 1] > 2.0 * early, "{} vs {early}", dev[dev.len() - 1]);
}

#[test]
fn anharmonic_mean_energy_grows_at_half_beta_squared() {
    let sys = BuiltinSystem::Anharmonic { gamma: 0.1, beta: 0.1 };
    let mut spec = energy_spec(scheme(SchemeId::P1N1Q1RecN2Q2Lob), 0.25, 100.0, 2000);
    spec.keep_paths = false;
    spec.record_every = 4;
    let r = energy_experiment(&sys, &spec).unwrap();
    assert!((r.slope - 0.005).abs() <= 0.001, "{}", r.slope);
    assert_eq!(r.times.len(), 101);
    assert!(r.stderr.iter().skip(1).all(|s| *s > 0.0));
}
