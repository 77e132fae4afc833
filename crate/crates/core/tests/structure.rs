use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sgvi_core::diagnostics::symplectic_defect;
use sgvi_core::model::StochasticHamiltonian;
use sgvi_core::noise::IncrementPair;
use sgvi_core::schemes::{build, fast_step, Method, SchemeId};
use sgvi_core::{BuiltinSystem, Increments, PhaseState, SolverConfig};

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
}

#[test]
fn every_registry_scheme_is_symplectic() {
    let kubo = BuiltinSystem::Kubo { beta: 0.1 };
    let syn = BuiltinSystem::Synchrotron { beta: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for id in SchemeId::ALL {
        for sys in [&kubo as &dyn StochasticHamiltonian, &syn] {
            if build(id).check(sys, true).is_err() {
                continue;
            }
            for _ in 0..10 {
                let z = PhaseState::scalar(uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
                let dt = uniform(&mut rng, 1e-3, 0.25);
                let pair = IncrementPair::from_normals(uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -3.0, 3.0), dt);
                let dz = [pair.dz.unwrap()];
                let r = symplectic_defect(
                    Method::Scheme(id),
                    sys,
                    &z,
                    dt,
                    Increments::with_dz(&[pair.dw], &dz),
                    None,
                )
                .unwrap();
                assert!(r.defect <= 1e-6, "{id}: {:e}", r.defect);
            }
        }
    }
}

#[test]
fn milstein_control_breaks_symplecticity() {
    let kubo = BuiltinSystem::Kubo { beta: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let worst = (0..10)
        .map(|_| {
            let z = PhaseState::scalar(uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
            let dt = uniform(&mut rng, 1e-3, 0.25);
            let dw = uniform(&mut rng, -3.0, 3.0) * dt.sqrt();
            symplectic_defect(Method::Milstein, &kubo, &z, dt, Increments::new(&[dw]), None)
                .unwrap()
                .defect
        })
        .fold(0.0, f64::max);
    assert!(worst >= 1e-3);
}

proptest! {
    #[test]
    fn midpoint_keeps_kubo_energy(q in -3.0..3.0f64, p in -3.0..3.0f64, dt in 1e-3..0.5f64, chi in -3.0..3.0f64) {
        let sys = BuiltinSystem::Kubo { beta: 0.1 };
        let z = PhaseState::scalar(q, p);
        let (z1, _) = fast_step(SchemeId::P1N1Q2Gau, &sys, &z, dt, Increments::new(&[chi * dt.sqrt()]), &SolverConfig::default()).unwrap();
        let h0 = sys.hamiltonian(&z.q, &z.p);
        prop_assert!((sys.hamiltonian(&z1.q, &z1.p) - h0).abs() <= 1e-12 * (1.0 + h0));
    }

    #[test]
    fn zero_increments_fix_every_state(q in -3.0..3.0f64, p in -3.0..3.0f64, idx in 0usize..14) {
        let id = SchemeId::ALL[idx];
        let sys = BuiltinSystem::Synchrotron { beta: 0.1 };
        let z = PhaseState::scalar(q, p);
        let (z1, _) = fast_step(id, &sys, &z, 0.0, Increments::with_dz(&[0.0], &[0.0]), &SolverConfig::default()).unwrap();
        prop_assert!(z1.distance(&z) <= 1e-14);
    }

    #[test]
    fn step_is_reversible_for_symmetric_methods(q in -2.0..2.0f64, p in -2.0..2.0f64, dt in 1e-3..0.2f64, chi in -3.0..3.0f64) {
        // midpoint and Störmer-Verlet are symmetric: stepping back with
        // (−Δt, −ΔW) returns to the start
        let sys = BuiltinSystem::Synchrotron { beta: 0.1 };
        let z = PhaseState::scalar(q, p);
        let dw = chi * dt.sqrt();
        for id in [SchemeId::P1N1Q2Gau, SchemeId::P2N2Q2Lob] {
            let cfg = SolverConfig::default();
            let (z1, _) = fast_step(id, &sys, &z, dt, Increments::new(&[dw]), &cfg).unwrap();
            let (z0, _) = fast_step(id, &sys, &z1, -dt, Increments::new(&[-dw]), &cfg).unwrap();
            prop_assert!(z0.distance(&z) <= 1e-10);
        }
    }
}
