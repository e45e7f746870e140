use berry_meter::analysis::{beta_closed_form, heisenberg_mean_p};
use berry_meter::meter::{
    assemble, make_grid, mean_p_derivative, momentum_transform, propagate_grid, GridRunOptions, HalfWidthPolicy,
    MeterGrid,
};
use berry_meter::model::{CouplingLaw, DriveParams, Protocol};
use berry_meter::oracle::beta_quadrature;
use berry_meter::propagator::IntegratorConfig;
use proptest::prelude::*;

fn protocol(delta2_mhz: f64, triple: bool) -> Protocol<f64> {
    let params = DriveParams::<f64>::from_mhz(30.0, delta2_mhz, 10.0, 1.0).unwrap();
    if triple {
        Protocol::triple(params, CouplingLaw::BerryWeighted).unwrap()
    } else {
        Protocol::single(params, CouplingLaw::BerryWeighted).unwrap()
    }
}

fn final_moments(p: &Protocol<f64>, grid: &MeterGrid<f64>, cfg: &IntegratorConfig) -> (f64, f64) {
    let run = propagate_grid(p, grid, cfg, &GridRunOptions::default()).unwrap();
    let js = assemble(grid, run.final_states(), p.total_duration()).unwrap();
    let m = momentum_transform(&js).unwrap();
    (m.mean_p, m.std_p)
}

#[test]
fn beta_closed_form_matches_quadrature() {
    for dx in [0.01, 0.1, 0.5, 1.0, 2.0, 3.0] {
        let (closed, quad): (f64, f64) = (beta_closed_form(dx), beta_quadrature(dx));
        assert!((closed - quad).abs() < 1e-8, "Δx = {dx}: {closed} vs {quad}");
    }
    assert!(beta_closed_form(0.01f64) > 0.9998);
    assert!((beta_closed_form(1.0f64) - 0.6557).abs() < 5e-5);
}

#[test]
fn doubling_grid_points_at_fixed_width_leaves_moments_unchanged() {
    let p = protocol(0.3, false);
    let cfg = IntegratorConfig::default();
    let coarse = make_grid(0.5, 1024, HalfWidthPolicy::Default).unwrap();
    let fine = make_grid(0.5, 2048, HalfWidthPolicy::Fixed(coarse.half_width)).unwrap();
    let (m1, s1) = final_moments(&p, &coarse, &cfg);
    let (m2, s2) = final_moments(&p, &fine, &cfg);
    assert!((m1 - m2).abs() < 1e-8, "mean {m1} vs {m2}");
    assert!((s1 - s2).abs() < 1e-8, "std {s1} vs {s2}");
}

#[test]
fn derivative_and_spectral_means_agree_on_a_fine_grid() {
    let p = protocol(0.3, false);
    let l = make_grid::<f64>(0.5, 1024, HalfWidthPolicy::Default).unwrap().half_width;
    let grid = make_grid(0.5, 2048, HalfWidthPolicy::Fixed(l)).unwrap();
    let run = propagate_grid(&p, &grid, &IntegratorConfig::default(), &GridRunOptions::default()).unwrap();
    let js = assemble(&grid, run.final_states(), p.total_duration()).unwrap();
    let spectral = momentum_transform(&js).unwrap().mean_p;
    assert!((spectral - mean_p_derivative(&js)).abs() <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    #[test]
    fn joint_state_identities(
        dx in 0.2f64..1.0,
        delta2 in -60.0f64..60.0,
        triple in any::<bool>(),
    ) {
        let p = protocol(delta2, triple);
        let grid = make_grid(dx, 512, HalfWidthPolicy::Default).unwrap();
        let cfg = IntegratorConfig::default();
        let run = propagate_grid(&p, &grid, &cfg, &GridRunOptions { record_sigma_y: true, ..Default::default() }).unwrap();
        let js = assemble(&grid, run.final_states(), p.total_duration()).unwrap();
        let m = momentum_transform(&js).unwrap();

        let pos_e: f64 = grid.h * js.amp_e.iter().map(|a| a.norm_sqr()).sum::<f64>();
        let pos_g: f64 = grid.h * js.amp_g.iter().map(|a| a.norm_sqr()).sum::<f64>();
        prop_assert!((pos_e - m.mass_e()).abs() <= 1e-10);
        prop_assert!((pos_g - m.mass_g()).abs() <= 1e-10);
        prop_assert!(m.std_p > 0.0);
        // pointwise unitarity: defects stay within the integrator's own norm drift
        let peak = grid.profile.iter().map(|a| a * a).fold(0.0, f64::max);
        prop_assert!((m.total() - 1.0).abs() <= run.max_norm_drift + 1e-10);
        prop_assert!(js.density_defect() <= peak * run.max_norm_drift + 1e-12);

        let h = heisenberg_mean_p(&run, &p).unwrap();
        prop_assert!((m.mean_p - h[h.len() - 1]).abs() <= 1e-4, "spectral {} vs Heisenberg {}", m.mean_p, h[h.len() - 1]);

        let direct = propagate_grid(&p, &grid, &cfg, &GridRunOptions { no_mirror: true, ..Default::default() }).unwrap();
        prop_assert_eq!(direct.final_states().len(), run.final_states().len());
        for (a, b) in direct.final_states().iter().zip(run.final_states()) {
            prop_assert!((a.ce - b.ce).norm() <= 1e-12 && (a.cg - b.cg).norm() <= 1e-12);
        }
    }

    #[test]
    fn boost_shifts_the_mean_exactly(p0 in -3.0f64..3.0, dx in 0.3f64..2.0) {
        let p = protocol(0.3, false);
        let grid = make_grid(dx, 256, HalfWidthPolicy::Default).unwrap();
        let cfg = IntegratorConfig::default().with_steps(8000).with_samples(201);
        let run = propagate_grid(&p, &grid, &cfg, &GridRunOptions::default()).unwrap();
        let js = assemble(&grid, run.final_states(), p.total_duration()).unwrap();
        let before = momentum_transform(&js).unwrap();
        let after = momentum_transform(&js.boosted(p0)).unwrap();
        prop_assert!((after.mean_p - before.mean_p - p0).abs() <= 1e-8);
        prop_assert!((after.std_p - before.std_p).abs() <= 1e-8);
    }
}
