//! Reduced-size invariant suite behind the `selftest` subcommand.

use crate::analysis::{beta_closed_form, berry_curvature, chern_integral, heisenberg_mean_p};
use crate::experiments::{self, GridSpec, Observable, ProtocolKind, SweepSpec};
use crate::meter::{assemble, make_grid, momentum_transform, propagate_grid, GridRunOptions, HalfWidthPolicy};
use crate::model::{CouplingLaw, DriveParams, Protocol, TWO_PI};
use crate::oracle::beta_quadrature;
use crate::propagator::{evolve, mirror_phase, IntegratorConfig, QubitAmplitudes};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, tol: f64) -> Check {
    Check { name, pass: value <= tol, detail: format!("{value:.3e} (tolerance {tol:.0e})") }
}

fn failed(name: &'static str, err: impl std::fmt::Display) -> Check {
    Check { name, pass: false, detail: format!("error: {err}") }
}

fn fig1(delta2_mhz: f64) -> DriveParams<f64> {
    DriveParams::from_mhz(30.0, delta2_mhz, 10.0, 1.0).expect("fixed parameters are valid")
}

fn beta_oracle() -> Check {
    let worst = [0.01, 0.1, 0.5, 1.0, 2.0, 3.0]
        .into_iter()
        .map(|dx| (beta_closed_form(dx) - beta_quadrature(dx)).abs())
        .fold(0.0, f64::max);
    check("beta_closed_form_vs_quadrature", worst, 1e-8)
}

fn bare_plateaus(cfg: &IntegratorConfig) -> Check {
    let mut worst = 0.0f64;
    for (d2, want) in [(0.3, 1.0), (60.0, 0.0)] {
        let p = match Protocol::single(fig1(d2), CouplingLaw::Off) {
            Ok(p) => p,
            Err(e) => return failed("bare_chern_plateaus", e),
        };
        match evolve(0.0, &p, cfg, QubitAmplitudes::excited()).map(|t| chern_integral(&berry_curvature(&t, &p))) {
            Ok(Ok(c)) => worst = worst.max((c.total - want).abs()),
            Ok(Err(e)) => return failed("bare_chern_plateaus", e),
            Err(e) => return failed("bare_chern_plateaus", e),
        }
    }
    check("bare_chern_plateaus", worst, 0.02)
}

fn triple_partials(cfg: &IntegratorConfig) -> Check {
    let run = || -> Result<Vec<f64>, Box<dyn std::error::Error>> {
        let p = Protocol::triple(fig1(0.3), CouplingLaw::BerryWeighted)?;
        let t = evolve(0.0, &p, cfg, QubitAmplitudes::excited())?;
        Ok(chern_integral(&berry_curvature(&t, &p))?.partials)
    };
    match run() {
        Ok(parts) => {
            let dev = parts.iter().zip([1.0, 0.0, 1.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            check("triple_partials_1_0_1", if parts.len() == 3 { dev } else { f64::INFINITY }, 0.05)
        }
        Err(e) => failed("triple_partials_1_0_1", e),
    }
}

fn norm_and_mirror(cfg: &IntegratorConfig) -> Vec<Check> {
    let p = match Protocol::single(fig1(0.3), CouplingLaw::BerryWeighted) {
        Ok(p) => p,
        Err(e) => return vec![failed("norm_conservation", e)],
    };
    let (mut drift, mut mirror) = (0.0f64, 0.0f64);
    let phase = mirror_phase(&p, 0.35).expect("φ = 0 admits the mirror relation");
    for x in [0.35, 6.0] {
        let (a, b) = match (
            evolve(x, &p, cfg, QubitAmplitudes::excited()),
            evolve(-x, &p, cfg, QubitAmplitudes::excited()),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return vec![failed("norm_conservation", e)],
        };
        drift = drift.max(a.max_norm_drift).max(b.max_norm_drift);
        if x == 0.35 {
            for (sa, sb) in a.states.iter().zip(&b.states) {
                mirror = mirror.max((sb.ce - sa.ce).norm()).max((sb.cg - phase * sa.cg).norm());
            }
        }
    }
    vec![check("norm_conservation", drift, 1e-9), check("mirror_relation", mirror, 1e-9)]
}

fn grid_identities(cfg: &IntegratorConfig) -> Vec<Check> {
    let run = || -> Result<[f64; 4], Box<dyn std::error::Error>> {
        let p = Protocol::single(fig1(0.3), CouplingLaw::BerryWeighted)?;
        let grid = make_grid(0.5, 256, HalfWidthPolicy::Default)?;
        let run = propagate_grid(&p, &grid, cfg, &GridRunOptions { record_sigma_y: true, ..Default::default() })?;
        let js = assemble(&grid, run.final_states(), p.total_duration())?;
        let m = momentum_transform(&js)?;
        let h = heisenberg_mean_p(&run, &p)?;
        let position: f64 = grid.h * js.amp_e.iter().chain(&js.amp_g).map(|a| a.norm_sqr()).sum::<f64>();
        Ok([
            (position - m.total()).abs(),
            js.density_defect(),
            (m.mean_p - h[h.len() - 1]).abs(),
            (m.mean_p / beta_closed_form(0.5) - 1.0).abs(),
        ])
    };
    match run() {
        Ok([parseval, density, heis, corrected]) => vec![
            check("parseval", parseval, 1e-10),
            check("density_conservation", density, 1e-9),
            check("spectral_vs_heisenberg", heis, 1e-4),
            check("corrected_estimator", corrected, 0.05),
        ],
        Err(e) => vec![failed("grid_identities", e)],
    }
}

fn worker_determinism() -> Check {
    let spec = SweepSpec {
        delta2_values: vec![TWO_PI * 0.3, TWO_PI * 45.0],
        dx_values: vec![0.5],
        grid: GridSpec::new(256, HalfWidthPolicy::Default),
        integrator: IntegratorConfig::default().with_steps(8000).with_samples(201),
        outputs: vec![Observable::MeanP, Observable::StdP],
        snapshots_per_segment: 2,
        convergence_check: false,
        ..SweepSpec::new(fig1(0.0), ProtocolKind::Single)
    };
    let encode = |workers| {
        experiments::with_workers(workers, || experiments::run(&spec))
            .map(|r| (r.records.len(), serde_json::to_string(&r).unwrap_or_default()))
    };
    match (encode(1), encode(2)) {
        (Ok(a), Ok(b)) => Check {
            name: "worker_determinism",
            pass: a.0 == 2 && a == b,
            detail: if a == b { "identical payloads".into() } else { "payloads differ".into() },
        },
        (Err(e), _) | (_, Err(e)) => failed("worker_determinism", e),
    }
}

/// Run every check; none of them panics on failure.
pub fn run() -> Vec<Check> {
    let cfg = IntegratorConfig::default();
    let mut checks = vec![beta_oracle(), bare_plateaus(&cfg), triple_partials(&cfg)];
    checks.extend(norm_and_mirror(&cfg));
    checks.extend(grid_identities(&cfg));
    checks.push(worker_determinism());
    checks
}
