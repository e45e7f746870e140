//! Meter position grid, joint qubit-meter state and momentum statistics.

use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::MeterError;
use crate::model::Protocol;
use crate::propagator::{mirror_phase, IntegratorConfig, Propagator, QubitAmplitudes, SampleLayout};
use crate::scalar::{Cplx, Real};

/// Largest allowed |φ(±L)|²·2L.
pub const TRUNCATION_TOL: f64 = 1e-12;
/// Largest allowed momentum-density mass within two cells of the p-grid edge.
pub const ALIASING_TOL: f64 = 1e-8;

/// How the grid half-width L is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfWidthPolicy {
    /// L = max(8Δx, 6), narrowed towards 8Δx while the spacing exceeds Δx/4.
    Default,
    Fixed(f64),
}

/// Uniform grid x_j = -L + j·h, j = 0..N-1, h = 2L/N, with the sampled Gaussian profile.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterGrid<T> {
    pub dx_param: T,
    pub half_width: T,
    pub n: usize,
    pub h: T,
    pub points: Vec<T>,
    /// Real Gaussian amplitude φ(x_j), rescaled so that h·Σφ² = 1.
    pub profile: Vec<T>,
}

impl<T: Real> MeterGrid<T> {
    /// Index of x = 0.
    pub fn center(&self) -> usize {
        self.n / 2
    }

    /// Index of -x_j, if it lies on the grid.
    pub fn mirror_index(&self, j: usize) -> Option<usize> {
        (j > 0).then(|| self.n - j)
    }

    /// h·|φ(x_j)|², the quadrature weight of each trajectory.
    pub fn weights(&self) -> Vec<T> {
        self.profile.iter().map(|&f| self.h * f * f).collect()
    }
}

/// φ(x) = (2πΔx²)^(-1/4) exp(-x²/(4Δx²)).
pub fn gaussian_profile<T: Real>(x: T, dx: T) -> T {
    let norm = (T::TAU() * dx * dx).powf(T::lit(-0.25));
    norm * (-(x * x) / (T::lit(4.0) * dx * dx)).exp()
}

fn default_half_width(dx: f64, n: usize) -> f64 {
    let floor = 8.0 * dx;
    let l = floor.max(6.0);
    if 2.0 * l / n as f64 > dx / 4.0 {
        (n as f64 * dx / 8.0).max(floor).min(l)
    } else {
        l
    }
}

pub fn make_grid<T: Real>(dx_param: T, n: usize, policy: HalfWidthPolicy) -> Result<MeterGrid<T>, MeterError> {
    if dx_param <= T::zero() || !dx_param.is_finite() {
        return Err(MeterError::InvalidGrid(format!("Δx must be positive, got {dx_param}")));
    }
    if n < 256 || !n.is_power_of_two() {
        return Err(MeterError::InvalidGrid(format!("N must be a power of two ≥ 256, got {n}")));
    }
    let dx = dx_param.as_f64();
    let half_width = match policy {
        HalfWidthPolicy::Default => default_half_width(dx, n),
        HalfWidthPolicy::Fixed(l) if l > 0.0 && l.is_finite() => l,
        HalfWidthPolicy::Fixed(l) => {
            return Err(MeterError::InvalidGrid(format!("half width must be positive, got {l}")))
        }
    };
    let edge = gaussian_profile(half_width, dx);
    let truncation = edge * edge * 2.0 * half_width;
    if truncation > TRUNCATION_TOL {
        return Err(MeterError::GridTooNarrow { truncation, half_width });
    }
    let l = T::lit(half_width);
    let h = (l + l) / T::from_usize_lossy(n);
    let points: Vec<T> = (0..n).map(|j| -l + h * T::from_usize_lossy(j)).collect();
    let mut profile: Vec<T> = points.iter().map(|&x| gaussian_profile(x, dx_param)).collect();
    let mass: T = profile.iter().map(|&f| f * f).sum::<T>() * h;
    let scale = mass.sqrt().recip();
    profile.iter_mut().for_each(|f| *f = *f * scale);
    Ok(MeterGrid { dx_param, half_width: l, n, h, points, profile })
}

/// Ψ_α(x_j) = φ(x_j)·c_α(x_j, t) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState<'g, T> {
    pub grid: &'g MeterGrid<T>,
    pub amp_e: Vec<Cplx<T>>,
    pub amp_g: Vec<Cplx<T>>,
    pub time: T,
}

pub fn assemble<'g, T: Real>(
    grid: &'g MeterGrid<T>,
    states: &[QubitAmplitudes<T>],
    time: T,
) -> Result<JointState<'g, T>, MeterError> {
    if states.len() != grid.n {
        return Err(MeterError::IncompleteData { expected: grid.n, got: states.len() });
    }
    let (amp_e, amp_g) = grid
        .profile
        .iter()
        .zip(states)
        .map(|(&f, s)| (s.ce * f, s.cg * f))
        .unzip();
    Ok(JointState { grid, amp_e, amp_g, time })
}

impl<T: Real> JointState<'_, T> {
    /// h·Σ(|Ψ_e|² + |Ψ_g|²).
    pub fn norm(&self) -> T {
        self.grid.h * self.amp_e.iter().zip(&self.amp_g).map(|(e, g)| e.norm_sqr() + g.norm_sqr()).sum::<T>()
    }

    /// max_j | |Ψ_e|² + |Ψ_g|² - |φ|² |.
    pub fn density_defect(&self) -> T {
        self.amp_e
            .iter()
            .zip(&self.amp_g)
            .zip(&self.grid.profile)
            .map(|((e, g), &f)| (e.norm_sqr() + g.norm_sqr() - f * f).abs())
            .fold(T::zero(), T::max)
    }

    /// Multiply both components by e^{i p₀ x}.
    pub fn boosted(&self, p0: T) -> Self {
        let kick: Vec<Cplx<T>> = self.grid.points.iter().map(|&x| Cplx::from_polar(T::one(), p0 * x)).collect();
        Self {
            grid: self.grid,
            amp_e: self.amp_e.iter().zip(&kick).map(|(a, k)| a * k).collect(),
            amp_g: self.amp_g.iter().zip(&kick).map(|(a, k)| a * k).collect(),
            time: self.time,
        }
    }
}

/// Momentum-space densities |Φ_α(p_k)|² on p_k = 2πk'/(Nh), k' = -N/2..N/2-1.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumDistribution<T> {
    pub p_grid: Vec<T>,
    pub dp_grid: T,
    pub density_e: Vec<T>,
    pub density_g: Vec<T>,
    pub mean_p: T,
    pub std_p: T,
}

impl<T: Real> MomentumDistribution<T> {
    /// Δp_grid·Σ(ρ_e + ρ_g).
    pub fn total(&self) -> T {
        self.dp_grid * self.density_e.iter().zip(&self.density_g).map(|(a, b)| *a + *b).sum::<T>()
    }

    pub fn mass_e(&self) -> T {
        self.dp_grid * self.density_e.iter().copied().sum::<T>()
    }

    pub fn mass_g(&self) -> T {
        self.dp_grid * self.density_g.iter().copied().sum::<T>()
    }
}

fn centered_spectrum<T: Real>(planner: &mut FftPlanner<T>, amp: &[Cplx<T>], h: T) -> Vec<Cplx<T>> {
    let n = amp.len();
    let scale = h / T::TAU().sqrt();
    let mut buf: Vec<Cplx<T>> =
        amp.iter().enumerate().map(|(j, a)| if j % 2 == 1 { -*a } else { *a }).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // (-1)^{k'} with k' = m - N/2 equals (-1)^m since N/2 is even
    buf.iter()
        .enumerate()
        .map(|(m, c)| if m % 2 == 1 { -*c * scale } else { *c * scale })
        .collect()
}

/// Φ_α(p) = (1/√2π) Σ_j h Ψ_α(x_j) e^{-i p x_j}, with moments of the total density.
pub fn momentum_transform<T: Real>(js: &JointState<'_, T>) -> Result<MomentumDistribution<T>, MeterError> {
    let grid = js.grid;
    let n = grid.n;
    let mut planner = FftPlanner::new();
    let density_e: Vec<T> = centered_spectrum(&mut planner, &js.amp_e, grid.h).iter().map(|c| c.norm_sqr()).collect();
    let density_g: Vec<T> = centered_spectrum(&mut planner, &js.amp_g, grid.h).iter().map(|c| c.norm_sqr()).collect();
    let dp_grid = T::TAU() / (T::from_usize_lossy(n) * grid.h);
    let half = T::from_usize_lossy(n / 2);
    let p_grid: Vec<T> = (0..n).map(|m| dp_grid * (T::from_usize_lossy(m) - half)).collect();
    let rho: Vec<T> = density_e.iter().zip(&density_g).map(|(a, b)| *a + *b).collect();
    let total: T = rho.iter().copied().sum();
    let edge: T = [0, 1, n - 2, n - 1].iter().map(|&k| rho[k]).sum::<T>() / total;
    if edge.as_f64() > ALIASING_TOL {
        return Err(MeterError::Aliasing { edge_mass: edge.as_f64() });
    }
    let mean_p = p_grid.iter().zip(&rho).map(|(p, r)| *p * *r).sum::<T>() / total;
    let var = p_grid
        .iter()
        .zip(&rho)
        .map(|(p, r)| {
            let d = *p - mean_p;
            d * d * *r
        })
        .sum::<T>()
        / total;
    Ok(MomentumDistribution { p_grid, dp_grid, density_e, density_g, mean_p, std_p: var.sqrt() })
}

/// ⟨p⟩ = Σ_α Im[h Σ_j Ψ_α* D_x Ψ_α] with a fourth-order central difference, Ψ = 0 off the grid.
pub fn mean_p_derivative<T: Real>(js: &JointState<'_, T>) -> T {
    let h = js.grid.h;
    let c8 = T::lit(8.0);
    let denom = T::lit(12.0) * h;
    let component = |amp: &[Cplx<T>]| -> T {
        let n = amp.len();
        let at = |k: isize| -> Cplx<T> {
            if k < 0 || k as usize >= n {
                Cplx::new(T::zero(), T::zero())
            } else {
                amp[k as usize]
            }
        };
        (0..n as isize)
            .map(|j| {
                let d = (at(j - 2) - at(j - 1) * c8 + at(j + 1) * c8 - at(j + 2)) / denom;
                (amp[j as usize].conj() * d).im
            })
            .sum::<T>()
            * h
    };
    component(&js.amp_e) + component(&js.amp_g)
}

/// What [`propagate_grid`] records besides the final state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridRunOptions {
    /// Sample indices at which all grid states are stored. The final sample is always stored.
    pub snapshots: Vec<usize>,
    /// Record the profile-weighted ⟨σ_y⟩ at every sample.
    pub record_sigma_y: bool,
    /// Evolve every grid point directly instead of reflecting x ≥ 0.
    pub no_mirror: bool,
}

/// All grid trajectories of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRun<T> {
    pub layout: SampleLayout<T>,
    /// Sorted, deduplicated sample indices of `snapshots`.
    pub snapshot_indices: Vec<usize>,
    /// `snapshots[s][j]`: state at x_j and sample `snapshot_indices[s]`.
    pub snapshots: Vec<Vec<QubitAmplitudes<T>>>,
    /// h·Σ_j |φ(x_j)|² ⟨σ_y⟩(x_j) per sample, summed in grid order.
    pub sigma_y_joint: Option<Vec<T>>,
    pub max_norm_drift: T,
    /// Steps per t_q the step-size rule asked for, when breached.
    pub step_size_warning: Option<usize>,
}

impl<T: Real> GridRun<T> {
    pub fn final_states(&self) -> &[QubitAmplitudes<T>] {
        self.snapshots.last().expect("final snapshot is always recorded")
    }

    pub fn snapshot_at(&self, sample: usize) -> Option<&[QubitAmplitudes<T>]> {
        self.snapshot_indices.binary_search(&sample).ok().map(|s| self.snapshots[s].as_slice())
    }
}

struct PointRun<T> {
    snaps: Vec<QubitAmplitudes<T>>,
    mirror_snaps: Vec<QubitAmplitudes<T>>,
    sigma_y: Vec<T>,
    mirror_sigma_y: Vec<T>,
    drift: T,
}

/// Evolve every grid position from |e⟩ and collect snapshots.
///
/// Runs on the current rayon pool; results are independent of the thread count.
pub fn propagate_grid<T: Real>(
    protocol: &Protocol<T>,
    grid: &MeterGrid<T>,
    cfg: &IntegratorConfig,
    opts: &GridRunOptions,
) -> Result<GridRun<T>, MeterError> {
    let prop = Propagator::new(protocol, cfg)?;
    let step_size_warning = prop.check_step_size(grid.half_width)?;
    let layout = prop.layout().clone();
    let last = layout.len() - 1;
    let mut snapshot_indices: Vec<usize> = opts.snapshots.iter().copied().filter(|&i| i <= last).collect();
    snapshot_indices.push(last);
    snapshot_indices.sort_unstable();
    snapshot_indices.dedup();

    let use_mirror = !opts.no_mirror && mirror_phase(protocol, T::one()).is_some();
    let c = grid.center();
    let jobs: Vec<usize> = if use_mirror {
        std::iter::once(0).chain(c..grid.n).collect()
    } else {
        (0..grid.n).collect()
    };

    let run_point = |j: usize| -> PointRun<T> {
        let x = grid.points[j];
        let phase = if use_mirror && j > c { mirror_phase(protocol, x) } else { None };
        let mut out = PointRun {
            snaps: Vec::with_capacity(snapshot_indices.len()),
            mirror_snaps: Vec::new(),
            sigma_y: Vec::new(),
            mirror_sigma_y: Vec::new(),
            drift: T::zero(),
        };
        let mut next = 0usize;
        prop.run(x, QubitAmplitudes::excited(), |i, s| {
            let mirrored = phase.map(|u| QubitAmplitudes::new(s.ce, s.cg * u));
            if next < snapshot_indices.len() && snapshot_indices[next] == i {
                out.snaps.push(*s);
                if let Some(m) = mirrored {
                    out.mirror_snaps.push(m);
                }
                next += 1;
            }
            if opts.record_sigma_y {
                out.sigma_y.push(s.sigma_y());
                if let Some(m) = mirrored {
                    out.mirror_sigma_y.push(m.sigma_y());
                }
            }
            out.drift = out.drift.max((s.norm_sqr() - T::one()).abs());
        });
        out
    };
    let results: Vec<PointRun<T>> = jobs.par_iter().map(|&j| run_point(j)).collect();

    let mut by_index: Vec<Option<usize>> = vec![None; grid.n];
    let mut mirrored_from: Vec<Option<usize>> = vec![None; grid.n];
    for (r, &j) in jobs.iter().enumerate() {
        by_index[j] = Some(r);
        if use_mirror && j > c {
            mirrored_from[grid.n - j] = Some(r);
        }
    }
    let pick = |j: usize| -> (usize, bool) {
        match (by_index[j], mirrored_from[j]) {
            (Some(r), _) => (r, false),
            (None, Some(r)) => (r, true),
            (None, None) => unreachable!("every grid index is covered"),
        }
    };

    let snapshots = (0..snapshot_indices.len())
        .map(|s| {
            (0..grid.n)
                .map(|j| {
                    let (r, m) = pick(j);
                    if m {
                        results[r].mirror_snaps[s]
                    } else {
                        results[r].snaps[s]
                    }
                })
                .collect()
        })
        .collect();

    let sigma_y_joint = opts.record_sigma_y.then(|| {
        let weights = grid.weights();
        let mut acc = vec![T::zero(); layout.len()];
        for (j, w) in weights.iter().enumerate() {
            let (r, m) = pick(j);
            let series = if m { &results[r].mirror_sigma_y } else { &results[r].sigma_y };
            acc.iter_mut().zip(series).for_each(|(a, s)| *a = *a + *w * *s);
        }
        acc
    });

    let max_norm_drift = results.iter().map(|r| r.drift).fold(T::zero(), T::max);
    Ok(GridRun { layout, snapshot_indices, snapshots, sigma_y_joint, max_norm_drift, step_size_warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingLaw, DriveParams};
    use approx::assert_relative_eq;

    fn product_state(grid: &MeterGrid<f64>) -> JointState<'_, f64> {
        assemble(grid, &vec![QubitAmplitudes::excited(); grid.n], 0.0).unwrap()
    }

    #[test]
    fn grid_layout_and_normalization() {
        let g = make_grid(1.0f64, 1024, HalfWidthPolicy::Default).unwrap();
        assert_eq!(g.half_width, 8.0);
        assert_eq!(g.points[g.center()], 0.0);
        assert_relative_eq!(g.points[0], -8.0);
        assert_relative_eq!(g.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        let g = make_grid(0.3f64, 1024, HalfWidthPolicy::Default).unwrap();
        assert_eq!(g.half_width, 6.0);
        assert_eq!(g.mirror_index(1), Some(1023));
        assert_eq!(g.mirror_index(0), None);
    }

    #[test]
    fn narrow_meter_shrinks_grid() {
        let g = make_grid(0.01f64, 1024, HalfWidthPolicy::Default).unwrap();
        assert_relative_eq!(g.half_width, 1.28, epsilon = 1e-12);
        assert!(g.h <= 0.01 / 4.0 + 1e-15);
    }

    #[test]
    fn grid_rejections() {
        assert!(matches!(make_grid(1.0f64, 1000, HalfWidthPolicy::Default), Err(MeterError::InvalidGrid(_))));
        assert!(matches!(make_grid(1.0f64, 128, HalfWidthPolicy::Default), Err(MeterError::InvalidGrid(_))));
        assert!(matches!(make_grid(-1.0f64, 1024, HalfWidthPolicy::Default), Err(MeterError::InvalidGrid(_))));
        assert!(matches!(
            make_grid(1.0f64, 1024, HalfWidthPolicy::Fixed(3.0)),
            Err(MeterError::GridTooNarrow { .. })
        ));
    }

    #[test]
    fn incomplete_data_rejected() {
        let g = make_grid(1.0f64, 256, HalfWidthPolicy::Default).unwrap();
        let err = assemble(&g, &[QubitAmplitudes::excited(); 10], 0.0).unwrap_err();
        assert_eq!(err, MeterError::IncompleteData { expected: 256, got: 10 });
    }

    #[test]
    fn coherent_state_variances() {
        let dx = std::f64::consts::FRAC_1_SQRT_2;
        let g = make_grid(dx, 1024, HalfWidthPolicy::Default).unwrap();
        let js = product_state(&g);
        let m = momentum_transform(&js).unwrap();
        assert_relative_eq!(m.std_p, dx, epsilon = 1e-6);
        assert!(m.mean_p.abs() < 1e-12);
        let var_x: f64 = g.points.iter().zip(g.weights()).map(|(x, w)| x * x * w).sum();
        assert_relative_eq!(var_x, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn wide_meter_initial_width() {
        let g = make_grid(3.0f64, 1024, HalfWidthPolicy::Default).unwrap();
        assert_eq!(g.half_width, 24.0);
        let m = momentum_transform(&product_state(&g)).unwrap();
        assert_relative_eq!(m.std_p, 1.0 / 6.0, epsilon = 1e-6);
        let narrow = make_grid(0.1f64, 1024, HalfWidthPolicy::Default).unwrap();
        let m = momentum_transform(&product_state(&narrow)).unwrap();
        assert_relative_eq!(m.std_p, 5.0, epsilon = 1e-6);
    }

    #[test]
    fn parseval_and_boost() {
        let g = make_grid(0.5f64, 1024, HalfWidthPolicy::Default).unwrap();
        let js = product_state(&g).boosted(0.7);
        let m = momentum_transform(&js).unwrap();
        assert_relative_eq!(m.mass_e(), js.norm(), epsilon = 1e-12);
        assert_relative_eq!(m.mean_p, 0.7, epsilon = 1e-8);
        assert_relative_eq!(mean_p_derivative(&js), 0.7, epsilon = 1e-8);
        assert!(mean_p_derivative(&product_state(&g)).abs() < 1e-10);
    }

    #[test]
    fn aliasing_detected() {
        // a spike at one grid point has a flat spectrum reaching the p-grid edge
        let g = make_grid(1.0f64, 256, HalfWidthPolicy::Default).unwrap();
        let mut js = product_state(&g);
        js.amp_e[g.center() + 1] += Cplx::new(1.0, 0.0);
        assert!(matches!(momentum_transform(&js), Err(MeterError::Aliasing { .. })));
    }

    fn fig1_protocol(coupling: CouplingLaw) -> Protocol<f64> {
        Protocol::single(DriveParams::from_mhz(30.0, 0.3, 10.0, 1.0).unwrap(), coupling).unwrap()
    }

    fn quick() -> IntegratorConfig {
        IntegratorConfig::default().with_steps(4000).with_samples(201)
    }

    #[test]
    fn mirror_economy_is_transparent() {
        let p = fig1_protocol(CouplingLaw::BerryWeighted);
        let g = make_grid(0.5f64, 256, HalfWidthPolicy::Default).unwrap();
        let opts = GridRunOptions { snapshots: vec![50, 100], record_sigma_y: true, no_mirror: false };
        let fast = propagate_grid(&p, &g, &quick(), &opts).unwrap();
        let full = propagate_grid(&p, &g, &quick(), &GridRunOptions { no_mirror: true, ..opts }).unwrap();
        assert_eq!(fast.snapshot_indices, vec![50, 100, 200]);
        for (a, b) in fast.snapshots.iter().flatten().zip(full.snapshots.iter().flatten()) {
            assert!((a.ce - b.ce).norm() < 1e-10 && (a.cg - b.cg).norm() < 1e-10);
        }
        let (sa, sb) = (fast.sigma_y_joint.unwrap(), full.sigma_y_joint.unwrap());
        for (a, b) in sa.iter().zip(&sb) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn uncoupled_meter_stays_unshifted() {
        let p = fig1_protocol(CouplingLaw::Off);
        let g = make_grid(0.5f64, 256, HalfWidthPolicy::Default).unwrap();
        let run = propagate_grid(&p, &g, &quick(), &GridRunOptions::default()).unwrap();
        let js = assemble(&g, run.final_states(), 1.0).unwrap();
        let m = momentum_transform(&js).unwrap();
        assert!(m.mean_p.abs() < 1e-12);
        assert_relative_eq!(m.std_p, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn coupled_run_conserves_position_density() {
        let p = fig1_protocol(CouplingLaw::BerryWeighted);
        let g = make_grid(0.5f64, 2048, HalfWidthPolicy::Default).unwrap();
        let cfg = IntegratorConfig::default().with_samples(201);
        let run = propagate_grid(&p, &g, &cfg, &GridRunOptions::default()).unwrap();
        let js = assemble(&g, run.final_states(), 1.0).unwrap();
        assert!(js.density_defect() < 1e-9);
        let m = momentum_transform(&js).unwrap();
        assert_relative_eq!(m.total(), js.norm(), epsilon = 1e-10);
        let d = mean_p_derivative(&js);
        assert!((m.mean_p - d).abs() < 1e-6, "{} vs {d}", m.mean_p);
        assert!(m.mean_p > 0.5);
    }
}
