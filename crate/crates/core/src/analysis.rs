//! Berry curvature, Chern estimators, the Heisenberg cross-check and the
//! geometric/dynamic phase split.

use crate::error::AnalysisError;
use crate::meter::{GridRun, MeterGrid};
use crate::model::{adiabatic_eigensystem, CouplingLaw, Protocol};
use crate::numerics::{cumulative_simpson, erfcx, is_uniform, simpson, unwrap_near};
use crate::propagator::{Branch, QubitAmplitudes, SampleLayout, Trajectory};
use crate::scalar::{Cplx, Real};

/// Curvature over one quench, θ ∈ [0, π] local to the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePiece<T> {
    pub theta: Vec<T>,
    pub b_x: Vec<T>,
}

/// B_x(θ) = (Ω₁/2ν)⟨σ_y⟩ sinθ at a fixed meter position, one piece per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureSeries<T> {
    pub x: T,
    pub pieces: Vec<CurvaturePiece<T>>,
}

impl<T: Real> CurvatureSeries<T> {
    /// (kπ + θ, B) over the whole protocol, boundary samples listed once.
    pub fn flattened(&self) -> Vec<(T, T)> {
        let mut out = Vec::new();
        for (k, piece) in self.pieces.iter().enumerate() {
            let offset = T::PI() * T::from_usize_lossy(k);
            let skip = usize::from(k > 0);
            out.extend(piece.theta.iter().zip(&piece.b_x).skip(skip).map(|(t, b)| (offset + *t, *b)));
        }
        out
    }
}

pub fn berry_curvature<T: Real>(traj: &Trajectory<T>, protocol: &Protocol<T>) -> CurvatureSeries<T> {
    let omega1 = protocol.params.omega1;
    let two = T::lit(2.0);
    let pieces = traj
        .segments
        .iter()
        .zip(protocol.segments())
        .map(|(span, seg)| {
            let n = span.last - span.first;
            let prefactor = omega1 / (two * seg.nu());
            let theta: Vec<T> =
                (0..=n).map(|i| T::PI() * T::from_usize_lossy(i) / T::from_usize_lossy(n)).collect();
            let b_x = theta
                .iter()
                .zip(&traj.sigma_y[span.indices()])
                .map(|(th, sy)| prefactor * *sy * th.sin())
                .collect();
            CurvaturePiece { theta, b_x }
        })
        .collect();
    CurvatureSeries { x: traj.x, pieces }
}

/// -∫B dθ over the protocol and its running value after each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChernIntegral<T> {
    pub total: T,
    pub partials: Vec<T>,
}

pub fn chern_integral<T: Real>(cs: &CurvatureSeries<T>) -> Result<ChernIntegral<T>, AnalysisError> {
    let mut running = T::zero();
    let mut partials = Vec::with_capacity(cs.pieces.len());
    for (k, piece) in cs.pieces.iter().enumerate() {
        if piece.theta.len() != piece.b_x.len() {
            return Err(AnalysisError::Shape(format!(
                "segment {k}: {} angles, {} curvature values",
                piece.theta.len(),
                piece.b_x.len()
            )));
        }
        if piece.theta.len() < 2 || !is_uniform(&piece.theta, T::lit(1e-9)) {
            return Err(AnalysisError::NonUniformSampling { segment: k });
        }
        let n = piece.theta.len() - 1;
        let h = (piece.theta[n] - piece.theta[0]) / T::from_usize_lossy(n);
        running = running - simpson(&piece.b_x, h);
        partials.push(running);
    }
    Ok(ChernIntegral { total: running, partials })
}

/// β = √(π/2Δx²)·e^{1/2Δx²}·erfc(1/√(2Δx²)) = ∫|φ(x)|²/(1+x²) dx.
pub fn beta_closed_form<T: Real>(dx_param: T) -> T {
    let z = 1.0 / (std::f64::consts::SQRT_2 * dx_param.as_f64());
    T::lit(std::f64::consts::PI.sqrt() * z * erfcx(z))
}

/// ⟨p⟩/β(Δx).
pub fn corrected_chern<T: Real>(mean_p: T, dx_param: T) -> T {
    mean_p / beta_closed_form(dx_param)
}

/// ⟨p⟩(t) = -∫₀ᵗ g(t')⟨σ_y⟩_joint(t') dt' at every sample, Simpson per segment.
pub fn heisenberg_mean_p_series<T: Real>(
    sigma_y_joint: &[T],
    layout: &SampleLayout<T>,
    protocol: &Protocol<T>,
) -> Result<Vec<T>, AnalysisError> {
    if sigma_y_joint.len() != layout.len() {
        return Err(AnalysisError::Shape(format!(
            "{} ⟨σ_y⟩ samples for {} sample times",
            sigma_y_joint.len(),
            layout.len()
        )));
    }
    let mut out = vec![T::zero(); layout.len()];
    let mut offset = T::zero();
    for (k, span) in layout.segments.iter().enumerate() {
        let integrand: Vec<T> = span
            .indices()
            .map(|i| -protocol.coupling_at_theta(layout.local_theta(k, i)) * sigma_y_joint[i])
            .collect();
        let running = cumulative_simpson(&integrand, layout.spacing(k));
        for (i, r) in span.indices().zip(&running) {
            out[i] = offset + *r;
        }
        offset = offset + running[running.len() - 1];
    }
    Ok(out)
}

/// Heisenberg-picture ⟨p⟩ at every sample of a grid run recorded with ⟨σ_y⟩.
pub fn heisenberg_mean_p<T: Real>(run: &GridRun<T>, protocol: &Protocol<T>) -> Result<Vec<T>, AnalysisError> {
    let sy = run
        .sigma_y_joint
        .as_deref()
        .ok_or_else(|| AnalysisError::Shape("grid run did not record ⟨σ_y⟩".into()))?;
    heisenberg_mean_p_series(sy, &run.layout, protocol)
}

/// Split of the phase of ⟨χ_branch|χ⟩ into dynamic and geometric parts at one x.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDecomposition<T> {
    pub x: T,
    pub times: Vec<T>,
    pub gamma_total: Vec<T>,
    pub gamma_d: Vec<T>,
    pub gamma_g: Vec<T>,
    /// Branch followed at each sample (segment-local labels; boundaries belong to the ending segment).
    pub branch: Vec<Branch>,
    /// |⟨χ_branch|χ⟩|².
    pub overlap: Vec<T>,
    /// Im⟨χ_b|∂_xχ_b⟩ of the final frame vector; ⟨p⟩ = ∫|φ|²(∂_xγ_g + this).
    pub frame_connection: T,
    pub min_overlap: T,
    /// False when the overlap drops below 0.9 or the frame is degenerate somewhere.
    pub valid: bool,
}

impl<T: Real> PhaseDecomposition<T> {
    pub fn final_gamma_g(&self) -> T {
        self.gamma_g[self.gamma_g.len() - 1]
    }

    pub fn final_gamma_d(&self) -> T {
        self.gamma_d[self.gamma_d.len() - 1]
    }
}

/// Smallest branch overlap for which a decomposition counts as adiabatic.
pub const MIN_BRANCH_OVERLAP: f64 = 0.9;

pub fn phase_decompose<T: Real>(traj: &Trajectory<T>, protocol: &Protocol<T>) -> Result<PhaseDecomposition<T>, AnalysisError> {
    let n = traj.states.len();
    if traj.times.len() != n {
        return Err(AnalysisError::Shape(format!("{} times for {n} states", traj.times.len())));
    }
    // the eigenframe carries the meter only when g = Ω/2
    let x_frame = match protocol.coupling {
        CouplingLaw::BerryWeighted => traj.x,
        CouplingLaw::Off => T::zero(),
    };
    let mut gamma_total = vec![T::zero(); n];
    let mut gamma_d = vec![T::zero(); n];
    let mut gamma_g = vec![T::zero(); n];
    let mut branch = vec![Branch::Plus; n];
    let mut overlap = vec![T::zero(); n];
    let mut valid = true;
    let mut min_overlap = T::one();
    let mut sign = T::one();
    let mut prev_vec: Option<[Cplx<T>; 2]> = None;
    let mut label = Branch::Plus;
    let mut dyn_offset = T::zero();
    let mut last_vec = [Cplx::new(T::one(), T::zero()), Cplx::new(T::zero(), T::zero())];
    let mut prev_gamma_g: Option<T> = None;

    for (k, span) in traj.segments.iter().enumerate() {
        let m = span.last - span.first;
        let mut energies = Vec::with_capacity(m + 1);
        let mut raw = Vec::with_capacity(m + 1);
        for (local, i) in span.indices().enumerate() {
            let theta = T::PI() * T::from_usize_lossy(local) / T::from_usize_lossy(m);
            let d = protocol.drive_at_theta(theta);
            let state = &traj.states[i];
            let (vec, energy) = match adiabatic_eigensystem(d.delta, d.omega, x_frame) {
                Ok(frame) => {
                    let (cp, cm) = (frame.chi_plus(), frame.chi_minus());
                    let (op, om) = (state.overlap(&cp).norm_sqr(), state.overlap(&cm).norm_sqr());
                    label = if op > om {
                        Branch::Plus
                    } else if om > op {
                        Branch::Minus
                    } else {
                        label
                    };
                    match label {
                        Branch::Plus => (cp, frame.e_plus),
                        Branch::Minus => (cm, frame.e_minus),
                    }
                }
                Err(_) => {
                    valid = false;
                    (prev_vec.unwrap_or(last_vec), energies.last().copied().unwrap_or_else(T::zero))
                }
            };
            if let Some(pv) = prev_vec {
                let dot = pv[0].conj() * vec[0] + pv[1].conj() * vec[1];
                if dot.re < T::zero() {
                    sign = -sign;
                }
            }
            let v = [vec[0] * sign, vec[1] * sign];
            prev_vec = Some(vec);
            last_vec = v;
            energies.push(energy);
            raw.push((state.overlap(&v), label));
        }
        let dt = (traj.times[span.last] - traj.times[span.first]) / T::from_usize_lossy(m);
        let neg: Vec<T> = energies.iter().map(|e| -*e).collect();
        let phase_d = cumulative_simpson(&neg, dt);
        for (local, i) in span.indices().enumerate() {
            let (amp, lab) = raw[local];
            let gd = dyn_offset + phase_d[local];
            let g_raw = amp.arg() - gd;
            let gg = match prev_gamma_g {
                Some(prev) => unwrap_near(prev, g_raw),
                None => g_raw,
            };
            prev_gamma_g = Some(gg);
            if k > 0 && local == 0 {
                // shared boundary sample stays with the segment that ends there
                continue;
            }
            let ov = amp.norm_sqr();
            min_overlap = min_overlap.min(ov);
            gamma_d[i] = gd;
            gamma_g[i] = gg;
            gamma_total[i] = gg + gd;
            branch[i] = lab;
            overlap[i] = ov;
        }
        dyn_offset = dyn_offset + phase_d[m];
    }
    if min_overlap < T::lit(MIN_BRANCH_OVERLAP) {
        valid = false;
    }
    let frame_connection = last_vec[1].norm_sqr() / (T::one() + x_frame * x_frame);
    let frame_connection = match protocol.coupling {
        CouplingLaw::BerryWeighted => frame_connection,
        CouplingLaw::Off => T::zero(),
    };
    Ok(PhaseDecomposition {
        x: traj.x,
        times: traj.times.clone(),
        gamma_total,
        gamma_d,
        gamma_g,
        branch,
        overlap,
        frame_connection,
        min_overlap,
        valid,
    })
}

/// ⟨p⟩ = Σ_j w_j (∂_xγ_g + A)(x_j) from final geometric phases on a uniform grid.
///
/// γ_g is unwrapped along x from the centre outwards before differencing
/// (fourth-order central differences, one-sided second order at the ends).
pub fn geometric_mean_p<T: Real>(
    grid: &MeterGrid<T>,
    gamma_g: &[T],
    frame_connection: &[T],
) -> Result<T, AnalysisError> {
    let n = grid.n;
    if gamma_g.len() != n || frame_connection.len() != n {
        return Err(AnalysisError::Shape(format!(
            "{} phases and {} connections for {n} grid points",
            gamma_g.len(),
            frame_connection.len()
        )));
    }
    let c = grid.center();
    let mut g = gamma_g.to_vec();
    for j in c + 1..n {
        g[j] = unwrap_near(g[j - 1], g[j]);
    }
    for j in (0..c).rev() {
        g[j] = unwrap_near(g[j + 1], g[j]);
    }
    let h = grid.h;
    let (c8, c12, c3, c4, two) = (T::lit(8.0), T::lit(12.0), T::lit(3.0), T::lit(4.0), T::lit(2.0));
    let derivative = |j: usize| -> T {
        if j >= 2 && j + 2 < n {
            (g[j - 2] - c8 * g[j - 1] + c8 * g[j + 1] - g[j + 2]) / (c12 * h)
        } else if j < 2 {
            (-c3 * g[j] + c4 * g[j + 1] - g[j + 2]) / (two * h)
        } else {
            (c3 * g[j] - c4 * g[j - 1] + g[j - 2]) / (two * h)
        }
    };
    Ok(grid
        .weights()
        .iter()
        .enumerate()
        .map(|(j, w)| *w * (derivative(j) + frame_connection[j]))
        .sum())
}

/// Δp = √(1 + 16(e·f)²t²Δx⁴)/(2Δx) for dynamic-phase enhancement e.
pub fn dp_prediction<T: Real>(dx_param: T, f: T, tq_eff: T, enhancement: T) -> T {
    let ef = enhancement * f;
    let dx2 = dx_param * dx_param;
    (T::one() + T::lit(16.0) * ef * ef * tq_eff * tq_eff * dx2 * dx2).sqrt() / (T::lit(2.0) * dx_param)
}

/// |⟨χ₊(t)|χ(t)⟩|² at every sample, using the frame at the trajectory's x.
pub fn upper_branch_overlap<T: Real>(traj: &Trajectory<T>, protocol: &Protocol<T>) -> Vec<T> {
    let x = match protocol.coupling {
        CouplingLaw::BerryWeighted => traj.x,
        CouplingLaw::Off => T::zero(),
    };
    traj.states
        .iter()
        .zip(&traj.theta)
        .map(|(s, th)| {
            let d = protocol.drive_at_theta(*th);
            adiabatic_eigensystem(d.delta, d.omega, x)
                .map(|f| s.overlap(&f.chi_plus()).norm_sqr())
                .unwrap_or_else(|_| T::zero())
        })
        .collect()
}

/// ⟨σ_y⟩ averaged over |φ|² from final states of a grid run (deterministic grid order).
pub fn joint_sigma_y<T: Real>(grid: &MeterGrid<T>, states: &[QubitAmplitudes<T>]) -> T {
    grid.weights().iter().zip(states).map(|(w, s)| *w * s.sigma_y()).sum()
}
