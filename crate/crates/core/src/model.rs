//! Drive schedule, qubit Hamiltonian and the instantaneous adiabatic frame.
//!
//! Frequencies are angular frequencies in rad/μs and times are in μs. The
//! basis is (|e>, |g>) with |e> the +1 eigenstate of σ_z, and
//! σ_y = [[0, -i], [i, 0]], so that (|e> + i|g>)/√2 has <σ_y> = +1.
//!
//! The meter couples through `+g(t)·x·σ_y`, giving the Heisenberg equation
//! dp/dt = -g σ_y and the rotated-frame form ½[Δσ_z + Ω̃σ_ξ] with tan ξ = x.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numerics::simpson;
use crate::scalar::{Cplx, Matrix2, Real};

/// Conversion factor from MHz to rad/μs.
pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Quench parameters: Δ = Δ₁cosθ + Δ₂, Ω = Ω₁sinθ with θ swept over [0, π] in `tq`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct DriveParams<T> {
    pub delta1: T,
    pub delta2: T,
    pub omega1: T,
    pub phi: T,
    pub tq: T,
}

impl<T: Real> DriveParams<T> {
    pub fn new(delta1: T, delta2: T, omega1: T, tq: T) -> Result<Self, ModelError> {
        Self { delta1, delta2, omega1, phi: T::zero(), tq }.validated()
    }

    /// Build from ordinary frequencies in MHz (converted by 2π) and `tq` in μs.
    pub fn from_mhz(delta1: f64, delta2: f64, omega1: f64, tq: f64) -> Result<Self, ModelError> {
        Self::new(
            T::lit(TWO_PI * delta1),
            T::lit(TWO_PI * delta2),
            T::lit(TWO_PI * omega1),
            T::lit(tq),
        )
    }

    pub fn with_phi(mut self, phi: T) -> Self {
        self.phi = phi;
        self
    }

    pub fn with_delta2(mut self, delta2: T) -> Self {
        self.delta2 = delta2;
        self
    }

    pub fn validated(self) -> Result<Self, ModelError> {
        let bad = |name, reason: &str| ModelError::InvalidParameter { name, reason: reason.into() };
        for (name, v) in [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("omega1", self.omega1),
            ("phi", self.phi),
            ("tq", self.tq),
        ] {
            if !v.is_finite() {
                return Err(bad(name, "must be finite"));
            }
        }
        if self.tq <= T::zero() {
            return Err(bad("tq", "quench time must be positive"));
        }
        if self.omega1 < T::zero() {
            return Err(bad("omega1", "Rabi amplitude must be non-negative"));
        }
        Ok(self)
    }

    /// Sweep rate ν = π / t_q of a single quench.
    pub fn nu(&self) -> T {
        T::PI() / self.tq
    }

    /// True when |Δ₂| is within `eps` of |Δ₁|, where the gap closes at θ = 0 or π.
    pub fn near_degenerate(&self, eps: T) -> bool {
        (self.delta2.abs() - self.delta1.abs()).abs() <= eps
    }
}

/// How the meter coupling g(t) follows the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingLaw {
    Off,
    /// g(t) = Ω₁ sin θ(t) / 2.
    BerryWeighted,
}

/// g = Ω₁ sin θ / 2 for the Berry-weighted law.
pub fn berry_weighted_coupling<T: Real>(omega1: T, theta: T) -> T {
    omega1 * theta.sin() / T::lit(2.0)
}

/// One quench: θ runs from 0 to π over `duration`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<T> {
    pub start: T,
    pub duration: T,
    /// Duration in units of t_q.
    pub multiplicity: u32,
}

impl<T: Real> Segment<T> {
    pub fn end(&self) -> T {
        self.start + self.duration
    }

    pub fn nu(&self) -> T {
        T::PI() / self.duration
    }
}

/// Instantaneous drive values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drive<T> {
    pub delta: T,
    pub omega: T,
    pub theta: T,
}

/// An ordered list of quenches sharing one set of drive parameters.
///
/// Each segment restarts the sweep at θ = 0 and ends at θ = π, without
/// touching the qubit in between. Segments are right-closed: a boundary time
/// belongs to the segment that ends there, so `drive_at(t_q)` gives θ = π.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol<T> {
    pub params: DriveParams<T>,
    pub coupling: CouplingLaw,
    segments: Vec<Segment<T>>,
}

impl<T: Real> Protocol<T> {
    pub fn from_multiplicities(
        params: DriveParams<T>,
        multiplicities: &[u32],
        coupling: CouplingLaw,
    ) -> Result<Self, ModelError> {
        let params = params.validated()?;
        if multiplicities.is_empty() || multiplicities.contains(&0) {
            return Err(ModelError::InvalidParameter {
                name: "segments",
                reason: "need at least one segment, each of positive length".into(),
            });
        }
        let mut start = T::zero();
        let segments = multiplicities
            .iter()
            .map(|&m| {
                let duration = params.tq * T::lit(m as f64);
                let seg = Segment { start, duration, multiplicity: m };
                start = start + duration;
                seg
            })
            .collect();
        Ok(Self { params, coupling, segments })
    }

    /// θ: 0 → π in t_q.
    pub fn single(params: DriveParams<T>, coupling: CouplingLaw) -> Result<Self, ModelError> {
        Self::from_multiplicities(params, &[1], coupling)
    }

    /// Durations (t_q, 2t_q, t_q), total 4t_q.
    pub fn triple(params: DriveParams<T>, coupling: CouplingLaw) -> Result<Self, ModelError> {
        Self::from_multiplicities(params, &[1, 2, 1], coupling)
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn total_duration(&self) -> T {
        self.segments.last().map(Segment::end).unwrap_or_else(T::zero)
    }

    /// Locate `t` on the timeline: (segment index, time since segment start).
    pub fn locate(&self, t: T) -> Result<(usize, T), ModelError> {
        let total = self.total_duration();
        if !(t >= T::zero() && t <= total) {
            return Err(ModelError::OutOfRange { t: t.as_f64(), total: total.as_f64() });
        }
        let k = self
            .segments
            .iter()
            .position(|s| t <= s.end())
            .unwrap_or(self.segments.len() - 1);
        Ok((k, t - self.segments[k].start))
    }

    /// Drive within segment `k` at local time `local_t`.
    pub fn segment_drive(&self, k: usize, local_t: T) -> Drive<T> {
        let theta = self.segments[k].nu() * local_t;
        self.drive_at_theta(theta)
    }

    pub fn drive_at_theta(&self, theta: T) -> Drive<T> {
        let p = &self.params;
        Drive {
            delta: p.delta1 * theta.cos() + p.delta2,
            omega: p.omega1 * theta.sin(),
            theta,
        }
    }

    pub fn drive_at(&self, t: T) -> Result<Drive<T>, ModelError> {
        let (k, local) = self.locate(t)?;
        Ok(self.segment_drive(k, local))
    }

    pub fn coupling_at_theta(&self, theta: T) -> T {
        match self.coupling {
            CouplingLaw::Off => T::zero(),
            CouplingLaw::BerryWeighted => berry_weighted_coupling(self.params.omega1, theta),
        }
    }

    pub fn coupling_at(&self, t: T) -> Result<T, ModelError> {
        Ok(self.coupling_at_theta(self.drive_at(t)?.theta))
    }

    /// Accumulated sweep angle kπ + θ, for plotting the sawtooth on one axis.
    pub fn sweep_angle(&self, t: T) -> Result<T, ModelError> {
        let (k, local) = self.locate(t)?;
        Ok(T::PI() * T::from_usize_lossy(k) + self.segments[k].nu() * local)
    }
}

/// ½[Δσ_z + Ω cosφ σ_x + Ω sinφ σ_y] + g·x·σ_y in the (|e>, |g>) basis.
pub fn hamiltonian_matrix<T: Real>(delta: T, omega: T, phi: T, g: T, x: T) -> Matrix2<T> {
    let half = T::lit(0.5);
    let re = half * omega * phi.cos();
    let y = half * omega * phi.sin() + g * x;
    [
        [Cplx::new(half * delta, T::zero()), Cplx::new(re, -y)],
        [Cplx::new(re, y), Cplx::new(-half * delta, T::zero())],
    ]
}

/// Instantaneous eigensystem of ½[Δσ_z + Ωσ_x + Ωxσ_y] (φ = 0, g = Ω/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdiabaticFrame<T> {
    pub e_plus: T,
    pub e_minus: T,
    pub r_plus: [T; 3],
    pub r_minus: [T; 3],
    pub xi: T,
    pub omega_tilde: T,
    // cos²(α/2) and sin²(α/2) of R₊, each computed without cancellation
    upper: T,
    lower: T,
    omega_sign: T,
}

/// Adiabatic energies ±½√(Ω²(1+x²)+Δ²) and Bloch vectors ±(Ω, Ωx, Δ)/norm.
pub fn adiabatic_eigensystem<T: Real>(delta: T, omega: T, x: T) -> Result<AdiabaticFrame<T>, ModelError> {
    let one = T::one();
    let stretch = one + x * x;
    let trans_sq = omega * omega * stretch;
    let norm = (trans_sq + delta * delta).sqrt();
    if norm.is_nan() || norm <= T::zero() {
        return Err(ModelError::Degenerate);
    }
    // a = W + Δ, b = W - Δ, a·b = Ω²(1+x²)
    let (a, b) = if delta >= T::zero() {
        let a = norm + delta;
        (a, trans_sq / a)
    } else {
        let b = norm - delta;
        (trans_sq / b, b)
    };
    let two_w = norm + norm;
    let r_plus = [omega / norm, omega * x / norm, delta / norm];
    Ok(AdiabaticFrame {
        e_plus: norm / T::lit(2.0),
        e_minus: -norm / T::lit(2.0),
        r_plus,
        r_minus: [-r_plus[0], -r_plus[1], -r_plus[2]],
        xi: x.atan(),
        omega_tilde: stretch.sqrt() * omega,
        upper: a / two_w,
        lower: b / two_w,
        omega_sign: if omega < T::zero() { -one } else { one },
    })
}

impl<T: Real> AdiabaticFrame<T> {
    /// χ₊ with a real, non-negative |e> component.
    ///
    /// Where that component vanishes (south pole, Ω = 0) the Ω → 0⁺ limit
    /// e^{iξ}|g> is returned.
    pub fn chi_plus(&self) -> [Cplx<T>; 2] {
        let phase = Cplx::from_polar(self.omega_sign, self.xi);
        [Cplx::new(self.upper.sqrt(), T::zero()), phase * self.lower.sqrt()]
    }

    /// χ₋ with a real, non-negative |e> component (Ω → 0⁺ limit at the north pole).
    pub fn chi_minus(&self) -> [Cplx<T>; 2] {
        let phase = Cplx::from_polar(-self.omega_sign, self.xi);
        [Cplx::new(self.lower.sqrt(), T::zero()), phase * self.upper.sqrt()]
    }

    /// Population weight |<e|χ₊>|².
    pub fn upper_weight(&self) -> T {
        self.upper
    }

    /// Population weight |<g|χ₊>|² = |<e|χ₋>|².
    pub fn lower_weight(&self) -> T {
        self.lower
    }
}

/// Number of Simpson panels used for the θ-average in [`dynamic_phase_coefficient`].
pub const DYNAMIC_PHASE_PANELS: usize = 8192;

/// Coefficient f of the x²-dependent dynamic phase e^{-i f x² t_q}:
/// the θ-average of Ω²/(4√(Δ²+Ω²)) over one quench.
pub fn dynamic_phase_coefficient<T: Real>(params: &DriveParams<T>) -> Result<T, ModelError> {
    dynamic_phase_coefficient_with(params, DYNAMIC_PHASE_PANELS)
}

pub fn dynamic_phase_coefficient_with<T: Real>(
    params: &DriveParams<T>,
    panels: usize,
) -> Result<T, ModelError> {
    let panels = panels.max(2) & !1;
    let h = T::PI() / T::from_usize_lossy(panels);
    let mut values = Vec::with_capacity(panels + 1);
    for i in 0..=panels {
        let theta = h * T::from_usize_lossy(i);
        let delta = params.delta1 * theta.cos() + params.delta2;
        let omega = params.omega1 * theta.sin();
        let gap = (delta * delta + omega * omega).sqrt();
        if omega == T::zero() {
            values.push(T::zero());
        } else if gap > T::zero() {
            values.push(omega * omega / (T::lit(4.0) * gap));
        } else {
            return Err(ModelError::Degenerate);
        }
    }
    Ok(simpson(&values, h) / T::PI())
}
