//! Fixed-step integration of i d|χ>/dt = H(t; x)|χ> at one meter position.
//!
//! The meter position commutes with the full Hamiltonian, so every x is an
//! independent two-level problem. Drive values are tabulated once per
//! protocol at the RK4 stage times and shared by all positions.

use serde::{Deserialize, Serialize};

use crate::error::PropagationError;
use crate::model::{adiabatic_eigensystem, CouplingLaw, Protocol};
use crate::scalar::{Cplx, Real};

/// Qubit state c_e|e> + c_g|g>.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitAmplitudes<T> {
    pub ce: Cplx<T>,
    pub cg: Cplx<T>,
}

impl<T: Real> QubitAmplitudes<T> {
    pub fn new(ce: Cplx<T>, cg: Cplx<T>) -> Self {
        Self { ce, cg }
    }

    pub fn excited() -> Self {
        Self::new(Cplx::new(T::one(), T::zero()), Cplx::new(T::zero(), T::zero()))
    }

    pub fn ground() -> Self {
        Self::new(Cplx::new(T::zero(), T::zero()), Cplx::new(T::one(), T::zero()))
    }

    pub fn norm_sqr(&self) -> T {
        self.ce.norm_sqr() + self.cg.norm_sqr()
    }

    pub fn sigma_x(&self) -> T {
        let two = T::lit(2.0);
        two * (self.ce.conj() * self.cg).re
    }

    pub fn sigma_y(&self) -> T {
        let two = T::lit(2.0);
        two * (self.ce.conj() * self.cg).im
    }

    pub fn sigma_z(&self) -> T {
        self.ce.norm_sqr() - self.cg.norm_sqr()
    }

    pub fn bloch(&self) -> [T; 3] {
        [self.sigma_x(), self.sigma_y(), self.sigma_z()]
    }

    pub fn conj(&self) -> Self {
        Self::new(self.ce.conj(), self.cg.conj())
    }

    /// <v|self>.
    pub fn overlap(&self, v: &[Cplx<T>; 2]) -> Cplx<T> {
        v[0].conj() * self.ce + v[1].conj() * self.cg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FixedRk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// RK4 steps per t_q of protocol time.
    pub steps_per_tq: usize,
    /// Recorded samples per t_q, endpoints included. `samples_per_tq - 1` must divide `steps_per_tq`.
    pub samples_per_tq: usize,
    pub method: Method,
    /// Escalate the step-size warning to an error.
    pub strict: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { steps_per_tq: 20_000, samples_per_tq: 1001, method: Method::FixedRk4, strict: false }
    }
}

impl IntegratorConfig {
    pub fn with_steps(mut self, steps_per_tq: usize) -> Self {
        self.steps_per_tq = steps_per_tq;
        self
    }

    pub fn with_samples(mut self, samples_per_tq: usize) -> Self {
        self.samples_per_tq = samples_per_tq;
        self
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        if self.samples_per_tq < 3 {
            return Err(PropagationError::Config("samples_per_tq must be at least 3".into()));
        }
        let intervals = self.samples_per_tq - 1;
        if !intervals.is_multiple_of(2) {
            return Err(PropagationError::Config(
                "samples_per_tq - 1 must be even (Simpson panels)".into(),
            ));
        }
        if self.steps_per_tq == 0 || !self.steps_per_tq.is_multiple_of(intervals) {
            return Err(PropagationError::Config(format!(
                "steps_per_tq ({}) must be a positive multiple of samples_per_tq - 1 ({intervals})",
                self.steps_per_tq
            )));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.steps_per_tq / (self.samples_per_tq - 1)
    }
}

/// Which adiabatic eigenstate the state overlaps most with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Plus,
    Minus,
}

/// Inclusive range of sample indices covered by one protocol segment.
///
/// Consecutive segments share their boundary sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub first: usize,
    pub last: usize,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Sample times shared by every trajectory of a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLayout<T> {
    pub times: Vec<T>,
    pub segments: Vec<SegmentSpan>,
}

impl<T: Real> SampleLayout<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Segment-local θ ∈ [0, π] of sample `i` within segment `k`.
    pub fn local_theta(&self, k: usize, i: usize) -> T {
        let span = self.segments[k];
        T::PI() * T::from_usize_lossy(i - span.first) / T::from_usize_lossy(span.last - span.first)
    }

    /// Segment owning sample `i` (boundary samples belong to the segment ending there).
    pub fn owner(&self, i: usize) -> usize {
        self.segments.iter().position(|s| i <= s.last).unwrap_or(self.segments.len() - 1)
    }

    /// Sample interval within segment `k`.
    pub fn spacing(&self, k: usize) -> T {
        let span = self.segments[k];
        (self.times[span.last] - self.times[span.first]) / T::from_usize_lossy(span.last - span.first)
    }
}

#[derive(Debug, Clone, Copy)]
struct DrivePoint<T> {
    half_delta: T,
    half_omega_cos: T,
    half_omega_sin: T,
    g: T,
}

#[derive(Debug, Clone)]
struct SegmentTable<T> {
    steps: usize,
    dt: T,
    /// drive at local times j·dt/2, j = 0..=2·steps
    points: Vec<DrivePoint<T>>,
}

/// A protocol prepared for integration under a fixed configuration.
#[derive(Debug, Clone)]
pub struct Propagator<'a, T> {
    protocol: &'a Protocol<T>,
    cfg: IntegratorConfig,
    tables: Vec<SegmentTable<T>>,
    layout: SampleLayout<T>,
}

impl<'a, T: Real> Propagator<'a, T> {
    pub fn new(protocol: &'a Protocol<T>, cfg: &IntegratorConfig) -> Result<Self, PropagationError> {
        cfg.validate()?;
        let params = &protocol.params;
        let half = T::lit(0.5);
        let (cos_phi, sin_phi) = (params.phi.cos(), params.phi.sin());
        let stride = cfg.stride();
        let mut tables = Vec::with_capacity(protocol.segments().len());
        let mut times = vec![T::zero()];
        let mut spans = Vec::new();
        for (k, seg) in protocol.segments().iter().enumerate() {
            let steps = cfg.steps_per_tq * seg.multiplicity as usize;
            let dt = seg.duration / T::from_usize_lossy(steps);
            let points = (0..=2 * steps)
                .map(|j| {
                    let theta = T::PI() * T::from_usize_lossy(j) / T::from_usize_lossy(2 * steps);
                    let d = protocol.drive_at_theta(theta);
                    DrivePoint {
                        half_delta: half * d.delta,
                        half_omega_cos: half * d.omega * cos_phi,
                        half_omega_sin: half * d.omega * sin_phi,
                        g: protocol.coupling_at_theta(theta),
                    }
                })
                .collect();
            tables.push(SegmentTable { steps, dt, points });
            let first = times.len() - 1;
            let samples = steps / stride;
            for s in 1..=samples {
                times.push(seg.start + seg.duration * T::from_usize_lossy(s) / T::from_usize_lossy(samples));
            }
            spans.push(SegmentSpan { first, last: times.len() - 1 });
            debug_assert_eq!(k + 1, spans.len());
        }
        Ok(Self {
            protocol,
            cfg: *cfg,
            tables,
            layout: SampleLayout { times, segments: spans },
        })
    }

    pub fn protocol(&self) -> &Protocol<T> {
        self.protocol
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &SampleLayout<T> {
        &self.layout
    }

    /// Highest local frequency √(Δ² + Ω²(1+x²)) over the protocol for |x| ≤ `x_max`.
    pub fn omega_max(&self, x_max: T) -> T {
        let stretch = T::one() + x_max * x_max;
        let two = T::lit(2.0);
        self.tables
            .iter()
            .flat_map(|t| t.points.iter())
            .map(|p| {
                let d = two * p.half_delta;
                let w2 = two * two * (p.half_omega_cos * p.half_omega_cos + p.half_omega_sin * p.half_omega_sin);
                (d * d + w2 * stretch).sqrt()
            })
            .fold(T::zero(), T::max)
    }

    /// Require at least 100 steps per shortest period over |x| ≤ `x_max`.
    ///
    /// Returns the number of steps per t_q that would satisfy the rule when it
    /// is breached; errors instead in strict mode.
    pub fn check_step_size(&self, x_max: T) -> Result<Option<usize>, PropagationError> {
        let omega_max = self.omega_max(x_max.abs());
        let periods = (omega_max * self.protocol.params.tq / T::TAU()).as_f64();
        let required = (100.0 * periods).ceil() as usize;
        if self.cfg.steps_per_tq >= required {
            return Ok(None);
        }
        let err = PropagationError::StepSize {
            steps_per_tq: self.cfg.steps_per_tq,
            required,
            omega_max: omega_max.as_f64(),
        };
        if self.cfg.strict {
            return Err(err);
        }
        log::warn!("{err}");
        Ok(Some(required))
    }

    /// Integrate from `initial`, calling `visit(sample_index, &state)` at every sample.
    pub fn run<F>(&self, x: T, initial: QubitAmplitudes<T>, mut visit: F) -> QubitAmplitudes<T>
    where
        F: FnMut(usize, &QubitAmplitudes<T>),
    {
        let stride = self.cfg.stride();
        let mut state = initial;
        let mut index = 0usize;
        visit(index, &state);
        for table in &self.tables {
            for s in 0..table.steps {
                state = rk4_step(table, s, x, state);
                if (s + 1) % stride == 0 {
                    index += 1;
                    visit(index, &state);
                }
            }
        }
        state
    }

    /// Full trajectory at one meter position.
    pub fn evolve(&self, x: T, initial: QubitAmplitudes<T>) -> Result<Trajectory<T>, PropagationError> {
        let drift = (initial.norm_sqr() - T::one()).abs();
        if drift > T::lit(1e-10) {
            return Err(PropagationError::NotNormalized(initial.norm_sqr().as_f64()));
        }
        self.check_step_size(x)?;
        let n = self.layout.len();
        let mut states = Vec::with_capacity(n);
        self.run(x, initial, |_, s| states.push(*s));
        Ok(Trajectory::from_states(x, self.protocol, &self.layout, states))
    }
}

#[inline(always)]
fn derivative<T: Real>(p: &DrivePoint<T>, x: T, ce: Cplx<T>, cg: Cplx<T>) -> (Cplx<T>, Cplx<T>) {
    // H = [[hd, re - i y], [re + i y, -hd]]; returns -i H c
    let y = p.half_omega_sin + p.g * x;
    let h01 = Cplx::new(p.half_omega_cos, -y);
    let h10 = Cplx::new(p.half_omega_cos, y);
    let he = ce * p.half_delta + h01 * cg;
    let hg = h10 * ce - cg * p.half_delta;
    (Cplx::new(he.im, -he.re), Cplx::new(hg.im, -hg.re))
}

#[inline(always)]
fn rk4_step<T: Real>(table: &SegmentTable<T>, s: usize, x: T, state: QubitAmplitudes<T>) -> QubitAmplitudes<T> {
    let dt = table.dt;
    let half_dt = dt * T::lit(0.5);
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let (p0, pm, p1) = (&table.points[2 * s], &table.points[2 * s + 1], &table.points[2 * s + 2]);
    let (ce, cg) = (state.ce, state.cg);
    let (a1, b1) = derivative(p0, x, ce, cg);
    let (a2, b2) = derivative(pm, x, ce + a1 * half_dt, cg + b1 * half_dt);
    let (a3, b3) = derivative(pm, x, ce + a2 * half_dt, cg + b2 * half_dt);
    let (a4, b4) = derivative(p1, x, ce + a3 * dt, cg + b3 * dt);
    QubitAmplitudes::new(
        ce + (a1 + (a2 + a3) * two + a4) * sixth,
        cg + (b1 + (b2 + b3) * two + b4) * sixth,
    )
}

/// Recorded evolution at a single meter position.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub x: T,
    pub times: Vec<T>,
    /// Segment-local θ of the owning segment.
    pub theta: Vec<T>,
    pub states: Vec<QubitAmplitudes<T>>,
    pub sigma_y: Vec<T>,
    pub bloch: Vec<[T; 3]>,
    pub branch: Vec<Branch>,
    pub segments: Vec<SegmentSpan>,
    /// max_k | |c_e|² + |c_g|² - 1 |, surfaced instead of renormalizing.
    pub max_norm_drift: T,
}

impl<T: Real> Trajectory<T> {
    fn from_states(
        x: T,
        protocol: &Protocol<T>,
        layout: &SampleLayout<T>,
        states: Vec<QubitAmplitudes<T>>,
    ) -> Self {
        let n = states.len();
        let mut theta = Vec::with_capacity(n);
        let mut branch = Vec::with_capacity(n);
        let mut prev = Branch::Plus;
        for (i, s) in states.iter().enumerate() {
            let k = layout.owner(i);
            let th = layout.local_theta(k, i);
            theta.push(th);
            let d = protocol.drive_at_theta(th);
            prev = label_branch(d.delta, d.omega, x, s, prev);
            branch.push(prev);
        }
        let max_norm_drift = states
            .iter()
            .map(|s| (s.norm_sqr() - T::one()).abs())
            .fold(T::zero(), T::max);
        Self {
            x,
            times: layout.times.clone(),
            theta,
            sigma_y: states.iter().map(QubitAmplitudes::sigma_y).collect(),
            bloch: states.iter().map(QubitAmplitudes::bloch).collect(),
            states,
            branch,
            segments: layout.segments.clone(),
            max_norm_drift,
        }
    }

    pub fn final_state(&self) -> QubitAmplitudes<T> {
        *self.states.last().expect("trajectory has at least one sample")
    }
}

/// Adiabatic branch with the larger overlap; ties and degenerate frames keep `previous`.
pub fn label_branch<T: Real>(delta: T, omega: T, x: T, state: &QubitAmplitudes<T>, previous: Branch) -> Branch {
    let Ok(frame) = adiabatic_eigensystem(delta, omega, x) else {
        return previous;
    };
    let r = state.bloch();
    let proj = r[0] * frame.r_plus[0] + r[1] * frame.r_plus[1] + r[2] * frame.r_plus[2];
    if proj > T::zero() {
        Branch::Plus
    } else if proj < T::zero() {
        Branch::Minus
    } else {
        previous
    }
}

/// Evolve one meter position under `protocol`.
pub fn evolve<T: Real>(
    x: T,
    protocol: &Protocol<T>,
    cfg: &IntegratorConfig,
    initial: QubitAmplitudes<T>,
) -> Result<Trajectory<T>, PropagationError> {
    Propagator::new(protocol, cfg)?.evolve(x, initial)
}

/// Phase u with c_e(-x) = c_e(x), c_g(-x) = u·c_g(x) for every t.
///
/// At φ = 0 the transverse field at -x is the field at x rotated about z by
/// -2ξ, tan ξ = x; `None` when no such relation holds (φ ≠ 0).
pub fn mirror_phase<T: Real>(protocol: &Protocol<T>, x: T) -> Option<Cplx<T>> {
    match protocol.coupling {
        CouplingLaw::Off => Some(Cplx::new(T::one(), T::zero())),
        CouplingLaw::BerryWeighted if protocol.params.phi == T::zero() => {
            Some(Cplx::from_polar(T::one(), -T::lit(2.0) * x.atan()))
        }
        CouplingLaw::BerryWeighted => None,
    }
}

/// <χ|σ_y|χ> at each recorded sample.
pub fn sigma_y_series<T: Real>(traj: &Trajectory<T>) -> Vec<T> {
    traj.states.iter().map(QubitAmplitudes::sigma_y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DriveParams;
    use approx::assert_relative_eq;

    fn fig1(delta2_mhz: f64) -> DriveParams<f64> {
        DriveParams::from_mhz(30.0, delta2_mhz, 10.0, 1.0).unwrap()
    }

    fn quick() -> IntegratorConfig {
        IntegratorConfig::default().with_steps(4000).with_samples(201)
    }

    #[test]
    fn sigma_y_sign_convention() {
        let s = 0.5f64.sqrt();
        let plus_y = QubitAmplitudes::new(Cplx::new(s, 0.0), Cplx::new(0.0, s));
        assert_relative_eq!(plus_y.sigma_y(), 1.0, epsilon = 1e-15);
        assert_eq!(QubitAmplitudes::<f64>::excited().sigma_y(), 0.0);
        assert_eq!(QubitAmplitudes::<f64>::excited().bloch(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::default().validate().is_ok());
        assert!(IntegratorConfig::default().with_samples(1000).validate().is_err());
        assert!(IntegratorConfig::default().with_steps(1234).validate().is_err());
    }

    #[test]
    fn layout_of_triple_quench() {
        let p = Protocol::triple(fig1(0.3), CouplingLaw::BerryWeighted).unwrap();
        let prop = Propagator::new(&p, &quick()).unwrap();
        let lay = prop.layout();
        assert_eq!(lay.len(), 801);
        assert_eq!(lay.segments[0], SegmentSpan { first: 0, last: 200 });
        assert_eq!(lay.segments[1], SegmentSpan { first: 200, last: 600 });
        assert_eq!(lay.segments[2], SegmentSpan { first: 600, last: 800 });
        assert_relative_eq!(lay.times[600], 3.0, epsilon = 1e-12);
        assert_eq!(lay.owner(200), 0);
        assert_eq!(lay.owner(201), 1);
        assert_relative_eq!(lay.local_theta(1, 400), std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn undriven_qubit_only_acquires_phase() {
        // Ω₁ = 0, g ≡ 0, constant Δ = Δ₂ when Δ₁ = 0
        let params = DriveParams::new(0.0, 5.0, 0.0, 1.0).unwrap();
        let p = Protocol::single(params, CouplingLaw::BerryWeighted).unwrap();
        let traj = evolve(0.9, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let expect = Cplx::from_polar(1.0, -5.0 * t / 2.0);
            assert!((s.ce - expect).norm() < 1e-9);
            assert_eq!(s.cg.norm(), 0.0);
        }
    }

    #[test]
    fn adiabatic_flip_at_x_zero() {
        let p = Protocol::single(fig1(0.3), CouplingLaw::Off).unwrap();
        let traj = evolve(0.0, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        let fidelity = traj.final_state().cg.norm_sqr();
        assert!(fidelity > 0.99, "fidelity {fidelity}");
        assert_eq!(traj.branch.iter().filter(|b| **b == Branch::Minus).count(), 0);
    }

    #[test]
    fn mid_quench_diabatic_correction_is_negative() {
        // C = -∫B dθ = +1 requires <σ_y> < 0 while the field turns from +z towards +x
        let p = Protocol::single(fig1(0.3), CouplingLaw::Off).unwrap();
        let traj = evolve(0.0, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        let mid = traj.sigma_y[100];
        assert!(mid < 0.0 && mid > -0.2, "σ_y(t_q/2) = {mid}");
    }

    #[test]
    fn mirror_positions_differ_by_fixed_rotation() {
        let p = Protocol::single(fig1(0.3), CouplingLaw::BerryWeighted).unwrap();
        let x = 0.35f64;
        let a = evolve(x, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        let b = evolve(-x, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        let phase = mirror_phase(&p, x).unwrap();
        let mut lab_y_asymmetry = 0.0f64;
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert!((sa.ce - sb.ce).norm() < 1e-9);
            assert!((sa.cg * phase - sb.cg).norm() < 1e-9);
            lab_y_asymmetry = lab_y_asymmetry.max((sa.sigma_y() + sb.sigma_y()).abs());
        }
        // the lab-frame σ_y alone is not odd in x
        assert!(lab_y_asymmetry > 0.1);
    }

    #[test]
    fn mirror_phase_availability() {
        let on = Protocol::single(fig1(0.3), CouplingLaw::BerryWeighted).unwrap();
        let z = mirror_phase(&on, 1.0).unwrap();
        assert_relative_eq!(z.arg(), -std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
        let off = Protocol::single(fig1(0.3), CouplingLaw::Off).unwrap();
        assert_eq!(mirror_phase(&off, 1.0), Some(Cplx::new(1.0, 0.0)));
        let tilted = Protocol::single(fig1(0.3).with_phi(0.2), CouplingLaw::BerryWeighted).unwrap();
        assert_eq!(mirror_phase(&tilted, 1.0), None);
    }

    #[test]
    fn strict_mode_rejects_coarse_steps() {
        let p = Protocol::single(fig1(0.3), CouplingLaw::BerryWeighted).unwrap();
        let cfg = IntegratorConfig { strict: true, ..IntegratorConfig::default().with_steps(1000).with_samples(201) };
        let err = evolve(0.0, &p, &cfg, QubitAmplitudes::excited()).unwrap_err();
        assert!(matches!(err, PropagationError::StepSize { .. }));
        let lax = IntegratorConfig { strict: false, ..cfg };
        assert!(evolve(0.0, &p, &lax, QubitAmplitudes::excited()).is_ok());
    }

    #[test]
    fn unnormalized_initial_state_rejected() {
        let p = Protocol::single(fig1(0.3), CouplingLaw::Off).unwrap();
        let bad = QubitAmplitudes::new(Cplx::new(1.0, 0.0), Cplx::new(0.1, 0.0));
        assert!(matches!(evolve(0.0, &p, &quick(), bad), Err(PropagationError::NotNormalized(_))));
    }

    #[test]
    fn runs_in_single_precision() {
        let p = Protocol::<f32>::single(
            DriveParams::from_mhz(30.0, 0.3, 10.0, 1.0).unwrap(),
            CouplingLaw::BerryWeighted,
        )
        .unwrap();
        let traj = evolve(0.2f32, &p, &quick(), QubitAmplitudes::excited()).unwrap();
        assert!(traj.max_norm_drift < 1e-3);
        assert!(traj.final_state().cg.norm_sqr() > 0.98);
    }
}
