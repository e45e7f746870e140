//! Independent reference computations used to check the main pipeline.
//!
//! Nothing here shares code with the production paths: β is integrated by
//! adaptive Simpson instead of the erfcx closed form, and Gaussian averages
//! over the meter use Gauss–Hermite nodes instead of the uniform grid.

/// Adaptive Simpson integral of `f` over [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    // x = [a, m, b], y = f(x)
    fn recurse<F: Fn(f64) -> f64>(f: &F, x: [f64; 3], y: [f64; 3], whole: f64, tol: f64, depth: u32) -> f64 {
        let [a, m, b] = x;
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (y[0] + 4.0 * flm + y[1]);
        let right = (b - m) / 6.0 * (y[1] + 4.0 * frm + y[2]);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, [a, lm, m], [y[0], flm, y[1]], left, tol / 2.0, depth - 1)
            + recurse(f, [m, rm, b], [y[1], frm, y[2]], right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, [a, 0.5 * (a + b), b], [fa, fm, fb], whole, tol, 50)
}

/// ∫|φ(x)|²/(1+x²) dx for the Gaussian meter of width Δx.
pub fn beta_quadrature(dx: f64) -> f64 {
    let density = |x: f64| (-x * x / (2.0 * dx * dx)).exp() / ((std::f64::consts::TAU).sqrt() * dx);
    let integrand = |x: f64| density(x) / (1.0 + x * x);
    // even integrand; mass beyond 14Δx is below e^{-98}
    let cut = 14.0 * dx;
    let pieces = 16;
    (0..pieces)
        .map(|k| {
            let a = cut * k as f64 / pieces as f64;
            let b = cut * (k + 1) as f64 / pieces as f64;
            adaptive_simpson(&integrand, a, b, 1e-13)
        })
        .sum::<f64>()
        * 2.0
}

/// Nodes and weights of n-point Gauss–Hermite quadrature (weight e^{-t²}).
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let pi_quarter = std::f64::consts::PI.powf(-0.25);
    let mut nodes = vec![(0.0, 0.0); n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        // initial guesses for the largest roots first
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0].0,
            3 => 1.91 * z - 0.91 * nodes[1].0,
            _ => 2.0 * z - nodes[i - 2].0,
        };
        let mut dp = 0.0;
        for _ in 0..100 {
            // orthonormal recurrence
            let (mut p1, mut p2) = (pi_quarter, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
            }
            dp = (2.0 * n as f64).sqrt() * p2;
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let w = 2.0 / (dp * dp);
        nodes[i] = (z, w);
        nodes[n - 1 - i] = (-z, w);
    }
    nodes
}

/// E[f(x)] for x ~ N(0, Δx²), i.e. ∫|φ(x)|² f(x) dx.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(f: F, dx: f64, nodes: &[(f64, f64)]) -> f64 {
    let scale = std::f64::consts::SQRT_2 * dx;
    nodes.iter().map(|&(t, w)| w * f(scale * t)).sum::<f64>() / std::f64::consts::PI.sqrt()
}
