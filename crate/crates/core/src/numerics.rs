//! Quadrature and special-function helpers.

use crate::scalar::Real;

/// Running integral of uniformly sampled `values` with spacing `h`.
///
/// Even indices carry the composite Simpson sum; odd indices add the
/// half-panel of the interpolating parabola, so every entry is third-order
/// accurate. `out[0] = 0`.
pub fn cumulative_simpson<T: Real>(values: &[T], h: T) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = h * (values[0] + values[1]) / T::lit(2.0);
        return out;
    }
    let third = h / T::lit(3.0);
    let twelfth = h / T::lit(12.0);
    let (five, eight, four) = (T::lit(5.0), T::lit(8.0), T::lit(4.0));
    for k in 1..n {
        out[k] = if k % 2 == 0 {
            out[k - 2] + third * (values[k - 2] + four * values[k - 1] + values[k])
        } else if k + 1 < n {
            out[k - 1] + twelfth * (five * values[k - 1] + eight * values[k] - values[k + 1])
        } else {
            out[k - 1] + twelfth * (-values[k - 2] + eight * values[k - 1] + five * values[k])
        };
    }
    out
}

/// Composite Simpson integral of uniformly sampled values.
pub fn simpson<T: Real>(values: &[T], h: T) -> T {
    cumulative_simpson(values, h).last().copied().unwrap_or_else(T::zero)
}

/// Shift `raw` by a multiple of 2π so it lies within π of `previous`.
pub fn unwrap_near<T: Real>(previous: T, raw: T) -> T {
    let two_pi = T::TAU();
    let turns = ((previous - raw) / two_pi).round();
    raw + turns * two_pi
}

/// Scaled complementary error function `exp(z²)·erfc(z)` for `z ≥ 0`.
///
/// Uses the direct product below z = 25 and the asymptotic series above,
/// where `exp(z²)` would overflow.
pub fn erfcx(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    if z <= 25.0 {
        return (z * z).exp() * libm::erfc(z);
    }
    let inv = 1.0 / (2.0 * z * z);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..40 {
        let next = -term * (2 * k - 1) as f64 * inv;
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-18 {
            break;
        }
    }
    sum / (z * std::f64::consts::PI.sqrt())
}

/// True when consecutive differences of `xs` agree to `rel_tol` of the mean step.
pub fn is_uniform<T: Real>(xs: &[T], rel_tol: T) -> bool {
    if xs.len() < 3 {
        return true;
    }
    let h = (xs[xs.len() - 1] - xs[0]) / T::from_usize_lossy(xs.len() - 1);
    xs.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= rel_tol * h.abs())
}
