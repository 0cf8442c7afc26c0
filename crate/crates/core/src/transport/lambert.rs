//! Principal branch of the Lambert W function on `[0, ∞)`.

use crate::error::{Error, Result};

/// Default residual tolerance, relative to `max(1, z)`.
pub const LAMBERT_TOL: f64 = 1e-12;

const MAX_ITER: usize = 50;

/// Solves `w e^w = z` for `w ≥ 0` by Halley's iteration.
///
/// Starts from `log(1+z)` below `e` and from `log z − log log z` above.
pub fn lambert_w(z: f64, tol: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::invalid(format!("lambert W needs a finite argument, got {z}")));
    }
    if z < 0.0 {
        return Err(Error::invalid(format!("lambert W is evaluated on z >= 0 only, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let target = tol * z.max(1.0);
    let mut w = if z < std::f64::consts::E {
        z.ln_1p()
    } else {
        let l = z.ln();
        l - l.ln()
    };
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - z;
        if f.abs() <= target {
            break;
        }
        let wp1 = w + 1.0;
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= step;
        if step.abs() <= f64::EPSILON * w.abs() {
            break;
        }
    }
    Ok(w)
}

/// `W(e^x)`, i.e. the root of `w + log w = x`, without forming `e^x`.
///
/// Used when `e^x` would overflow; Newton from `x − log x`.
pub fn lambert_w_of_exp(x: f64) -> f64 {
    if x < 1.0 {
        return lambert_w(x.exp(), LAMBERT_TOL).unwrap_or(0.0);
    }
    let mut w = x - x.ln();
    for _ in 0..MAX_ITER {
        let f = w + w.ln() - x;
        let step = f / (1.0 + 1.0 / w);
        w -= step;
        if step.abs() <= f64::EPSILON * w {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(lambert_w(0.0, LAMBERT_TOL).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E, LAMBERT_TOL).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn omega_constant_against_fixed_point() {
        // w ← (w² + z e^{−w}) / (w + 1), iterated to convergence, is independent of Halley.
        let mut w = 0.5f64;
        for _ in 0..200 {
            w = (w * w + (-w).exp()) / (w + 1.0);
        }
        assert!((w - 0.567_143_290_409_783_8).abs() < 1e-14);
        assert!((lambert_w(1.0, LAMBERT_TOL).unwrap() - w).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(lambert_w(-0.1, LAMBERT_TOL).is_err());
        assert!(lambert_w(f64::INFINITY, LAMBERT_TOL).is_err());
        assert!(lambert_w(f64::NAN, LAMBERT_TOL).is_err());
    }

    #[test]
    fn of_exp_matches_direct_evaluation() {
        for x in [0.5, 2.0, 10.0, 300.0, 700.0] {
            let direct = lambert_w(f64::exp(x), LAMBERT_TOL).unwrap();
            let via_log = lambert_w_of_exp(x);
            assert!((direct - via_log).abs() <= 1e-12 * direct.max(1.0), "x={x}");
        }
        let w = lambert_w_of_exp(5000.0);
        assert!((w + w.ln() - 5000.0).abs() < 1e-10);
    }
}
