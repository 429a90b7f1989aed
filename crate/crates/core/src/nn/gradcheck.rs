//! Central finite-difference gradient checking in double precision.

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively. Central
/// differences on an O(1) loss carry roughly 1e-10 of rounding noise, which would otherwise
/// dominate the ratio for near-zero components.
pub const ABS_FLOOR: f64 = 1e-3;

/// Worst component of `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x` for the listed coordinates.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Checks a scalar function that reports its own gradient. Returns the worst relative error over
/// all coordinates.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x: &[f64]) -> f64 {
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = numeric_gradient(|p| f(p).0, x, &coords);
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let err = grad_check(|x| (x[0], vec![1.0]), &[0.0]);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_map_is_exact() {
        let w = [0.5, -2.0, 3.25, 1.5];
        let err = grad_check(
            |x| (x.iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec()),
            &[0.25, 0.5, -0.75, 1.0],
        );
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|x| (x[0] * x[0], vec![x[0]]), &[2.0]);
        assert!(err > 0.4);
    }
}
