//! Finite-difference helpers shared by gradient checks.

/// Five-point central difference `f'(x)` with step `h`, truncation `O(h⁴)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quartics() {
        let f = |x: f64| 3.0 * x.powi(4) - x.powi(3) + 2.0 * x;
        let got = central_diff(f, 0.7, 1e-2);
        let exact = 12.0 * 0.7f64.powi(3) - 3.0 * 0.49 + 2.0;
        assert!((got - exact).abs() < 1e-10);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
