//! Chi-square distribution routines for the bad-data threshold.
//!
//! The CDF comes from the regularized lower incomplete gamma function
//! (series expansion below `s + 1`, continued fraction above); the
//! inverse is a bisection on that CDF, so the pair is self-validating
//! through the round-trip property.

const MAX_ITER: usize = 300;
const EPS: f64 = 1e-15;

/// ln Gamma(x) by the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    #[allow(clippy::excessive_precision)]
    let mut acc = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i as f64) + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(s, x).
fn gamma_p(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < s + 1.0 {
        // series representation
        let mut term = 1.0 / s;
        let mut sum = term;
        let mut k = s;
        for _ in 0..MAX_ITER {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        sum * (-x + s * x.ln() - ln_gamma(s)).exp()
    } else {
        // continued fraction for Q(s, x), modified Lentz
        let mut b = x + 1.0 - s;
        let mut c = 1.0 / 1e-300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=MAX_ITER {
            let an = -(i as f64) * (i as f64 - s);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        let q = (-x + s * x.ln() - ln_gamma(s)).exp() * h;
        1.0 - q
    }
}

/// CDF of the chi-square distribution with `k` degrees of freedom.
pub fn chi_square_cdf(k: usize, x: f64) -> f64 {
    assert!(k >= 1, "degrees of freedom must be at least 1");
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(k as f64 / 2.0, x / 2.0)
}

/// Threshold `tau` with `P[chi2(k) > tau] = alpha`, found by bracketing
/// and bisection on the CDF.
pub fn chi_square_threshold(k: usize, alpha: f64) -> f64 {
    assert!(k >= 1, "degrees of freedom must be at least 1");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let target = 1.0 - alpha;

    let mut lo = 0.0;
    let mut hi = (k as f64).max(1.0);
    while chi_square_cdf(k, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_cdf(k, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_standard_table_values() {
        // chi2 table: k = 10, upper tail 0.01 -> 23.209
        assert!((chi_square_threshold(10, 0.01) - 23.209).abs() < 5e-3);
        // median of chi2(1) is 0.4549
        assert!((chi_square_threshold(1, 0.5) - 0.4549).abs() < 5e-4);
        // a couple more anchors
        assert!((chi_square_threshold(2, 0.05) - 5.9915).abs() < 5e-4);
        assert!((chi_square_threshold(100, 0.01) - 135.807).abs() < 5e-2);
    }

    #[test]
    fn threshold_decreases_toward_zero_as_alpha_grows() {
        let mut last = f64::INFINITY;
        for alpha in [0.01, 0.1, 0.5, 0.9, 0.99, 0.999, 0.999999] {
            let tau = chi_square_threshold(7, alpha);
            assert!(tau < last);
            last = tau;
        }
        assert!(last < 0.1);
    }

    #[test]
    fn cdf_roundtrip_over_wide_dof_range() {
        for k in 1..=200 {
            for alpha in [0.01, 0.05, 0.5] {
                let tau = chi_square_threshold(k, alpha);
                let back = chi_square_cdf(k, tau);
                assert!(
                    (back - (1.0 - alpha)).abs() <= 1e-8,
                    "k = {k}, alpha = {alpha}: cdf(tau) = {back}"
                );
            }
        }
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..10usize {
            let expected: f64 = (1..n).map(|i| (i as f64).ln()).sum();
            assert!((ln_gamma(n as f64) - expected).abs() < 1e-10);
        }
    }
}
