//! Erdos-Renyi closed forms: survival probability, limit curves and the
//! 3x3 giant/surplus/component covariance, the Borel law, and Janson's MST
//! variance constant.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-14;

/// Positive root of `rho = 1 - exp(-t rho)` for `t > 1`, else 0.
pub fn rho(t: f64, tol: f64) -> f64 {
    if t <= 1.0 {
        return 0.0;
    }
    let g = |r: f64| r - 1.0 + (-t * r).exp();
    let dg = |r: f64| 1.0 - t * (-t * r).exp();
    let (mut lo, mut hi): (f64, f64) = (1e-12, 1.0 - 1e-12);
    // g(lo) < 0 < g(hi) for t > 1; the root dominates 1 - 1/t
    let mut r = 1.0 - (-t).exp();
    for _ in 0..200 {
        let v = g(r);
        if v.abs() <= tol {
            return r;
        }
        if v > 0.0 {
            hi = hi.min(r);
        } else {
            lo = lo.max(r);
        }
        let d = dg(r);
        let newton = r - v / d;
        r = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    r
}

/// `(t k)^(k-1) e^(-t k) / k!`, in log space for `k > 30`.
pub fn borel_pmf(t: f64, k: u64) -> f64 {
    assert!(k >= 1, "Borel support starts at 1");
    if t == 0.0 {
        return if k == 1 { 1.0 } else { 0.0 };
    }
    let kf = k as f64;
    if k <= 30 {
        let mut fact = 1.0;
        for i in 2..=k {
            fact *= i as f64;
        }
        (t * kf).powi(k as i32 - 1) * (-t * kf).exp() / fact
    } else {
        ((kf - 1.0) * (t * kf).ln() - t * kf - ln_factorial(k)).exp()
    }
}

pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 relative.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErCurves {
    pub t: f64,
    pub rho: f64,
    pub eta: f64,
    pub surplus: f64,
    pub giant: f64,
    /// Covariance of (components, giant, surplus) fluctuations; `t > 1` only.
    pub sigma: Option<[[f64; 3]; 3]>,
}

/// Limit curves at `t`; the covariance is filled in for `t > 1`.
pub fn curves(t: f64) -> ErCurves {
    let r = rho(t, DEFAULT_TOL);
    let q = 1.0 - r;
    ErCurves {
        t,
        rho: r,
        eta: q * (1.0 - t * q / 2.0),
        surplus: (t - 1.0) * r - t * r * r / 2.0,
        giant: r,
        sigma: covariance(t).ok(),
    }
}

/// The 3x3 covariance of (components, giant, surplus) for `t > 1`.
pub fn covariance(t: f64) -> Result<[[f64; 3]; 3]> {
    if t <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "supercritical only: covariance needs t > 1, got {t}"
        )));
    }
    let r = rho(t, DEFAULT_TOL);
    let q = 1.0 - r;
    let d = 1.0 - t * q;
    let s11 = q * (r + q * t / 2.0);
    let s12 = -r * q / d;
    let s13 = -(t - 1.0) * r * q;
    let s22 = r * q / (d * d);
    let s23 = r * q * (t - 1.0) / d;
    let s33 = r * q + t * r * (1.5 * r - 1.0);
    Ok([[s11, s12, s13], [s12, s22, s23], [s13, s23, s33]])
}

#[derive(Clone, Copy, Debug)]
pub struct SeriesEstimate {
    pub value: f64,
    /// Estimated magnitude of the neglected tail.
    pub error_bound: f64,
}

/// Janson's variance constant `pi^4/45 - 2 S` where `S` is the triple sum
/// over `i >= 0, j, k >= 1` of
/// `(i+k-1)! k^k (i+j)^(i-2) j / (i! k! (i+j+k)^(i+k+2))`.
///
/// The partial sums with all indices below `cap` converge like `cap^-2`;
/// the tail is estimated by Richardson extrapolation against the sum at
/// `cap / 2` and added to the partial sum.
pub fn janson_sigma2(cap: usize) -> SeriesEstimate {
    let cap = cap.max(2);
    let half = cap / 2;
    let (s_half, s_full) = janson_partial_sums(half, cap);
    let ratio = cap as f64 / half as f64;
    let tail = (s_full - s_half) / (ratio * ratio - 1.0);
    let lead = PI.powi(4) / 45.0;
    SeriesEstimate {
        value: lead - 2.0 * (s_full + tail),
        error_bound: 2.0 * tail.abs(),
    }
}

/// One summand of the triple sum, in log space.
pub fn janson_term(i: u64, j: u64, k: u64) -> f64 {
    let (fi, fj, fk) = (i as f64, j as f64, k as f64);
    let log = ln_factorial(i + k - 1) + fk * fk.ln() + (fi - 2.0) * (fi + fj).ln() + fj.ln()
        - ln_factorial(i)
        - ln_factorial(k)
        - (fi + fk + 2.0) * (fi + fj + fk).ln();
    log.exp()
}

/// Partial sums over the cubes `[0,a) x [1,a) x [1,a)` and the same for `b`.
fn janson_partial_sums(a: usize, b: usize) -> (f64, f64) {
    let (a, b) = (a as u64, b as u64);
    let mut small = 0.0;
    let mut large = 0.0;
    // accumulate in i to keep the additions of similar magnitude together
    for i in 0..b {
        let mut row_small = 0.0;
        let mut row_large = 0.0;
        for j in 1..b {
            for k in 1..b {
                let v = janson_term(i, j, k);
                row_large += v;
                if i < a && j < a && k < a {
                    row_small += v;
                }
            }
        }
        small += row_small;
        large += row_large;
    }
    (small, large)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: plain fixed-point iteration from 1.
    fn rho_fixed_point(t: f64) -> f64 {
        let mut r = 1.0f64;
        for _ in 0..100_000 {
            let next = 1.0 - (-t * r).exp();
            if (next - r).abs() < 1e-16 {
                return next;
            }
            r = next;
        }
        r
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(1.0, 1e-14), 0.0);
        assert_eq!(rho(0.5, 1e-14), 0.0);
        let r2 = rho(2.0, 1e-14);
        assert!((r2 - 0.796812).abs() < 1e-6);
        assert!((r2 - rho_fixed_point(2.0)).abs() < 1e-13);
        let grid: Vec<f64> = (0..200).map(|i| rho(1.0 + 0.05 * i as f64, 1e-14)).collect();
        assert!(grid.windows(2).all(|w| w[1] >= w[0]));
        assert!(1.0 - rho(30.0, 1e-14) < 1e-12);
        for t in [1.01, 1.5, 3.0, 10.0] {
            let r = rho(t, 1e-14);
            assert!((r - 1.0 + (-t * r).exp()).abs() <= 1e-14);
        }
    }

    #[test]
    fn curves_at_two() {
        let c = curves(2.0);
        let r = rho_fixed_point(2.0);
        assert_eq!(c.giant, c.rho);
        assert!((c.eta - 0.16190).abs() < 1e-5);
        let s = c.sigma.unwrap();
        let expected = r * (1.0 - r) / (1.0 - 2.0 * (1.0 - r)).powi(2);
        assert!((s[1][1] - expected).abs() < 1e-12);
        assert!((s[1][1] - 0.4594).abs() < 1e-4);
        assert!(covariance(1.0).is_err());
        assert!(curves(0.5).sigma.is_none());
    }

    #[test]
    fn covariance_diagonal_positive_supercritical() {
        for i in 1..=39 {
            let t = 1.1 + 0.1 * i as f64;
            let s = covariance(t).unwrap();
            for d in 0..3 {
                assert!(s[d][d] > 0.0, "t={t} d={d}");
            }
        }
    }

    #[test]
    fn borel_examples() {
        assert!((borel_pmf(0.5, 1) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((borel_pmf(0.5, 2) - 0.183940).abs() < 1e-6);
        // both branches agree around the switch
        let direct = (0.9f64 * 31.0).powi(30) * (-0.9f64 * 31.0).exp() / (1..=31).map(|i| i as f64).product::<f64>();
        assert!((borel_pmf(0.9, 31) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn borel_total_mass_is_extinction_probability() {
        for t in [0.5, 2.0, 3.0] {
            // pmf(k) <= k^-1.5 exp(-k (t - 1 - ln t)); the sum to 20000 leaves a negligible tail
            let total: f64 = (1..=20_000).map(|k| borel_pmf(t, k)).sum();
            assert!((total - (1.0 - rho(t, 1e-15))).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn janson_term_and_constant() {
        assert!((janson_term(0, 1, 1) - 0.125).abs() < 1e-15);
        assert!((PI.powi(4) / 45.0 - 2.164646).abs() < 1e-6);
        let est = janson_sigma2(120);
        // independent closed form 6 zeta(4) - 4 zeta(3)
        let zeta3: f64 = (1..200_000).map(|k| (k as f64).powi(-3)).sum::<f64>() + 0.5 / 200_000f64.powi(2);
        let closed = PI.powi(4) / 15.0 - 4.0 * zeta3;
        assert!((est.value - closed).abs() < 5e-5, "{} vs {closed}", est.value);
        assert!(est.error_bound < 1e-3);
    }
}
