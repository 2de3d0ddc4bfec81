//! Stable scalar probit quantities: Φ, φ, logit(Φ), and truncated-normal
//! first moments, with Mills-ratio asymptotics past |x| = 10.

use std::f64::consts::PI;

/// Switch point beyond which Mills-ratio asymptotics replace direct
/// evaluation of probit expressions.
pub const MILLS_SWITCH: f64 = 10.0;

/// Standard normal density φ(x).
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF Φ(x) via the complementary error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate for large positive x.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// log(Φ(x) / (1 − Φ(x))), evaluated directly for |x| ≤ 10 and by the
/// Mills-ratio expansion `±(½log 2π + log|x| + x²/2)` beyond.
///
/// Exactly antisymmetric: the negative branch is computed as the negation
/// of the positive branch.
pub fn logit_phi_stable(x: f64) -> f64 {
    if x < 0.0 {
        return -logit_phi_stable(-x);
    }
    if x > MILLS_SWITCH {
        0.5 * (2.0 * PI).ln() + x.ln() + 0.5 * x * x
    } else {
        // For x in [0, 10], 1 − Φ(x) = sf(x) retains full relative precision.
        normal_cdf(x).ln() - normal_sf(x).ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x), with the asymptotic substitution
/// φ/Φ → 0 (x → +∞) and φ/Φ → −x (x → −∞) past the switch point.
#[inline]
pub fn mills_lower(x: f64) -> f64 {
    if x > MILLS_SWITCH {
        0.0
    } else if x < -MILLS_SWITCH {
        -x
    } else {
        normal_pdf(x) / normal_cdf(x)
    }
}

/// Upper-tail Mills ratio φ(x)/(1 − Φ(x)), with the asymptotic substitution
/// φ/(1−Φ) → x (x → +∞) and → 0 (x → −∞) past the switch point.
#[inline]
pub fn mills_upper(x: f64) -> f64 {
    if x > MILLS_SWITCH {
        x
    } else if x < -MILLS_SWITCH {
        0.0
    } else {
        normal_pdf(x) / normal_sf(x)
    }
}

/// Mean of the latent z under its variational mixture of one-sided
/// truncated normals:
/// `E z = Eλ + p·φ(Eλ)/Φ(Eλ) − (1−p)·φ(Eλ)/(1−Φ(Eλ))`.
pub fn expected_z(lambda_mean: f64, p: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p));
    lambda_mean + p * mills_lower(lambda_mean) - (1.0 - p) * mills_upper(lambda_mean)
}

/// logit⁻¹ with saturation handled by `exp`.
#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.96) - 0.975_002_104_851_780).abs() < 1e-9);
        assert!((normal_sf(10.0) - 7.619_853_024_160_49e-24).abs() < 1e-30);
    }

    #[test]
    fn logit_phi_zero_and_symmetry() {
        assert_eq!(logit_phi_stable(0.0), 0.0);
        for x in [0.5, 3.0, 12.0] {
            assert_eq!(logit_phi_stable(-x), -logit_phi_stable(x));
        }
    }

    #[test]
    fn logit_phi_asymptotic_branch_value() {
        // x just past the switch: ½ln(2π) + ln(10.5) + 10.5²/2
        let x = 10.5;
        let expect = 0.5 * (2.0 * PI).ln() + x.ln() + 0.5 * x * x;
        assert_eq!(logit_phi_stable(x), expect);
    }

    #[test]
    fn logit_phi_at_ten_close_to_asymptote() {
        // direct branch at x=10 vs the S-shaped expansion: within 1%
        let direct = logit_phi_stable(10.0);
        let asym = 0.5 * (2.0 * PI).ln() + 10.0f64.ln() + 50.0;
        assert!((direct - asym).abs() / direct.abs() < 0.01);
        assert!((asym - 53.221_524_416_864_89).abs() < 1e-6);
    }

    #[test]
    fn expected_z_reference_points() {
        // symmetric truncations cancel
        assert_eq!(expected_z(0.0, 0.5), 0.0);
        // p = 1 keeps only the lower-truncated component
        let e = expected_z(1.0, 1.0);
        let expect = 1.0 + normal_pdf(1.0) / normal_cdf(1.0);
        assert!((e - expect).abs() < 1e-14);
        // asymptotic branch: Eλ=12, p=1 → ≈ 12
        assert_eq!(expected_z(12.0, 1.0), 12.0);
        // mirrored
        assert_eq!(expected_z(-12.0, 0.0), -12.0);
    }

    #[test]
    fn expected_z_matches_truncated_normal_mixture_mc() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let norm = rand_distr::StandardNormal;
        let (lam, p) = (1.0, 0.8);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        // choose a branch with probability p, then rejection-sample within it
        for _ in 0..n {
            let positive_branch = rand::Rng::random::<f64>(&mut rng) < p;
            let z = loop {
                let z: f64 = lam
                    + <rand_distr::StandardNormal as Distribution<f64>>::sample(&norm, &mut rng);
                if (z > 0.0) == positive_branch {
                    break z;
                }
            };
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let sd = ((sumsq / n as f64) - mean * mean).sqrt();
        let se = sd / (n as f64).sqrt();
        let expect = expected_z(lam, p);
        assert!(
            (mean - expect).abs() < 3.0 * se + 1e-4,
            "mc {mean} vs analytic {expect} (se {se})"
        );
    }

    #[test]
    fn inv_logit_extremes() {
        assert!(inv_logit(800.0) > 1.0 - 1e-15);
        assert!(inv_logit(-800.0) < 1e-15);
        assert!((inv_logit(0.0) - 0.5).abs() < 1e-15);
    }
}
