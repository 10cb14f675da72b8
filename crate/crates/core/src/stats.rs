//! Small statistical helpers shared by the ensemble and lemma-checking
//! modules: quantiles, a two-sample Kolmogorov-Smirnov test, binomial
//! standard errors, and the complementary normal CDF.

use statrs::distribution::{ContinuousCDF, Normal};

/// Sample mean and (unbiased) variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, ss / (n - 1) as f64)
}

/// Quantile by linear interpolation of the order statistics; `q` in [0, 1].
/// Sorts a copy, so callers with many queries should presort and use
/// [`quantile_sorted`].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < n {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[n - 1]
            }
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Binomial standard error of a proportion estimate `p` on `n` trials.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Complementary standard normal CDF, P[Z >= x].
pub fn normal_sf(x: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.sf(x)
}

/// Two-sample Kolmogorov-Smirnov comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub n: usize,
    pub m: usize,
    /// Critical value `c(α)·sqrt((n+m)/(n·m))` at the significance level the
    /// caller requested.
    pub critical: f64,
    pub pass: bool,
}

/// Asymptotic critical coefficient `c(α) = sqrt(-ln(α/2)/2)`.
pub fn ks_critical_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Two-sample KS test of `xs` against `ys` at significance `alpha`.
pub fn ks_two_sample(xs: &[f64], ys: &[f64], alpha: f64) -> KsResult {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let critical = if n == 0 || m == 0 {
        f64::INFINITY
    } else {
        ks_critical_coefficient(alpha) * (((n + m) as f64) / (n as f64 * m as f64)).sqrt()
    };
    KsResult { statistic: d, n, m, critical, pass: d <= critical }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{context, StreamRng};
    use approx::assert_relative_eq;

    #[test]
    fn quantiles_of_small_samples() {
        let xs = [3.0, 1.0, 2.0];
        assert_eq!(median(&xs), 2.0);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 3.0);
        assert_eq!(quantile(&xs, 0.25), 1.5);
    }

    #[test]
    fn normal_sf_reference_values() {
        // 2*P[Z >= 2] = 0.0455002638963584, P[Z >= 1] = 0.158655...
        assert_relative_eq!(2.0 * normal_sf(2.0), 0.045500263896358414, max_relative = 1e-12);
        assert_relative_eq!(normal_sf(1.0), 0.15865525393145705, max_relative = 1e-12);
        assert_relative_eq!(normal_sf(0.0), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn ks_accepts_same_distribution_rejects_shifted() {
        let mut rng = StreamRng::new(11, context::TEST, 0);
        let xs: Vec<f64> = (0..4000).map(|_| rng.next_normal()).collect();
        let ys: Vec<f64> = (0..4000).map(|_| rng.next_normal()).collect();
        let res = ks_two_sample(&xs, &ys, 0.01);
        assert!(res.pass, "{res:?}");

        let shifted: Vec<f64> = ys.iter().map(|y| y + 0.5).collect();
        let res = ks_two_sample(&xs, &shifted, 0.01);
        assert!(!res.pass, "{res:?}");
    }

    #[test]
    fn ks_statistic_on_tiny_samples() {
        // Disjoint supports: D = 1.
        let res = ks_two_sample(&[0.0, 1.0], &[5.0, 6.0], 0.05);
        assert_eq!(res.statistic, 1.0);
        // Identical samples: D = 0.
        let res = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0], 0.05);
        assert_eq!(res.statistic, 0.0);
    }
}
