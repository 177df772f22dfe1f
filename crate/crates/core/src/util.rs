//! Small numeric helpers shared across modules.

use crate::error::{QrError, Result};

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF (via erfc for tail accuracy).
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, refined by Halley steps against the erfc-based
/// CDF. Accuracy is limited by the CDF implementation to roughly 1e-10 in x,
/// far tighter than any frozen oracle constant used downstream.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(QrError::invalid(format!(
            "normal quantile needs p in (0,1), got {p}"
        )));
    }
    use statrs::distribution::ContinuousCDF;
    let n = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    let mut x = n.inverse_cdf(p);
    for _ in 0..2 {
        let f = norm_cdf(x) - p;
        let d = norm_pdf(x);
        if d > 0.0 {
            let step = f / d;
            // Halley correction for cubic convergence.
            x -= step / (1.0 - 0.5 * x * step);
        }
    }
    Ok(x)
}

/// Median of a slice (average of middle pair for even lengths).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(QrError::invalid("median of empty slice"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN values"));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// log of the binomial coefficient C(n, k).
pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    statrs::function::gamma::ln_gamma(n as f64 + 1.0)
        - statrs::function::gamma::ln_gamma(k as f64 + 1.0)
        - statrs::function::gamma::ln_gamma((n - k) as f64 + 1.0)
}

/// Number of p-subsets of n elements, saturating at `u128::MAX`.
pub fn choose_count(n: usize, p: usize) -> u128 {
    if p > n {
        return 0;
    }
    let mut c: u128 = 1;
    for i in 0..p.min(n - p) {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

/// First lexicographic p-combination of {0,…,n−1}: `[0, 1, …, p−1]`.
pub fn first_combination(p: usize) -> Vec<usize> {
    (0..p).collect()
}

/// Advance `idx` to the next lexicographic p-combination of {0,…,n−1} in
/// place; returns false when exhausted.
pub fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let p = idx.len();
    if p == 0 || p > n {
        return false;
    }
    let mut i = p;
    while i > 0 {
        i -= 1;
        if idx[i] < n - (p - i) {
            idx[i] += 1;
            for j in (i + 1)..p {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Kolmogorov distribution CDF: P(sup|B(t)| <= x) for the Brownian bridge,
/// K(x) = 1 - 2 Σ_{k≥1} (-1)^{k-1} exp(-2 k² x²).
pub fn kolmogorov_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=100u32 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        if term < 1e-18 {
            break;
        }
        sum += if k % 2 == 1 { term } else { -term };
    }
    (1.0 - 2.0 * sum).clamp(0.0, 1.0)
}
