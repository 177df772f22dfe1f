//! Exact finite-sample density of the (scaled) quantile-regression estimator,
//! its Gaussian large-sample approximation, ratio profiles, and the binomial
//! lattice-ratio lab.
//!
//! The estimator at level τ takes one of finitely many basic values
//! β_h = X_h⁻¹Y_h, one per nonsingular p-row subset h. Writing
//! δ̂ = √n(β̂ − β(τ)), the exact density at δ is
//!
//!   f(δ) = n^(−p/2) Σ_h |det X_h| · P{h optimal at b} · Π_{i∈h} f_i(x_i'b),
//!
//! with b = β(τ) + δ/√n, where "h optimal" is the event that the subgradient
//! coordinates ξ = X_h⁻ᵀ S lie in the open cube (τ−1, τ)^p, S summing
//! x_j(1{Y_j ≤ x_j'b} − τ) over j ∉ h. The probability is evaluated exactly
//! by walking all 2^(n−p) indicator patterns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::CovarianceModel;
use crate::design::{Dataset, DgpSpec};
use crate::error::{QrError, Result};
use crate::util;

/// Hard cap on the exact-enumeration budget: 2^(n−p) patterns.
pub const MAX_PATTERN_EXPONENT: usize = 22;

/// Per-row conditional response model derived from a data-generating process:
/// row i has cdf F_i(y) = F((y − xᵢ'b₀)/(xᵢ'γ)) and density f_i = f(·)/(xᵢ'γ).
#[derive(Clone, Debug)]
pub struct ErrorModel {
    dgp: DgpSpec,
}

impl ErrorModel {
    pub fn new(dgp: DgpSpec) -> Self {
        ErrorModel { dgp }
    }

    pub fn dgp(&self) -> &DgpSpec {
        &self.dgp
    }

    /// Quantile coefficient vector β(τ).
    pub fn beta(&self, tau: f64) -> Result<DVector<f64>> {
        self.dgp.true_beta(tau)
    }

    fn loc_scale(&self, data: &Dataset, i: usize) -> Result<(f64, f64)> {
        let x = data.row(i);
        let loc = x.dot(&self.dgp.b0);
        let scale = x.dot(&self.dgp.gamma);
        if !(scale > 0.0) {
            return Err(QrError::invalid(format!(
                "non-positive scale x'gamma = {scale} at row {i}"
            )));
        }
        Ok((loc, scale))
    }

    /// F_i(y): conditional probability that row i's response is ≤ y.
    pub fn row_cdf(&self, data: &Dataset, i: usize, y: f64) -> Result<f64> {
        let (loc, scale) = self.loc_scale(data, i)?;
        Ok(self.dgp.error_dist.cdf((y - loc) / scale))
    }

    /// f_i(y): conditional density of row i's response at y.
    pub fn row_density(&self, data: &Dataset, i: usize, y: f64) -> Result<f64> {
        let (loc, scale) = self.loc_scale(data, i)?;
        Ok(self.dgp.error_dist.density((y - loc) / scale) / scale)
    }
}

/// Detailed result of one exact density evaluation.
#[derive(Clone, Debug)]
pub struct DensityEval {
    pub value: f64,
    /// Indicator patterns whose subgradient landed exactly on the cube
    /// boundary (counted as outside, per the open-rectangle convention).
    pub boundary_hits: usize,
    /// Subsets skipped for numerically zero determinant.
    pub singular_bases: usize,
}

/// Exact density of δ̂ = √n(β̂(τ) − β(τ)) at `delta`. Only the design part of
/// `data` matters; responses are integrated out by the error model.
pub fn finite_sample_density(
    data: &Dataset,
    err: &ErrorModel,
    tau: f64,
    delta: &DVector<f64>,
) -> Result<f64> {
    Ok(finite_sample_density_detailed(data, err, tau, delta)?.value)
}

/// As [`finite_sample_density`], with boundary/singularity bookkeeping.
pub fn finite_sample_density_detailed(
    data: &Dataset,
    err: &ErrorModel,
    tau: f64,
    delta: &DVector<f64>,
) -> Result<DensityEval> {
    let by_basis = density_terms_by_basis(data, err, tau, delta)?;
    Ok(DensityEval {
        value: by_basis.terms.iter().map(|(_, v)| v).sum::<f64>(),
        boundary_hits: by_basis.boundary_hits,
        singular_bases: by_basis.singular_bases,
    })
}

/// Per-basis decomposition of the exact density: each entry is a basis h and
/// its (already n^(−p/2)-scaled) contribution; integrating a basis' term over
/// δ gives the probability that β̂ takes that basic value.
#[derive(Clone, Debug)]
pub struct BasisTerms {
    pub terms: Vec<(Vec<usize>, f64)>,
    pub boundary_hits: usize,
    pub singular_bases: usize,
}

pub fn density_terms_by_basis(
    data: &Dataset,
    err: &ErrorModel,
    tau: f64,
    delta: &DVector<f64>,
) -> Result<BasisTerms> {
    let (n, p) = (data.n(), data.p());
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QrError::invalid(format!("tau must be in (0,1), got {tau}")));
    }
    if delta.len() != p {
        return Err(QrError::invalid(format!(
            "delta has length {}, design has p={p}",
            delta.len()
        )));
    }
    if err.dgp.p != p {
        return Err(QrError::invalid(format!(
            "error model p={} vs design p={p}",
            err.dgp.p
        )));
    }
    let m = n - p;
    if m > MAX_PATTERN_EXPONENT {
        return Err(QrError::Budget(format!(
            "exact mode enumerates 2^(n-p) indicator patterns; n-p = {m} exceeds {MAX_PATTERN_EXPONENT}"
        )));
    }

    let sqrt_n = (n as f64).sqrt();
    let b = err.beta(tau)? + delta / sqrt_n;
    let x = data.x();
    // Per-row fitted thresholds x_i'b, cdfs and densities at them.
    let thresholds: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&b)).collect();
    let cdfs: Vec<f64> = (0..n)
        .map(|i| err.row_cdf(data, i, thresholds[i]))
        .collect::<Result<_>>()?;
    let dens: Vec<f64> = (0..n)
        .map(|i| err.row_density(data, i, thresholds[i]))
        .collect::<Result<_>>()?;

    let mut terms = Vec::new();
    let mut boundary_hits = 0usize;
    let mut singular_bases = 0usize;

    let mut basis = util::first_combination(p);
    loop {
        let xh = DMatrix::from_fn(p, p, |r, c| x[(basis[r], c)]);
        // Hadamard bound gives a scale-aware singularity threshold.
        let hadamard: f64 = (0..p).map(|r| xh.row(r).norm()).product();
        let lu = xh.transpose().lu();
        let det = lu.determinant();
        if det.abs() <= 1e-12 * hadamard.max(1e-300) {
            singular_bases += 1;
        } else {
            let density_factor: f64 = basis.iter().map(|&i| dens[i]).product();
            if density_factor > 0.0 {
                let off: Vec<usize> = (0..n).filter(|i| !basis.contains(i)).collect();
                // a_j = X_hᵀ⁻¹ x_j, so ξ = Σ_j a_j (W_j − τ) accumulates linearly.
                let a: Vec<DVector<f64>> = off
                    .iter()
                    .map(|&j| {
                        lu.solve(&x.row(j).transpose())
                            .ok_or_else(|| QrError::Singular("basis solve failed".into()))
                    })
                    .collect::<Result<_>>()?;
                let q: Vec<f64> = off.iter().map(|&j| cdfs[j]).collect();
                let mut walker = PatternWalker {
                    tau,
                    a: &a,
                    q: &q,
                    u: DVector::zeros(p),
                    prob_inside: 0.0,
                    boundary_hits: 0,
                };
                walker.walk(0, 1.0);
                boundary_hits += walker.boundary_hits;
                let term = det.abs() * walker.prob_inside * density_factor
                    / sqrt_n.powi(p as i32);
                terms.push((basis.clone(), term));
            } else {
                terms.push((basis.clone(), 0.0));
            }
        }
        if !util::next_combination(&mut basis, n) {
            break;
        }
    }

    Ok(BasisTerms {
        terms,
        boundary_hits,
        singular_bases,
    })
}

/// Depth-first walk over indicator patterns, keeping the running subgradient
/// u and pattern probability. Zero-probability branches (rows whose indicator
/// is deterministic at this threshold) are pruned exactly, which folds
/// support-boundary rows in as forced branches.
struct PatternWalker<'a> {
    tau: f64,
    a: &'a [DVector<f64>],
    q: &'a [f64],
    u: DVector<f64>,
    prob_inside: f64,
    boundary_hits: usize,
}

impl PatternWalker<'_> {
    fn walk(&mut self, idx: usize, prob: f64) {
        if prob == 0.0 {
            return;
        }
        if idx == self.a.len() {
            let lo = self.tau - 1.0;
            let hi = self.tau;
            let mut inside = true;
            let mut on_boundary = false;
            for k in 0..self.u.len() {
                let v = self.u[k];
                if v <= lo || v >= hi {
                    inside = false;
                    if v == lo || v == hi {
                        on_boundary = true;
                    } else {
                        on_boundary = false;
                        break;
                    }
                }
            }
            if inside {
                self.prob_inside += prob;
            } else if on_boundary {
                self.boundary_hits += 1;
            }
            return;
        }
        let q = self.q[idx];
        // Indicator = 1 (response below threshold): weight (1−τ).
        self.u.axpy(1.0 - self.tau, &self.a[idx], 1.0);
        self.walk(idx + 1, prob * q);
        self.u.axpy(-(1.0 - self.tau), &self.a[idx], 1.0);
        // Indicator = 0: weight −τ.
        self.u.axpy(-self.tau, &self.a[idx], 1.0);
        self.walk(idx + 1, prob * (1.0 - q));
        self.u.axpy(self.tau, &self.a[idx], 1.0);
    }
}

/// Order-statistic form of the same density for intercept-only models:
/// δ̂ = √n·γ·(e_(k) − F⁻¹(τ)) with k = ⌈nτ⌉, so
/// f(δ) = f_(k)(F⁻¹(τ) + δ/(γ√n)) / (γ√n). Requires nτ ∉ ℤ (at integral nτ
/// the optimal basis condition is an empty open interval and the estimator
/// has no density in this sense).
pub fn order_statistic_density(err: &ErrorModel, n: usize, tau: f64, delta: f64) -> Result<f64> {
    if err.dgp.p != 1 {
        return Err(QrError::invalid(
            "order-statistic density requires an intercept-only model",
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QrError::invalid(format!("tau must be in (0,1), got {tau}")));
    }
    let nt = n as f64 * tau;
    if (nt - nt.round()).abs() < 1e-12 {
        return Err(QrError::invalid(format!(
            "n*tau = {nt} is an integer; the vertex estimator is set-valued there"
        )));
    }
    let k = nt.ceil() as usize;
    let gamma = err.dgp.gamma[0];
    let dist = &err.dgp.error_dist;
    let q = dist.quantile(tau)?;
    let y = q + delta / (gamma * (n as f64).sqrt());
    let cdf = dist.cdf(y);
    if !(cdf > 0.0 && cdf < 1.0) {
        return Ok(0.0);
    }
    let f = dist.density(y);
    if f <= 0.0 {
        return Ok(0.0);
    }
    let log_c = statrs::function::gamma::ln_gamma(n as f64 + 1.0)
        - statrs::function::gamma::ln_gamma(k as f64)
        - statrs::function::gamma::ln_gamma((n - k + 1) as f64);
    let log_density =
        log_c + (k as f64 - 1.0) * cdf.ln() + (n - k) as f64 * (-cdf).ln_1p() + f.ln();
    Ok(log_density.exp() / (gamma * (n as f64).sqrt()))
}

/// Multivariate normal density with mean 0 and covariance Σ(τ) from the
/// covariance model, evaluated at δ.
pub fn normal_density_approx(
    model: &CovarianceModel,
    tau: f64,
    delta: &DVector<f64>,
) -> Result<f64> {
    let sigma = model.sigma(tau)?;
    let p = sigma.nrows();
    if delta.len() != p {
        return Err(QrError::invalid(format!(
            "delta has length {}, covariance is {p}x{p}",
            delta.len()
        )));
    }
    let chol = nalgebra::Cholesky::new(sigma)
        .ok_or_else(|| QrError::Singular("covariance is not positive definite".into()))?;
    let z = chol.l().solve_lower_triangular(delta).ok_or_else(|| {
        QrError::Singular("covariance factor is singular".into())
    })?;
    let log_det: f64 = (0..p).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
    let log_density =
        -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared());
    Ok(log_density.exp())
}

/// δ-window shape for ratio profiles.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaWindow {
    /// Half-width d·√(log n), the classical large-deviation window.
    LogScaled { d: f64 },
    /// Fixed half-width in δ units for every n.
    Fixed { half_width: f64 },
}

impl Default for DeltaWindow {
    fn default() -> Self {
        DeltaWindow::LogScaled { d: 1.5 }
    }
}

impl DeltaWindow {
    pub fn half_width(&self, n: usize) -> f64 {
        match *self {
            DeltaWindow::LogScaled { d } => d * (n as f64).ln().sqrt(),
            DeltaWindow::Fixed { half_width } => half_width,
        }
    }
}

/// Exact-vs-normal ratio profile at one sample size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityProfile {
    pub n: usize,
    pub tau: f64,
    pub delta_grid: Vec<f64>,
    pub f_exact: Vec<f64>,
    pub f_normal: Vec<f64>,
    pub ratio_minus_1: Vec<f64>,
    pub sup_abs_ratio: f64,
}

/// Profiles |f_exact/f_normal − 1| over a symmetric δ grid for each n.
///
/// Intercept-only models only (the scan is one-dimensional); f_exact uses the
/// order-statistic form of the exact density — its equality with the pattern
/// enumeration is asserted separately by tests — and f_normal is the
/// mean-zero normal with variance τ(1−τ)·(γ/f(F⁻¹τ))².
pub fn density_ratio_profile(
    dgp: &DgpSpec,
    n_list: &[usize],
    tau: f64,
    window: &DeltaWindow,
    points: usize,
) -> Result<Vec<DensityProfile>> {
    if dgp.p != 1 {
        return Err(QrError::invalid(
            "ratio profiles scan a scalar delta; use an intercept-only model",
        ));
    }
    if points == 0 {
        return Err(QrError::invalid("need at least one grid point"));
    }
    if n_list.is_empty() {
        return Err(QrError::invalid("empty n list"));
    }
    let err = ErrorModel::new(dgp.clone());
    let dist = &dgp.error_dist;
    let q = dist.quantile(tau)?;
    let f_q = dist.density(q);
    if !(f_q > 0.0) {
        return Err(QrError::invalid("zero density at the target quantile"));
    }
    let gamma = dgp.gamma[0];
    let variance = tau * (1.0 - tau) * (gamma / f_q).powi(2);

    let mut out = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let w = window.half_width(n);
        let delta_grid: Vec<f64> = if points == 1 {
            vec![0.0]
        } else {
            (0..points)
                .map(|i| -w + 2.0 * w * i as f64 / (points - 1) as f64)
                .collect()
        };
        let mut f_exact = Vec::with_capacity(points);
        let mut f_normal = Vec::with_capacity(points);
        let mut ratio = Vec::with_capacity(points);
        let mut sup = 0.0f64;
        for &d in &delta_grid {
            let fe = order_statistic_density(&err, n, tau, d)?;
            let fnorm = util::norm_pdf(d / variance.sqrt()) / variance.sqrt();
            let r = fe / fnorm - 1.0;
            sup = sup.max(r.abs());
            f_exact.push(fe);
            f_normal.push(fnorm);
            ratio.push(r);
        }
        out.push(DensityProfile {
            n,
            tau,
            delta_grid,
            f_exact,
            f_normal,
            ratio_minus_1: ratio,
            sup_abs_ratio: sup,
        });
    }
    Ok(out)
}

/// Exact binomial interval probability vs its continuity-corrected normal
/// approximation on the shifted interval J + w.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinomialRatio {
    pub n: usize,
    pub prob: f64,
    /// Shifted interval endpoints (J + w), before clamping to the support.
    pub lo: i64,
    pub hi: i64,
    pub exact: f64,
    pub normal: f64,
    pub rel_err: f64,
    /// True when the shifted interval misses the support {0,…,n} entirely.
    pub degenerate: bool,
}

pub fn binomial_interval_ratio(
    n: usize,
    prob: f64,
    j_lo: i64,
    j_hi: i64,
    w: i64,
) -> Result<BinomialRatio> {
    if j_lo > j_hi {
        return Err(QrError::invalid(format!("empty interval [{j_lo}, {j_hi}]")));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(QrError::invalid(format!(
            "success probability must be in (0,1), got {prob}"
        )));
    }
    let lo = j_lo + w;
    let hi = j_hi + w;
    let degenerate = hi < 0 || lo > n as i64;
    let exact = if degenerate {
        0.0
    } else {
        let lo_c = lo.max(0) as u64;
        let hi_c = hi.min(n as i64) as u64;
        binomial_interval_sum(n as u64, prob, lo_c, hi_c, false)
    };
    let mu = n as f64 * prob;
    let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
    let normal = normal_interval_prob((lo as f64 - 0.5 - mu) / sd, (hi as f64 + 0.5 - mu) / sd);
    let rel_err = if normal > 0.0 {
        exact / normal - 1.0
    } else if exact == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(BinomialRatio {
        n,
        prob,
        lo,
        hi,
        exact,
        normal,
        rel_err,
        degenerate,
    })
}

/// Stable log-space sum of binomial pmf over [lo, hi]; `reverse` flips the
/// summation order (used as an independent-order consistency check).
pub(crate) fn binomial_interval_sum(n: u64, p: f64, lo: u64, hi: u64, reverse: bool) -> f64 {
    let log_terms: Vec<f64> = (lo..=hi)
        .map(|k| {
            util::ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
        })
        .collect();
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let sum: f64 = if reverse {
        log_terms.iter().rev().map(|&t| (t - max).exp()).sum()
    } else {
        log_terms.iter().map(|&t| (t - max).exp()).sum()
    };
    max.exp() * sum
}

/// P{a < Z ≤ b} for standard normal, using tail-difference forms to avoid
/// cancellation when the interval sits far from the origin.
fn normal_interval_prob(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a >= 0.0 {
        // Both in the upper tail: subtract survival functions.
        0.5 * (statrs::function::erf::erfc(a / std::f64::consts::SQRT_2)
            - statrs::function::erf::erfc(b / std::f64::consts::SQRT_2))
    } else if b <= 0.0 {
        normal_interval_prob(-b, -a)
    } else {
        util::norm_cdf(b) - util::norm_cdf(a)
    }
}
