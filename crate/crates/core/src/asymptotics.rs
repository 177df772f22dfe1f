//! Asymptotic covariance machinery for the quantile process.
//!
//! Core quantities for a design X and quantile level τ:
//! - H = (1/n) Σ xᵢxᵢ'
//! - G(τ) = (1/n) Σ fᵢ(xᵢ'β(τ)) xᵢxᵢ'  (fᵢ = conditional response density)
//! - Σ(τ) = τ(1−τ)·G(τ)⁻¹ H G(τ)⁻¹  (sandwich covariance of √n(β̂−β))
//! - Joint grid covariance with blocks Cov(B(τᵢ), B(τⱼ)) = τᵢ(1−τⱼ)·G(τᵢ)⁻¹HG(τⱼ)⁻¹, i ≤ j
//! - Exact Gaussian conditional moments of scaled increments given B(τ₁)
//!
//! Densities come either from the data-generating process (oracle mode) or
//! from a difference-quotient sparsity estimate (plug-in mode, clamped).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Dataset, DgpSpec};
use crate::error::{QrError, Result};
use crate::util;

/// Relative floor applied to x'δ̂ in plug-in mode: values below
/// `PLUGIN_CLAMP_REL · median|x'δ̂|` are clamped up before inversion.
pub const PLUGIN_CLAMP_REL: f64 = 1e-6;

/// Where per-observation densities come from.
#[derive(Clone, Debug)]
pub enum DensitySource {
    /// Closed-form densities of the location–scale process.
    Oracle(DgpSpec),
    /// A sparsity vector δ̂ estimated at some level; densities 1/(xᵢ'δ̂).
    /// The same δ̂ is used for every τ requested, which is only sensible
    /// near the level it was estimated at.
    Plugin { delta_hat: DVector<f64> },
}

/// H = (1/n) X'X.
pub fn compute_hn(data: &Dataset) -> DMatrix<f64> {
    let x = data.x();
    x.transpose() * x / (data.n() as f64)
}

/// G = (1/n) Σ fᵢ xᵢxᵢ' from explicit per-row densities.
pub fn compute_gn(data: &Dataset, densities: &[f64]) -> Result<DMatrix<f64>> {
    let (n, p) = (data.n(), data.p());
    if densities.len() != n {
        return Err(QrError::invalid(format!(
            "need {n} densities, got {}",
            densities.len()
        )));
    }
    if let Some((i, &f)) = densities.iter().enumerate().find(|(_, &f)| !(f > 0.0)) {
        return Err(QrError::invalid(format!(
            "non-positive density {f} at row {i}"
        )));
    }
    let x = data.x();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let f = densities[i];
        for a in 0..p {
            let xa = x[(i, a)];
            for b in 0..p {
                g[(a, b)] += f * xa * x[(i, b)];
            }
        }
    }
    Ok(g / (n as f64))
}

/// Joint covariance of the process over a τ-grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCovariance {
    pub grid: Vec<f64>,
    /// Dimension of one block (the design's p).
    pub p: usize,
    /// (m·p)×(m·p), block (i,j) = Cov(B(τᵢ), B(τⱼ)); coordinate order is
    /// grid-major (all p coordinates of τ₁, then of τ₂, ...).
    #[serde(with = "crate::report::dmatrix_serde")]
    pub cov: DMatrix<f64>,
}

impl GridCovariance {
    /// Block (i,j) as an owned p×p matrix.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let p = self.p;
        DMatrix::from_fn(p, p, |a, b| self.cov[(i * p + a, j * p + b)])
    }

    /// Marginal covariance restricted to a subset of grid indices.
    pub fn restrict(&self, keep: &[usize]) -> Result<GridCovariance> {
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= self.grid.len()) {
            return Err(QrError::invalid("restriction indices must be sorted and in range"));
        }
        let p = self.p;
        let m = keep.len();
        let cov = DMatrix::from_fn(m * p, m * p, |r, c| {
            let (bi, a) = (r / p, r % p);
            let (bj, b) = (c / p, c % p);
            self.cov[(keep[bi] * p + a, keep[bj] * p + b)]
        });
        Ok(GridCovariance {
            grid: keep.iter().map(|&k| self.grid[k]).collect(),
            p,
            cov,
        })
    }
}

/// Conditional moments of the scaled increment R = √(τ₂−τ₁)·(B(τ₂) − B(τ₁))
/// given B(τ₁) = s, under the joint Gaussian limit.
///
/// The stated scaling keeps R order-1 as the gap shrinks. The gap-halving
/// examples in this crate's tests are phrased for the *unscaled* increment
/// B(τ₂)−B(τ₁) (whose conditional covariance is approximately proportional
/// to the gap); use [`IncrementMoments::unscaled_cov`] for those.
#[derive(Clone, Debug)]
pub struct IncrementMoments {
    pub tau1: f64,
    pub tau2: f64,
    pub gap: f64,
    /// E[R | B(τ₁)=s] = mean_map · s.
    pub mean_map: DMatrix<f64>,
    /// Cov(R | B(τ₁)).
    pub cov: DMatrix<f64>,
}

impl IncrementMoments {
    /// Conditional covariance of the unscaled increment B(τ₂) − B(τ₁).
    pub fn unscaled_cov(&self) -> DMatrix<f64> {
        &self.cov / self.gap
    }

    /// Conditional mean map of the unscaled increment.
    pub fn unscaled_mean_map(&self) -> DMatrix<f64> {
        &self.mean_map / self.gap.sqrt()
    }

    /// Conditional mean for a concrete conditioning value.
    pub fn mean_given(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.mean_map * s
    }
}

/// Covariance model over a dataset with a chosen density source.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    data: Dataset,
    source: DensitySource,
    h: DMatrix<f64>,
}

impl CovarianceModel {
    pub fn oracle(data: Dataset, dgp: DgpSpec) -> Result<Self> {
        if data.p() != dgp.p {
            return Err(QrError::invalid(format!(
                "dataset p={} vs dgp p={}",
                data.p(),
                dgp.p
            )));
        }
        let h = compute_hn(&data);
        Ok(CovarianceModel {
            data,
            source: DensitySource::Oracle(dgp),
            h,
        })
    }

    pub fn plugin(data: Dataset, delta_hat: DVector<f64>) -> Result<Self> {
        if data.p() != delta_hat.len() {
            return Err(QrError::invalid(format!(
                "dataset p={} vs sparsity length {}",
                data.p(),
                delta_hat.len()
            )));
        }
        let h = compute_hn(&data);
        Ok(CovarianceModel {
            data,
            source: DensitySource::Plugin { delta_hat },
            h,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Per-observation densities at level τ, plus how many rows were clamped
    /// (always 0 in oracle mode).
    pub fn densities(&self, tau: f64) -> Result<(Vec<f64>, usize)> {
        match &self.source {
            DensitySource::Oracle(dgp) => Ok((dgp.oracle_densities(&self.data, tau)?, 0)),
            DensitySource::Plugin { delta_hat } => {
                plugin_densities(&self.data, delta_hat)
            }
        }
    }

    /// G(τ) from this model's densities.
    pub fn g(&self, tau: f64) -> Result<DMatrix<f64>> {
        compute_gn(&self.data, &self.densities(tau)?.0)
    }

    /// Sandwich covariance Σ(τ) = τ(1−τ)·G⁻¹HG⁻¹.
    pub fn sigma(&self, tau: f64) -> Result<DMatrix<f64>> {
        let ginv = invert(&self.g(tau)?, "G(tau)")?;
        Ok(tau * (1.0 - tau) * &ginv * &self.h * &ginv)
    }

    /// Joint covariance over a grid: block (i,j) for i ≤ j is
    /// τᵢ(1−τⱼ)·G(τᵢ)⁻¹ H G(τⱼ)⁻¹, mirrored by transposition. The assembled
    /// matrix is symmetrized and must be PSD within 1e-8·trace/m; a larger
    /// violation signals inconsistent G inputs and is an error (never
    /// eigenvalue-clipped).
    pub fn grid_covariance(&self, grid: &[f64]) -> Result<GridCovariance> {
        validate_grid(grid)?;
        let p = self.data.p();
        let m = grid.len();
        let ginvs: Vec<DMatrix<f64>> = grid
            .iter()
            .map(|&t| invert(&self.g(t)?, "G(tau)"))
            .collect::<Result<_>>()?;
        let mut cov = DMatrix::<f64>::zeros(m * p, m * p);
        for i in 0..m {
            for j in i..m {
                let block = grid[i] * (1.0 - grid[j]) * &ginvs[i] * &self.h * &ginvs[j];
                for a in 0..p {
                    for b in 0..p {
                        cov[(i * p + a, j * p + b)] = block[(a, b)];
                        cov[(j * p + b, i * p + a)] = block[(a, b)];
                    }
                }
            }
        }
        // Exact symmetrization (the mirror above already is; this removes
        // any float asymmetry in the diagonal blocks).
        let cov = (&cov + cov.transpose()) * 0.5;
        let tol = 1e-8 * cov.trace() / (m as f64);
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        let min_eig = eig.eigenvalues.min();
        if min_eig < -tol {
            return Err(QrError::invalid(format!(
                "grid covariance PSD violation: min eigenvalue {min_eig} below -{tol} \
                 (inconsistent G inputs)"
            )));
        }
        Ok(GridCovariance {
            grid: grid.to_vec(),
            p,
            cov,
        })
    }

    /// Exact Gaussian conditional moments of R = √(τ₂−τ₁)(B(τ₂)−B(τ₁)) given
    /// B(τ₁), from the joint two-point covariance.
    pub fn conditional_increment_moments(&self, tau1: f64, tau2: f64) -> Result<IncrementMoments> {
        if !(tau1 < tau2) {
            return Err(QrError::invalid(format!(
                "need tau1 < tau2, got {tau1} and {tau2}"
            )));
        }
        let p = self.data.p();
        let joint = self.grid_covariance(&[tau1, tau2])?;
        let s11 = joint.block(0, 0);
        let s12 = joint.block(0, 1);
        let s21 = joint.block(1, 0);
        let s22 = joint.block(1, 1);
        let gap = tau2 - tau1;
        let sqrt_gap = gap.sqrt();
        let s11_inv = invert(&s11, "Var(B(tau1))")
            .map_err(|_| QrError::Singular("singular Var(B(tau1))".into()))?;
        // Cov(R, B1) = √gap (Σ21 − Σ11); conditional mean map and Schur complement.
        let cov_rb = sqrt_gap * (&s21 - &s11);
        let mean_map = &cov_rb * &s11_inv;
        let var_r = gap * (&s22 - &s21 - &s12 + &s11);
        let cov = &var_r - &mean_map * (&s12 - &s11) * sqrt_gap;
        let cov = (&cov + cov.transpose()) * 0.5;
        let _ = p;
        Ok(IncrementMoments {
            tau1,
            tau2,
            gap,
            mean_map,
            cov,
        })
    }
}

/// Plug-in densities 1/(xᵢ'δ̂) with the relative clamp; returns the clamp count.
pub fn plugin_densities(data: &Dataset, delta_hat: &DVector<f64>) -> Result<(Vec<f64>, usize)> {
    let n = data.n();
    let x = data.x();
    let raw: Vec<f64> = (0..n)
        .map(|i| x.row(i).transpose().dot(delta_hat))
        .collect();
    let abs: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
    let med = util::median(&abs)?;
    if !(med > 0.0) {
        return Err(QrError::invalid(
            "sparsity projections are identically zero; cannot form densities",
        ));
    }
    let floor = PLUGIN_CLAMP_REL * med;
    let mut clamped = 0usize;
    let densities = raw
        .iter()
        .map(|&v| {
            let d = if v < floor {
                clamped += 1;
                floor
            } else {
                v
            };
            1.0 / d
        })
        .collect();
    Ok((densities, clamped))
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(QrError::invalid("empty tau grid"));
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(QrError::invalid("grid must be strictly increasing"));
        }
    }
    if !(grid[0] > 0.0 && *grid.last().unwrap() < 1.0) {
        return Err(QrError::invalid("grid points must lie in (0,1)"));
    }
    Ok(())
}

fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| QrError::Singular(format!("{what} is singular")))
}
