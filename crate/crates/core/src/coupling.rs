//! Gaussian coupling diagnostics for the √n-scaled quantile-coefficient
//! process on a dyadic τ-grid.
//!
//! The module simulates draws of `B_n(τ) = √n(β̂(τ) − β(τ))` on a grid of
//! dyadic rationals, draws a zero-mean Gaussian companion with the matched
//! grid covariance, and constructs a coupled companion replication-by-
//! replication: starting from the coarsest grid point and descending the
//! dyadic levels, each coordinate of each increment is mapped through an
//! empirical conditional rank (estimated among the `k` replications nearest
//! in the conditioning variables) composed with the exact Gaussian
//! conditional quantile. Reported diagnostics: per-replication sup-difference
//! between the draw and its coupled companion, per-point Kolmogorov–Smirnov
//! distances against the companion marginals, and an energy-distance
//! statistic for the joint law.
//!
//! Conventions fixed here (the construction itself does not force them):
//! coordinates are transformed in design-column order (intercept first), and
//! each increment conditions on its own already-transformed coordinates plus
//! the parent point's values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::GridCovariance;
use crate::design::{simulate_dataset, DgpSpec};
use crate::error::{QrError, Result};
use crate::rng::{derive_seed, domain, substream};
use crate::solver::fit_process;
use crate::studies::{fit_rate, RateFit};
use crate::util;

/// Hard cap on total coupled coordinates (grid points × design columns).
pub const MAX_COUPLING_COORDS: usize = 32;

/// Default neighbor count for the empirical conditional rank estimate.
pub const DEFAULT_K_NEIGHBORS: usize = 200;

/// Deepest representable dyadic level (guards the `1 << level` shift).
const MAX_DYADIC_LEVEL: u32 = 40;

/// Minimum replication count for the KS diagnostic.
const MIN_KS_REPS: usize = 200;

/// Minimum replication count for the coupling construction.
const MIN_COUPLING_REPS: usize = 2000;

// ---------------------------------------------------------------------------
// Dyadic grid
// ---------------------------------------------------------------------------

/// Grid of dyadic rationals `k/2^level` inside `[ε, 1−ε]`, tied to a sample
/// size through the mesh constraint `2^level < n^b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub epsilon: f64,
    pub level: u32,
    pub n: usize,
    pub b_exponent: f64,
    pub points: Vec<f64>,
}

impl DyadicGrid {
    pub fn new(epsilon: f64, level: u32, n: usize, b_exponent: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(QrError::invalid(format!(
                "epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        if level > MAX_DYADIC_LEVEL {
            return Err(QrError::invalid(format!(
                "dyadic level {level} exceeds the supported maximum {MAX_DYADIC_LEVEL}"
            )));
        }
        if !(b_exponent > 0.0) {
            return Err(QrError::invalid(format!(
                "mesh exponent must be positive, got {b_exponent}"
            )));
        }
        let denom = (1u64 << level) as f64;
        let bound = (n as f64).powf(b_exponent);
        if !(denom < bound) {
            return Err(QrError::Budget(format!(
                "mesh constraint violated: 2^{level} = {denom} must be < n^{b_exponent} = {bound:.3} (n = {n})"
            )));
        }
        let mut points = Vec::new();
        for k in 1..(1u64 << level) {
            let t = k as f64 / denom;
            if t >= epsilon && t <= 1.0 - epsilon {
                points.push(t);
            }
        }
        if points.is_empty() {
            return Err(QrError::invalid(format!(
                "empty dyadic grid: no k/2^{level} inside [{epsilon}, {}]",
                1.0 - epsilon
            )));
        }
        Ok(DyadicGrid {
            epsilon,
            level,
            n,
            b_exponent,
            points,
        })
    }

    /// Number of grid points.
    pub fn m(&self) -> usize {
        self.points.len()
    }
}

/// Minimal dyadic representation `t = k/2^l` with `k` odd, or None if `t` is
/// not a dyadic rational of level ≤ `MAX_DYADIC_LEVEL`.
fn dyadic_level(t: f64) -> Option<(u32, u64)> {
    if !(t > 0.0 && t < 1.0) {
        return None;
    }
    for l in 1..=MAX_DYADIC_LEVEL {
        let scaled = t * (1u64 << l) as f64;
        if scaled == scaled.round() {
            let k = scaled.round() as u64;
            debug_assert!(k % 2 == 1, "minimal dyadic level must give odd numerator");
            return Some((l, k));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Process draws
// ---------------------------------------------------------------------------

/// Monte Carlo draws of the scaled process on a τ-grid: row `r` holds
/// replication `r`, flattened grid-major (all `p` coordinates of τ₁, then of
/// τ₂, …).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProcessDraws {
    pub taus: Vec<f64>,
    /// Sample size each replication was simulated at.
    pub n: usize,
    /// Design dimension.
    pub p: usize,
    /// Replications requested (kept rows = `requested − failures`).
    pub requested: usize,
    /// Replications dropped because the solver failed.
    pub failures: usize,
    #[serde(with = "crate::report::dmatrix_serde")]
    pub data: DMatrix<f64>,
}

impl ProcessDraws {
    /// Wrap an externally produced draw matrix (row per replication,
    /// grid-major columns).
    pub fn from_matrix(taus: Vec<f64>, n: usize, p: usize, data: DMatrix<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(QrError::invalid("draws need a nonempty tau grid"));
        }
        if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(QrError::invalid("grid taus must lie in (0,1)"));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QrError::invalid("grid taus must be strictly increasing"));
        }
        if p == 0 {
            return Err(QrError::invalid("design dimension must be positive"));
        }
        if data.ncols() != taus.len() * p {
            return Err(QrError::invalid(format!(
                "draw matrix has {} columns, expected m·p = {}·{} = {}",
                data.ncols(),
                taus.len(),
                p,
                taus.len() * p
            )));
        }
        let requested = data.nrows();
        Ok(ProcessDraws {
            taus,
            n,
            p,
            requested,
            failures: 0,
            data,
        })
    }

    /// Number of grid points.
    pub fn m_points(&self) -> usize {
        self.taus.len()
    }

    /// Number of kept replications (rows).
    pub fn reps(&self) -> usize {
        self.data.nrows()
    }

    /// Flattened column index of `(grid point, coordinate)`.
    pub fn col(&self, point: usize, coord: usize) -> usize {
        point * self.p + coord
    }
}

/// Simulate `reps` independent datasets of size `n` from `dgp` and fit the
/// quantile process along `grid`, collecting `B_n(τ) = √n(β̂(τ) − β(τ))` per
/// replication. Solver failures drop the replication and are counted.
///
/// Replication `r` draws from the substream keyed by `(seed, STUDY_REP, r)`,
/// so the result is a pure function of the arguments, independent of the
/// parallel worker count.
pub fn empirical_process_draws(
    dgp: &DgpSpec,
    n: usize,
    grid: &DyadicGrid,
    reps: usize,
    seed: u64,
) -> Result<ProcessDraws> {
    if reps == 0 {
        return Err(QrError::invalid("need at least one replication"));
    }
    let denom = (1u64 << grid.level) as f64;
    if !(denom < (n as f64).powf(grid.b_exponent)) {
        return Err(QrError::Budget(format!(
            "grid of level {} violates the mesh constraint at n = {n}",
            grid.level
        )));
    }
    let taus = grid.points.clone();
    let p = dgp.p;
    // Validate the centering up-front so the closure below cannot fail.
    for &t in &taus {
        dgp.true_beta(t)?;
    }
    let center = |t: f64| -> DVector<f64> {
        dgp.true_beta(t)
            .expect("true beta validated on every grid point")
    };

    let rows: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, domain::STUDY_REP, rep as u64);
            let data = simulate_dataset(dgp, n, rep_seed)?;
            let fit = fit_process(&data, &taus, Some(&center))?;
            let m = taus.len();
            let mut row = Vec::with_capacity(m * p);
            for j in 0..m {
                for c in 0..p {
                    row.push(fit.b_values[(j, c)]);
                }
            }
            Ok(row)
        })
        .collect();

    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(reps);
    let mut failures = 0usize;
    for row in rows {
        match row {
            Ok(r) => kept.push(r),
            Err(_) => failures += 1,
        }
    }
    if kept.is_empty() {
        return Err(QrError::SolverFailure {
            message: format!("all {reps} replications failed"),
            trace: vec![],
        });
    }
    let cols = taus.len() * p;
    let data = DMatrix::from_fn(kept.len(), cols, |r, c| kept[r][c]);
    Ok(ProcessDraws {
        taus,
        n,
        p,
        requested: reps,
        failures,
        data,
    })
}

/// Draw `reps` i.i.d. zero-mean Gaussian vectors with covariance `gcov.cov`
/// via a symmetric eigenvalue factorization. Deterministic given `seed`.
pub fn gaussian_companion_draws(
    gcov: &GridCovariance,
    reps: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if reps == 0 {
        return Err(QrError::invalid("need at least one companion draw"));
    }
    let d = gcov.cov.nrows();
    if d == 0 || gcov.cov.ncols() != d {
        return Err(QrError::invalid("companion covariance must be square and nonempty"));
    }
    let sym = (&gcov.cov + gcov.cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let tol = 1e-8 * eig.eigenvalues.iter().map(|v| v.abs()).sum::<f64>().max(1e-300) / d as f64;
    if let Some(min) = eig
        .eigenvalues
        .iter()
        .cloned()
        .min_by(|a, b| a.total_cmp(b))
    {
        if min < -tol {
            return Err(QrError::invalid(format!(
                "companion factorization failed: covariance eigenvalue {min:.3e} below PSD tolerance"
            )));
        }
    }
    let mut factor = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..d {
            factor[(i, j)] *= s;
        }
    }
    let mut rng = substream(seed, domain::COMPANION, 0);
    let mut draws = DMatrix::<f64>::zeros(reps, d);
    let mut xi = DVector::<f64>::zeros(d);
    for r in 0..reps {
        for j in 0..d {
            xi[j] = rng.sample(rand_distr::StandardNormal);
        }
        let z = &factor * &xi;
        for j in 0..d {
            draws[(r, j)] = z[j];
        }
    }
    Ok(draws)
}

// ---------------------------------------------------------------------------
// Marginal KS diagnostic
// ---------------------------------------------------------------------------

/// Per-point, per-coordinate KS distances of draws against the companion
/// marginals, with the median as headline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KsSummary {
    /// `per_point[j][c]` = KS distance of grid point `j`, coordinate `c`.
    pub per_point: Vec<Vec<f64>>,
    pub median: f64,
}

/// Exact one-sample KS statistic of a sorted sample against `N(0, sd²)`.
fn ks_stat_sorted(sorted: &[f64], sd: f64) -> f64 {
    let m = sorted.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = util::norm_cdf(x / sd);
        let below = i as f64 / m;
        let above = (i as f64 + 1.0) / m;
        ks = ks.max((f - below).abs().max((f - above).abs()));
    }
    ks
}

fn check_alignment(draws: &ProcessDraws, gcov: &GridCovariance) -> Result<()> {
    if draws.p != gcov.p {
        return Err(QrError::invalid(format!(
            "draws have p = {} but the covariance has p = {}",
            draws.p, gcov.p
        )));
    }
    if draws.taus.len() != gcov.grid.len()
        || draws
            .taus
            .iter()
            .zip(&gcov.grid)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(QrError::invalid(
            "draws grid and covariance grid differ".to_string(),
        ));
    }
    Ok(())
}

/// KS distance between each draw marginal and the Gaussian marginal implied by
/// `gcov`'s diagonal. Errors on degenerate (zero-variance) marginals.
pub fn marginal_ks(draws: &ProcessDraws, gcov: &GridCovariance) -> Result<KsSummary> {
    let m_reps = draws.reps();
    if m_reps < MIN_KS_REPS {
        return Err(QrError::invalid(format!(
            "KS diagnostic needs at least {MIN_KS_REPS} replications, got {m_reps}"
        )));
    }
    check_alignment(draws, gcov)?;
    let p = draws.p;
    let mut per_point = Vec::with_capacity(draws.m_points());
    let mut all = Vec::with_capacity(draws.m_points() * p);
    for j in 0..draws.m_points() {
        let mut row = Vec::with_capacity(p);
        for c in 0..p {
            let col = draws.col(j, c);
            let var = gcov.cov[(col, col)];
            if !(var > 0.0) {
                return Err(QrError::invalid(format!(
                    "degenerate companion marginal at tau = {}, coordinate {c}",
                    draws.taus[j]
                )));
            }
            let mut vals: Vec<f64> = draws.data.column(col).iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            if vals.first() == vals.last() {
                return Err(QrError::invalid(format!(
                    "constant draws column at tau = {}, coordinate {c}",
                    draws.taus[j]
                )));
            }
            let ks = ks_stat_sorted(&vals, var.sqrt());
            row.push(ks);
            all.push(ks);
        }
        per_point.push(row);
    }
    let median = util::median(&all)?;
    Ok(KsSummary { per_point, median })
}

// ---------------------------------------------------------------------------
// Dyadic coupling
// ---------------------------------------------------------------------------

/// Diagnostics from the dyadic conditional-rank coupling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingReport {
    /// Sample size behind the draws.
    pub n: usize,
    /// Replications coupled.
    pub reps: usize,
    /// Design dimension.
    pub p: usize,
    /// Grid the processes live on.
    pub taus: Vec<f64>,
    pub k_neighbors: usize,
    /// `ks_per_point[j][c]` = KS distance of the draws against the companion
    /// marginal at grid point `j`, coordinate `c`. All values in [0, 1].
    pub ks_per_point: Vec<Vec<f64>>,
    pub ks_median: f64,
    /// Per-replication sup over grid points and coordinates of
    /// |B_n − Z_n|; nonnegative.
    pub sup_errors: Vec<f64>,
    pub sup_median: f64,
    /// Energy-distance statistic between the joint draw law and the coupled
    /// companion law (subsampled).
    pub energy_distance: f64,
}

/// Dyadic structure of a τ-grid: processing order and parent links.
struct DyadicPlan {
    /// Indices into the grid, coarsest level first, ascending τ within level.
    order: Vec<usize>,
    /// Parent grid index per point; None marks the root.
    parent: Vec<Option<usize>>,
}

fn plan_dyadic(taus: &[f64]) -> Result<DyadicPlan> {
    let m = taus.len();
    let mut levels = Vec::with_capacity(m);
    let mut numer = Vec::with_capacity(m);
    for &t in taus {
        let (l, k) = dyadic_level(t).ok_or_else(|| {
            QrError::invalid(format!(
                "grid point {t} is not a dyadic rational of level ≤ {MAX_DYADIC_LEVEL}"
            ))
        })?;
        levels.push(l);
        numer.push(k);
    }
    let min_level = *levels.iter().min().expect("nonempty grid");
    let roots: Vec<usize> = (0..m).filter(|&j| levels[j] == min_level).collect();
    if roots.len() != 1 {
        return Err(QrError::invalid(format!(
            "dyadic grid needs a unique coarsest point (found {} at level {min_level}); include the midpoint",
            roots.len()
        )));
    }
    let root = roots[0];
    let mut parent = vec![None; m];
    for j in 0..m {
        if j == root {
            continue;
        }
        let denom = (1u64 << levels[j]) as f64;
        let par_t = if taus[j] > 0.5 {
            (numer[j] - 1) as f64 / denom
        } else {
            (numer[j] + 1) as f64 / denom
        };
        let pos = taus
            .iter()
            .position(|&t| (t - par_t).abs() < 1e-12)
            .ok_or_else(|| {
                QrError::invalid(format!(
                    "dyadic parent {par_t} of grid point {} is missing from the grid",
                    taus[j]
                ))
            })?;
        parent[j] = Some(pos);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| levels[a].cmp(&levels[b]).then(taus[a].total_cmp(&taus[b])));
    Ok(DyadicPlan { order, parent })
}

/// Per-replication conditional cdf values estimated by rank among the `k`
/// nearest replications in the standardized conditioning space. With no
/// conditioning variables, falls back to the global marginal rank.
fn conditional_rank_u(cond: &[Vec<f64>], target: &[f64], k: usize) -> Result<Vec<f64>> {
    let m = target.len();
    if cond.is_empty() {
        // Global marginal rank: u = (rank + 1/2)/M, ties broken by index.
        let mut idx: Vec<u32> = (0..m as u32).collect();
        idx.sort_by(|&a, &b| {
            target[a as usize]
                .total_cmp(&target[b as usize])
                .then(a.cmp(&b))
        });
        let mut u = vec![0.0; m];
        for (pos, &r) in idx.iter().enumerate() {
            u[r as usize] = (pos as f64 + 0.5) / m as f64;
        }
        return Ok(u);
    }
    let d = cond.len();
    // Standardize each conditioning coordinate by its sample deviation.
    let mut w = vec![0.0f64; m * d];
    for (j, colv) in cond.iter().enumerate() {
        let mean = colv.iter().sum::<f64>() / m as f64;
        let var = colv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(QrError::invalid(
                "conditioning degeneracy: a conditioning coordinate is constant",
            ));
        }
        for r in 0..m {
            w[r * d + j] = (colv[r] - mean) / sd;
        }
    }
    let lo = 0.5 / k as f64;
    let hi = 1.0 - lo;
    let u: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|r| {
            let wr = &w[r * d..(r + 1) * d];
            let mut dist: Vec<(f64, u32)> = Vec::with_capacity(m);
            for s in 0..m {
                let ws = &w[s * d..(s + 1) * d];
                let mut d2 = 0.0;
                for j in 0..d {
                    let diff = ws[j] - wr[j];
                    d2 += diff * diff;
                }
                dist.push((d2, s as u32));
            }
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
            let t = target[r];
            let mut less = 0usize;
            let mut equal = 0usize;
            for &(_, s) in &dist[..k] {
                let v = target[s as usize];
                if v < t {
                    less += 1;
                } else if v == t {
                    equal += 1;
                }
            }
            let raw = (less as f64 + 0.5 * equal as f64) / k as f64;
            raw.clamp(lo, hi)
        })
        .collect();
    Ok(u)
}

/// Gaussian conditional of coordinate `c` of a zero-mean vector with
/// covariance `sigma`, given coordinates `cond_idx`: regression coefficients
/// and residual standard deviation.
fn gaussian_conditional(
    sigma: &DMatrix<f64>,
    c: usize,
    cond_idx: &[usize],
) -> Result<(DVector<f64>, f64)> {
    let d = cond_idx.len();
    if d == 0 {
        let var = sigma[(c, c)];
        if !(var > 0.0) {
            return Err(QrError::invalid(
                "conditioning degeneracy: nonpositive marginal variance",
            ));
        }
        return Ok((DVector::zeros(0), var.sqrt()));
    }
    let sww = DMatrix::from_fn(d, d, |a, b| sigma[(cond_idx[a], cond_idx[b])]);
    let swc = DVector::from_fn(d, |a, _| sigma[(cond_idx[a], c)]);
    let chol = sww.cholesky().ok_or_else(|| {
        QrError::invalid("conditioning degeneracy: singular conditioning covariance")
    })?;
    let coef = chol.solve(&swc);
    let var = (sigma[(c, c)] - swc.dot(&coef)).max(0.0);
    Ok((coef, var.sqrt()))
}

/// Energy-distance statistic between the rows of `a` and `b`, subsampled with
/// a deterministic stride to at most `cap` rows each.
fn energy_distance_subsampled(a: &DMatrix<f64>, b: &DMatrix<f64>, cap: usize) -> f64 {
    let m = a.nrows();
    let l = cap.min(m).max(1);
    let cols = a.ncols();
    let take = |src: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..l)
            .map(|t| {
                let r = t * m / l;
                (0..cols).map(|c| src[(r, c)]).collect()
            })
            .collect()
    };
    let xs = take(a);
    let ys = take(b);
    let dist = |u: &[f64], v: &[f64]| -> f64 {
        u.iter()
            .zip(v)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut cross = 0.0;
    let mut within_x = 0.0;
    let mut within_y = 0.0;
    for i in 0..l {
        for j in 0..l {
            cross += dist(&xs[i], &ys[j]);
            within_x += dist(&xs[i], &xs[j]);
            within_y += dist(&ys[i], &ys[j]);
        }
    }
    let l2 = (l * l) as f64;
    (2.0 * cross - within_x - within_y) / l2
}

/// Build the coupled companion and the report; the companion matrix is kept
/// internal (tests verify its law).
fn couple_internal(
    draws: &ProcessDraws,
    gcov: &GridCovariance,
    k_neighbors: usize,
) -> Result<(CouplingReport, DMatrix<f64>)> {
    let m_reps = draws.reps();
    let m = draws.m_points();
    let p = draws.p;
    if m * p > MAX_COUPLING_COORDS {
        return Err(QrError::Budget(format!(
            "coupling handles at most {MAX_COUPLING_COORDS} coordinates, got m·p = {m}·{p} = {}",
            m * p
        )));
    }
    if m_reps < MIN_COUPLING_REPS {
        return Err(QrError::invalid(format!(
            "coupling needs at least {MIN_COUPLING_REPS} replications, got {m_reps}"
        )));
    }
    if k_neighbors < 2 {
        return Err(QrError::invalid(
            "insufficient neighbors: need k_neighbors >= 2",
        ));
    }
    if k_neighbors > m_reps {
        return Err(QrError::invalid(format!(
            "insufficient neighbors: k_neighbors = {k_neighbors} exceeds replications = {m_reps}"
        )));
    }
    check_alignment(draws, gcov)?;
    let plan = plan_dyadic(&draws.taus)?;

    let extract = |mat: &DMatrix<f64>, col: usize| -> Vec<f64> {
        mat.column(col).iter().copied().collect()
    };
    let mut z = DMatrix::<f64>::zeros(m_reps, m * p);
    let mut done = vec![false; m];

    for &i in &plan.order {
        let parent = plan.parent[i];
        if let Some(j) = parent {
            debug_assert!(done[j], "parent processed before child");
        }
        // Joint covariance of the transformed block: for the root this is
        // B_i itself; otherwise (R, S) with R = B_i − B_parent, S = B_parent,
        // indexed R-coordinates first.
        let (sigma, s_cols_emp, s_cols_comp): (DMatrix<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) =
            match parent {
                None => (gcov.block(i, i), vec![], vec![]),
                Some(j) => {
                    let c_ii = gcov.block(i, i);
                    let c_jj = gcov.block(j, j);
                    let c_ij = gcov.block(i, j);
                    let c_ji = gcov.block(j, i);
                    let sig_rr = &c_ii + &c_jj - &c_ij - &c_ji;
                    let sig_rs = &c_ij - &c_jj;
                    let mut sigma = DMatrix::<f64>::zeros(2 * p, 2 * p);
                    for a in 0..p {
                        for b in 0..p {
                            sigma[(a, b)] = sig_rr[(a, b)];
                            sigma[(a, p + b)] = sig_rs[(a, b)];
                            sigma[(p + a, b)] = sig_rs[(b, a)];
                            sigma[(p + a, p + b)] = c_jj[(a, b)];
                        }
                    }
                    let s_emp = (0..p).map(|c| extract(&draws.data, draws.col(j, c))).collect();
                    let s_comp = (0..p).map(|c| extract(&z, draws.col(j, c))).collect();
                    (sigma, s_emp, s_comp)
                }
            };
        // Empirical target block: the level values (root) or the increment.
        let r_emp: Vec<Vec<f64>> = (0..p)
            .map(|c| match parent {
                None => extract(&draws.data, draws.col(i, c)),
                Some(j) => {
                    let a = draws.data.column(draws.col(i, c));
                    let b = draws.data.column(draws.col(j, c));
                    a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
                }
            })
            .collect();
        let mut r_comp: Vec<Vec<f64>> = Vec::with_capacity(p);
        for c in 0..p {
            // Conditioning variables: this block's already-transformed
            // coordinates, then the parent values (when present).
            let mut cond_emp: Vec<Vec<f64>> = r_emp[..c].to_vec();
            cond_emp.extend(s_cols_emp.iter().cloned());
            let mut cond_idx: Vec<usize> = (0..c).collect();
            cond_idx.extend(p..p + s_cols_emp.len());
            let (coef, sd) = gaussian_conditional(&sigma, c, &cond_idx)?;
            let u = conditional_rank_u(&cond_emp, &r_emp[c], k_neighbors)?;
            let mut comp_cond: Vec<&[f64]> = Vec::with_capacity(cond_idx.len());
            for v in &r_comp[..c] {
                comp_cond.push(v.as_slice());
            }
            for v in &s_cols_comp {
                comp_cond.push(v.as_slice());
            }
            let mut vals = Vec::with_capacity(m_reps);
            for r in 0..m_reps {
                let mut mu = 0.0;
                for (t, col) in comp_cond.iter().enumerate() {
                    mu += coef[t] * col[r];
                }
                let q = util::norm_quantile(u[r])?;
                vals.push(mu + sd * q);
            }
            r_comp.push(vals);
        }
        for (c, comp) in r_comp.iter().enumerate() {
            let col = draws.col(i, c);
            match parent {
                None => {
                    for r in 0..m_reps {
                        z[(r, col)] = comp[r];
                    }
                }
                Some(j) => {
                    let parent_col = draws.col(j, c);
                    for r in 0..m_reps {
                        z[(r, col)] = z[(r, parent_col)] + comp[r];
                    }
                }
            }
        }
        done[i] = true;
    }

    // Diagnostics.
    let mut sup_errors = vec![0.0f64; m_reps];
    for r in 0..m_reps {
        let mut sup = 0.0f64;
        for col in 0..m * p {
            sup = sup.max((draws.data[(r, col)] - z[(r, col)]).abs());
        }
        sup_errors[r] = sup;
    }
    let sup_median = util::median(&sup_errors)?;
    let ks = marginal_ks(draws, gcov)?;
    let energy_distance = energy_distance_subsampled(&draws.data, &z, 1000);
    let report = CouplingReport {
        n: draws.n,
        reps: m_reps,
        p,
        taus: draws.taus.clone(),
        k_neighbors,
        ks_per_point: ks.per_point,
        ks_median: ks.median,
        sup_errors,
        sup_median,
        energy_distance,
    };
    Ok((report, z))
}

/// Couple the draws to a Gaussian companion with covariance `gcov` by the
/// dyadic conditional-rank construction and report sup-errors, marginal KS
/// distances, and the joint energy distance.
pub fn dyadic_quantile_coupling(
    draws: &ProcessDraws,
    gcov: &GridCovariance,
    k_neighbors: usize,
) -> Result<CouplingReport> {
    couple_internal(draws, gcov, k_neighbors).map(|(report, _)| report)
}

// ---------------------------------------------------------------------------
// Rate study
// ---------------------------------------------------------------------------

/// Per-sample-size summary of a coupling run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub n: usize,
    pub median_sup_error: f64,
    pub ks_median: f64,
    pub energy_distance: f64,
    pub failures: usize,
}

/// Coupling quality across sample sizes with a fitted log-log rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingRateStudy {
    pub per_n: Vec<CouplingSummary>,
    /// None when fewer than 3 sample sizes were run.
    pub rate: Option<RateFit>,
}

/// Run the coupling at each `n`, with the same grid geometry `(ε, level, b)`,
/// and fit the decay rate of the median sup-error.
///
/// The companion covariance at each `n` is built in oracle mode from a
/// reference dataset simulated on its own substream; draws use per-`n`
/// derived seeds so the whole study is deterministic given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn coupling_rate_study(
    dgp: &DgpSpec,
    n_list: &[usize],
    epsilon: f64,
    level: u32,
    b_exponent: f64,
    reps: usize,
    k_neighbors: usize,
    seed: u64,
) -> Result<CouplingRateStudy> {
    if n_list.is_empty() {
        return Err(QrError::invalid("need at least one sample size"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(QrError::invalid("sample sizes must be strictly increasing"));
    }
    let mut per_n = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        let grid = DyadicGrid::new(epsilon, level, n, b_exponent)?;
        let seed_n = derive_seed(seed, domain::STUDY_REP, idx as u64);
        let draws = empirical_process_draws(dgp, n, &grid, reps, seed_n)?;
        let reference = simulate_dataset(dgp, n, derive_seed(seed, domain::COMPANION, n as u64))?;
        let model = crate::asymptotics::CovarianceModel::oracle(reference, dgp.clone())?;
        let gcov = model.grid_covariance(&grid.points)?;
        let report = dyadic_quantile_coupling(&draws, &gcov, k_neighbors)?;
        per_n.push(CouplingSummary {
            n,
            median_sup_error: report.sup_median,
            ks_median: report.ks_median,
            energy_distance: report.energy_distance,
            failures: draws.failures,
        });
    }
    let rate = if n_list.len() >= 3 {
        let errs: Vec<f64> = per_n.iter().map(|s| s.median_sup_error).collect();
        Some(fit_rate(n_list, &errs)?)
    } else {
        None
    };
    Ok(CouplingRateStudy { per_n, rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::ErrorDist;
    use approx::assert_abs_diff_eq;

    fn uniform_intercept_dgp() -> DgpSpec {
        DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap()
    }

    /// Exact grid covariance for the intercept-only uniform-error process:
    /// Cov(B(s), B(t)) = min(s,t)·(1 − max(s,t)).
    fn uniform_gcov(taus: &[f64]) -> GridCovariance {
        let m = taus.len();
        let cov = DMatrix::from_fn(m, m, |i, j| {
            taus[i].min(taus[j]) * (1.0 - taus[i].max(taus[j]))
        });
        GridCovariance {
            grid: taus.to_vec(),
            p: 1,
            cov,
        }
    }

    #[test]
    fn dyadic_grid_examples() {
        let g = DyadicGrid::new(0.1, 2, 100, 0.9).unwrap();
        assert_eq!(g.points, vec![0.25, 0.5, 0.75]);
        let g = DyadicGrid::new(0.3, 1, 100, 0.9).unwrap();
        assert_eq!(g.points, vec![0.5]);
        // Boundary points are kept (closed band).
        let g = DyadicGrid::new(0.25, 2, 100, 0.9).unwrap();
        assert_eq!(g.points, vec![0.25, 0.5, 0.75]);
        // 2^8 = 256 > 100^0.9 ≈ 63.1.
        assert!(matches!(
            DyadicGrid::new(0.1, 8, 100, 0.9),
            Err(QrError::Budget(_))
        ));
        // Level 0 has no interior points at all.
        assert!(DyadicGrid::new(0.1, 0, 100, 0.9).is_err());
        assert!(DyadicGrid::new(0.6, 2, 100, 0.9).is_err());
    }

    #[test]
    fn dyadic_levels_and_parents() {
        assert_eq!(dyadic_level(0.5), Some((1, 1)));
        assert_eq!(dyadic_level(0.25), Some((2, 1)));
        assert_eq!(dyadic_level(0.875), Some((3, 7)));
        assert_eq!(dyadic_level(0.3), None);
        let taus = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875];
        let plan = plan_dyadic(&taus).unwrap();
        // Parents step one dyadic neighbor toward the midpoint.
        let parents: Vec<Option<f64>> = plan
            .parent
            .iter()
            .map(|o| o.map(|j| taus[j]))
            .collect();
        assert_eq!(
            parents,
            vec![
                Some(0.25),
                Some(0.5),
                Some(0.5),
                None,
                Some(0.5),
                Some(0.5),
                Some(0.75)
            ]
        );
        let order_taus: Vec<f64> = plan.order.iter().map(|&j| taus[j]).collect();
        assert_eq!(order_taus, vec![0.5, 0.25, 0.75, 0.125, 0.375, 0.625, 0.875]);
        // A grid missing the midpoint has no unique coarsest point.
        assert!(plan_dyadic(&[0.25, 0.75]).is_err());
    }

    #[test]
    fn empirical_draws_deterministic_and_shaped() {
        let dgp = uniform_intercept_dgp();
        let grid = DyadicGrid::new(0.1, 1, 50, 0.9).unwrap();
        let a = empirical_process_draws(&dgp, 50, &grid, 3, 99).unwrap();
        let b = empirical_process_draws(&dgp, 50, &grid, 3, 99).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.reps(), 3);
        assert_eq!(a.failures, 0);
        let single = empirical_process_draws(&dgp, 50, &grid, 1, 99).unwrap();
        assert_eq!(single.reps(), 1);
        assert_eq!(single.data.row(0), a.data.row(0));
    }

    #[test]
    fn empirical_draws_centered_at_zero() {
        // Symmetric errors at tau = 1/2: each B coordinate has mean 0.
        let dgp = DgpSpec::new(vec![0.5, 1.0], vec![1.0, 0.0], ErrorDist::Uniform).unwrap();
        let grid = DyadicGrid::new(0.1, 1, 200, 0.9).unwrap();
        let draws = empirical_process_draws(&dgp, 200, &grid, 400, 7).unwrap();
        assert_eq!(draws.failures, 0);
        // Asymptotic sds: sqrt(tau(1-tau) diag(H^{-1})) with H the uniform
        // design moment matrix -> 1 and sqrt(3).
        let sds = [1.0, 3f64.sqrt()];
        for (c, sd) in sds.iter().enumerate() {
            let col = draws.data.column(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let band = 4.0 * sd / (col.len() as f64).sqrt();
            assert!(
                mean.abs() < band,
                "coordinate {c}: mean {mean} outside ±{band}"
            );
        }
    }

    #[test]
    fn empirical_covariance_tracks_oracle() {
        let dgp = uniform_intercept_dgp();
        let n = 512;
        let grid = DyadicGrid::new(0.1, 2, n, 0.9).unwrap();
        let draws = empirical_process_draws(&dgp, n, &grid, 4000, 21).unwrap();
        let m_reps = draws.reps() as f64;
        let gcov = uniform_gcov(&grid.points);
        let means: Vec<f64> = (0..3)
            .map(|c| draws.data.column(c).iter().sum::<f64>() / m_reps)
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for r in 0..draws.reps() {
                    acc += (draws.data[(r, i)] - means[i]) * (draws.data[(r, j)] - means[j]);
                }
                let emp = acc / (m_reps - 1.0);
                let truth = gcov.cov[(i, j)];
                let tol = if i == j { 0.10 } else { 0.15 };
                assert!(
                    (emp - truth).abs() < tol * truth.abs(),
                    "entry ({i},{j}): empirical {emp} vs oracle {truth}"
                );
            }
        }
        // Increment variance scaled by the gap stays of order one.
        let gap = 0.25;
        let mut acc = 0.0;
        let mut mean_inc = 0.0;
        for r in 0..draws.reps() {
            mean_inc += draws.data[(r, 1)] - draws.data[(r, 0)];
        }
        mean_inc /= m_reps;
        for r in 0..draws.reps() {
            let inc = draws.data[(r, 1)] - draws.data[(r, 0)] - mean_inc;
            acc += inc * inc;
        }
        let scaled_var = acc / (m_reps - 1.0) / gap;
        // Theory: (C11 + C00 − 2C01)/gap = 0.1875/0.25 = 0.75.
        assert!(
            scaled_var > 0.25 && scaled_var < 2.25,
            "scaled increment variance {scaled_var}"
        );
    }

    #[test]
    fn companion_draws_match_covariance() {
        let gcov = uniform_gcov(&[0.25, 0.5, 0.75]);
        let m = 20_000usize;
        let draws = gaussian_companion_draws(&gcov, m, 31).unwrap();
        let again = gaussian_companion_draws(&gcov, m, 31).unwrap();
        assert_eq!(draws, again);
        let mf = m as f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += draws[(r, i)] * draws[(r, j)];
                }
                let emp = acc / mf;
                let truth = gcov.cov[(i, j)];
                // se for a Gaussian covariance entry estimate.
                let se = ((gcov.cov[(i, i)] * gcov.cov[(j, j)] + truth * truth) / mf).sqrt();
                assert!(
                    (emp - truth).abs() < 4.0 * se,
                    "entry ({i},{j}): {emp} vs {truth} (se {se})"
                );
            }
        }
    }

    #[test]
    fn companion_diagonal_gives_uncorrelated_coordinates() {
        let gcov = GridCovariance {
            grid: vec![0.25, 0.75],
            p: 1,
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.5])),
        };
        let m = 20_000usize;
        let draws = gaussian_companion_draws(&gcov, m, 5).unwrap();
        let mut acc = 0.0;
        for r in 0..m {
            acc += draws[(r, 0)] * draws[(r, 1)];
        }
        let corr = acc / m as f64 / (0.2f64 * 0.5).sqrt();
        assert!(corr.abs() < 4.0 / (m as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn companion_rejects_indefinite_covariance() {
        let gcov = GridCovariance {
            grid: vec![0.25, 0.75],
            p: 1,
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        };
        assert!(gaussian_companion_draws(&gcov, 100, 1).is_err());
    }

    #[test]
    fn marginal_ks_self_test_and_errors() {
        let taus = [0.25, 0.5, 0.75];
        let gcov = uniform_gcov(&taus);
        let m = 2000usize;
        let data = gaussian_companion_draws(&gcov, m, 13).unwrap();
        let draws = ProcessDraws::from_matrix(taus.to_vec(), 1000, 1, data).unwrap();
        let ks = marginal_ks(&draws, &gcov).unwrap();
        assert_eq!(ks.per_point.len(), 3);
        for row in &ks.per_point {
            for &v in row {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // Under the null, KS·√M sits in the Kolmogorov distribution's
        // central range.
        let scaled = ks.median * (m as f64).sqrt();
        assert!(
            scaled > 0.2 && scaled < 1.63,
            "median KS·sqrt(M) = {scaled}"
        );

        // Too few replications.
        let short = ProcessDraws::from_matrix(
            taus.to_vec(),
            1000,
            1,
            DMatrix::from_fn(150, 3, |r, c| (r + c) as f64),
        )
        .unwrap();
        assert!(marginal_ks(&short, &gcov).is_err());

        // Constant column.
        let mut flat = gaussian_companion_draws(&gcov, m, 14).unwrap();
        for r in 0..m {
            flat[(r, 1)] = 2.0;
        }
        let flat = ProcessDraws::from_matrix(taus.to_vec(), 1000, 1, flat).unwrap();
        assert!(marginal_ks(&flat, &gcov).is_err());

        // Degenerate companion marginal.
        let zero_var = GridCovariance {
            grid: taus.to_vec(),
            p: 1,
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1875, 0.0, 0.1875])),
        };
        let ok = ProcessDraws::from_matrix(
            taus.to_vec(),
            1000,
            1,
            gaussian_companion_draws(&gcov, 300, 15).unwrap(),
        )
        .unwrap();
        assert!(marginal_ks(&ok, &zero_var).is_err());
    }

    #[test]
    fn coupling_self_test_beats_mismatched_companion() {
        let taus = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875];
        let gcov = uniform_gcov(&taus);
        let m = 3000usize;
        let data = gaussian_companion_draws(&gcov, m, 41).unwrap();
        let draws = ProcessDraws::from_matrix(taus.to_vec(), 1000, 1, data.clone()).unwrap();
        let (matched, z) = couple_internal(&draws, &gcov, 150).unwrap();

        // The coupled companion must carry the companion law: covariance
        // within MC error and Gaussian marginals by KS at the 1% level.
        let mf = m as f64;
        for i in 0..taus.len() {
            for j in 0..taus.len() {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += z[(r, i)] * z[(r, j)];
                }
                let emp = acc / mf;
                let truth = gcov.cov[(i, j)];
                let se = ((gcov.cov[(i, i)] * gcov.cov[(j, j)] + truth * truth) / mf).sqrt();
                assert!(
                    (emp - truth).abs() < 5.0 * se,
                    "Z covariance ({i},{j}): {emp} vs {truth}"
                );
            }
        }
        let ks_crit = 1.628 / mf.sqrt();
        for col in 0..taus.len() {
            let mut vals: Vec<f64> = z.column(col).iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            let ks = ks_stat_sorted(&vals, gcov.cov[(col, col)].sqrt());
            assert!(ks < ks_crit, "Z column {col} KS {ks} ≥ {ks_crit}");
        }

        // Diagnostics well-defined.
        assert_eq!(matched.sup_errors.len(), m);
        assert!(matched.sup_errors.iter().all(|&s| s >= 0.0));
        assert!(matched
            .ks_per_point
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));

        // A deliberately miscovarianced input (inflated by 1.5×) must couple
        // worse than the matched self-test, on both sup-error and energy.
        let inflated = ProcessDraws::from_matrix(taus.to_vec(), 1000, 1, &data * 1.5).unwrap();
        let mismatched = dyadic_quantile_coupling(&inflated, &gcov, 150).unwrap();
        assert!(
            matched.sup_median < mismatched.sup_median,
            "matched {} vs mismatched {}",
            matched.sup_median,
            mismatched.sup_median
        );
        assert!(
            matched.energy_distance < mismatched.energy_distance,
            "energy: matched {} vs mismatched {}",
            matched.energy_distance,
            mismatched.energy_distance
        );
    }

    #[test]
    fn single_point_grid_reduces_to_marginal_rank_transform() {
        let taus = [0.5];
        let gcov = uniform_gcov(&taus);
        let m = 2500usize;
        let data = gaussian_companion_draws(&gcov, m, 61).unwrap();
        let draws = ProcessDraws::from_matrix(taus.to_vec(), 500, 1, data.clone()).unwrap();
        let report = dyadic_quantile_coupling(&draws, &gcov, 200).unwrap();
        // Oracle: rank transform through the exact Gaussian marginal.
        let sd = 0.25f64.sqrt();
        let col: Vec<f64> = (0..m).map(|r| data[(r, 0)]).collect();
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
        let mut expected = vec![0.0; m];
        for (pos, &r) in idx.iter().enumerate() {
            let u = (pos as f64 + 0.5) / m as f64;
            expected[r] = (col[r] - sd * util::norm_quantile(u).unwrap()).abs();
        }
        for r in 0..m {
            assert_abs_diff_eq!(report.sup_errors[r], expected[r], epsilon = 1e-12);
        }
        assert!(report.sup_median < 0.05, "sup median {}", report.sup_median);
    }

    #[test]
    fn coupling_rejects_bad_inputs() {
        let taus = [0.25, 0.5, 0.75];
        let gcov = uniform_gcov(&taus);
        let data = gaussian_companion_draws(&gcov, 2500, 3).unwrap();
        let draws = ProcessDraws::from_matrix(taus.to_vec(), 500, 1, data).unwrap();
        // Too many neighbors.
        assert!(dyadic_quantile_coupling(&draws, &gcov, 2501).is_err());
        // Too few replications.
        let tiny = ProcessDraws::from_matrix(
            taus.to_vec(),
            500,
            1,
            gaussian_companion_draws(&gcov, 300, 3).unwrap(),
        )
        .unwrap();
        assert!(dyadic_quantile_coupling(&tiny, &gcov, 50).is_err());
        // Non-dyadic grid point.
        let nd_taus = vec![0.3, 0.5, 0.7];
        let nd_gcov = uniform_gcov(&nd_taus);
        let nd = ProcessDraws::from_matrix(
            nd_taus,
            500,
            1,
            gaussian_companion_draws(&nd_gcov, 2500, 4).unwrap(),
        )
        .unwrap();
        assert!(dyadic_quantile_coupling(&nd, &nd_gcov, 100).is_err());
        // Grid mismatch between draws and covariance.
        let other = uniform_gcov(&[0.125, 0.5, 0.875]);
        let ok = ProcessDraws::from_matrix(
            taus.to_vec(),
            500,
            1,
            gaussian_companion_draws(&gcov, 2500, 5).unwrap(),
        )
        .unwrap();
        assert!(dyadic_quantile_coupling(&ok, &other, 100).is_err());
        // Coordinate budget: 17 grid points × p = 2 → 34 > 32.
        let mut many = Vec::new();
        for k in 1..=31u32 {
            let t = k as f64 / 32.0;
            many.push(t);
        }
        let many: Vec<f64> = many.into_iter().take(17).collect();
        let wide = ProcessDraws::from_matrix(
            many.clone(),
            500,
            2,
            DMatrix::zeros(2500, many.len() * 2),
        )
        .unwrap();
        let wide_gcov = GridCovariance {
            grid: many.clone(),
            p: 2,
            cov: DMatrix::identity(many.len() * 2, many.len() * 2),
        };
        assert!(matches!(
            dyadic_quantile_coupling(&wide, &wide_gcov, 100),
            Err(QrError::Budget(_))
        ));
    }

    #[test]
    fn rate_study_small_run_is_deterministic_across_pools() {
        let dgp = uniform_intercept_dgp();
        let run = || {
            coupling_rate_study(&dgp, &[64, 128], 0.1, 2, 0.9, 2000, 100, 17).unwrap()
        };
        let base = run();
        assert_eq!(base.per_n.len(), 2);
        assert!(base.rate.is_none(), "two sample sizes give no rate fit");
        for s in &base.per_n {
            assert!(s.median_sup_error > 0.0);
            assert!(s.failures == 0);
        }
        let base_json = serde_json::to_string(&base).unwrap();
        for workers in [1usize, 2] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let res = pool.install(run);
            assert_eq!(
                serde_json::to_string(&res).unwrap(),
                base_json,
                "results differ under a {workers}-worker pool"
            );
        }
    }
}
