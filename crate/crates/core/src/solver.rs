//! Exact minimization of the check-loss objective.
//!
//! The estimator at level τ minimizes V(b) = Σ ρ_τ(Yᵢ − xᵢ'b) with
//! ρ_τ(u) = u(τ − 1{u<0}). A nondegenerate minimizer is a vertex: a set h of
//! p rows with zero residuals and β = X_h⁻¹Y_h. The solver walks vertices
//! (a specialized primal simplex): at the current vertex it evaluates the
//! subgradient condition through ξ = X_h⁻ᵀ S, S = Σ_{i∉h} xᵢ(1{rᵢ≤0} − τ);
//! the vertex is optimal exactly when every ξ_j ∈ [τ−1, τ]. A violating
//! coordinate yields a descent ray d = ±X_h⁻¹e_j along which the objective is
//! piecewise linear; the line search passes residual crossings, accumulating
//! slope jumps |xᵢ'd|, and stops at the first crossing where the slope turns
//! nonnegative — that observation enters the basis.
//!
//! Both candidate orientations of the membership system were tried at
//! bring-up; only the transposed system (solve X_hᵀξ = S) is consistent with
//! optimality on random continuous instances, so it is frozen here and
//! asserted by `check_gradient_condition` tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::Dataset;
use crate::error::{QrError, Result};
use crate::report::{dmatrix_serde, dvector_serde};
use crate::util;

/// Pivot cap multiplier before switching to Bland's anti-cycling rule.
const BLAND_THRESHOLD_FACTOR: usize = 10;

/// One fitted quantile-regression vertex solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    #[serde(with = "dvector_serde")]
    pub beta_hat: DVector<f64>,
    /// Sorted indices of the p basic (zero-residual) observations.
    pub basis: Vec<usize>,
    /// Residuals Y − Xβ̂; exactly 0.0 at basic rows.
    #[serde(with = "dvector_serde")]
    pub residuals: DVector<f64>,
    /// Σ ρ_τ(rᵢ) at the optimum.
    pub objective: f64,
    pub pivot_count: usize,
    /// More than p near-zero residuals or a boundary subgradient margin.
    pub degenerate: bool,
    /// Zero-residual classification tolerance used: 1e-9·(1 + max|Yᵢ|).
    pub tol_res: f64,
}

/// Fit over a τ-grid, optionally centered and √n-scaled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProcessFit {
    pub grid: Vec<f64>,
    pub fits: Vec<QuantileFit>,
    /// Row j: √n(β̂(τ_j) − β_ref(τ_j)) when a reference was supplied, else β̂(τ_j).
    #[serde(with = "dmatrix_serde")]
    pub b_values: DMatrix<f64>,
    /// Whether `b_values` is centered/scaled.
    pub centered: bool,
}

/// Subgradient-condition report at a fitted vertex.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub ok: bool,
    /// ξ = X_h⁻ᵀ S; membership requires every coordinate in [τ−1, τ].
    pub xi: Vec<f64>,
    /// Slack min(ξ_j − (τ−1), τ − ξ_j) per coordinate (negative = violated).
    pub margins: Vec<f64>,
    /// Tolerance applied to the closed-interval test.
    pub tol: f64,
}

#[inline]
fn check_loss(r: f64, tau: f64) -> f64 {
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

fn objective_at(residuals: &DVector<f64>, tau: f64) -> f64 {
    residuals.iter().map(|&r| check_loss(r, tau)).sum()
}

/// Submatrix of x at the given rows.
fn rows_matrix(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

fn subvector(y: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| y[rows[r]])
}

struct Vertex {
    basis: Vec<usize>, // sorted
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    beta: DVector<f64>,
    residuals: DVector<f64>,
    in_basis: Vec<bool>,
}

impl Vertex {
    fn build(x: &DMatrix<f64>, y: &DVector<f64>, mut basis: Vec<usize>) -> Result<Self> {
        basis.sort_unstable();
        let xh = rows_matrix(x, &basis);
        let lu = xh.clone().lu();
        let lu_t = xh.transpose().lu();
        let beta = lu
            .solve(&subvector(y, &basis))
            .ok_or_else(|| QrError::Singular(format!("basis {basis:?} is singular")))?;
        let mut residuals = y - x * &beta;
        let mut in_basis = vec![false; x.nrows()];
        for &i in &basis {
            residuals[i] = 0.0;
            in_basis[i] = true;
        }
        Ok(Vertex {
            basis,
            lu,
            lu_t,
            beta,
            residuals,
            in_basis,
        })
    }

    /// ξ = X_h⁻ᵀ S with S = Σ_{i∉h} xᵢ(1{rᵢ ≤ 0} − τ).
    fn xi(&self, x: &DMatrix<f64>, tau: f64) -> Result<DVector<f64>> {
        let p = x.ncols();
        let mut s = DVector::<f64>::zeros(p);
        for i in 0..x.nrows() {
            if self.in_basis[i] {
                continue;
            }
            let w = if self.residuals[i] <= 0.0 { 1.0 - tau } else { -tau };
            for c in 0..p {
                s[c] += w * x[(i, c)];
            }
        }
        self.lu_t
            .solve(&s)
            .ok_or_else(|| QrError::Singular("transpose system at basis".into()))
    }
}

/// Greedy full-rank starting basis: rows ordered by |OLS residual|, kept when
/// linearly independent of those already chosen (Gram–Schmidt test).
fn initial_basis(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<usize>> {
    let (n, p) = x.shape();
    let ols = x
        .clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| QrError::Singular(format!("least-squares start failed: {e}")))?;
    let res = y - x * &ols;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        res[a]
            .abs()
            .partial_cmp(&res[b].abs())
            .expect("finite residuals")
            .then(a.cmp(&b))
    });
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for &i in &order {
        if basis.len() == p {
            break;
        }
        let v = x.row(i).transpose();
        let mut w = v.clone();
        for q in &ortho {
            let proj = q.dot(&w);
            w -= q * proj;
        }
        if w.norm() > 1e-10 * v.norm().max(1e-300) {
            ortho.push(w.clone() / w.norm());
            basis.push(i);
        }
    }
    if basis.len() < p {
        return Err(QrError::RankDeficient(
            "could not assemble a full-rank starting basis".into(),
        ));
    }
    Ok(basis)
}

/// Fit the exact τ-quantile regression. `warm_basis`, when valid, only
/// changes the vertex path length, never the optimum.
pub fn fit_rq(data: &Dataset, tau: f64, warm_basis: Option<&[usize]>) -> Result<QuantileFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QrError::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    let x = data.x();
    let y = data.y();
    let (n, p) = x.shape();
    let tol_res = 1e-9 * (1.0 + y.amax());

    let mut vertex = warm_basis
        .and_then(|w| {
            let mut w = w.to_vec();
            w.sort_unstable();
            w.dedup();
            if w.len() == p && w.iter().all(|&i| i < n) {
                Vertex::build(x, y, w).ok()
            } else {
                None
            }
        })
        .map(Ok)
        .unwrap_or_else(|| Vertex::build(x, y, initial_basis(x, y)?))?;

    let bland_after = BLAND_THRESHOLD_FACTOR * n;
    let pivot_cap = 200 * n + 5000;
    let mut pivots = 0usize;
    let mut trace: Vec<String> = Vec::new();
    let mut last_objective = objective_at(&vertex.residuals, tau);

    loop {
        let xi = vertex.xi(x, tau)?;
        let slack = 1e-10 * (1.0 + xi.amax());

        // Candidate directions: coordinate j, sign σ. ξ_j < τ−1 wants σ=+1
        // (entry derivative (1−τ)+ξ_j); ξ_j > τ wants σ=−1 (derivative τ−ξ_j).
        let mut candidates: Vec<(usize, f64, f64)> = Vec::new(); // (j, sigma, violation)
        for j in 0..p {
            let low = (tau - 1.0) - xi[j];
            let high = xi[j] - tau;
            if low > slack {
                candidates.push((j, 1.0, low));
            } else if high > slack {
                candidates.push((j, -1.0, high));
            }
        }
        if candidates.is_empty() {
            break;
        }
        if pivots <= bland_after {
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .expect("finite violations")
                    .then(a.0.cmp(&b.0))
            });
        } else {
            candidates.sort_by_key(|c| c.0);
        }

        let mut advanced = false;
        for &(j, sigma, _violation) in &candidates {
            let mut e = DVector::<f64>::zeros(p);
            e[j] = sigma;
            let d = vertex
                .lu
                .solve(&e)
                .ok_or_else(|| QrError::Singular("direction solve".into()))?;
            let c = x * &d;

            // Exact entry derivative, classifying zero residuals at their
            // post-move sign so degenerate vertices terminate correctly.
            let mut dv = if sigma > 0.0 { 1.0 - tau } else { tau };
            for i in 0..n {
                if vertex.in_basis[i] {
                    continue;
                }
                let r = vertex.residuals[i];
                if r.abs() <= tol_res {
                    dv += c[i].abs() * if c[i] > 0.0 { 1.0 - tau } else { tau };
                } else if r > 0.0 {
                    dv += -c[i] * tau;
                } else {
                    dv += -c[i] * (tau - 1.0);
                }
            }
            if dv >= -1e-12 * (1.0 + dv.abs()) {
                continue; // not a genuine descent after zero-residual correction
            }

            // Piecewise-linear line search: walk crossings until the slope
            // turns nonnegative; that observation enters the basis.
            let mut crossings: Vec<(f64, usize)> = Vec::new();
            for i in 0..n {
                if vertex.in_basis[i] {
                    continue;
                }
                let r = vertex.residuals[i];
                if r.abs() <= tol_res {
                    continue;
                }
                if (r > 0.0 && c[i] > 0.0) || (r < 0.0 && c[i] < 0.0) {
                    crossings.push((r / c[i], i));
                }
            }
            crossings.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .expect("finite crossing points")
                    .then(a.1.cmp(&b.1))
            });

            let mut slope = dv;
            let mut entering: Option<usize> = None;
            for &(_t, i) in &crossings {
                slope += c[i].abs();
                if slope >= 0.0 {
                    entering = Some(i);
                    break;
                }
            }
            let Some(enter) = entering else {
                return Err(QrError::SolverFailure {
                    message: "descent direction with no terminating crossing (rank anomaly)"
                        .into(),
                    trace,
                });
            };

            // Coordinate j of ξ corresponds to row j of the (sorted) basis
            // matrix, so that row leaves.
            let mut new_basis = vertex.basis.clone();
            let leaving_row = new_basis[j];
            new_basis[j] = enter;
            let next = Vertex::build(x, y, new_basis)?;
            let next_objective = objective_at(&next.residuals, tau);
            debug_assert!(
                next_objective <= last_objective + 1e-7 * (1.0 + last_objective.abs()),
                "objective increased: {last_objective} -> {next_objective}"
            );
            last_objective = next_objective;
            pivots += 1;
            if trace.len() >= 20 {
                trace.remove(0);
            }
            trace.push(format!(
                "pivot {pivots}: coord {j} sign {sigma:+.0} leaves row {leaving_row}, row {enter} enters"
            ));
            vertex = next;
            advanced = true;
            break;
        }

        if !advanced {
            break; // every candidate was a degenerate non-descent: optimal
        }
        if pivots > pivot_cap {
            return Err(QrError::SolverFailure {
                message: format!("pivot cap {pivot_cap} exceeded (cycling guard)"),
                trace,
            });
        }
    }

    finish_fit(data, tau, vertex, pivots, tol_res)
}

fn finish_fit(
    data: &Dataset,
    tau: f64,
    vertex: Vertex,
    pivots: usize,
    tol_res: f64,
) -> Result<QuantileFit> {
    let xi = vertex.xi(data.x(), tau)?;
    let margin = (0..data.p())
        .map(|j| (xi[j] - (tau - 1.0)).min(tau - xi[j]))
        .fold(f64::INFINITY, f64::min);
    let zero_count = vertex
        .residuals
        .iter()
        .filter(|r| r.abs() <= tol_res)
        .count();
    let degenerate = zero_count > data.p() || margin < 1e-9 * (1.0 + xi.amax());
    Ok(QuantileFit {
        tau,
        objective: objective_at(&vertex.residuals, tau),
        beta_hat: vertex.beta,
        basis: vertex.basis,
        residuals: vertex.residuals,
        pivot_count: pivots,
        degenerate,
        tol_res,
    })
}

/// Oracle: enumerate every nonsingular p-subset and minimize directly.
/// Ties broken by lexicographic basis order. Budget C(n,p) ≤ 10⁶.
pub fn brute_force_rq(data: &Dataset, tau: f64) -> Result<QuantileFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QrError::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    let x = data.x();
    let y = data.y();
    let (n, p) = x.shape();
    let count = util::choose_count(n, p);
    if count > 1_000_000 {
        return Err(QrError::Budget(format!(
            "C({n},{p}) = {count} exceeds the 10^6 enumeration budget"
        )));
    }
    let tol_res = 1e-9 * (1.0 + y.amax());

    // (objective, basis rows, coefficients, residuals) of the best vertex so far.
    type Vertex = (f64, Vec<usize>, DVector<f64>, DVector<f64>);
    let mut best: Option<Vertex> = None;
    let mut idx = util::first_combination(p);
    loop {
        let xh = rows_matrix(x, &idx);
        let det = xh.determinant();
        let hadamard: f64 = idx.iter().map(|&i| x.row(i).norm()).product();
        if det.abs() > 1e-12 * hadamard.max(f64::MIN_POSITIVE) {
            if let Some(beta) = xh.lu().solve(&subvector(y, &idx)) {
                let mut r = y - x * &beta;
                for &i in &idx {
                    r[i] = 0.0;
                }
                let obj = objective_at(&r, tau);
                let better = match &best {
                    None => true,
                    Some((best_obj, _, _, _)) => obj < *best_obj,
                };
                if better {
                    best = Some((obj, idx.clone(), beta, r));
                }
            }
        }
        if !util::next_combination(&mut idx, n) {
            break;
        }
    }
    let (objective, basis, beta_hat, residuals) =
        best.ok_or_else(|| QrError::RankDeficient("no nonsingular basis exists".into()))?;

    let vertex = Vertex::build(x, y, basis)?;
    let xi = vertex.xi(x, tau)?;
    let margin = (0..p)
        .map(|j| (xi[j] - (tau - 1.0)).min(tau - xi[j]))
        .fold(f64::INFINITY, f64::min);
    let zero_count = residuals.iter().filter(|r| r.abs() <= tol_res).count();
    Ok(QuantileFit {
        tau,
        beta_hat,
        basis: vertex.basis,
        residuals,
        objective,
        pivot_count: 0,
        degenerate: zero_count > p || margin < 1e-9 * (1.0 + xi.amax()),
        tol_res,
    })
}

/// Fit every grid point, warm-starting each fit from its predecessor's basis.
/// When `beta_ref` is supplied, `b_values` holds √n(β̂(τ_j) − beta_ref(τ_j)).
pub fn fit_process(
    data: &Dataset,
    grid: &[f64],
    beta_ref: Option<&dyn Fn(f64) -> DVector<f64>>,
) -> Result<ProcessFit> {
    if grid.is_empty() {
        return Err(QrError::invalid("empty tau grid"));
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(QrError::invalid(format!(
                "grid must be strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
    }
    if !(grid[0] > 0.0 && *grid.last().unwrap() < 1.0) {
        return Err(QrError::invalid("grid points must lie in (0,1)"));
    }
    let n = data.n();
    let p = data.p();
    let scale = (n as f64).sqrt();
    let mut fits: Vec<QuantileFit> = Vec::with_capacity(grid.len());
    let mut b_values = DMatrix::<f64>::zeros(grid.len(), p);
    for (jg, &tau) in grid.iter().enumerate() {
        let warm = fits.last().map(|f: &QuantileFit| f.basis.as_slice());
        let fit = fit_rq(data, tau, warm).map_err(|e| match e {
            QrError::SolverFailure { message, trace } => QrError::SolverFailure {
                message: format!("at tau={tau}: {message}"),
                trace,
            },
            other => QrError::invalid(format!("at tau={tau}: {other}")),
        })?;
        for c in 0..p {
            b_values[(jg, c)] = match beta_ref {
                Some(f) => scale * (fit.beta_hat[c] - f(tau)[c]),
                None => fit.beta_hat[c],
            };
        }
        fits.push(fit);
    }
    Ok(ProcessFit {
        grid: grid.to_vec(),
        fits,
        b_values,
        centered: beta_ref.is_some(),
    })
}

/// Piecewise-linear interpolation of the fitted coefficient path.
pub fn interpolate_beta(proc: &ProcessFit, tau: f64) -> Result<DVector<f64>> {
    let grid = &proc.grid;
    let first = *grid.first().ok_or_else(|| QrError::invalid("empty process"))?;
    let last = *grid.last().unwrap();
    if !(tau >= first && tau <= last) {
        return Err(QrError::invalid(format!(
            "tau {tau} outside interpolation range [{first}, {last}]"
        )));
    }
    if let Some(j) = grid.iter().position(|&g| g == tau) {
        return Ok(proc.fits[j].beta_hat.clone());
    }
    let hi = grid.partition_point(|&g| g < tau);
    let lo = hi - 1;
    let w = (tau - grid[lo]) / (grid[hi] - grid[lo]);
    Ok(&proc.fits[lo].beta_hat * (1.0 - w) + &proc.fits[hi].beta_hat * w)
}

/// Internal form of the subgradient check, usable with a bare design
/// (including the square n=p case, where the off-basis sum is empty).
pub(crate) fn gradient_report_raw(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    basis: &[usize],
    beta: &DVector<f64>,
) -> Result<GradientReport> {
    let p = x.ncols();
    if basis.len() != p {
        return Err(QrError::invalid(format!(
            "basis must have p={p} rows, got {}",
            basis.len()
        )));
    }
    let xh = rows_matrix(x, basis);
    let lu_t = xh.transpose().lu();
    let mut in_basis = vec![false; x.nrows()];
    for &i in basis {
        in_basis[i] = true;
    }
    let mut s = DVector::<f64>::zeros(p);
    for i in 0..x.nrows() {
        if in_basis[i] {
            continue;
        }
        let r = y[i] - x.row(i).transpose().dot(beta);
        let w = if r <= 0.0 { 1.0 - tau } else { -tau };
        for c in 0..p {
            s[c] += w * x[(i, c)];
        }
    }
    let xi = lu_t
        .solve(&s)
        .ok_or_else(|| QrError::Singular("singular basis in gradient check".into()))?;
    let tol = 1e-9 * (1.0 + xi.amax());
    let margins: Vec<f64> = (0..p)
        .map(|j| (xi[j] - (tau - 1.0)).min(tau - xi[j]))
        .collect();
    let ok = margins.iter().all(|&m| m >= -tol);
    Ok(GradientReport {
        ok,
        xi: xi.iter().copied().collect(),
        margins,
        tol,
    })
}

/// Verify the vertex subgradient condition for a fit: solve X_hᵀξ = S and
/// test ξ ∈ [τ−1, τ]^p (closed, with a small tolerance).
pub fn check_gradient_condition(data: &Dataset, fit: &QuantileFit) -> Result<GradientReport> {
    gradient_report_raw(data.x(), data.y(), fit.tau, &fit.basis, &fit.beta_hat)
}
