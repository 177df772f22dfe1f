//! Datasets, the location–scale simulation family, and design diagnostics.
//!
//! The canonical simulation model is `Y = x'b0 + (x'γ)·e` with bounded design
//! entries (intercept plus uniform[0,1] covariates) and a chosen error
//! distribution. Its conditional τ-quantile is `x'(b0 + γ·F⁻¹(τ))`, so every
//! asymptotic quantity downstream (true coefficient path, per-observation
//! densities, sparsity) has a closed form and can serve as an exact oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{QrError, Result};
use crate::rng::{domain, substream};
use crate::util;

/// Error distribution of the simulation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorDist {
    /// Standard normal.
    Normal,
    /// Uniform on (0,1).
    Uniform,
    /// Exponential with rate 1.
    Exponential,
    /// Student-t with `df` degrees of freedom (probes heavy tails).
    StudentT { df: f64 },
}

impl ErrorDist {
    pub fn validate(&self) -> Result<()> {
        if let ErrorDist::StudentT { df } = self {
            if !(*df > 0.0) {
                return Err(QrError::invalid(format!(
                    "student_t requires df > 0, got {df}"
                )));
            }
        }
        Ok(())
    }

    /// Quantile function F⁻¹(τ).
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(QrError::invalid(format!(
                "quantile level must lie in (0,1), got {tau}"
            )));
        }
        Ok(match self {
            ErrorDist::Normal => util::norm_quantile(tau)?,
            ErrorDist::Uniform => tau,
            ErrorDist::Exponential => -(-tau).ln_1p(),
            ErrorDist::StudentT { df } => {
                self.validate()?;
                statrs::distribution::StudentsT::new(0.0, 1.0, *df)
                    .map_err(|e| QrError::invalid(format!("student_t: {e}")))?
                    .inverse_cdf(tau)
            }
        })
    }

    /// Density f(x).
    pub fn density(&self, x: f64) -> f64 {
        match self {
            ErrorDist::Normal => util::norm_pdf(x),
            ErrorDist::Uniform => {
                if (0.0..=1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            ErrorDist::Exponential => {
                if x >= 0.0 {
                    (-x).exp()
                } else {
                    0.0
                }
            }
            ErrorDist::StudentT { df } => {
                use statrs::distribution::Continuous;
                statrs::distribution::StudentsT::new(0.0, 1.0, *df)
                    .map(|d| d.pdf(x))
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// CDF F(x).
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            ErrorDist::Normal => util::norm_cdf(x),
            ErrorDist::Uniform => x.clamp(0.0, 1.0),
            ErrorDist::Exponential => {
                if x >= 0.0 {
                    -(-x).exp_m1()
                } else {
                    0.0
                }
            }
            ErrorDist::StudentT { df } => statrs::distribution::StudentsT::new(0.0, 1.0, *df)
                .map(|d| d.cdf(x))
                .unwrap_or(f64::NAN),
        }
    }

    /// Support interval (lo, hi) (±∞ where unbounded).
    pub fn support(&self) -> (f64, f64) {
        match self {
            ErrorDist::Normal | ErrorDist::StudentT { .. } => {
                (f64::NEG_INFINITY, f64::INFINITY)
            }
            ErrorDist::Uniform => (0.0, 1.0),
            ErrorDist::Exponential => (0.0, f64::INFINITY),
        }
    }

    /// Draw one variate.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::Normal => rng.sample(rand_distr::StandardNormal),
            ErrorDist::Uniform => rng.gen::<f64>(),
            ErrorDist::Exponential => rng.sample(rand_distr::Exp1),
            ErrorDist::StudentT { df } => {
                let d = rand_distr::StudentT::new(*df).expect("df validated at spec construction");
                rng.sample(d)
            }
        }
    }
}

/// A regression dataset: responses, design matrix, intercept flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    intercept: bool,
}

impl Dataset {
    /// Construct after validating shape, intercept column, and full column rank.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, intercept: bool) -> Result<Self> {
        let (n, p) = x.shape();
        if p == 0 {
            return Err(QrError::invalid("design matrix needs at least one column"));
        }
        if y.len() != n {
            return Err(QrError::invalid(format!(
                "response length {} does not match {} design rows",
                y.len(),
                n
            )));
        }
        if n <= p {
            return Err(QrError::invalid(format!(
                "need more observations than parameters: n={n}, p={p}"
            )));
        }
        if intercept && (0..n).any(|i| x[(i, 0)] != 1.0) {
            return Err(QrError::invalid(
                "intercept flag set but column 0 is not identically 1",
            ));
        }
        let svd = x.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-12 * smax.max(1.0) * (n.max(p) as f64))
            .count();
        if rank < p {
            return Err(QrError::RankDeficient(format!(
                "design has rank {rank} < p={p}"
            )));
        }
        Ok(Dataset { x, y, intercept })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Row i of the design as an owned vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }
}

/// Location–scale data-generating process `Y = x'b0 + (x'γ)e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DgpSpecRepr", into = "DgpSpecRepr")]
pub struct DgpSpec {
    pub p: usize,
    pub b0: DVector<f64>,
    pub gamma: DVector<f64>,
    pub error_dist: ErrorDist,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DgpSpecRepr {
    p: usize,
    b0: Vec<f64>,
    gamma: Vec<f64>,
    error_dist: ErrorDist,
}

impl TryFrom<DgpSpecRepr> for DgpSpec {
    type Error = QrError;
    fn try_from(r: DgpSpecRepr) -> Result<Self> {
        let spec = DgpSpec {
            p: r.p,
            b0: DVector::from_vec(r.b0),
            gamma: DVector::from_vec(r.gamma),
            error_dist: r.error_dist,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<DgpSpec> for DgpSpecRepr {
    fn from(s: DgpSpec) -> Self {
        DgpSpecRepr {
            p: s.p,
            b0: s.b0.iter().copied().collect(),
            gamma: s.gamma.iter().copied().collect(),
            error_dist: s.error_dist,
        }
    }
}

impl DgpSpec {
    pub fn new(b0: Vec<f64>, gamma: Vec<f64>, error_dist: ErrorDist) -> Result<Self> {
        let spec = DgpSpec {
            p: b0.len(),
            b0: DVector::from_vec(b0),
            gamma: DVector::from_vec(gamma),
            error_dist,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(QrError::invalid("dgp needs p >= 1"));
        }
        if self.b0.len() != self.p || self.gamma.len() != self.p {
            return Err(QrError::invalid(format!(
                "b0 and gamma must have length p={}, got {} and {}",
                self.p,
                self.b0.len(),
                self.gamma.len()
            )));
        }
        self.error_dist.validate()
    }

    /// True coefficient path β(τ) = b0 + γ·F⁻¹(τ).
    pub fn true_beta(&self, tau: f64) -> Result<DVector<f64>> {
        let q = self.error_dist.quantile(tau)?;
        Ok(&self.b0 + &self.gamma * q)
    }

    /// Oracle sparsity vector δ(τ) = γ / f(F⁻¹(τ)): satisfies
    /// x'δ(τ) = d/dτ [x'β(τ)] = 1 / (conditional density at the quantile).
    pub fn oracle_sparsity(&self, tau: f64) -> Result<DVector<f64>> {
        let q = self.error_dist.quantile(tau)?;
        let f = self.error_dist.density(q);
        if !(f > 0.0) {
            return Err(QrError::invalid(format!(
                "error density vanishes at the {tau}-quantile"
            )));
        }
        Ok(&self.gamma / f)
    }

    /// Per-observation conditional densities at the true τ-quantile:
    /// f_i(x_i'β(τ)) = f(F⁻¹(τ)) / (x_i'γ).
    pub fn oracle_densities(&self, data: &Dataset, tau: f64) -> Result<Vec<f64>> {
        if data.p() != self.p {
            return Err(QrError::invalid(format!(
                "dataset has p={} but dgp has p={}",
                data.p(),
                self.p
            )));
        }
        let q = self.error_dist.quantile(tau)?;
        let fq = self.error_dist.density(q);
        (0..data.n())
            .map(|i| {
                let scale = data.x().row(i).transpose().dot(&self.gamma);
                if scale <= 0.0 {
                    Err(QrError::invalid(format!(
                        "x'gamma = {scale} <= 0 at row {i}: scale must stay positive"
                    )))
                } else {
                    Ok(fq / scale)
                }
            })
            .collect()
    }
}

/// Simulate a dataset from the location–scale process. Deterministic in
/// `(dgp, n, seed)`: row i consumes p−1 design uniforms then one error draw.
pub fn simulate_dataset(dgp: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    dgp.validate()?;
    let p = dgp.p;
    if n <= p {
        return Err(QrError::invalid(format!(
            "need n > p for simulation: n={n}, p={p}"
        )));
    }
    let mut rng = substream(seed, domain::SIMULATE, 0);
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DVector::<f64>::zeros(n);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..p {
            x[(i, j)] = rng.gen::<f64>();
        }
        let e = dgp.error_dist.sample(&mut rng);
        let xi = x.row(i).transpose();
        let scale = xi.dot(&dgp.gamma);
        if scale <= 0.0 {
            return Err(QrError::invalid(format!(
                "rejected spec: x'gamma = {scale} <= 0 at row {i}"
            )));
        }
        y[i] = xi.dot(&dgp.b0) + scale * e;
    }
    Dataset::new(x, y, true)
}

/// Load a dataset from a comma-separated file with a header row.
pub fn load_dataset(
    path: &str,
    y_column: &str,
    x_columns: &[String],
    add_intercept: bool,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => QrError::Io {
                path: path.to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => QrError::invalid(format!("cannot open {path}: {e}")),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| QrError::invalid(format!("bad header in {path}: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| QrError::MissingColumn {
                path: path.to_string(),
                column: name.to_string(),
            })
    };
    let y_idx = col_index(y_column)?;
    let x_idx: Vec<usize> = x_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut y_vals = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (row_num, record) in reader.records().enumerate() {
        let row = row_num + 1; // 1-based data row (header excluded)
        let record = record.map_err(|e| QrError::invalid(format!(
            "bad record at data row {row} of {path}: {e}"
        )))?;
        let parse_cell = |idx: usize, name: &str| -> Result<f64> {
            let cell = record.get(idx).ok_or_else(|| QrError::Parse {
                path: path.to_string(),
                row,
                column: name.to_string(),
                message: "missing field".into(),
            })?;
            cell.parse::<f64>().map_err(|_| QrError::Parse {
                path: path.to_string(),
                row,
                column: name.to_string(),
                message: format!("non-numeric cell '{cell}'"),
            })
        };
        y_vals.push(parse_cell(y_idx, y_column)?);
        let mut xr = Vec::with_capacity(x_idx.len() + 1);
        if add_intercept {
            xr.push(1.0);
        }
        for (k, &idx) in x_idx.iter().enumerate() {
            xr.push(parse_cell(idx, &x_columns[k])?);
        }
        x_rows.push(xr);
    }
    let n = y_vals.len();
    let p = x_idx.len() + usize::from(add_intercept);
    if p == 0 {
        return Err(QrError::invalid(
            "no design columns: provide x columns or request an intercept",
        ));
    }
    if n == 0 {
        return Err(QrError::invalid(format!("no data rows in {path}")));
    }
    let x = DMatrix::from_fn(n, p, |i, j| x_rows[i][j]);
    Dataset::new(x, DVector::from_vec(y_vals), add_intercept)
}

/// Diagnostics summary of a design matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub max_row_norm: f64,
    pub eig_min_h: f64,
    pub eig_max_h: f64,
    pub general_position_ok: bool,
    /// Number of p-subsets actually tested (all of them when exhaustive).
    pub sampled_subsets_checked: usize,
    /// True when every p-subset was tested rather than a random sample.
    pub exhaustive: bool,
}

/// Check bounded rows, the spectrum of H = X'X/n, and general position
/// (every p-subset of rows nonsingular). Exhaustive when C(n,p) ≤ 10⁵,
/// otherwise `subset_samples` random subsets.
pub fn design_diagnostics(data: &Dataset, subset_samples: usize, seed: u64) -> DesignReport {
    let n = data.n();
    let p = data.p();
    let x = data.x();
    let max_row_norm = (0..n)
        .map(|i| x.row(i).norm())
        .fold(0.0_f64, f64::max);
    let h = x.transpose() * x / (n as f64);
    let eig = nalgebra::SymmetricEigen::new(h);
    let eig_min_h = eig.eigenvalues.min();
    let eig_max_h = eig.eigenvalues.max();

    let singular_subset = |rows: &[usize]| -> bool {
        let sub = DMatrix::from_fn(p, p, |r, c| x[(rows[r], c)]);
        let hadamard: f64 = rows.iter().map(|&i| x.row(i).norm()).product();
        sub.determinant().abs() <= 1e-10 * hadamard.max(f64::MIN_POSITIVE)
    };

    let mut ok = true;
    let mut checked = 0usize;
    let exhaustive = util::choose_count(n, p) <= 100_000;
    if exhaustive {
        let mut idx = util::first_combination(p);
        loop {
            checked += 1;
            if singular_subset(&idx) {
                ok = false;
                break;
            }
            if !util::next_combination(&mut idx, n) {
                break;
            }
        }
    } else {
        let mut rng = substream(seed, domain::SUBSET_SAMPLE, 0);
        let mut rows: Vec<usize> = Vec::with_capacity(p);
        for _ in 0..subset_samples {
            rows.clear();
            while rows.len() < p {
                let cand = rng.gen_range(0..n);
                if !rows.contains(&cand) {
                    rows.push(cand);
                }
            }
            rows.sort_unstable();
            checked += 1;
            if singular_subset(&rows) {
                ok = false;
                break;
            }
        }
    }

    DesignReport {
        max_row_norm,
        eig_min_h,
        eig_max_h,
        general_position_ok: ok,
        sampled_subsets_checked: checked,
        exhaustive,
    }
}
