//! Acceptance gate: one test per shipped guarantee, numbered `c01` … `c11`
//! so the harness reports them in a fixed order, one pass/fail line each.
//! Every test prints the quantities it measured (run with `--nocapture`),
//! checks them at the advertised tolerance, and enforces its wall-clock
//! budget at the end.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use qrlab_core::asymptotics::{CovarianceModel, GridCovariance};
use qrlab_core::coupling::{
    coupling_rate_study, dyadic_quantile_coupling, empirical_process_draws,
    gaussian_companion_draws, marginal_ks, DyadicGrid, ProcessDraws,
};
use qrlab_core::density::{density_ratio_profile, finite_sample_density, DeltaWindow, ErrorModel};
use qrlab_core::design::{simulate_dataset, Dataset, DgpSpec, ErrorDist};
use qrlab_core::inference::{sparsity_from_fn, BandwidthRule, SparsityOrder};
use qrlab_core::solver::{brute_force_rq, check_gradient_condition, fit_rq};
use qrlab_core::studies::{
    fit_rate, run_coverage_study, run_lattice_rate_study, run_study, CouplingGridSpec, StudyKind,
    StudySpec,
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// splitmix64: deterministic instance generation that cannot drift with any
/// library's sampling internals.
struct Stream(u64);

impl Stream {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 random bits.
    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform on {lo, …, hi} (inclusive; modulo bias is irrelevant here).
    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }
}

/// Print the elapsed time and fail if the budget was blown.
fn assert_budget(name: &str, started: Instant, limit_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    println!("{name}: finished in {elapsed:.1}s (budget {limit_s:.0}s)");
    assert!(
        elapsed <= limit_s,
        "{name} exceeded its {limit_s:.0}s budget: {elapsed:.1}s"
    );
}

/// Exact binomial coefficient for the small ranges used here (n ≤ 29): every
/// prefix product C(n, j) is an integer, so f64 arithmetic stays exact.
fn choose(n: usize, k: usize) -> f64 {
    let mut c = 1.0f64;
    for j in 0..k.min(n - k) {
        c = c * (n - j) as f64 / (j + 1) as f64;
    }
    c
}

fn study_spec(
    kind: StudyKind,
    dgp: DgpSpec,
    n_list: Vec<usize>,
    replications: usize,
    tau: f64,
    seed: u64,
) -> StudySpec {
    StudySpec {
        kind,
        dgp,
        n_list,
        replications,
        tau,
        alpha: 0.05,
        contrast: vec![],
        order: None,
        bandwidth: None,
        grid: None,
        k_neighbors: None,
        window: None,
        points: None,
        seed,
    }
}

/// Composite Simpson over [lo, hi] of the scalar estimator density at a
/// 1-parameter design; `k` (even) is the number of subintervals.
fn simpson_density_1d(
    data: &Dataset,
    err: &ErrorModel,
    tau: f64,
    lo: f64,
    hi: f64,
    k: usize,
) -> f64 {
    assert!(k % 2 == 0);
    let h = (hi - lo) / k as f64;
    let mut total = 0.0;
    for i in 0..=k {
        let d = lo + i as f64 * h;
        let w = if i == 0 || i == k {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w
            * finite_sample_density(data, err, tau, &DVector::from_vec(vec![d]))
                .expect("density evaluation inside the support");
    }
    total * h / 3.0
}

// ---------------------------------------------------------------------------
// c01 — solver exactness with optimality certificates
// ---------------------------------------------------------------------------

#[test]
fn c01_solver_matches_brute_force_on_500_random_instances() {
    let t0 = Instant::now();
    let mut rng = Stream(0xACCE_0001);
    let mut max_rel_gap = 0.0f64;
    for i in 0..500usize {
        let p = 1 + i % 3;
        let n = rng.range(p + 2, 30);
        let tau = 0.1 * ((i % 9) + 1) as f64;
        let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.unit() });
        let y = DVector::from_fn(n, |_, _| 4.0 * rng.unit() - 2.0);
        let data = Dataset::new(x, y, true).expect("random instance is full rank");
        let label = format!("instance {i} (n={n}, p={p}, tau={tau:.1})");

        let exact = brute_force_rq(&data, tau).expect("brute force solves every instance");
        let fit = fit_rq(&data, tau, None).expect("solver terminates");

        let gap = (fit.objective - exact.objective).abs();
        let tol = 1e-9 * (1.0 + exact.objective.abs());
        assert!(
            gap <= tol,
            "{label}: objective gap {gap:.3e} above {tol:.3e}"
        );
        max_rel_gap = max_rel_gap.max(gap / (1.0 + exact.objective.abs()));

        let zeros = fit
            .residuals
            .iter()
            .filter(|r| r.abs() <= fit.tol_res)
            .count();
        assert_eq!(zeros, p, "{label}: expected exactly p zero residuals");
        assert_eq!(fit.basis.len(), p, "{label}: basis must have p members");

        let grad = check_gradient_condition(&data, &fit).expect("certificate computable");
        assert!(
            grad.ok,
            "{label}: gradient condition violated, xi = {:?}",
            grad.xi
        );
    }
    println!("c01: 500 instances, worst scaled objective gap {max_rel_gap:.3e}");
    assert_budget("c01", t0, 120.0);
}

// ---------------------------------------------------------------------------
// c02 — finite-sample density vs an independent order-statistic identity
// ---------------------------------------------------------------------------

#[test]
fn c02_intercept_density_matches_order_statistic_identity() {
    let t0 = Instant::now();
    let (b, g) = (0.2, 1.3);
    let mut worst = 0.0f64;
    let mut evaluations = 0usize;
    for dist in [ErrorDist::Uniform, ErrorDist::Exponential] {
        for tau in [0.3, 0.5] {
            for n in [3usize, 5, 7, 9] {
                // n·tau is non-integral in every case, so the tau-quantile
                // order statistic is unique.
                let dgp = DgpSpec::new(vec![b], vec![g], dist.clone()).unwrap();
                let data = simulate_dataset(&dgp, n, 7).unwrap();
                let err = ErrorModel::new(dgp);
                let nf = n as f64;
                let k = (nf * tau).ceil() as usize;
                let beta_tau = b + g * dist.quantile(tau).unwrap();
                for j in 0..7 {
                    // Seven evaluation points, all interior to the support of
                    // the location-scale law for every (dist, tau, n) case.
                    let delta = -0.5 + j as f64 * (1.4 / 6.0);
                    let y = beta_tau + delta / nf.sqrt();
                    let z = (y - b) / g;
                    let cdf = dist.cdf(z);
                    let pdf = dist.density(z) / g;
                    // Density of the k-th order statistic of n draws,
                    // converted to the √n-scaled estimator coordinate.
                    let oracle = nf
                        * choose(n - 1, k - 1)
                        * cdf.powi((k - 1) as i32)
                        * (1.0 - cdf).powi((n - k) as i32)
                        * pdf
                        / nf.sqrt();
                    let got =
                        finite_sample_density(&data, &err, tau, &DVector::from_vec(vec![delta]))
                            .unwrap();
                    let rel = ((got - oracle) / oracle).abs();
                    worst = worst.max(rel);
                    evaluations += 1;
                    assert!(
                        rel <= 1e-10,
                        "dist {dist:?}, tau {tau}, n {n}, delta {delta:.4}: \
                         got {got:.15e}, oracle {oracle:.15e}, rel {rel:.3e}"
                    );
                }
            }
        }
    }
    println!("c02: worst relative gap {worst:.3e} over {evaluations} evaluations");
    assert_budget("c02", t0, 60.0);
}

// ---------------------------------------------------------------------------
// c03 — exact densities integrate to one
// ---------------------------------------------------------------------------

#[test]
fn c03_exact_densities_integrate_to_one() {
    let t0 = Instant::now();

    // (a) Intercept-only, bounded errors: integrate edge to edge. The density
    // vanishes at both support endpoints, so trimming 1e-9 loses nothing.
    {
        let dgp = DgpSpec::new(vec![0.2], vec![1.3], ErrorDist::Uniform).unwrap();
        let data = simulate_dataset(&dgp, 9, 7).unwrap();
        let err = ErrorModel::new(dgp);
        let (tau, nf) = (0.5, 9.0f64);
        let beta = 0.2 + 1.3 * 0.5;
        let lo = nf.sqrt() * (0.2 - beta) + 1e-9;
        let hi = nf.sqrt() * (0.2 + 1.3 - beta) - 1e-9;
        let total = simpson_density_1d(&data, &err, tau, lo, hi, 4000);
        println!("c03: uniform n=9 integral {total:.10}");
        assert!((total - 1.0).abs() <= 1e-4, "integral {total} off from 1");
    }

    // (b) Intercept-only, one-sided errors: start at the support edge and cut
    // the upper tail where the remaining mass is ~5e-9 (far below tolerance).
    {
        let dgp = DgpSpec::new(vec![0.2], vec![1.3], ErrorDist::Exponential).unwrap();
        let data = simulate_dataset(&dgp, 7, 7).unwrap();
        let (tau, nf) = (0.3, 7.0f64);
        let beta = 0.2 + 1.3 * dgp.error_dist.quantile(tau).unwrap();
        let err = ErrorModel::new(dgp);
        let lo = nf.sqrt() * (0.2 - beta) + 1e-9;
        let total = simpson_density_1d(&data, &err, tau, lo, 14.0, 4000);
        println!("c03: exponential n=7 integral {total:.10}");
        assert!((total - 1.0).abs() <= 1e-4, "integral {total} off from 1");
    }

    // (c) Regression p=2, unbounded errors: 2-D Simpson over a ±7σ box sized
    // per coordinate from the asymptotic covariance.
    {
        let dgp = DgpSpec::new(vec![0.0, 0.0], vec![1.0, 0.4], ErrorDist::Normal).unwrap();
        let data = simulate_dataset(&dgp, 8, 11).unwrap();
        let model = CovarianceModel::oracle(data.clone(), dgp.clone()).unwrap();
        let err = ErrorModel::new(dgp);
        let tau = 0.4;
        let sigma = model.sigma(tau).unwrap();
        let w1 = 7.0 * sigma[(0, 0)].sqrt();
        let w2 = 7.0 * sigma[(1, 1)].sqrt();
        let k = 96usize;
        let (h1, h2) = (2.0 * w1 / k as f64, 2.0 * w2 / k as f64);
        let weight = |i: usize| {
            if i == 0 || i == k {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let mut total = 0.0;
        for i in 0..=k {
            let d1 = -w1 + i as f64 * h1;
            for j in 0..=k {
                let d2 = -w2 + j as f64 * h2;
                let v =
                    finite_sample_density(&data, &err, tau, &DVector::from_vec(vec![d1, d2]))
                        .unwrap();
                total += weight(i) * weight(j) * v;
            }
        }
        total *= (h1 / 3.0) * (h2 / 3.0);
        println!("c03: regression p=2 n=8 integral {total:.10}");
        assert!((total - 1.0).abs() <= 1e-4, "integral {total} off from 1");
    }

    assert_budget("c03", t0, 300.0);
}

// ---------------------------------------------------------------------------
// c04 — density-ratio sup decays at the advertised rate
// ---------------------------------------------------------------------------

#[test]
fn c04_density_ratio_sup_decays_at_the_advertised_rate() {
    let t0 = Instant::now();
    let n_list = [5usize, 9, 13, 17, 21];
    let window = DeltaWindow::Fixed { half_width: 0.75 };

    // Sup values frozen against the scripted order-statistic oracle.
    let frozen_uniform = [
        0.1081875854,
        0.0578707318,
        0.0394955585,
        0.0299760990,
        0.0241539475,
    ];
    let frozen_exponential = [
        0.4532831403,
        0.4734225166,
        0.5408906725,
        0.2584205060,
        0.0915217517,
    ];

    let dgp_u = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap();
    let prof_u = density_ratio_profile(&dgp_u, &n_list, 0.5, &window, 21).unwrap();
    let sups_u: Vec<f64> = prof_u.iter().map(|p| p.sup_abs_ratio).collect();
    for (i, (&got, want)) in sups_u.iter().zip(frozen_uniform).enumerate() {
        assert!(
            (got - want).abs() <= 1e-8,
            "uniform sup[{i}] = {got:.10} drifted from frozen {want:.10}"
        );
    }
    for w in sups_u.windows(2) {
        assert!(
            w[1] < w[0],
            "uniform sup-ratio must decrease strictly: {:?}",
            sups_u
        );
    }
    let rate_u = fit_rate(&n_list, &sups_u).unwrap();
    println!(
        "c04: uniform tau=0.5 sups {:?}, slope {:.4}",
        sups_u, rate_u.exponent
    );
    assert!(
        (-1.2..=-0.3).contains(&rate_u.exponent),
        "uniform decay exponent {} outside [-1.2, -0.3]",
        rate_u.exponent
    );

    // The exponential profile at tau=0.3 is not yet monotone at these tiny n
    // (the sup still rises through n=13 before the decay regime begins), so
    // strict decrease is asserted on the uniform profile only; the fitted
    // slope must sit in the same band for both.
    let dgp_e = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Exponential).unwrap();
    let prof_e = density_ratio_profile(&dgp_e, &n_list, 0.3, &window, 21).unwrap();
    let sups_e: Vec<f64> = prof_e.iter().map(|p| p.sup_abs_ratio).collect();
    for (i, (&got, want)) in sups_e.iter().zip(frozen_exponential).enumerate() {
        assert!(
            (got - want).abs() <= 1e-8,
            "exponential sup[{i}] = {got:.10} drifted from frozen {want:.10}"
        );
    }
    let rate_e = fit_rate(&n_list, &sups_e).unwrap();
    println!(
        "c04: exponential tau=0.3 sups {:?}, slope {:.4}",
        sups_e, rate_e.exponent
    );
    assert!(
        (-1.2..=-0.3).contains(&rate_e.exponent),
        "exponential decay exponent {} outside [-1.2, -0.3]",
        rate_e.exponent
    );

    assert_budget("c04", t0, 600.0);
}

// ---------------------------------------------------------------------------
// c05 — lattice interval error decays inside the exponent band
// ---------------------------------------------------------------------------

#[test]
fn c05_binomial_interval_error_decays_inside_the_exponent_band() {
    let t0 = Instant::now();
    let n_list: Vec<usize> = (6..=14).map(|k| 1usize << k).collect();
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for prob in [0.3, 0.5] {
        let dgp = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap();
        let spec = study_spec(StudyKind::LatticeRate, dgp, n_list.clone(), 1, prob, 5);
        let report = run_lattice_rate_study(&spec).unwrap();
        println!(
            "c05: prob {prob}: per-probability slope {:.4} (r^2 {:.4})",
            report.rate.exponent, report.rate.r_squared
        );
        curves.push(report.per_n.iter().map(|r| r.rel_err.abs()).collect());
    }
    // The uniform-over-probability error curve: at every n take the worse of
    // the two probabilities (the asymmetric one carries the slowly-decaying
    // odd-order correction; the symmetric one decays a power faster).
    let envelope: Vec<f64> = (0..n_list.len())
        .map(|i| curves[0][i].max(curves[1][i]))
        .collect();
    let rate = fit_rate(&n_list, &envelope).unwrap();
    println!(
        "c05: envelope slope {:.6} (stderr {:.4})",
        rate.exponent, rate.stderr
    );
    assert!(
        (-0.65..=-0.35).contains(&rate.exponent),
        "envelope exponent {} outside [-0.65, -0.35]",
        rate.exponent
    );
    assert_budget("c05", t0, 60.0);
}

// ---------------------------------------------------------------------------
// c06 — oracle-sparsity interval hits nominal coverage
// ---------------------------------------------------------------------------

#[test]
fn c06_oracle_sparsity_interval_hits_nominal_coverage() {
    let t0 = Instant::now();
    let dgp = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Normal).unwrap();
    // At n·tau = 500 (integral) two vertices are jointly optimal and the
    // data-dependent pick realises the either-vertex coverage 0.90643, not
    // the single-order-statistic value 0.89990; both sit inside the nominal
    // band, and the frozen seed's draw (0.9075) is checked against it.
    let mut spec = study_spec(StudyKind::Coverage, dgp, vec![1000], 10_000, 0.5, 1);
    spec.contrast = vec![1.0];
    spec.order = Some(SparsityOrder::Oracle);
    let report = run_coverage_study(&spec).unwrap();
    let row = &report.per_n[0];
    println!(
        "c06: coverage {:.4} at n=1000 (mc se {:.4}, mean width {:.4}, failures {})",
        row.coverage, row.mc_se, row.mean_width, row.failures
    );
    assert_eq!(row.failures, 0, "no replication may fail");
    assert!(
        (row.coverage - 0.90).abs() <= 0.009,
        "coverage {} outside 0.90 ± 0.009",
        row.coverage
    );
    assert_budget("c06", t0, 600.0);
}

// ---------------------------------------------------------------------------
// c07 — plug-in interval calibrates as n grows
// ---------------------------------------------------------------------------

#[test]
fn c07_plug_in_interval_calibrates_as_n_grows() {
    let t0 = Instant::now();
    // Heteroscedastic design: the slope's scale coefficient is active, so the
    // density-weighted variance route is genuinely exercised.
    let dgp = DgpSpec::new(vec![0.0, 1.0], vec![1.0, 0.5], ErrorDist::Normal).unwrap();
    let mut spec = study_spec(
        StudyKind::Coverage,
        dgp,
        vec![200, 500, 1000, 2500],
        20_000,
        0.5,
        0xC7,
    );
    spec.contrast = vec![0.0, 1.0];
    spec.order = Some(SparsityOrder::First);
    spec.bandwidth = Some(BandwidthRule::HallSheather { c: None });
    let report = run_coverage_study(&spec).unwrap();

    let errs: Vec<f64> = report
        .per_n
        .iter()
        .map(|r| (r.coverage - 0.90).abs())
        .collect();
    for row in &report.per_n {
        println!(
            "c07: n={:4} coverage {:.4} (mc se {:.4}, clamp rate {:.2e}, failures {})",
            row.n, row.coverage, row.mc_se, row.clamp_rate, row.failures
        );
    }
    // Coverage error must not grow beyond what overlapping Monte Carlo bands
    // allow, and the largest sample must land within 1.5 points of nominal.
    for i in 0..errs.len() - 1 {
        let slack = 1.96 * (report.per_n[i].mc_se + report.per_n[i + 1].mc_se);
        assert!(
            errs[i + 1] <= errs[i] + slack,
            "coverage error rose from {:.4} (n={}) to {:.4} (n={}) beyond slack {:.4}",
            errs[i],
            report.per_n[i].n,
            errs[i + 1],
            report.per_n[i + 1].n,
            slack
        );
    }
    let last = *errs.last().unwrap();
    assert!(
        last <= 0.015,
        "final coverage error {last:.4} above 0.015"
    );
    assert_budget("c07", t0, 3600.0);
}

// ---------------------------------------------------------------------------
// c08 — second-order stencil: exact on cubics, fourth-order on smooth paths
// ---------------------------------------------------------------------------

#[test]
fn c08_second_order_stencil_is_exact_on_cubics_and_fourth_order_accurate() {
    let t0 = Instant::now();
    // Exactness: the Richardson stencil reproduces the derivative of any
    // polynomial of degree ≤ 4; tau³ at tau=0.5 gives 3·tau² = 0.75.
    let cubic = |t: f64| DVector::from_vec(vec![t * t * t]);
    let est = sparsity_from_fn(&cubic, 0.5, 0.1, SparsityOrder::Second).unwrap();
    let err_cubic = (est.delta_hat[0] - 0.75).abs();
    println!("c08: cubic-path derivative error {err_cubic:.3e}");
    assert!(err_cubic <= 1e-12, "cubic path error {err_cubic:.3e}");

    // Order of accuracy: on the standard normal quantile path the bias is
    // O(h⁴), so halving h shrinks it by ~16.
    let path = |t: f64| DVector::from_vec(vec![ErrorDist::Normal.quantile(t).unwrap()]);
    let truth = (2.0 * std::f64::consts::PI).sqrt();
    let at = |h: f64| {
        (sparsity_from_fn(&path, 0.5, h, SparsityOrder::Second)
            .unwrap()
            .delta_hat[0]
            - truth)
            .abs()
    };
    let (e_h, e_half) = (at(0.1), at(0.05));
    let ratio = e_h / e_half;
    println!("c08: bias {e_h:.3e} at h=0.1, {e_half:.3e} at h=0.05, ratio {ratio:.2}");
    assert!(
        (12.0..=20.0).contains(&ratio),
        "bias ratio {ratio:.2} outside [12, 20]"
    );
    assert_budget("c08", t0, 1.0);
}

// ---------------------------------------------------------------------------
// c09 — empirical grid covariance matches the oracle blocks
// ---------------------------------------------------------------------------

#[test]
fn c09_empirical_grid_covariance_matches_the_oracle_blocks() {
    let t0 = Instant::now();
    let dgp = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap();
    let grid = DyadicGrid::new(0.1, 3, 2000, 0.9).unwrap();
    assert_eq!(grid.points.len(), 7, "level-3 grid clipped at eps=0.1");

    let draws = empirical_process_draws(&dgp, 2000, &grid, 10_000, 0).unwrap();
    assert_eq!(draws.failures, 0, "every replication must solve");

    let m = draws.data.nrows();
    let d = draws.data.ncols();
    let mut mean = vec![0.0f64; d];
    for r in 0..m {
        for (c, acc) in mean.iter_mut().enumerate() {
            *acc += draws.data[(r, c)];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }

    // Intercept-only with unit-density uniform errors: the oracle covariance
    // between grid points is min(τ,τ') − ττ'.
    let mut worst = 0.0f64;
    let mut worst_pair = (0usize, 0usize);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..m {
                acc += (draws.data[(r, i)] - mean[i]) * (draws.data[(r, j)] - mean[j]);
            }
            let emp = acc / (m as f64 - 1.0);
            let (ti, tj) = (grid.points[i], grid.points[j]);
            let truth = ti.min(tj) * (1.0 - ti.max(tj));
            let rel = ((emp - truth) / truth).abs();
            if rel > worst {
                worst = rel;
                worst_pair = (i, j);
            }
        }
    }
    println!(
        "c09: worst entrywise covariance gap {:.2}% at (tau={}, tau={})",
        100.0 * worst,
        grid.points[worst_pair.0],
        grid.points[worst_pair.1]
    );
    assert!(
        worst <= 0.10,
        "covariance entry off by {:.2}% (limit 10%)",
        100.0 * worst
    );
    assert_budget("c09", t0, 1200.0);
}

// ---------------------------------------------------------------------------
// c10 — process draws couple to the Gaussian companion
// ---------------------------------------------------------------------------

#[test]
fn c10_process_draws_couple_to_the_gaussian_companion() {
    let t0 = Instant::now();

    // (a) Marginal agreement with the limit law strengthens with n on a
    // homoscedastic regression design (p=2, uniform covariate, H⁻¹ exact).
    let dgp2 = DgpSpec::new(vec![0.0, 1.0], vec![1.0, 0.0], ErrorDist::Uniform).unwrap();
    let hinv = [[4.0, -6.0], [-6.0, 12.0]];
    let pts = DyadicGrid::new(0.1, 3, 2000, 0.9).unwrap().points;
    let mp = pts.len();
    let mut cov2 = DMatrix::zeros(2 * mp, 2 * mp);
    for i in 0..mp {
        for j in 0..mp {
            let scale = pts[i].min(pts[j]) * (1.0 - pts[i].max(pts[j]));
            for (a, row) in hinv.iter().enumerate() {
                for (b, &h) in row.iter().enumerate() {
                    cov2[(2 * i + a, 2 * j + b)] = scale * h;
                }
            }
        }
    }
    let gcov2 = GridCovariance {
        grid: pts.clone(),
        p: 2,
        cov: cov2,
    };
    let mut medians = Vec::new();
    for (idx, n) in [250usize, 500, 1000, 2000].into_iter().enumerate() {
        let grid = DyadicGrid::new(0.1, 3, n, 0.9).unwrap();
        let draws = empirical_process_draws(&dgp2, n, &grid, 10_000, 0xC10A + idx as u64).unwrap();
        let ks = marginal_ks(&draws, &gcov2).unwrap();
        println!("c10: (a) n={n} marginal KS median {:.5}", ks.median);
        medians.push(ks.median);
    }
    for w in medians.windows(2) {
        assert!(
            w[1] <= w[0],
            "KS medians must be non-increasing in n: {medians:?}"
        );
    }

    // (b) Self-test on exactly Gaussian input: the matched companion must
    // couple strictly tighter than a companion dispersed 1.5× too wide.
    let mut cov1 = DMatrix::zeros(mp, mp);
    for i in 0..mp {
        for j in 0..mp {
            cov1[(i, j)] = pts[i].min(pts[j]) * (1.0 - pts[i].max(pts[j]));
        }
    }
    let gcov1 = GridCovariance {
        grid: pts.clone(),
        p: 1,
        cov: cov1.clone(),
    };
    let gauss = gaussian_companion_draws(&gcov1, 10_000, 0xC10B).unwrap();
    let wrapped = ProcessDraws {
        taus: pts.clone(),
        n: 2000,
        p: 1,
        requested: 10_000,
        failures: 0,
        data: gauss,
    };
    let matched = dyadic_quantile_coupling(&wrapped, &gcov1, 200).unwrap();
    let dispersed = GridCovariance {
        grid: pts.clone(),
        p: 1,
        cov: cov1 * (1.5 * 1.5),
    };
    let mismatched = dyadic_quantile_coupling(&wrapped, &dispersed, 200).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (gap_ok, gap_bad) = (mean(&matched.sup_errors), mean(&mismatched.sup_errors));
    println!("c10: (b) mean sup gap {gap_ok:.4} matched vs {gap_bad:.4} dispersed");
    assert!(
        gap_ok < gap_bad,
        "matched companion must couple strictly tighter ({gap_ok:.4} vs {gap_bad:.4})"
    );

    // (c) Coupling error decays with n at a visible rate.
    let dgp1 = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap();
    let study =
        coupling_rate_study(&dgp1, &[256, 512, 1024, 2048], 0.1, 3, 0.9, 5000, 500, 0xC10C)
            .unwrap();
    for row in &study.per_n {
        println!(
            "c10: (c) n={:4} median sup {:.4}, ks median {:.4}, energy {:.4}, failures {}",
            row.n, row.median_sup_error, row.ks_median, row.energy_distance, row.failures
        );
    }
    let rate = study.rate.expect("four sample sizes give a rate fit");
    println!("c10: (c) coupling decay exponent {:.3}", rate.exponent);
    assert!(
        rate.exponent <= -0.2,
        "coupling exponent {} above -0.2",
        rate.exponent
    );

    assert_budget("c10", t0, 2700.0);
}

// ---------------------------------------------------------------------------
// c11 — studies are bit-identical across reruns and worker counts
// ---------------------------------------------------------------------------

#[test]
fn c11_studies_are_bit_identical_across_reruns_and_worker_counts() {
    let t0 = Instant::now();

    let dgp_n = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Normal).unwrap();
    let mut coverage = study_spec(StudyKind::Coverage, dgp_n, vec![40, 60], 200, 0.5, 0xC11);
    coverage.contrast = vec![1.0];
    coverage.order = Some(SparsityOrder::Oracle);

    let dgp_u = DgpSpec::new(vec![0.0], vec![1.0], ErrorDist::Uniform).unwrap();
    let mut coupling = study_spec(StudyKind::CouplingRate, dgp_u, vec![64, 128], 2000, 0.5, 0xC11B);
    coupling.grid = Some(CouplingGridSpec {
        epsilon: 0.1,
        level: 3,
        b_exponent: 0.9,
    });
    coupling.k_neighbors = Some(50);

    for spec in [&coverage, &coupling] {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let out = pool.install(|| run_study(spec)).unwrap();
            serde_json::to_vec(&out).unwrap()
        };
        let once = run(1);
        let again = run(1);
        let wide = run(2);
        assert_eq!(once, again, "rerun must reproduce identical bytes");
        assert_eq!(once, wide, "worker count must not change the bytes");
        println!(
            "c11: {:?} study stable across rerun and 1→2 workers ({} bytes)",
            spec.kind,
            once.len()
        );
    }
    println!("c11: finished in {:.1}s", t0.elapsed().as_secs_f64());
}
