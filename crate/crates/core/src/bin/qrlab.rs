//! Command-line front end for the quantile-regression laboratory.
//!
//! One binary with subcommands; every option is validated before any
//! computation starts. Exit codes: 0 success, 1 usage error, 2 computation
//! error. Data goes to standard output (or the requested files); every
//! diagnostic goes to standard error. Output is compact JSON by default;
//! `--pretty` switches to a human-readable summary. Commands that consume
//! randomness accept `--seed`; when it is omitted a seed is drawn from OS
//! entropy and printed so the run can be reproduced.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use qrlab_core::coupling::{coupling_rate_study, CouplingRateStudy};
use qrlab_core::density::{
    binomial_interval_ratio, density_ratio_profile, DeltaWindow, DensityProfile,
};
use qrlab_core::design::{design_diagnostics, load_dataset, Dataset, DgpSpec};
use qrlab_core::error::{QrError, Result};
use qrlab_core::inference::{confidence_interval, BandwidthRule, SparsityOrder, SparsitySource};
use qrlab_core::report::{persist_report, write_csv_table};
use qrlab_core::rng::{derive_seed, domain};
use qrlab_core::solver::{fit_process, fit_rq};
use qrlab_core::studies::{run_study, StudyOutput, StudySpec};

#[derive(Parser)]
#[command(
    name = "qrlab",
    version,
    about = "Quantile-regression inference laboratory",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, value_parser = parse_threads)]
    threads: Option<usize>,
    /// Human-readable summary instead of machine-readable JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one regression quantile and print the vertex solution.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Quantile level, strictly between 0 and 1.
        #[arg(long, value_parser = parse_unit_open)]
        tau: f64,
    },
    /// Fit a whole grid of quantile levels with warm starts.
    Process {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated strictly increasing quantile levels.
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_unit_open)]
        taus: Vec<f64>,
    },
    /// Confidence interval for a contrast a'beta(tau).
    Ci {
        #[command(flatten)]
        data: DataArgs,
        /// Quantile level, strictly between 0 and 1.
        #[arg(long, value_parser = parse_unit_open)]
        tau: f64,
        /// Tail mass per side; the interval has nominal coverage 1 - 2*alpha.
        #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
        alpha: f64,
        /// Difference-quotient order for the sparsity estimate (1 or 2).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        order: u8,
        /// Bandwidth constant for the log-scaled rule c*sqrt(log n)*n^(-1/3).
        #[arg(long, conflicts_with = "h")]
        c: Option<f64>,
        /// Fixed bandwidth, overriding the log-scaled rule.
        #[arg(long, value_parser = parse_positive)]
        h: Option<f64>,
        /// Comma-separated contrast vector (default: first coefficient).
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<f64>>,
    },
    /// Exact-vs-normal density ratio profiles for a simulated intercept model.
    Density {
        /// TOML file describing the data-generating process.
        #[arg(long)]
        dgp: PathBuf,
        /// Quantile level, strictly between 0 and 1.
        #[arg(long, value_parser = parse_unit_open)]
        tau: f64,
        /// Comma-separated strictly increasing sample sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
        /// Fixed half-width of the delta window.
        #[arg(long, conflicts_with = "log_width", value_parser = parse_positive)]
        half_width: Option<f64>,
        /// Log-scaled half-width d*sqrt(log n).
        #[arg(long, value_parser = parse_positive)]
        log_width: Option<f64>,
        /// Number of grid points across the window.
        #[arg(long, default_value_t = 21, value_parser = clap::value_parser!(usize))]
        points: usize,
    },
    /// Exact binomial interval probability vs its normal approximation.
    Lattice {
        /// Number of trials.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
        n: usize,
        /// Success probability, strictly between 0 and 1.
        #[arg(long, value_parser = parse_unit_open)]
        prob: f64,
        /// Lower endpoint of the count interval J (before the shift).
        #[arg(long, allow_hyphen_values = true)]
        lo: i64,
        /// Upper endpoint of the count interval J (before the shift).
        #[arg(long, allow_hyphen_values = true)]
        hi: i64,
        /// Shift w applied to both endpoints.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        shift: i64,
    },
    /// Couple simulated process draws to their Gaussian limit across sizes.
    Coupling {
        /// TOML file describing the data-generating process.
        #[arg(long)]
        dgp: PathBuf,
        /// Comma-separated strictly increasing sample sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
        /// Replications per sample size.
        #[arg(long)]
        reps: usize,
        /// Grid boundary trim: levels in [epsilon, 1 - epsilon].
        #[arg(long, default_value_t = 0.1, value_parser = parse_epsilon)]
        epsilon: f64,
        /// Dyadic refinement level (grid at multiples of 1/2^level).
        #[arg(long, default_value_t = 3)]
        level: u32,
        /// Budget exponent b: requires 2^level < n^b.
        #[arg(long, default_value_t = 0.9, value_parser = parse_positive)]
        b_exponent: f64,
        /// Nearest-neighbor count for conditional ranks.
        #[arg(long, default_value_t = 200)]
        k_neighbors: usize,
        /// RNG seed (omit to draw one from OS entropy; the choice is printed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a study described by a TOML config file.
    Study {
        /// Study spec (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Write the versioned report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a flat delimited table of the per-size results.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Override the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Design diagnostics: row norms, moment-matrix spectrum, general position.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        /// Random p-subsets to test when exhaustive enumeration is infeasible.
        #[arg(long, default_value_t = 10_000)]
        subset_samples: usize,
        /// RNG seed (omit to draw one from OS entropy; the choice is printed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Shared flags for subcommands that read a delimited data file.
#[derive(Args)]
struct DataArgs {
    /// Input file: comma-separated, header row, numeric columns.
    #[arg(long)]
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    y: String,
    /// Comma-separated covariate column names (may be empty).
    #[arg(long, value_delimiter = ',', default_value = "")]
    x: Vec<String>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let cols: Vec<String> = self
            .x
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect();
        load_dataset(
            &self.data.display().to_string(),
            &self.y,
            &cols,
            !self.no_intercept,
        )
    }
}

fn parse_unit_open(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 0.5 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 0.5, got {v}"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive finite number, got {v}"))
    }
}

fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 0.5 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 0.5, got {v}"))
    }
}

fn parse_threads(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    // clap renders help/version via Display.
                    print!("{err}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{err}");
                    ExitCode::from(1)
                }
            };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command, cli.pretty) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Resolve an optional seed, drawing and announcing one when absent.
fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s = derive_seed(rand::random::<u64>(), domain::CLI_ENTROPY, 0);
            eprintln!("no --seed given; using seed {s} (pass --seed {s} to reproduce)");
            s
        }
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string(value)
        .map_err(|e| QrError::invalid(format!("serialization failed: {e}")))?;
    println!("{text}");
    Ok(())
}

fn load_dgp(path: &Path) -> Result<DgpSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| QrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dgp: DgpSpec = toml::from_str(&text).map_err(|e| QrError::Parse {
        path: path.display().to_string(),
        row: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    dgp.validate()?;
    Ok(dgp)
}

fn run(command: Command, pretty: bool) -> Result<()> {
    match command {
        Command::Fit { data, tau } => {
            let dataset = data.load()?;
            let fit = fit_rq(&dataset, tau, None)?;
            if pretty {
                println!("tau = {}", fit.tau);
                for (j, b) in fit.beta_hat.iter().enumerate() {
                    println!("beta[{j}] = {b:.10}");
                }
                println!("objective = {:.10}", fit.objective);
                println!("basis rows = {:?}", fit.basis);
                println!("pivots = {}", fit.pivot_count);
                println!("degenerate = {}", fit.degenerate);
            } else {
                emit(&fit)?;
            }
            Ok(())
        }
        Command::Process { data, taus } => {
            let dataset = data.load()?;
            let proc = fit_process(&dataset, &taus, None)?;
            if pretty {
                for fit in &proc.fits {
                    let coefs: Vec<String> =
                        fit.beta_hat.iter().map(|b| format!("{b:.8}")).collect();
                    println!("tau={:<8} beta=[{}]", fit.tau, coefs.join(", "));
                }
            } else {
                emit(&proc)?;
            }
            Ok(())
        }
        Command::Ci {
            data,
            tau,
            alpha,
            order,
            c,
            h,
            a,
        } => {
            let dataset = data.load()?;
            let p = dataset.p();
            let contrast = match a {
                Some(values) => {
                    if values.len() != p {
                        return Err(QrError::invalid(format!(
                            "--a has {} entries but the design has {} columns",
                            values.len(),
                            p
                        )));
                    }
                    DVector::from_vec(values)
                }
                None => {
                    let mut e1 = DVector::zeros(p);
                    e1[0] = 1.0;
                    e1
                }
            };
            let rule = match h {
                Some(width) => BandwidthRule::Fixed(width),
                None => BandwidthRule::HallSheather { c },
            };
            let source = SparsitySource::DiffQuotient {
                order: if order == 2 {
                    SparsityOrder::Second
                } else {
                    SparsityOrder::First
                },
                rule,
            };
            let ci = confidence_interval(&dataset, tau, &contrast, alpha, &source)?;
            if pretty {
                println!(
                    "a'beta({}) = {:.8}  [{:.8}, {:.8}]  nominal {:.1}%",
                    ci.tau,
                    ci.point,
                    ci.lo,
                    ci.hi,
                    100.0 * (1.0 - 2.0 * ci.alpha)
                );
                println!("se = {:.8}", ci.se);
                if let Some(bw) = ci.bandwidth_used {
                    println!("bandwidth = {bw:.8}");
                }
            } else {
                emit(&ci)?;
            }
            Ok(())
        }
        Command::Density {
            dgp,
            tau,
            n_list,
            half_width,
            log_width,
            points,
        } => {
            let spec = load_dgp(&dgp)?;
            let window = match (half_width, log_width) {
                (Some(hw), _) => DeltaWindow::Fixed { half_width: hw },
                (None, Some(d)) => DeltaWindow::LogScaled { d },
                (None, None) => DeltaWindow::default(),
            };
            let profiles = density_ratio_profile(&spec, &n_list, tau, &window, points)?;
            if pretty {
                print_profiles(&profiles);
            } else {
                emit(&profiles)?;
            }
            Ok(())
        }
        Command::Lattice {
            n,
            prob,
            lo,
            hi,
            shift,
        } => {
            let ratio = binomial_interval_ratio(n, prob, lo, hi, shift)?;
            if pretty {
                println!(
                    "P{{W in [{}, {}]}} exact = {:.10}, normal = {:.10}, rel err = {:+.6e}",
                    ratio.lo, ratio.hi, ratio.exact, ratio.normal, ratio.rel_err
                );
            } else {
                emit(&ratio)?;
            }
            Ok(())
        }
        Command::Coupling {
            dgp,
            n_list,
            reps,
            epsilon,
            level,
            b_exponent,
            k_neighbors,
            seed,
        } => {
            let spec = load_dgp(&dgp)?;
            let seed = resolve_seed(seed);
            let study = coupling_rate_study(
                &spec, &n_list, epsilon, level, b_exponent, reps, k_neighbors, seed,
            )?;
            if pretty {
                print_coupling(&study);
            } else {
                emit(&study)?;
            }
            Ok(())
        }
        Command::Study {
            config,
            out,
            table,
            seed,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|source| QrError::Io {
                path: config.display().to_string(),
                source,
            })?;
            let mut spec: StudySpec = toml::from_str(&text).map_err(|e| QrError::Parse {
                path: config.display().to_string(),
                row: 0,
                column: String::new(),
                message: e.to_string(),
            })?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let output = run_study(&spec)?;
            if let Some(path) = &table {
                write_study_table(path, &output)?;
                eprintln!("table written to {}", path.display());
            }
            match &out {
                Some(path) => {
                    persist_report(&output, path)?;
                    eprintln!("report written to {}", path.display());
                }
                None => {
                    if pretty {
                        print_study(&output);
                    } else {
                        emit(&output)?;
                    }
                }
            }
            Ok(())
        }
        Command::Diagnose {
            data,
            subset_samples,
            seed,
        } => {
            let dataset = data.load()?;
            let seed = resolve_seed(seed);
            let report = design_diagnostics(&dataset, subset_samples, seed);
            if pretty {
                println!("n = {}, p = {}", dataset.n(), dataset.p());
                println!("max row norm = {:.8}", report.max_row_norm);
                println!(
                    "moment matrix eigenvalues in [{:.8}, {:.8}]",
                    report.eig_min_h, report.eig_max_h
                );
                println!("general position ok = {}", report.general_position_ok);
            } else {
                emit(&report)?;
            }
            Ok(())
        }
    }
}

fn print_profiles(profiles: &[DensityProfile]) {
    for prof in profiles {
        println!(
            "n={:<6} tau={:<6} sup|ratio-1| = {:.8}",
            prof.n, prof.tau, prof.sup_abs_ratio
        );
    }
}

fn print_coupling(study: &CouplingRateStudy) {
    for row in &study.per_n {
        println!(
            "n={:<6} sup err = {:.6}  ks = {:.6}  energy = {:.6}  failures = {}",
            row.n, row.median_sup_error, row.ks_median, row.energy_distance, row.failures
        );
    }
    if let Some(rate) = &study.rate {
        println!(
            "rate: exponent = {:.4} (se {:.4}, r2 {:.4})",
            rate.exponent, rate.stderr, rate.r_squared
        );
    }
}

fn print_study(output: &StudyOutput) {
    match output {
        StudyOutput::Coverage(rep) => {
            println!(
                "coverage study: tau = {}, nominal = {:.4}",
                rep.tau, rep.nominal
            );
            for row in &rep.per_n {
                println!(
                    "n={:<6} coverage = {:.4} (mc se {:.4})  width = {:.6}  clamp = {:.4}  failures = {}",
                    row.n, row.coverage, row.mc_se, row.mean_width, row.clamp_rate, row.failures
                );
            }
        }
        StudyOutput::DensityRate(rep) => {
            println!("density ratio study: tau = {}", rep.tau);
            print_profiles(&rep.profiles);
            if let Some(rate) = &rep.rate {
                println!(
                    "rate: exponent = {:.4} (se {:.4}, r2 {:.4})",
                    rate.exponent, rate.stderr, rate.r_squared
                );
            }
        }
        StudyOutput::LatticeRate(rep) => {
            println!("lattice ratio study: prob = {}", rep.prob);
            for row in &rep.per_n {
                println!(
                    "n={:<6} [{}, {}] exact = {:.8}  rel err = {:+.6e}",
                    row.n, row.lo, row.hi, row.exact, row.rel_err
                );
            }
            println!(
                "rate: exponent = {:.4} (se {:.4}, r2 {:.4})",
                rep.rate.exponent, rep.rate.stderr, rep.rate.r_squared
            );
        }
        StudyOutput::CouplingRate(rep) => {
            println!("coupling study:");
            print_coupling(rep);
        }
    }
}

fn write_study_table(path: &Path, output: &StudyOutput) -> Result<()> {
    let fmt = |v: f64| format!("{v:.12e}");
    match output {
        StudyOutput::Coverage(rep) => {
            let rows: Vec<Vec<String>> = rep
                .per_n
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        r.used.to_string(),
                        r.failures.to_string(),
                        fmt(r.coverage),
                        fmt(r.mc_se),
                        fmt(r.mean_width),
                        fmt(r.clamp_rate),
                    ]
                })
                .collect();
            write_csv_table(
                path,
                &[
                    "n",
                    "used",
                    "failures",
                    "coverage",
                    "mc_se",
                    "mean_width",
                    "clamp_rate",
                ],
                &rows,
            )
        }
        StudyOutput::DensityRate(rep) => {
            let mut rows = Vec::new();
            for prof in &rep.profiles {
                for (k, delta) in prof.delta_grid.iter().enumerate() {
                    rows.push(vec![
                        prof.n.to_string(),
                        fmt(prof.tau),
                        fmt(*delta),
                        fmt(prof.f_exact[k]),
                        fmt(prof.f_normal[k]),
                        fmt(prof.ratio_minus_1[k]),
                    ]);
                }
            }
            write_csv_table(
                path,
                &["n", "tau", "delta", "f_exact", "f_normal", "ratio_minus_1"],
                &rows,
            )
        }
        StudyOutput::LatticeRate(rep) => {
            let rows: Vec<Vec<String>> = rep
                .per_n
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        fmt(r.prob),
                        r.lo.to_string(),
                        r.hi.to_string(),
                        fmt(r.exact),
                        fmt(r.normal),
                        fmt(r.rel_err),
                    ]
                })
                .collect();
            write_csv_table(
                path,
                &["n", "prob", "lo", "hi", "exact", "normal", "rel_err"],
                &rows,
            )
        }
        StudyOutput::CouplingRate(rep) => {
            let rows: Vec<Vec<String>> = rep
                .per_n
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        fmt(r.median_sup_error),
                        fmt(r.ks_median),
                        fmt(r.energy_distance),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            write_csv_table(
                path,
                &[
                    "n",
                    "median_sup_error",
                    "ks_median",
                    "energy_distance",
                    "failures",
                ],
                &rows,
            )
        }
    }
}
