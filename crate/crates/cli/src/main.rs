//! `randref` command-line front end.
//!
//! Exit codes: 0 ok, 2 usage, 3 parse, 4 configuration, 5 infeasible or
//! underpowered design, 6 iteration budget exhausted.

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use randref::detector::write_baseline_tsv;
use randref::gene_test::{rejection_threshold, statistic_bounds, StatisticBoundInputs, TestParams};
use randref::randomization_math::{delta_cap, min_randomizations, pi0, pi1, rate_bounds};
use randref::scaling::scaling_deviation_bound;
use randref::simulator::phi_thresholds;
use randref::{
    analyze, load_counts, load_groups, run_null_experiment, run_power_experiment, BaselineMethod, Error,
    Execution, ExperimentConfig, RunConfig, SubsetStrategy,
};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_INFEASIBLE: u8 = 5;
const EXIT_TRUNCATED: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "randref", version, about = "Normalization-free differential expression over random reference subsets")]
struct Cli {
    /// Worker threads; 1 runs sequentially. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect differentially expressed genes in a count table.
    Analyze(AnalyzeArgs),
    /// Print the design quantities and bounds for a parameter set.
    Bounds(BoundsArgs),
    /// Run the global-null or power simulation.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Tsv,
    Json,
    Both,
}

impl Format {
    fn tsv(self) -> bool {
        self != Format::Json
    }

    fn json(self) -> bool {
        self != Format::Tsv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Null,
    Power,
}

/// Detector settings shared by `analyze` and `simulate`. Unset flags keep
/// the value from `--config`, or the default.
#[derive(Args, Debug, Default)]
struct DetectorArgs {
    /// Reference subset size.
    #[arg(long)]
    k: Option<usize>,
    /// Randomizations per iteration [default: max(2500, minimum for the design)].
    #[arg(long)]
    r: Option<u64>,
    /// Per-test level.
    #[arg(long)]
    eta: Option<f64>,
    /// Family-wise error target.
    #[arg(long)]
    alpha: Option<f64>,
    /// Type-II budget.
    #[arg(long)]
    beta: Option<f64>,
    /// Quantile inflation constant.
    #[arg(long)]
    c: Option<f64>,
    /// Deviation exponent of the generic randomization bound.
    #[arg(long)]
    xi: Option<f64>,
    /// Master seed; required unless `--config` supplies one.
    #[arg(long)]
    seed: Option<u64>,
    /// Drop genes with fewer total reads.
    #[arg(long = "min-total")]
    min_total: Option<u64>,
    /// fixed | min-intensity:MU0 | grow:M0
    #[arg(long)]
    strategy: Option<SubsetStrategy>,
    /// Iteration budget.
    #[arg(long = "max-iterations")]
    max_iterations: Option<usize>,
    /// JSON config, or a previous report whose `config` echo is reused.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Gene-by-sample count table (TSV, header row of sample ids).
    #[arg(long)]
    counts: PathBuf,
    /// Two-column sample/group table.
    #[arg(long)]
    groups: PathBuf,
    /// none | totalcount | uq[:Q] | tmm[:M:A]
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    /// Also write per-gene statistic moments.
    #[arg(long = "dump-stats")]
    dump_stats: bool,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, default_value_t = 500)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// [default: max(2500, minimum for the design)]
    #[arg(long)]
    r: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.10)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    c: f64,
    #[arg(long, default_value_t = 0.25)]
    xi: f64,
    /// Sample size of the group A.
    #[arg(long = "n-a", default_value_t = 6)]
    n_a: usize,
    #[arg(long = "n-b", default_value_t = 6)]
    n_b: usize,
    /// Invariant-gene intensity; adds the detectability thresholds.
    #[arg(long)]
    mu0: Option<f64>,
    /// Total intensity of the reference subset; adds the statistic bounds.
    #[arg(long = "sum-mu")]
    sum_mu: Option<f64>,
    #[arg(long = "rho-bar", default_value_t = 0.0)]
    rho_bar: f64,
    #[arg(long = "s-max", default_value_t = 1.0)]
    s_max: f64,
    /// Intensities of the tested gene [default: mu0, else 100].
    #[arg(long = "mu-a")]
    mu_a: Option<f64>,
    #[arg(long = "mu-b")]
    mu_b: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// Fold parameter of the power experiment, `fold_j = 1 + a / sqrt(j)`.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    mu0: Option<f64>,
    /// Number of DE genes in the power experiment.
    #[arg(long)]
    m1: Option<usize>,
    /// Negative binomial shape; Poisson when absent.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "n-a")]
    n_a: Option<usize>,
    #[arg(long = "n-b")]
    n_b: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    #[command(flatten)]
    detector: DetectorArgs,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } => EXIT_PARSE,
            Error::Underpowered { .. }
            | Error::Infeasible(_)
            | Error::DegenerateSubset { .. }
            | Error::TooManyDegenerateDraws { .. } => EXIT_INFEASIBLE,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

/// Accept a bare config object or any output carrying it under `config`.
fn config_section(value: serde_json::Value) -> serde_json::Value {
    match value {
        serde_json::Value::Object(mut map) if map.contains_key("config") => map.remove("config").unwrap_or_default(),
        other => other,
    }
}

impl DetectorArgs {
    fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(k => k, eta => eta, alpha => alpha, beta => beta, c => c, xi => xi, seed => seed,
             min_total => filter_min_total, strategy => strategy, max_iterations => max_iterations);
        if self.r.is_some() {
            cfg.r = self.r;
        }
        cfg
    }

    fn run_config(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(path) => {
                let value = config_section(read_json(path)?);
                // simulation outputs nest the detector settings one level deeper
                let value = match value {
                    serde_json::Value::Object(mut map) if map.contains_key("detector") => {
                        map.remove("detector").unwrap_or_default()
                    }
                    other => other,
                };
                serde_json::from_value(value).map_err(|e| config_error(format!("{}: {e}", path.display())))?
            }
            None => {
                let Some(seed) = self.seed else {
                    Cli::command()
                        .error(clap::error::ErrorKind::MissingRequiredArgument, "--seed is required (or --config)")
                        .exit();
                };
                RunConfig::with_seed(seed)
            }
        };
        Ok(self.apply(base))
    }
}

fn parse_baseline(text: &str) -> CliResult<Option<BaselineMethod>> {
    if text == "none" {
        return Ok(None);
    }
    text.parse().map(Some).map_err(Failure::from)
}

fn execution(threads: Option<usize>) -> Execution {
    match threads {
        Some(1) => Execution::Sequential,
        _ if cfg!(feature = "parallel") => Execution::Parallel,
        Some(t) => {
            warn!("built without the parallel feature, ignoring --threads {t}");
            Execution::Sequential
        }
        None => Execution::Sequential,
    }
}

/// Run `f` on a pool of `threads` workers when requested.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads.filter(|&t| t > 1) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| config_error(format!("cannot start {t} threads: {e}")))?;
        return Ok(pool.install(f));
    }
    let _ = threads;
    Ok(f())
}

/// Write every file through a temporary in `dir`, renamed into place.
fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| config_error(format!("cannot create {}: {e}", dir.display())))?;
    for (name, bytes) in files {
        let target = dir.join(name);
        let io_fail = |e: std::io::Error| Failure {
            code: EXIT_CONFIG,
            message: format!("cannot write {}: {e}", target.display()),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_fail)?;
        tmp.write_all(bytes).map_err(io_fail)?;
        tmp.as_file().sync_all().map_err(io_fail)?;
        tmp.persist(&target).map_err(|e| io_fail(e.error))?;
        info!("wrote {}", target.display());
    }
    Ok(())
}

fn render(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory");
    buf
}

fn cmd_analyze(args: &AnalyzeArgs, threads: Option<usize>) -> CliResult<u8> {
    let mut cfg = args.detector.run_config()?;
    if let Some(text) = &args.baseline {
        cfg.baseline = parse_baseline(text)?;
    }
    let groups = load_groups(&args.groups)?;
    let data = load_counts(&args.counts, &groups)?;
    info!("{} genes, {} samples ({} A, {} B)", data.n_genes(), data.n_samples(), data.n_a(), data.n_b());
    let exec = execution(threads);
    let analysis = with_threads(threads, || analyze(&data, &cfg, exec))??;
    let report = &analysis.report;

    let mut files = Vec::new();
    if args.format.json() {
        files.push(("report.json".to_owned(), report.to_json().into_bytes()));
        if let Some(b) = &analysis.baseline {
            let mut text = serde_json::to_string_pretty(b).expect("baseline serializes");
            text.push('\n');
            files.push(("baseline.json".to_owned(), text.into_bytes()));
        }
    }
    if args.format.tsv() {
        files.push(("detections.tsv".to_owned(), render(|w| report.write_tsv(w))));
        if let Some(b) = &analysis.baseline {
            files.push(("baseline.tsv".to_owned(), render(|w| write_baseline_tsv(b, report.config.eta, w))));
        }
    }
    if args.dump_stats {
        files.push(("stats.tsv".to_owned(), render(|w| report.write_stats_tsv(w))));
    }
    write_outputs(&args.out_dir, &files)?;
    info!("detected {} genes in {} iterations", report.d_hat, report.iterations.len());
    if report.truncated {
        warn!("stopped at the iteration budget with the cap still reached");
        return Ok(EXIT_TRUNCATED);
    }
    Ok(0)
}

fn cmd_bounds(args: &BoundsArgs) -> CliResult<u8> {
    let cfg = RunConfig {
        k: args.k,
        r: args.r,
        eta: args.eta,
        alpha: args.alpha,
        beta: args.beta,
        c: args.c,
        xi: args.xi,
        ..RunConfig::with_seed(0)
    };
    let params = cfg.resolve(args.m)?.design(args.m)?;
    let delta = delta_cap(&params)?;
    let n = args.n_a + args.n_b;
    let test = TestParams {
        eta: args.eta,
        c: args.c,
        n,
        n_a: args.n_a,
        n_b: args.n_b,
    };
    test.validate()?;
    let at0 = rate_bounds(&params, 0);

    let mut out = String::new();
    let mut row = |key: &str, value: String| writeln!(out, "{key}\t{value}").expect("string write");
    row("quantity", "value".into());
    row("m", params.m.to_string());
    row("k", params.k.to_string());
    row("r", params.r.to_string());
    row("kappa", params.kappa().to_string());
    row("theta0", at0.theta0.to_string());
    row("theta1", at0.theta1.to_string());
    row("delta", delta.to_string());
    row("min_randomizations", min_randomizations(&params, 0)?.required.to_string());
    row("threshold", rejection_threshold(&test).to_string());
    if let Some(mu0) = args.mu0 {
        let (low, up) = phi_thresholds(n, mu0, params.m, params.alpha, params.c);
        row("phi_low", low.to_string());
        row("phi_up", up.to_string());
    }
    if let Some(sum_mu) = args.sum_mu {
        let mu = args.mu0.unwrap_or(100.0);
        let b = statistic_bounds(&StatisticBoundInputs {
            sum_mu_s: sum_mu,
            rho_bar_s: args.rho_bar,
            s_max: args.s_max,
            mu_a: args.mu_a.unwrap_or(mu),
            mu_b: args.mu_b.unwrap_or(mu),
            n,
            n_a: args.n_a,
            n_b: args.n_b,
            c: args.c,
        });
        // (1 + o(1)) factors taken as 1
        row("bounds", "asymptotic".into());
        row("scaling_deviation", scaling_deviation_bound(sum_mu, args.rho_bar, args.s_max, n, args.c).to_string());
        row("ratio_bound", b.ratio_bound.to_string());
        row("r1_bound", b.r1_bound.to_string());
        row("r2_bound", b.r2_bound.to_string());
    }
    out.push('\n');
    out.push_str("d\tpi0\tpi1\ttheta0\ttheta1\tseparated\tmin_randomizations\n");
    for d in 0..=(delta + 1).min(params.m - params.k) {
        let b = rate_bounds(&params, d);
        let min_r = min_randomizations(&params, d).map_or_else(|_| "NA".to_owned(), |x| x.required.to_string());
        writeln!(
            out,
            "{d}\t{}\t{}\t{}\t{}\t{}\t{min_r}",
            pi0(params.m, params.k, d),
            pi1(params.m, params.k, d),
            b.theta0,
            b.theta1,
            b.separated()
        )
        .expect("string write");
    }
    std::io::stdout()
        .write_all(out.as_bytes())
        .map_err(|e| config_error(format!("cannot write to stdout: {e}")))?;
    Ok(0)
}

fn cmd_simulate(args: &SimulateArgs, threads: Option<usize>) -> CliResult<u8> {
    let mut config = match &args.detector.config {
        Some(path) => {
            let value = config_section(read_json(path)?);
            serde_json::from_value::<ExperimentConfig>(value.clone()).or_else(|_| {
                // a bare detector config
                serde_json::from_value::<RunConfig>(value)
                    .map(|d| ExperimentConfig {
                        detector: d.clone(),
                        ..ExperimentConfig::reference(d.seed)
                    })
                    .map_err(|e| config_error(format!("{}: {e}", path.display())))
            })?
        }
        None => ExperimentConfig::reference(args.detector.run_config()?.seed),
    };
    config.detector = args.detector.apply(config.detector);
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                config.$field = v;
            }
        )*};
    }
    set!(replicates, m, mu0, m1, n_a, n_b);
    if args.gamma.is_some() {
        config.gamma = args.gamma;
    }
    if config.m1 > config.m {
        config.m1 = config.m;
    }

    let exec = execution(threads);
    let result = match args.kind {
        Kind::Null => {
            if args.a.is_some() {
                return Err(Failure {
                    code: EXIT_USAGE,
                    message: "--a only applies to `simulate power`".into(),
                });
            }
            with_threads(threads, || run_null_experiment(&config, exec))??
        }
        Kind::Power => {
            let a = args.a.unwrap_or(10.0);
            with_threads(threads, || run_power_experiment(&config, a, exec))??
        }
    };
    info!(
        "{} replicates: FWER {}, average false {}, average true {}",
        result.replicates, result.fwer, result.avg_false, result.avg_true
    );
    let stem = format!("simulate_{}", result.kind);
    let mut files = Vec::new();
    if args.format.json() {
        files.push((format!("{stem}.json"), result.to_json().into_bytes()));
    }
    if args.format.tsv() {
        files.push((format!("{stem}.tsv"), render(|w| result.write_tsv(w))));
    }
    write_outputs(&args.out_dir, &files)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, cli.threads),
        Command::Bounds(b) => cmd_bounds(b),
        Command::Simulate(s) => cmd_simulate(s, cli.threads),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
