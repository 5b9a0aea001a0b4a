//! `kubebench`: list, run and report benchmark suites, or serve a simulated
//! Kubernetes API for local experiments.
//!
//! Exit codes: 0 all instances passed, 1 at least one test failed,
//! 2 infrastructure error, 64 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kubebench_core::config::{load_site_config, SystemSelector};
use kubebench_core::k8s::kubeconfig::KUBECONFIG_ENV;
use kubebench_core::k8s::{EndpointSource, K8sBackend, K8sOptions};
use kubebench_core::perf::{read_csv, render_table, write_csv};
use kubebench_core::sched::local::LocalBackend;
use kubebench_core::sched::{Clock, ManualClock, ScaledClock, SystemClock, DEFAULT_POLL_INTERVAL};
use kubebench_core::sim::{start_sim_at, Scenario, SimServer};
use kubebench_core::testkit::{instantiate, load_suite, perf_report_rows, run_suite, InstanceOutcome, RunOptions};
use kubebench_core::{BackendRegistry, TestInstance, TestStatus};

const EXIT_TEST_FAILURE: u8 = 1;
const EXIT_INFRASTRUCTURE: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// File name of the perf report written under the output root.
const PERF_REPORT_FILE: &str = "perf_report.csv";

#[derive(Debug, Parser)]
#[command(name = "kubebench", version, about = "Run benchmark and regression suites on HPC and Kubernetes systems")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand and run a suite.
    Run(RunArgs),
    /// Print the instances a suite expands to.
    List(SuiteArgs),
    /// Render a perf report CSV as a table.
    Report {
        /// Report written by `run`.
        csv: PathBuf,
    },
    /// Serve a simulated API server for a scenario until interrupted.
    Sim(SimArgs),
}

#[derive(Debug, Args)]
struct SuiteArgs {
    /// Site configuration (systems, partitions, environments).
    #[arg(long, short = 'C')]
    config: PathBuf,
    /// Test suite file.
    #[arg(long, short = 'c')]
    suite: PathBuf,
    /// Restrict to `system`, `system:partition` or `*:partition`.
    #[arg(long, default_value = "*")]
    system: String,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Namespace for tests that do not set their own.
    #[arg(long)]
    namespace: Option<String>,
    /// Kubeconfig context for tests that do not set their own.
    #[arg(long)]
    context: Option<String>,
    /// Instances run at the same time.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    concurrency: u32,
    #[arg(long, default_value = "output")]
    output_root: PathBuf,
    /// Time limit in seconds applied to every test, replacing its own.
    #[arg(long)]
    timeout: Option<f64>,
    /// Print instances and their manifests without submitting anything.
    #[arg(long)]
    dry_run: bool,
    /// Run against an in-process simulator driven by this scenario.
    #[arg(long, value_name = "SCENARIO")]
    sim: Option<PathBuf>,
    /// Simulated seconds per real second.
    #[arg(long, default_value_t = 1.0, requires = "sim")]
    sim_speedup: f64,
    /// Simulator clock. `manual` only moves when a waiter sleeps, which makes
    /// runs reproducible.
    #[arg(long, value_enum, default_value_t = SimClock::Scaled, requires = "sim")]
    sim_clock: SimClock,
    /// Seconds between status polls of running workloads.
    #[arg(long)]
    poll_interval: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimClock {
    Scaled,
    Manual,
}

#[derive(Debug, Args)]
struct SimArgs {
    scenario: PathBuf,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value_t = 1.0)]
    speedup: f64,
    /// Also write a kubeconfig pointing at the simulator.
    #[arg(long, value_name = "PATH")]
    kubeconfig_out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infrastructure(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Infrastructure(_) => EXIT_INFRASTRUCTURE,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::List(args) => cmd_list(args),
        Command::Report { csv } => cmd_report(&csv),
        Command::Sim(args) => cmd_sim(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_instances(args: &SuiteArgs) -> Result<Vec<TestInstance>, CliError> {
    let selector: SystemSelector = args.system.parse().map_err(CliError::usage)?;
    let cfg = load_site_config(&args.config).map_err(CliError::usage)?;
    let specs = load_suite(&args.suite).map_err(CliError::usage)?;
    instantiate(&specs, &cfg, &selector).map_err(CliError::usage)
}

fn count(n: usize) -> String {
    format!("{n} test{}", if n == 1 { "" } else { "s" })
}

fn cmd_list(args: SuiteArgs) -> Result<u8, CliError> {
    let instances = load_instances(&args)?;
    for inst in &instances {
        println!("{inst}");
    }
    println!("{}", count(instances.len()));
    Ok(0)
}

fn cmd_report(path: &Path) -> Result<u8, CliError> {
    let rows = read_csv(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    print!("{}", render_table(&rows));
    Ok(0)
}

/// A DNS-1123 label, as Kubernetes requires for namespace names.
fn valid_namespace(ns: &str) -> bool {
    let bytes = ns.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 63
        && bytes.iter().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'-')
        && bytes[0] != b'-'
        && bytes[bytes.len() - 1] != b'-'
}

fn seconds(flag: &str, v: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| CliError::Usage(format!("--{flag} must be a positive number of seconds, got {v}")))
}

fn validate_run(args: &RunArgs) -> Result<(), CliError> {
    if let Some(ns) = &args.namespace {
        if !valid_namespace(ns) {
            return Err(CliError::Usage(format!("--namespace `{ns}` is not a valid namespace name")));
        }
    }
    if args.context.as_deref() == Some("") {
        return Err(CliError::Usage("--context must not be empty".into()));
    }
    if let Some(t) = args.timeout {
        seconds("timeout", t)?;
    }
    if let Some(p) = args.poll_interval {
        seconds("poll-interval", p)?;
    }
    if !(args.sim_speedup.is_finite() && args.sim_speedup > 0.0) {
        return Err(CliError::Usage(format!("--sim-speedup must be positive, got {}", args.sim_speedup)));
    }
    Ok(())
}

fn print_dry_run(instances: &[TestInstance]) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    for inst in instances {
        let manifest = serde_yaml::to_string(&inst.manifest).map_err(|e| CliError::Infrastructure(e.to_string()))?;
        let _ = writeln!(out, "# {inst}\n---\n{}", manifest.trim_end());
    }
    let _ = writeln!(out, "{} (dry run, nothing submitted)", count(instances.len()));
    Ok(())
}

fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    Scenario::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_run(args: RunArgs) -> Result<u8, CliError> {
    validate_run(&args)?;
    let instances = load_instances(&args.suite)?;
    if args.dry_run {
        print_dry_run(&instances)?;
        return Ok(0);
    }

    let k8s = K8sOptions {
        poll_interval: args.poll_interval.map_or(DEFAULT_POLL_INTERVAL, Duration::from_secs_f64),
        ..K8sOptions::default()
    };
    let mut sim: Option<SimServer> = None;
    let backend = match &args.sim {
        Some(path) => {
            let scenario = load_scenario(path)?;
            let clock: Arc<dyn Clock> = match args.sim_clock {
                SimClock::Scaled => Arc::new(ScaledClock::new(args.sim_speedup)),
                SimClock::Manual => Arc::new(ManualClock::new()),
            };
            let server = start_sim_at(scenario, clock.clone(), "127.0.0.1:0")
                .map_err(|e| CliError::Infrastructure(e.to_string()))?;
            log::info!("simulator listening on {}", server.url());
            let backend = K8sBackend::with_clock(EndpointSource::Fixed(server.endpoint()), clock, k8s);
            sim = Some(server);
            backend
        }
        None => {
            let source = EndpointSource::Kubeconfig(std::env::var(KUBECONFIG_ENV).ok());
            K8sBackend::with_clock(source, Arc::new(SystemClock::new()), k8s)
        }
    };
    let mut registry = BackendRegistry::new();
    registry.register(Arc::new(backend)).map_err(|e| CliError::Infrastructure(e.to_string()))?;
    registry.register(Arc::new(LocalBackend::new())).map_err(|e| CliError::Infrastructure(e.to_string()))?;

    let mut options = RunOptions::new(&args.output_root);
    options.concurrency = args.concurrency as usize;
    options.placement.namespace = args.namespace.clone();
    options.placement.context = args.context.clone();
    options.time_limit = args.timeout.map(Duration::from_secs_f64);
    let cancel = options.cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupted, cancelling running tests");
        cancel.raise();
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }

    std::fs::create_dir_all(&args.output_root)
        .map_err(|e| CliError::Infrastructure(format!("{}: {e}", args.output_root.display())))?;
    println!("running {} on {}", count(instances.len()), sim.as_ref().map_or("the configured clusters".into(), |s| s.url()));
    let outcomes = run_suite(&instances, &registry, &options);
    drop(sim);

    print_outcomes(&outcomes);
    let rows = perf_report_rows(&outcomes);
    let report = args.output_root.join(PERF_REPORT_FILE);
    write_csv(&report, &rows).map_err(|e| CliError::Infrastructure(format!("{}: {e}", report.display())))?;
    if !rows.is_empty() {
        print!("\n{}", render_table(&rows));
    }
    println!("perf report: {}", report.display());
    Ok(exit_code(&outcomes))
}

fn print_outcomes(outcomes: &[InstanceOutcome]) {
    for o in outcomes {
        match o {
            Ok(r) => {
                let mut line = format!("[{:^11}] {} @{}", r.status.as_str(), r.instance, r.target);
                if let Some(id) = &r.run_id {
                    line.push_str(&format!(" (rfm={id})"));
                }
                if let Some(pattern) = &r.sanity {
                    line.push_str(&format!(": sanity pattern `{pattern}` not found"));
                }
                if let Some(msg) = &r.message {
                    line.push_str(&format!(": {msg}"));
                }
                println!("{line}");
            }
            Err(e) => println!("[{:^11}] {e}", "ERROR"),
        }
    }
    let passed = outcomes.iter().filter(|o| matches!(o, Ok(r) if r.status == TestStatus::Pass)).count();
    println!("{passed}/{} passed", outcomes.len());
}

/// 2 if any instance hit an infrastructure error, else 1 if any failed.
fn exit_code(outcomes: &[InstanceOutcome]) -> u8 {
    if outcomes.iter().any(|o| o.is_err()) {
        EXIT_INFRASTRUCTURE
    } else if outcomes.iter().any(|o| matches!(o, Ok(r) if r.status != TestStatus::Pass)) {
        EXIT_TEST_FAILURE
    } else {
        0
    }
}

fn kubeconfig_text(server: &SimServer) -> String {
    let ep = server.endpoint();
    let user = ep.token.map_or_else(|| "  - name: sim\n    user: {}\n".to_string(), |t| {
        format!("  - name: sim\n    user:\n      token: {t}\n")
    });
    format!(
        "apiVersion: v1\nkind: Config\ncurrent-context: sim\nclusters:\n  - name: sim\n    cluster:\n      server: {}\n      insecure-skip-tls-verify: true\ncontexts:\n  - name: sim\n    context:\n      cluster: sim\n      user: sim\nusers:\n{user}",
        server.url()
    )
}

fn cmd_sim(args: SimArgs) -> Result<u8, CliError> {
    if !(args.speedup.is_finite() && args.speedup > 0.0) {
        return Err(CliError::Usage(format!("--speedup must be positive, got {}", args.speedup)));
    }
    let scenario = load_scenario(&args.scenario)?;
    let server = start_sim_at(scenario, Arc::new(ScaledClock::new(args.speedup)), &args.listen)
        .map_err(|e| CliError::Infrastructure(e.to_string()))?;
    if let Some(path) = &args.kubeconfig_out {
        std::fs::write(path, kubeconfig_text(&server))
            .map_err(|e| CliError::Infrastructure(format!("{}: {e}", path.display())))?;
    }
    let (tx, rx) = std::sync::mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    // Whoever launched us may stop reading stdout once it has the endpoint.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "endpoint: {}", server.url());
    if let Some(path) = &args.kubeconfig_out {
        let _ = writeln!(out, "kubeconfig: {}", path.display());
    }
    let _ = out.flush();
    drop(out);
    let _ = rx.recv();
    eprintln!("stopping simulator after {} requests", server.request_count());
    Ok(0)
}
