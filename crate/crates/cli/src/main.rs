//! Command-line front end: solve a network, analyze a monitored link
//! set, simulate equilibrium flow counts, and compare the sampled counts
//! against the fitted negative binomial law and its error bounds.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jackson_flows::{
    asymptotic_moments, empirical_pmf, link_stats, mc_noise_floor, moments,
    nb_params_from_moments, poisson_pmf, replicate_counts, shift_tv, simulate_window,
    solve_traffic, stationary_queue_dist, tv_distance, validate_network, BoundReport, CountModel,
    CountSamples, InitMode, LinkSet, LinkStats, NbError, NetworkError, RouteError, SimConfig,
    SimError, StatsError, TrafficSolution, ValidatedNetwork,
};
use thiserror::Error;

use config::{load_scenario, read_json, CommonOpts, Scenario, VarianceMode};
use report::{
    build_report, links_csv_rows, queues_csv_rows, report_csv_rows, samples_csv,
    self_check_violations, sweep_csv_rows, write_csv, write_event_log, write_json,
    AnalyzeReport, QueueReport, SampleSource, SolveReport, SweepRow, LINKS_CSV_HEADER,
    QUEUES_CSV_HEADER, SWEEP_CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("network error: {0}")]
    Network(#[from] NetworkError),
    #[error("route analysis error: {0}")]
    Route(#[from] RouteError),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("statistics error: {0}")]
    Stats(#[from] StatsError),
    #[error("count model error: {0}")]
    Nb(#[from] NbError),
    #[error("self-check failed:\n  {}", .0.join("\n  "))]
    SelfCheck(Vec<String>),
}

impl CliError {
    /// 2 = bad invocation or unreadable input, 3 = the model rejected the
    /// scenario, 4 = a sampled estimate escaped its bound.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Network(_)
            | CliError::Route(_)
            | CliError::Sim(_)
            | CliError::Stats(_)
            | CliError::Nb(_) => 3,
            CliError::SelfCheck(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "jackson-flows",
    version,
    about = "Flow-count analysis for open Jackson networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the traffic equations and stationary queue laws.
    Solve(CommonOpts),
    /// Compute exact crossing statistics and approximation bounds.
    Analyze(CommonOpts),
    /// Sample flow counts over the window across replicates.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Write the crossing event log of replicate 0 as CSV.
        #[arg(long, value_name = "PATH")]
        dump_events: Option<PathBuf>,
    },
    /// Fit the count law to samples and check it against the bounds.
    Compare {
        #[command(flatten)]
        common: CommonOpts,
        /// Reuse samples from a previous `simulate` (samples.json).
        #[arg(long, value_name = "PATH")]
        samples: Option<PathBuf>,
        /// Fail (exit 4) when an estimate escapes its bound.
        #[arg(long)]
        self_check: bool,
        /// Extra windows for a bound sweep, comma-separated.
        #[arg(long, value_name = "T1,T2,..")]
        sweep_t: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Solve(common) => cmd_solve(&common),
        Command::Analyze(common) => cmd_analyze(&common),
        Command::Simulate {
            common,
            dump_events,
        } => cmd_simulate(&common, dump_events.as_deref()),
        Command::Compare {
            common,
            samples,
            self_check,
            sweep_t,
        } => cmd_compare(&common, samples.as_deref(), self_check, sweep_t.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

/// Honors JACKSON_FLOWS_THREADS for the global rayon pool. Ignored when
/// unset, unparsable, or when the pool is already built.
#[cfg(feature = "parallel")]
fn configure_threads() {
    if let Ok(value) = std::env::var("JACKSON_FLOWS_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() {}

/// Validates the scenario's network and link set, once, for every
/// subcommand.
fn prepare(scenario: &Scenario) -> Result<(ValidatedNetwork, TrafficSolution, LinkSet), CliError> {
    let net = validate_network(scenario.spec.clone())?;
    let traffic = solve_traffic(&net)?;
    let links = LinkSet::new(scenario.links.iter().copied(), net.queue_count())?;
    links.ensure_positive_flow(&traffic)?;
    Ok((net, traffic, links))
}

fn ensure_out_dir(scenario: &Scenario) -> Result<Option<&Path>, CliError> {
    match &scenario.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.as_path()))
        }
        None => Ok(None),
    }
}

fn sim_config(scenario: &Scenario, track: bool) -> SimConfig {
    SimConfig {
        window: scenario.t,
        replicates: scenario.replicates,
        base_seed: scenario.seed,
        track_customers: track,
        init: InitMode::Stationary,
        max_events: scenario.tolerances.max_events,
    }
}

fn cmd_solve(common: &CommonOpts) -> Result<(), CliError> {
    let scenario = load_scenario(common)?;
    let (net, traffic, links) = prepare(&scenario)?;

    let mut queues = Vec::with_capacity(net.queue_count());
    for q in 1..=net.queue_count() {
        let dist = stationary_queue_dist(&net, &traffic, q, scenario.tolerances.tail_tol)?;
        queues.push(QueueReport {
            queue: q,
            arrival_rate: traffic.alpha(q),
            mean_occupancy: dist.mean(),
            tail_bound: dist.tail_bound,
            truncation: dist.truncation,
        });
    }

    println!("queue  arrival_rate  mean_occupancy");
    for q in &queues {
        println!(
            "{:<5}  {:<12.6}  {:.6}",
            q.queue, q.arrival_rate, q.mean_occupancy
        );
    }
    println!(
        "traffic residual = {:.3e}; monitored flow rate = {:.6}",
        traffic.residual,
        traffic.total_flow(&links)
    );

    if let Some(dir) = ensure_out_dir(&scenario)? {
        let out = SolveReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: scenario.config_hash(),
            scenario: scenario.echo(),
            traffic: traffic.clone(),
            queues: queues.clone(),
        };
        write_json(&dir.join("solve.json"), &out)?;
        write_csv(
            &dir.join("queues.csv"),
            QUEUES_CSV_HEADER,
            &queues_csv_rows(&queues),
        )?;
        println!("wrote {}", dir.join("solve.json").display());
    }
    Ok(())
}

fn print_link_stats(stats: &LinkStats) {
    println!("link      rho       w         eps       sigma");
    for l in &stats.per_link {
        println!(
            "{:<8}  {:<8.6}  {:<8.6}  {:<8.6}  {:.6}",
            l.link.to_string(),
            l.flow_rate,
            l.single_visit_prob,
            l.extra_visits_mean,
            l.extra_visits_factorial2
        );
    }
    println!(
        "aggregate: rho_C = {:.6}, w_C = {:.6}, eps_C = {:.6}, sigma_C = {:.6}",
        stats.total_flow_rate,
        stats.single_visit_prob,
        stats.extra_visits_mean,
        stats.extra_visits_factorial2
    );
}

fn cmd_analyze(common: &CommonOpts) -> Result<(), CliError> {
    let scenario = load_scenario(common)?;
    let (net, traffic, links) = prepare(&scenario)?;
    let stats = link_stats(&net, &traffic, &links)?;

    let asym = asymptotic_moments(
        stats.total_flow_rate,
        scenario.t,
        stats.extra_visits_mean,
        stats.extra_visits_factorial2,
    );
    let bounds = BoundReport::from_parts(&stats, &asym, scenario.t)?;

    let mut notes = Vec::new();
    if stats.poisson_exact() {
        notes.push("Poisson exact (Melamed): no route can cross the link set twice".to_string());
    }

    print_link_stats(&stats);
    println!(
        "window t = {}: mean count = {:.4}, TV bound = {:.6}, shift bound = {:.6}",
        scenario.t,
        stats.total_flow_rate * scenario.t,
        bounds.bound_simplified,
        bounds.shift_bound
    );
    println!(
        "cluster size in [{:.6}, {:.6}], cluster count in [{:.4}, {:.4}]",
        bounds.cluster.mean_size.0,
        bounds.cluster.mean_size.1,
        bounds.cluster.cluster_count.0,
        bounds.cluster.cluster_count.1
    );
    for note in &notes {
        println!("note: {note}");
    }

    if let Some(dir) = ensure_out_dir(&scenario)? {
        let out = AnalyzeReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: scenario.config_hash(),
            scenario: scenario.echo(),
            traffic: traffic.clone(),
            links: stats.clone(),
            bounds,
            notes,
        };
        write_json(&dir.join("analyze.json"), &out)?;
        write_csv(
            &dir.join("links.csv"),
            LINKS_CSV_HEADER,
            &links_csv_rows(&stats),
        )?;
        println!("wrote {}", dir.join("analyze.json").display());
    }
    Ok(())
}

fn cmd_simulate(common: &CommonOpts, dump_events: Option<&Path>) -> Result<(), CliError> {
    let scenario = load_scenario(common)?;
    let (net, traffic, links) = prepare(&scenario)?;
    let config = sim_config(&scenario, true);
    let samples = replicate_counts(&net, &traffic, &links, &config)?;

    let m = moments(&samples.samples)?;
    let rho = traffic.total_flow(&links);
    println!(
        "{} replicates at t = {}: mean = {:.4} (rho_C t = {:.4}), variance = {:.4}",
        samples.samples.len(),
        scenario.t,
        m.mean,
        rho * scenario.t,
        m.variance
    );

    if let Some(dir) = ensure_out_dir(&scenario)? {
        write_json(&dir.join("samples.json"), &samples)?;
        let (header, rows) = samples_csv(&samples);
        write_csv(&dir.join("samples.csv"), &header, &rows)?;
        println!("wrote {}", dir.join("samples.json").display());
    }

    if let Some(path) = dump_events {
        let trace = simulate_window(&net, &traffic, &links, &config, 0)?;
        write_event_log(path, &trace.events)?;
        println!("wrote {} ({} events)", path.display(), trace.events.len());
    }
    Ok(())
}

fn load_samples(path: &Path, scenario: &Scenario) -> Result<CountSamples, CliError> {
    let samples: CountSamples = read_json(path, "samples")?;
    let window_gap = (samples.window - scenario.t).abs();
    if window_gap > 1e-9 * scenario.t.max(1.0) {
        return Err(CliError::Config(format!(
            "samples were taken over window {} but the scenario asks for {}",
            samples.window, scenario.t
        )));
    }
    if samples.samples.is_empty() {
        return Err(CliError::Config("samples file holds no counts".into()));
    }
    Ok(samples)
}

fn cmd_compare(
    common: &CommonOpts,
    samples_path: Option<&Path>,
    self_check: bool,
    sweep_t: Option<&str>,
) -> Result<(), CliError> {
    let scenario = load_scenario(common)?;
    let (net, traffic, links) = prepare(&scenario)?;
    let stats = link_stats(&net, &traffic, &links)?;

    let (samples, source) = match samples_path {
        Some(path) => (load_samples(path, &scenario)?, SampleSource::Loaded),
        None => {
            let config = sim_config(&scenario, true);
            (
                replicate_counts(&net, &traffic, &links, &config)?,
                SampleSource::Simulated,
            )
        }
    };

    let report = build_report(&scenario, &traffic, &stats, &samples, source)?;

    print_link_stats(&stats);
    match report.fit {
        CountModel::NegativeBinomial { r, q } => {
            println!("fit: negative binomial, r = {r:.6}, q = {q:.6}")
        }
        CountModel::Poisson { lambda } => println!("fit: Poisson, lambda = {lambda:.6}"),
    }
    println!(
        "counts: mean = {:.4}, variance = {:.4}, dispersion = {:.4} (95% CI [{:.4}, {:.4}], {:?})",
        report.sample_moments.mean,
        report.sample_moments.variance,
        report.dispersion.ratio,
        report.dispersion.ci_lower,
        report.dispersion.ci_upper,
        report.dispersion.verdict
    );
    println!(
        "TV(data, fit) = {:.6} (+tails {:.6}) vs bound {:.6}; TV(data, Poisson) = {:.6}",
        report.tv.nb.point, report.tv.nb.upper, report.bounds.bound_simplified, report.tv.poisson.point
    );
    println!(
        "shift TV = {:.6} vs bound {:.6}; MC noise floor = {:.6}",
        report.tv.shift.point, report.bounds.shift_bound, report.tv.noise_floor
    );
    if let Some(c) = &report.clusters {
        println!(
            "clusters: mean size {:.4} (bound [{:.4}, {:.4}]), mean count {:.2} (bound [{:.2}, {:.2}]), max size {}",
            c.mean_size_avg,
            c.bounds.mean_size.0,
            c.bounds.mean_size.1,
            c.mean_cluster_count,
            c.bounds.cluster_count.0,
            c.bounds.cluster_count.1,
            c.max_size
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }

    let sweep = match sweep_t {
        Some(list) => Some(run_sweep(&scenario, &net, &traffic, &links, &stats, &report, list)?),
        None => None,
    };

    if let Some(dir) = ensure_out_dir(&scenario)? {
        write_json(&dir.join("report.json"), &report)?;
        write_csv(
            &dir.join("report.csv"),
            "key,value",
            &report_csv_rows(&report),
        )?;
        write_csv(
            &dir.join("links.csv"),
            LINKS_CSV_HEADER,
            &links_csv_rows(&stats),
        )?;
        write_json(&dir.join("samples.json"), &samples)?;
        let (header, rows) = samples_csv(&samples);
        write_csv(&dir.join("samples.csv"), &header, &rows)?;
        if let Some(rows) = &sweep {
            write_csv(&dir.join("sweep.csv"), SWEEP_CSV_HEADER, &sweep_csv_rows(rows))?;
        }
        println!("wrote {}", dir.join("report.json").display());
    }

    if self_check {
        let violations = self_check_violations(&report);
        if !violations.is_empty() {
            return Err(CliError::SelfCheck(violations));
        }
        println!("self-check passed: every estimate is within its bound");
    }
    Ok(())
}

/// Derives the seed of sweep row `idx` (1-based) from the scenario seed.
/// The golden-ratio stride keeps the replicate streams of different
/// windows disjoint while staying reproducible from the one seed.
fn sweep_seed(base: u64, idx: usize) -> u64 {
    base.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    scenario: &Scenario,
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
    stats: &LinkStats,
    base_report: &report::CompareReport,
    list: &str,
) -> Result<Vec<SweepRow>, CliError> {
    let mut windows = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let t: f64 = part
            .parse()
            .map_err(|_| CliError::Config(format!("bad sweep window {part:?}")))?;
        if !t.is_finite() || t <= 0.0 {
            return Err(CliError::Config(format!(
                "sweep windows must be positive, got {t}"
            )));
        }
        windows.push(t);
    }

    let rho = stats.total_flow_rate;
    let mut rows = vec![SweepRow {
        t: scenario.t,
        mean_count: base_report.sample_moments.mean,
        bound_simplified: base_report.bounds.bound_simplified,
        shift_bound: base_report.bounds.shift_bound,
        tv_nb: base_report.tv.nb.point,
        tv_nb_upper: base_report.tv.nb.upper,
        tv_poisson: base_report.tv.poisson.point,
        shift_tv: base_report.tv.shift.point,
        noise_floor: base_report.tv.noise_floor,
    }];

    for (idx, &t) in windows.iter().enumerate() {
        let config = SimConfig {
            window: t,
            base_seed: sweep_seed(scenario.seed, idx + 1),
            track_customers: false,
            ..sim_config(scenario, false)
        };
        let samples = replicate_counts(net, traffic, links, &config)?;
        let sampled = moments(&samples.samples)?;
        let asym = asymptotic_moments(
            rho,
            t,
            stats.extra_visits_mean,
            stats.extra_visits_factorial2,
        );
        let fit_from = match scenario.variance_mode {
            VarianceMode::Empirical => &sampled,
            VarianceMode::Asymptotic => &asym,
        };
        let fit = nb_params_from_moments(fit_from.mean, fit_from.variance)?;
        let bounds = BoundReport::from_parts(stats, fit_from, t)?;

        let pmf = empirical_pmf(&samples.samples)?;
        let tv_nb = tv_distance(&pmf, &fit.pmf());
        let tv_poisson = tv_distance(&pmf, &poisson_pmf(rho * t));
        let shift = shift_tv(&samples.samples)?;

        rows.push(SweepRow {
            t,
            mean_count: sampled.mean,
            bound_simplified: bounds.bound_simplified,
            shift_bound: bounds.shift_bound,
            tv_nb: tv_nb.point,
            tv_nb_upper: tv_nb.upper,
            tv_poisson: tv_poisson.point,
            shift_tv: shift.point,
            noise_floor: mc_noise_floor(&pmf, samples.samples.len()),
        });
    }

    println!("{SWEEP_CSV_HEADER}");
    for row in sweep_csv_rows(&rows) {
        println!("{row}");
    }
    Ok(rows)
}
