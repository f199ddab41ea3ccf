//! Report assembly and serialization. Reports are deterministic: field
//! order is fixed by the structs, no timestamps or absolute paths are
//! recorded, and every number is a pure function of the scenario and
//! seed, so rerunning a scenario reproduces the bytes exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use jackson_flows::{
    asymptotic_moments, empirical_pmf, mc_noise_floor, moments, nb_params_from_moments,
    overdispersion_test, poisson_pmf, shift_tv, tv_distance, BootstrapConfig, BoundReport,
    ClusterBounds, ClusterSummary, CountModel, CountSamples, DispersionReport,
    DispersionVerdict, LinkStats, MomentSummary, TrafficSolution, TvEstimate,
};
use serde::Serialize;

use crate::config::{Scenario, ScenarioEcho, VarianceMode};
use crate::CliError;

/// Provenance of the count samples a report was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Simulated,
    Loaded,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleInfo {
    pub source: SampleSource,
    pub base_seed: u64,
    pub window: f64,
    pub replicates: usize,
}

/// Total-variation estimates of the fitted laws against the data.
#[derive(Debug, Clone, Serialize)]
pub struct TvSection {
    pub nb: TvEstimate,
    pub poisson: TvEstimate,
    pub shift: TvEstimate,
    /// Plug-in Monte Carlo noise floor of the empirical pmf.
    pub noise_floor: f64,
    /// Slack granted to sampled TV estimates: twice the noise floor.
    pub mc_error_budget: f64,
}

/// Aggregated per-customer crossing diagnostics across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSection {
    pub replicates_with_clusters: usize,
    /// Average over replicates of the mean crossings per customer.
    pub mean_size_avg: f64,
    pub max_size: u32,
    /// Average number of distinct crossing customers per replicate.
    pub mean_cluster_count: f64,
    pub bounds: ClusterBounds,
}

/// Everything `compare` produces.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub version: String,
    pub config_hash: String,
    pub scenario: ScenarioEcho,
    pub traffic: TrafficSolution,
    pub links: LinkStats,
    pub bounds: BoundReport,
    pub fit: CountModel,
    pub sample_info: SampleInfo,
    pub sample_moments: MomentSummary,
    pub dispersion: DispersionReport,
    pub tv: TvSection,
    pub clusters: Option<ClusterSection>,
    pub notes: Vec<String>,
}

pub fn summarize_clusters(clusters: &[ClusterSummary], bounds: ClusterBounds) -> ClusterSection {
    let with = clusters.iter().filter(|c| c.distinct_customers > 0);
    let n = with.clone().count();
    let mean_size_avg = if n == 0 {
        0.0
    } else {
        with.clone().map(|c| c.mean_size).sum::<f64>() / n as f64
    };
    let max_size = clusters.iter().map(|c| c.max_size).max().unwrap_or(0);
    let mean_cluster_count = clusters
        .iter()
        .map(|c| c.distinct_customers as f64)
        .sum::<f64>()
        / clusters.len().max(1) as f64;
    ClusterSection {
        replicates_with_clusters: n,
        mean_size_avg,
        max_size,
        mean_cluster_count,
        bounds,
    }
}

/// Builds the full comparison report from exact statistics and samples.
pub fn build_report(
    scenario: &Scenario,
    traffic: &TrafficSolution,
    stats: &LinkStats,
    samples: &CountSamples,
    source: SampleSource,
) -> Result<CompareReport, CliError> {
    let t = scenario.t;
    let rho = stats.total_flow_rate;
    let (eps, sigma) = (stats.extra_visits_mean, stats.extra_visits_factorial2);

    let sampled = moments(&samples.samples)?;
    let asym = asymptotic_moments(rho, t, eps, sigma);
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
    let noise_floor = mc_noise_floor(&pmf, samples.samples.len());

    let dispersion = overdispersion_test(
        &samples.samples,
        BootstrapConfig {
            resamples: scenario.tolerances.bootstrap_resamples,
            seed: scenario.seed,
        },
    )?;

    let clusters = samples
        .clusters
        .as_ref()
        .map(|cs| summarize_clusters(cs, bounds.cluster));

    let mut notes = Vec::new();
    if stats.poisson_exact() {
        notes.push("Poisson exact (Melamed): no route can cross the link set twice".to_string());
    }
    if bounds.bound_full.clamped {
        notes.push(
            "moment-form bound numerator was negative (within sampling noise) and clamped to 0"
                .to_string(),
        );
    }
    if dispersion.verdict == DispersionVerdict::UnderDispersedAnomaly {
        notes.push(
            "under-dispersed counts: equilibrium flows never are; check the configuration"
                .to_string(),
        );
    }

    Ok(CompareReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: scenario.config_hash(),
        scenario: scenario.echo(),
        traffic: traffic.clone(),
        links: stats.clone(),
        bounds,
        fit,
        sample_info: SampleInfo {
            source,
            base_seed: samples.base_seed,
            window: samples.window,
            replicates: samples.samples.len(),
        },
        sample_moments: sampled,
        dispersion,
        tv: TvSection {
            nb: tv_nb,
            poisson: tv_poisson,
            shift,
            noise_floor,
            mc_error_budget: 2.0 * noise_floor,
        },
        clusters,
        notes,
    })
}

/// Self-check: every sampled estimate must respect its bound, with the
/// Monte Carlo error budget as slack. Returns the list of violations.
pub fn self_check_violations(report: &CompareReport) -> Vec<String> {
    let mut violations = Vec::new();
    let budget = report.tv.mc_error_budget;
    let bound = report.bounds.bound_simplified;
    if report.tv.nb.upper > bound + budget {
        violations.push(format!(
            "TV(data, fit) = {:.6} exceeds bound {:.6} + budget {:.6}",
            report.tv.nb.upper, bound, budget
        ));
    }
    if report.tv.shift.point > report.bounds.shift_bound + budget {
        violations.push(format!(
            "shift TV = {:.6} exceeds bound {:.6} + budget {:.6}",
            report.tv.shift.point, report.bounds.shift_bound, budget
        ));
    }
    if report.dispersion.verdict == DispersionVerdict::UnderDispersedAnomaly {
        violations.push(format!(
            "dispersion ratio {:.4} is anomalously below 1 (CI [{:.4}, {:.4}])",
            report.dispersion.ratio, report.dispersion.ci_lower, report.dispersion.ci_upper
        ));
    }
    if let Some(clusters) = &report.clusters {
        if clusters.replicates_with_clusters > 0 {
            let (lo, hi) = clusters.bounds.mean_size;
            if clusters.mean_size_avg < lo - 0.05 || clusters.mean_size_avg > hi + 0.05 {
                violations.push(format!(
                    "mean cluster size {:.4} escapes [{:.4}, {:.4}]",
                    clusters.mean_size_avg, lo, hi
                ));
            }
            let (clo, chi) = clusters.bounds.cluster_count;
            if clusters.mean_cluster_count < 0.95 * clo
                || clusters.mean_cluster_count > 1.05 * chi
            {
                violations.push(format!(
                    "mean cluster count {:.2} escapes [{:.2}, {:.2}]",
                    clusters.mean_cluster_count, clo, chi
                ));
            }
        }
    }
    violations
}

/// Per-queue stationary summary for `solve`.
#[derive(Debug, Clone, Serialize)]
pub struct QueueReport {
    pub queue: usize,
    pub arrival_rate: f64,
    pub mean_occupancy: f64,
    pub tail_bound: f64,
    pub truncation: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub version: String,
    pub config_hash: String,
    pub scenario: ScenarioEcho,
    pub traffic: TrafficSolution,
    pub queues: Vec<QueueReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub version: String,
    pub config_hash: String,
    pub scenario: ScenarioEcho,
    pub traffic: TrafficSolution,
    pub links: LinkStats,
    pub bounds: BoundReport,
    pub notes: Vec<String>,
}

pub const QUEUES_CSV_HEADER: &str = "queue,arrival_rate,mean_occupancy,tail_bound,truncation";

pub fn queues_csv_rows(queues: &[QueueReport]) -> Vec<String> {
    queues
        .iter()
        .map(|q| {
            format!(
                "{},{},{},{},{}",
                q.queue, q.arrival_rate, q.mean_occupancy, q.tail_bound, q.truncation
            )
        })
        .collect()
}

/// Header and rows for samples.csv; cluster columns appear only when the
/// samples carry cluster summaries.
pub fn samples_csv(samples: &CountSamples) -> (String, Vec<String>) {
    match &samples.clusters {
        Some(clusters) => {
            let rows = samples
                .samples
                .iter()
                .zip(clusters)
                .enumerate()
                .map(|(i, (count, c))| {
                    format!(
                        "{},{},{},{},{}",
                        i, count, c.distinct_customers, c.mean_size, c.max_size
                    )
                })
                .collect();
            (
                "replicate,count,cluster_customers,cluster_mean_size,cluster_max_size".to_string(),
                rows,
            )
        }
        None => {
            let rows = samples
                .samples
                .iter()
                .enumerate()
                .map(|(i, count)| format!("{i},{count}"))
                .collect();
            ("replicate,count".to_string(), rows)
        }
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "t,mean_count,bound_simplified,shift_bound,tv_nb,tv_nb_upper,tv_poisson,shift_tv,noise_floor";

pub fn sweep_csv_rows(rows: &[SweepRow]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.mean_count,
                r.bound_simplified,
                r.shift_bound,
                r.tv_nb,
                r.tv_nb_upper,
                r.tv_poisson,
                r.shift_tv,
                r.noise_floor
            )
        })
        .collect()
}

/// One row of the bound-vs-window sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub mean_count: f64,
    pub bound_simplified: f64,
    pub shift_bound: f64,
    pub tv_nb: f64,
    pub tv_nb_upper: f64,
    pub tv_poisson: f64,
    pub shift_tv: f64,
    pub noise_floor: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Flat key-value rendering of the headline numbers, for spreadsheets.
pub fn report_csv_rows(report: &CompareReport) -> Vec<String> {
    let mut rows = vec![
        format!("rho_c,{}", report.links.total_flow_rate),
        format!("w_c,{}", report.links.single_visit_prob),
        format!("eps_c,{}", report.links.extra_visits_mean),
        format!("sigma_c,{}", report.links.extra_visits_factorial2),
        format!("t,{}", report.scenario.t),
        format!("replicates,{}", report.sample_info.replicates),
        format!("mean_count,{}", report.sample_moments.mean),
        format!("var_count,{}", report.sample_moments.variance),
        format!("dispersion_ratio,{}", report.dispersion.ratio),
        format!("dispersion_ci_lower,{}", report.dispersion.ci_lower),
        format!("dispersion_ci_upper,{}", report.dispersion.ci_upper),
        format!("dispersion_verdict,{:?}", report.dispersion.verdict),
        format!("bound_simplified,{}", report.bounds.bound_simplified),
        format!("bound_full,{}", report.bounds.bound_full.value),
        format!("bound_full_se,{}", report.bounds.bound_full.std_error),
        format!("shift_bound,{}", report.bounds.shift_bound),
        format!("tv_nb,{}", report.tv.nb.point),
        format!("tv_nb_upper,{}", report.tv.nb.upper),
        format!("tv_poisson,{}", report.tv.poisson.point),
        format!("tv_shift,{}", report.tv.shift.point),
        format!("noise_floor,{}", report.tv.noise_floor),
        format!("mc_error_budget,{}", report.tv.mc_error_budget),
    ];
    match report.fit {
        CountModel::NegativeBinomial { r, q } => {
            rows.push("fit_model,negative-binomial".to_string());
            rows.push(format!("fit_r,{r}"));
            rows.push(format!("fit_q,{q}"));
        }
        CountModel::Poisson { lambda } => {
            rows.push("fit_model,poisson".to_string());
            rows.push(format!("fit_lambda,{lambda}"));
        }
    }
    if let Some(c) = &report.clusters {
        rows.push(format!("cluster_mean_size,{}", c.mean_size_avg));
        rows.push(format!("cluster_max_size,{}", c.max_size));
        rows.push(format!("cluster_mean_count,{}", c.mean_cluster_count));
    }
    rows
}

pub fn links_csv_rows(stats: &LinkStats) -> Vec<String> {
    stats
        .per_link
        .iter()
        .map(|l| {
            format!(
                "{},{},{},{},{},{}",
                l.link.from_node(),
                l.link.to_node(),
                l.flow_rate,
                l.single_visit_prob,
                l.extra_visits_mean,
                l.extra_visits_factorial2
            )
        })
        .collect()
}

pub const LINKS_CSV_HEADER: &str = "link_from,link_to,rho,w,eps,sigma";

/// Streams the crossing event log of one trace as CSV.
pub fn write_event_log(
    path: &Path,
    events: &[jackson_flows::FlowEvent],
) -> Result<(), CliError> {
    let file = fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "time,link_from,link_to,customer_id")?;
    for e in events {
        match e.customer {
            Some(id) => writeln!(
                out,
                "{},{},{},{}",
                e.time,
                e.link.from_node(),
                e.link.to_node(),
                id
            )?,
            None => writeln!(
                out,
                "{},{},{},",
                e.time,
                e.link.from_node(),
                e.link.to_node()
            )?,
        }
    }
    Ok(())
}
