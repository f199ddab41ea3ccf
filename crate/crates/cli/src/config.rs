//! Scenario configuration: a JSON file naming the network, the
//! monitored links, and the experiment parameters, with command-line
//! overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use jackson_flows::{Link, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Fit and bound from the sampled moments.
    #[default]
    Empirical,
    /// Fit and bound from the long-window moments implied by the exact
    /// link statistics.
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Stationary pmf truncation tolerance.
    pub tail_tol: f64,
    /// Bootstrap resamples for the dispersion test.
    pub bootstrap_resamples: usize,
    /// Per-replicate transition budget.
    pub max_events: u64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tail_tol: 1e-12,
            bootstrap_resamples: 1000,
            max_events: 1_000_000_000,
        }
    }
}

fn default_replicates() -> usize {
    1000
}

/// The scenario file as written on disk.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    /// Network spec path, relative to this config file.
    network: PathBuf,
    /// Monitored links as `[from, to]` pairs; node 0 is the outside.
    links: Vec<[usize; 2]>,
    /// Observation window length.
    t: f64,
    #[serde(default = "default_replicates")]
    replicates: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    variance_mode: VarianceMode,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    tolerances: Tolerances,
}

/// Fully resolved scenario: network loaded, overrides applied.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Network path exactly as written in the config file.
    pub network_ref: String,
    pub spec: NetworkSpec,
    pub links: Vec<Link>,
    pub t: f64,
    pub replicates: usize,
    pub seed: u64,
    pub variance_mode: VarianceMode,
    pub out: Option<PathBuf>,
    pub tolerances: Tolerances,
}

/// The deterministic part of the scenario echoed into reports; output
/// locations are deliberately excluded so reruns into different
/// directories produce identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioEcho {
    pub network: String,
    pub links: Vec<Link>,
    pub t: f64,
    pub replicates: usize,
    pub seed: u64,
    pub variance_mode: VarianceMode,
    pub tolerances: Tolerances,
}

impl Scenario {
    pub fn echo(&self) -> ScenarioEcho {
        ScenarioEcho {
            network: self.network_ref.clone(),
            links: self.links.clone(),
            t: self.t,
            replicates: self.replicates,
            seed: self.seed,
            variance_mode: self.variance_mode,
            tolerances: self.tolerances,
        }
    }

    /// FNV-1a hash of the echoed scenario, the report's provenance key.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.echo()).expect("echo serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, clap::Args)]
pub struct CommonOpts {
    /// Scenario config file (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the replicate count.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Override the observation window length.
    #[arg(long)]
    pub t: Option<f64>,
    /// Override the variance mode.
    #[arg(long, value_enum)]
    pub variance_mode: Option<VarianceMode>,
    /// Output directory for artifacts (overrides the config).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &str,
) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse {what} {}: {e}", path.display())))
}

/// Loads the scenario file, applies overrides, and loads the referenced
/// network spec.
pub fn load_scenario(opts: &CommonOpts) -> Result<Scenario, CliError> {
    let file: ScenarioFile = read_json(&opts.config, "config")?;
    let base = opts.config.parent().unwrap_or_else(|| Path::new("."));
    let network_path = base.join(&file.network);
    let spec: NetworkSpec = read_json(&network_path, "network spec")?;

    let t = opts.t.unwrap_or(file.t);
    if !t.is_finite() || t <= 0.0 {
        return Err(CliError::Config(format!("t must be positive, got {t}")));
    }
    let replicates = opts.replicates.unwrap_or(file.replicates);
    if replicates == 0 {
        return Err(CliError::Config("replicates must be at least 1".into()));
    }

    Ok(Scenario {
        network_ref: file.network.display().to_string(),
        spec,
        links: file.links.iter().map(|&[a, b]| Link(a, b)).collect(),
        t,
        replicates,
        seed: opts.seed.unwrap_or(file.seed),
        variance_mode: opts.variance_mode.unwrap_or(file.variance_mode),
        out: opts.out.clone().or(file.out),
        tolerances: file.tolerances,
    })
}
