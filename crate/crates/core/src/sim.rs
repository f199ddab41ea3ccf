//! Equilibrium discrete-event simulation of the queue-length Markov
//! process, with per-customer identity tracking and per-link crossing
//! counts over a fixed time window.
//!
//! Each replicate runs on its own counter-based RNG stream derived from
//! `(base_seed, replicate_index)`, so results are independent of how
//! replicates are scheduled and identical between the sequential and
//! parallel drivers. Within a replicate the draw order per event is
//! pinned: holding-time uniform, transition-category uniform, then for
//! service completions a resident index and a routing uniform. Recording
//! a crossing never consumes randomness, so traces for different link
//! sets of the same scenario are pathwise coupled: counts add over
//! disjoint link sets, replicate by replicate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    sample_stationary_state, stationary_queue_dist, Link, LinkSet, NetworkError, StationaryDist,
    TrafficSolution, ValidatedNetwork, DEFAULT_TAIL_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("event budget of {budget} transitions exhausted at simulated time {time}")]
    EventBudgetExceeded { budget: u64, time: f64 },
    #[error("customer tracking was disabled for this trace")]
    TrackingDisabled,
}

/// Initial state of each replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Draw the initial occupancies from the product-form stationary
    /// law; the window then samples the process in equilibrium.
    Stationary,
    /// Start empty (transient; useful for warmup experiments).
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Observation window length `t`.
    pub window: f64,
    pub replicates: usize,
    pub base_seed: u64,
    /// Record per-customer crossing counts (cluster diagnostics).
    pub track_customers: bool,
    pub init: InitMode,
    /// Hard cap on transitions per replicate.
    pub max_events: u64,
}

impl SimConfig {
    pub fn new(window: f64) -> Self {
        SimConfig {
            window,
            replicates: 1,
            base_seed: 0,
            track_customers: true,
            init: InitMode::Stationary,
            max_events: 1_000_000_000,
        }
    }

    fn check(&self) -> Result<(), SimError> {
        if !self.window.is_finite() || self.window <= 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "window must be positive, got {}",
                self.window
            )));
        }
        if self.replicates == 0 {
            return Err(SimError::InvalidConfig("need at least one replicate".into()));
        }
        Ok(())
    }
}

/// One crossing of the monitored link set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowEvent {
    pub time: f64,
    pub link: Link,
    /// Crossing customer, present when tracking is enabled.
    pub customer: Option<u64>,
}

/// Everything one replicate records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowTrace {
    pub window: f64,
    pub replicate: usize,
    /// Crossings of the monitored set in the window.
    pub count: u64,
    /// Time-ordered crossings of the monitored set.
    pub events: Vec<FlowEvent>,
    /// Per-customer crossing counts; customers that never crossed the
    /// monitored set do not appear.
    pub crossings_by_customer: Option<BTreeMap<u64, u32>>,
    /// `occupancy[q][n]`: time queue `q + 1` held `n` customers.
    pub occupancy: Vec<Vec<f64>>,
    /// `link_counts[j][k]`: transitions over link `(j, k)`, all links.
    pub link_counts: Vec<Vec<u64>>,
}

impl FlowTrace {
    /// Total transitions of the replicate, monitored or not.
    pub fn total_transitions(&self) -> u64 {
        self.link_counts.iter().flatten().sum()
    }

    /// Empirical flow rate of one link.
    pub fn empirical_rate(&self, link: Link) -> f64 {
        self.link_counts[link.from_node()][link.to_node()] as f64 / self.window
    }

    /// Fraction of the window queue `queue` (one-based) spent at each
    /// occupancy level.
    pub fn occupancy_fractions(&self, queue: usize) -> Vec<f64> {
        self.occupancy[queue - 1]
            .iter()
            .map(|t| t / self.window)
            .collect()
    }
}

/// Per-replicate summary of the per-customer crossing counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    /// Customers that crossed the monitored set at least once.
    pub distinct_customers: u64,
    /// Mean crossings per such customer; 0 when none crossed.
    pub mean_size: f64,
    /// Largest per-customer crossing count.
    pub max_size: u32,
}

/// Summarizes per-customer crossing counts of a tracked trace.
pub fn cluster_diagnostics(trace: &FlowTrace) -> Result<ClusterSummary, SimError> {
    let crossings = trace
        .crossings_by_customer
        .as_ref()
        .ok_or(SimError::TrackingDisabled)?;
    let distinct = crossings.len() as u64;
    let max_size = crossings.values().copied().max().unwrap_or(0);
    let mean_size = if distinct == 0 {
        0.0
    } else {
        trace.count as f64 / distinct as f64
    };
    Ok(ClusterSummary {
        distinct_customers: distinct,
        mean_size,
        max_size,
    })
}

/// Flow counts of all replicates, plus optional cluster summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSamples {
    pub base_seed: u64,
    pub window: f64,
    pub samples: Vec<u64>,
    pub clusters: Option<Vec<ClusterSummary>>,
}

fn replicate_rng(base_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replicate);
    rng
}

/// Simulates one equilibrium window and records crossings of `links`.
pub fn simulate_window(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
    config: &SimConfig,
    replicate: usize,
) -> Result<FlowTrace, SimError> {
    config.check()?;
    links.ensure_positive_flow(traffic)?;
    let spec = net.spec();
    let jq = spec.queue_count();
    let nodes = jq + 1;

    let mut monitored = vec![false; nodes * nodes];
    for &link in links.links() {
        monitored[link.from_node() * nodes + link.to_node()] = true;
    }

    let mut rng = replicate_rng(config.base_seed, replicate as u64);
    let init_state = match config.init {
        InitMode::Stationary => {
            let dists: Vec<StationaryDist> = (1..=jq)
                .map(|q| stationary_queue_dist(net, traffic, q, DEFAULT_TAIL_TOL))
                .collect::<Result<_, _>>()?;
            sample_stationary_state(&dists, &mut rng)
        }
        InitMode::Empty => vec![0; jq],
    };

    let mut next_id: u64 = 0;
    let mut residents: Vec<Vec<u64>> = init_state
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    let id = next_id;
                    next_id += 1;
                    id
                })
                .collect()
        })
        .collect();

    let arrival_total = spec.total_exogenous_rate();
    let mut occupancy: Vec<Vec<f64>> = vec![Vec::new(); jq];
    let mut link_counts = vec![vec![0u64; nodes]; nodes];
    let mut events: Vec<FlowEvent> = Vec::new();
    let mut crossings: BTreeMap<u64, u32> = BTreeMap::new();
    let mut count: u64 = 0;
    let mut transitions: u64 = 0;
    let mut now = 0.0f64;

    macro_rules! record {
        ($from:expr, $to:expr, $id:expr) => {{
            let (from, to): (usize, usize) = ($from, $to);
            link_counts[from][to] += 1;
            if monitored[from * nodes + to] {
                count += 1;
                let customer = if config.track_customers {
                    *crossings.entry($id).or_insert(0) += 1;
                    Some($id)
                } else {
                    None
                };
                events.push(FlowEvent {
                    time: now,
                    link: Link(from, to),
                    customer,
                });
            }
        }};
    }

    loop {
        let service_total: f64 = (0..jq)
            .map(|q| spec.queues[q].service.rate_at(residents[q].len()))
            .sum();
        let total_rate = arrival_total + service_total;
        let u: f64 = rng.random();
        let dt = -(1.0 - u).ln() / total_rate;
        let next = now + dt;
        let slice = next.min(config.window) - now;
        for q in 0..jq {
            let n = residents[q].len();
            if occupancy[q].len() <= n {
                occupancy[q].resize(n + 1, 0.0);
            }
            occupancy[q][n] += slice;
        }
        if next > config.window {
            break;
        }
        now = next;
        transitions += 1;
        if transitions > config.max_events {
            return Err(SimError::EventBudgetExceeded {
                budget: config.max_events,
                time: now,
            });
        }

        // Category scan: arrivals in queue order, then completions.
        let mut x = rng.random::<f64>() * total_rate;
        let mut arrival_at: Option<usize> = None;
        let mut completion_at: Option<usize> = None;
        for q in 0..jq {
            let nu = spec.queues[q].exogenous_rate;
            if nu <= 0.0 {
                continue;
            }
            if x < nu {
                arrival_at = Some(q);
                break;
            }
            x -= nu;
        }
        if arrival_at.is_none() {
            for q in 0..jq {
                let phi = spec.queues[q].service.rate_at(residents[q].len());
                if phi <= 0.0 {
                    continue;
                }
                if x < phi {
                    completion_at = Some(q);
                    break;
                }
                x -= phi;
            }
            if completion_at.is_none() {
                // Rounding pushed x past every block; take the last
                // positive-rate category.
                completion_at = (0..jq)
                    .rev()
                    .find(|&q| spec.queues[q].service.rate_at(residents[q].len()) > 0.0);
                if completion_at.is_none() {
                    arrival_at = (0..jq).rev().find(|&q| spec.queues[q].exogenous_rate > 0.0);
                }
            }
        }

        if let Some(q) = arrival_at {
            let id = next_id;
            next_id += 1;
            residents[q].push(id);
            record!(0, q + 1, id);
        } else if let Some(q) = completion_at {
            let n = residents[q].len();
            debug_assert!(n > 0, "completion at an empty queue");
            let idx = rng.random_range(0..n);
            let id = residents[q].swap_remove(idx);
            let v: f64 = rng.random();
            let mut acc = 0.0;
            let mut dest = 0usize;
            for k in 0..jq {
                acc += spec.routing[q][k];
                if v < acc {
                    dest = k + 1;
                    break;
                }
            }
            if dest == 0 && spec.queues[q].exit_prob == 0.0 {
                // v >= acc only through rounding; exit is impossible here.
                dest = (0..jq)
                    .rev()
                    .find(|&k| spec.routing[q][k] > 0.0)
                    .map(|k| k + 1)
                    .expect("row with zero exit probability has a positive entry");
            }
            if dest > 0 {
                residents[dest - 1].push(id);
            }
            record!(q + 1, dest, id);
        }
    }

    Ok(FlowTrace {
        window: config.window,
        replicate,
        count,
        events,
        crossings_by_customer: config.track_customers.then_some(crossings),
        occupancy,
        link_counts,
    })
}

fn summarize(trace: FlowTrace, track: bool) -> Result<(u64, Option<ClusterSummary>), SimError> {
    let cluster = if track {
        Some(cluster_diagnostics(&trace)?)
    } else {
        None
    };
    Ok((trace.count, cluster))
}

fn assemble(
    config: &SimConfig,
    reduced: Vec<(u64, Option<ClusterSummary>)>,
) -> CountSamples {
    let mut samples = Vec::with_capacity(reduced.len());
    let mut clusters = config.track_customers.then(Vec::new);
    for (count, cluster) in reduced {
        samples.push(count);
        if let (Some(cs), Some(c)) = (&mut clusters, cluster) {
            cs.push(c);
        }
    }
    CountSamples {
        base_seed: config.base_seed,
        window: config.window,
        samples,
        clusters,
    }
}

/// Sequential replicate driver.
pub fn replicate_counts_seq(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
    config: &SimConfig,
) -> Result<CountSamples, SimError> {
    config.check()?;
    let reduced: Result<Vec<_>, SimError> = (0..config.replicates)
        .map(|r| {
            simulate_window(net, traffic, links, config, r)
                .and_then(|trace| summarize(trace, config.track_customers))
        })
        .collect();
    Ok(assemble(config, reduced?))
}

/// Parallel replicate driver; identical output to the sequential one.
#[cfg(feature = "parallel")]
pub fn replicate_counts_par(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
    config: &SimConfig,
) -> Result<CountSamples, SimError> {
    config.check()?;
    let reduced: Result<Vec<_>, SimError> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            simulate_window(net, traffic, links, config, r)
                .and_then(|trace| summarize(trace, config.track_customers))
        })
        .collect();
    Ok(assemble(config, reduced?))
}

/// Replicate driver; parallel when the `parallel` feature is on.
pub fn replicate_counts(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
    config: &SimConfig,
) -> Result<CountSamples, SimError> {
    #[cfg(feature = "parallel")]
    {
        replicate_counts_par(net, traffic, links, config)
    }
    #[cfg(not(feature = "parallel"))]
    {
        replicate_counts_seq(net, traffic, links, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        solve_traffic, validate_network, NetworkSpec, QueueSpec, ServiceEffort,
    };

    fn feedback() -> (ValidatedNetwork, TrafficSolution) {
        let spec = NetworkSpec {
            queues: vec![QueueSpec {
                exogenous_rate: 1.0,
                exit_prob: 0.8,
                service: ServiceEffort::Constant { rate: 5.0 },
            }],
            routing: vec![vec![0.2]],
        };
        let net = validate_network(spec).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        (net, traffic)
    }

    fn tandem() -> (ValidatedNetwork, TrafficSolution) {
        let spec = NetworkSpec {
            queues: vec![
                QueueSpec {
                    exogenous_rate: 1.0,
                    exit_prob: 0.0,
                    service: ServiceEffort::Constant { rate: 2.0 },
                },
                QueueSpec {
                    exogenous_rate: 0.0,
                    exit_prob: 1.0,
                    service: ServiceEffort::Constant { rate: 2.0 },
                },
            ],
            routing: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        };
        let net = validate_network(spec).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        (net, traffic)
    }

    fn loop_links() -> LinkSet {
        LinkSet::new([Link(1, 1)], 1).unwrap()
    }

    #[test]
    fn replay_is_deterministic() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            base_seed: 9,
            ..SimConfig::new(50.0)
        };
        let a = simulate_window(&net, &traffic, &links, &config, 0).unwrap();
        let b = simulate_window(&net, &traffic, &links, &config, 0).unwrap();
        assert_eq!(a, b);
        let c = simulate_window(&net, &traffic, &links, &config, 1).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn trace_invariants_hold() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            base_seed: 3,
            ..SimConfig::new(200.0)
        };
        let trace = simulate_window(&net, &traffic, &links, &config, 0).unwrap();

        assert!(trace.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(trace
            .events
            .iter()
            .all(|e| links.contains(e.link) && e.time >= 0.0 && e.time <= 200.0));
        assert_eq!(trace.count, trace.events.len() as u64);
        assert_eq!(trace.count, trace.link_counts[1][1]);

        let by_customer: u64 = trace
            .crossings_by_customer
            .as_ref()
            .unwrap()
            .values()
            .map(|&c| c as u64)
            .sum();
        assert_eq!(by_customer, trace.count);

        let occupied: f64 = trace.occupancy[0].iter().sum();
        assert!((occupied - 200.0).abs() < 1e-6);
    }

    #[test]
    fn counts_add_over_disjoint_link_sets() {
        let (net, traffic) = feedback();
        let config = SimConfig {
            base_seed: 17,
            replicates: 20,
            ..SimConfig::new(80.0)
        };
        let pieces = [Link(0, 1), Link(1, 1), Link(1, 0)];
        let mut piece_sums = vec![0u64; config.replicates];
        for link in pieces {
            let ls = LinkSet::new([link], 1).unwrap();
            let counts = replicate_counts_seq(&net, &traffic, &ls, &config).unwrap();
            for (acc, c) in piece_sums.iter_mut().zip(&counts.samples) {
                *acc += c;
            }
        }
        let all = LinkSet::new(pieces, 1).unwrap();
        let union = replicate_counts_seq(&net, &traffic, &all, &config).unwrap();
        assert_eq!(union.samples, piece_sums);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            base_seed: 5,
            replicates: 16,
            ..SimConfig::new(60.0)
        };
        let seq = replicate_counts_seq(&net, &traffic, &links, &config).unwrap();
        let par = replicate_counts_par(&net, &traffic, &links, &config).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn loop_count_mean_tracks_flow_rate() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            base_seed: 23,
            replicates: 200,
            track_customers: false,
            ..SimConfig::new(200.0)
        };
        let counts = replicate_counts(&net, &traffic, &links, &config).unwrap();
        let n = counts.samples.len() as f64;
        let mean: f64 = counts.samples.iter().map(|&c| c as f64).sum::<f64>() / n;
        let expect = 0.25 * 200.0;
        // Var of one count is near rho t (1 + eps) = 75.
        let se = (75.0f64 / n).sqrt();
        assert!(
            (mean - expect).abs() < 4.0 * se,
            "mean {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn tandem_customers_cross_at_most_once() {
        let (net, traffic) = tandem();
        let links = LinkSet::new([Link(1, 2)], 2).unwrap();
        let config = SimConfig {
            base_seed: 31,
            replicates: 40,
            ..SimConfig::new(30.0)
        };
        for r in 0..config.replicates {
            let trace = simulate_window(&net, &traffic, &links, &config, r).unwrap();
            let summary = cluster_diagnostics(&trace).unwrap();
            assert!(summary.max_size <= 1);
            if summary.distinct_customers > 0 {
                assert_eq!(summary.mean_size, 1.0);
            }
        }
    }

    #[test]
    fn occupancy_matches_stationary_law() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            base_seed: 41,
            track_customers: false,
            ..SimConfig::new(20_000.0)
        };
        let trace = simulate_window(&net, &traffic, &links, &config, 0).unwrap();
        let frac = trace.occupancy_fractions(1);
        // Geometric(0.25) marginals.
        for (k, expect) in [(0usize, 0.75), (1, 0.1875), (2, 0.046_875)] {
            assert!(
                (frac[k] - expect).abs() < 0.03,
                "occupancy {k}: {} vs {expect}",
                frac[k]
            );
        }
    }

    #[test]
    fn tracking_disabled_is_reported() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            track_customers: false,
            ..SimConfig::new(10.0)
        };
        let trace = simulate_window(&net, &traffic, &links, &config, 0).unwrap();
        assert!(matches!(
            cluster_diagnostics(&trace),
            Err(SimError::TrackingDisabled)
        ));
        assert!(trace.events.iter().all(|e| e.customer.is_none()));
    }

    #[test]
    fn event_budget_is_enforced() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            max_events: 10,
            ..SimConfig::new(1_000.0)
        };
        assert!(matches!(
            simulate_window(&net, &traffic, &links, &config, 0),
            Err(SimError::EventBudgetExceeded { budget: 10, .. })
        ));
    }

    #[test]
    fn empty_init_starts_empty() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let config = SimConfig {
            init: InitMode::Empty,
            ..SimConfig::new(5.0)
        };
        let trace = simulate_window(&net, &traffic, &links, &config, 0).unwrap();
        // With no initial customers the first transition is an arrival.
        assert!(trace.occupancy[0][0] > 0.0);
        assert_eq!(trace.link_counts[1][1] + trace.link_counts[1][0] + trace.link_counts[0][1],
            trace.total_transitions());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (net, traffic) = feedback();
        let links = loop_links();
        let bad_window = SimConfig::new(0.0);
        assert!(matches!(
            simulate_window(&net, &traffic, &links, &bad_window, 0),
            Err(SimError::InvalidConfig(_))
        ));
        let bad_reps = SimConfig {
            replicates: 0,
            ..SimConfig::new(1.0)
        };
        assert!(matches!(
            replicate_counts_seq(&net, &traffic, &links, &bad_reps),
            Err(SimError::InvalidConfig(_))
        ));
    }
}
