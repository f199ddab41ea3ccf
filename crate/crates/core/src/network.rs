//! Network specification, validation, traffic equations, and the
//! product-form stationary law of the queue-length process.
//!
//! Queues are numbered `1..=J` in link coordinates and node `0` is the
//! outside world that customers arrive from and depart to. Internal
//! vectors are zero-based over queues; every public accessor that takes
//! a queue number uses the one-based link convention.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Tolerance for `sum_k lambda[j][k] + mu[j] = 1` per queue.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Relative margin required of bounded-effort queues: `alpha_j` must stay
/// below `sup phi_j` by at least this factor.
pub const STABILITY_MARGIN: f64 = 1e-9;
/// Default stationary-series truncation tolerance.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

/// A directed link between nodes of the extended network; node 0 is the
/// outside. Serialized as a two-element array `[from, to]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link(pub usize, pub usize);

impl Link {
    /// Source node, `0..=J`.
    pub fn from_node(self) -> usize {
        self.0
    }

    /// Destination node, `0..=J`.
    pub fn to_node(self) -> usize {
        self.1
    }

    /// True when either endpoint is the outside node.
    pub fn touches_outside(self) -> bool {
        self.0 == 0 || self.1 == 0
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("queue {queue}: routing plus exit probabilities sum to {sum}, expected 1")]
    RowSumViolation { queue: usize, sum: f64 },
    #[error("network is not irreducible; queues without a two-way connection to the outside: {queues:?}")]
    NotIrreducible { queues: Vec<usize> },
    #[error("queue {queue} is unstable: arrival rate {arrival_rate} >= peak service effort {effort_sup}")]
    Unstable {
        queue: usize,
        arrival_rate: f64,
        effort_sup: f64,
    },
    #[error("queue {queue}: service effort must be nondecreasing with phi(1) > 0")]
    NonMonotoneServiceEffort { queue: usize },
    #[error("traffic equations are numerically singular")]
    SingularSystem,
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("link set must be nonempty")]
    EmptyLinkSet,
    #[error("link {link} is out of range for a network with {queues} queues")]
    LinkOutOfRange { link: Link, queues: usize },
    #[error("(0, 0) is not a link")]
    OutsideSelfLoop,
    #[error("link {link} carries no traffic")]
    ZeroFlowLink { link: Link },
}

/// State-dependent service effort `phi(m)`: the total rate at which a
/// queue completes services when it holds `m` customers. `phi(0) = 0`
/// always; the shapes below fix `phi(m)` for `m >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServiceEffort {
    /// `phi(m) = rate` for every `m >= 1` (single exponential server).
    Constant { rate: f64 },
    /// `phi(m) = rates[m - 1]` while `m <= rates.len()`, then constant at
    /// the final entry. Covers multi-server queues via a nondecreasing
    /// ramp.
    Ramp { rates: Vec<f64> },
    /// `phi(m) = rate * m` (infinite-server queue).
    Linear { rate: f64 },
}

impl ServiceEffort {
    /// Effort with `occupancy` customers present.
    pub fn rate_at(&self, occupancy: usize) -> f64 {
        if occupancy == 0 {
            return 0.0;
        }
        match self {
            ServiceEffort::Constant { rate } => *rate,
            ServiceEffort::Ramp { rates } => {
                let idx = occupancy.min(rates.len());
                rates[idx - 1]
            }
            ServiceEffort::Linear { rate } => rate * occupancy as f64,
        }
    }

    /// Least upper bound of the effort; infinite for the linear shape.
    pub fn sup(&self) -> f64 {
        match self {
            ServiceEffort::Constant { rate } => *rate,
            ServiceEffort::Ramp { rates } => *rates.last().unwrap_or(&0.0),
            ServiceEffort::Linear { .. } => f64::INFINITY,
        }
    }

    /// True once the effort is constant from `occupancy` onward.
    fn plateau_reached(&self, occupancy: usize) -> bool {
        match self {
            ServiceEffort::Constant { .. } => true,
            ServiceEffort::Ramp { rates } => occupancy >= rates.len(),
            ServiceEffort::Linear { .. } => false,
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            ServiceEffort::Constant { rate } | ServiceEffort::Linear { rate } => {
                rate.is_finite() && *rate > 0.0
            }
            ServiceEffort::Ramp { rates } => {
                !rates.is_empty()
                    && rates.iter().all(|r| r.is_finite())
                    && rates[0] > 0.0
                    && rates.windows(2).all(|w| w[0] <= w[1])
            }
        }
    }
}

/// One queue of the network: exogenous Poisson arrival rate `nu`, exit
/// probability `mu` after a service completion, and the service effort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSpec {
    #[serde(rename = "nu")]
    pub exogenous_rate: f64,
    #[serde(rename = "mu")]
    pub exit_prob: f64,
    pub service: ServiceEffort,
}

/// Raw network specification: per-queue data plus the routing matrix
/// `routing[i][j]`, the probability that a customer finishing service at
/// queue `i + 1` joins queue `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub queues: Vec<QueueSpec>,
    pub routing: Vec<Vec<f64>>,
}

impl NetworkSpec {
    pub fn queue_count(&self) -> usize {
        self.queues.len()
    }

    /// Total exogenous arrival rate `sum_j nu_j`.
    pub fn total_exogenous_rate(&self) -> f64 {
        self.queues.iter().map(|q| q.exogenous_rate).sum()
    }
}

/// A specification that passed structural, irreducibility, and stability
/// checks. `stability_margin[j]` is `sup phi_j - alpha_j` (infinite for
/// linear effort).
#[derive(Debug, Clone)]
pub struct ValidatedNetwork {
    spec: NetworkSpec,
    stability_margin: Vec<f64>,
}

impl ValidatedNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn queue_count(&self) -> usize {
        self.spec.queue_count()
    }

    /// Slack between peak effort and arrival rate, zero-based per queue.
    pub fn stability_margins(&self) -> &[f64] {
        &self.stability_margin
    }
}

/// Checks a raw specification and promotes it to a [`ValidatedNetwork`].
///
/// Rejects malformed rates, non-normalized switching rows, service
/// efforts that are not nondecreasing, networks where some queue is not
/// connected to the outside in both directions, and queues whose
/// effective arrival rate reaches their peak service effort.
pub fn validate_network(spec: NetworkSpec) -> Result<ValidatedNetwork, NetworkError> {
    let j = spec.queue_count();
    if j == 0 {
        return Err(NetworkError::InvalidSpec("no queues".into()));
    }
    if spec.routing.len() != j || spec.routing.iter().any(|row| row.len() != j) {
        return Err(NetworkError::InvalidSpec(format!(
            "routing matrix must be {j} x {j}"
        )));
    }
    for (i, q) in spec.queues.iter().enumerate() {
        let queue = i + 1;
        if !q.exogenous_rate.is_finite() || q.exogenous_rate < 0.0 {
            return Err(NetworkError::InvalidSpec(format!(
                "queue {queue}: nu must be finite and nonnegative"
            )));
        }
        if !q.exit_prob.is_finite() || !(0.0..=1.0).contains(&q.exit_prob) {
            return Err(NetworkError::InvalidSpec(format!(
                "queue {queue}: mu must lie in [0, 1]"
            )));
        }
        if !q.service.is_valid() {
            return Err(NetworkError::NonMonotoneServiceEffort { queue });
        }
    }
    for (i, row) in spec.routing.iter().enumerate() {
        let queue = i + 1;
        if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(NetworkError::InvalidSpec(format!(
                "queue {queue}: routing probabilities must lie in [0, 1]"
            )));
        }
        let sum: f64 = row.iter().sum::<f64>() + spec.queues[i].exit_prob;
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(NetworkError::RowSumViolation { queue, sum });
        }
    }
    if spec.total_exogenous_rate() <= 0.0 {
        return Err(NetworkError::InvalidSpec(
            "total exogenous arrival rate must be positive".into(),
        ));
    }

    check_irreducible(&spec)?;

    // Stability needs the effective arrival rates.
    let arrival = solve_arrival_rates(&spec)?;
    let mut stability_margin = Vec::with_capacity(j);
    for (i, q) in spec.queues.iter().enumerate() {
        let sup = q.service.sup();
        if sup.is_finite() && arrival[i] >= sup * (1.0 - STABILITY_MARGIN) {
            return Err(NetworkError::Unstable {
                queue: i + 1,
                arrival_rate: arrival[i],
                effort_sup: sup,
            });
        }
        stability_margin.push(sup - arrival[i]);
    }

    Ok(ValidatedNetwork {
        spec,
        stability_margin,
    })
}

/// Every queue must be reachable from the outside and must reach the
/// outside, following edges of positive probability.
fn check_irreducible(spec: &NetworkSpec) -> Result<(), NetworkError> {
    let j = spec.queue_count();
    let forward_from_outside = reach(j, |node| {
        let mut next = Vec::new();
        if node == 0 {
            for (i, q) in spec.queues.iter().enumerate() {
                if q.exogenous_rate > 0.0 {
                    next.push(i + 1);
                }
            }
        } else {
            for (k, &p) in spec.routing[node - 1].iter().enumerate() {
                if p > 0.0 {
                    next.push(k + 1);
                }
            }
        }
        next
    });
    let backward_from_outside = reach(j, |node| {
        let mut next = Vec::new();
        if node == 0 {
            for (i, q) in spec.queues.iter().enumerate() {
                if q.exit_prob > 0.0 {
                    next.push(i + 1);
                }
            }
        } else {
            for i in 0..j {
                if spec.routing[i][node - 1] > 0.0 {
                    next.push(i + 1);
                }
            }
        }
        next
    });

    let bad: Vec<usize> = (1..=j)
        .filter(|&q| !forward_from_outside[q] || !backward_from_outside[q])
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(NetworkError::NotIrreducible { queues: bad })
    }
}

fn reach(j: usize, neighbours: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
    let mut seen = vec![false; j + 1];
    seen[0] = true;
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        for next in neighbours(node) {
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// Solves `alpha = nu + lambda^T alpha` with one refinement pass.
fn solve_arrival_rates(spec: &NetworkSpec) -> Result<Vec<f64>, NetworkError> {
    let j = spec.queue_count();
    let a: Vec<Vec<f64>> = (0..j)
        .map(|row| {
            (0..j)
                .map(|col| {
                    let delta = if row == col { 1.0 } else { 0.0 };
                    delta - spec.routing[col][row]
                })
                .collect()
        })
        .collect();
    let b: Vec<f64> = spec.queues.iter().map(|q| q.exogenous_rate).collect();

    let mut x = linalg::solve(&a, &b).ok_or(NetworkError::SingularSystem)?;
    let scale = b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if linalg::residual(&a, &x, &b) > 0.5e-12 * scale {
        let r: Vec<f64> = (0..j)
            .map(|i| {
                let ax: f64 = a[i].iter().zip(&x).map(|(&aij, &xj)| aij * xj).sum();
                b[i] - ax
            })
            .collect();
        let dx = linalg::solve(&a, &r).ok_or(NetworkError::SingularSystem)?;
        for (xi, di) in x.iter_mut().zip(dx) {
            *xi += di;
        }
    }
    if linalg::residual(&a, &x, &b) > 1e-12 * scale {
        return Err(NetworkError::SingularSystem);
    }
    if x.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(NetworkError::SingularSystem);
    }
    Ok(x)
}

/// Effective arrival rates and equilibrium flow rates of a validated
/// network.
///
/// `flow_rate(Link(j, k))` is the stationary rate of customer moves over
/// that link: `nu_k` for arrivals `(0, k)`, `alpha_j * mu_j` for exits
/// `(j, 0)`, and `alpha_j * lambda[j][k]` between queues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficSolution {
    arrival_rates: Vec<f64>,
    flow_rates: Vec<Vec<f64>>,
    /// Max-norm residual of the traffic equations at the returned rates.
    pub residual: f64,
}

impl TrafficSolution {
    /// Effective arrival rate of `queue` (one-based).
    pub fn alpha(&self, queue: usize) -> f64 {
        assert!(
            (1..=self.arrival_rates.len()).contains(&queue),
            "queue {queue} out of range"
        );
        self.arrival_rates[queue - 1]
    }

    /// Zero-based slice of all effective arrival rates.
    pub fn arrival_rates(&self) -> &[f64] {
        &self.arrival_rates
    }

    pub fn queue_count(&self) -> usize {
        self.arrival_rates.len()
    }

    /// Equilibrium flow rate `rho_{jk}` of a link.
    pub fn flow_rate(&self, link: Link) -> f64 {
        self.flow_rates[link.0][link.1]
    }

    /// Full `(J + 1) x (J + 1)` flow-rate matrix, outside node included.
    pub fn flow_matrix(&self) -> &[Vec<f64>] {
        &self.flow_rates
    }

    /// Aggregate flow rate `rho_C` of a link set.
    pub fn total_flow(&self, links: &LinkSet) -> f64 {
        links.links().iter().map(|&l| self.flow_rate(l)).sum()
    }
}

/// Solves the traffic equations `alpha_j = nu_j + sum_i alpha_i
/// lambda[i][j]` and tabulates every link's equilibrium flow rate.
pub fn solve_traffic(net: &ValidatedNetwork) -> Result<TrafficSolution, NetworkError> {
    let spec = net.spec();
    let j = spec.queue_count();
    let arrival = solve_arrival_rates(spec)?;

    let a: Vec<Vec<f64>> = (0..j)
        .map(|row| {
            (0..j)
                .map(|col| {
                    let delta = if row == col { 1.0 } else { 0.0 };
                    delta - spec.routing[col][row]
                })
                .collect()
        })
        .collect();
    let b: Vec<f64> = spec.queues.iter().map(|q| q.exogenous_rate).collect();
    let residual = linalg::residual(&a, &arrival, &b);

    let mut flow = vec![vec![0.0; j + 1]; j + 1];
    for k in 1..=j {
        flow[0][k] = spec.queues[k - 1].exogenous_rate;
    }
    for i in 1..=j {
        flow[i][0] = arrival[i - 1] * spec.queues[i - 1].exit_prob;
        for k in 1..=j {
            flow[i][k] = arrival[i - 1] * spec.routing[i - 1][k - 1];
        }
    }

    Ok(TrafficSolution {
        arrival_rates: arrival,
        flow_rates: flow,
        residual,
    })
}

/// Truncated stationary queue-length pmf of one queue.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDist {
    /// Queue number, one-based.
    pub queue: usize,
    /// `probs[k] = P(N = k)` for `k <= truncation`.
    pub probs: Vec<f64>,
    /// Upper bound on the normalized mass beyond the truncation point.
    pub tail_bound: f64,
    /// Normalizing constant of the unnormalized series.
    pub normalizer: f64,
    /// Largest retained occupancy.
    pub truncation: usize,
}

impl StationaryDist {
    /// Mean of the truncated pmf.
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * p)
            .sum()
    }

    /// Inverse-cdf sample; consumes exactly one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return k;
            }
        }
        self.truncation
    }
}

/// Stationary law of one queue: `P(N = k)` proportional to
/// `alpha^k / prod_{r=1}^{k} phi(r)`, truncated once a geometric bound on
/// the remaining mass drops below `tail_tol` relative to the partial sum.
pub fn stationary_queue_dist(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    queue: usize,
    tail_tol: f64,
) -> Result<StationaryDist, NetworkError> {
    let alpha = traffic.alpha(queue);
    let effort = &net.spec().queues[queue - 1].service;
    const MAX_TERMS: usize = 50_000_000;

    let mut weights = vec![1.0f64];
    let mut z = 1.0f64;
    let mut tail = f64::INFINITY;
    let mut k = 0usize;
    while tail > tail_tol * z {
        k += 1;
        if k > MAX_TERMS {
            return Err(NetworkError::Unstable {
                queue,
                arrival_rate: alpha,
                effort_sup: effort.sup(),
            });
        }
        let w = weights[k - 1] * (alpha / effort.rate_at(k));
        weights.push(w);
        z += w;
        let next_ratio = alpha / effort.rate_at(k + 1);
        if next_ratio < 1.0 - STABILITY_MARGIN {
            tail = w * next_ratio / (1.0 - next_ratio);
        } else if effort.plateau_reached(k + 1) {
            // Term ratio stays >= 1 from here on: the series diverges.
            return Err(NetworkError::Unstable {
                queue,
                arrival_rate: alpha,
                effort_sup: effort.sup(),
            });
        }
    }
    while weights.len() > 1 && *weights.last().unwrap() == 0.0 {
        weights.pop();
    }
    let truncation = weights.len() - 1;
    let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
    Ok(StationaryDist {
        queue,
        probs,
        tail_bound: tail / z,
        normalizer: z,
        truncation,
    })
}

/// Samples one stationary occupancy per queue; queues are independent
/// under the product-form law. Consumes exactly one uniform per queue.
pub fn sample_stationary_state<R: Rng + ?Sized>(
    dists: &[StationaryDist],
    rng: &mut R,
) -> Vec<usize> {
    dists.iter().map(|d| d.sample(rng)).collect()
}

/// Nonempty, sorted, deduplicated set of in-range links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LinkSet {
    links: Vec<Link>,
}

impl LinkSet {
    /// Validates and normalizes a collection of links for a network with
    /// `queue_count` queues.
    pub fn new(
        links: impl IntoIterator<Item = Link>,
        queue_count: usize,
    ) -> Result<Self, NetworkError> {
        let mut links: Vec<Link> = links.into_iter().collect();
        if links.is_empty() {
            return Err(NetworkError::EmptyLinkSet);
        }
        for &link in &links {
            if link == Link(0, 0) {
                return Err(NetworkError::OutsideSelfLoop);
            }
            if link.0 > queue_count || link.1 > queue_count {
                return Err(NetworkError::LinkOutOfRange {
                    link,
                    queues: queue_count,
                });
            }
        }
        links.sort_unstable();
        links.dedup();
        Ok(LinkSet { links })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, link: Link) -> bool {
        self.links.binary_search(&link).is_ok()
    }

    /// True when any link has an outside endpoint; such links never see
    /// repeat crossings from the outside side of the route.
    pub fn touches_outside(&self) -> bool {
        self.links.iter().any(|l| l.touches_outside())
    }

    /// Every monitored link must carry positive equilibrium flow.
    pub fn ensure_positive_flow(&self, traffic: &TrafficSolution) -> Result<(), NetworkError> {
        for &link in &self.links {
            if traffic.flow_rate(link) <= 0.0 {
                return Err(NetworkError::ZeroFlowLink { link });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feedback(service_rate: f64) -> NetworkSpec {
        NetworkSpec {
            queues: vec![QueueSpec {
                exogenous_rate: 1.0,
                exit_prob: 0.8,
                service: ServiceEffort::Constant { rate: service_rate },
            }],
            routing: vec![vec![0.2]],
        }
    }

    fn tandem() -> NetworkSpec {
        NetworkSpec {
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
        }
    }

    #[test]
    fn accepts_tandem() {
        let net = validate_network(tandem()).unwrap();
        assert_eq!(net.queue_count(), 2);
        assert_abs_diff_eq!(net.stability_margins()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_row_sum() {
        let mut spec = feedback(5.0);
        spec.routing[0][0] = 0.3; // row sums to 1.1 with mu = 0.8
        match validate_network(spec) {
            Err(NetworkError::RowSumViolation { queue: 1, sum }) => {
                assert_abs_diff_eq!(sum, 1.1, epsilon = 1e-12);
            }
            other => panic!("expected row-sum violation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unstable_queue() {
        // alpha = 1 / 0.8 = 1.25 exceeds unit service effort.
        match validate_network(feedback(1.0)) {
            Err(NetworkError::Unstable { queue: 1, .. }) => {}
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unreachable_queue() {
        let spec = NetworkSpec {
            queues: vec![
                QueueSpec {
                    exogenous_rate: 1.0,
                    exit_prob: 1.0,
                    service: ServiceEffort::Constant { rate: 2.0 },
                },
                QueueSpec {
                    exogenous_rate: 0.0,
                    exit_prob: 1.0,
                    service: ServiceEffort::Constant { rate: 2.0 },
                },
            ],
            routing: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        match validate_network(spec) {
            Err(NetworkError::NotIrreducible { queues }) => assert_eq!(queues, vec![2]),
            other => panic!("expected irreducibility failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_monotone_effort() {
        let spec = NetworkSpec {
            queues: vec![QueueSpec {
                exogenous_rate: 1.0,
                exit_prob: 1.0,
                service: ServiceEffort::Ramp {
                    rates: vec![3.0, 2.0],
                },
            }],
            routing: vec![vec![0.0]],
        };
        match validate_network(spec) {
            Err(NetworkError::NonMonotoneServiceEffort { queue: 1 }) => {}
            other => panic!("expected effort rejection, got {other:?}"),
        }
    }

    #[test]
    fn feedback_traffic_rates() {
        let net = validate_network(feedback(5.0)).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        assert_abs_diff_eq!(traffic.alpha(1), 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.flow_rate(Link(0, 1)), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.flow_rate(Link(1, 1)), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.flow_rate(Link(1, 0)), 1.0, epsilon = 1e-12);
        assert!(traffic.residual < 1e-12);
    }

    #[test]
    fn tandem_traffic_rates() {
        let net = validate_network(tandem()).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        assert_abs_diff_eq!(traffic.alpha(1), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.alpha(2), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.flow_rate(Link(1, 2)), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traffic.flow_rate(Link(2, 0)), 1.0, epsilon = 1e-12);
        assert_eq!(traffic.flow_rate(Link(2, 1)), 0.0);
    }

    #[test]
    fn flow_is_conserved_at_each_queue() {
        let spec = NetworkSpec {
            queues: vec![
                QueueSpec {
                    exogenous_rate: 0.7,
                    exit_prob: 0.5,
                    service: ServiceEffort::Constant { rate: 4.0 },
                },
                QueueSpec {
                    exogenous_rate: 0.3,
                    exit_prob: 0.25,
                    service: ServiceEffort::Linear { rate: 1.5 },
                },
            ],
            routing: vec![vec![0.1, 0.4], vec![0.5, 0.25]],
        };
        let net = validate_network(spec).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        let j = net.queue_count();
        for q in 1..=j {
            let inflow: f64 = (0..=j).map(|i| traffic.flow_rate(Link(i, q))).sum();
            let outflow: f64 = (0..=j).map(|k| traffic.flow_rate(Link(q, k))).sum();
            assert_abs_diff_eq!(inflow, outflow, epsilon = 1e-12);
            assert_abs_diff_eq!(inflow, traffic.alpha(q), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_queue_without_feedback_has_alpha_nu() {
        let spec = NetworkSpec {
            queues: vec![QueueSpec {
                exogenous_rate: 0.4,
                exit_prob: 1.0,
                service: ServiceEffort::Constant { rate: 1.0 },
            }],
            routing: vec![vec![0.0]],
        };
        let net = validate_network(spec).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        assert_abs_diff_eq!(traffic.alpha(1), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn stationary_matches_geometric_closed_form() {
        let net = validate_network(feedback(5.0)).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        let dist = stationary_queue_dist(&net, &traffic, 1, 1e-12).unwrap();
        let rho: f64 = 0.25;
        for (k, p) in dist.probs.iter().enumerate() {
            let exact = (1.0 - rho) * rho.powi(k as i32);
            assert_abs_diff_eq!(*p, exact, epsilon = 1e-12);
        }
        let total: f64 = dist.probs.iter().sum();
        assert!((total + dist.tail_bound - 1.0).abs() < 1e-9);
        assert!(dist.tail_bound < 1e-11);
        assert_abs_diff_eq!(dist.mean(), rho / (1.0 - rho), epsilon = 1e-9);
    }

    #[test]
    fn stationary_linear_effort_is_poisson() {
        let spec = NetworkSpec {
            queues: vec![QueueSpec {
                exogenous_rate: 3.0,
                exit_prob: 1.0,
                service: ServiceEffort::Linear { rate: 2.0 },
            }],
            routing: vec![vec![0.0]],
        };
        let net = validate_network(spec).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        let dist = stationary_queue_dist(&net, &traffic, 1, 1e-12).unwrap();
        // Occupancy is Poisson(alpha / rate) = Poisson(1.5).
        let lambda: f64 = 1.5;
        let mut expect = (-lambda).exp();
        for (k, p) in dist.probs.iter().enumerate() {
            assert_abs_diff_eq!(*p, expect, epsilon = 1e-12);
            expect *= lambda / (k + 1) as f64;
        }
    }

    #[test]
    fn sampling_is_deterministic_and_unbiased() {
        let net = validate_network(feedback(5.0)).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        let dist = stationary_queue_dist(&net, &traffic, 1, 1e-12).unwrap();

        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<usize> = (0..100).map(|_| dist.sample(&mut a)).collect();
        let ys: Vec<usize> = (0..100).map(|_| dist.sample(&mut b)).collect();
        assert_eq!(xs, ys);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000usize;
        let sum: usize = (0..n).map(|_| dist.sample(&mut rng)).sum();
        let mean = sum as f64 / n as f64;
        // Geometric(0.25): mean 1/3, sd ~ 0.667; three standard errors.
        assert!((mean - 1.0 / 3.0).abs() < 3.0 * 0.667 / (n as f64).sqrt());
    }

    #[test]
    fn link_set_validates_and_sorts() {
        let set = LinkSet::new([Link(1, 1), Link(0, 1), Link(1, 1)], 1).unwrap();
        assert_eq!(set.links(), &[Link(0, 1), Link(1, 1)]);
        assert!(set.contains(Link(1, 1)));
        assert!(!set.contains(Link(1, 0)));
        assert!(set.touches_outside());

        assert!(matches!(
            LinkSet::new([], 1),
            Err(NetworkError::EmptyLinkSet)
        ));
        assert!(matches!(
            LinkSet::new([Link(0, 0)], 1),
            Err(NetworkError::OutsideSelfLoop)
        ));
        assert!(matches!(
            LinkSet::new([Link(2, 1)], 1),
            Err(NetworkError::LinkOutOfRange { .. })
        ));
    }

    #[test]
    fn link_set_rejects_zero_flow() {
        let net = validate_network(tandem()).unwrap();
        let traffic = solve_traffic(&net).unwrap();
        let set = LinkSet::new([Link(2, 1)], 2).unwrap();
        assert!(matches!(
            set.ensure_positive_flow(&traffic),
            Err(NetworkError::ZeroFlowLink { .. })
        ));
        let ok = LinkSet::new([Link(1, 2)], 2).unwrap();
        assert!(ok.ensure_positive_flow(&traffic).is_ok());
    }

    #[test]
    fn link_serializes_as_pair() {
        let json = serde_json::to_string(&Link(1, 2)).unwrap();
        assert_eq!(json, "[1,2]");
        let back: Link = serde_json::from_str("[0,3]").unwrap();
        assert_eq!(back, Link(0, 3));
    }
}
