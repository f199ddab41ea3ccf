//! Customer route chains and exact crossing statistics for a monitored
//! link set.
//!
//! A customer's successive positions form a Markov chain on `{0, .., J}`
//! with the outside node 0 absorbing at both ends of the route. The
//! forward chain follows the customer downstream; the backward chain is
//! its time reversal under the equilibrium flow rates and follows the
//! route upstream. Fix a link set `C` and a tagged crossing of a link
//! `(j, k)` in `C`. The route's remaining crossings of `C` split into an
//! independent past part, read off the backward chain started at `j`,
//! and a future part, read off the forward chain started at `k`.
//!
//! For either chain, let `N` be the number of crossings of `C` on the
//! rest of the route. Three per-state quantities close under one step:
//! the no-crossing probability `f(s) = P(N = 0)`, the mean `m1(s) =
//! E[N]`, and the second factorial moment `s2(s) = E[N (N - 1)]`. If the
//! first step `s -> l` crosses `C` (indicator `X`), then `N = X + N'`
//! with `N'` the count from `l`, so
//!
//! ```text
//! f(s)  = sum_l p(s, l) [X = 0] f(l)
//! m1(s) = sum_l p(s, l) (X + m1(l))
//! s2(s) = sum_l p(s, l) (s2(l) + 2 X m1(l))
//! ```
//!
//! with terminal values `f(0) = 1`, `m1(0) = s2(0) = 0`. Each recursion
//! is a linear system over states `1..=J`, solved exactly.
//!
//! Combining both directions at a tagged crossing of `(j, k)`: with `P`
//! past and `F` future crossings, the route crosses `C` a total of
//! `xi = 1 + P + F` times, so the single-crossing probability is
//! `w = f*(j) f(k)`, the mean extra-crossing count is `eps = m1*(j) +
//! m1(k)`, and the second factorial moment of `xi` is
//! `sigma = E[xi (xi - 1)] = s2*(j) + s2(k) + 2 m1*(j) m1(k) + 2 eps`
//! (starred quantities from the backward chain). Flow-weighted averages
//! over the links of `C` give the set-level `w_C`, `eps_C`, `sigma_C`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::network::{Link, LinkSet, NetworkError, TrafficSolution, ValidatedNetwork};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("route-chain moment system is numerically singular")]
    SingularSystem,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(
        "depth {depth} leaves residual route mass {residual:.3e}; \
         worst error bound {bound:.3e} exceeds tolerance {tol:.3e}"
    )]
    DepthTooSmall {
        depth: usize,
        residual: f64,
        bound: f64,
        tol: f64,
    },
}

/// Direction a route chain walks the customer's itinerary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainDirection {
    Forward,
    Backward,
}

/// Absorbing Markov chain over `{0, .., J}` describing a customer route.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteChain {
    direction: ChainDirection,
    /// `transitions[s][l]` for `s, l` in `0..=J`; row 0 starts a route
    /// from the outside, and entering state 0 ends it.
    transitions: Vec<Vec<f64>>,
}

impl RouteChain {
    pub fn direction(&self) -> ChainDirection {
        self.direction
    }

    pub fn queue_count(&self) -> usize {
        self.transitions.len() - 1
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transitions[from][to]
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    /// Forward link crossed when this chain steps `from -> to`. A
    /// backward step `s -> i` retraces the forward move `i -> s`.
    pub fn crossed_link(&self, from: usize, to: usize) -> Link {
        match self.direction {
            ChainDirection::Forward => Link(from, to),
            ChainDirection::Backward => Link(to, from),
        }
    }

    fn assert_stochastic(self) -> Self {
        debug_assert!(self.transitions[0][0] == 0.0);
        debug_assert!(self
            .transitions
            .iter()
            .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        self
    }
}

/// Downstream route chain: from the outside a route enters queue `k`
/// with probability `nu_k / sum nu`; from queue `j` it moves to `k` with
/// the routing probability and exits with `mu_j`.
pub fn forward_chain(net: &ValidatedNetwork) -> RouteChain {
    let spec = net.spec();
    let j = spec.queue_count();
    let total = spec.total_exogenous_rate();
    let mut transitions = vec![vec![0.0; j + 1]; j + 1];
    for k in 1..=j {
        transitions[0][k] = spec.queues[k - 1].exogenous_rate / total;
    }
    for s in 1..=j {
        transitions[s][0] = spec.queues[s - 1].exit_prob;
        for k in 1..=j {
            transitions[s][k] = spec.routing[s - 1][k - 1];
        }
    }
    RouteChain {
        direction: ChainDirection::Forward,
        transitions,
    }
    .assert_stochastic()
}

/// Upstream route chain: the time reversal of the forward chain under
/// the equilibrium flows. From queue `k` the route came from queue `j`
/// with probability `alpha_j lambda[j][k] / alpha_k` and from the
/// outside with `nu_k / alpha_k`; from the outside (a departed
/// customer) it came from queue `j` with probability proportional to
/// the exit flow `alpha_j mu_j`.
pub fn backward_chain(net: &ValidatedNetwork, traffic: &TrafficSolution) -> RouteChain {
    let spec = net.spec();
    let j = spec.queue_count();
    let exit_total: f64 = (1..=j).map(|q| traffic.flow_rate(Link(q, 0))).sum();
    let mut transitions = vec![vec![0.0; j + 1]; j + 1];
    for q in 1..=j {
        transitions[0][q] = traffic.flow_rate(Link(q, 0)) / exit_total;
    }
    for k in 1..=j {
        let alpha_k = traffic.alpha(k);
        transitions[k][0] = spec.queues[k - 1].exogenous_rate / alpha_k;
        for q in 1..=j {
            transitions[k][q] = traffic.flow_rate(Link(q, k)) / alpha_k;
        }
    }
    RouteChain {
        direction: ChainDirection::Backward,
        transitions,
    }
    .assert_stochastic()
}

/// Per-state crossing moments of one chain against a link set, indexed
/// by state `0..=J` with terminal values at index 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingMoments {
    /// `P(no further crossing of C | state s)`; index 0 holds 1.
    pub no_crossing: Vec<f64>,
    /// Expected number of further crossings; index 0 holds 0.
    pub expected: Vec<f64>,
    /// Second factorial moment of the further-crossing count.
    pub factorial2: Vec<f64>,
}

/// Solves the three moment systems for `chain` against `links`.
pub fn crossing_moments(
    chain: &RouteChain,
    links: &LinkSet,
) -> Result<CrossingMoments, RouteError> {
    let j = chain.queue_count();
    let mut inner = vec![vec![0.0; j]; j]; // p(s, l) for l >= 1
    let mut inner_nc = vec![vec![0.0; j]; j]; // same, non-crossing steps only
    let mut b_f = vec![0.0; j];
    let mut b_m1 = vec![0.0; j];
    for s in 1..=j {
        for l in 0..=j {
            let p = chain.prob(s, l);
            if p == 0.0 {
                continue;
            }
            let crossing = links.contains(chain.crossed_link(s, l));
            if crossing {
                b_m1[s - 1] += p;
            }
            if l == 0 {
                if !crossing {
                    b_f[s - 1] += p;
                }
            } else {
                inner[s - 1][l - 1] += p;
                if !crossing {
                    inner_nc[s - 1][l - 1] += p;
                }
            }
        }
    }

    let f = linalg::solve_i_minus(&inner_nc, &b_f).ok_or(RouteError::SingularSystem)?;
    let m1 = linalg::solve_i_minus(&inner, &b_m1).ok_or(RouteError::SingularSystem)?;

    let mut b_s2 = vec![0.0; j];
    for s in 1..=j {
        for l in 1..=j {
            let p = chain.prob(s, l);
            if p > 0.0 && links.contains(chain.crossed_link(s, l)) {
                b_s2[s - 1] += p * 2.0 * m1[l - 1];
            }
        }
    }
    let s2 = linalg::solve_i_minus(&inner, &b_s2).ok_or(RouteError::SingularSystem)?;

    let mut no_crossing = vec![1.0];
    no_crossing.extend(f.iter().map(|v| v.clamp(0.0, 1.0)));
    let mut expected = vec![0.0];
    expected.extend(m1.iter().map(|v| v.max(0.0)));
    let mut factorial2 = vec![0.0];
    factorial2.extend(s2.iter().map(|v| v.max(0.0)));
    Ok(CrossingMoments {
        no_crossing,
        expected,
        factorial2,
    })
}

/// Exact crossing statistics of one monitored link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkStat {
    pub link: Link,
    /// Equilibrium flow rate `rho_{jk}`.
    pub flow_rate: f64,
    /// Probability `w` that a route crossing here crosses `C` only once.
    pub single_visit_prob: f64,
    /// Mean number `eps` of extra crossings of `C` on the same route.
    pub extra_visits_mean: f64,
    /// Second factorial moment `sigma` of the route's total crossings.
    pub extra_visits_factorial2: f64,
}

/// Exact crossing statistics of a link set, per link and flow-averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkStats {
    pub per_link: Vec<LinkStat>,
    /// Aggregate flow rate `rho_C`.
    pub total_flow_rate: f64,
    /// Flow-weighted single-crossing probability `w_C`.
    pub single_visit_prob: f64,
    /// Flow-weighted mean extra crossings `eps_C`.
    pub extra_visits_mean: f64,
    /// Flow-weighted second factorial moment `sigma_C`.
    pub extra_visits_factorial2: f64,
    /// Whether any monitored link has an outside endpoint.
    pub touches_outside: bool,
}

impl LinkStats {
    /// Extra crossings are impossible exactly when `eps_C = 0`; the count
    /// of crossings in a window is then exactly Poisson.
    pub fn poisson_exact(&self) -> bool {
        self.extra_visits_mean <= 1e-12
    }
}

/// Computes per-link and aggregate crossing statistics for `links`.
pub fn link_stats(
    net: &ValidatedNetwork,
    traffic: &TrafficSolution,
    links: &LinkSet,
) -> Result<LinkStats, RouteError> {
    links.ensure_positive_flow(traffic)?;
    let fwd = crossing_moments(&forward_chain(net), links)?;
    let bwd = crossing_moments(&backward_chain(net, traffic), links)?;
    let rho_c = traffic.total_flow(links);

    let mut per_link = Vec::with_capacity(links.len());
    let mut w = 0.0;
    let mut eps = 0.0;
    let mut sigma = 0.0;
    for &link in links.links() {
        let rho = traffic.flow_rate(link);
        let (j, k) = (link.from_node(), link.to_node());
        let w_l = bwd.no_crossing[j] * fwd.no_crossing[k];
        let e_l = bwd.expected[j] + fwd.expected[k];
        let s_l = bwd.factorial2[j]
            + fwd.factorial2[k]
            + 2.0 * bwd.expected[j] * fwd.expected[k]
            + 2.0 * e_l;
        per_link.push(LinkStat {
            link,
            flow_rate: rho,
            single_visit_prob: w_l,
            extra_visits_mean: e_l,
            extra_visits_factorial2: s_l,
        });
        let weight = rho / rho_c;
        w += weight * w_l;
        eps += weight * e_l;
        sigma += weight * s_l;
    }

    Ok(LinkStats {
        per_link,
        total_flow_rate: rho_c,
        single_visit_prob: w,
        extra_visits_mean: eps,
        extra_visits_factorial2: sigma,
        touches_outside: links.touches_outside(),
    })
}

/// Depth-limited crossing moments with rigorous truncation bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleMoments {
    pub no_crossing: f64,
    pub expected: f64,
    pub factorial2: f64,
    /// Probability the route is still alive after `depth` steps.
    pub residual: f64,
    /// Truncation-error bounds for the three moments.
    pub bound_no_crossing: f64,
    pub bound_expected: f64,
    pub bound_factorial2: f64,
    pub depth: usize,
}

/// Independent oracle for [`crossing_moments`]: dynamic programming over
/// route prefixes of at most `max_depth` steps, plus geometric tail
/// bounds on what the truncation can still contribute.
///
/// Survival after `d` more steps from any state is at most
/// `q^floor(d / m)` once some block length `m` has worst-case survival
/// `q < 1`, so the expected number of steps beyond the horizon is at
/// most `residual * m / (1 - q)`, and second-moment tails follow from
/// the same geometric envelope. The bounds are crude but rigorous;
/// `DepthTooSmall` is returned when they exceed `tol`.
pub fn route_oracle(
    chain: &RouteChain,
    links: &LinkSet,
    start: usize,
    max_depth: usize,
    tol: f64,
) -> Result<OracleMoments, RouteError> {
    let j = chain.queue_count();
    assert!(start <= j, "start state {start} out of range");
    let states = j + 1;

    // Values with d steps remaining; index by state.
    let mut f = vec![1.0f64; states];
    let mut m1 = vec![0.0f64; states];
    let mut s2 = vec![0.0f64; states];
    let mut surv: Vec<f64> = (0..states).map(|s| if s == 0 { 0.0 } else { 1.0 }).collect();

    let mut block: Option<(usize, f64)> = None; // (m, q) with q <= 0.999
    for depth in 1..=max_depth {
        let mut f_next = vec![1.0; states];
        let mut m1_next = vec![0.0; states];
        let mut s2_next = vec![0.0; states];
        let mut surv_next = vec![0.0; states];
        for s in 1..=j {
            let mut fv = 0.0;
            let mut mv = 0.0;
            let mut sv = 0.0;
            let mut uv = 0.0;
            for l in 0..states {
                let p = chain.prob(s, l);
                if p == 0.0 {
                    continue;
                }
                let crossing = links.contains(chain.crossed_link(s, l));
                if !crossing {
                    fv += p * f[l];
                }
                mv += p * (if crossing { 1.0 } else { 0.0 } + m1[l]);
                sv += p * (s2[l] + if crossing { 2.0 * m1[l] } else { 0.0 });
                uv += p * surv[l];
            }
            f_next[s] = fv;
            m1_next[s] = mv;
            s2_next[s] = sv;
            surv_next[s] = uv;
        }
        f = f_next;
        m1 = m1_next;
        s2 = s2_next;
        surv = surv_next;
        if block.is_none() {
            let worst = surv[1..].iter().fold(0.0f64, |a, &v| a.max(v));
            if worst <= 0.999 {
                block = Some((depth, worst));
            }
        }
    }

    let residual = surv[start];
    let (m, q) = block.ok_or(RouteError::DepthTooSmall {
        depth: max_depth,
        residual,
        bound: f64::INFINITY,
        tol,
    })?;
    let mf = m as f64;
    // Expected steps beyond the horizon, and their second factorial
    // moment, under the geometric block envelope.
    let g1 = residual * mf / (1.0 - q);
    let g2 = residual * (mf * mf * q / (1.0 - q).powi(2) + mf * (mf - 1.0) / (2.0 * (1.0 - q)));
    let bound_no_crossing = residual;
    let bound_expected = g1;
    let bound_factorial2 = 2.0 * max_depth as f64 * g1 + 2.0 * g2;

    let worst = bound_no_crossing.max(bound_expected).max(bound_factorial2);
    if worst > tol {
        return Err(RouteError::DepthTooSmall {
            depth: max_depth,
            residual,
            bound: worst,
            tol,
        });
    }

    Ok(OracleMoments {
        no_crossing: f[start],
        expected: m1[start],
        factorial2: s2[start],
        residual,
        bound_no_crossing,
        bound_expected,
        bound_factorial2,
        depth: max_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        solve_traffic, validate_network, NetworkSpec, QueueSpec, ServiceEffort,
    };
    use approx::assert_abs_diff_eq;

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

    #[test]
    fn chains_are_stochastic_with_absorbing_outside() {
        let (net, traffic) = feedback();
        for chain in [forward_chain(&net), backward_chain(&net, &traffic)] {
            assert_eq!(chain.prob(0, 0), 0.0);
            for s in 0..=net.queue_count() {
                let sum: f64 = (0..=net.queue_count()).map(|l| chain.prob(s, l)).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn feedback_chain_is_self_dual() {
        let (net, traffic) = feedback();
        let fwd = forward_chain(&net);
        let bwd = backward_chain(&net, &traffic);
        for s in 0..=1 {
            for l in 0..=1 {
                assert_abs_diff_eq!(fwd.prob(s, l), bwd.prob(s, l), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(fwd.prob(1, 1), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(fwd.prob(1, 0), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn tandem_backward_chain_reverses_route() {
        let (net, traffic) = tandem();
        let bwd = backward_chain(&net, &traffic);
        assert_abs_diff_eq!(bwd.prob(0, 2), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bwd.prob(2, 1), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bwd.prob(1, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn feedback_loop_moments() {
        let (net, traffic) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        for chain in [forward_chain(&net), backward_chain(&net, &traffic)] {
            let m = crossing_moments(&chain, &links).unwrap();
            assert_abs_diff_eq!(m.no_crossing[1], 0.8, epsilon = 1e-12);
            assert_abs_diff_eq!(m.expected[1], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(m.factorial2[1], 0.125, epsilon = 1e-12);
            assert_eq!(m.no_crossing[0], 1.0);
            assert_eq!(m.expected[0], 0.0);
        }
    }

    #[test]
    fn feedback_link_stats() {
        let (net, traffic) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        let stats = link_stats(&net, &traffic, &links).unwrap();
        assert_abs_diff_eq!(stats.total_flow_rate, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.single_visit_prob, 0.64, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.extra_visits_mean, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.extra_visits_factorial2, 1.375, epsilon = 1e-12);
        assert!(!stats.touches_outside);
        assert!(!stats.poisson_exact());
    }

    #[test]
    fn tandem_internal_link_is_poisson_exact() {
        let (net, traffic) = tandem();
        let links = LinkSet::new([Link(1, 2)], 2).unwrap();
        let stats = link_stats(&net, &traffic, &links).unwrap();
        assert_abs_diff_eq!(stats.single_visit_prob, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.extra_visits_mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.extra_visits_factorial2, 0.0, epsilon = 1e-12);
        assert!(stats.poisson_exact());
    }

    #[test]
    fn boundary_links_are_poisson_exact() {
        let (net, traffic) = feedback();
        for link in [Link(0, 1), Link(1, 0)] {
            let links = LinkSet::new([link], 1).unwrap();
            let stats = link_stats(&net, &traffic, &links).unwrap();
            assert_abs_diff_eq!(stats.single_visit_prob, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(stats.extra_visits_mean, 0.0, epsilon = 1e-12);
            assert!(stats.touches_outside);
        }
    }

    #[test]
    fn exit_factor_dominates_exit_probability() {
        // Leaving immediately guarantees no future crossing, so the
        // forward no-crossing factor is at least the exit probability.
        let (net, _) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        let m = crossing_moments(&forward_chain(&net), &links).unwrap();
        assert!(m.no_crossing[1] >= net.spec().queues[0].exit_prob - 1e-12);
    }

    #[test]
    fn zero_flow_link_is_rejected() {
        let (net, traffic) = tandem();
        let links = LinkSet::new([Link(2, 1)], 2).unwrap();
        match link_stats(&net, &traffic, &links) {
            Err(RouteError::Network(NetworkError::ZeroFlowLink { link })) => {
                assert_eq!(link, Link(2, 1));
            }
            other => panic!("expected zero-flow rejection, got {other:?}"),
        }
    }

    #[test]
    fn oracle_matches_linear_solve_on_feedback() {
        let (net, traffic) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        for chain in [forward_chain(&net), backward_chain(&net, &traffic)] {
            let exact = crossing_moments(&chain, &links).unwrap();
            let oracle = route_oracle(&chain, &links, 1, 60, 1e-9).unwrap();
            assert_abs_diff_eq!(oracle.no_crossing, exact.no_crossing[1], epsilon = 1e-10);
            assert_abs_diff_eq!(oracle.expected, exact.expected[1], epsilon = 1e-10);
            assert_abs_diff_eq!(oracle.factorial2, exact.factorial2[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn oracle_is_exact_on_tandem_at_depth_three() {
        let (net, _) = tandem();
        let links = LinkSet::new([Link(1, 2)], 2).unwrap();
        let chain = forward_chain(&net);
        let oracle = route_oracle(&chain, &links, 1, 3, 0.0).unwrap();
        assert_eq!(oracle.residual, 0.0);
        assert_eq!(oracle.no_crossing, 0.0);
        assert_eq!(oracle.expected, 1.0);
        assert_eq!(oracle.factorial2, 0.0);
    }

    #[test]
    fn oracle_rejects_insufficient_depth() {
        let (net, _) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        let chain = forward_chain(&net);
        match route_oracle(&chain, &links, 1, 2, 1e-9) {
            Err(RouteError::DepthTooSmall { depth: 2, .. }) => {}
            other => panic!("expected depth rejection, got {other:?}"),
        }
    }

    #[test]
    fn oracle_starting_outside_is_terminal() {
        let (net, _) = feedback();
        let links = LinkSet::new([Link(1, 1)], 1).unwrap();
        let chain = forward_chain(&net);
        let oracle = route_oracle(&chain, &links, 0, 5, 1e-9).unwrap();
        assert_eq!(oracle.no_crossing, 1.0);
        assert_eq!(oracle.expected, 0.0);
        assert_eq!(oracle.residual, 0.0);
    }
}
