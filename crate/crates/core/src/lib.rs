//! Customer-flow analytics for open Jackson queueing networks.
//!
//! The crate solves the traffic equations of an open network of
//! exponential queues, derives the forward and backward customer chains,
//! and computes exact loop statistics for a monitored set of links: the
//! probability `w_C` that a crossing customer crosses the set only once,
//! the mean number `eps_C` of extra crossings, and the second factorial
//! moment `sigma_C` of the extra crossings. A discrete-event simulator
//! samples equilibrium flow counts over a time window with per-customer
//! identity tracking, and the statistics layer compares the counts
//! against moment-matched negative binomial and Poisson laws, with
//! explicit total-variation error bounds that shrink like `1/sqrt(t)`.
//!
//! Replicated simulation and the bootstrap run in parallel via rayon
//! when the `parallel` feature (default) is enabled; disabling it yields
//! a fully sequential build with bit-identical outputs.

pub mod network;
pub mod nb;
pub mod routes;
pub mod sim;
pub mod stats;

mod linalg;

pub use network::{
    sample_stationary_state, solve_traffic, stationary_queue_dist, validate_network, Link,
    LinkSet, NetworkError, NetworkSpec, QueueSpec, ServiceEffort, StationaryDist,
    TrafficSolution, ValidatedNetwork,
};
pub use nb::{
    asymptotic_moments, bound_full, bound_simplified, cluster_bounds, nb_params_from_moments,
    nb_pmf, poisson_pmf, shift_bound, BoundInputs, BoundReport, ClusterBounds, CountModel,
    FullBound, NbError, NbParams,
};
pub use routes::{
    backward_chain, crossing_moments, forward_chain, link_stats, route_oracle, ChainDirection,
    CrossingMoments, LinkStat, LinkStats, OracleMoments, RouteChain, RouteError,
};
#[cfg(feature = "parallel")]
pub use sim::replicate_counts_par;
pub use sim::{
    cluster_diagnostics, replicate_counts, replicate_counts_seq, simulate_window, ClusterSummary,
    CountSamples, FlowEvent, FlowTrace, InitMode, SimConfig, SimError,
};
pub use stats::{
    empirical_pmf, mc_noise_floor, moments, overdispersion_test, shift_tv, tv_distance,
    BootstrapConfig, DispersionReport, DispersionVerdict, MomentSummary, Pmf, StatsError,
    TvEstimate,
};
