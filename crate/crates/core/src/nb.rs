//! Moment-matched count laws and total-variation error bounds for
//! equilibrium flow counts.
//!
//! The flow count over a window decomposes into a Poisson number of
//! route clusters whose sizes have mean `1 + eps_C` and second factorial
//! moment controlled by `sigma_C`, which makes a negative binomial the
//! natural two-moment approximation. The bounds below quantify how far
//! the count can sit from any law with matching moments: both shrink
//! like `1 / sqrt(w_C rho_C t)`, so they tighten as the window grows.

use std::f64::consts::E;

use serde::Serialize;
use thiserror::Error;

use crate::routes::LinkStats;
use crate::stats::{MomentSummary, Pmf};

/// Relative over-dispersion below which the fit falls back to Poisson.
pub const OVERDISPERSION_EPS: f64 = 1e-6;
/// Retained probability mass of a tabulated pmf.
const MASS_TARGET: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NbError {
    #[error("mean must be positive and finite, got {0}")]
    NonpositiveMean(f64),
    #[error("invalid negative binomial parameters: r = {r}, q = {q}")]
    InvalidParams { r: f64, q: f64 },
    #[error("bound denominator needs positive w, rho, t; got w = {w}, rho = {rho}, t = {t}")]
    NonpositiveDenominator { w: f64, rho: f64, t: f64 },
    #[error("invalid moment inputs: {0}")]
    InvalidMoments(String),
}

/// Negative binomial with `r > 0` successes and success probability
/// `q` in `(0, 1)`: `P(X = i) = C(r + i - 1, i) q^r (1 - q)^i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NbParams {
    pub r: f64,
    pub q: f64,
}

impl NbParams {
    pub fn new(r: f64, q: f64) -> Result<Self, NbError> {
        if !(r.is_finite() && r > 0.0 && q.is_finite() && q > 0.0 && q < 1.0) {
            return Err(NbError::InvalidParams { r, q });
        }
        Ok(NbParams { r, q })
    }

    pub fn mean(&self) -> f64 {
        self.r * (1.0 - self.q) / self.q
    }

    pub fn variance(&self) -> f64 {
        self.r * (1.0 - self.q) / (self.q * self.q)
    }
}

/// Count law fitted from a mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum CountModel {
    NegativeBinomial { r: f64, q: f64 },
    Poisson { lambda: f64 },
}

impl CountModel {
    pub fn mean(&self) -> f64 {
        match self {
            CountModel::NegativeBinomial { r, q } => NbParams { r: *r, q: *q }.mean(),
            CountModel::Poisson { lambda } => *lambda,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            CountModel::NegativeBinomial { r, q } => NbParams { r: *r, q: *q }.variance(),
            CountModel::Poisson { lambda } => *lambda,
        }
    }

    pub fn is_poisson(&self) -> bool {
        matches!(self, CountModel::Poisson { .. })
    }

    pub fn pmf(&self) -> Pmf {
        match self {
            CountModel::NegativeBinomial { r, q } => nb_pmf(&NbParams { r: *r, q: *q }),
            CountModel::Poisson { lambda } => poisson_pmf(*lambda),
        }
    }
}

/// Matches `r = mean^2 / (variance - mean)`, `q = mean / variance`.
/// Falls back to Poisson when the variance does not exceed the mean by
/// a relative [`OVERDISPERSION_EPS`], where the match degenerates.
pub fn nb_params_from_moments(mean: f64, variance: f64) -> Result<CountModel, NbError> {
    if !mean.is_finite() || mean <= 0.0 {
        return Err(NbError::NonpositiveMean(mean));
    }
    if !variance.is_finite() || variance < 0.0 {
        return Err(NbError::InvalidMoments(format!(
            "variance must be finite and nonnegative, got {variance}"
        )));
    }
    if variance <= mean * (1.0 + OVERDISPERSION_EPS) {
        return Ok(CountModel::Poisson { lambda: mean });
    }
    let params = NbParams::new(mean * mean / (variance - mean), mean / variance)?;
    Ok(CountModel::NegativeBinomial {
        r: params.r,
        q: params.q,
    })
}

/// Tabulates a pmf from `ln p_0` and the ratio `p_{i+1} / p_i`,
/// accumulating in log space until [`MASS_TARGET`] is reached past the
/// mode. `cap` guards against runaway supports.
fn pmf_from_recurrence(ln_p0: f64, ratio_at: impl Fn(f64) -> f64, cap: usize) -> Pmf {
    let mut ln_p = ln_p0;
    let mut probs = Vec::new();
    let mut cum = 0.0f64;
    let mut comp = 0.0f64;
    let mut i = 0usize;
    loop {
        let p = ln_p.exp();
        probs.push(p);
        let y = p - comp;
        let t = cum + y;
        comp = (t - cum) - y;
        cum = t;
        let ratio = ratio_at(i as f64);
        if (cum >= MASS_TARGET && ratio < 1.0) || i >= cap {
            break;
        }
        ln_p += ratio.ln();
        i += 1;
    }
    Pmf {
        offset: 0,
        probs,
        tail: (1.0 - cum).max(0.0),
    }
}

/// Negative binomial pmf, tabulated to within `1e-12` of full mass.
pub fn nb_pmf(params: &NbParams) -> Pmf {
    let (r, q) = (params.r, params.q);
    let spread = params.mean() + 60.0 * params.variance().sqrt() + 64.0;
    pmf_from_recurrence(
        r * q.ln(),
        |i| (r + i) * (1.0 - q) / (i + 1.0),
        (2.0 * spread) as usize,
    )
}

/// Poisson pmf, tabulated to within `1e-12` of full mass.
pub fn poisson_pmf(lambda: f64) -> Pmf {
    assert!(
        lambda.is_finite() && lambda >= 0.0,
        "Poisson rate must be finite and nonnegative"
    );
    let spread = lambda + 60.0 * lambda.sqrt() + 64.0;
    pmf_from_recurrence(-lambda, |i| lambda / (i + 1.0), (2.0 * spread) as usize)
}

fn check_denominator(w: f64, rho: f64, t: f64) -> Result<(), NbError> {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if ok(w) && ok(rho) && ok(t) {
        Ok(())
    } else {
        Err(NbError::NonpositiveDenominator { w, rho, t })
    }
}

/// Total-variation bound from the exact loop statistics:
/// `(2 eps^2 + sigma) / sqrt(2 e w rho t)`. Zero exactly when no route
/// can cross the monitored set twice.
pub fn bound_simplified(eps: f64, sigma: f64, w: f64, rho: f64, t: f64) -> Result<f64, NbError> {
    if !(eps.is_finite() && eps >= 0.0 && sigma.is_finite() && sigma >= 0.0) {
        return Err(NbError::InvalidMoments(format!(
            "eps and sigma must be finite and nonnegative, got {eps}, {sigma}"
        )));
    }
    check_denominator(w, rho, t)?;
    Ok((2.0 * eps * eps + sigma) / (2.0 * E * w * rho * t).sqrt())
}

/// Bound on the total variation between the law of a count `X` and of
/// `X + 1`: `1 / sqrt(2 e w rho t)`.
pub fn shift_bound(w: f64, rho: f64, t: f64) -> Result<f64, NbError> {
    check_denominator(w, rho, t)?;
    Ok(1.0 / (2.0 * E * w * rho * t).sqrt())
}

/// Moment-form total-variation bound with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FullBound {
    pub value: f64,
    /// Propagated standard error of `value` from the moment SEs.
    pub std_error: f64,
    /// Raw numerator before clamping; sampling noise can push it
    /// slightly negative.
    pub bracket: f64,
    /// True when a negative numerator was clamped to zero.
    pub clamped: bool,
}

/// Total-variation bound built from count moments:
///
/// ```text
/// [ 2 (Var - rt)^2 + rt (M3 - rt M2 - 2 rt (Var - rt)) ]
///   / ( (rt)^2 sqrt(2 e w rt) )
/// ```
///
/// with `rt = rho t`, `M2`/`M3` the factorial moments, all of the count.
/// Evaluated on the exact asymptotic moments it reduces to
/// [`bound_simplified`]; on sampled moments it reports how strongly the
/// data themselves certify the approximation.
pub fn bound_full(m: &MomentSummary, w: f64, rho: f64, t: f64) -> Result<FullBound, NbError> {
    check_denominator(w, rho, t)?;
    for (name, v) in [
        ("variance", m.variance),
        ("factorial2", m.factorial2),
        ("factorial3", m.factorial3),
    ] {
        if !v.is_finite() {
            return Err(NbError::InvalidMoments(format!("{name} is not finite")));
        }
    }
    let rt = rho * t;
    let v = m.variance - rt;
    let bracket = 2.0 * v * v + rt * (m.factorial3 - rt * m.factorial2 - 2.0 * rt * v);
    let denom = rt * rt * (2.0 * E * w * rt).sqrt();

    let d_var = 4.0 * v - 2.0 * rt * rt;
    let d_f2 = -rt * rt;
    let d_f3 = rt;
    let se_bracket = ((d_var * m.se_variance).powi(2)
        + (d_f2 * m.se_factorial2).powi(2)
        + (d_f3 * m.se_factorial3).powi(2))
    .sqrt();

    let clamped = bracket < 0.0;
    Ok(FullBound {
        value: bracket.max(0.0) / denom,
        std_error: se_bracket / denom,
        bracket,
        clamped,
    })
}

/// Two-sided bounds implied by the cluster decomposition of the count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterBounds {
    /// Mean crossings per distinct crossing route: `[1, 1 + eps]`.
    pub mean_size: (f64, f64),
    /// Expected number of distinct crossing routes in the window:
    /// `[rho t / (1 + eps), rho t]`.
    pub cluster_count: (f64, f64),
}

/// Bounds on cluster sizes and cluster counts from `eps` and `rho t`.
pub fn cluster_bounds(eps: f64, rho: f64, t: f64) -> ClusterBounds {
    debug_assert!(eps >= 0.0 && rho > 0.0 && t > 0.0);
    let rt = rho * t;
    ClusterBounds {
        mean_size: (1.0, 1.0 + eps),
        cluster_count: (rt / (1.0 + eps), rt),
    }
}

/// The moments the count would have in the long-window limit, where the
/// variance is `rho t (1 + eps)` and the factorial moments follow from
/// the cluster decomposition. Standard errors are zero: these are not
/// sampled.
pub fn asymptotic_moments(rho: f64, t: f64, eps: f64, sigma: f64) -> MomentSummary {
    let rt = rho * t;
    MomentSummary {
        n: 0,
        mean: rt,
        variance: rt * (1.0 + eps),
        factorial2: rt * rt + eps * rt,
        factorial3: rt * rt * rt + 3.0 * eps * rt * rt + sigma * rt,
        se_mean: 0.0,
        se_variance: 0.0,
        se_factorial2: 0.0,
        se_factorial3: 0.0,
    }
}

/// Inputs a bound evaluation was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub single_visit_prob: f64,
    pub extra_visits_mean: f64,
    pub extra_visits_factorial2: f64,
    pub flow_rate: f64,
    pub window: f64,
}

/// All bounds for one link set and window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub bound_simplified: f64,
    pub bound_full: FullBound,
    pub shift_bound: f64,
    pub cluster: ClusterBounds,
}

impl BoundReport {
    /// Assembles every bound from exact link statistics and count
    /// moments (sampled or asymptotic).
    pub fn from_parts(
        stats: &LinkStats,
        m: &MomentSummary,
        window: f64,
    ) -> Result<BoundReport, NbError> {
        let (w, eps, sigma, rho) = (
            stats.single_visit_prob,
            stats.extra_visits_mean,
            stats.extra_visits_factorial2,
            stats.total_flow_rate,
        );
        Ok(BoundReport {
            inputs: BoundInputs {
                single_visit_prob: w,
                extra_visits_mean: eps,
                extra_visits_factorial2: sigma,
                flow_rate: rho,
                window,
            },
            bound_simplified: bound_simplified(eps, sigma, w, rho, window)?,
            bound_full: bound_full(m, w, rho, window)?,
            shift_bound: shift_bound(w, rho, window)?,
            cluster: cluster_bounds(eps, rho, window),
        })
    }
}
