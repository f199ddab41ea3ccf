//! Metric axioms for the total-variation distance and a synthetic-data
//! check of the moment summary against known negative-binomial moments.

use jackson_flows::{
    empirical_pmf, moments, nb_params_from_moments, nb_pmf, shift_tv, tv_distance, NbParams, Pmf,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};

fn arb_samples() -> impl Strategy<Value = Vec<u64>> {
    proptest::collection::vec(0u64..30, 1..200)
}

proptest! {
    #[test]
    fn tv_is_a_metric_on_empirical_pmfs(
        a in arb_samples(),
        b in arb_samples(),
        c in arb_samples(),
    ) {
        let p = empirical_pmf(&a).unwrap();
        let q = empirical_pmf(&b).unwrap();
        let r = empirical_pmf(&c).unwrap();

        let pq = tv_distance(&p, &q).point;
        let qp = tv_distance(&q, &p).point;
        prop_assert!((pq - qp).abs() < 1e-15, "symmetry");
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq), "range");
        prop_assert!(tv_distance(&p, &p).point == 0.0, "identity");

        let pr = tv_distance(&p, &r).point;
        let rq = tv_distance(&r, &q).point;
        prop_assert!(pq <= pr + rq + 1e-12, "triangle: {pq} > {pr} + {rq}");
    }

    #[test]
    fn shift_tv_is_within_range(a in proptest::collection::vec(0u64..30, 2..200)) {
        let d = shift_tv(&a).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d.point));
        prop_assert!(d.upper >= d.point);
    }

    #[test]
    fn empirical_pmf_mean_matches_sample_mean(a in proptest::collection::vec(0u64..50, 2..200)) {
        let pmf = empirical_pmf(&a).unwrap();
        let m = moments(&a).unwrap();
        prop_assert!((pmf.mean() - m.mean).abs() < 1e-9);
        prop_assert!((pmf.total_mass() - 1.0).abs() < 1e-9);
    }
}

/// Negative binomial sampler via the Poisson-Gamma mixture.
fn nb_samples(r: f64, q: f64, n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(r, (1.0 - q) / q).unwrap();
    (0..n)
        .map(|_| {
            let lambda: f64 = gamma.sample(&mut rng);
            if lambda <= 0.0 {
                0
            } else {
                Poisson::new(lambda).unwrap().sample(&mut rng) as u64
            }
        })
        .collect()
}

#[test]
fn moment_summary_recovers_negative_binomial_moments() {
    // NB(200, 2/3): mean 100, variance 150, and factorial moments
    // E[X(X-1)] = r (r+1) ((1-q)/q)^2 = 10050,
    // E[X(X-1)(X-2)] = r (r+1) (r+2) ((1-q)/q)^3 = 1_015_050.
    let samples = nb_samples(200.0, 2.0 / 3.0, 30_000, 12);
    let m = moments(&samples).unwrap();

    assert!((m.mean - 100.0).abs() < 4.0 * m.se_mean, "mean {}", m.mean);
    assert!(
        (m.variance - 150.0).abs() < 4.0 * m.se_variance,
        "variance {} (se {})",
        m.variance,
        m.se_variance
    );
    assert!(
        (m.factorial2 - 10_050.0).abs() < 4.0 * m.se_factorial2,
        "factorial2 {} (se {})",
        m.factorial2,
        m.se_factorial2
    );
    assert!(
        (m.factorial3 - 1_015_050.0).abs() < 4.0 * m.se_factorial3,
        "factorial3 {} (se {})",
        m.factorial3,
        m.se_factorial3
    );
}

#[test]
fn fitted_pmf_is_close_to_the_generating_law() {
    let samples = nb_samples(200.0, 2.0 / 3.0, 30_000, 34);
    let m = moments(&samples).unwrap();
    let fitted = nb_params_from_moments(m.mean, m.variance).unwrap();
    let truth = nb_pmf(&NbParams::new(200.0, 2.0 / 3.0).unwrap());
    let d = tv_distance(&fitted.pmf(), &truth);
    assert!(d.upper < 0.02, "fitted-vs-truth TV {}", d.upper);

    let empirical = empirical_pmf(&samples).unwrap();
    let d_emp = tv_distance(&empirical, &truth);
    assert!(d_emp.upper < 0.1, "empirical-vs-truth TV {}", d_emp.upper);
}

#[test]
fn tabulated_pmf_factorial_moments_match_closed_forms() {
    let pmf = nb_pmf(&NbParams::new(200.0, 2.0 / 3.0).unwrap());
    let fact = |pmf: &Pmf, k: u32| -> f64 {
        pmf.probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut term = *p;
                for d in 0..k {
                    term *= i as f64 - d as f64;
                }
                term
            })
            .sum()
    };
    assert!((fact(&pmf, 1) - 100.0).abs() < 1e-6);
    assert!((fact(&pmf, 2) - 10_050.0).abs() < 1e-3);
    assert!((fact(&pmf, 3) - 1_015_050.0).abs() < 1e-1);
}
