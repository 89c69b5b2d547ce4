//! Log-likelihood of the surveillance streams given a simulated trajectory.
//!
//! Three streams are melded: severe-event counts (negative binomial),
//! serological survey positives (binomial with imperfect sensitivity and
//! specificity), and externally produced log-prevalence estimates (Gaussian,
//! thinned to one point per fortnight per stratum).

use crate::dynamics::RegionTrajectory;
use crate::severity::{expected_events, DelayDistribution, SeveritySchedule};
use crate::strata::{GlobalParams, StratumSpec};
use crate::{Error, Result};
use chrono::NaiveDate;
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;

/// Prevalent counts below this floor are clamped before taking logs, so a
/// proposal that momentarily extinguishes the epidemic scores very badly
/// instead of producing −∞ and NaN arithmetic downstream.
pub const PREVALENCE_FLOOR: f64 = 1e-6;

/// Days between retained prevalence estimates per (region, age) stratum.
pub const MELDING_THIN_DAYS: i64 = 14;

/// Serological assay identities with distinct test characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Assay {
    EuroImmun,
    RocheN,
}

/// Map from model age bands to (coarser) observation age groups.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AgeGroupMap {
    pub n_groups: usize,
    /// Observation group of each model age band; a partition.
    pub group_of_age: Vec<usize>,
}

impl AgeGroupMap {
    pub fn identity(n_ages: usize) -> Self {
        Self { n_groups: n_ages, group_of_age: (0..n_ages).collect() }
    }

    pub fn validate(&self, n_ages: usize) -> Result<()> {
        if self.group_of_age.len() != n_ages {
            return Err(Error::Config("age map must cover every model band".into()));
        }
        for g in 0..self.n_groups {
            if !self.group_of_age.contains(&g) {
                return Err(Error::Config(format!("observation group {g} has no model band")));
            }
        }
        if self.group_of_age.iter().any(|&g| g >= self.n_groups) {
            return Err(Error::Config("age map group out of range".into()));
        }
        Ok(())
    }
}

/// One dated severe-event count.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CountObservation {
    pub date: NaiveDate,
    pub region: usize,
    pub group: usize,
    pub count: u64,
}

/// Severe-event surveillance stream.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CountSeries {
    pub rows: Vec<CountObservation>,
    pub age_map: AgeGroupMap,
}

/// One serological survey aggregate. Dates are already shifted to account
/// for the seroconversion delay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SerologySample {
    pub date: NaiveDate,
    pub region: usize,
    pub assay: Assay,
    pub n_tested: u64,
    pub n_positive: u64,
}

/// One external log-prevalence estimate for a model age band.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrevalenceEstimate {
    pub date: NaiveDate,
    pub region: usize,
    pub age: usize,
    pub log_mean: f64,
    pub log_sd: f64,
}

/// Which streams enter the likelihood; the sensitivity harness switches
/// these between its "full", "minus8" and "none" configurations.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StreamToggles {
    pub counts: bool,
    pub serology: bool,
    pub prevalence: bool,
}

impl Default for StreamToggles {
    fn default() -> Self {
        Self { counts: true, serology: true, prevalence: true }
    }
}

/// All observation streams for one fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ObservationSet {
    pub counts: CountSeries,
    pub serology: Vec<SerologySample>,
    pub prevalence: Vec<PrevalenceEstimate>,
    /// Model age bands counted as serology-eligible.
    pub eligible_ages: Vec<usize>,
    pub toggles: StreamToggles,
}

impl ObservationSet {
    pub fn validate(&self, spec: &StratumSpec) -> Result<()> {
        self.counts.age_map.validate(spec.n_ages)?;
        for row in &self.counts.rows {
            if row.region >= spec.n_regions || row.group >= self.counts.age_map.n_groups {
                return Err(Error::Config("count row stratum out of range".into()));
            }
            spec.index_of_date(row.date)?;
        }
        for s in &self.serology {
            if s.region >= spec.n_regions {
                return Err(Error::Config("serology row region out of range".into()));
            }
            if s.n_positive > s.n_tested {
                return Err(Error::Config("serology positives exceed tested".into()));
            }
            spec.index_of_date(s.date)?;
        }
        for p in &self.prevalence {
            if p.region >= spec.n_regions || p.age >= spec.n_ages {
                return Err(Error::Config("prevalence row stratum out of range".into()));
            }
            if !(p.log_sd > 0.0) {
                return Err(Error::Config("prevalence log-sd must be positive".into()));
            }
            spec.index_of_date(p.date)?;
        }
        if self.eligible_ages.iter().any(|&a| a >= spec.n_ages) {
            return Err(Error::Config("serology-eligible age band out of range".into()));
        }
        Ok(())
    }
}

/// Negative-binomial log-mass with mean `mu` and overdispersion `eta`
/// (variance μ + μ²/η).
pub fn nb_logpmf(y: u64, mu: f64, eta: f64) -> f64 {
    if mu <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let y = y as f64;
    ln_gamma(y + eta) - ln_gamma(eta) - ln_gamma(y + 1.0) + eta * (eta / (eta + mu)).ln()
        + y * (mu / (eta + mu)).ln()
}

/// Binomial log-mass.
pub fn binomial_logpmf(k: u64, n: u64, p: f64) -> f64 {
    debug_assert!(k <= n);
    let choose = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    let success = if k == 0 {
        0.0
    } else if p <= 0.0 {
        return f64::NEG_INFINITY;
    } else {
        k as f64 * p.ln()
    };
    let failure = if k == n {
        0.0
    } else if p >= 1.0 {
        return f64::NEG_INFINITY;
    } else {
        (n - k) as f64 * (1.0 - p).ln()
    };
    choose + success + failure
}

fn gaussian_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Probability a survey test returns positive given the ever-infected
/// proportion and the assay characteristics.
pub fn serology_positive_prob(pi_inf: f64, sens: f64, spec: f64) -> f64 {
    sens * pi_inf + (1.0 - spec) * (1.0 - pi_inf)
}

/// Expected severe events per (step, observation group) for one region,
/// given its infection flows.
pub fn expected_event_series(
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    alpha_at: &dyn Fn(usize, usize, usize) -> f64,
    severity: &SeveritySchedule,
    delay: &DelayDistribution,
    age_map: &AgeGroupMap,
) -> Vec<f64> {
    let n_ages = spec.n_ages;
    let k_max = spec.n_steps;
    let mut mu_groups = vec![0.0; k_max * age_map.n_groups];
    let mut delta_star = vec![0.0; k_max];
    let mut p = vec![0.0; k_max];
    let mut flows = vec![0.0; traj.n_doses];
    for a in 0..n_ages {
        for k in 0..k_max {
            let day = spec.day_of(k) as usize;
            for (q, f) in flows.iter_mut().enumerate() {
                *f = traj.delta_at(k, q, a);
            }
            delta_star[k] = flows
                .iter()
                .enumerate()
                .map(|(q, &d)| (1.0 - alpha_at(day, q, a)) * d)
                .sum();
            p[k] = severity.severity_at(k as f64 * spec.dt, a);
        }
        let mu = expected_events(&delta_star, &p, delay);
        let g = age_map.group_of_age[a];
        for k in 0..k_max {
            mu_groups[k * age_map.n_groups + g] += mu[k];
        }
    }
    mu_groups
}

/// Negative-binomial likelihood of one region's count rows against the
/// expected-event series (per step × observation group), aggregated to days.
pub fn nb_loglik(
    rows: &[CountObservation],
    mu_groups: &[f64],
    n_groups: usize,
    spec: &StratumSpec,
    region: usize,
    eta: f64,
) -> Result<f64> {
    let spd = spec.steps_per_day();
    let mut total = 0.0;
    for row in rows.iter().filter(|r| r.region == region) {
        let k0 = spec.index_of_date(row.date)?;
        let mut mu = 0.0;
        for k in k0..(k0 + spd).min(spec.n_steps) {
            mu += mu_groups[k * n_groups + row.group];
        }
        total += nb_logpmf(row.count, mu, eta);
    }
    Ok(total)
}

/// Ever-infected proportion of the serology-eligible population at step `k`.
pub fn ever_infected_proportion(
    traj: &RegionTrajectory,
    eligible_ages: &[usize],
    populations: &[f64],
    k: usize,
) -> f64 {
    let mut never = 0.0;
    let mut pop = 0.0;
    for &a in eligible_ages {
        never += traj.never_infected[k * traj.n_ages + a];
        pop += populations[a];
    }
    if pop <= 0.0 {
        return 0.0;
    }
    (1.0 - never / pop).clamp(0.0, 1.0)
}

/// Binomial serology likelihood for one region.
pub fn serology_loglik(
    samples: &[SerologySample],
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    region: usize,
    eligible_ages: &[usize],
    populations: &[f64],
    global: &GlobalParams,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples.iter().filter(|s| s.region == region) {
        let k = spec.index_of_date(s.date)?;
        let pi_inf = ever_infected_proportion(traj, eligible_ages, populations, k);
        let assay = match s.assay {
            Assay::EuroImmun => &global.euroimmun,
            Assay::RocheN => &global.roche_n,
        };
        let p = serology_positive_prob(pi_inf, assay.sens, assay.spec);
        total += binomial_logpmf(s.n_positive, s.n_tested, p);
    }
    Ok(total)
}

/// Deterministic fortnightly thinning: keep estimates whose day offset from
/// the first available date in their (region, age) stratum is a multiple of
/// [`MELDING_THIN_DAYS`]. Returns retained indices in input order.
pub fn thin_prevalence(estimates: &[PrevalenceEstimate]) -> Vec<usize> {
    let mut anchors: HashMap<(usize, usize), NaiveDate> = HashMap::new();
    for e in estimates {
        anchors
            .entry((e.region, e.age))
            .and_modify(|d| *d = (*d).min(e.date))
            .or_insert(e.date);
    }
    estimates
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let anchor = anchors[&(e.region, e.age)];
            (e.date - anchor).num_days() % MELDING_THIN_DAYS == 0
        })
        .map(|(i, _)| i)
        .collect()
}

/// Modelled log-prevalence ν at step `k` for age `a`.
pub fn log_prevalence(traj: &RegionTrajectory, k: usize, a: usize) -> f64 {
    traj.prevalence[k * traj.n_ages + a].max(PREVALENCE_FLOOR).ln()
}

/// Gaussian melding likelihood of the retained prevalence estimates for one
/// region. `retained` must come from [`thin_prevalence`] over the full set.
pub fn melding_loglik(
    estimates: &[PrevalenceEstimate],
    retained: &[usize],
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    region: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in retained {
        let e = &estimates[i];
        if e.region != region {
            continue;
        }
        let k = spec.index_of_date(e.date)?;
        let nu = log_prevalence(traj, k, e.age);
        total += gaussian_logpdf(e.log_mean, nu, e.log_sd);
    }
    Ok(total)
}

/// Sum of the enabled stream log-likelihoods for one region. The prevalence
/// thinning indices are precomputed once per dataset and shared.
#[allow(clippy::too_many_arguments)]
pub fn region_loglik(
    data: &ObservationSet,
    retained_prevalence: &[usize],
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    region: usize,
    populations: &[f64],
    global: &GlobalParams,
    mu_groups: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    if data.toggles.counts {
        total += nb_loglik(
            &data.counts.rows,
            mu_groups,
            data.counts.age_map.n_groups,
            spec,
            region,
            global.eta,
        )?;
    }
    if data.toggles.serology {
        total += serology_loglik(
            &data.serology,
            traj,
            spec,
            region,
            &data.eligible_ages,
            populations,
            global,
        )?;
    }
    if data.toggles.prevalence {
        total += melding_loglik(&data.prevalence, retained_prevalence, traj, spec, region)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nb_matches_direct_formula() {
        // y = 3, μ = 2, η = 5: pmf = C(y+η−1, y)·(η/(η+μ))^η·(μ/(η+μ))^y with
        // the gamma-function generalisation of the binomial coefficient.
        let direct = ln_gamma(8.0) - ln_gamma(5.0) - ln_gamma(4.0)
            + 5.0 * (5.0f64 / 7.0).ln()
            + 3.0 * (2.0f64 / 7.0).ln();
        assert_relative_eq!(nb_logpmf(3, 2.0, 5.0), direct, epsilon = 1e-12);
    }

    #[test]
    fn nb_large_eta_approaches_poisson() {
        let mu = 4.2_f64;
        for y in [0u64, 1, 4, 11] {
            let poisson = y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0);
            assert_relative_eq!(nb_logpmf(y, mu, 1e8), poisson, epsilon = 1e-6);
        }
    }

    #[test]
    fn nb_zero_mean_cases() {
        assert_eq!(nb_logpmf(0, 0.0, 5.0), 0.0);
        assert_eq!(nb_logpmf(2, 0.0, 5.0), f64::NEG_INFINITY);
    }

    #[test]
    fn nb_finite_at_mode_region() {
        let ll = nb_logpmf(7, 7.0, 3.0);
        assert!(ll.is_finite() && ll < 0.0);
    }

    #[test]
    fn serology_probability_cases() {
        assert_eq!(serology_positive_prob(0.0, 1.0, 1.0), 0.0);
        assert_relative_eq!(serology_positive_prob(0.0, 0.8, 0.9), 0.1, epsilon = 1e-15);
        assert_relative_eq!(
            serology_positive_prob(0.5, 0.8, 0.95),
            0.425,
            epsilon = 1e-15
        );
    }

    #[test]
    fn binomial_pmf_sums_to_one() {
        let n = 17;
        let p = 0.37;
        let total: f64 = (0..=n).map(|k| binomial_logpmf(k, n, p).exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    fn est(region: usize, age: usize, date: &str, z: f64, xi: f64) -> PrevalenceEstimate {
        PrevalenceEstimate {
            date: date.parse().unwrap(),
            region,
            age,
            log_mean: z,
            log_sd: xi,
        }
    }

    #[test]
    fn thinning_keeps_fortnightly_points() {
        // 28 days of daily estimates → days 0, 14 and 28 retained (three
        // points over an inclusive 29-day span; exactly 2 per rolling 14 days).
        let start = NaiveDate::from_ymd_opt(2020, 10, 1).unwrap();
        let estimates: Vec<_> = (0..=28)
            .map(|d| {
                let mut e = est(0, 0, "2020-10-01", 1.0, 0.5);
                e.date = start + chrono::Duration::days(d);
                e
            })
            .collect();
        let retained = thin_prevalence(&estimates);
        let days: Vec<i64> =
            retained.iter().map(|&i| (estimates[i].date - start).num_days()).collect();
        assert_eq!(days, vec![0, 14, 28]);
    }

    #[test]
    fn thinning_is_per_stratum_and_order_invariant() {
        let mut estimates = vec![
            est(0, 0, "2020-10-15", 1.0, 0.5),
            est(0, 0, "2020-10-01", 1.0, 0.5),
            est(0, 1, "2020-10-08", 1.0, 0.5),
            est(0, 0, "2020-10-29", 1.0, 0.5),
            est(0, 1, "2020-10-22", 1.0, 0.5),
        ];
        let keep: Vec<NaiveDate> = thin_prevalence(&estimates)
            .iter()
            .map(|&i| estimates[i].date)
            .collect();
        // Age 0 anchors at Oct 1 (Oct 1, 15, 29); age 1 anchors at Oct 8
        // (Oct 8, 22).
        assert_eq!(keep.len(), 5);
        estimates.reverse();
        assert_eq!(thin_prevalence(&estimates).len(), 5);
    }

    #[test]
    fn gaussian_terms_match_hand_values() {
        let norm = -(0.5f64 * (2.0 * std::f64::consts::PI).ln());
        // At the mode the density is −log(ξ√(2π)).
        assert_relative_eq!(gaussian_logpdf(2.0, 2.0, 0.5), norm - 0.5f64.ln(), epsilon = 1e-12);
        // One sigma away subtracts exactly 1/2.
        assert_relative_eq!(
            gaussian_logpdf(2.5, 2.0, 0.5),
            norm - 0.5f64.ln() - 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn age_map_validation() {
        assert!(AgeGroupMap::identity(3).validate(3).is_ok());
        let bad = AgeGroupMap { n_groups: 2, group_of_age: vec![0, 0, 0] };
        assert!(bad.validate(3).is_err());
        let coarse = AgeGroupMap { n_groups: 2, group_of_age: vec![0, 0, 1] };
        assert!(coarse.validate(3).is_ok());
    }
}
