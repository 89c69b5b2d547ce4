//! Synthetic desk-scale dataset generation.
//!
//! Simulates the dynamics under known parameters and draws all three
//! surveillance streams from the observation model, producing a dataset
//! that exercises every ingest path (two regions, three age bands, two
//! doses, a contact-matrix breakpoint and a mid-horizon vaccination
//! campaign). Used by the `simulate` CLI subcommand and the integration
//! tests.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::dynamics::{self, SimOptions, VaccinationFeed};
use crate::observation::{
    self, Assay, CountObservation, CountSeries, ObservationSet, PrevalenceEstimate,
    SerologySample,
};
use crate::params::ModelParams;
use crate::severity::SeveritySchedule;
use crate::strata::ContactSchedule;
use crate::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};

/// Reference configuration for the generated dataset: two regions, three
/// age bands, two doses, 200 days.
pub const DESK_CONFIG: &str = r#"
[strata]
n_regions = 2
n_ages = 3
max_dose = 2
horizon_days = 200
start_date = "2020-09-01"

[model]
p0 = [0.005, 0.02, 0.08]
psi = [0.14, 0.12]
i0 = [300.0, 200.0]
m = [1.0, 1.1, 0.9]
severity_changepoint_days = [90.0]
zeta = [[0.4], [-0.3], [-0.5]]

[observation]
eligible_ages = [1, 2]

[[efficacy.eras]]
from_day = 0
pi_mrna = [0.6, 0.85]
pi_other = [0.5, 0.7]
alpha_mrna = [0.75, 0.9]
alpha_other = [0.6, 0.8]

[mcmc]
n_iterations = 60
burn_in = 30
"#;

/// The parameters used to generate the data: the config template with a
/// non-trivial transmissibility walk (a contraction after week six and a
/// partial rebound after week eighteen).
pub fn true_params(cfg: &RunConfig) -> Result<ModelParams> {
    let mut params = cfg.template()?;
    for reg in &mut params.regional {
        for (w, v) in reg.log_beta_walk.iter_mut().enumerate() {
            let down = -0.6 * ((w as f64 / 10.0).min(1.0));
            let up = 0.3 * (((w as f64 - 18.0) / 8.0).clamp(0.0, 1.0));
            *v = down + up;
        }
    }
    Ok(params)
}

/// Deterministic synthetic populations, region-major.
pub fn populations(cfg: &RunConfig) -> Vec<f64> {
    let n_a = cfg.strata.n_ages;
    (0..cfg.strata.n_regions)
        .flat_map(|r| {
            let scale = if r == 0 { 1.0 } else { 0.6 };
            (0..n_a).map(move |a| scale * [200_000.0, 300_000.0, 150_000.0][a % 3])
        })
        .collect()
}

/// Two-breakpoint contact schedule: a baseline matrix, then a contraction
/// from day 100 (stronger in region 0).
pub fn contacts(cfg: &RunConfig) -> ContactSchedule {
    let n_a = cfg.strata.n_ages;
    let base: Vec<f64> = (0..n_a * n_a)
        .map(|i| {
            let (a, b) = (i / n_a, i % n_a);
            let core = [[9.0, 3.0, 1.0], [3.0, 6.0, 2.0], [1.0, 2.0, 3.0]];
            core[a % 3][b % 3]
        })
        .collect();
    let matrices = (0..cfg.strata.n_regions)
        .map(|r| {
            let shrink = if r == 0 { 0.75 } else { 0.85 };
            vec![base.clone(), base.iter().map(|v| v * shrink).collect()]
        })
        .collect();
    ContactSchedule { n_ages: n_a, breakpoint_days: vec![0, 100], matrices }
}

/// Vaccination campaign: first doses from day 80 (oldest band first, the
/// middle band four weeks later, none for the youngest), second doses
/// mirroring the first-dose series 28 days later. 70% of doses are mRNA.
pub fn vaccination_feed(cfg: &RunConfig, populations: &[f64]) -> VaccinationFeed {
    let n_r = cfg.strata.n_regions;
    let n_a = cfg.strata.n_ages;
    let horizon = cfg.strata.horizon_days;
    let mut feed = VaccinationFeed::empty(n_r, n_a, cfg.strata.max_dose, horizon);
    feed.start_day = 80;
    for r in 0..n_r {
        for a in 0..n_a {
            let open_day = match a % 3 {
                2 => 80,
                1 => 108,
                _ => continue,
            };
            let daily = 0.004 * populations[r * n_a + a];
            for d in open_day..horizon {
                let i1 = feed.idx(r, d, 1, a);
                feed.counts[i1] = daily;
                feed.counts_mrna[i1] = 0.7 * daily;
                if cfg.strata.max_dose >= 2 && d >= open_day + 28 {
                    let i2 = feed.idx(r, d, 2, a);
                    feed.counts[i2] = daily;
                    feed.counts_mrna[i2] = 0.7 * daily;
                }
            }
        }
    }
    feed
}

fn draw_nb(rng: &mut ChaCha20Rng, mu: f64, eta: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let lambda = Gamma::new(eta, mu / eta).unwrap().sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).unwrap().sample(rng) as u64
}

/// Builds the full synthetic dataset for a config, deterministically from
/// the seed, using the bundled [`true_params`].
pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let params = true_params(cfg)?;
    generate_with(cfg, &params, seed)
}

/// As [`generate`], but simulating under the supplied parameters.
pub fn generate_with(cfg: &RunConfig, params: &ModelParams, seed: u64) -> Result<Dataset> {
    let spec = cfg.spec()?;
    let populations = populations(cfg);
    let contacts = contacts(cfg);
    let feed = vaccination_feed(cfg, &populations);
    let schedule =
        dynamics::vaccination_rates(&feed, &populations, &cfg.efficacy_tables(), spec.dt)?;

    let m_by_age: Vec<Vec<f64>> = params.regional.iter().map(|r| r.m.clone()).collect();
    let trajectories = dynamics::simulate(
        &spec,
        &params.global,
        &params.regional,
        &m_by_age,
        &contacts,
        &populations,
        Some(&schedule),
        &SimOptions::default(),
    )?;

    let severity = SeveritySchedule::new(
        cfg.model.severity_changepoint_days.clone(),
        cfg.model.severity_window_days,
        params.global.zeta.clone(),
        params.global.p0.clone(),
    )?;
    let delay = cfg.delay_distribution()?;
    let age_map = cfg.age_map();
    let spd = spec.steps_per_day();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut counts = Vec::new();
    let mut serology = Vec::new();
    let mut prevalence = Vec::new();
    for (r, traj) in trajectories.iter().enumerate() {
        let pops = &populations[r * spec.n_ages..(r + 1) * spec.n_ages];
        let mu_groups = observation::expected_event_series(
            traj,
            &spec,
            &|day, q, a| schedule.alpha_at(r, day, q, a),
            &severity,
            &delay,
            &age_map,
        );
        for day in 0..spec.horizon_days() {
            for g in 0..age_map.n_groups {
                let mu: f64 = (day * spd..(day + 1) * spd)
                    .map(|k| mu_groups[k * age_map.n_groups + g])
                    .sum();
                counts.push(CountObservation {
                    date: spec.date_of(day * spd),
                    region: r,
                    group: g,
                    count: draw_nb(&mut rng, mu, params.global.eta),
                });
            }
        }
        for day in (30..spec.horizon_days()).step_by(14) {
            let k = day * spd;
            let pi_inf = observation::ever_infected_proportion(
                traj,
                &cfg.observation.eligible_ages,
                pops,
                k,
            );
            for (assay, ap) in [
                (Assay::EuroImmun, &params.global.euroimmun),
                (Assay::RocheN, &params.global.roche_n),
            ] {
                let p = observation::serology_positive_prob(pi_inf, ap.sens, ap.spec);
                let n_tested = cfg.observation.serology_sample_size;
                let n_positive = Binomial::new(n_tested, p).unwrap().sample(&mut rng);
                serology.push(SerologySample {
                    date: spec.date_of(k),
                    region: r,
                    assay,
                    n_tested,
                    n_positive,
                });
            }
        }
        for a in 0..spec.n_ages {
            for day in (20..spec.horizon_days()).step_by(14) {
                let k = day * spd;
                let log_sd = cfg.observation.prevalence_log_sd;
                let noise: f64 = rng.sample(StandardNormal);
                prevalence.push(PrevalenceEstimate {
                    date: spec.date_of(k),
                    region: r,
                    age: a,
                    log_mean: observation::log_prevalence(traj, k, a) + log_sd * noise,
                    log_sd,
                });
            }
        }
    }

    let observations = ObservationSet {
        counts: CountSeries { rows: counts, age_map },
        serology,
        prevalence,
        eligible_ages: cfg.observation.eligible_ages.clone(),
        toggles: cfg.stream_toggles(),
    };
    observations.validate(&spec)?;
    Ok(Dataset { populations, contacts, feed, observations })
}
