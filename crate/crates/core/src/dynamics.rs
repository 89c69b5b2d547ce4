//! Deterministic half-day time-stepping of the dose-stratified
//! SE²I²R⁺R⁻WWˢ system: infection, Erlang progression, waning and
//! vaccination transitions.
//!
//! All flows in a step are computed from start-of-step occupancies (a plain
//! Euler update, not operator splitting). Flows out of a compartment are
//! proportionally rescaled if their sum would exceed the occupancy, so no
//! compartment ever goes negative and population is conserved exactly.

use serde::{Deserialize, Serialize};

use crate::repro;
use crate::strata::{ContactSchedule, Disease, GlobalParams, RegionalParams, StratumSpec, N_STATES};
use crate::{Error, Result};

/// Days per weekly β changepoint.
pub const BETA_PERIOD_DAYS: usize = 7;

// ---------------------------------------------------------------------------
// Elementary transmission operations
// ---------------------------------------------------------------------------

/// Per-day pairwise infection probability b = 1 − exp(−β·m_a·C/N_source).
///
/// The exponential form keeps b in [0, 1) and matches the product structure
/// of the force of infection.
pub fn pairwise_infection_prob(beta: f64, m_a: f64, c_entry: f64, n_source: f64) -> Result<f64> {
    if n_source <= 0.0 {
        if c_entry > 0.0 {
            return Err(Error::Simulation(
                "contact with an empty source age group (N_source = 0)".into(),
            ));
        }
        return Ok(0.0);
    }
    Ok(-(-beta * m_a * c_entry / n_source).exp_m1())
}

/// Force of infection λ = 1 − Π_{a'} (1 − b_{aa'})^{I⁺_{a'}}, evaluated in
/// log space.
pub fn infection_probability(b_row: &[f64], infectious: &[f64]) -> Result<f64> {
    let mut log_escape = 0.0;
    for (&b, &i_plus) in b_row.iter().zip(infectious) {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Simulation(format!("pairwise probability out of [0,1): {b}")));
        }
        log_escape += i_plus * (1.0 - b).ln();
    }
    Ok(-log_escape.exp_m1())
}

/// Dose-stratified force of infection λ^{V_q} = (1 − π^q)·λ^{V₀}.
pub fn dose_stratified_foi(lambda0: f64, pi_q: &[f64]) -> Vec<f64> {
    pi_q.iter().map(|&p| (1.0 - p) * lambda0).collect()
}

/// New infections Δ = (S + Wˢ)·λ·dt, capped at the source occupancy.
pub fn new_infections(source_mass: f64, lambda: f64, dt: f64) -> f64 {
    source_mass * (lambda * dt).min(1.0)
}

// ---------------------------------------------------------------------------
// Vaccination feed and efficacy tables
// ---------------------------------------------------------------------------

/// Daily counts of newly administered doses, split by vaccine type.
///
/// Dates are expected to have been lag-shifted upstream (ingest applies the
/// configured immune-response lag, default +21 days).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaccinationFeed {
    pub n_regions: usize,
    pub n_ages: usize,
    /// Maximum dose Q; dose numbers run 1..=Q.
    pub max_dose: usize,
    pub horizon_days: usize,
    /// Day the campaign starts (first day with any counts).
    pub start_day: i64,
    /// counts[((r*horizon + d)*Q + (q-1))*n_ages + a], all vaccine types.
    pub counts: Vec<f64>,
    /// Same layout, mRNA doses only.
    pub counts_mrna: Vec<f64>,
}

impl VaccinationFeed {
    pub fn empty(n_regions: usize, n_ages: usize, max_dose: usize, horizon_days: usize) -> Self {
        let len = n_regions * horizon_days * max_dose.max(1) * n_ages;
        Self {
            n_regions,
            n_ages,
            max_dose,
            horizon_days,
            start_day: 0,
            counts: vec![0.0; len],
            counts_mrna: vec![0.0; len],
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, day: usize, dose: usize, a: usize) -> usize {
        debug_assert!(dose >= 1);
        ((r * self.horizon_days + day) * self.max_dose.max(1) + (dose - 1)) * self.n_ages + a
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.iter().chain(&self.counts_mrna).any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::Config("vaccination counts must be nonnegative".into()));
        }
        for (c, m) in self.counts.iter().zip(&self.counts_mrna) {
            if m > c {
                return Err(Error::Config(
                    "mRNA vaccination counts exceed total counts".into(),
                ));
            }
        }
        // Cumulative q-th doses can never exceed cumulative (q-1)-th doses.
        for r in 0..self.n_regions {
            for a in 0..self.n_ages {
                let mut cum = vec![0.0; self.max_dose + 1];
                for d in 0..self.horizon_days {
                    for q in 1..=self.max_dose {
                        cum[q] += self.counts[self.idx(r, d, q, a)];
                    }
                    for q in 2..=self.max_dose {
                        if cum[q] > cum[q - 1] + 1e-9 {
                            return Err(Error::Config(format!(
                                "cumulative dose-{q} counts exceed dose-{} counts \
                                 (region {r}, age {a}, day {d})",
                                q - 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Piecewise-constant efficacy values for one variant era.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EfficacyEra {
    pub from_day: i64,
    /// Infection efficacy per dose (index q-1), mRNA vaccines.
    pub pi_mrna: Vec<f64>,
    /// Infection efficacy per dose, non-mRNA vaccines.
    pub pi_other: Vec<f64>,
    /// Severe-event efficacy per dose, mRNA vaccines.
    pub alpha_mrna: Vec<f64>,
    /// Severe-event efficacy per dose, non-mRNA vaccines.
    pub alpha_other: Vec<f64>,
}

/// Era-indexed efficacy tables for both vaccine types.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EfficacyTables {
    pub eras: Vec<EfficacyEra>,
}

impl EfficacyTables {
    pub fn zero(max_dose: usize) -> Self {
        Self {
            eras: vec![EfficacyEra {
                from_day: 0,
                pi_mrna: vec![0.0; max_dose],
                pi_other: vec![0.0; max_dose],
                alpha_mrna: vec![0.0; max_dose],
                alpha_other: vec![0.0; max_dose],
            }],
        }
    }

    pub fn validate(&self, max_dose: usize) -> Result<()> {
        if self.eras.is_empty() || self.eras[0].from_day > 0 {
            return Err(Error::Config("efficacy tables must cover day 0".into()));
        }
        for w in self.eras.windows(2) {
            if w[1].from_day <= w[0].from_day {
                return Err(Error::Config(
                    "efficacy eras overlap: era start days must be strictly increasing".into(),
                ));
            }
        }
        for era in &self.eras {
            for v in [&era.pi_mrna, &era.pi_other, &era.alpha_mrna, &era.alpha_other] {
                if v.len() != max_dose {
                    return Err(Error::Config(format!(
                        "efficacy era starting day {} must list one value per dose 1..={max_dose}",
                        era.from_day
                    )));
                }
                if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::Config("efficacies must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn era_at(&self, day: i64) -> &EfficacyEra {
        let mut active = &self.eras[0];
        for era in &self.eras {
            if day >= era.from_day {
                active = era;
            } else {
                break;
            }
        }
        active
    }
}

/// Per-step vaccination rates v^q and mixed efficacies π^q, α^q, resolved on
/// the daily grid. These depend only on the data feed and the configured
/// efficacy tables, never on sampled parameters, so they are computed once
/// per dataset.
#[derive(Debug, Clone)]
pub struct VaccinationSchedule {
    pub n_ages: usize,
    pub max_dose: usize,
    pub horizon_days: usize,
    /// rate[region][(d*Q + (q-1))*n_ages + a]: per-unit-time rate v; the
    /// per-step transition fraction is v·dt.
    pub rate: Vec<Vec<f64>>,
    /// Daily observed fractions v*^q (same layout), kept for verification.
    pub daily_fraction: Vec<Vec<f64>>,
    /// Mixed infection efficacy π[region][(d*Q + (q-1))*n_ages + a].
    pub pi: Vec<Vec<f64>>,
    /// Mixed severe-event efficacy α, same layout.
    pub alpha: Vec<Vec<f64>>,
}

impl VaccinationSchedule {
    #[inline]
    pub fn idx(&self, day: usize, dose: usize, a: usize) -> usize {
        (day * self.max_dose.max(1) + (dose - 1)) * self.n_ages + a
    }

    /// π^q on a given day; dose 0 has no protection.
    #[inline]
    pub fn pi_at(&self, region: usize, day: usize, dose: usize, a: usize) -> f64 {
        if dose == 0 {
            0.0
        } else {
            self.pi[region][self.idx(day, dose, a)]
        }
    }

    #[inline]
    pub fn alpha_at(&self, region: usize, day: usize, dose: usize, a: usize) -> f64 {
        if dose == 0 {
            0.0
        } else {
            self.alpha[region][self.idx(day, dose, a)]
        }
    }
}

/// Converts the daily observed fraction v* to the per-unit-time rate v such
/// that 1 − (1 − v·dt)^{1/dt} = v*. For dt = 0.5 this is v = 2(1 − √(1 − v*)).
pub fn rate_from_daily_fraction(v_star: f64, dt: f64) -> f64 {
    (1.0 - (1.0 - v_star).powf(dt)) / dt
}

/// Forward map of the inversion above: daily fraction implied by the
/// per-step rate.
pub fn daily_fraction_from_rate(v: f64, dt: f64) -> f64 {
    1.0 - (1.0 - v * dt).powf(1.0 / dt)
}

/// Computes denominator populations, daily vaccinated fractions and per-step
/// rates from the raw feed, and mixes type-specific efficacies with
/// cumulative-count weights.
///
/// A daily count exceeding its denominator is clamped to the full denominator
/// with a logged data warning.
pub fn vaccination_rates(
    feed: &VaccinationFeed,
    populations: &[f64],
    tables: &EfficacyTables,
    dt: f64,
) -> Result<VaccinationSchedule> {
    feed.validate()?;
    let (n_r, n_a, q_max, days) = (feed.n_regions, feed.n_ages, feed.max_dose, feed.horizon_days);
    let len = days * q_max.max(1) * n_a;
    let mut sched = VaccinationSchedule {
        n_ages: n_a,
        max_dose: q_max,
        horizon_days: days,
        rate: vec![vec![0.0; len]; n_r],
        daily_fraction: vec![vec![0.0; len]; n_r],
        pi: vec![vec![0.0; len]; n_r],
        alpha: vec![vec![0.0; len]; n_r],
    };
    if q_max == 0 {
        return Ok(sched);
    }
    for r in 0..n_r {
        for a in 0..n_a {
            // Cumulative counts up to the *previous* day, per dose.
            let mut cum = vec![0.0; q_max + 1];
            let mut cum_mrna = vec![0.0; q_max + 1];
            let mut cum_today = vec![0.0; q_max + 1];
            let mut cum_mrna_today = vec![0.0; q_max + 1];
            for d in 0..days {
                for q in 1..=q_max {
                    let v_count = feed.counts[feed.idx(r, d, q, a)];
                    let denom = if q == 1 {
                        populations[r * n_a + a] - cum[1]
                    } else {
                        cum[q - 1] - cum[q]
                    };
                    let mut v_star = if denom > 0.0 { v_count / denom } else { 0.0 };
                    if v_star > 1.0 {
                        log::warn!(
                            "vaccination feed exceeds denominator (region {r}, age {a}, \
                             dose {q}, day {d}): {v_count} of {denom}; clamping"
                        );
                        v_star = 1.0;
                    }
                    let i = sched.idx(d, q, a);
                    sched.daily_fraction[r][i] = v_star;
                    sched.rate[r][i] = rate_from_daily_fraction(v_star, dt);

                    cum_today[q] += v_count;
                    cum_mrna_today[q] += feed.counts_mrna[feed.idx(r, d, q, a)];
                    // Efficacy weights use cumulative counts up to and
                    // including the current day.
                    let total = cum[q] + cum_today[q];
                    let mrna = cum_mrna[q] + cum_mrna_today[q];
                    let w = if total > 0.0 { mrna / total } else { 0.0 };
                    let era = tables.era_at(d as i64);
                    sched.pi[r][i] = efficacy_mix(w, era.pi_mrna[q - 1], era.pi_other[q - 1]);
                    sched.alpha[r][i] =
                        efficacy_mix(w, era.alpha_mrna[q - 1], era.alpha_other[q - 1]);
                }
                for q in 1..=q_max {
                    cum[q] += cum_today[q];
                    cum_mrna[q] += cum_mrna_today[q];
                    cum_today[q] = 0.0;
                    cum_mrna_today[q] = 0.0;
                }
            }
        }
    }
    Ok(sched)
}

/// Weighted average of the type-specific efficacies; w is the cumulative
/// mRNA share (w = 0 when no doses have been given).
pub fn efficacy_mix(w: f64, value_mrna: f64, value_other: f64) -> f64 {
    w * value_mrna + (1.0 - w) * value_other
}

// ---------------------------------------------------------------------------
// Region simulation
// ---------------------------------------------------------------------------

/// Parameter-independent inputs for simulating one region.
#[derive(Debug, Clone, Copy)]
pub struct RegionInputs<'a> {
    pub region: usize,
    /// Population per age band for this region.
    pub populations: &'a [f64],
    pub contacts: &'a ContactSchedule,
    /// Vaccination rates and efficacies; `None` disables the campaign.
    pub vaccination: Option<&'a VaccinationSchedule>,
}

/// What to record during a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Keep the full state tensor at every step (needed for analysis
    /// products; the likelihood only needs the summary series).
    pub record_states: bool,
    /// Simulate with π ≡ α ≡ 0 (dose transitions still occur but are inert).
    pub zero_efficacy: bool,
}

/// Per-region trajectory: state summaries at steps 0..=K and flows during
/// steps 0..K.
#[derive(Debug, Clone)]
pub struct RegionTrajectory {
    pub n_ages: usize,
    pub n_doses: usize,
    pub n_steps: usize,
    /// β actually used at each step.
    pub beta: Vec<f64>,
    /// New infections Δ^{V_q} during step k: [k*(n_doses) + q][a] flattened
    /// as (k*n_doses + q)*n_ages + a.
    pub delta: Vec<f64>,
    /// New first infections (out of S) during step k: k*n_ages + a.
    pub delta_first: Vec<f64>,
    /// Waning returns W→Wˢ during step k: k*n_ages + a.
    pub waned: Vec<f64>,
    /// PCR-positive prevalence Σ_q (I¹+I²+R⁺) at step k (0..=K): k*n_ages + a.
    pub prevalence: Vec<f64>,
    /// Never-infected susceptibles Σ_q S at step k (0..=K): k*n_ages + a.
    pub never_infected: Vec<f64>,
    /// S + Wˢ per dose at step k (0..=K): (k*n_doses + q)*n_ages + a.
    pub sus_by_dose: Vec<f64>,
    /// Full state (a, q, state) per step when requested; (K+1) frames.
    pub states: Option<Vec<f64>>,
}

impl RegionTrajectory {
    #[inline]
    pub fn delta_at(&self, k: usize, q: usize, a: usize) -> f64 {
        self.delta[(k * self.n_doses + q) * self.n_ages + a]
    }

    #[inline]
    pub fn sus_by_dose_at(&self, k: usize, q: usize, a: usize) -> f64 {
        self.sus_by_dose[(k * self.n_doses + q) * self.n_ages + a]
    }

    /// Total new infections (all doses) during step k.
    pub fn delta_total(&self, k: usize, a: usize) -> f64 {
        (0..self.n_doses).map(|q| self.delta_at(k, q, a)).sum()
    }

    pub fn state_frame(&self, k: usize) -> Option<&[f64]> {
        let len = self.n_ages * self.n_doses * N_STATES;
        self.states.as_ref().map(|s| &s[k * len..(k + 1) * len])
    }
}

#[inline]
fn cell(n_doses: usize, a: usize, q: usize, s: usize) -> usize {
    (a * n_doses + q) * N_STATES + s
}

/// Per-step transition fractions implied by the global durations. Errors if
/// any per-step fraction exceeds 1 (configuration too coarse for dt).
struct StepRates {
    latent: f64,
    infectious: f64,
    pcr_clear: f64,
}

impl StepRates {
    fn new(global: &GlobalParams, dt: f64) -> Result<Self> {
        let latent = 2.0 * dt / global.d_l;
        let infectious = 2.0 * dt / global.d_i;
        let pcr_clear = dt / global.d_r;
        let min_dw = global
            .waning
            .pieces
            .iter()
            .map(|&(_, d)| d)
            .fold(f64::INFINITY, f64::min);
        let waning_max = 2.0 * dt / min_dw;
        for (name, f) in [
            ("latent", latent),
            ("infectious", infectious),
            ("PCR clearance", pcr_clear),
            ("waning", waning_max),
        ] {
            if f > 1.0 {
                return Err(Error::Simulation(format!(
                    "{name} per-step fraction {f:.3} exceeds 1; dt too coarse for the \
                     configured durations"
                )));
            }
        }
        Ok(Self { latent, infectious, pcr_clear })
    }
}

/// Advances one region by a single step. `cur` and `next` are (age, dose,
/// state) slices; flows are accumulated into the provided buffers.
#[allow(clippy::too_many_arguments)]
fn step_region(
    cur: &[f64],
    next: &mut [f64],
    n_ages: usize,
    n_doses: usize,
    dt: f64,
    rates: &StepRates,
    waning_frac: f64,
    // exponent[a*n_ages + a'] = β m_a C_{aa'} / N_{a'} (per day)
    exponent: &[f64],
    pi_day: &dyn Fn(usize, usize) -> f64,
    vacc_day: Option<(&VaccinationSchedule, usize, usize)>, // (sched, region, day)
    delta_out: &mut [f64],       // per (q, a)
    delta_first_out: &mut [f64], // per a
    waned_out: &mut [f64],       // per a
) {
    next.copy_from_slice(cur);

    // Infectious totals over doses and stages.
    let mut i_plus = vec![0.0; n_ages];
    for a in 0..n_ages {
        let mut t = 0.0;
        for q in 0..n_doses {
            t += cur[cell(n_doses, a, q, Disease::I1 as usize)]
                + cur[cell(n_doses, a, q, Disease::I2 as usize)];
        }
        i_plus[a] = t;
    }

    for a in 0..n_ages {
        // λ^{V₀} = 1 − exp(−Σ_{a'} I⁺_{a'} x_{aa'}); ln(1−b) = −x exactly for
        // the exponential pairwise form.
        let mut sum = 0.0;
        for (a2, &ip) in i_plus.iter().enumerate() {
            sum += ip * exponent[a * n_ages + a2];
        }
        let lambda0 = -(-sum).exp_m1();

        for q in 0..n_doses {
            let lambda_q = (1.0 - pi_day(q, a)) * lambda0;
            let inf_frac = (lambda_q * dt).min(1.0);
            let vax_frac = match vacc_day {
                Some((sched, region, day)) if q + 1 < n_doses && q < sched.max_dose => {
                    (sched.rate[region][sched.idx(day, q + 1, a)] * dt).min(1.0)
                }
                _ => 0.0,
            };

            // Out-fractions per state; proportional rescale when the total
            // would exceed the occupancy.
            let transfers: [(usize, f64, usize); 7] = [
                (Disease::S as usize, inf_frac, Disease::E1 as usize),
                (Disease::WS as usize, inf_frac, Disease::E1 as usize),
                (Disease::E1 as usize, rates.latent, Disease::E2 as usize),
                (Disease::E2 as usize, rates.latent, Disease::I1 as usize),
                (Disease::I1 as usize, rates.infectious, Disease::I2 as usize),
                (Disease::I2 as usize, rates.infectious, Disease::RPos as usize),
                (Disease::RPos as usize, rates.pcr_clear, Disease::RNeg as usize),
            ];
            for s in 0..N_STATES {
                let occ = cur[cell(n_doses, a, q, s)];
                if occ == 0.0 {
                    continue;
                }
                let mut disease_frac = 0.0;
                let mut dest = 0usize;
                for &(src, frac, d) in &transfers {
                    if src == s {
                        disease_frac = frac;
                        dest = d;
                    }
                }
                if s == Disease::RNeg as usize {
                    disease_frac = waning_frac;
                    dest = Disease::W as usize;
                } else if s == Disease::W as usize {
                    disease_frac = waning_frac;
                    dest = Disease::WS as usize;
                }
                let total = disease_frac + vax_frac;
                let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
                let disease_flow = occ * disease_frac * scale;
                let vax_flow = occ * vax_frac * scale;

                if disease_flow > 0.0 {
                    next[cell(n_doses, a, q, s)] -= disease_flow;
                    next[cell(n_doses, a, q, dest)] += disease_flow;
                    if s == Disease::S as usize || s == Disease::WS as usize {
                        delta_out[q * n_ages + a] += disease_flow;
                        if s == Disease::S as usize {
                            delta_first_out[a] += disease_flow;
                        }
                    }
                    if s == Disease::W as usize {
                        waned_out[a] += disease_flow;
                    }
                }
                if vax_flow > 0.0 {
                    next[cell(n_doses, a, q, s)] -= vax_flow;
                    next[cell(n_doses, a, q + 1, s)] += vax_flow;
                }
            }
        }
    }
}

/// Public single-step interface over a full multi-region state tensor.
///
/// Returns the next state plus the per-step flows (new infections per dose,
/// first infections, waning returns), each laid out per region.
pub fn step(
    state: &crate::strata::StateTensor,
    spec: &StratumSpec,
    global: &GlobalParams,
    regionals: &[RegionalParams],
    m_by_age: &[Vec<f64>],
    contacts: &ContactSchedule,
    populations: &[f64],
    vaccination: Option<&VaccinationSchedule>,
    k: usize,
) -> Result<(crate::strata::StateTensor, Vec<StepFlows>)> {
    let rates = StepRates::new(global, spec.dt)?;
    let day = spec.day_of(k);
    let waning_frac = 2.0 * spec.dt / global.waning.d_w_at(day);
    let n_a = spec.n_ages;
    let n_q = spec.n_doses();

    let mut next = state.clone();
    next.time_index = k + 1;
    let mut flows = Vec::with_capacity(spec.n_regions);
    for r in 0..spec.n_regions {
        let regional = &regionals[r];
        let week = (day as usize / BETA_PERIOD_DAYS).min(regional.log_beta_walk.len() - 1);
        let beta0 = repro::calibrate_beta0(
            regional.psi,
            global.d_l,
            global.d_i,
            spec.dt,
            &m_by_age[r],
            contacts.matrix(r, 0),
            &populations[r * n_a..(r + 1) * n_a],
        )?;
        let beta = beta0 * regional.log_beta_walk[week].exp();
        let c = contacts.matrix(r, day);
        let mut exponent = vec![0.0; n_a * n_a];
        for a in 0..n_a {
            for a2 in 0..n_a {
                let n_src = populations[r * n_a + a2];
                exponent[a * n_a + a2] = if n_src > 0.0 {
                    beta * m_by_age[r][a] * c[a * n_a + a2] / n_src
                } else {
                    0.0
                };
            }
        }
        let mut f = StepFlows {
            delta: vec![0.0; n_q * n_a],
            delta_first: vec![0.0; n_a],
            waned: vec![0.0; n_a],
        };
        let pi_day = |q: usize, a: usize| match vaccination {
            Some(s) => s.pi_at(r, day as usize, q, a),
            None => 0.0,
        };
        let vacc_day = vaccination.map(|s| (s, r, day as usize));
        step_region(
            state.region(r),
            next.region_mut(r),
            n_a,
            n_q,
            spec.dt,
            &rates,
            waning_frac,
            &exponent,
            &pi_day,
            vacc_day,
            &mut f.delta,
            &mut f.delta_first,
            &mut f.waned,
        );
        flows.push(f);
    }
    Ok((next, flows))
}

/// Per-step flows for one region.
#[derive(Debug, Clone)]
pub struct StepFlows {
    /// New infections per (dose, age), q*n_ages + a.
    pub delta: Vec<f64>,
    /// New first infections (out of S) per age.
    pub delta_first: Vec<f64>,
    /// Waning returns W→Wˢ per age.
    pub waned: Vec<f64>,
}

/// Runs the deterministic dynamics for one region over the whole horizon.
///
/// Each region is seeded with `I0` individuals distributed across the E/I
/// stages in the exponential-growth eigen-proportions implied by ψ, with age
/// shares proportional to population, and β starts at the value calibrated so
/// that early growth equals ψ.
pub fn simulate_region(
    inputs: &RegionInputs,
    spec: &StratumSpec,
    global: &GlobalParams,
    regional: &RegionalParams,
    m_by_age: &[f64],
    opts: &SimOptions,
) -> Result<RegionTrajectory> {
    let n_a = spec.n_ages;
    let n_q = spec.n_doses();
    let k_total = spec.n_steps;
    let rates = StepRates::new(global, spec.dt)?;

    let beta0 = repro::calibrate_beta0(
        regional.psi,
        global.d_l,
        global.d_i,
        spec.dt,
        m_by_age,
        inputs.contacts.matrix(inputs.region, 0),
        inputs.populations,
    )?;

    // Seed in the eigen-proportions of the discrete linearized stage system.
    let phi = ((regional.psi * spec.dt).exp() - 1.0) / spec.dt;
    let gamma_l = 2.0 / global.d_l;
    let gamma_i = 2.0 / global.d_i;
    let e1 = 1.0;
    let e2 = gamma_l * e1 / (phi + gamma_l);
    let i1 = gamma_l * e2 / (phi + gamma_i);
    let i2 = gamma_i * i1 / (phi + gamma_i);
    let stage_total = e1 + e2 + i1 + i2;
    let pop_total: f64 = inputs.populations.iter().sum();

    let frame = n_a * n_q * N_STATES;
    let mut cur = vec![0.0; frame];
    for a in 0..n_a {
        let n_ra = inputs.populations[a];
        let seed = regional.i0 * n_ra / pop_total;
        if seed > n_ra {
            return Err(Error::Simulation(format!(
                "initial seed {seed} exceeds population {n_ra} in age band {a}"
            )));
        }
        cur[cell(n_q, a, 0, Disease::S as usize)] = n_ra - seed;
        cur[cell(n_q, a, 0, Disease::E1 as usize)] = seed * e1 / stage_total;
        cur[cell(n_q, a, 0, Disease::E2 as usize)] = seed * e2 / stage_total;
        cur[cell(n_q, a, 0, Disease::I1 as usize)] = seed * i1 / stage_total;
        cur[cell(n_q, a, 0, Disease::I2 as usize)] = seed * i2 / stage_total;
    }

    let mut traj = RegionTrajectory {
        n_ages: n_a,
        n_doses: n_q,
        n_steps: k_total,
        beta: vec![0.0; k_total],
        delta: vec![0.0; k_total * n_q * n_a],
        delta_first: vec![0.0; k_total * n_a],
        waned: vec![0.0; k_total * n_a],
        prevalence: vec![0.0; (k_total + 1) * n_a],
        never_infected: vec![0.0; (k_total + 1) * n_a],
        sus_by_dose: vec![0.0; (k_total + 1) * n_q * n_a],
        states: opts.record_states.then(|| vec![0.0; (k_total + 1) * frame]),
    };

    let mut next = vec![0.0; frame];
    let mut exponent = vec![0.0; n_a * n_a];
    let mut active_week = usize::MAX;
    let mut active_bp = usize::MAX;

    for k in 0..=k_total {
        // Record state summaries at step k.
        for a in 0..n_a {
            let mut prev = 0.0;
            let mut never = 0.0;
            for q in 0..n_q {
                prev += cur[cell(n_q, a, q, Disease::I1 as usize)]
                    + cur[cell(n_q, a, q, Disease::I2 as usize)]
                    + cur[cell(n_q, a, q, Disease::RPos as usize)];
                never += cur[cell(n_q, a, q, Disease::S as usize)];
                traj.sus_by_dose[(k * n_q + q) * n_a + a] = cur
                    [cell(n_q, a, q, Disease::S as usize)]
                    + cur[cell(n_q, a, q, Disease::WS as usize)];
            }
            traj.prevalence[k * n_a + a] = prev;
            traj.never_infected[k * n_a + a] = never;
        }
        if let Some(states) = traj.states.as_mut() {
            states[k * frame..(k + 1) * frame].copy_from_slice(&cur);
        }
        if k == k_total {
            break;
        }

        let day = spec.day_of(k);
        let week = (day as usize / BETA_PERIOD_DAYS).min(regional.log_beta_walk.len() - 1);
        let bp = inputs.contacts.active_index(day);
        let beta = beta0 * regional.log_beta_walk[week].exp();
        if week != active_week || bp != active_bp {
            let c = inputs.contacts.matrix(inputs.region, day);
            for a in 0..n_a {
                for a2 in 0..n_a {
                    let n_src = inputs.populations[a2];
                    exponent[a * n_a + a2] = if n_src > 0.0 {
                        beta * m_by_age[a] * c[a * n_a + a2] / n_src
                    } else {
                        0.0
                    };
                }
            }
            active_week = week;
            active_bp = bp;
        }
        traj.beta[k] = beta;

        let waning_frac = 2.0 * spec.dt / global.waning.d_w_at(day);
        let vacc_day = inputs.vaccination.map(|s| (s, inputs.region, day as usize));
        let region = inputs.region;
        let vaccination = inputs.vaccination;
        let zero_eff = opts.zero_efficacy;
        let pi_day = move |q: usize, a: usize| {
            if zero_eff {
                0.0
            } else {
                match vaccination {
                    Some(s) => s.pi_at(region, day as usize, q, a),
                    None => 0.0,
                }
            }
        };

        let (d0, d1) = (k * n_q * n_a, (k + 1) * n_q * n_a);
        let (f0, f1) = (k * n_a, (k + 1) * n_a);
        // waned/delta_first share the same per-age layout
        let mut waned_buf = vec![0.0; n_a];
        step_region(
            &cur,
            &mut next,
            n_a,
            n_q,
            spec.dt,
            &rates,
            waning_frac,
            &exponent,
            &pi_day,
            vacc_day,
            &mut traj.delta[d0..d1],
            &mut traj.delta_first[f0..f1],
            &mut waned_buf,
        );
        traj.waned[f0..f1].copy_from_slice(&waned_buf);
        std::mem::swap(&mut cur, &mut next);
    }

    if cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation("non-finite state encountered".into()));
    }
    Ok(traj)
}

/// Simulates every region; regions are independent given global parameters.
pub fn simulate(
    spec: &StratumSpec,
    global: &GlobalParams,
    regionals: &[RegionalParams],
    m_by_age: &[Vec<f64>],
    contacts: &ContactSchedule,
    populations: &[f64],
    vaccination: Option<&VaccinationSchedule>,
    opts: &SimOptions,
) -> Result<Vec<RegionTrajectory>> {
    (0..spec.n_regions)
        .map(|r| {
            let inputs = RegionInputs {
                region: r,
                populations: &populations[r * spec.n_ages..(r + 1) * spec.n_ages],
                contacts,
                vaccination,
            };
            simulate_region(&inputs, spec, global, &regionals[r], &m_by_age[r], opts)
        })
        .collect()
}
