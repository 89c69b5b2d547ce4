//! Posterior post-processing: infection-status snapshots, cumulative
//! infections and attack rates, reinfection fractions, counterfactual
//! vaccination impact, incidence-peak extraction and the prevalence-stream
//! sensitivity harness.

use crate::dynamics::{
    simulate_region, RegionInputs, RegionTrajectory, SimOptions, VaccinationSchedule,
};
use crate::inference::{self, FitOptions, PosteriorChain};
use crate::observation::{self, AgeGroupMap, ObservationSet};
use crate::params::{ModelParams, ParamLayout};
use crate::priors::PriorConfig;
use crate::severity::{DelayDistribution, SeveritySchedule};
use crate::strata::{ContactSchedule, Disease, StratumSpec, N_STATES};
use crate::{Error, Result};
use rayon::prelude::*;

/// Disease-state groups reported by the snapshot product.
pub const SNAPSHOT_GROUPS: [&str; 5] = [
    "susceptible_never_infected",
    "susceptible_previously_infected",
    "latent",
    "infectious",
    "immune",
];

fn group_of_state(s: usize) -> usize {
    match s {
        x if x == Disease::S as usize => 0,
        x if x == Disease::WS as usize => 1,
        x if x == Disease::E1 as usize || x == Disease::E2 as usize => 2,
        x if x == Disease::I1 as usize || x == Disease::I2 as usize => 3,
        _ => 4,
    }
}

/// Per-age distribution over (state group × dose) at one step.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub n_ages: usize,
    pub n_doses: usize,
    /// fractions[(a * 5 + g) * n_doses + q]; each age row sums to 1.
    pub fractions: Vec<f64>,
}

impl Snapshot {
    #[inline]
    pub fn fraction(&self, a: usize, group: usize, q: usize) -> f64 {
        self.fractions[(a * SNAPSHOT_GROUPS.len() + group) * self.n_doses + q]
    }
}

/// Population shares by infection status and dose at step `k`. Requires a
/// trajectory recorded with full states.
pub fn snapshot(
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    populations: &[f64],
    k: usize,
) -> Result<Snapshot> {
    let frame = traj.state_frame(k).ok_or_else(|| {
        Error::State("snapshot needs a trajectory recorded with full states".into())
    })?;
    let (n_a, n_q) = (spec.n_ages, traj.n_doses);
    let mut fractions = vec![0.0; n_a * SNAPSHOT_GROUPS.len() * n_q];
    for a in 0..n_a {
        for q in 0..n_q {
            for s in 0..N_STATES {
                let mass = frame[(a * n_q + q) * N_STATES + s];
                fractions[(a * SNAPSHOT_GROUPS.len() + group_of_state(s)) * n_q + q] +=
                    mass / populations[a];
            }
        }
    }
    Ok(Snapshot { n_ages: n_a, n_doses: n_q, fractions })
}

/// Cumulative infection bookkeeping for one region, aggregated over ages.
#[derive(Debug, Clone)]
pub struct InfectionSeries {
    /// Cumulative infections at step boundaries 0..=K.
    pub cumulative: Vec<f64>,
    /// Cumulative first infections (out of the never-infected ledger).
    pub cumulative_first: Vec<f64>,
    /// Ever-infected fraction of the population at steps 0..=K.
    pub attack_rate: Vec<f64>,
    /// Reinfection share of new infections during flow steps 0..K; absent
    /// when a step has no infections.
    pub reinfection_fraction: Vec<Option<f64>>,
}

/// Running infection totals, attack rates and reinfection fractions.
pub fn cumulative_and_attack(traj: &RegionTrajectory, populations: &[f64]) -> InfectionSeries {
    let n_a = traj.n_ages;
    let k_total = traj.n_steps;
    let pop: f64 = populations.iter().sum();
    let mut out = InfectionSeries {
        cumulative: Vec::with_capacity(k_total + 1),
        cumulative_first: Vec::with_capacity(k_total + 1),
        attack_rate: Vec::with_capacity(k_total + 1),
        reinfection_fraction: Vec::with_capacity(k_total),
    };
    let mut cum = 0.0;
    let mut cum_first = 0.0;
    for k in 0..=k_total {
        out.cumulative.push(cum);
        out.cumulative_first.push(cum_first);
        let never: f64 = (0..n_a).map(|a| traj.never_infected[k * n_a + a]).sum();
        out.attack_rate.push((1.0 - never / pop).clamp(0.0, 1.0));
        if k == k_total {
            break;
        }
        let total: f64 = (0..n_a).map(|a| traj.delta_total(k, a)).sum();
        let first: f64 = (0..n_a).map(|a| traj.delta_first[k * n_a + a]).sum();
        out.reinfection_fraction.push(if total > 0.0 {
            Some(((total - first) / total).clamp(0.0, 1.0))
        } else {
            None
        });
        cum += total;
        cum_first += first;
    }
    out
}

/// Prevented totals from one counterfactual pairing, to the cutoff.
#[derive(Debug, Clone, Copy)]
pub struct CounterfactualOutcome {
    pub prevented_infections: f64,
    pub prevented_admissions: f64,
}

fn total_infections_to(traj: &RegionTrajectory, k_cut: usize) -> f64 {
    (0..k_cut).map(|k| (0..traj.n_ages).map(|a| traj.delta_total(k, a)).sum::<f64>()).sum()
}

fn total_admissions_to(
    traj: &RegionTrajectory,
    spec: &StratumSpec,
    alpha_at: &dyn Fn(usize, usize, usize) -> f64,
    severity: &SeveritySchedule,
    delay: &DelayDistribution,
    age_map: &AgeGroupMap,
    k_cut: usize,
) -> f64 {
    let mu = observation::expected_event_series(traj, spec, alpha_at, severity, delay, age_map);
    mu[..k_cut * age_map.n_groups].iter().sum()
}

/// Re-simulates one region with all vaccine efficacies zeroed (dose
/// transitions still occur but are inert) and reports events prevented by
/// the factual campaign up to `cutoff_day`. The pairing is deterministic,
/// so the difference is attributable solely to the efficacy parameters.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_no_vaccine(
    inputs: &RegionInputs,
    spec: &StratumSpec,
    params: &ModelParams,
    severity: &SeveritySchedule,
    delay: &DelayDistribution,
    age_map: &AgeGroupMap,
    cutoff_day: usize,
) -> Result<CounterfactualOutcome> {
    if cutoff_day > spec.horizon_days() {
        return Err(Error::OutOfHorizon(format!(
            "counterfactual cutoff day {cutoff_day} exceeds the {}-day horizon",
            spec.horizon_days()
        )));
    }
    let r = inputs.region;
    let regional = &params.regional[r];
    let factual = simulate_region(
        inputs,
        spec,
        &params.global,
        regional,
        &regional.m,
        &SimOptions::default(),
    )?;
    let counterfactual = simulate_region(
        inputs,
        spec,
        &params.global,
        regional,
        &regional.m,
        &SimOptions { record_states: false, zero_efficacy: true },
    )?;
    let k_cut = cutoff_day * spec.steps_per_day();
    let vaccination = inputs.vaccination;
    let alpha_factual = move |day: usize, q: usize, a: usize| match vaccination {
        Some(v) => v.alpha_at(r, day, q, a),
        None => 0.0,
    };
    let adm_factual = total_admissions_to(
        &factual, spec, &alpha_factual, severity, delay, age_map, k_cut,
    );
    let adm_counter = total_admissions_to(
        &counterfactual, spec, &|_, _, _| 0.0, severity, delay, age_map, k_cut,
    );
    Ok(CounterfactualOutcome {
        prevented_infections: total_infections_to(&counterfactual, k_cut)
            - total_infections_to(&factual, k_cut),
        prevented_admissions: adm_counter - adm_factual,
    })
}

/// Daily new infections for one region, summed over ages and doses.
pub fn daily_incidence(traj: &RegionTrajectory, spec: &StratumSpec) -> Vec<f64> {
    let spd = spec.steps_per_day();
    (0..spec.horizon_days())
        .map(|d| {
            (d * spd..(d + 1) * spd)
                .map(|k| (0..traj.n_ages).map(|a| traj.delta_total(k, a)).sum::<f64>())
                .sum()
        })
        .collect()
}

/// One extracted incidence peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub day: usize,
    pub size: f64,
}

/// Highest daily incidence within ±`window_days` of each reference day;
/// ties break to the earliest day. A wave whose window misses the horizon
/// entirely is skipped (`None`) with a logged note.
pub fn peak_extract(daily: &[f64], reference_days: &[i64], window_days: i64) -> Vec<Option<Peak>> {
    reference_days
        .iter()
        .map(|&reference| {
            let lo = reference - window_days;
            let hi = reference + window_days;
            if hi < 0 || lo >= daily.len() as i64 {
                log::warn!(
                    "peak window [{lo}, {hi}] around reference day {reference} lies outside \
                     the horizon; wave skipped"
                );
                return None;
            }
            let lo = lo.max(0) as usize;
            let hi = (hi.min(daily.len() as i64 - 1)) as usize;
            let mut best = Peak { day: lo, size: daily[lo] };
            for (day, &size) in daily.iter().enumerate().take(hi + 1).skip(lo) {
                if size > best.size {
                    best = Peak { day, size };
                }
            }
            Some(best)
        })
        .collect()
}

/// Posterior q05/q50/q95 of one scalar product.
#[derive(Debug, Clone, Copy)]
pub struct Quantiles {
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        // lo + (hi − lo)·frac is exact when lo == hi, keeping quantiles
        // ordered even for degenerate sample sets.
        sorted[i] + (sorted[i + 1] - sorted[i]) * frac
    } else {
        sorted[n - 1]
    }
}

/// Interpolated posterior quantiles of a sample set.
pub fn summarize(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Some(Quantiles {
        q05: quantile(&sorted, 0.05),
        q50: quantile(&sorted, 0.50),
        q95: quantile(&sorted, 0.95),
    })
}

/// Prevalence-stream configuration levels of the sensitivity harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrevalenceLevel {
    /// All prevalence estimates.
    Full,
    /// Prevalence truncated by the final eight weeks.
    Minus8,
    /// Prevalence excluded entirely.
    None,
}

/// Days of prevalence dropped by the `minus8` level (eight weeks).
pub const SENSITIVITY_TRUNCATION_DAYS: usize = 56;

impl PrevalenceLevel {
    pub fn label(&self) -> &'static str {
        match self {
            PrevalenceLevel::Full => "full",
            PrevalenceLevel::Minus8 => "minus8",
            PrevalenceLevel::None => "none",
        }
    }
}

/// Applies one prevalence level to an observation set, leaving the other
/// streams untouched.
pub fn apply_prevalence_level(
    data: &ObservationSet,
    spec: &StratumSpec,
    level: PrevalenceLevel,
) -> ObservationSet {
    let mut out = data.clone();
    match level {
        PrevalenceLevel::Full => {}
        PrevalenceLevel::Minus8 => {
            let cutoff = spec.horizon_days().saturating_sub(SENSITIVITY_TRUNCATION_DAYS);
            out.prevalence.retain(|p| {
                ((p.date - spec.start_date).num_days() as usize) < cutoff
            });
        }
        PrevalenceLevel::None => {
            out.prevalence.clear();
            out.toggles.prevalence = false;
        }
    }
    out
}

/// Posterior summary of one wave's peak in one region.
#[derive(Debug, Clone)]
pub struct WavePeakSummary {
    pub region: usize,
    pub wave: usize,
    pub size: Quantiles,
    pub day: Quantiles,
    pub n_samples: usize,
}

/// Daily incidence per retained draw and region, simulated in parallel
/// with a fixed-order collection.
#[allow(clippy::too_many_arguments)]
pub fn posterior_daily_incidence(
    chain: &PosteriorChain,
    layout: &ParamLayout,
    template: &ModelParams,
    spec: &StratumSpec,
    contacts: &ContactSchedule,
    populations: &[f64],
    vaccination: Option<&VaccinationSchedule>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    chain
        .samples
        .par_iter()
        .map(|theta| {
            let params = layout.unpack(theta, template)?;
            (0..spec.n_regions)
                .map(|r| {
                    let inputs = RegionInputs {
                        region: r,
                        populations: &populations[r * spec.n_ages..(r + 1) * spec.n_ages],
                        contacts,
                        vaccination,
                    };
                    let traj = simulate_region(
                        &inputs,
                        spec,
                        &params.global,
                        &params.regional[r],
                        &params.regional[r].m,
                        &SimOptions::default(),
                    )?;
                    Ok(daily_incidence(&traj, spec))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Peak summaries over a posterior chain, per (region, wave).
#[allow(clippy::too_many_arguments)]
pub fn posterior_peaks(
    chain: &PosteriorChain,
    layout: &ParamLayout,
    template: &ModelParams,
    spec: &StratumSpec,
    contacts: &ContactSchedule,
    populations: &[f64],
    vaccination: Option<&VaccinationSchedule>,
    reference_days: &[i64],
    window_days: i64,
) -> Result<Vec<WavePeakSummary>> {
    let incidence =
        posterior_daily_incidence(chain, layout, template, spec, contacts, populations, vaccination)?;
    let mut summaries = Vec::new();
    for r in 0..spec.n_regions {
        for (w, _) in reference_days.iter().enumerate() {
            let mut sizes = Vec::new();
            let mut days = Vec::new();
            for sample in &incidence {
                if let Some(peak) = peak_extract(&sample[r], reference_days, window_days)[w] {
                    sizes.push(peak.size);
                    days.push(peak.day as f64);
                }
            }
            if let (Some(size), Some(day)) = (summarize(&sizes), summarize(&days)) {
                summaries.push(WavePeakSummary {
                    region: r,
                    wave: w,
                    size,
                    day,
                    n_samples: sizes.len(),
                });
            }
        }
    }
    Ok(summaries)
}

/// Shared ingredients for the sensitivity harness fits.
pub struct HarnessInputs<'a> {
    pub spec: &'a StratumSpec,
    pub layout: ParamLayout,
    pub template: ModelParams,
    pub prior_cfg: PriorConfig,
    pub populations: &'a [f64],
    pub contacts: &'a ContactSchedule,
    pub vaccination: Option<&'a VaccinationSchedule>,
    pub severity_changepoints: Vec<f64>,
    pub severity_window: f64,
    pub delay: DelayDistribution,
    pub fit: FitOptions,
}

/// One harness run: the fitted chain and its peak report.
pub struct SensitivityRun {
    pub level: PrevalenceLevel,
    pub chain: PosteriorChain,
    pub peaks: Vec<WavePeakSummary>,
}

/// Fits the model three times — `full`, `minus8` (prevalence truncated by
/// eight weeks) and `none` (prevalence excluded) — and extracts comparable
/// peak summaries around the supplied reference days.
pub fn sensitivity_harness(
    inputs: &HarnessInputs,
    data: &ObservationSet,
    reference_days: &[i64],
    window_days: i64,
) -> Result<Vec<SensitivityRun>> {
    [PrevalenceLevel::Full, PrevalenceLevel::Minus8, PrevalenceLevel::None]
        .into_iter()
        .map(|level| {
            let variant = apply_prevalence_level(data, inputs.spec, level);
            let ctx = inference::FitContext::new(
                inputs.spec,
                inputs.layout.clone(),
                inputs.template.clone(),
                inputs.prior_cfg.clone(),
                &variant,
                inputs.populations,
                inputs.contacts,
                inputs.vaccination,
                inputs.severity_changepoints.clone(),
                inputs.severity_window,
                inputs.delay.clone(),
            )?;
            let chain = inference::run(&ctx, &inputs.template, &inputs.fit)?;
            let peaks = posterior_peaks(
                &chain,
                &inputs.layout,
                &inputs.template,
                inputs.spec,
                inputs.contacts,
                inputs.populations,
                inputs.vaccination,
                reference_days,
                window_days,
            )?;
            Ok(SensitivityRun { level, chain, peaks })
        })
        .collect()
}
