//! Run configuration: a structured TOML file covering stratification,
//! model constants, initial values, priors, efficacy tables, observation
//! settings and sampler options. Unknown keys are rejected.

use crate::dynamics::EfficacyTables;
use crate::inference::{AmgsConfig, FitOptions};
use crate::observation::{AgeGroupMap, StreamToggles};
use crate::params::{EstimationFlags, ModelParams, ParamLayout};
use crate::priors::PriorConfig;
use crate::severity::DelayDistribution;
use crate::strata::{
    AssayParams, GlobalParams, RegionalParams, StratumSpec, WaningSchedule,
};
use crate::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

fn default_dt() -> f64 {
    0.5
}
fn default_max_dose() -> usize {
    4
}

/// Stratification and horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataConfig {
    pub n_regions: usize,
    pub n_ages: usize,
    #[serde(default = "default_max_dose")]
    pub max_dose: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub horizon_days: usize,
    pub start_date: NaiveDate,
}

fn default_d_l() -> f64 {
    2.0
}
fn default_d_i() -> f64 {
    4.6
}
fn default_d_r() -> f64 {
    13.4
}
fn default_eta() -> f64 {
    5.0
}
fn default_sigma_beta() -> f64 {
    0.01
}
fn default_psi() -> Vec<f64> {
    vec![0.14]
}
fn default_i0() -> Vec<f64> {
    vec![100.0]
}
fn default_m() -> Vec<f64> {
    vec![1.0]
}
fn default_waning() -> Vec<(i64, f64)> {
    vec![(0, 534.0)]
}
fn default_window() -> f64 {
    30.0
}

/// Model constants and initial (or fixed) parameter values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_l")]
    pub d_l: f64,
    #[serde(default = "default_d_i")]
    pub d_i: f64,
    #[serde(default = "default_d_r")]
    pub d_r: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_sigma_beta")]
    pub sigma_beta: f64,
    /// Per region, or a single value broadcast to all regions.
    #[serde(default = "default_psi")]
    pub psi: Vec<f64>,
    #[serde(default = "default_i0")]
    pub i0: Vec<f64>,
    /// Contact modifiers, region-major (n_regions × n_ages), single value
    /// broadcast, or n_ages values shared across regions.
    #[serde(default = "default_m")]
    pub m: Vec<f64>,
    /// Baseline severity ratio per age band.
    pub p0: Vec<f64>,
    /// Waning schedule as (from_day, d_w) pieces.
    #[serde(default = "default_waning")]
    pub waning: Vec<(i64, f64)>,
    #[serde(default)]
    pub severity_changepoint_days: Vec<f64>,
    #[serde(default = "default_window")]
    pub severity_window_days: f64,
    /// Initial ζ values, age-major; zeros by default.
    #[serde(default)]
    pub zeta: Vec<Vec<f64>>,
}

fn default_assay(sens: f64, spec: f64) -> AssayParams {
    AssayParams { sens, spec }
}

/// Assay characteristics (initial values when estimated).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssayConfig {
    pub sens: f64,
    pub spec: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssaysConfig {
    pub euroimmun: AssayConfig,
    pub roche_n: AssayConfig,
}

impl Default for AssaysConfig {
    fn default() -> Self {
        let e = default_assay(0.747, 0.99);
        let r = default_assay(0.972, 0.998);
        Self {
            euroimmun: AssayConfig { sens: e.sens, spec: e.spec },
            roche_n: AssayConfig { sens: r.sens, spec: r.spec },
        }
    }
}

fn default_delay_shape() -> f64 {
    4.0
}
fn default_delay_rate() -> f64 {
    0.4
}
fn default_delay_max() -> f64 {
    60.0
}

/// Infection-to-severe-event delay (discretised gamma, or an explicit CSV).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayConfig {
    pub shape: f64,
    pub rate: f64,
    pub max_days: f64,
    /// Optional CSV of (lag_days, mass) overriding the gamma.
    pub file: Option<String>,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            shape: default_delay_shape(),
            rate: default_delay_rate(),
            max_days: default_delay_max(),
            file: None,
        }
    }
}

fn default_serology_lag() -> i64 {
    25
}
fn default_vaccination_lag() -> i64 {
    21
}

/// Observation-model settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Model age bands counted as serology-eligible.
    #[serde(default)]
    pub eligible_ages: Vec<usize>,
    /// Observation group per model age band; identity map by default.
    #[serde(default)]
    pub count_age_groups: Option<Vec<usize>>,
    #[serde(default = "default_serology_lag")]
    pub serology_lag_days: i64,
    #[serde(default = "default_vaccination_lag")]
    pub vaccination_lag_days: i64,
    /// Serology survey size used when simulating datasets.
    #[serde(default = "default_serology_sample_size")]
    pub serology_sample_size: u64,
    /// Log-scale standard deviation of simulated prevalence estimates.
    #[serde(default = "default_prevalence_log_sd")]
    pub prevalence_log_sd: f64,
    #[serde(default)]
    pub streams: StreamTogglesConfig,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            eligible_ages: Vec::new(),
            count_age_groups: None,
            serology_lag_days: default_serology_lag(),
            vaccination_lag_days: default_vaccination_lag(),
            serology_sample_size: default_serology_sample_size(),
            prevalence_log_sd: default_prevalence_log_sd(),
            streams: StreamTogglesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamTogglesConfig {
    pub counts: bool,
    pub serology: bool,
    pub prevalence: bool,
}

impl Default for StreamTogglesConfig {
    fn default() -> Self {
        Self { counts: true, serology: true, prevalence: true }
    }
}

fn default_serology_sample_size() -> u64 {
    800
}
fn default_prevalence_log_sd() -> f64 {
    0.1
}
fn default_iterations() -> usize {
    2000
}
fn default_burn_in() -> usize {
    1000
}
fn default_thin() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}

/// Sampler settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    #[serde(default = "default_iterations")]
    pub n_iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub amgs: AmgsConfigToml,
    #[serde(default = "default_true")]
    pub adapt_after_burn_in: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iterations: default_iterations(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            seed: default_seed(),
            amgs: AmgsConfigToml::default(),
            adapt_after_burn_in: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmgsConfigToml {
    pub target_accept: f64,
    pub rm_exponent: f64,
    pub epsilon: f64,
    pub warm_start: usize,
    pub init_scale: f64,
}

impl Default for AmgsConfigToml {
    fn default() -> Self {
        let c = AmgsConfig::default();
        Self {
            target_accept: c.target_accept,
            rm_exponent: c.rm_exponent,
            epsilon: c.epsilon,
            warm_start: c.warm_start,
            init_scale: c.init_scale,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strata: StrataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub assays: AssaysConfig,
    #[serde(default)]
    pub delay: DelayConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub estimate: EstimationFlags,
    /// Vaccine efficacy eras; zero efficacies when omitted.
    #[serde(default)]
    pub efficacy: Option<EfficacyTables>,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
}

fn broadcast(values: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        l if l == n => Ok(values.to_vec()),
        l => Err(Error::Config(format!("{what} needs 1 or {n} values, found {l}"))),
    }
}

impl RunConfig {
    /// Parses and validates a TOML config file.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    /// Parses and validates config text.
    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.model.p0.len() != self.strata.n_ages {
            return Err(Error::Config(format!(
                "model.p0 needs one entry per age band ({})",
                self.strata.n_ages
            )));
        }
        if self.model.waning.is_empty() || self.model.waning[0].0 > 0 {
            return Err(Error::Config("model.waning must cover day 0".into()));
        }
        if let Some(t) = &self.efficacy {
            t.validate(self.strata.max_dose)?;
        }
        if let Some(groups) = &self.observation.count_age_groups {
            let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
            AgeGroupMap { n_groups, group_of_age: groups.clone() }
                .validate(self.strata.n_ages)?;
        }
        if self.observation.eligible_ages.iter().any(|&a| a >= self.strata.n_ages) {
            return Err(Error::Config("observation.eligible_ages out of range".into()));
        }
        self.template()?; // exercises broadcast checks
        Ok(())
    }

    /// The stratification implied by the config.
    pub fn spec(&self) -> Result<StratumSpec> {
        StratumSpec::new(
            self.strata.n_regions,
            self.strata.n_ages,
            self.strata.max_dose,
            self.strata.dt,
            self.strata.horizon_days,
            self.strata.start_date,
        )
    }

    /// Number of weekly β-walk values over the horizon.
    pub fn n_weeks(&self) -> usize {
        self.strata.horizon_days.div_ceil(crate::dynamics::BETA_PERIOD_DAYS)
    }

    /// Template (initial / fixed) parameters in natural space.
    pub fn template(&self) -> Result<ModelParams> {
        let n_r = self.strata.n_regions;
        let n_a = self.strata.n_ages;
        let n_cp = self.model.severity_changepoint_days.len();
        let zeta = if self.model.zeta.is_empty() {
            vec![vec![0.0; n_cp]; n_a]
        } else {
            if self.model.zeta.len() != n_a
                || self.model.zeta.iter().any(|row| row.len() != n_cp)
            {
                return Err(Error::Config(
                    "model.zeta must be n_ages rows of one value per changepoint".into(),
                ));
            }
            self.model.zeta.clone()
        };
        let global = GlobalParams {
            d_i: self.model.d_i,
            d_l: self.model.d_l,
            d_r: self.model.d_r,
            waning: WaningSchedule { pieces: self.model.waning.clone() },
            eta: self.model.eta,
            sigma_beta: self.model.sigma_beta,
            euroimmun: AssayParams {
                sens: self.assays.euroimmun.sens,
                spec: self.assays.euroimmun.spec,
            },
            roche_n: AssayParams {
                sens: self.assays.roche_n.sens,
                spec: self.assays.roche_n.spec,
            },
            zeta,
            p0: self.model.p0.clone(),
        };
        global.validate()?;
        global.waning.validate()?;
        let psi = broadcast(&self.model.psi, n_r, "model.psi")?;
        let i0 = broadcast(&self.model.i0, n_r, "model.i0")?;
        let m_flat = match self.model.m.len() {
            1 => vec![self.model.m[0]; n_r * n_a],
            l if l == n_a => {
                let mut out = Vec::with_capacity(n_r * n_a);
                for _ in 0..n_r {
                    out.extend(&self.model.m);
                }
                out
            }
            l if l == n_r * n_a => self.model.m.clone(),
            l => {
                return Err(Error::Config(format!(
                    "model.m needs 1, {n_a} or {} values, found {l}",
                    n_r * n_a
                )))
            }
        };
        let n_weeks = self.n_weeks();
        let regional = (0..n_r)
            .map(|r| {
                let reg = RegionalParams {
                    m: m_flat[r * n_a..(r + 1) * n_a].to_vec(),
                    psi: psi[r],
                    i0: i0[r],
                    log_beta_walk: vec![0.0; n_weeks],
                };
                reg.validate().map(|_| reg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { global, regional })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(
            self.strata.n_regions,
            self.strata.n_ages,
            self.n_weeks(),
            self.model.severity_changepoint_days.len(),
            self.estimate,
        )
    }

    pub fn age_map(&self) -> AgeGroupMap {
        match &self.observation.count_age_groups {
            Some(groups) => AgeGroupMap {
                n_groups: groups.iter().max().map_or(0, |&g| g + 1),
                group_of_age: groups.clone(),
            },
            None => AgeGroupMap::identity(self.strata.n_ages),
        }
    }

    pub fn stream_toggles(&self) -> StreamToggles {
        StreamToggles {
            counts: self.observation.streams.counts,
            serology: self.observation.streams.serology,
            prevalence: self.observation.streams.prevalence,
        }
    }

    pub fn delay_distribution(&self) -> Result<DelayDistribution> {
        if let Some(file) = &self.delay.file {
            let mut reader = csv::Reader::from_path(file)?;
            let spd = (1.0 / self.strata.dt).round() as usize;
            let mut by_step: Vec<f64> = Vec::new();
            for record in reader.deserialize() {
                let (lag_days, mass): (f64, f64) = record?;
                let step = (lag_days / self.strata.dt).round() as usize;
                if by_step.len() <= step {
                    by_step.resize(step + 1, 0.0);
                }
                by_step[step] += mass;
            }
            let _ = spd;
            DelayDistribution::new(by_step)
        } else {
            DelayDistribution::discretized_gamma(
                self.delay.shape,
                self.delay.rate,
                self.strata.dt,
                self.delay.max_days,
            )
        }
    }

    pub fn efficacy_tables(&self) -> EfficacyTables {
        self.efficacy
            .clone()
            .unwrap_or_else(|| EfficacyTables::zero(self.strata.max_dose))
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            n_iterations: self.mcmc.n_iterations,
            burn_in: self.mcmc.burn_in,
            thin: self.mcmc.thin,
            seed: self.mcmc.seed,
            amgs: AmgsConfig {
                target_accept: self.mcmc.amgs.target_accept,
                rm_exponent: self.mcmc.amgs.rm_exponent,
                epsilon: self.mcmc.amgs.epsilon,
                warm_start: self.mcmc.amgs.warm_start,
                init_scale: self.mcmc.amgs.init_scale,
            },
            adapt_after_burn_in: self.mcmc.adapt_after_burn_in,
        }
    }

    /// Canonical serialisation used for config hashing.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialisation failed: {e}")))
    }
}
