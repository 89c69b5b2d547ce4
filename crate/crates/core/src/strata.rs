//! Strata, state layout, parameterization and time discretisation shared by
//! all other modules.
//!
//! The population of each region is partitioned by age band, vaccination dose
//! and disease state. Disease states follow the SE²I²R⁺R⁻WWˢ structure:
//! susceptible, two latent stages, two infectious stages, recovered and still
//! PCR-positive, recovered PCR-negative, a waning stage, and waned (fully
//! susceptible again after a previous infection).

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of disease states per (region, age, dose) stratum.
pub const N_STATES: usize = 9;

/// Disease state indices within a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Disease {
    S = 0,
    E1 = 1,
    E2 = 2,
    I1 = 3,
    I2 = 4,
    /// Recovered, still PCR-positive.
    RPos = 5,
    /// Recovered, PCR-negative, protected against reinfection.
    RNeg = 6,
    /// Intermediate waning stage.
    W = 7,
    /// Waned: fully susceptible again after a previous infection.
    WS = 8,
}

/// Dimensions and time discretisation of a model run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumSpec {
    pub n_regions: usize,
    pub n_ages: usize,
    /// Maximum vaccine dose Q; dose strata run 0..=Q.
    pub max_dose: usize,
    /// Step length in days. 1/dt must be an integer.
    pub dt: f64,
    /// Number of half-day steps K in the horizon.
    pub n_steps: usize,
    /// Calendar date of step 0.
    pub start_date: NaiveDate,
}

impl StratumSpec {
    pub fn new(
        n_regions: usize,
        n_ages: usize,
        max_dose: usize,
        dt: f64,
        horizon_days: usize,
        start_date: NaiveDate,
    ) -> Result<Self> {
        if n_regions == 0 || n_ages == 0 {
            return Err(Error::Config("need at least one region and age band".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        let steps_per_day = 1.0 / dt;
        if (steps_per_day - steps_per_day.round()).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "1/dt must be an integer (the daily vaccination fractions are split \
                 across 1/dt equal sub-steps); got dt = {dt}"
            )));
        }
        let n_steps = horizon_days * steps_per_day.round() as usize;
        Ok(Self { n_regions, n_ages, max_dose, dt, n_steps, start_date })
    }

    /// Number of dose strata (0..=Q).
    pub fn n_doses(&self) -> usize {
        self.max_dose + 1
    }

    pub fn steps_per_day(&self) -> usize {
        (1.0 / self.dt).round() as usize
    }

    pub fn horizon_days(&self) -> usize {
        self.n_steps / self.steps_per_day()
    }

    /// First half-day step of the given day offset.
    pub fn index_of(&self, day: i64) -> Result<usize> {
        if day < 0 || day as usize >= self.horizon_days() {
            return Err(Error::OutOfHorizon(format!("day offset {day}")));
        }
        Ok(day as usize * self.steps_per_day())
    }

    /// First half-day step of the given calendar date.
    pub fn index_of_date(&self, date: NaiveDate) -> Result<usize> {
        let day = (date - self.start_date).num_days();
        if day < 0 || day as usize >= self.horizon_days() {
            return Err(Error::OutOfHorizon(date.to_string()));
        }
        self.index_of(day)
    }

    /// Day offset containing the given step.
    pub fn day_of(&self, step: usize) -> i64 {
        (step / self.steps_per_day()) as i64
    }

    pub fn date_of(&self, step: usize) -> NaiveDate {
        self.start_date + chrono::Duration::days(self.day_of(step))
    }
}

/// Population counts per (region, age, dose, disease state) at one step.
#[derive(Debug, Clone)]
pub struct StateTensor {
    pub n_regions: usize,
    pub n_ages: usize,
    pub n_doses: usize,
    /// Dense values in (region, age, dose, state) order; regions outermost.
    pub values: Vec<f64>,
    pub time_index: usize,
}

impl StateTensor {
    pub fn zeros(spec: &StratumSpec) -> Self {
        Self {
            n_regions: spec.n_regions,
            n_ages: spec.n_ages,
            n_doses: spec.n_doses(),
            values: vec![0.0; spec.n_regions * spec.n_ages * spec.n_doses() * N_STATES],
            time_index: 0,
        }
    }

    /// All-susceptible state with dose-0 mass equal to the populations.
    pub fn all_susceptible(spec: &StratumSpec, populations: &[f64]) -> Self {
        let mut s = Self::zeros(spec);
        for r in 0..s.n_regions {
            for a in 0..s.n_ages {
                let i = s.index(r, a, 0, Disease::S as usize);
                s.values[i] = populations[r * s.n_ages + a];
            }
        }
        s
    }

    #[inline]
    pub fn index(&self, r: usize, a: usize, q: usize, state: usize) -> usize {
        ((r * self.n_ages + a) * self.n_doses + q) * N_STATES + state
    }

    #[inline]
    pub fn get(&self, r: usize, a: usize, q: usize, state: usize) -> f64 {
        self.values[self.index(r, a, q, state)]
    }

    pub fn region_len(&self) -> usize {
        self.n_ages * self.n_doses * N_STATES
    }

    pub fn region(&self, r: usize) -> &[f64] {
        let len = self.region_len();
        &self.values[r * len..(r + 1) * len]
    }

    pub fn region_mut(&mut self, r: usize) -> &mut [f64] {
        let len = self.region_len();
        &mut self.values[r * len..(r + 1) * len]
    }
}

/// One violated cell or stratum, reported by [`validate_state`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NegativeCell { region: usize, age: usize, dose: usize, state: usize, value: f64 },
    Conservation { region: usize, age: usize, expected: f64, actual: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NegativeCell { region, age, dose, state, value } => write!(
                f,
                "negative cell (r={region}, a={age}, dose={dose}, state={state}): {value}"
            ),
            Violation::Conservation { region, age, expected, actual } => write!(
                f,
                "population not conserved (r={region}, a={age}): expected {expected}, got {actual}"
            ),
        }
    }
}

/// Confirms nonnegativity and per-(region, age) population conservation.
///
/// Conservation is checked to a relative tolerance of 1e-9 against the fixed
/// populations; the report lists every violated cell.
pub fn validate_state(
    state: &StateTensor,
    spec: &StratumSpec,
    populations: &[f64],
) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    for r in 0..spec.n_regions {
        for a in 0..spec.n_ages {
            let mut sum = 0.0;
            for q in 0..spec.n_doses() {
                for s in 0..N_STATES {
                    let v = state.get(r, a, q, s);
                    if v < 0.0 {
                        violations.push(Violation::NegativeCell {
                            region: r,
                            age: a,
                            dose: q,
                            state: s,
                            value: v,
                        });
                    }
                    sum += v;
                }
            }
            let expected = populations[r * spec.n_ages + a];
            if (sum - expected).abs() > 1e-9 * expected.max(1.0) {
                violations.push(Violation::Conservation { region: r, age: a, expected, actual: sum });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Piecewise-constant waning duration d_w, in days.
///
/// The default history is 534 days, shortened to 5 days for five days at the
/// emergence of an immune-escaping variant, then 117 days.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WaningSchedule {
    /// (from_day, d_w) pairs with strictly increasing from_day; the first
    /// entry must start at or before day 0.
    pub pieces: Vec<(i64, f64)>,
}

impl WaningSchedule {
    pub fn constant(d_w: f64) -> Self {
        Self { pieces: vec![(0, d_w)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::Config("waning schedule must have at least one piece".into()));
        }
        if self.pieces[0].0 > 0 {
            return Err(Error::Config("waning schedule must cover day 0".into()));
        }
        for w in self.pieces.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("waning schedule days must be strictly increasing".into()));
            }
        }
        if self.pieces.iter().any(|&(_, d)| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("waning durations must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn d_w_at(&self, day: i64) -> f64 {
        let mut d = self.pieces[0].1;
        for &(from, dw) in &self.pieces {
            if day >= from {
                d = dw;
            } else {
                break;
            }
        }
        d
    }
}

/// Sensitivity and specificity of one serological assay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AssayParams {
    pub sens: f64,
    pub spec: f64,
}

/// Global (region-shared) model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalParams {
    /// Mean infectious period (days); support d_I > 2.
    pub d_i: f64,
    /// Mean latent period (days); fixed by configuration, not estimated.
    pub d_l: f64,
    /// Residual PCR-positivity duration in R⁺ (days); support d_R > 1.
    pub d_r: f64,
    /// Waning duration schedule.
    pub waning: WaningSchedule,
    /// Negative-binomial overdispersion (variance μ + μ²/η).
    pub eta: f64,
    /// Weekly log-random-walk step scale for β.
    pub sigma_beta: f64,
    pub euroimmun: AssayParams,
    pub roche_n: AssayParams,
    /// Severity logit increments ζ[changepoint][age].
    pub zeta: Vec<Vec<f64>>,
    /// Baseline severity ratios p_a per age.
    pub p0: Vec<f64>,
}

impl GlobalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_i > 2.0) {
            return Err(Error::Config(format!("d_I must exceed 2 days, got {}", self.d_i)));
        }
        if !(self.d_r > 1.0) {
            return Err(Error::Config(format!("d_R must exceed 1 day, got {}", self.d_r)));
        }
        if !(self.d_l > 0.0) {
            return Err(Error::Config(format!("d_L must be positive, got {}", self.d_l)));
        }
        self.waning.validate()?;
        if !(self.eta > 0.0) || !(self.sigma_beta > 0.0) {
            return Err(Error::Config("eta and sigma_beta must be positive".into()));
        }
        for ap in [&self.euroimmun, &self.roche_n] {
            if !(0.0..=1.0).contains(&ap.sens) || !(0.0..=1.0).contains(&ap.spec) {
                return Err(Error::Config("assay sensitivity/specificity must lie in [0, 1]".into()));
            }
        }
        if self.p0.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("baseline severity ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Region-specific model parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionalParams {
    /// Contact-matrix modifiers (relative susceptibilities); length is
    /// configuration-driven and mapped onto age bands by the config.
    pub m: Vec<f64>,
    /// Initial exponential growth rate (per day).
    pub psi: f64,
    /// Initial infectious seed.
    pub i0: f64,
    /// Weekly log transmission-potential offsets; entry 0 is pinned to 0 and
    /// β is piecewise constant within each week.
    pub log_beta_walk: Vec<f64>,
}

impl RegionalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0) || !(self.i0 > 0.0) {
            return Err(Error::Config("psi and I0 must be positive".into()));
        }
        if self.m.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("contact modifiers must be positive".into()));
        }
        Ok(())
    }
}

/// Time-indexed region-specific age-mixing matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactSchedule {
    pub n_ages: usize,
    /// Day offsets at which the active matrix changes; first must be <= 0.
    pub breakpoint_days: Vec<i64>,
    /// matrices[region][breakpoint] is a dense n_ages × n_ages matrix in
    /// row-major (susceptible-age, source-age) order.
    pub matrices: Vec<Vec<Vec<f64>>>,
}

impl ContactSchedule {
    /// Single constant matrix shared by every region.
    pub fn constant(n_regions: usize, n_ages: usize, matrix: Vec<f64>) -> Self {
        Self {
            n_ages,
            breakpoint_days: vec![0],
            matrices: vec![vec![matrix]; n_regions],
        }
    }

    pub fn validate(&self, n_regions: usize) -> Result<()> {
        if self.breakpoint_days.is_empty() || self.breakpoint_days[0] > 0 {
            return Err(Error::Config("contact schedule must cover day 0".into()));
        }
        for w in self.breakpoint_days.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("contact breakpoints must be strictly increasing".into()));
            }
        }
        if self.matrices.len() != n_regions {
            return Err(Error::Config(format!(
                "contact schedule has {} regions, expected {n_regions}",
                self.matrices.len()
            )));
        }
        for per_region in &self.matrices {
            if per_region.len() != self.breakpoint_days.len() {
                return Err(Error::Config("one matrix per (region, breakpoint) required".into()));
            }
            for m in per_region {
                if m.len() != self.n_ages * self.n_ages {
                    return Err(Error::Config("contact matrix has wrong dimensions".into()));
                }
                if m.iter().any(|&c| c < 0.0 || !c.is_finite()) {
                    return Err(Error::Config("contact matrix entries must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }

    /// Index of the matrix active on the given day.
    pub fn active_index(&self, day: i64) -> usize {
        match self.breakpoint_days.binary_search(&day) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    pub fn matrix(&self, region: usize, day: i64) -> &[f64] {
        &self.matrices[region][self.active_index(day)]
    }
}
