//! Severity mapping: infection flows to expected severe events.
//!
//! New infections are discounted by dose-specific protection against severe
//! outcomes, scaled by a time-varying severity ratio that shifts at
//! changepoints on the logistic scale, and convolved with an
//! infection-to-event delay distribution.

use crate::{Error, Result};
use statrs::distribution::ContinuousCDF;

/// Transition ramp between severity regimes: 0 below the changepoint,
/// linear over one window, 1 beyond it.
pub fn ramp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Infection-to-severe-event delay as probability mass per half-day lag.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DelayDistribution {
    pub mass: Vec<f64>,
}

impl DelayDistribution {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::Config("delay distribution must be non-empty".into()));
        }
        if mass.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::Config("delay masses must be nonnegative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "delay masses sum to {total}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { mass })
    }

    /// All mass at one lag (in steps).
    pub fn point_mass(lag_steps: usize) -> Self {
        let mut mass = vec![0.0; lag_steps + 1];
        mass[lag_steps] = 1.0;
        Self { mass }
    }

    /// Gamma delay discretised onto the step grid by CDF differences,
    /// truncated at `max_days` and renormalised.
    pub fn discretized_gamma(shape: f64, rate: f64, dt: f64, max_days: f64) -> Result<Self> {
        let gamma = statrs::distribution::Gamma::new(shape, rate)
            .map_err(|e| Error::Config(format!("invalid gamma delay: {e}")))?;
        let n = (max_days / dt).ceil() as usize;
        if n == 0 {
            return Err(Error::Config("delay support must cover at least one step".into()));
        }
        let mut mass: Vec<f64> = (0..n)
            .map(|k| gamma.cdf((k + 1) as f64 * dt) - gamma.cdf(k as f64 * dt))
            .collect();
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("gamma delay has no mass on the support".into()));
        }
        for m in mass.iter_mut() {
            *m /= total;
        }
        Ok(Self { mass })
    }

    /// Mean lag in steps.
    pub fn mean_steps(&self) -> f64 {
        self.mass.iter().enumerate().map(|(k, m)| k as f64 * m).sum()
    }
}

/// Piecewise severity trajectory on the logistic scale.
#[derive(Debug, Clone)]
pub struct SeveritySchedule {
    /// Changepoint times in days from the analysis start.
    pub changepoint_days: Vec<f64>,
    /// Length of the linear transition after each changepoint, in days.
    pub window_days: f64,
    /// Logit increments ζ indexed `[age][changepoint]`.
    pub zeta: Vec<Vec<f64>>,
    /// Baseline severity ratio per age, in (0, 1).
    pub p0: Vec<f64>,
}

impl SeveritySchedule {
    pub fn new(
        changepoint_days: Vec<f64>,
        window_days: f64,
        zeta: Vec<Vec<f64>>,
        p0: Vec<f64>,
    ) -> Result<Self> {
        if !(window_days > 0.0) {
            return Err(Error::Config("severity transition window must be positive".into()));
        }
        if changepoint_days.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("severity changepoints must be strictly increasing".into()));
        }
        if p0.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config("baseline severity must lie in (0, 1)".into()));
        }
        if zeta.len() != p0.len() {
            return Err(Error::Config("one ζ row per age group required".into()));
        }
        if zeta.iter().any(|row| row.len() != changepoint_days.len()) {
            return Err(Error::Config("one ζ per (age, changepoint) required".into()));
        }
        Ok(Self { changepoint_days, window_days, zeta, p0 })
    }

    /// Flat schedule at the baseline ratios.
    pub fn constant(p0: Vec<f64>) -> Result<Self> {
        let n = p0.len();
        Self::new(Vec::new(), 30.0, vec![Vec::new(); n], p0)
    }

    /// Unvaccinated severity ratio at time `t_days` for age group `a`.
    pub fn severity_at(&self, t_days: f64, a: usize) -> f64 {
        let mut x = logit(self.p0[a]);
        for (j, &cp) in self.changepoint_days.iter().enumerate() {
            x += ramp((t_days - cp) / self.window_days) * self.zeta[a][j];
        }
        inv_logit(x)
    }
}

/// Severity-discounted infections Δ* = Σ_q (1 − α^q)·Δ^{V_q} at one step.
pub fn discounted_infections(flows_by_dose: &[f64], alpha_by_dose: &[f64]) -> f64 {
    flows_by_dose
        .iter()
        .zip(alpha_by_dose)
        .map(|(delta, alpha)| (1.0 - alpha) * delta)
        .sum()
}

/// Delay-convolved expected events μ_k = Σ_{l ≤ k} f_{k−l}·p_l·Δ*_l.
///
/// Output has the same length as the inputs; mass delayed past the end of
/// the series is dropped (the series should be padded if totals matter).
pub fn expected_events(delta_star: &[f64], p: &[f64], delay: &DelayDistribution) -> Vec<f64> {
    debug_assert_eq!(delta_star.len(), p.len());
    let n = delta_star.len();
    let mut mu = vec![0.0; n];
    for l in 0..n {
        let source = p[l] * delta_star[l];
        if source == 0.0 {
            continue;
        }
        for (lag, &f) in delay.mass.iter().enumerate() {
            if let Some(slot) = mu.get_mut(l + lag) {
                *slot += f * source;
            } else {
                break;
            }
        }
    }
    mu
}

/// Infection-weighted severity ratio p* across dose strata; `None` when no
/// infections occurred.
pub fn population_severity(flows_by_dose: &[f64], p_by_dose: &[f64]) -> Option<f64> {
    let total: f64 = flows_by_dose.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let weighted: f64 =
        flows_by_dose.iter().zip(p_by_dose).map(|(delta, p)| delta * p).sum();
    Some(weighted / total)
}
