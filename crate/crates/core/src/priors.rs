//! Log-prior density over the model parameters.
//!
//! All gamma distributions are shape–rate (mean = shape/rate). The β
//! trajectory contributes a log-scale random-walk term with weekly
//! innovations of standard deviation σ_β.

use crate::params::{ModelParams, ParamLayout};
use statrs::function::gamma::ln_gamma;

/// Hyperparameters not pinned down elsewhere; defaults are deliberately
/// weak.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PriorConfig {
    /// Log-mean of the contact-modifier lognormal (0 → unit median).
    pub m_log_mean: f64,
    /// Log-sd of the contact-modifier lognormal.
    pub m_log_sd: f64,
    /// Support of the log-uniform seed-size prior.
    pub i0_range: (f64, f64),
    /// Standard deviation of the zero-mean normal on severity increments ζ.
    pub zeta_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { m_log_mean: 0.0, m_log_sd: 0.5, i0_range: (1.0, 1.0e6), zeta_sd: 10.0 }
    }
}

/// Gamma(shape, rate) log-density, −∞ off support.
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Beta(a, b) log-density, −∞ off support.
pub fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// N(mean, sd²) log-density.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Lognormal(μ, σ) log-density, −∞ off support.
pub fn lognormal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    normal_logpdf(x.ln(), mu, sigma) - x.ln()
}

/// Log-uniform log-density over (lo, hi), −∞ off support.
pub fn log_uniform_logpdf(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo || x > hi {
        return f64::NEG_INFINITY;
    }
    -(x.ln()) - (hi.ln() - lo.ln()).ln()
}

/// Random-walk term Σ_w log N(log β_{w+1} − log β_w; 0, σ_β²).
pub fn walk_logpdf(log_beta_walk: &[f64], sigma_beta: f64) -> f64 {
    log_beta_walk
        .windows(2)
        .map(|w| normal_logpdf(w[1] - w[0], 0.0, sigma_beta))
        .sum()
}

/// Joint log-prior of all estimated parameters. Blocks excluded by the
/// layout's estimation flags contribute nothing (they are fixed, not
/// sampled).
pub fn log_prior(params: &ModelParams, layout: &ParamLayout, cfg: &PriorConfig) -> f64 {
    let g = &params.global;
    let mut lp = 0.0;
    // Shifted gammas for the duration parameters.
    lp += gamma_logpdf(g.d_i - 2.0, 1.43, 0.549);
    lp += gamma_logpdf(g.d_r - 1.0, 32.2, 2.6);
    lp += gamma_logpdf(g.eta, 1.0, 0.2);
    lp += gamma_logpdf(g.sigma_beta, 1.0, 100.0);
    if layout.flags.assays {
        lp += beta_logpdf(g.euroimmun.sens, 52.9, 17.9);
        lp += beta_logpdf(g.euroimmun.spec, 314.0, 3.18);
        lp += beta_logpdf(g.roche_n.sens, 457.0, 13.2);
        lp += beta_logpdf(g.roche_n.spec, 672.0, 1.35);
    }
    if layout.flags.zeta {
        for row in &g.zeta {
            for &z in row {
                lp += normal_logpdf(z, 0.0, cfg.zeta_sd);
            }
        }
    }
    for reg in &params.regional {
        lp += gamma_logpdf(reg.psi, 31.36, 224.0);
        if layout.flags.i0 {
            lp += log_uniform_logpdf(reg.i0, cfg.i0_range.0, cfg.i0_range.1);
        }
        if layout.flags.m {
            for &m in &reg.m {
                lp += lognormal_logpdf(m, cfg.m_log_mean, cfg.m_log_sd);
            }
        }
        lp += walk_logpdf(&reg.log_beta_walk, g.sigma_beta);
    }
    lp
}
