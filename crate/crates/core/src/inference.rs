//! Adaptive block Metropolis sampler (AMGS) over the joint posterior.
//!
//! Each iteration performs one global-block update (requiring re-simulation
//! of every region) followed by all regional-block updates evaluated in
//! parallel and merged in fixed region order. Proposals are multivariate
//! normal in unconstrained transform space with covariance
//! exp(λ)·(Σ_emp + ε·I); λ follows a Robbins–Monro recursion toward a target
//! acceptance rate.

use crate::dynamics::{simulate_region, RegionInputs, SimOptions, VaccinationSchedule};
use crate::observation::{self, ObservationSet};
use crate::params::{ModelParams, ParamLayout};
use crate::priors::{log_prior, PriorConfig};
use crate::severity::{DelayDistribution, SeveritySchedule};
use crate::strata::StratumSpec;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Tunables of the adaptive kernel; defaults are config-overridable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AmgsConfig {
    pub target_accept: f64,
    /// Robbins–Monro step exponent in (0.5, 1].
    pub rm_exponent: f64,
    /// Covariance regulariser ε.
    pub epsilon: f64,
    /// Iterations before the empirical covariance is trusted.
    pub warm_start: usize,
    /// Isotropic proposal scale used during warm-start.
    pub init_scale: f64,
}

impl Default for AmgsConfig {
    fn default() -> Self {
        Self {
            target_accept: 0.234,
            rm_exponent: 0.6,
            epsilon: 1e-6,
            warm_start: 500,
            init_scale: 0.05,
        }
    }
}

/// Running proposal statistics for one block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockAdaptation {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Welford sum of outer products, Σ (x−μ)(x−μ)ᵀ.
    pub m2: Vec<f64>,
    pub log_lambda: f64,
    pub count: u64,
    pub accepted: u64,
    pub proposed: u64,
}

impl BlockAdaptation {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            log_lambda: 0.0,
            count: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    /// Empirical covariance of the history (zero matrix until two points).
    pub fn covariance(&self) -> Vec<f64> {
        let mut cov = vec![0.0; self.dim * self.dim];
        if self.count > 1 {
            let denom = (self.count - 1) as f64;
            for (c, &m) in cov.iter_mut().zip(&self.m2) {
                *c = m / denom;
            }
        }
        cov
    }

    /// Folds the current block value into the running moments.
    pub fn update_moments(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let delta2: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.m2[i * self.dim + j] += delta[i] * delta2[j];
            }
        }
    }

    /// Robbins–Monro scale recursion λ ← λ + i^{−κ}(a − a*).
    pub fn adapt_scale(&mut self, accept_prob: f64, cfg: &AmgsConfig) {
        let i = self.proposed.max(1) as f64;
        self.log_lambda += i.powf(-cfg.rm_exponent) * (accept_prob - cfg.target_accept);
    }

    /// Draws a proposal around `z_block`.
    pub fn propose(&self, z_block: &[f64], cfg: &AmgsConfig, rng: &mut impl Rng) -> Vec<f64> {
        let scale = (0.5 * self.log_lambda).exp();
        if self.count < 2 || (self.proposed as usize) < cfg.warm_start {
            let sd = scale * cfg.init_scale / (self.dim as f64).sqrt();
            return z_block
                .iter()
                .map(|&z| z + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
        }
        let mut cov = self.covariance();
        for i in 0..self.dim {
            cov[i * self.dim + i] += cfg.epsilon;
        }
        let chol = cholesky(&cov, self.dim).unwrap_or_else(|| {
            // Fall back to the diagonal if the empirical covariance is
            // numerically indefinite.
            let mut l = vec![0.0; self.dim * self.dim];
            for i in 0..self.dim {
                l[i * self.dim + i] = cov[i * self.dim + i].max(cfg.epsilon).sqrt();
            }
            l
        });
        let noise: Vec<f64> = (0..self.dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut out = z_block.to_vec();
        for i in 0..self.dim {
            let mut step = 0.0;
            for j in 0..=i {
                step += chol[i * self.dim + j] * noise[j];
            }
            out[i] += scale * step;
        }
        out
    }
}

/// Lower-triangular Cholesky factor, or `None` if not positive definite.
pub fn cholesky(mat: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = mat[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Everything fixed during one fit: data, stratification, and the
/// non-estimated parameter template.
pub struct FitContext<'a> {
    pub spec: &'a StratumSpec,
    pub layout: ParamLayout,
    pub template: ModelParams,
    pub prior_cfg: PriorConfig,
    pub data: &'a ObservationSet,
    /// Flat populations, region-major.
    pub populations: &'a [f64],
    pub contacts: &'a crate::strata::ContactSchedule,
    pub vaccination: Option<&'a VaccinationSchedule>,
    pub severity_changepoints: Vec<f64>,
    pub severity_window: f64,
    pub delay: DelayDistribution,
    retained_prevalence: Vec<usize>,
}

impl<'a> FitContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &'a StratumSpec,
        layout: ParamLayout,
        template: ModelParams,
        prior_cfg: PriorConfig,
        data: &'a ObservationSet,
        populations: &'a [f64],
        contacts: &'a crate::strata::ContactSchedule,
        vaccination: Option<&'a VaccinationSchedule>,
        severity_changepoints: Vec<f64>,
        severity_window: f64,
        delay: DelayDistribution,
    ) -> Result<Self> {
        data.validate(spec)?;
        contacts.validate(spec.n_regions)?;
        let retained_prevalence = observation::thin_prevalence(&data.prevalence);
        Ok(Self {
            spec,
            layout,
            template,
            prior_cfg,
            data,
            populations,
            contacts,
            vaccination,
            severity_changepoints,
            severity_window,
            delay,
            retained_prevalence,
        })
    }

    fn severity_schedule(&self, params: &ModelParams) -> Result<SeveritySchedule> {
        SeveritySchedule::new(
            self.severity_changepoints.clone(),
            self.severity_window,
            params.global.zeta.clone(),
            params.global.p0.clone(),
        )
    }

    fn region_populations(&self, r: usize) -> &[f64] {
        &self.populations[r * self.spec.n_ages..(r + 1) * self.spec.n_ages]
    }

    /// Log-likelihood contribution of one region under `params`.
    pub fn region_loglik(&self, params: &ModelParams, r: usize) -> Result<f64> {
        let inputs = RegionInputs {
            region: r,
            populations: self.region_populations(r),
            contacts: self.contacts,
            vaccination: self.vaccination,
        };
        let traj = simulate_region(
            &inputs,
            self.spec,
            &params.global,
            &params.regional[r],
            &params.regional[r].m,
            &SimOptions::default(),
        )?;
        let severity = self.severity_schedule(params)?;
        let vaccination = self.vaccination;
        let alpha_at = move |day: usize, q: usize, a: usize| match vaccination {
            Some(v) => v.alpha_at(r, day, q, a),
            None => 0.0,
        };
        let mu_groups = observation::expected_event_series(
            &traj,
            self.spec,
            &alpha_at,
            &severity,
            &self.delay,
            &self.data.counts.age_map,
        );
        observation::region_loglik(
            self.data,
            &self.retained_prevalence,
            &traj,
            self.spec,
            r,
            self.region_populations(r),
            &params.global,
            &mu_groups,
        )
    }

    /// All-region log-likelihood, evaluated in parallel with a fixed-order
    /// reduction.
    pub fn total_loglik(&self, params: &ModelParams) -> Result<Vec<f64>> {
        (0..self.spec.n_regions)
            .into_par_iter()
            .map(|r| self.region_loglik(params, r))
            .collect::<Result<Vec<_>>>()
    }

    pub fn log_prior(&self, params: &ModelParams) -> f64 {
        log_prior(params, &self.layout, &self.prior_cfg)
    }
}

/// Sampler options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub amgs: AmgsConfig,
    /// Continue adapting after burn-in (diminishing adaptation keeps the
    /// chain valid).
    pub adapt_after_burn_in: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_iterations: 2000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
            amgs: AmgsConfig::default(),
            adapt_after_burn_in: true,
        }
    }
}

/// Stored posterior samples plus bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorChain {
    /// Natural-space parameter vectors, one per retained draw.
    pub samples: Vec<Vec<f64>>,
    pub log_posteriors: Vec<f64>,
    pub parameter_names: Vec<String>,
    /// (accepted, proposed) per block.
    pub acceptance: Vec<(u64, u64)>,
    pub seed: u64,
}

impl PosteriorChain {
    /// Column of one parameter across draws.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[index]).collect()
    }
}

/// Full resumable sampler state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerState {
    pub z: Vec<f64>,
    pub blocks: Vec<BlockAdaptation>,
    pub iteration: usize,
    pub rng: ChaCha20Rng,
    pub cached_loglik: Vec<f64>,
    pub cached_prior: f64,
    pub chain: PosteriorChain,
}

impl SamplerState {
    pub fn checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::State(format!("checkpoint serialisation failed: {e}")))
    }

    pub fn restore(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::State(format!("checkpoint deserialisation failed: {e}")))
    }
}

struct BlockOutcome {
    z_block: Option<Vec<f64>>,
    new_loglik: f64,
    accept_prob: f64,
}

/// One Metropolis sweep: global block, then all regional blocks in parallel
/// with a fixed-order merge.
fn mcmc_step(
    ctx: &FitContext,
    state: &mut SamplerState,
    block_indices: &[Vec<usize>],
    cfg: &AmgsConfig,
    adapt: bool,
) -> Result<()> {
    let layout = &ctx.layout;
    let iter = state.iteration as u64;

    // --- Global block -------------------------------------------------
    {
        let idx = &block_indices[0];
        let current: Vec<f64> = idx.iter().map(|&i| state.z[i]).collect();
        state.blocks[0].proposed += 1;
        let proposal = state.blocks[0].propose(&current, cfg, &mut state.rng);
        let mut z_new = state.z.clone();
        for (&i, &v) in idx.iter().zip(&proposal) {
            z_new[i] = v;
        }
        let accept_prob = match evaluate_full(ctx, &z_new) {
            Ok((prior, loglik)) => {
                let jac_new = layout.log_jacobian(&z_new, idx);
                let jac_old = layout.log_jacobian(&state.z, idx);
                let lp_new = prior + jac_new + loglik.iter().sum::<f64>();
                let lp_old = state.cached_prior
                    + jac_old
                    + state.cached_loglik.iter().sum::<f64>();
                let a = (lp_new - lp_old).exp().min(1.0);
                if !a.is_nan() && state.rng.gen::<f64>() < a {
                    state.z = z_new;
                    state.cached_prior = prior;
                    state.cached_loglik = loglik;
                    state.blocks[0].accepted += 1;
                }
                if a.is_nan() {
                    0.0
                } else {
                    a
                }
            }
            Err(e) => {
                log::debug!("global proposal rejected: simulation failed: {e}");
                0.0
            }
        };
        if adapt {
            state.blocks[0].adapt_scale(accept_prob, cfg);
            let z_block: Vec<f64> = idx.iter().map(|&i| state.z[i]).collect();
            state.blocks[0].update_moments(&z_block);
        }
    }

    // --- Regional blocks (parallel, deterministic merge) ---------------
    let n_regions = ctx.spec.n_regions;
    let base_seed: u64 = state.rng.gen();
    let uniforms: Vec<f64> = (0..n_regions).map(|_| state.rng.gen()).collect();
    let proposals: Vec<BlockOutcome> = (0..n_regions)
        .into_par_iter()
        .map(|r| {
            let block = r + 1;
            let idx = &block_indices[block];
            let mut rng = ChaCha20Rng::seed_from_u64(
                base_seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let current: Vec<f64> = idx.iter().map(|&i| state.z[i]).collect();
            let proposal = state.blocks[block].propose(&current, cfg, &mut rng);
            let mut z_new = state.z.clone();
            for (&i, &v) in idx.iter().zip(&proposal) {
                z_new[i] = v;
            }
            match evaluate_region(ctx, &z_new, r) {
                Ok((prior_new, ll_new)) => {
                    let jac_new = ctx.layout.log_jacobian(&z_new, idx);
                    let jac_old = ctx.layout.log_jacobian(&state.z, idx);
                    let delta = (prior_new - state.cached_prior) + (jac_new - jac_old)
                        + (ll_new - state.cached_loglik[r]);
                    let a = delta.exp().min(1.0);
                    let accept = !a.is_nan() && uniforms[r] < a;
                    BlockOutcome {
                        z_block: accept.then_some(proposal),
                        new_loglik: ll_new,
                        accept_prob: if a.is_nan() { 0.0 } else { a },
                    }
                }
                Err(e) => {
                    log::debug!("region {r} proposal rejected: simulation failed: {e}");
                    BlockOutcome { z_block: None, new_loglik: 0.0, accept_prob: 0.0 }
                }
            }
        })
        .collect();

    // Apply in fixed region order. Blocks touch disjoint coordinates and
    // the prior is additive across regions, so simultaneous acceptance is
    // consistent; the cached prior is rebuilt once below.
    let mut any_accept = false;
    for (r, outcome) in proposals.into_iter().enumerate() {
        let block = r + 1;
        state.blocks[block].proposed += 1;
        if let Some(values) = outcome.z_block {
            for (&i, &v) in block_indices[block].iter().zip(&values) {
                state.z[i] = v;
            }
            state.cached_loglik[r] = outcome.new_loglik;
            state.blocks[block].accepted += 1;
            any_accept = true;
        }
        if adapt {
            state.blocks[block].adapt_scale(outcome.accept_prob, cfg);
            let z_block: Vec<f64> =
                block_indices[block].iter().map(|&i| state.z[i]).collect();
            state.blocks[block].update_moments(&z_block);
        }
    }
    if any_accept {
        let theta = ctx.layout.to_constrained(&state.z);
        let params = ctx.layout.unpack(&theta, &ctx.template)?;
        state.cached_prior = ctx.log_prior(&params);
    }
    let _ = iter;
    state.iteration += 1;
    Ok(())
}

fn evaluate_full(ctx: &FitContext, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let theta = ctx.layout.to_constrained(z);
    let params = ctx.layout.unpack(&theta, &ctx.template)?;
    let prior = ctx.log_prior(&params);
    if prior == f64::NEG_INFINITY {
        return Ok((prior, vec![0.0; ctx.spec.n_regions]));
    }
    let loglik = ctx.total_loglik(&params)?;
    Ok((prior, loglik))
}

fn evaluate_region(ctx: &FitContext, z: &[f64], r: usize) -> Result<(f64, f64)> {
    let theta = ctx.layout.to_constrained(z);
    let params = ctx.layout.unpack(&theta, &ctx.template)?;
    let prior = ctx.log_prior(&params);
    if prior == f64::NEG_INFINITY {
        return Ok((prior, 0.0));
    }
    let ll = ctx.region_loglik(&params, r)?;
    Ok((prior, ll))
}

/// Initialises sampler state at the given starting parameters.
pub fn init_state(ctx: &FitContext, init: &ModelParams, opts: &FitOptions) -> Result<SamplerState> {
    let theta = ctx.layout.pack(init)?;
    let z = ctx.layout.to_unconstrained(&theta)?;
    let prior = ctx.log_prior(init);
    if !prior.is_finite() {
        return Err(Error::Config("initial parameters outside the prior support".into()));
    }
    let loglik = ctx.total_loglik(init)?;
    let blocks = (0..ctx.layout.n_blocks())
        .map(|b| BlockAdaptation::new(ctx.layout.block_indices(b).len()))
        .collect();
    Ok(SamplerState {
        z,
        blocks,
        iteration: 0,
        rng: ChaCha20Rng::seed_from_u64(opts.seed),
        cached_loglik: loglik,
        cached_prior: prior,
        chain: PosteriorChain {
            samples: Vec::new(),
            log_posteriors: Vec::new(),
            parameter_names: ctx.layout.entries.iter().map(|e| e.name.clone()).collect(),
            acceptance: Vec::new(),
            seed: opts.seed,
        },
    })
}

/// Runs the sampler from `state` until `opts.n_iterations`, storing
/// post-burn-in draws. Resumable: pass a restored checkpoint to continue.
pub fn run_from(
    ctx: &FitContext,
    state: &mut SamplerState,
    opts: &FitOptions,
) -> Result<()> {
    let block_indices: Vec<Vec<usize>> =
        (0..ctx.layout.n_blocks()).map(|b| ctx.layout.block_indices(b)).collect();
    while state.iteration < opts.n_iterations {
        let adapt = opts.adapt_after_burn_in || state.iteration < opts.burn_in;
        mcmc_step(ctx, state, &block_indices, &opts.amgs, adapt)?;
        let i = state.iteration;
        if i > opts.burn_in && (i - opts.burn_in) % opts.thin.max(1) == 0 {
            let theta = ctx.layout.to_constrained(&state.z);
            let lp = state.cached_prior + state.cached_loglik.iter().sum::<f64>();
            state.chain.samples.push(theta);
            state.chain.log_posteriors.push(lp);
        }
    }
    state.chain.acceptance =
        state.blocks.iter().map(|b| (b.accepted, b.proposed)).collect();
    Ok(())
}

/// Fits from scratch: initialise, run, return the chain.
pub fn run(ctx: &FitContext, init: &ModelParams, opts: &FitOptions) -> Result<PosteriorChain> {
    let mut state = init_state(ctx, init, opts)?;
    run_from(ctx, &mut state, opts)?;
    Ok(state.chain)
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

/// Effective sample size via the initial-positive-sequence estimator on the
/// chain autocovariance.
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acov = |lag: usize| -> f64 {
        x.iter()
            .zip(&x[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64
    };
    let mut sum_rho = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / var;
        if pair < 0.0 {
            break;
        }
        sum_rho += pair;
        lag += 2;
    }
    n as f64 / (1.0 + 2.0 * sum_rho)
}

/// Split-chain potential scale reduction factor R̂ over one or more chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let mid = c.len() / 2;
            [&c[..mid], &c[mid..]]
        })
        .filter(|h| h.len() > 1)
        .collect();
    let m = halves.len();
    if m < 2 {
        return f64::NAN;
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap();
    let means: Vec<f64> =
        halves.iter().map(|h| h[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m as f64 - 1.0)
        * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| {
            h[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        })
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return 1.0;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}
