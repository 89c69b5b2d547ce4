//! Flat parameter vector with MCMC block structure and unconstrained
//! transforms.
//!
//! The sampler works in transform space (log for positive parameters, logit
//! for unit-interval ones); the Jacobian of the map back to natural space is
//! added to the log-posterior so the chain targets the natural-space density.

use crate::strata::{GlobalParams, RegionalParams};
use crate::{Error, Result};

/// Bijection between a natural parameter and its unconstrained image.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Transform {
    /// x = shift + e^z, for parameters supported on (shift, ∞).
    Log { shift: f64 },
    /// x = 1/(1+e^{−z}), for unit-interval parameters.
    Logit,
    Identity,
}

impl Transform {
    pub fn to_unconstrained(&self, x: f64) -> Result<f64> {
        match *self {
            Transform::Log { shift } => {
                if x <= shift {
                    return Err(Error::Numerics(format!(
                        "value {x} outside support ({shift}, ∞)"
                    )));
                }
                Ok((x - shift).ln())
            }
            Transform::Logit => {
                if !(x > 0.0 && x < 1.0) {
                    return Err(Error::Numerics(format!("value {x} outside (0, 1)")));
                }
                Ok((x / (1.0 - x)).ln())
            }
            Transform::Identity => Ok(x),
        }
    }

    pub fn to_constrained(&self, z: f64) -> f64 {
        match *self {
            Transform::Log { shift } => shift + z.exp(),
            Transform::Logit => 1.0 / (1.0 + (-z).exp()),
            Transform::Identity => z,
        }
    }

    /// log |dx/dz| at the unconstrained point `z`.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        match *self {
            Transform::Log { .. } => z,
            Transform::Logit => {
                // σ(z)·(1−σ(z)) in log space, computed stably.
                let a = -(1.0 + (-z).exp()).ln();
                let b = -(1.0 + z.exp()).ln();
                a + b
            }
            Transform::Identity => 0.0,
        }
    }
}

/// One scalar parameter's position in the flat vector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    /// Block 0 is global; block r+1 is region r.
    pub block: usize,
    pub transform: Transform,
}

/// Which optional parameter groups are estimated rather than fixed.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EstimationFlags {
    /// Contact modifiers m_{r,a}.
    pub m: bool,
    /// Walk innovation scale σ_β (fixed at its template value when false).
    #[serde(default = "default_true")]
    pub sigma_beta: bool,
    /// Assay sensitivities and specificities.
    pub assays: bool,
    /// Severity logit increments ζ.
    pub zeta: bool,
    /// Initial seed sizes I₀.
    pub i0: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EstimationFlags {
    fn default() -> Self {
        Self { m: false, sigma_beta: true, assays: true, zeta: true, i0: true }
    }
}

/// Full natural-space model state moved around by the sampler.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub global: GlobalParams,
    pub regional: Vec<RegionalParams>,
}

/// Layout of the flat parameter vector: names, blocks and transforms.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    pub n_regions: usize,
    pub n_ages: usize,
    /// β-walk length per region; offsets for weeks 1..n_weeks are free
    /// (week 0 is pinned to zero to identify β₀ through ψ).
    pub n_weeks: usize,
    pub n_changepoints: usize,
    pub flags: EstimationFlags,
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn new(
        n_regions: usize,
        n_ages: usize,
        n_weeks: usize,
        n_changepoints: usize,
        flags: EstimationFlags,
    ) -> Self {
        let mut entries = Vec::new();
        let mut push = |name: String, block: usize, transform: Transform| {
            entries.push(ParamEntry { name, block, transform });
        };
        push("d_I".into(), 0, Transform::Log { shift: 2.0 });
        push("d_R".into(), 0, Transform::Log { shift: 1.0 });
        push("eta".into(), 0, Transform::Log { shift: 0.0 });
        if flags.sigma_beta {
            push("sigma_beta".into(), 0, Transform::Log { shift: 0.0 });
        }
        if flags.assays {
            for assay in ["euroimmun", "roche_n"] {
                push(format!("sens_{assay}"), 0, Transform::Logit);
                push(format!("spec_{assay}"), 0, Transform::Logit);
            }
        }
        if flags.zeta {
            for a in 0..n_ages {
                for j in 0..n_changepoints {
                    push(format!("zeta[{a}][{j}]"), 0, Transform::Identity);
                }
            }
        }
        for r in 0..n_regions {
            let block = r + 1;
            push(format!("psi[{r}]"), block, Transform::Log { shift: 0.0 });
            if flags.i0 {
                push(format!("i0[{r}]"), block, Transform::Log { shift: 0.0 });
            }
            if flags.m {
                for a in 0..n_ages {
                    push(format!("m[{r}][{a}]"), block, Transform::Log { shift: 0.0 });
                }
            }
            for w in 1..n_weeks {
                push(format!("log_beta_walk[{r}][{w}]"), block, Transform::Identity);
            }
        }
        Self { n_regions, n_ages, n_weeks, n_changepoints, flags, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.n_regions + 1
    }

    /// Indices of the entries in one block, in vector order.
    pub fn block_indices(&self, block: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.block == block)
            .map(|(i, _)| i)
            .collect()
    }

    /// Flatten natural-space parameters into the vector.
    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>> {
        if params.regional.len() != self.n_regions {
            return Err(Error::Config("regional parameter count mismatch".into()));
        }
        let mut out = Vec::with_capacity(self.len());
        let g = &params.global;
        out.extend([g.d_i, g.d_r, g.eta]);
        if self.flags.sigma_beta {
            out.push(g.sigma_beta);
        }
        if self.flags.assays {
            out.extend([
                g.euroimmun.sens,
                g.euroimmun.spec,
                g.roche_n.sens,
                g.roche_n.spec,
            ]);
        }
        if self.flags.zeta {
            for a in 0..self.n_ages {
                for j in 0..self.n_changepoints {
                    out.push(g.zeta[a][j]);
                }
            }
        }
        for reg in &params.regional {
            out.push(reg.psi);
            if self.flags.i0 {
                out.push(reg.i0);
            }
            if self.flags.m {
                out.extend(&reg.m[..self.n_ages]);
            }
            if reg.log_beta_walk.len() != self.n_weeks {
                return Err(Error::Config("β walk length mismatch".into()));
            }
            out.extend(&reg.log_beta_walk[1..]);
        }
        debug_assert_eq!(out.len(), self.len());
        Ok(out)
    }

    /// Rebuild natural-space parameters, taking non-estimated fields from
    /// the template.
    pub fn unpack(&self, theta: &[f64], template: &ModelParams) -> Result<ModelParams> {
        if theta.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match layout {}",
                theta.len(),
                self.len()
            )));
        }
        let mut params = template.clone();
        let mut it = theta.iter().copied();
        let mut next = || it.next().expect("length checked");
        params.global.d_i = next();
        params.global.d_r = next();
        params.global.eta = next();
        if self.flags.sigma_beta {
            params.global.sigma_beta = next();
        }
        if self.flags.assays {
            params.global.euroimmun.sens = next();
            params.global.euroimmun.spec = next();
            params.global.roche_n.sens = next();
            params.global.roche_n.spec = next();
        }
        if self.flags.zeta {
            params.global.zeta = (0..self.n_ages)
                .map(|_| (0..self.n_changepoints).map(|_| next()).collect())
                .collect();
        }
        for r in 0..self.n_regions {
            let reg = &mut params.regional[r];
            reg.psi = next();
            if self.flags.i0 {
                reg.i0 = next();
            }
            if self.flags.m {
                reg.m = (0..self.n_ages).map(|_| next()).collect();
            }
            let mut walk = vec![0.0; self.n_weeks];
            for w in walk.iter_mut().skip(1) {
                *w = next();
            }
            reg.log_beta_walk = walk;
        }
        Ok(params)
    }

    /// Natural → unconstrained, elementwise.
    pub fn to_unconstrained(&self, theta: &[f64]) -> Result<Vec<f64>> {
        theta
            .iter()
            .zip(&self.entries)
            .map(|(&x, e)| {
                e.transform.to_unconstrained(x).map_err(|err| {
                    Error::Numerics(format!("{}: {err}", e.name))
                })
            })
            .collect()
    }

    /// Unconstrained → natural, elementwise.
    pub fn to_constrained(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.entries)
            .map(|(&zi, e)| e.transform.to_constrained(zi))
            .collect()
    }

    /// Σ log|dx/dz| over a subset of indices.
    pub fn log_jacobian(&self, z: &[f64], indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.entries[i].transform.log_jacobian(z[i])).sum()
    }
}
