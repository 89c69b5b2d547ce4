//! Run outputs: analysis-product CSVs, posterior chain files, sampler
//! diagnostics and the JSON run manifest.
//!
//! Every product CSV shares the column layout (quantity, region, stratum,
//! date, q05, q50, q95); the manifest records the config hash, code version
//! and seed so a run is reproducible from (config, data, seed).

use crate::analysis::{
    self, cumulative_and_attack, snapshot, CounterfactualOutcome, SNAPSHOT_GROUPS,
};
use crate::config::RunConfig;
use crate::dynamics::{simulate_region, RegionInputs, SimOptions, VaccinationSchedule};
use crate::inference::PosteriorChain;
use crate::observation::AgeGroupMap;
use crate::params::{ModelParams, ParamLayout};
use crate::repro::ReproContext;
use crate::severity::{self, DelayDistribution, SeveritySchedule};
use crate::strata::{ContactSchedule, StratumSpec};
use crate::{Error, Result};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Version stamped into manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 of the canonical config serialisation.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let canonical = cfg.canonical_toml()?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// One posterior-quantile row of a product CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ProductRow {
    pub quantity: String,
    pub region: usize,
    /// Age/dose qualifier where applicable, empty otherwise.
    pub stratum: String,
    pub date: NaiveDate,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Writes one product CSV under the run directory.
pub fn write_product(dir: &Path, file_name: &str, rows: &[ProductRow]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(file_name);
    let mut writer = csv::Writer::from_path(&path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(path)
}

/// Writes the JSON run manifest.
pub fn write_manifest(
    dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    products: &[String],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "config_hash": config_hash(cfg)?,
        "code_version": CODE_VERSION,
        "seed": seed,
        "products": products,
    });
    let path = dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Writes the posterior samples plus a chain manifest (parameter names,
/// block membership, seed, config hash).
pub fn write_chain(
    dir: &Path,
    chain: &PosteriorChain,
    layout: &ParamLayout,
    cfg: &RunConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("chain_samples.csv"))?;
    let mut header = chain.parameter_names.clone();
    header.push("log_posterior".into());
    writer.write_record(&header)?;
    for (sample, lp) in chain.samples.iter().zip(&chain.log_posteriors) {
        let mut record: Vec<String> = sample.iter().map(|v| v.to_string()).collect();
        record.push(lp.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    let blocks: Vec<usize> = layout.entries.iter().map(|e| e.block).collect();
    let manifest = serde_json::json!({
        "parameter_names": chain.parameter_names,
        "blocks": blocks,
        "seed": chain.seed,
        "config_hash": config_hash(cfg)?,
        "n_samples": chain.samples.len(),
        "acceptance": chain.acceptance,
    });
    std::fs::write(
        dir.join("chain_manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

/// Reads a chain written by [`write_chain`] back from a run directory.
pub fn read_chain(dir: &Path) -> Result<PosteriorChain> {
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
        dir.join("chain_manifest.json"),
    )?)?;
    let seed = manifest["seed"].as_u64().unwrap_or(0);
    let acceptance: Vec<(u64, u64)> =
        serde_json::from_value(manifest["acceptance"].clone()).unwrap_or_default();
    let mut reader = csv::Reader::from_path(dir.join("chain_samples.csv"))?;
    let header = reader.headers()?.clone();
    if header.is_empty() {
        return Err(Error::State("chain sample file has no header".into()));
    }
    let n_params = header.len() - 1; // last column is the log-posterior
    let parameter_names: Vec<String> =
        header.iter().take(n_params).map(|s| s.to_string()).collect();
    let mut samples = Vec::new();
    let mut log_posteriors = Vec::new();
    for record in reader.records() {
        let record = record?;
        let values: Vec<f64> = record
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| {
                    Error::State(format!("bad chain sample value '{v}': {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(values[..n_params].to_vec());
        log_posteriors.push(values[n_params]);
    }
    Ok(PosteriorChain { samples, log_posteriors, parameter_names, acceptance, seed })
}

#[derive(Debug, Serialize)]
struct DiagnosticsRow {
    iteration: usize,
    block: Option<usize>,
    acceptance_rate: Option<f64>,
    log_posterior: Option<f64>,
}

/// Writes the diagnostics CSV: one row per retained draw (log-posterior)
/// and one closing row per block (overall acceptance rate).
pub fn write_diagnostics(dir: &Path, chain: &PosteriorChain, n_iterations: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("diagnostics.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    for (i, lp) in chain.log_posteriors.iter().enumerate() {
        writer.serialize(DiagnosticsRow {
            iteration: i,
            block: None,
            acceptance_rate: None,
            log_posterior: Some(*lp),
        })?;
    }
    for (b, (accepted, proposed)) in chain.acceptance.iter().enumerate() {
        writer.serialize(DiagnosticsRow {
            iteration: n_iterations,
            block: Some(b),
            acceptance_rate: Some(if *proposed > 0 {
                *accepted as f64 / *proposed as f64
            } else {
                0.0
            }),
            log_posterior: None,
        })?;
    }
    writer.flush()?;
    Ok(path)
}

/// Shared ingredients for posterior product computation.
pub struct ProductInputs<'a> {
    pub spec: &'a StratumSpec,
    pub layout: &'a ParamLayout,
    pub template: &'a ModelParams,
    pub contacts: &'a ContactSchedule,
    pub populations: &'a [f64],
    pub vaccination: Option<&'a VaccinationSchedule>,
    pub severity_changepoints: Vec<f64>,
    pub severity_window: f64,
    pub delay: DelayDistribution,
    pub age_map: AgeGroupMap,
    /// Counterfactual reporting cutoff (day offset).
    pub cutoff_day: usize,
    /// Reference peak days for the peak product.
    pub reference_days: Vec<i64>,
    pub peak_window_days: i64,
}

impl<'a> ProductInputs<'a> {
    fn region_inputs(&self, r: usize) -> RegionInputs<'_> {
        RegionInputs {
            region: r,
            populations: &self.populations[r * self.spec.n_ages..(r + 1) * self.spec.n_ages],
            contacts: self.contacts,
            vaccination: self.vaccination,
        }
    }

    fn severity(&self, params: &ModelParams) -> Result<SeveritySchedule> {
        SeveritySchedule::new(
            self.severity_changepoints.clone(),
            self.severity_window,
            params.global.zeta.clone(),
            params.global.p0.clone(),
        )
    }
}

/// Everything one draw contributes for one region.
struct RegionDraw {
    /// Snapshot fractions at the final step, (a × group × dose).
    snapshot: Vec<f64>,
    /// End-of-day cumulative infections.
    cumulative: Vec<f64>,
    attack: Vec<f64>,
    reinfection: Vec<Option<f64>>,
    pihr: Vec<Option<f64>>,
    r_effective: Vec<f64>,
    r_control: Vec<f64>,
    r_baseline: Vec<f64>,
    /// r_age[a][day]
    r_age: Vec<Vec<f64>>,
    daily_incidence: Vec<f64>,
}

fn compute_region_draw(
    inputs: &ProductInputs,
    params: &ModelParams,
    r: usize,
) -> Result<RegionDraw> {
    let spec = inputs.spec;
    let region_inputs = inputs.region_inputs(r);
    let regional = &params.regional[r];
    let traj = simulate_region(
        &region_inputs,
        spec,
        &params.global,
        regional,
        &regional.m,
        &SimOptions { record_states: true, zero_efficacy: false },
    )?;
    let spd = spec.steps_per_day();
    let days = spec.horizon_days();
    let pops = region_inputs.populations;

    let snap = snapshot(&traj, spec, pops, spec.n_steps)?;
    let series = cumulative_and_attack(&traj, pops);
    let severity = inputs.severity(params)?;

    let mut cumulative = Vec::with_capacity(days);
    let mut attack = Vec::with_capacity(days);
    let mut reinfection = Vec::with_capacity(days);
    let mut pihr = Vec::with_capacity(days);
    for d in 0..days {
        let k_end = (d + 1) * spd;
        cumulative.push(series.cumulative[k_end]);
        attack.push(series.attack_rate[k_end]);
        let mut total = 0.0;
        let mut first = 0.0;
        for k in d * spd..k_end {
            for a in 0..spec.n_ages {
                total += traj.delta_total(k, a);
                first += traj.delta_first[k * spec.n_ages + a];
            }
        }
        reinfection.push(if total > 0.0 {
            Some(((total - first) / total).clamp(0.0, 1.0))
        } else {
            None
        });

        // Infection-weighted severity across (age × dose) strata.
        let mut flows = Vec::with_capacity(spec.n_ages * traj.n_doses);
        let mut p_strata = Vec::with_capacity(spec.n_ages * traj.n_doses);
        for a in 0..spec.n_ages {
            let p_base = severity.severity_at(d as f64, a);
            for q in 0..traj.n_doses {
                let flow: f64 = (d * spd..k_end).map(|k| traj.delta_at(k, q, a)).sum();
                let alpha = match inputs.vaccination {
                    Some(v) => v.alpha_at(r, d, q, a),
                    None => 0.0,
                };
                flows.push(flow);
                p_strata.push((1.0 - alpha) * p_base);
            }
        }
        pihr.push(severity::population_severity(&flows, &p_strata));
    }

    let ctx = ReproContext {
        spec,
        global: &params.global,
        regional,
        m_by_age: &regional.m,
        contacts: inputs.contacts,
        populations: pops,
        vaccination: inputs.vaccination,
        region: r,
    };
    let mut r_effective = Vec::with_capacity(days);
    let mut r_control = Vec::with_capacity(days);
    let mut r_baseline = Vec::with_capacity(days);
    let mut r_age = vec![Vec::with_capacity(days); spec.n_ages];
    for d in 0..days {
        let k = d * spd;
        r_effective.push(ctx.effective_r(&traj, k)?);
        r_control.push(ctx.control_r(&traj, k)?);
        r_baseline.push(ctx.baseline_r(&traj, k)?);
        for (a, col) in r_age.iter_mut().enumerate() {
            col.push(ctx.age_specific_r(&traj, k, a)?);
        }
    }

    Ok(RegionDraw {
        snapshot: snap.fractions,
        cumulative,
        attack,
        reinfection,
        pihr,
        r_effective,
        r_control,
        r_baseline,
        r_age,
        daily_incidence: analysis::daily_incidence(&traj, spec),
    })
}

fn quantile_row(
    quantity: &str,
    region: usize,
    stratum: String,
    date: NaiveDate,
    values: &[f64],
) -> Option<ProductRow> {
    analysis::summarize(values).map(|q| ProductRow {
        quantity: quantity.into(),
        region,
        stratum,
        date,
        q05: q.q05,
        q50: q.q50,
        q95: q.q95,
    })
}

fn series_rows(
    quantity: &str,
    region: usize,
    stratum: &str,
    spec: &StratumSpec,
    per_draw: &[&[f64]],
    rows: &mut Vec<ProductRow>,
) {
    for d in 0..spec.horizon_days() {
        let values: Vec<f64> = per_draw.iter().map(|s| s[d]).collect();
        let date = spec.start_date + chrono::Duration::days(d as i64);
        if let Some(row) = quantile_row(quantity, region, stratum.to_string(), date, &values) {
            rows.push(row);
        }
    }
}

fn optional_series_rows(
    quantity: &str,
    region: usize,
    spec: &StratumSpec,
    per_draw: &[&[Option<f64>]],
    rows: &mut Vec<ProductRow>,
) {
    for d in 0..spec.horizon_days() {
        let values: Vec<f64> = per_draw.iter().filter_map(|s| s[d]).collect();
        let date = spec.start_date + chrono::Duration::days(d as i64);
        if let Some(row) = quantile_row(quantity, region, String::new(), date, &values) {
            rows.push(row);
        }
    }
}

/// Computes and writes all nowcast products for a chain. Returns the file
/// names written.
pub fn nowcast_products(
    dir: &Path,
    chain: &PosteriorChain,
    inputs: &ProductInputs,
) -> Result<Vec<String>> {
    if chain.samples.is_empty() {
        return Err(Error::State("chain holds no retained draws".into()));
    }
    let spec = inputs.spec;
    // draws[i][r]
    let draws: Vec<Vec<RegionDraw>> = chain
        .samples
        .par_iter()
        .map(|theta| {
            let params = inputs.layout.unpack(theta, inputs.template)?;
            (0..spec.n_regions)
                .map(|r| compute_region_draw(inputs, &params, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let final_date = spec.start_date + chrono::Duration::days(spec.horizon_days() as i64 - 1);
    let n_doses = spec.n_doses();
    let mut written = Vec::new();

    let mut snapshot_rows = Vec::new();
    for r in 0..spec.n_regions {
        for a in 0..spec.n_ages {
            for (g, group) in SNAPSHOT_GROUPS.iter().enumerate() {
                for q in 0..n_doses {
                    let values: Vec<f64> = draws
                        .iter()
                        .map(|d| d[r].snapshot[(a * SNAPSHOT_GROUPS.len() + g) * n_doses + q])
                        .collect();
                    if let Some(row) = quantile_row(
                        &format!("snapshot_{group}"),
                        r,
                        format!("age{a}/dose{q}"),
                        final_date,
                        &values,
                    ) {
                        snapshot_rows.push(row);
                    }
                }
            }
        }
    }
    write_product(dir, "snapshot.csv", &snapshot_rows)?;
    written.push("snapshot.csv".into());

    let mut cumulative_rows = Vec::new();
    let mut reinfection_rows = Vec::new();
    let mut r_rows = Vec::new();
    let mut pihr_rows = Vec::new();
    for r in 0..spec.n_regions {
        let per: Vec<&RegionDraw> = draws.iter().map(|d| &d[r]).collect();
        let cum: Vec<&[f64]> = per.iter().map(|d| d.cumulative.as_slice()).collect();
        series_rows("cumulative_infections", r, "", spec, &cum, &mut cumulative_rows);
        let att: Vec<&[f64]> = per.iter().map(|d| d.attack.as_slice()).collect();
        series_rows("attack_rate", r, "", spec, &att, &mut cumulative_rows);
        let reinf: Vec<&[Option<f64>]> =
            per.iter().map(|d| d.reinfection.as_slice()).collect();
        optional_series_rows("reinfection_fraction", r, spec, &reinf, &mut reinfection_rows);
        let pihr: Vec<&[Option<f64>]> = per.iter().map(|d| d.pihr.as_slice()).collect();
        optional_series_rows("pihr", r, spec, &pihr, &mut pihr_rows);
        for (quantity, extract) in [
            ("r_effective", 0usize),
            ("r_control", 1),
            ("r_baseline", 2),
        ] {
            let series: Vec<&[f64]> = per
                .iter()
                .map(|d| match extract {
                    0 => d.r_effective.as_slice(),
                    1 => d.r_control.as_slice(),
                    _ => d.r_baseline.as_slice(),
                })
                .collect();
            series_rows(quantity, r, "", spec, &series, &mut r_rows);
        }
        for a in 0..spec.n_ages {
            let series: Vec<&[f64]> = per.iter().map(|d| d.r_age[a].as_slice()).collect();
            series_rows("r_age", r, &format!("age{a}"), spec, &series, &mut r_rows);
        }
    }
    write_product(dir, "cumulative.csv", &cumulative_rows)?;
    written.push("cumulative.csv".into());
    write_product(dir, "reinfection.csv", &reinfection_rows)?;
    written.push("reinfection.csv".into());
    write_product(dir, "r_decomposition.csv", &r_rows)?;
    written.push("r_decomposition.csv".into());
    write_product(dir, "pihr.csv", &pihr_rows)?;
    written.push("pihr.csv".into());

    let mut peak_rows = Vec::new();
    for r in 0..spec.n_regions {
        for (w, &reference) in inputs.reference_days.iter().enumerate() {
            let mut sizes = Vec::new();
            let mut days = Vec::new();
            for draw in &draws {
                let peaks = analysis::peak_extract(
                    &draw[r].daily_incidence,
                    &inputs.reference_days,
                    inputs.peak_window_days,
                );
                if let Some(peak) = peaks[w] {
                    sizes.push(peak.size);
                    days.push(peak.day as f64);
                }
            }
            let date = spec.start_date
                + chrono::Duration::days(reference.clamp(0, spec.horizon_days() as i64 - 1));
            if let Some(row) =
                quantile_row("peak_size", r, format!("wave{w}"), date, &sizes)
            {
                peak_rows.push(row);
            }
            if let Some(row) = quantile_row("peak_day", r, format!("wave{w}"), date, &days) {
                peak_rows.push(row);
            }
        }
    }
    write_product(dir, "peaks.csv", &peak_rows)?;
    written.push("peaks.csv".into());
    Ok(written)
}

/// Computes and writes the counterfactual product (prevented infections and
/// admissions to the cutoff, per region). The cutoff caveat applies: the
/// no-vaccination counterfactual grows unrealistic far beyond the fitted
/// window, so choose the cutoff accordingly.
pub fn counterfactual_products(
    dir: &Path,
    chain: &PosteriorChain,
    inputs: &ProductInputs,
) -> Result<Vec<String>> {
    if chain.samples.is_empty() {
        return Err(Error::State("chain holds no retained draws".into()));
    }
    let spec = inputs.spec;
    let outcomes: Vec<Vec<CounterfactualOutcome>> = chain
        .samples
        .par_iter()
        .map(|theta| {
            let params = inputs.layout.unpack(theta, inputs.template)?;
            let severity = inputs.severity(&params)?;
            (0..spec.n_regions)
                .map(|r| {
                    analysis::counterfactual_no_vaccine(
                        &inputs.region_inputs(r),
                        spec,
                        &params,
                        &severity,
                        &inputs.delay,
                        &inputs.age_map,
                        inputs.cutoff_day,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let cutoff_date =
        spec.start_date + chrono::Duration::days(inputs.cutoff_day as i64);
    let mut rows = Vec::new();
    for r in 0..spec.n_regions {
        let infections: Vec<f64> =
            outcomes.iter().map(|o| o[r].prevented_infections).collect();
        let admissions: Vec<f64> =
            outcomes.iter().map(|o| o[r].prevented_admissions).collect();
        if let Some(row) =
            quantile_row("prevented_infections", r, String::new(), cutoff_date, &infections)
        {
            rows.push(row);
        }
        if let Some(row) =
            quantile_row("prevented_admissions", r, String::new(), cutoff_date, &admissions)
        {
            rows.push(row);
        }
    }
    write_product(dir, "counterfactual.csv", &rows)?;
    Ok(vec!["counterfactual.csv".into()])
}
