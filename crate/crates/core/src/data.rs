//! Dataset directory ingest and export.
//!
//! A dataset directory holds `populations.csv`, `counts.csv`,
//! `serology.csv`, `prevalence.csv`, `vaccination.csv` and a `contacts/`
//! subdirectory (manifest plus one matrix file per region × breakpoint).
//! Ingest applies the configured reporting lags (serology +25 days,
//! vaccination +21 days by default); export reverses them, so a canonical
//! export round-trips byte-identically.

use crate::config::RunConfig;
use crate::dynamics::VaccinationFeed;
use crate::observation::{
    Assay, CountObservation, CountSeries, ObservationSet, PrevalenceEstimate, SerologySample,
};
use crate::strata::{ContactSchedule, StratumSpec};
use crate::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything read from one dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Populations, region-major (region × age).
    pub populations: Vec<f64>,
    pub contacts: ContactSchedule,
    pub feed: VaccinationFeed,
    pub observations: ObservationSet,
}

fn data_err(file: &str, message: impl Into<String>) -> Error {
    Error::Data { file: file.to_string(), message: message.into() }
}

#[derive(Debug, Serialize, Deserialize)]
struct PopulationRow {
    region: usize,
    age_band: usize,
    population: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    date: NaiveDate,
    region: usize,
    age_group: usize,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SerologyRow {
    date: NaiveDate,
    region: usize,
    assay: String,
    n_tested: u64,
    n_positive: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrevalenceRow {
    date: NaiveDate,
    region: usize,
    age_band: usize,
    log_mean: f64,
    log_sd: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VaccinationRow {
    date: NaiveDate,
    region: usize,
    age_band: usize,
    dose_number: usize,
    vaccine_type: String,
    count: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BreakpointRow {
    breakpoint: usize,
    date: NaiveDate,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| data_err(&name, format!("cannot open: {e}")))?;
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<T>().enumerate() {
        rows.push(record.map_err(|e| data_err(&name, format!("row {}: {e}", i + 2)))?);
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn assay_name(assay: Assay) -> &'static str {
    match assay {
        Assay::EuroImmun => "euroimmun",
        Assay::RocheN => "roche_n",
    }
}

fn parse_assay(name: &str, file: &str) -> Result<Assay> {
    match name {
        "euroimmun" => Ok(Assay::EuroImmun),
        "roche_n" => Ok(Assay::RocheN),
        other => Err(data_err(file, format!("unknown assay '{other}'"))),
    }
}

fn day_index(spec: &StratumSpec, date: NaiveDate, file: &str) -> Result<usize> {
    let day = (date - spec.start_date).num_days();
    if day < 0 || day as usize >= spec.horizon_days() {
        return Err(data_err(
            file,
            format!("date {date} falls outside the horizon ({} + {} days)",
                spec.start_date, spec.horizon_days()),
        ));
    }
    Ok(day as usize)
}

/// Reads and cross-validates a dataset directory against the config.
pub fn ingest(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let spec = cfg.spec()?;
    let n_r = spec.n_regions;
    let n_a = spec.n_ages;

    // Populations.
    let pop_rows: Vec<PopulationRow> = read_rows(&dir.join("populations.csv"))?;
    let mut populations = vec![f64::NAN; n_r * n_a];
    for row in &pop_rows {
        if row.region >= n_r || row.age_band >= n_a {
            return Err(data_err("populations.csv", "region or age band out of range"));
        }
        if !(row.population > 0.0) {
            return Err(data_err("populations.csv", "populations must be positive"));
        }
        populations[row.region * n_a + row.age_band] = row.population;
    }
    if populations.iter().any(|p| p.is_nan()) {
        return Err(data_err("populations.csv", "missing (region, age band) entries"));
    }

    // Contact schedule.
    let contacts_dir = dir.join("contacts");
    let manifest: Vec<BreakpointRow> = read_rows(&contacts_dir.join("manifest.csv"))?;
    let mut breakpoint_days = Vec::with_capacity(manifest.len());
    for row in &manifest {
        breakpoint_days.push((row.date - spec.start_date).num_days());
    }
    let mut matrices = Vec::with_capacity(n_r);
    for r in 0..n_r {
        let mut per_bp = Vec::with_capacity(manifest.len());
        for b in 0..manifest.len() {
            let file = contacts_dir.join(format!("matrix_r{r}_b{b}.csv"));
            let name = format!("contacts/matrix_r{r}_b{b}.csv");
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(&file)
                .map_err(|e| data_err(&name, format!("cannot open: {e}")))?;
            let mut matrix = Vec::with_capacity(n_a * n_a);
            for record in reader.records() {
                let record = record.map_err(|e| data_err(&name, e.to_string()))?;
                for field in record.iter() {
                    matrix.push(
                        field
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| data_err(&name, format!("bad entry: {e}")))?,
                    );
                }
            }
            if matrix.len() != n_a * n_a {
                return Err(data_err(
                    &name,
                    format!("expected {n_a}×{n_a} entries, found {}", matrix.len()),
                ));
            }
            per_bp.push(matrix);
        }
        matrices.push(per_bp);
    }
    let contacts = ContactSchedule { n_ages: n_a, breakpoint_days, matrices };
    contacts.validate(n_r)?;

    // Vaccination feed (dates shifted by the immune-response lag).
    let vax_rows: Vec<VaccinationRow> = read_rows(&dir.join("vaccination.csv"))?;
    let mut feed =
        VaccinationFeed::empty(n_r, n_a, spec.max_dose, spec.horizon_days());
    let mut first_day: Option<usize> = None;
    for row in &vax_rows {
        if row.region >= n_r || row.age_band >= n_a {
            return Err(data_err("vaccination.csv", "region or age band out of range"));
        }
        if row.dose_number < 1 || row.dose_number > spec.max_dose {
            return Err(data_err(
                "vaccination.csv",
                format!("dose_number {} outside 1..={}", row.dose_number, spec.max_dose),
            ));
        }
        if row.count < 0.0 {
            return Err(data_err("vaccination.csv", "counts must be nonnegative"));
        }
        let shifted = row.date + chrono::Duration::days(cfg.observation.vaccination_lag_days);
        let day = day_index(&spec, shifted, "vaccination.csv")?;
        let idx = feed.idx(row.region, day, row.dose_number, row.age_band);
        feed.counts[idx] += row.count;
        match row.vaccine_type.as_str() {
            "mrna" => feed.counts_mrna[idx] += row.count,
            "other" => {}
            other => {
                return Err(data_err(
                    "vaccination.csv",
                    format!("unknown vaccine_type '{other}' (expected mrna/other)"),
                ))
            }
        }
        first_day = Some(first_day.map_or(day, |d| d.min(day)));
    }
    feed.start_day = first_day.unwrap_or(0) as i64;
    feed.validate()?;

    // Severe-event counts.
    let count_rows: Vec<CountRow> = read_rows(&dir.join("counts.csv"))?;
    let age_map = cfg.age_map();
    let mut counts = Vec::with_capacity(count_rows.len());
    for row in &count_rows {
        if row.region >= n_r || row.age_group >= age_map.n_groups {
            return Err(data_err("counts.csv", "region or age group out of range"));
        }
        day_index(&spec, row.date, "counts.csv")?;
        counts.push(CountObservation {
            date: row.date,
            region: row.region,
            group: row.age_group,
            count: row.count,
        });
    }

    // Serology (dates shifted by the seroconversion lag).
    let sero_rows: Vec<SerologyRow> = read_rows(&dir.join("serology.csv"))?;
    let mut serology = Vec::with_capacity(sero_rows.len());
    for row in &sero_rows {
        if row.n_positive > row.n_tested {
            return Err(data_err("serology.csv", "n_positive exceeds n_tested"));
        }
        let shifted = row.date + chrono::Duration::days(cfg.observation.serology_lag_days);
        day_index(&spec, shifted, "serology.csv")?;
        serology.push(SerologySample {
            date: shifted,
            region: row.region,
            assay: parse_assay(&row.assay, "serology.csv")?,
            n_tested: row.n_tested,
            n_positive: row.n_positive,
        });
    }

    // Prevalence estimates.
    let prev_rows: Vec<PrevalenceRow> = read_rows(&dir.join("prevalence.csv"))?;
    let mut prevalence = Vec::with_capacity(prev_rows.len());
    for row in &prev_rows {
        day_index(&spec, row.date, "prevalence.csv")?;
        if !(row.log_sd > 0.0) {
            return Err(data_err("prevalence.csv", "log_sd must be positive"));
        }
        prevalence.push(PrevalenceEstimate {
            date: row.date,
            region: row.region,
            age: row.age_band,
            log_mean: row.log_mean,
            log_sd: row.log_sd,
        });
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

/// Writes a dataset directory in canonical form (fixed row order, default
/// float formatting). Lag-shifted streams are written at their original
/// (unshifted) dates.
pub fn export(dir: &Path, cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let spec = cfg.spec()?;
    let n_r = spec.n_regions;
    let n_a = spec.n_ages;
    std::fs::create_dir_all(dir.join("contacts"))?;

    let mut pop_rows = Vec::with_capacity(n_r * n_a);
    for r in 0..n_r {
        for a in 0..n_a {
            pop_rows.push(PopulationRow {
                region: r,
                age_band: a,
                population: dataset.populations[r * n_a + a],
            });
        }
    }
    write_rows(&dir.join("populations.csv"), &pop_rows)?;

    let manifest: Vec<BreakpointRow> = dataset
        .contacts
        .breakpoint_days
        .iter()
        .enumerate()
        .map(|(b, &day)| BreakpointRow {
            breakpoint: b,
            date: spec.start_date + chrono::Duration::days(day),
        })
        .collect();
    write_rows(&dir.join("contacts/manifest.csv"), &manifest)?;
    for r in 0..n_r {
        for (b, matrix) in dataset.contacts.matrices[r].iter().enumerate() {
            let path = dir.join(format!("contacts/matrix_r{r}_b{b}.csv"));
            let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
            for row in matrix.chunks(n_a) {
                writer.write_record(row.iter().map(|v| v.to_string()))?;
            }
            writer.flush()?;
        }
    }

    let mut vax_rows = Vec::new();
    for r in 0..n_r {
        for day in 0..spec.horizon_days() {
            for q in 1..=spec.max_dose.max(1).min(dataset.feed.max_dose) {
                for a in 0..n_a {
                    let idx = dataset.feed.idx(r, day, q, a);
                    let total = dataset.feed.counts[idx];
                    let mrna = dataset.feed.counts_mrna[idx];
                    let date = spec.start_date + chrono::Duration::days(day as i64)
                        - chrono::Duration::days(cfg.observation.vaccination_lag_days);
                    if mrna > 0.0 {
                        vax_rows.push(VaccinationRow {
                            date,
                            region: r,
                            age_band: a,
                            dose_number: q,
                            vaccine_type: "mrna".into(),
                            count: mrna,
                        });
                    }
                    if total - mrna > 0.0 {
                        vax_rows.push(VaccinationRow {
                            date,
                            region: r,
                            age_band: a,
                            dose_number: q,
                            vaccine_type: "other".into(),
                            count: total - mrna,
                        });
                    }
                }
            }
        }
    }
    write_rows(&dir.join("vaccination.csv"), &vax_rows)?;

    let count_rows: Vec<CountRow> = dataset
        .observations
        .counts
        .rows
        .iter()
        .map(|c| CountRow { date: c.date, region: c.region, age_group: c.group, count: c.count })
        .collect();
    write_rows(&dir.join("counts.csv"), &count_rows)?;

    let sero_rows: Vec<SerologyRow> = dataset
        .observations
        .serology
        .iter()
        .map(|s| SerologyRow {
            date: s.date - chrono::Duration::days(cfg.observation.serology_lag_days),
            region: s.region,
            assay: assay_name(s.assay).into(),
            n_tested: s.n_tested,
            n_positive: s.n_positive,
        })
        .collect();
    write_rows(&dir.join("serology.csv"), &sero_rows)?;

    let prev_rows: Vec<PrevalenceRow> = dataset
        .observations
        .prevalence
        .iter()
        .map(|p| PrevalenceRow {
            date: p.date,
            region: p.region,
            age_band: p.age,
            log_mean: p.log_mean,
            log_sd: p.log_sd,
        })
        .collect();
    write_rows(&dir.join("prevalence.csv"), &prev_rows)?;
    Ok(())
}
