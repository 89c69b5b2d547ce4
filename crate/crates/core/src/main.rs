//! Command-line surface: dataset simulation, fitting, nowcasting,
//! counterfactuals, the prevalence-sensitivity harness and standalone
//! validation. Failures exit nonzero with a machine-readable JSON error on
//! stderr.

use clap::{Parser, Subcommand};
use epimeld::analysis::{self, HarnessInputs};
use epimeld::config::RunConfig;
use epimeld::data::{self, Dataset};
use epimeld::dynamics::{self, VaccinationSchedule};
use epimeld::inference::{self, FitOptions, SamplerState};
use epimeld::outputs::{self, ProductInputs, ProductRow};
use epimeld::params::ModelParams;
use epimeld::{Error, Result, StratumSpec};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "epimeld",
    version,
    about = "Stratified epidemic reconstruction and nowcasting"
)]
struct Cli {
    /// Override the config's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool size for inference and analysis.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-simulate a synthetic dataset from a config (and optional
    /// parameter file).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// JSON parameter file; the bundled reference parameters otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fit the model to a dataset by adaptive block MCMC.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the final sampler state here for later resumption.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume from a sampler-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit analysis products from a fitted chain.
    Nowcast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding chain_samples.csv / chain_manifest.json.
        #[arg(long)]
        chain: PathBuf,
        /// Reference peak days (offsets); derived from the posterior median
        /// incidence when omitted.
        #[arg(long, value_delimiter = ',')]
        reference_days: Option<Vec<i64>>,
        #[arg(long, default_value_t = 14)]
        window_days: i64,
        /// Counterfactual cutoff (day offset); horizon end by default.
        #[arg(long)]
        cutoff_day: Option<usize>,
    },
    /// Counterfactual vaccination impact from a fitted chain.
    Counterfactual {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        cutoff_day: Option<usize>,
    },
    /// Fit three times (full / minus8 / none prevalence) and compare peaks.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        reference_days: Option<Vec<i64>>,
        #[arg(long, default_value_t = 14)]
        window_days: i64,
    },
    /// Validate a config (and optionally a dataset) without running.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Data { .. } => "data",
        Error::State(_) => "state",
        Error::Simulation(_) => "simulation",
        Error::Numerics(_) => "numerics",
        Error::OutOfHorizon(_) => "out_of_horizon",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(err) = run(cli) {
        let payload = serde_json::json!({
            "error": err.to_string(),
            "kind": error_kind(&err),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

/// Everything the product and fit paths share after ingest.
struct Prepared {
    cfg: RunConfig,
    spec: StratumSpec,
    dataset: Dataset,
    schedule: VaccinationSchedule,
}

fn prepare(config: &Path, data: &Path) -> Result<Prepared> {
    let cfg = RunConfig::from_path(config)?;
    let spec = cfg.spec()?;
    let dataset = data::ingest(data, &cfg)?;
    let schedule = dynamics::vaccination_rates(
        &dataset.feed,
        &dataset.populations,
        &cfg.efficacy_tables(),
        spec.dt,
    )?;
    Ok(Prepared { cfg, spec, dataset, schedule })
}

fn fit_options(cfg: &RunConfig, seed: Option<u64>) -> FitOptions {
    let mut opts = cfg.fit_options();
    if let Some(seed) = seed {
        opts.seed = seed;
    }
    opts
}

/// Reference peak days from the argmax of the summed posterior-median
/// incidence when the user supplies none.
fn default_reference_days(
    prep: &Prepared,
    chain: &epimeld::inference::PosteriorChain,
) -> Result<Vec<i64>> {
    let layout = prep.cfg.layout();
    let template = prep.cfg.template()?;
    let incidence = analysis::posterior_daily_incidence(
        chain,
        &layout,
        &template,
        &prep.spec,
        &prep.dataset.contacts,
        &prep.dataset.populations,
        Some(&prep.schedule),
    )?;
    let days = prep.spec.horizon_days();
    let mut median_total = vec![0.0; days];
    for d in 0..days {
        let mut values: Vec<f64> = incidence
            .iter()
            .map(|draw| draw.iter().map(|region| region[d]).sum::<f64>())
            .collect();
        values.sort_by(|a, b| a.total_cmp(b));
        median_total[d] = values[values.len() / 2];
    }
    let peak = median_total
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(d, _)| d as i64)
        .unwrap_or(0);
    Ok(vec![peak])
}

fn product_inputs<'a>(
    prep: &'a Prepared,
    layout: &'a epimeld::params::ParamLayout,
    template: &'a ModelParams,
    reference_days: Vec<i64>,
    window_days: i64,
    cutoff_day: Option<usize>,
) -> Result<ProductInputs<'a>> {
    Ok(ProductInputs {
        spec: &prep.spec,
        layout,
        template,
        contacts: &prep.dataset.contacts,
        populations: &prep.dataset.populations,
        vaccination: Some(&prep.schedule),
        severity_changepoints: prep.cfg.model.severity_changepoint_days.clone(),
        severity_window: prep.cfg.model.severity_window_days,
        delay: prep.cfg.delay_distribution()?,
        age_map: prep.cfg.age_map(),
        cutoff_day: cutoff_day.unwrap_or_else(|| prep.spec.horizon_days()),
        reference_days,
        peak_window_days: window_days,
    })
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = &cli.out_dir;
    match cli.command {
        Command::Simulate { config, params } => {
            let cfg = RunConfig::from_path(&config)?;
            let seed = cli.seed.unwrap_or(cfg.mcmc.seed);
            let truth: ModelParams = match params {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => epimeld::synthetic::true_params(&cfg)?,
            };
            let dataset = epimeld::synthetic::generate_with(&cfg, &truth, seed)?;
            let dataset_dir = out_dir.join("dataset");
            data::export(&dataset_dir, &cfg, &dataset)?;
            std::fs::write(
                out_dir.join("true_params.json"),
                serde_json::to_string_pretty(&truth)?.as_bytes(),
            )?;
            outputs::write_manifest(
                out_dir,
                &cfg,
                seed,
                &["dataset".into(), "true_params.json".into()],
            )?;
            Ok(())
        }
        Command::Fit { config, data, checkpoint, resume } => {
            let prep = prepare(&config, &data)?;
            let opts = fit_options(&prep.cfg, cli.seed);
            let layout = prep.cfg.layout();
            let template = prep.cfg.template()?;
            let ctx = inference::FitContext::new(
                &prep.spec,
                layout.clone(),
                template.clone(),
                prep.cfg.priors.clone(),
                &prep.dataset.observations,
                &prep.dataset.populations,
                &prep.dataset.contacts,
                Some(&prep.schedule),
                prep.cfg.model.severity_changepoint_days.clone(),
                prep.cfg.model.severity_window_days,
                prep.cfg.delay_distribution()?,
            )?;
            let mut state = match resume {
                Some(path) => SamplerState::restore(&path)?,
                None => inference::init_state(&ctx, &template, &opts)?,
            };
            inference::run_from(&ctx, &mut state, &opts)?;
            if let Some(path) = checkpoint {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                state.checkpoint(&path)?;
            }
            outputs::write_chain(out_dir, &state.chain, &layout, &prep.cfg)?;
            outputs::write_diagnostics(out_dir, &state.chain, opts.n_iterations)?;
            outputs::write_manifest(
                out_dir,
                &prep.cfg,
                opts.seed,
                &["chain_samples.csv".into(), "diagnostics.csv".into()],
            )?;
            Ok(())
        }
        Command::Nowcast {
            config,
            data,
            chain,
            reference_days,
            window_days,
            cutoff_day,
        } => {
            let prep = prepare(&config, &data)?;
            let chain = outputs::read_chain(&chain)?;
            let reference_days = match reference_days {
                Some(days) => days,
                None => default_reference_days(&prep, &chain)?,
            };
            let layout = prep.cfg.layout();
            let template = prep.cfg.template()?;
            let inputs = product_inputs(
                &prep, &layout, &template, reference_days, window_days, cutoff_day,
            )?;
            let mut products = outputs::nowcast_products(out_dir, &chain, &inputs)?;
            products.extend(outputs::counterfactual_products(out_dir, &chain, &inputs)?);
            outputs::write_manifest(out_dir, &prep.cfg, chain.seed, &products)?;
            Ok(())
        }
        Command::Counterfactual { config, data, chain, cutoff_day } => {
            let prep = prepare(&config, &data)?;
            let chain = outputs::read_chain(&chain)?;
            let layout = prep.cfg.layout();
            let template = prep.cfg.template()?;
            let inputs =
                product_inputs(&prep, &layout, &template, Vec::new(), 14, cutoff_day)?;
            let products = outputs::counterfactual_products(out_dir, &chain, &inputs)?;
            outputs::write_manifest(out_dir, &prep.cfg, chain.seed, &products)?;
            Ok(())
        }
        Command::Sensitivity { config, data, reference_days, window_days } => {
            let prep = prepare(&config, &data)?;
            let opts = fit_options(&prep.cfg, cli.seed);
            let layout = prep.cfg.layout();
            let template = prep.cfg.template()?;
            let reference_days = match reference_days {
                Some(days) => days,
                None => {
                    // Single-draw "chain" at the template for a reference run.
                    let theta = layout.pack(&template)?;
                    let chain = epimeld::inference::PosteriorChain {
                        samples: vec![theta],
                        log_posteriors: vec![0.0],
                        parameter_names: Vec::new(),
                        acceptance: Vec::new(),
                        seed: opts.seed,
                    };
                    default_reference_days(&prep, &chain)?
                }
            };
            let harness = HarnessInputs {
                spec: &prep.spec,
                layout: layout.clone(),
                template: template.clone(),
                prior_cfg: prep.cfg.priors.clone(),
                populations: &prep.dataset.populations,
                contacts: &prep.dataset.contacts,
                vaccination: Some(&prep.schedule),
                severity_changepoints: prep.cfg.model.severity_changepoint_days.clone(),
                severity_window: prep.cfg.model.severity_window_days,
                delay: prep.cfg.delay_distribution()?,
                fit: opts.clone(),
            };
            let runs = analysis::sensitivity_harness(
                &harness,
                &prep.dataset.observations,
                &reference_days,
                window_days,
            )?;
            let mut rows = Vec::new();
            for run in &runs {
                let level_dir = out_dir.join(run.level.label());
                outputs::write_chain(&level_dir, &run.chain, &layout, &prep.cfg)?;
                for peak in &run.peaks {
                    let date = prep.spec.start_date
                        + chrono::Duration::days(
                            reference_days[peak.wave]
                                .clamp(0, prep.spec.horizon_days() as i64 - 1),
                        );
                    rows.push(ProductRow {
                        quantity: format!("peak_size_{}", run.level.label()),
                        region: peak.region,
                        stratum: format!("wave{}", peak.wave),
                        date,
                        q05: peak.size.q05,
                        q50: peak.size.q50,
                        q95: peak.size.q95,
                    });
                    rows.push(ProductRow {
                        quantity: format!("peak_day_{}", run.level.label()),
                        region: peak.region,
                        stratum: format!("wave{}", peak.wave),
                        date,
                        q05: peak.day.q05,
                        q50: peak.day.q50,
                        q95: peak.day.q95,
                    });
                }
            }
            outputs::write_product(out_dir, "sensitivity_peaks.csv", &rows)?;
            outputs::write_manifest(
                out_dir,
                &prep.cfg,
                opts.seed,
                &["sensitivity_peaks.csv".into()],
            )?;
            Ok(())
        }
        Command::Validate { config, data } => {
            let cfg = RunConfig::from_path(&config)?;
            if let Some(dir) = data {
                data::ingest(&dir, &cfg)?;
            }
            println!("{}", serde_json::json!({ "status": "ok" }));
            Ok(())
        }
    }
}
