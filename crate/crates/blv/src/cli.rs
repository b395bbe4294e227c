//! Command-line front end: reproducible exploration, fitting, model
//! choice, simulation, and evaluation runs.
//!
//! Every command resolves its settings as CLI flags over config file over
//! defaults, seeds all randomness explicitly, writes its artifacts plus a
//! manifest with content digests into the output directory, and returns a
//! coded exit status: 0 success, 2 input problems, 3 convergence
//! problems (artifacts still written), 4 internal failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{
    digest_files, read_draw_archive, sha256_bytes, sha256_file, write_chain_stats_csv,
    write_correlation_csv, write_coverage_csv, write_distance_csv, write_draw_archive,
    write_manifest, write_metrics_csv, write_recovery_cells_csv, write_recovery_scoreboard_csv,
    write_selection_csv, write_summary_csv, write_surface_csv, ArchiveMeta, ChainStats,
    DrawArchive, RunManifest, SelectionTableRow,
};
use crate::bfa::{initialize_bfa, BfaPosterior};
use crate::data::{load_panel, save_panel, trend_table, MortalityPanel, Scale};
use crate::error::{Error, Result};
use crate::model::{initialize, BlvPosterior, ModelSpec, ParamVector, Variant};
use crate::postprocess::{
    align_all, pca_reference, summarize, summarize_scalar, varimax, ParameterSummary,
};
use crate::sampler::{chain_diagnostics, nuts_sample, ChainOutput, SamplerConfig};
use crate::selection::{
    bic_m, distance_metrics, fit_metrics, is_marginal_loglik, latent_mean_states,
    log_kappa_summary, pairwise_distances, posterior_predict_mean, stacked_rows, waic_c,
    SelectionReport, SelectionRow,
};
use crate::simulator::{derive_seed, load_scenario, run_recovery_study, simulate_panel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Split potential scale reduction above this marks a fit as unconverged.
const R_HAT_LIMIT: f64 = 1.1;

/// RNG stream reserved for chain initial values.
const INIT_STREAM: u64 = 0x494E_4954;

/// Sampler settings as they appear in config files; the run seed is
/// injected separately.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let c = SamplerConfig::default();
        Self {
            chains: c.chains,
            iterations: c.iterations,
            warmup: c.warmup,
            thin: c.thin,
            target_accept: c.target_accept,
            max_tree_depth: c.max_tree_depth,
        }
    }
}

impl SamplerSettings {
    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            thin: self.thin,
            seed,
            target_accept: self.target_accept,
            max_tree_depth: self.max_tree_depth,
        }
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 keeps the library default.
    pub threads: usize,
    /// Importance-sampling draws per country block for marginal
    /// likelihoods.
    pub marginal_samples: usize,
    pub hpd_level: f64,
    /// Rotate fitted loadings to a varimax orientation before summaries.
    pub varimax: bool,
    pub sampler: SamplerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            marginal_samples: 100_000,
            hpd_level: 0.95,
            varimax: false,
            sampler: SamplerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Blv,
    Bfa,
}

impl VariantArg {
    fn to_variant(self) -> Variant {
        match self {
            VariantArg::Blv => Variant::Blv,
            VariantArg::Bfa => Variant::Bfa,
        }
    }

    fn label(self) -> &'static str {
        match self {
            VariantArg::Blv => "blv",
            VariantArg::Bfa => "bfa",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "blv",
    version,
    about = "Latent-factor models for bounded mortality panels"
)]
pub struct Cli {
    /// Base random seed for the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "blv_out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exploratory trend and correlation tables for a panel.
    Explore {
        /// Panel CSV with country,time,age,qx columns.
        #[arg(long)]
        panel: PathBuf,
    },
    /// Fit one model and archive posterior draws with summaries.
    Fit {
        #[arg(long)]
        panel: PathBuf,
        /// Latent factor count.
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::Blv)]
        variant: VariantArg,
        /// Rotate loadings to a varimax orientation before summaries.
        #[arg(long)]
        varimax: bool,
    },
    /// Fit a grid of factor counts and tabulate model-choice metrics.
    Select {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        /// Importance-sampling draws per country block.
        #[arg(long)]
        marginal_samples: Option<usize>,
    },
    /// Draw replicate panels from a scenario file.
    Simulate {
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the full recovery study a scenario describes.
    SimStudy {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        marginal_samples: Option<usize>,
    },
    /// Score an archived fit against its panel.
    Evaluate {
        /// Draw archive directory written by `fit`.
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        panel: PathBuf,
    },
    /// Regenerate summary tables from an existing draw archive.
    Report {
        #[arg(long)]
        archive: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Explore { .. } => "explore",
            Command::Fit { .. } => "fit",
            Command::Select { .. } => "select",
            Command::Simulate { .. } => "simulate",
            Command::SimStudy { .. } => "sim-study",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }
}

/// Maps an error to the exit code contract.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Domain { .. }
        | Error::InvalidArgument(_)
        | Error::Series { .. }
        | Error::InvalidInput(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INPUT,
        Error::Degenerate(_)
        | Error::NoConvergence(_)
        | Error::Sampler(_)
        | Error::Archive(_) => EXIT_INTERNAL,
    }
}

/// Entry point for the installed binary.
pub fn run() -> i32 {
    run_from_args(std::env::args_os())
}

/// Parses and executes a full argument vector; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("config file {}: {e}", path.display()),
    })
}

/// Resolves settings: command line over config file over defaults.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    match &cli.command {
        Command::Select {
            marginal_samples: Some(m),
            ..
        }
        | Command::SimStudy {
            marginal_samples: Some(m),
            ..
        } => cfg.marginal_samples = *m,
        Command::Fit { varimax: true, .. } => cfg.varimax = true,
        _ => {}
    }
    if !(cfg.hpd_level > 0.0 && cfg.hpd_level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "hpd_level {} must lie in (0, 1)",
            cfg.hpd_level
        )));
    }
    if cfg.marginal_samples < 2 {
        return Err(Error::InvalidInput(
            "marginal_samples must be at least 2".into(),
        ));
    }
    Ok(cfg)
}

struct CommandArtifacts {
    exit: i32,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn execute(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli)?;
    if cfg.threads > 0 {
        // A second global-pool build in one process is a no-op; that only
        // affects in-process callers, never the installed binary.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    std::fs::create_dir_all(&cli.out_dir)?;
    let started = Instant::now();
    let art = match &cli.command {
        Command::Explore { panel } => cmd_explore(panel, &cli.out_dir)?,
        Command::Fit {
            panel, k, variant, ..
        } => cmd_fit(panel, *k, *variant, &cfg, &cli.out_dir)?,
        Command::Select {
            panel,
            k_min,
            k_max,
            ..
        } => cmd_select(panel, *k_min, *k_max, &cfg, &cli.out_dir)?,
        Command::Simulate { scenario } => cmd_simulate(scenario, &cli.out_dir)?,
        Command::SimStudy { scenario, .. } => cmd_sim_study(scenario, &cfg, &cli.out_dir)?,
        Command::Evaluate { archive, panel } => {
            cmd_evaluate(archive, panel, &cfg, &cli.out_dir)?
        }
        Command::Report { archive } => cmd_report(archive, &cfg, &cli.out_dir)?,
    };
    let config_json = serde_json::to_string(&cfg)
        .map_err(|e| Error::InvalidInput(format!("could not encode config: {e}")))?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        threads: cfg.threads,
        config_digest: sha256_bytes(config_json.as_bytes()),
        inputs: digest_files(Path::new(""), &art.inputs)?,
        outputs: digest_files(&cli.out_dir, &art.outputs)?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&cli.out_dir, &manifest)?;
    Ok(art.exit)
}

fn cmd_explore(panel_path: &Path, out_dir: &Path) -> Result<CommandArtifacts> {
    let panel = load_panel(panel_path)?;
    let trend = trend_table(&panel)?;
    let ages: Vec<u32> = panel.age_groups().iter().map(|a| a.lower_bound()).collect();
    let trend_path = out_dir.join("trend.csv");
    crate::archive::write_trend_csv(&trend_path, &trend)?;
    let mut outputs = vec![trend_path];
    for (scale, name) in [(Scale::Raw, "correlation_raw.csv"), (Scale::Logit, "correlation_logit.csv")]
    {
        let corr = panel.correlation_matrix(scale)?;
        let path = out_dir.join(name);
        write_correlation_csv(&path, &ages, &corr)?;
        outputs.push(path);
    }
    let negative = trend.iter().filter(|r| r.tau < 0.0).count();
    println!(
        "explored {} countries x {} age groups: {negative}/{} declining trends",
        panel.n_countries(),
        panel.n_ages(),
        trend.len()
    );
    Ok(CommandArtifacts {
        exit: EXIT_OK,
        inputs: vec![panel_path.to_path_buf()],
        outputs,
    })
}

struct FitOutput {
    spec: ModelSpec,
    /// Chain outputs with rotation-aligned draws.
    chains: Vec<ChainOutput>,
    /// Pooled aligned draws in chain order.
    pooled: Vec<ParamVector>,
    diagnostics: Option<Vec<crate::diagnostics::ScalarDiagnostics>>,
    max_r_hat: Option<f64>,
}

/// Shared fit pipeline: initialize, sample, align, optionally varimax.
fn fit_model(
    panel: &MortalityPanel,
    k: usize,
    variant: Variant,
    cfg: &RunConfig,
    seed: u64,
    apply_varimax: bool,
) -> Result<FitOutput> {
    let spec = ModelSpec::new(panel, k, variant)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(INIT_STREAM);
    let sampler_cfg = cfg.sampler.to_config(seed);
    let inits: Result<Vec<Vec<f64>>> = (0..sampler_cfg.chains)
        .map(|_| {
            let pv = match variant {
                Variant::Blv => initialize(&spec, panel, &mut init_rng)?,
                Variant::Bfa => initialize_bfa(&spec, panel, &mut init_rng)?,
            };
            Ok(pv.values().to_vec())
        })
        .collect();
    let inits = inits?;
    let mut outputs = match variant {
        Variant::Blv => nuts_sample(&BlvPosterior::new(spec.clone(), panel)?, &inits, &sampler_cfg)?,
        Variant::Bfa => nuts_sample(&BfaPosterior::new(spec.clone(), panel)?, &inits, &sampler_cfg)?,
    };
    let layout = spec.layout();
    let as_params = |outs: &[ChainOutput]| -> Result<Vec<ParamVector>> {
        outs.iter()
            .flat_map(|o| o.draws.iter())
            .map(|v| ParamVector::new(layout.clone(), v.clone()))
            .collect()
    };
    let reference = pca_reference(panel, k)?;
    let mut pooled = align_all(&as_params(&outputs)?, reference.matrix())?.into_draws();
    if apply_varimax {
        let mut mean_alpha = pooled[0].alpha_matrix() * 0.0;
        for d in &pooled {
            mean_alpha += d.alpha_matrix();
        }
        mean_alpha /= pooled.len() as f64;
        let (rotated_target, _) = varimax(&mean_alpha);
        pooled = align_all(&pooled, &rotated_target)?.into_draws();
    }
    // Push aligned draws back into their chains, order preserved.
    let per_chain = sampler_cfg.draws_per_chain();
    for (c, o) in outputs.iter_mut().enumerate() {
        for (d, draw) in o.draws.iter_mut().enumerate() {
            draw.copy_from_slice(pooled[c * per_chain + d].values());
        }
    }
    // Convergence is judged on the identified draws; the raw chains differ
    // by arbitrary factor rotations that alignment removes.
    let diagnostics = if outputs.len() >= 2 && sampler_cfg.draws_per_chain() >= 4 {
        Some(chain_diagnostics(&outputs)?)
    } else {
        None
    };
    let max_r_hat = diagnostics.as_ref().and_then(|d| {
        d.iter()
            .filter_map(|s| s.r_hat)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
    });
    Ok(FitOutput {
        spec,
        chains: outputs,
        pooled,
        diagnostics,
        max_r_hat,
    })
}

fn chain_stats_of(outputs: &[ChainOutput]) -> Vec<ChainStats> {
    outputs
        .iter()
        .map(|o| ChainStats {
            accept_mean: o.accept_mean,
            divergences: o.divergences,
            divergence_warning: o.divergence_warning,
            step_size: o.step_size,
        })
        .collect()
}

fn cmd_fit(
    panel_path: &Path,
    k: usize,
    variant: VariantArg,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CommandArtifacts> {
    let panel = load_panel(panel_path)?;
    let fit = fit_model(
        &panel,
        k,
        variant.to_variant(),
        cfg,
        cfg.seed,
        cfg.varimax,
    )?;
    let layout = fit.spec.layout();
    let summaries = summarize(&fit.pooled, cfg.hpd_level)?;
    let meta = ArchiveMeta {
        variant: variant.label().to_string(),
        k,
        dim: layout.len(),
        chains: fit.chains.len(),
        draws_per_chain: cfg.sampler.to_config(cfg.seed).draws_per_chain(),
        seed: cfg.seed,
        names: layout.names(),
        panel_digest: sha256_file(panel_path)?,
        aligned: true,
        chain_stats: chain_stats_of(&fit.chains),
    };
    let mut outputs = write_draw_archive(out_dir.join("archive"), &meta, &fit.chains)?;
    let summary_path = out_dir.join("summary.csv");
    write_summary_csv(
        &summary_path,
        &meta.names,
        &summaries,
        fit.diagnostics.as_deref(),
    )?;
    outputs.push(summary_path);
    let chains_path = out_dir.join("chains.csv");
    write_chain_stats_csv(&chains_path, &meta.chain_stats)?;
    outputs.push(chains_path);
    let divergences: usize = fit.chains.iter().map(|o| o.divergences).sum();
    let exit = match fit.max_r_hat {
        Some(r) if r > R_HAT_LIMIT => {
            eprintln!(
                "warning: split R-hat reached {r:.3}, above the {R_HAT_LIMIT} convergence limit"
            );
            EXIT_CONVERGENCE
        }
        _ => EXIT_OK,
    };
    println!(
        "fitted {} K={k}: {} draws, max split R-hat {}, {divergences} divergences",
        variant.label(),
        fit.pooled.len(),
        fit.max_r_hat
            .map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}")),
    );
    Ok(CommandArtifacts {
        exit,
        inputs: vec![panel_path.to_path_buf()],
        outputs,
    })
}

fn score_one_k(
    panel: &MortalityPanel,
    k: usize,
    cfg: &RunConfig,
) -> Result<(SelectionRow, Option<f64>)> {
    let fit = fit_model(panel, k, Variant::Blv, cfg, derive_seed(cfg.seed, k as u64, 1), false)?;
    let spec = &fit.spec;
    let layout = spec.layout();
    let marginal = is_marginal_loglik(
        spec,
        panel,
        &fit.pooled,
        cfg.marginal_samples,
        derive_seed(cfg.seed, 0x4953, k as u64),
    )?;
    for w in marginal.warnings() {
        eprintln!("warning: K={k}: {w}");
    }
    let waic = waic_c(spec, panel, &fit.pooled)?;
    let lk = log_kappa_summary(&fit.pooled)?;
    let q_hat = posterior_predict_mean(spec, panel, &fit.pooled)?;
    let (rmse_q, mape_q) = fit_metrics(&q_hat, panel)?;
    let theta = latent_mean_states(spec, &fit.pooled)?;
    let dm = distance_metrics(panel, &q_hat, &theta)?;
    let row = SelectionRow {
        k,
        log_marginal: marginal.total,
        log_marginal_se: marginal
            .per_country_se
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt(),
        bic_m: bic_m(
            marginal.total,
            layout.structural_param_count(),
            panel.n_obs() as f64,
        ),
        waic_c: waic.waic,
        log_kappa_mean: lk.mean,
        log_kappa_hpd_low: lk.hpd_low,
        log_kappa_hpd_high: lk.hpd_high,
        rmse_q,
        mape_q,
        rmse_d: dm.rmse_d,
        mape_d: dm.mape_d,
        cophenetic: dm.cophenetic,
    };
    Ok((row, fit.max_r_hat))
}

fn cmd_select(
    panel_path: &Path,
    k_min: usize,
    k_max: usize,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CommandArtifacts> {
    if k_min < 1 || k_max < k_min {
        return Err(Error::InvalidInput(format!(
            "factor range {k_min}..={k_max} is empty or starts below 1"
        )));
    }
    let panel = load_panel(panel_path)?;
    let mut table = Vec::new();
    let mut ok_rows = Vec::new();
    for k in k_min..=k_max {
        match score_one_k(&panel, k, cfg) {
            Ok((row, max_r_hat)) => {
                println!(
                    "K={k}: bic_m={:.3} waic_c={:.3} log_marginal={:.3} (se {:.3}) r_hat={}",
                    row.bic_m,
                    row.waic_c,
                    row.log_marginal,
                    row.log_marginal_se,
                    max_r_hat.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}")),
                );
                ok_rows.push(row.clone());
                table.push(SelectionTableRow {
                    k,
                    row: Some(row),
                    message: String::new(),
                });
            }
            Err(e) => {
                eprintln!("warning: K={k} failed: {e}");
                table.push(SelectionTableRow {
                    k,
                    row: None,
                    message: e.to_string(),
                });
            }
        }
    }
    if ok_rows.is_empty() {
        return Err(Error::Sampler(
            "every candidate factor count failed to fit".into(),
        ));
    }
    let csv_path = out_dir.join("selection.csv");
    write_selection_csv(&csv_path, &table)?;
    let report = SelectionReport { rows: ok_rows };
    report.validate()?;
    let json_path = out_dir.join("selection.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("could not encode report: {e}")))?;
    std::fs::write(&json_path, json + "\n")?;
    if let Some(best) = report.best_by_bic() {
        println!("selected K={} by BIC", best.k);
    }
    let complete = table.iter().all(|r| r.row.is_some());
    Ok(CommandArtifacts {
        exit: if complete { EXIT_OK } else { EXIT_CONVERGENCE },
        inputs: vec![panel_path.to_path_buf()],
        outputs: vec![csv_path, json_path],
    })
}

fn cmd_simulate(scenario_path: &Path, out_dir: &Path) -> Result<CommandArtifacts> {
    let scenario = load_scenario(scenario_path)?;
    let mut outputs = Vec::with_capacity(scenario.replicates);
    let mut resampled = 0usize;
    for r in 0..scenario.replicates {
        let sim = simulate_panel(&scenario, r)?;
        resampled += sim.resampled;
        let path = out_dir.join(format!("replicate_{r:03}.csv"));
        save_panel(&sim.panel, &path)?;
        outputs.push(path);
    }
    println!(
        "simulated {} replicate panels from scenario {} ({resampled} redraws)",
        scenario.replicates, scenario.name
    );
    Ok(CommandArtifacts {
        exit: EXIT_OK,
        inputs: vec![scenario_path.to_path_buf()],
        outputs,
    })
}

fn cmd_sim_study(
    scenario_path: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CommandArtifacts> {
    let scenario = load_scenario(scenario_path)?;
    let sampler_cfg = cfg.sampler.to_config(scenario.seed);
    let report = run_recovery_study(&scenario, &sampler_cfg, cfg.marginal_samples)?;
    let json_path = out_dir.join("recovery.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("could not encode report: {e}")))?;
    std::fs::write(&json_path, json + "\n")?;
    let scoreboard = out_dir.join("scoreboard.csv");
    write_recovery_scoreboard_csv(&scoreboard, &report)?;
    let cells = out_dir.join("cells.csv");
    write_recovery_cells_csv(&cells, &report)?;
    let coverage = out_dir.join("coverage.csv");
    write_coverage_csv(&coverage, &report)?;
    println!(
        "study {}: BIC selections {:?} over grid {:?}, {} of {} replicates complete",
        report.scenario,
        report.selected_by_bic,
        report.k_grid,
        report.completed_replicates,
        report.replicates
    );
    Ok(CommandArtifacts {
        exit: if report.complete {
            EXIT_OK
        } else {
            EXIT_CONVERGENCE
        },
        inputs: vec![scenario_path.to_path_buf()],
        outputs: vec![json_path, scoreboard, cells, coverage],
    })
}

fn archive_variant(meta: &ArchiveMeta) -> Result<Variant> {
    match meta.variant.as_str() {
        "blv" => Ok(Variant::Blv),
        "bfa" => Ok(Variant::Bfa),
        other => Err(Error::Archive(format!(
            "unknown archive variant label {other:?}"
        ))),
    }
}

fn cmd_evaluate(
    archive_dir: &Path,
    panel_path: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CommandArtifacts> {
    let archive = read_draw_archive(archive_dir)?;
    let panel = load_panel(panel_path)?;
    let digest = sha256_file(panel_path)?;
    if digest != archive.meta.panel_digest {
        return Err(Error::InvalidInput(format!(
            "panel digest {digest} does not match the digest stored in the archive"
        )));
    }
    let variant = archive_variant(&archive.meta)?;
    let spec = ModelSpec::new(&panel, archive.meta.k, variant)?;
    let draws = archive.pooled_draws(&spec.layout())?;
    let q_hat = posterior_predict_mean(&spec, &panel, &draws)?;
    let (rmse_q, mape_q) = fit_metrics(&q_hat, &panel)?;
    let theta = latent_mean_states(&spec, &draws)?;
    let dm = distance_metrics(&panel, &q_hat, &theta)?;
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(
        &metrics_path,
        &[
            ("rmse_q".into(), rmse_q),
            ("mape_q".into(), mape_q),
            ("rmse_d".into(), dm.rmse_d),
            ("mape_d".into(), dm.mape_d),
            ("cophenetic".into(), dm.cophenetic),
        ],
    )?;
    let surface_path = out_dir.join("surface.csv");
    write_surface_csv(&surface_path, &panel, &q_hat)?;
    let observed = pairwise_distances(&stacked_rows(
        &panel
            .series()
            .iter()
            .map(|s| s.values().clone())
            .collect::<Vec<_>>(),
    ));
    let fitted = pairwise_distances(&stacked_rows(&theta));
    let labels = crate::archive::stacked_row_labels(&panel);
    let distance_path = out_dir.join("distances.csv");
    write_distance_csv(&distance_path, &labels, &observed, &fitted)?;
    let _ = cfg;
    println!(
        "evaluated {} K={}: rmse_q={rmse_q:.6} mape_q={mape_q:.4} cophenetic={:.4}",
        archive.meta.variant, archive.meta.k, dm.cophenetic
    );
    Ok(CommandArtifacts {
        exit: EXIT_OK,
        inputs: vec![
            archive_dir.join("meta.json"),
            panel_path.to_path_buf(),
        ],
        outputs: vec![metrics_path, surface_path, distance_path],
    })
}

fn cmd_report(archive_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<CommandArtifacts> {
    let archive = read_draw_archive(archive_dir)?;
    let DrawArchive {
        meta,
        draws,
        log_densities,
    } = archive;
    let pooled: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    if pooled.is_empty() {
        return Err(Error::Archive("archive holds no draws".into()));
    }
    let summaries: Result<Vec<ParameterSummary>> = (0..meta.dim)
        .map(|p| {
            let col: Vec<f64> = pooled.iter().map(|d| d[p]).collect();
            summarize_scalar(&col, cfg.hpd_level)
        })
        .collect();
    let diagnostics = if meta.chains >= 2 && meta.draws_per_chain >= 4 {
        let outputs: Vec<ChainOutput> = draws
            .into_iter()
            .zip(log_densities)
            .zip(&meta.chain_stats)
            .map(|((d, ld), s)| ChainOutput {
                draws: d,
                log_densities: ld,
                accept_mean: s.accept_mean,
                divergences: s.divergences,
                divergence_warning: s.divergence_warning,
                step_size: s.step_size,
                inv_mass_diag: Vec::new(),
            })
            .collect();
        Some(chain_diagnostics(&outputs)?)
    } else {
        None
    };
    let summary_path = out_dir.join("summary.csv");
    write_summary_csv(&summary_path, &meta.names, &summaries?, diagnostics.as_deref())?;
    let chains_path = out_dir.join("chains.csv");
    write_chain_stats_csv(&chains_path, &meta.chain_stats)?;
    println!(
        "summarized {} parameters from {} chains of {} draws",
        meta.dim, meta.chains, meta.draws_per_chain
    );
    Ok(CommandArtifacts {
        exit: EXIT_OK,
        inputs: vec![archive_dir.join("meta.json")],
        outputs: vec![summary_path, chains_path],
    })
}
