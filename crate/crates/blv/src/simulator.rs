//! Synthetic panel generation and the parameter-recovery study.
//!
//! A scenario fixes the generative model (loadings, intercepts, precision,
//! per-country autoregression) and a panel shape; replicate panels are
//! drawn deterministically from seeds. The recovery study fits a grid of
//! factor counts to every replicate, scores model choice per replicate,
//! and records interval coverage of the structural parameters at the true
//! factor count after a per-draw Procrustes match to the truth.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::betaprop::BetaProp;
use crate::data::{inv_logit, AgeGroup, MortalityPanel};
use crate::error::{Error, Result};
use crate::model::{initialize, BlvPosterior, ModelSpec, ParamVector, Variant};
use crate::postprocess::{align_all, pca_reference, summarize_scalar};
use crate::sampler::{chain_diagnostics, nuts_sample, SamplerConfig};
use crate::selection::{bic_m, is_marginal_loglik, log_kappa_summary, waic_c};

/// Attempts per observation before an endpoint-saturated beta draw is an
/// error.
const REDRAW_CAP: usize = 100;

/// Generating parameter values for a scenario.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParameters {
    /// Loadings, one row of length `k_true` per age group.
    pub alpha: Vec<Vec<f64>>,
    /// Per-age intercepts on the logit scale.
    pub beta: Vec<f64>,
    /// Shared beta-observation precision.
    pub kappa: f64,
    /// Per-country autocorrelations, strictly inside (-1, 1).
    pub phi: Vec<f64>,
    /// Per-country innovation scales, positive.
    pub sigma: Vec<f64>,
}

impl TrueParameters {
    /// Loadings as a dense matrix.
    pub fn alpha_matrix(&self) -> DMatrix<f64> {
        let j = self.alpha.len();
        let k = self.alpha.first().map_or(0, Vec::len);
        DMatrix::from_fn(j, k, |x, f| self.alpha[x][f])
    }
}

/// Full description of one simulation study.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    pub name: String,
    /// Age-group lower bounds, strictly increasing.
    pub age_lower_bounds: Vec<u32>,
    /// Periods per synthetic country.
    pub counts: Vec<usize>,
    /// First time index per country; defaults to all ones.
    #[serde(default)]
    pub first_times: Vec<u32>,
    /// Factor count of the generating model.
    pub k_true: usize,
    /// Replicate panels to draw.
    pub replicates: usize,
    /// Factor counts fitted to each replicate.
    pub k_grid: Vec<usize>,
    pub seed: u64,
    pub parameters: TrueParameters,
}

impl SimulationScenario {
    pub fn n_countries(&self) -> usize {
        self.counts.len()
    }

    pub fn n_ages(&self) -> usize {
        self.age_lower_bounds.len()
    }

    /// First time index per country, applying the default of one.
    pub fn first_times(&self) -> Vec<u32> {
        if self.first_times.is_empty() {
            vec![1; self.counts.len()]
        } else {
            self.first_times.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.counts.len();
        let j = self.age_lower_bounds.len();
        if n == 0 || j == 0 {
            return Err(Error::InvalidInput(
                "scenario needs at least one country and one age group".into(),
            ));
        }
        if self.counts.iter().any(|&c| c < 2) {
            return Err(Error::InvalidInput(
                "every country needs at least two periods".into(),
            ));
        }
        if !self.first_times.is_empty() && self.first_times.len() != n {
            return Err(Error::InvalidInput(
                "first_times must list one entry per country".into(),
            ));
        }
        if self.k_true < 1 || self.k_true > j {
            return Err(Error::InvalidInput(format!(
                "true factor count {} must lie in 1..={j}",
                self.k_true
            )));
        }
        if self.replicates < 1 {
            return Err(Error::InvalidInput("replicate count must be positive".into()));
        }
        if self.k_grid.is_empty() || self.k_grid.iter().any(|&k| k < 1 || k > j) {
            return Err(Error::InvalidInput(format!(
                "fitted factor grid must be non-empty with entries in 1..={j}"
            )));
        }
        let p = &self.parameters;
        if p.alpha.len() != j || p.alpha.iter().any(|row| row.len() != self.k_true) {
            return Err(Error::InvalidInput(format!(
                "loadings must be {j} rows of {} entries",
                self.k_true
            )));
        }
        if p.beta.len() != j {
            return Err(Error::InvalidInput(format!(
                "intercepts must list {j} entries"
            )));
        }
        if p.phi.len() != n || p.sigma.len() != n {
            return Err(Error::InvalidInput(format!(
                "autoregressive parameters must list {n} entries per vector"
            )));
        }
        if !(p.kappa.is_finite() && p.kappa > 0.0) {
            return Err(Error::InvalidInput(format!(
                "precision {} must be positive and finite",
                p.kappa
            )));
        }
        if p.phi.iter().any(|v| !(v.abs() < 1.0)) {
            return Err(Error::InvalidInput(
                "autocorrelations must lie strictly inside (-1, 1)".into(),
            ));
        }
        if p.sigma.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(
                "innovation scales must be positive and finite".into(),
            ));
        }
        if p.alpha
            .iter()
            .flatten()
            .chain(p.beta.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "loadings and intercepts must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Reads and validates a scenario JSON file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<SimulationScenario> {
    let file = std::fs::File::open(path.as_ref())?;
    let scenario: SimulationScenario = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("scenario file: {e}"),
        })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Writes a scenario as pretty-printed JSON.
pub fn save_scenario(scenario: &SimulationScenario, path: impl AsRef<Path>) -> Result<()> {
    scenario.validate()?;
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), scenario)
        .map_err(|e| Error::InvalidInput(format!("could not encode scenario: {e}")))?;
    Ok(())
}

/// One simulated replicate: the panel, its latent state paths, and the
/// count of redrawn endpoint-saturated observations.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: MortalityPanel,
    /// True latent states, one `N_i x K` matrix per country.
    pub states: Vec<DMatrix<f64>>,
    /// Observations redrawn because a beta draw hit floating-point 0 or 1.
    pub resampled: usize,
}

/// Draws one replicate panel, deterministic in (scenario seed, replicate).
pub fn simulate_panel(scenario: &SimulationScenario, replicate: usize) -> Result<SimulatedPanel> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate as u64);
    let p = &scenario.parameters;
    let j = scenario.n_ages();
    let k = scenario.k_true;
    let first_times = scenario.first_times();
    let ages: Result<Vec<AgeGroup>> = scenario
        .age_lower_bounds
        .iter()
        .map(|&a| AgeGroup::new(a))
        .collect();
    let ages = ages?;
    let mut series = Vec::with_capacity(scenario.n_countries());
    let mut states = Vec::with_capacity(scenario.n_countries());
    let mut resampled = 0usize;
    for (i, &ni) in scenario.counts.iter().enumerate() {
        let phi = p.phi[i];
        let sigma = p.sigma[i];
        let scale0 = sigma / (1.0 - phi * phi).sqrt();
        let mut theta = DMatrix::zeros(ni, k);
        for t in 0..ni {
            for f in 0..k {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                theta[(t, f)] = if t == 0 {
                    scale0 * eps
                } else {
                    phi * theta[(t - 1, f)] + sigma * eps
                };
            }
        }
        let mut values = DMatrix::zeros(ni, j);
        for t in 0..ni {
            for x in 0..j {
                let mut eta = p.beta[x];
                for f in 0..k {
                    eta += p.alpha[x][f] * theta[(t, f)];
                }
                let dist = BetaProp::new(inv_logit(eta), p.kappa)?;
                let mut attempts = 0;
                values[(t, x)] = loop {
                    let q = dist.sample(&mut rng);
                    if q > 0.0 && q < 1.0 {
                        break q;
                    }
                    resampled += 1;
                    attempts += 1;
                    if attempts >= REDRAW_CAP {
                        return Err(Error::Degenerate(format!(
                            "observation for country {i}, period {t}, age index {x} \
                             saturated the unit interval {REDRAW_CAP} times"
                        )));
                    }
                };
            }
        }
        series.push(MortalityPanel::series_from_matrix(
            format!("S{:02}", i + 1),
            first_times[i],
            values,
        ));
        states.push(theta);
    }
    Ok(SimulatedPanel {
        panel: MortalityPanel::new(ages, series)?,
        states,
        resampled,
    })
}

/// Deterministic seed separation for nested jobs.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Model-choice metrics of one fitted (replicate, K) cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellMetrics {
    pub log_marginal: f64,
    pub log_marginal_se: f64,
    pub bic_m: f64,
    pub waic_c: f64,
    pub log_kappa_mean: f64,
    /// Largest split potential scale reduction across parameters, when
    /// computable.
    pub max_r_hat: Option<f64>,
    pub divergences: usize,
}

/// Outcome of one cell: fitted metrics or a recorded failure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Fitted(CellMetrics),
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecoveryCell {
    pub replicate: usize,
    pub k: usize,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

/// Interval coverage of one structural parameter at the true factor count.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoverageRecord {
    pub replicate: usize,
    /// Natural-scale parameter label: `phi[i]`, `sigma[i]`, `alpha[x,k]`.
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
    pub covered: bool,
}

/// Everything the recovery study produces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecoveryReport {
    pub scenario: String,
    pub k_grid: Vec<usize>,
    pub replicates: usize,
    /// Replicates whose every cell was fitted.
    pub completed_replicates: usize,
    pub complete: bool,
    /// Total redrawn observations across replicate panels.
    pub resampled_observations: usize,
    pub cells: Vec<RecoveryCell>,
    /// Selected-K counts aligned with `k_grid`, smallest BIC wins.
    pub selected_by_bic: Vec<usize>,
    /// Selected-K counts aligned with `k_grid`, smallest WAIC wins.
    pub selected_by_waic: Vec<usize>,
    pub coverage: Vec<CoverageRecord>,
}

impl RecoveryReport {
    /// Checks the selected-K histograms account for every completed
    /// replicate.
    pub fn validate(&self) -> Result<()> {
        for (label, hist) in [
            ("BIC", &self.selected_by_bic),
            ("WAIC", &self.selected_by_waic),
        ] {
            if hist.len() != self.k_grid.len() {
                return Err(Error::InvalidInput(format!(
                    "{label} histogram length does not match the factor grid"
                )));
            }
            let total: usize = hist.iter().sum();
            if total != self.completed_replicates {
                return Err(Error::InvalidInput(format!(
                    "{label} histogram sums to {total}, expected {}",
                    self.completed_replicates
                )));
            }
        }
        Ok(())
    }

    /// Fraction of coverage records with the given name prefix whose
    /// interval contained the truth.
    pub fn coverage_rate(&self, prefix: &str) -> Option<f64> {
        let matching: Vec<&CoverageRecord> = self
            .coverage
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .collect();
        if matching.is_empty() {
            return None;
        }
        let hit = matching.iter().filter(|c| c.covered).count();
        Some(hit as f64 / matching.len() as f64)
    }
}

struct FittedCell {
    metrics: CellMetrics,
    coverage: Vec<CoverageRecord>,
}

fn fit_cell(
    scenario: &SimulationScenario,
    sim: &SimulatedPanel,
    replicate: usize,
    k: usize,
    sampler: &SamplerConfig,
    marginal_samples: usize,
) -> Result<FittedCell> {
    let panel = &sim.panel;
    let cell_seed = derive_seed(scenario.seed, replicate as u64 + 1, k as u64 + 1);
    let spec = ModelSpec::new(panel, k, Variant::Blv)?;
    let posterior = BlvPosterior::new(spec.clone(), panel)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cell_seed);
    init_rng.set_stream(0x494E_4954);
    let inits: Result<Vec<Vec<f64>>> = (0..sampler.chains)
        .map(|_| Ok(initialize(&spec, panel, &mut init_rng)?.values().to_vec()))
        .collect();
    let config = SamplerConfig {
        seed: cell_seed,
        ..*sampler
    };
    let mut outputs = nuts_sample(&posterior, &inits?, &config)?;
    let divergences = outputs.iter().map(|o| o.divergences).sum();
    let layout = spec.layout();
    let draws: Vec<ParamVector> = outputs
        .iter()
        .flat_map(|o| o.draws.iter())
        .map(|v| ParamVector::new(layout.clone(), v.clone()))
        .collect::<Result<_>>()?;
    let reference = pca_reference(panel, k)?;
    let aligned = align_all(&draws, reference.matrix())?.into_draws();
    // Convergence is judged on the identified draws, not the raw chains,
    // which may sit in mirrored rotation modes.
    let per_chain = config.draws_per_chain();
    for (c, o) in outputs.iter_mut().enumerate() {
        for (d, draw) in o.draws.iter_mut().enumerate() {
            draw.copy_from_slice(aligned[c * per_chain + d].values());
        }
    }
    let max_r_hat = if outputs.len() >= 2 && config.draws_per_chain() >= 4 {
        chain_diagnostics(&outputs)?
            .iter()
            .filter_map(|d| d.r_hat)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
    } else {
        None
    };
    let marginal = is_marginal_loglik(
        &spec,
        panel,
        &aligned,
        marginal_samples,
        derive_seed(cell_seed, 0x4953, 0),
    )?;
    let waic = waic_c(&spec, panel, &aligned)?;
    let log_kappa = log_kappa_summary(&aligned)?;
    let metrics = CellMetrics {
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
        log_kappa_mean: log_kappa.mean,
        max_r_hat,
        divergences,
    };
    let coverage = if k == scenario.k_true {
        coverage_records(scenario, &draws, replicate)?
    } else {
        Vec::new()
    };
    Ok(FittedCell { metrics, coverage })
}

/// Coverage of the structural parameters after per-draw alignment to the
/// generating loadings.
fn coverage_records(
    scenario: &SimulationScenario,
    draws: &[ParamVector],
    replicate: usize,
) -> Result<Vec<CoverageRecord>> {
    let truth_alpha = scenario.parameters.alpha_matrix();
    let aligned = align_all(draws, &truth_alpha)?.into_draws();
    let mut records = Vec::new();
    let mut push = |name: String, truth: f64, values: Vec<f64>| -> Result<()> {
        let s = summarize_scalar(&values, 0.95)?;
        records.push(CoverageRecord {
            replicate,
            name,
            truth,
            mean: s.mean,
            hpd_low: s.hpd_low,
            hpd_high: s.hpd_high,
            covered: s.hpd_low <= truth && truth <= s.hpd_high,
        });
        Ok(())
    };
    for i in 0..scenario.n_countries() {
        push(
            format!("phi[{i}]"),
            scenario.parameters.phi[i],
            aligned.iter().map(|d| d.phi(i)).collect(),
        )?;
        push(
            format!("sigma[{i}]"),
            scenario.parameters.sigma[i],
            aligned.iter().map(|d| d.sigma(i)).collect(),
        )?;
    }
    for x in 0..scenario.n_ages() {
        for f in 0..scenario.k_true {
            push(
                format!("alpha[{x},{f}]"),
                scenario.parameters.alpha[x][f],
                aligned.iter().map(|d| d.alpha(x, f)).collect(),
            )?;
        }
    }
    Ok(records)
}

/// Fits every (replicate, K) cell and assembles the recovery report.
///
/// Cells run in parallel; each owns deterministic random streams derived
/// from the scenario seed, so the full report is reproducible bit for bit
/// regardless of scheduling. A replicate enters the selected-K histograms
/// only when all of its cells fitted.
pub fn run_recovery_study(
    scenario: &SimulationScenario,
    sampler: &SamplerConfig,
    marginal_samples: usize,
) -> Result<RecoveryReport> {
    scenario.validate()?;
    sampler.validate()?;
    let sims: Result<Vec<SimulatedPanel>> = (0..scenario.replicates)
        .map(|r| simulate_panel(scenario, r))
        .collect();
    let sims = sims?;
    let resampled_observations = sims.iter().map(|s| s.resampled).sum();
    let jobs: Vec<(usize, usize)> = (0..scenario.replicates)
        .flat_map(|r| scenario.k_grid.iter().map(move |&k| (r, k)))
        .collect();
    let results: Vec<(RecoveryCell, Vec<CoverageRecord>)> = jobs
        .par_iter()
        .map(|&(r, k)| {
            match fit_cell(scenario, &sims[r], r, k, sampler, marginal_samples) {
                Ok(cell) => (
                    RecoveryCell {
                        replicate: r,
                        k,
                        outcome: CellOutcome::Fitted(cell.metrics),
                    },
                    cell.coverage,
                ),
                Err(e) => (
                    RecoveryCell {
                        replicate: r,
                        k,
                        outcome: CellOutcome::Failed {
                            message: e.to_string(),
                        },
                    },
                    Vec::new(),
                ),
            }
        })
        .collect();
    let cells: Vec<RecoveryCell> = results.iter().map(|(c, _)| c.clone()).collect();
    let coverage: Vec<CoverageRecord> =
        results.into_iter().flat_map(|(_, cov)| cov).collect();
    let grid = &scenario.k_grid;
    let mut selected_by_bic = vec![0usize; grid.len()];
    let mut selected_by_waic = vec![0usize; grid.len()];
    let mut completed = 0usize;
    for r in 0..scenario.replicates {
        let row: Vec<&RecoveryCell> = cells.iter().filter(|c| c.replicate == r).collect();
        let metrics: Vec<(&usize, &CellMetrics)> = row
            .iter()
            .filter_map(|c| match &c.outcome {
                CellOutcome::Fitted(m) => Some((&c.k, m)),
                CellOutcome::Failed { .. } => None,
            })
            .collect();
        if metrics.len() != grid.len() {
            continue;
        }
        completed += 1;
        let argmin = |score: &dyn Fn(&CellMetrics) -> f64| -> usize {
            let mut best = 0usize;
            for (idx, (_, m)) in metrics.iter().enumerate() {
                if score(m) < score(metrics[best].1) {
                    best = idx;
                }
            }
            best
        };
        selected_by_bic[argmin(&|m| m.bic_m)] += 1;
        selected_by_waic[argmin(&|m| m.waic_c)] += 1;
    }
    let report = RecoveryReport {
        scenario: scenario.name.clone(),
        k_grid: grid.clone(),
        replicates: scenario.replicates,
        completed_replicates: completed,
        complete: completed == scenario.replicates,
        resampled_observations,
        cells,
        selected_by_bic,
        selected_by_waic,
        coverage,
    };
    report.validate()?;
    Ok(report)
}
