//! Python bindings for the blv crate: panel handling, the
//! beta-proportion distribution, model fitting with identified
//! posterior summaries, and scenario simulation.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use blv::data::{
    kendall_tau as tau_impl, load_panel, read_panel, save_panel, trend_table, MortalityPanel,
    Scale,
};
use blv::model::{initialize, BlvPosterior, ModelSpec, ParamVector, Variant};
use blv::postprocess::{align_all, pca_reference, summarize, varimax};
use blv::sampler::{chain_diagnostics, nuts_sample, SamplerConfig};
use blv::simulator::{load_scenario, simulate_panel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Matches the command-line front end so fits agree bit for bit.
const INIT_STREAM: u64 = 0x494E_4954;

fn to_py(e: blv::Error) -> PyErr {
    match e {
        blv::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A validated mortality panel: one value in (0, 1) per country, period
/// and age group.
#[pyclass(name = "Panel")]
#[derive(Clone)]
struct Panel {
    inner: MortalityPanel,
}

#[pymethods]
impl Panel {
    /// Loads a panel from a CSV file with columns
    /// country,time,age,value.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_panel(path).map_err(to_py)?,
        })
    }

    /// Parses a panel from CSV text in the same column layout.
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: read_panel(text.as_bytes()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_panel(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn countries(&self) -> Vec<String> {
        self.inner
            .series()
            .iter()
            .map(|s| s.country().to_string())
            .collect()
    }

    /// Age-group lower bounds, ascending.
    #[getter]
    fn ages(&self) -> Vec<u32> {
        self.inner
            .age_groups()
            .iter()
            .map(|a| a.lower_bound())
            .collect()
    }

    /// Observed periods per country, panel order.
    #[getter]
    fn counts(&self) -> Vec<usize> {
        self.inner.counts()
    }

    #[getter]
    fn first_times(&self) -> Vec<u32> {
        self.inner.first_times()
    }

    #[getter]
    fn n_countries(&self) -> usize {
        self.inner.n_countries()
    }

    #[getter]
    fn n_ages(&self) -> usize {
        self.inner.n_ages()
    }

    /// Value matrix of one country as nested lists, periods by ages.
    fn values(&self, country: &str) -> PyResult<Vec<Vec<f64>>> {
        let i = self
            .inner
            .country_index(country)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown country {country}")))?;
        let m = self.inner.series()[i].values();
        Ok((0..m.nrows())
            .map(|t| (0..m.ncols()).map(|x| m[(t, x)]).collect())
            .collect())
    }

    /// Kendall trend of every country-age series against time, as
    /// (country, age, tau) tuples.
    fn trends(&self) -> PyResult<Vec<(String, u32, f64)>> {
        Ok(trend_table(&self.inner)
            .map_err(to_py)?
            .into_iter()
            .map(|r| (r.country, r.age, r.tau))
            .collect())
    }

    /// Cross-age correlation matrix on the raw or logit scale.
    #[pyo3(signature = (scale = "logit"))]
    fn correlation(&self, scale: &str) -> PyResult<Vec<Vec<f64>>> {
        let scale = match scale {
            "raw" => Scale::Raw,
            "logit" => Scale::Logit,
            other => {
                return Err(PyValueError::new_err(format!(
                    "scale must be 'raw' or 'logit', got {other}"
                )))
            }
        };
        let m = self.inner.correlation_matrix(scale).map_err(to_py)?;
        Ok((0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel({} countries, {} age groups, {} rows)",
            self.inner.n_countries(),
            self.inner.n_ages(),
            self.inner.total_rows()
        )
    }
}

/// Beta distribution parameterised by mean and precision.
#[pyclass(name = "BetaProportion")]
struct BetaProportion {
    inner: blv::betaprop::BetaProp,
}

#[pymethods]
impl BetaProportion {
    #[new]
    fn new(mu: f64, kappa: f64) -> PyResult<Self> {
        Ok(Self {
            inner: blv::betaprop::BetaProp::new(mu, kappa).map_err(to_py)?,
        })
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    #[getter]
    fn precision(&self) -> f64 {
        self.inner.precision()
    }

    #[getter]
    fn variance(&self) -> f64 {
        self.inner.variance()
    }

    /// Classical (a, b) shape parameters.
    #[getter]
    fn shapes(&self) -> (f64, f64) {
        self.inner.shapes()
    }

    fn log_density(&self, y: f64) -> PyResult<f64> {
        self.inner.log_density(y).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "BetaProportion(mu={}, kappa={})",
            self.inner.mean(),
            self.inner.precision()
        )
    }
}

/// A fitted model: identified draws plus their summaries.
#[pyclass(name = "FitResult")]
struct FitResult {
    names: Vec<String>,
    index: HashMap<String, usize>,
    pooled: Vec<ParamVector>,
    summaries: Vec<(f64, f64, f64)>,
    r_hat: Vec<Option<f64>>,
    ess: Vec<Option<f64>>,
    max_r_hat: Option<f64>,
    divergences: usize,
    k: usize,
    chains: usize,
    draws_per_chain: usize,
}

#[pymethods]
impl FitResult {
    #[getter]
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.k
    }

    #[getter]
    fn chains(&self) -> usize {
        self.chains
    }

    #[getter]
    fn draws_per_chain(&self) -> usize {
        self.draws_per_chain
    }

    /// Largest split R-hat over all parameters, None for single-chain
    /// runs.
    #[getter]
    fn max_r_hat(&self) -> Option<f64> {
        self.max_r_hat
    }

    /// Divergent transitions summed over chains.
    #[getter]
    fn divergences(&self) -> usize {
        self.divergences
    }

    /// Per-parameter rows (name, mean, hpd_low, hpd_high).
    fn summary(&self) -> Vec<(String, f64, f64, f64)> {
        self.names
            .iter()
            .zip(&self.summaries)
            .map(|(n, s)| (n.clone(), s.0, s.1, s.2))
            .collect()
    }

    /// Per-parameter rows (name, r_hat, ess); entries are None for
    /// constant parameters or single-chain runs.
    fn diagnostics(&self) -> Vec<(String, Option<f64>, Option<f64>)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (
                    n.clone(),
                    self.r_hat.get(i).copied().flatten(),
                    self.ess.get(i).copied().flatten(),
                )
            })
            .collect()
    }

    /// Pooled identified draws of one named parameter.
    fn draws(&self, name: &str) -> PyResult<Vec<f64>> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown parameter {name}")))?;
        Ok(self.pooled.iter().map(|d| d.values()[idx]).collect())
    }

    /// Posterior mean loading matrix, ages by factors.
    fn loadings(&self) -> Vec<Vec<f64>> {
        let mut mean = self.pooled[0].alpha_matrix() * 0.0;
        for d in &self.pooled {
            mean += d.alpha_matrix();
        }
        mean /= self.pooled.len() as f64;
        (0..mean.nrows())
            .map(|r| (0..mean.ncols()).map(|c| mean[(r, c)]).collect())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(k={}, chains={}, draws_per_chain={}, max_r_hat={:?})",
            self.k, self.chains, self.draws_per_chain, self.max_r_hat
        )
    }
}

/// Fits the latent factor model to a panel and returns identified
/// posterior draws with summaries. Same seeded pipeline as the
/// command-line `fit`, so results agree bit for bit.
#[pyfunction]
#[pyo3(signature = (
    panel, k, *, chains = 4, iterations = 2000, warmup = 1000, thin = 1,
    seed = 0, target_accept = 0.8, max_tree_depth = 10,
    apply_varimax = false, hpd_level = 0.95,
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    panel: &Panel,
    k: usize,
    chains: usize,
    iterations: usize,
    warmup: usize,
    thin: usize,
    seed: u64,
    target_accept: f64,
    max_tree_depth: usize,
    apply_varimax: bool,
    hpd_level: f64,
) -> PyResult<FitResult> {
    py.detach(|| {
        let panel = &panel.inner;
        let config = SamplerConfig {
            chains,
            iterations,
            warmup,
            thin,
            seed,
            target_accept,
            max_tree_depth,
        };
        config.validate().map_err(to_py)?;
        let spec = ModelSpec::new(panel, k, Variant::Blv).map_err(to_py)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(INIT_STREAM);
        let inits: Result<Vec<Vec<f64>>, blv::Error> = (0..chains)
            .map(|_| Ok(initialize(&spec, panel, &mut init_rng)?.values().to_vec()))
            .collect();
        let inits = inits.map_err(to_py)?;
        let posterior = BlvPosterior::new(spec.clone(), panel).map_err(to_py)?;
        let mut outputs = nuts_sample(&posterior, &inits, &config).map_err(to_py)?;
        let layout = spec.layout();
        let raw: Result<Vec<ParamVector>, blv::Error> = outputs
            .iter()
            .flat_map(|o| o.draws.iter())
            .map(|v| ParamVector::new(layout.clone(), v.clone()))
            .collect();
        let reference = pca_reference(panel, k).map_err(to_py)?;
        let mut pooled = align_all(&raw.map_err(to_py)?, reference.matrix())
            .map_err(to_py)?
            .into_draws();
        if apply_varimax {
            let mut mean_alpha = pooled[0].alpha_matrix() * 0.0;
            for d in &pooled {
                mean_alpha += d.alpha_matrix();
            }
            mean_alpha /= pooled.len() as f64;
            let (rotated_target, _) = varimax(&mean_alpha);
            pooled = align_all(&pooled, &rotated_target)
                .map_err(to_py)?
                .into_draws();
        }
        let per_chain = config.draws_per_chain();
        for (c, o) in outputs.iter_mut().enumerate() {
            for (d, draw) in o.draws.iter_mut().enumerate() {
                draw.copy_from_slice(pooled[c * per_chain + d].values());
            }
        }
        // Convergence is judged on the identified draws; raw chains can
        // differ by factor rotations that alignment removes.
        let (r_hat, ess) = if chains >= 2 && per_chain >= 4 {
            let diags = chain_diagnostics(&outputs).map_err(to_py)?;
            (
                diags.iter().map(|d| d.r_hat).collect(),
                diags.iter().map(|d| d.ess).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let max_r_hat = r_hat
            .iter()
            .filter_map(|r: &Option<f64>| *r)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
        let summaries = summarize(&pooled, hpd_level)
            .map_err(to_py)?
            .into_iter()
            .map(|s| (s.mean, s.hpd_low, s.hpd_high))
            .collect();
        let names = layout.names();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(FitResult {
            names,
            index,
            pooled,
            summaries,
            r_hat,
            ess,
            max_r_hat,
            divergences: outputs.iter().map(|o| o.divergences).sum(),
            k,
            chains,
            draws_per_chain: per_chain,
        })
    })
}

/// Kendall rank correlation of a series against time.
#[pyfunction]
fn kendall_tau(series: Vec<f64>) -> PyResult<f64> {
    tau_impl(&series).map_err(to_py)
}

/// Draws one synthetic replicate panel from a scenario file,
/// deterministic in (scenario seed, replicate).
#[pyfunction]
#[pyo3(signature = (scenario_path, replicate = 0))]
fn simulate(scenario_path: &str, replicate: usize) -> PyResult<Panel> {
    let scenario = load_scenario(scenario_path).map_err(to_py)?;
    let sim = simulate_panel(&scenario, replicate).map_err(to_py)?;
    Ok(Panel { inner: sim.panel })
}

#[pymodule]
fn blv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Panel>()?;
    m.add_class::<BetaProportion>()?;
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
