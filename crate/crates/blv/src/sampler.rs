//! Multi-chain sampling driver: warmup adaptation schedule, thinning,
//! parallel chains with per-chain RNG streams, and post-run summaries.
//!
//! Warmup follows the usual three-phase layout: a fast initial buffer
//! adapting only the step size, doubling "slow" windows that estimate
//! the diagonal inverse mass from the visited positions, and a fast
//! terminal buffer to settle the step size against the final metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diagnostics::{diagnose, ScalarDiagnostics};
use crate::error::{Error, Result};
use crate::nuts::{
    find_reasonable_epsilon, transition, DualAveraging, RunningVariance, Target,
};

/// Run settings for one sampling job.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total transitions per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    /// Keep every `thin`-th post-warmup draw.
    pub thin: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            thin: 1,
            seed: 0,
            target_accept: 0.8,
            max_tree_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::InvalidArgument("need at least one chain".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::InvalidArgument(format!(
                "warmup {} must be below total iterations {}",
                self.warmup, self.iterations
            )));
        }
        if self.thin < 1 {
            return Err(Error::InvalidArgument("thinning stride must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target acceptance {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        if self.max_tree_depth < 1 {
            return Err(Error::InvalidArgument("tree depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.warmup) / self.thin
    }
}

/// Everything one chain produces.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Post-warmup thinned positions, one flat vector per draw.
    pub draws: Vec<Vec<f64>>,
    /// Log density of each retained draw.
    pub log_densities: Vec<f64>,
    /// Mean Metropolis statistic over the sampling phase.
    pub accept_mean: f64,
    /// Divergent transitions in the sampling phase.
    pub divergences: usize,
    /// Set when more than a tenth of post-warmup transitions diverged.
    pub divergence_warning: bool,
    /// Step size used in the sampling phase.
    pub step_size: f64,
    /// Adapted diagonal of the inverse mass matrix.
    pub inv_mass_diag: Vec<f64>,
}

/// Warmup phase boundaries, all counters relative to the warmup span.
struct WarmupSchedule {
    init_buffer: usize,
    slow_end: usize,
    window_ends: Vec<usize>,
}

impl WarmupSchedule {
    fn new(warmup: usize) -> Self {
        // Too short to estimate a metric: adapt the step size only.
        if warmup < 20 {
            return Self {
                init_buffer: warmup,
                slow_end: warmup,
                window_ends: Vec::new(),
            };
        }
        let (init_buffer, term_buffer, base_window) = if warmup < 150 {
            let init = (0.15 * warmup as f64) as usize;
            let term = (0.10 * warmup as f64) as usize;
            (init, term, warmup - init - term)
        } else {
            (75, 50, 25)
        };
        let slow_end = warmup - term_buffer;
        let mut window_ends = Vec::new();
        let mut start = init_buffer;
        let mut size = base_window;
        while start < slow_end {
            let end = start + size;
            // When the next doubling would overshoot, extend to the end.
            if end >= slow_end || end + 2 * size > slow_end {
                window_ends.push(slow_end);
                break;
            }
            window_ends.push(end);
            start = end;
            size *= 2;
        }
        Self {
            init_buffer,
            slow_end,
            window_ends,
        }
    }

    fn in_slow_window(&self, iter: usize) -> bool {
        iter >= self.init_buffer && iter < self.slow_end
    }

    /// True right after the transition completing window `iter + 1`.
    fn at_window_end(&self, iter: usize) -> bool {
        self.window_ends.contains(&(iter + 1))
    }
}

fn run_chain(
    target: &dyn Target,
    init: &[f64],
    config: &SamplerConfig,
    chain_index: usize,
) -> ChainOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_index as u64);
    let dim = target.dim();

    let mut inv_mass = vec![1.0; dim];
    let mut position = init.to_vec();
    let mut eps = find_reasonable_epsilon(target, &mut rng, &position, &inv_mass);
    let mut averaging = DualAveraging::new(eps, config.target_accept);
    let schedule = WarmupSchedule::new(config.warmup);
    let mut variance = RunningVariance::new(dim);

    let post = config.iterations - config.warmup;
    let mut draws = Vec::with_capacity(config.draws_per_chain());
    let mut log_densities = Vec::with_capacity(config.draws_per_chain());
    let mut divergences = 0usize;
    let mut accept_sum = 0.0;

    for iter in 0..config.iterations {
        let t = transition(
            target,
            &mut rng,
            &position,
            eps,
            &inv_mass,
            config.max_tree_depth,
        );
        position = t.position;

        if iter < config.warmup {
            eps = averaging.learn(t.accept_stat);
            if schedule.in_slow_window(iter) {
                variance.add(&position);
            }
            if schedule.at_window_end(iter) && variance.count() >= 2 {
                inv_mass = variance.regularized();
                variance.reset();
                eps = find_reasonable_epsilon(target, &mut rng, &position, &inv_mass);
                averaging.restart(eps);
            }
            if iter + 1 == config.warmup {
                eps = averaging.completed();
            }
        } else {
            accept_sum += t.accept_stat;
            if t.divergent {
                divergences += 1;
            }
            if (iter - config.warmup + 1) % config.thin == 0 {
                draws.push(position.clone());
                log_densities.push(t.logp);
            }
        }
    }

    ChainOutput {
        draws,
        log_densities,
        accept_mean: if post == 0 {
            0.0
        } else {
            accept_sum / post as f64
        },
        divergences,
        divergence_warning: divergences * 10 > post,
        step_size: eps,
        inv_mass_diag: inv_mass,
    }
}

/// Samples `config.chains` chains in parallel, one initial point per
/// chain. Fails upfront if any initial point is out of support.
pub fn nuts_sample<T: Target>(
    target: &T,
    inits: &[Vec<f64>],
    config: &SamplerConfig,
) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    if inits.len() != config.chains {
        return Err(Error::InvalidArgument(format!(
            "{} initial points for {} chains",
            inits.len(),
            config.chains
        )));
    }
    let dim = target.dim();
    for (c, init) in inits.iter().enumerate() {
        if init.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "chain {c}: initial point has dimension {}, target needs {dim}",
                init.len()
            )));
        }
        let mut grad = vec![0.0; dim];
        let lp = target.logp_grad(init, &mut grad);
        if !lp.is_finite() {
            return Err(Error::Sampler(format!(
                "chain {c}: non-finite log density at the initial point"
            )));
        }
    }
    Ok((0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, &inits[c], config, c))
        .collect())
}

/// Per-parameter convergence diagnostics across chains.
pub fn chain_diagnostics(outputs: &[ChainOutput]) -> Result<Vec<ScalarDiagnostics>> {
    if outputs.is_empty() || outputs[0].draws.is_empty() {
        return Err(Error::InvalidInput(
            "diagnostics need non-empty chains".into(),
        ));
    }
    let dim = outputs[0].draws[0].len();
    let mut result = Vec::with_capacity(dim);
    for p in 0..dim {
        let series: Vec<Vec<f64>> = outputs
            .iter()
            .map(|c| c.draws.iter().map(|d| d[p]).collect())
            .collect();
        let views: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        result.push(diagnose(&views)?);
    }
    Ok(result)
}
