//! Model choice and fit evaluation.
//!
//! Covers the marginal-likelihood route to BIC (latent effects integrated
//! out by importance sampling), WAIC on the conditional likelihood,
//! posterior predictive reconstruction of the mortality surface, and
//! distance-based evaluation including the cophenetic rank correlation
//! between observed and latent geometry.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::betaprop::BetaProp;
use crate::data::{inv_logit, MortalityPanel};
use crate::error::{Error, Result};
use crate::model::{expected_mortality, latent_states, ModelSpec, ParamVector, Variant};
use crate::postprocess::{summarize_scalar, ParameterSummary};
use crate::special::HALF_LN_TWO_PI;

/// Importance-weight effective sample sizes below this fraction of the
/// Monte Carlo size mark a country as unreliable.
const WEIGHT_ESS_FRACTION: f64 = 0.01;

/// Initial diagonal jitter for a non-positive-definite proposal covariance.
const BASE_JITTER: f64 = 1e-8;

/// Per-observation log-density variances above this value flag the WAIC
/// reliability caveat.
const WAIC_VARIANCE_FLAG: f64 = 0.4;

/// Log marginal likelihood assembled from independent per-country terms.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MarginalLikelihoodEstimate {
    /// Per-country log marginal contributions, panel order.
    pub per_country: Vec<f64>,
    /// Delta-method Monte Carlo standard error of each log contribution.
    pub per_country_se: Vec<f64>,
    /// Effective sample size of the importance weights per country.
    pub weight_ess: Vec<f64>,
    /// Countries whose weight ESS fell below 1% of the sample size.
    pub low_ess_countries: Vec<usize>,
    /// Count of (country, period) proposal blocks that needed jitter.
    pub jittered_blocks: usize,
    /// Largest diagonal jitter applied to any proposal covariance.
    pub max_jitter: f64,
    /// Monte Carlo sample size per country.
    pub sample_size: usize,
    /// Sum of the per-country contributions.
    pub total: f64,
}

impl MarginalLikelihoodEstimate {
    /// Human-readable reliability warnings, empty when clean.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.jittered_blocks > 0 {
            out.push(format!(
                "{} proposal covariance block(s) regularized with diagonal jitter up to {:.1e}",
                self.jittered_blocks, self.max_jitter
            ));
        }
        for &i in &self.low_ess_countries {
            out.push(format!(
                "importance weights for country index {i} are degenerate: ESS {:.1} of {} draws",
                self.weight_ess[i], self.sample_size
            ));
        }
        out
    }
}

/// Coordinate-wise mean of draws on the unconstrained scale.
///
/// Nonlinearly transformed scalars (precision, autocorrelation, innovation
/// scales) are averaged before their transforms, which keeps the mean
/// inside the parameter space.
pub fn posterior_mean_params(draws: &[ParamVector]) -> Result<ParamVector> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no draws to average".into()));
    }
    let layout = draws[0].layout().clone();
    let dim = layout.len();
    if draws.iter().any(|d| d.layout().len() != dim) {
        return Err(Error::InvalidInput(
            "draws disagree on parameter dimension".into(),
        ));
    }
    let mut mean = vec![0.0; dim];
    for draw in draws {
        for (m, v) in mean.iter_mut().zip(draw.values()) {
            *m += v;
        }
    }
    let s = draws.len() as f64;
    for m in &mut mean {
        *m /= s;
    }
    ParamVector::new(layout, mean)
}

/// Mean and Cholesky factor of one latent proposal block.
struct ProposalBlock {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det_l: f64,
    jitter: f64,
}

fn proposal_block(draws: &[ParamVector], i: usize, t: usize) -> Result<ProposalBlock> {
    let layout = draws[0].layout();
    let k = layout.k();
    let s = draws.len();
    let mut mean = DVector::zeros(k);
    for d in draws {
        for f in 0..k {
            mean[f] += d.values()[layout.latent(i, t, f)];
        }
    }
    mean /= s as f64;
    let mut cov = DMatrix::zeros(k, k);
    for d in draws {
        let centred =
            DVector::from_fn(k, |f, _| d.values()[layout.latent(i, t, f)] - mean[f]);
        cov += &centred * centred.transpose();
    }
    if s > 1 {
        cov /= (s - 1) as f64;
    }
    let mut jitter = 0.0;
    loop {
        let mut attempt = cov.clone();
        for d in 0..k {
            attempt[(d, d)] += jitter;
        }
        if let Some(chol) = Cholesky::new(attempt) {
            let log_det_l = (0..k).map(|d| chol.l_dirty()[(d, d)].ln()).sum();
            return Ok(ProposalBlock {
                mean,
                chol,
                log_det_l,
                jitter,
            });
        }
        jitter = if jitter == 0.0 { BASE_JITTER } else { jitter * 10.0 };
        if jitter > 1.0 {
            return Err(Error::Degenerate(format!(
                "proposal covariance for country {i}, period {t} is not positive definite"
            )));
        }
    }
}

/// Fixed model parameters for the conditional likelihood of one country.
struct CountryModel {
    alpha: DMatrix<f64>,
    beta: Vec<f64>,
    kappa: f64,
    phi: f64,
    sigma: f64,
    scale0: f64,
    values: DMatrix<f64>,
}

impl CountryModel {
    /// Conditional log likelihood of the country's observations given the
    /// latent increments `z` (one K-vector per period). Returns negative
    /// infinity when the likelihood underflows the representable range.
    fn conditional_loglik(&self, z: &[DVector<f64>]) -> f64 {
        let (ni, j) = self.values.shape();
        let k = self.alpha.ncols();
        let mut theta = DVector::zeros(k);
        let mut total = 0.0;
        for t in 0..ni {
            for f in 0..k {
                theta[f] = if t == 0 {
                    self.scale0 * z[0][f]
                } else {
                    self.phi * theta[f] + self.sigma * z[t][f]
                };
            }
            for x in 0..j {
                let mut eta = self.beta[x];
                for f in 0..k {
                    eta += self.alpha[(x, f)] * theta[f];
                }
                let mu = inv_logit(eta);
                let lp = BetaProp::new(mu, self.kappa)
                    .and_then(|d| d.log_density(self.values[(t, x)]));
                match lp {
                    Ok(v) => total += v,
                    Err(_) => return f64::NEG_INFINITY,
                }
            }
        }
        total
    }
}

/// Importance-sampled log marginal likelihood with latent effects
/// integrated out.
///
/// Parameters are fixed at their posterior means on the unconstrained
/// scale. Each country's latent block is integrated with `m` joint
/// proposals drawn from per-period multivariate normal distributions
/// matched to the posterior mean and covariance of that block; weights
/// are combined by log-sum-exp and the standard error comes from the
/// delta method on the log of the weight mean. Countries are processed
/// in parallel with per-country deterministic random streams.
pub fn is_marginal_loglik(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    draws: &[ParamVector],
    m: usize,
    seed: u64,
) -> Result<MarginalLikelihoodEstimate> {
    if spec.variant() != Variant::Blv {
        return Err(Error::InvalidInput(
            "marginal likelihood integration applies to the latent autoregressive model".into(),
        ));
    }
    spec.matches_panel(panel)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws supplied".into()));
    }
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "Monte Carlo sample size {m} is too small"
        )));
    }
    let expect_len = spec.layout().len();
    if draws.iter().any(|d| d.layout().len() != expect_len) {
        return Err(Error::InvalidInput(
            "draw dimension does not match the model spec".into(),
        ));
    }
    let mean_params = posterior_mean_params(draws)?;
    let k = spec.k();
    let n = spec.n_countries();

    struct CountryTerm {
        log_marginal: f64,
        se: f64,
        ess: f64,
        jittered: usize,
        max_jitter: f64,
    }

    let terms: Result<Vec<CountryTerm>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ni = spec.counts()[i];
            let mut blocks = Vec::with_capacity(ni);
            for t in 0..ni {
                blocks.push(proposal_block(draws, i, t)?);
            }
            let jittered = blocks.iter().filter(|b| b.jitter > 0.0).count();
            let max_jitter = blocks.iter().map(|b| b.jitter).fold(0.0, f64::max);
            let phi = mean_params.phi(i);
            let sigma = mean_params.sigma(i);
            let one_minus = 1.0 - phi * phi;
            if one_minus <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "posterior mean autocorrelation for country {i} is at the unit boundary"
                )));
            }
            let model = CountryModel {
                alpha: mean_params.alpha_matrix(),
                beta: (0..spec.n_ages()).map(|x| mean_params.beta(x)).collect(),
                kappa: mean_params.log_kappa().exp(),
                phi,
                sigma,
                scale0: sigma / one_minus.sqrt(),
                values: panel.series()[i].values().clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut log_weights = Vec::with_capacity(m);
            let mut z = vec![DVector::zeros(k); ni];
            for _ in 0..m {
                // log w = loglik(z) - |z|^2/2 + sum log det L + |u|^2/2;
                // the normalizing constants of prior and proposal cancel.
                let mut correction = 0.0;
                for (t, block) in blocks.iter().enumerate() {
                    let u = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                    correction += 0.5 * u.norm_squared() + block.log_det_l;
                    let zt = &block.mean + block.chol.l_dirty().lower_triangle() * u;
                    correction -= 0.5 * zt.norm_squared();
                    z[t] = zt;
                }
                log_weights.push(model.conditional_loglik(&z) + correction);
            }
            let peak = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !peak.is_finite() {
                return Err(Error::NoConvergence(format!(
                    "all importance weights for country {i} underflowed"
                )));
            }
            let scaled: Vec<f64> = log_weights.iter().map(|lw| (lw - peak).exp()).collect();
            let sum: f64 = scaled.iter().sum();
            let sum_sq: f64 = scaled.iter().map(|a| a * a).sum();
            let mean = sum / m as f64;
            let var = scaled
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (m - 1) as f64;
            let se = (var / m as f64).sqrt() / mean;
            let ess = sum * sum / sum_sq;
            Ok(CountryTerm {
                log_marginal: peak + mean.ln(),
                se,
                ess,
                jittered,
                max_jitter,
            })
        })
        .collect();
    let terms = terms?;
    let per_country: Vec<f64> = terms.iter().map(|t| t.log_marginal).collect();
    let per_country_se: Vec<f64> = terms.iter().map(|t| t.se).collect();
    let weight_ess: Vec<f64> = terms.iter().map(|t| t.ess).collect();
    let low_ess_countries: Vec<usize> = weight_ess
        .iter()
        .enumerate()
        .filter(|(_, &ess)| ess < WEIGHT_ESS_FRACTION * m as f64)
        .map(|(i, _)| i)
        .collect();
    Ok(MarginalLikelihoodEstimate {
        total: per_country.iter().sum(),
        per_country,
        per_country_se,
        weight_ess,
        low_ess_countries,
        jittered_blocks: terms.iter().map(|t| t.jittered).sum(),
        max_jitter: terms.iter().map(|t| t.max_jitter).fold(0.0, f64::max),
        sample_size: m,
    })
}

/// Marginal-likelihood BIC: `-2 log p + v log(n)`.
///
/// `v` counts only structural parameters (latent effects are integrated
/// out of `log_marginal`); `n` counts scalar observations.
pub fn bic_m(log_marginal: f64, v: usize, n_obs: f64) -> f64 {
    -2.0 * log_marginal + v as f64 * n_obs.ln()
}

/// WAIC on the conditional likelihood.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    /// Log pointwise predictive density, summed over observations.
    pub lppd: f64,
    /// Effective parameter count (sum of per-observation variances).
    pub p_waic: f64,
    /// Observations whose log-density variance exceeds the reliability
    /// threshold 0.4.
    pub flagged: usize,
}

/// Streaming per-observation moments across draws.
struct ObsAccumulator {
    peak: f64,
    sum_exp: f64,
    count: usize,
    mean: f64,
    m2: f64,
}

impl ObsAccumulator {
    fn new() -> Self {
        Self {
            peak: f64::NEG_INFINITY,
            sum_exp: 0.0,
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, lp: f64) {
        if lp > self.peak {
            self.sum_exp = self.sum_exp * (self.peak - lp).exp() + 1.0;
            self.peak = lp;
        } else {
            self.sum_exp += (lp - self.peak).exp();
        }
        self.count += 1;
        let delta = lp - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (lp - self.mean);
    }

    fn log_mean_density(&self) -> f64 {
        self.peak + (self.sum_exp / self.count as f64).ln()
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// Per-draw, per-observation conditional log densities fed to a visitor in
/// a fixed (country, period, age) order.
fn per_obs_log_densities(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    draw: &ParamVector,
    mut visit: impl FnMut(usize, f64),
) -> Result<()> {
    match spec.variant() {
        Variant::Blv => {
            let mu = expected_mortality(spec, draw)?;
            let kappa = draw.log_kappa().exp();
            let mut obs = 0;
            for (i, series) in panel.series().iter().enumerate() {
                for t in 0..series.len() {
                    for x in 0..spec.n_ages() {
                        let lp = BetaProp::new(mu[i][(t, x)], kappa)?
                            .log_density(series.value(t, x))?;
                        visit(obs, lp);
                        obs += 1;
                    }
                }
            }
        }
        Variant::Bfa => {
            let centred = panel.logit_matrix(true);
            let layout = draw.layout();
            let mut row = 0;
            let mut obs = 0;
            for i in 0..spec.n_countries() {
                for t in 0..spec.counts()[i] {
                    for x in 0..spec.n_ages() {
                        let mut fit = 0.0;
                        for f in 0..spec.k() {
                            fit += draw.alpha(x, f) * draw.latent(i, t, f);
                        }
                        let psi = draw.values()[layout.log_psi(x)].exp();
                        let resid = centred[(row, x)] - fit;
                        let lp = -0.5 * resid * resid / psi
                            - 0.5 * psi.ln()
                            - HALF_LN_TWO_PI;
                        visit(obs, lp);
                        obs += 1;
                    }
                }
                row += spec.counts()[i];
            }
            debug_assert_eq!(row, centred.nrows());
        }
    }
    Ok(())
}

/// WAIC from the conditional likelihood of each observation.
///
/// `waic = -2 (lppd - p_waic)` with `lppd` the summed log of the
/// draw-averaged densities and `p_waic` the summed per-observation
/// variance of the log densities. A single draw yields `p_waic = 0`.
pub fn waic_c(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    draws: &[ParamVector],
) -> Result<WaicResult> {
    spec.matches_panel(panel)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws supplied".into()));
    }
    let n_obs = panel.n_obs();
    let mut acc: Vec<ObsAccumulator> = (0..n_obs).map(|_| ObsAccumulator::new()).collect();
    for draw in draws {
        per_obs_log_densities(spec, panel, draw, |obs, lp| acc[obs].push(lp))?;
    }
    let lppd: f64 = acc.iter().map(|a| a.log_mean_density()).sum();
    let p_waic: f64 = acc.iter().map(|a| a.variance()).sum();
    let flagged = acc
        .iter()
        .filter(|a| a.variance() > WAIC_VARIANCE_FLAG)
        .count();
    Ok(WaicResult {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        flagged,
    })
}

/// Posterior predictive mean of the mortality surface, one `N_i x J`
/// matrix per country.
///
/// The observation mean equals the model's `mu`, so the predictive mean
/// is the draw average of `mu` without simulating observation noise. For
/// the Gaussian baseline the fitted centred logits are mapped back
/// through the stored column means before the inverse logit.
pub fn posterior_predict_mean(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    draws: &[ParamVector],
) -> Result<Vec<DMatrix<f64>>> {
    spec.matches_panel(panel)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws supplied".into()));
    }
    let mut acc: Vec<DMatrix<f64>> = spec
        .counts()
        .iter()
        .map(|&ni| DMatrix::zeros(ni, spec.n_ages()))
        .collect();
    let col_means = panel.logit_column_means();
    for draw in draws {
        match spec.variant() {
            Variant::Blv => {
                let mu = expected_mortality(spec, draw)?;
                for (a, m) in acc.iter_mut().zip(mu) {
                    *a += m;
                }
            }
            Variant::Bfa => {
                for (i, a) in acc.iter_mut().enumerate() {
                    for t in 0..spec.counts()[i] {
                        for x in 0..spec.n_ages() {
                            let mut fit = col_means[x];
                            for f in 0..spec.k() {
                                fit += draw.alpha(x, f) * draw.latent(i, t, f);
                            }
                            a[(t, x)] += inv_logit(fit);
                        }
                    }
                }
            }
        }
    }
    let s = draws.len() as f64;
    for a in &mut acc {
        *a /= s;
        if a.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::Degenerate(
                "posterior predictive mortality saturated the unit interval".into(),
            ));
        }
    }
    Ok(acc)
}

/// Draw-averaged latent state paths, one `N_i x K` matrix per country.
pub fn latent_mean_states(spec: &ModelSpec, draws: &[ParamVector]) -> Result<Vec<DMatrix<f64>>> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws supplied".into()));
    }
    let mut acc: Vec<DMatrix<f64>> = spec
        .counts()
        .iter()
        .map(|&ni| DMatrix::zeros(ni, spec.k()))
        .collect();
    for draw in draws {
        match spec.variant() {
            Variant::Blv => {
                let states = latent_states(spec, draw)?;
                for (a, s) in acc.iter_mut().zip(states) {
                    *a += s;
                }
            }
            Variant::Bfa => {
                for (i, a) in acc.iter_mut().enumerate() {
                    for t in 0..spec.counts()[i] {
                        for f in 0..spec.k() {
                            a[(t, f)] += draw.latent(i, t, f);
                        }
                    }
                }
            }
        }
    }
    let s = draws.len() as f64;
    for a in &mut acc {
        *a /= s;
    }
    Ok(acc)
}

/// Root-mean-square error and mean absolute percentage error between the
/// predictive surface and the observed panel, over all observations.
pub fn fit_metrics(q_hat: &[DMatrix<f64>], panel: &MortalityPanel) -> Result<(f64, f64)> {
    if q_hat.len() != panel.n_countries() {
        return Err(Error::InvalidInput(
            "predictive surface does not cover every country".into(),
        ));
    }
    let mut sq = 0.0;
    let mut ape = 0.0;
    let mut n = 0usize;
    for (series, pred) in panel.series().iter().zip(q_hat) {
        if pred.shape() != series.values().shape() {
            return Err(Error::InvalidInput(format!(
                "predictive surface shape {:?} does not match country {}",
                pred.shape(),
                series.country()
            )));
        }
        for (q_hat, q) in pred.iter().zip(series.values().iter()) {
            let diff = q_hat - q;
            sq += diff * diff;
            ape += (diff / q).abs();
            n += 1;
        }
    }
    let n = n as f64;
    Ok(((sq / n).sqrt(), 100.0 * ape / n))
}

/// Distance-space fit metrics and the cophenetic rank correlation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DistanceMetrics {
    pub rmse_d: f64,
    pub mape_d: f64,
    /// Spearman correlation between observed-space and latent-space
    /// pairwise distances.
    pub cophenetic: f64,
}

/// Stacks per-country row matrices into (global row index -> row vector).
pub(crate) fn stacked_rows(mats: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let mut rows = Vec::new();
    for m in mats {
        for r in 0..m.nrows() {
            rows.push(m.row(r).transpose());
        }
    }
    rows
}

/// Euclidean distances over all unordered row pairs, lexicographic order.
pub(crate) fn pairwise_distances(rows: &[DVector<f64>]) -> Vec<f64> {
    let r = rows.len();
    (0..r)
        .into_par_iter()
        .flat_map_iter(|a| {
            let rows = &rows;
            (a + 1..r).map(move |b| (&rows[a] - &rows[b]).norm())
        })
        .collect()
}

/// Compares predicted and latent geometry against the observed panel.
///
/// Distances are Euclidean across all age groups between every unordered
/// pair of country-period rows, including pairs from different countries
/// and periods.
pub fn distance_metrics(
    panel: &MortalityPanel,
    q_hat: &[DMatrix<f64>],
    theta_hat: &[DMatrix<f64>],
) -> Result<DistanceMetrics> {
    let observed: Vec<DMatrix<f64>> = panel
        .series()
        .iter()
        .map(|s| s.values().clone())
        .collect();
    let obs_rows = stacked_rows(&observed);
    let pred_rows = stacked_rows(q_hat);
    let lat_rows = stacked_rows(theta_hat);
    if pred_rows.len() != obs_rows.len() || lat_rows.len() != obs_rows.len() {
        return Err(Error::InvalidInput(
            "row counts of predictions, latent states and panel disagree".into(),
        ));
    }
    if obs_rows.len() < 3 {
        return Err(Error::InvalidInput(
            "distance metrics need at least three country-period rows".into(),
        ));
    }
    let d_obs = pairwise_distances(&obs_rows);
    let d_pred = pairwise_distances(&pred_rows);
    let d_lat = pairwise_distances(&lat_rows);
    let mut sq = 0.0;
    let mut ape = 0.0;
    for (o, p) in d_obs.iter().zip(&d_pred) {
        if *o == 0.0 {
            return Err(Error::Degenerate(
                "two observation rows coincide; relative distance error undefined".into(),
            ));
        }
        let diff = p - o;
        sq += diff * diff;
        ape += (diff / o).abs();
    }
    let pairs = d_obs.len() as f64;
    Ok(DistanceMetrics {
        rmse_d: (sq / pairs).sqrt(),
        mape_d: 100.0 * ape / pairs,
        cophenetic: spearman(&d_obs, &d_lat)?,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && values[idx[end]] == values[idx[pos]] {
            end += 1;
        }
        let rank = (pos + 1 + end) as f64 / 2.0;
        for &orig in &idx[pos..end] {
            ranks[orig] = rank;
        }
        pos = end;
    }
    ranks
}

/// Spearman rank correlation.
///
/// Invariant under strictly increasing transforms of either argument.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(
            "rank correlation needs two equally long series".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "rank correlation input contains non-finite values".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Degenerate(
            "rank correlation undefined for a constant series".into(),
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Posterior mean and 95% HPD interval of the log precision.
pub fn log_kappa_summary(draws: &[ParamVector]) -> Result<ParameterSummary> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no posterior draws supplied".into()));
    }
    if draws[0].layout().variant() != Variant::Blv {
        return Err(Error::InvalidInput(
            "the Gaussian baseline has no shared precision parameter".into(),
        ));
    }
    let values: Vec<f64> = draws.iter().map(|d| d.log_kappa()).collect();
    summarize_scalar(&values, 0.95)
}

/// Model-choice and fit row for one factor count.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub log_marginal: f64,
    pub log_marginal_se: f64,
    pub bic_m: f64,
    pub waic_c: f64,
    pub log_kappa_mean: f64,
    pub log_kappa_hpd_low: f64,
    pub log_kappa_hpd_high: f64,
    pub rmse_q: f64,
    pub mape_q: f64,
    pub rmse_d: f64,
    pub mape_d: f64,
    pub cophenetic: f64,
}

/// One row per candidate factor count, ordered by `k`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
}

impl SelectionReport {
    /// Rejects reports with non-finite entries.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let fields = [
                row.log_marginal,
                row.log_marginal_se,
                row.bic_m,
                row.waic_c,
                row.log_kappa_mean,
                row.log_kappa_hpd_low,
                row.log_kappa_hpd_high,
                row.rmse_q,
                row.mape_q,
                row.rmse_d,
                row.mape_d,
                row.cophenetic,
            ];
            if fields.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "selection row for K={} contains non-finite entries",
                    row.k
                )));
            }
        }
        Ok(())
    }

    /// Row with the smallest BIC.
    pub fn best_by_bic(&self) -> Option<&SelectionRow> {
        self.rows
            .iter()
            .min_by(|a, b| a.bic_m.partial_cmp(&b.bic_m).unwrap_or(std::cmp::Ordering::Equal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AgeGroup;
    use crate::model::PriorScales;
    use rand::Rng;

    fn toy_panel() -> MortalityPanel {
        let ages = vec![
            AgeGroup::new(0).unwrap(),
            AgeGroup::new(40).unwrap(),
            AgeGroup::new(80).unwrap(),
        ];
        let a = MortalityPanel::series_from_matrix(
            "AAA",
            1,
            DMatrix::from_row_slice(
                3,
                3,
                &[0.02, 0.05, 0.30, 0.018, 0.055, 0.32, 0.016, 0.05, 0.31],
            ),
        );
        let b = MortalityPanel::series_from_matrix(
            "BBB",
            2,
            DMatrix::from_row_slice(2, 3, &[0.03, 0.07, 0.25, 0.028, 0.068, 0.27]),
        );
        MortalityPanel::new(ages, vec![a, b]).unwrap()
    }

    fn draw_with(spec: &ModelSpec, fill: impl Fn(usize) -> f64) -> ParamVector {
        let layout = spec.layout();
        let values: Vec<f64> = (0..layout.len()).map(fill).collect();
        ParamVector::new(layout, values).unwrap()
    }

    #[test]
    fn bic_formula_and_penalty_arithmetic() {
        let bic = bic_m(-100.0, 10, std::f64::consts::E);
        assert!((bic - 210.0).abs() < 1e-10, "got {bic}");
        let panel = toy_panel();
        let v2 = ModelSpec::new(&panel, 2, Variant::Blv)
            .unwrap()
            .layout()
            .structural_param_count();
        let v3 = ModelSpec::new(&panel, 3, Variant::Blv)
            .unwrap()
            .layout()
            .structural_param_count();
        // Raising K by one adds J loading parameters and nothing else.
        assert_eq!(v3 - v2, panel.n_ages());
        let n = panel.n_obs() as f64;
        let delta = bic_m(-50.0, v3, n) - bic_m(-50.0, v2, n);
        assert!((delta - panel.n_ages() as f64 * n.ln()).abs() < 1e-10);
    }

    #[test]
    fn bic_ordering_ignores_common_log_marginal_shifts() {
        let logml = [-120.0, -100.0, -110.0];
        let rank = |shift: f64| {
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&a, &b| {
                bic_m(logml[a] + shift, 10, 500.0)
                    .partial_cmp(&bic_m(logml[b] + shift, 10, 500.0))
                    .unwrap()
            });
            idx
        };
        assert_eq!(rank(0.0), rank(37.5));
        assert_eq!(rank(0.0), rank(-1000.0));
    }

    /// With all loadings at zero the likelihood does not depend on the
    /// latent increments, and a draw cloud whose sample moments are
    /// exactly standard makes the proposal coincide with the prior, so
    /// the weights are constant and the estimate equals the conditional
    /// likelihood with zero Monte Carlo error.
    #[test]
    fn marginal_is_exact_when_loadings_vanish() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let s = 8usize;
        // Balanced +/- columns scaled so the sample variance (denominator
        // s - 1) is exactly one and the mean exactly zero.
        let a = ((s - 1) as f64 / s as f64).sqrt();
        let mut draws = Vec::new();
        for d in 0..s {
            let mut draw = draw_with(&spec, |_| 0.0);
            {
                let values = draw.values_mut();
                values[layout.beta(0)] = -3.0;
                values[layout.beta(1)] = -2.4;
                values[layout.beta(2)] = -0.8;
                values[layout.log_kappa()] = 50.0f64.ln();
                for i in 0..2 {
                    values[layout.u_phi(i)] = 0.4;
                    values[layout.log_sigma(i)] = -0.5;
                }
                let mut coord = 0;
                for i in 0..2 {
                    for t in 0..spec.counts()[i] {
                        // Balanced sign pattern: each coordinate sees an
                        // equal number of +a and -a across the draws.
                        let flip = if (d + coord) % 2 == 0 { 1.0 } else { -1.0 };
                        values[layout.latent(i, t, 0)] = a * flip;
                        coord += 1;
                    }
                }
            }
            draws.push(draw);
        }
        let est = is_marginal_loglik(&spec, &panel, &draws, 64, 9).unwrap();
        // Conditional likelihood at mu = inv_logit(beta), kappa = 50.
        let mut want_total = 0.0;
        let betas = [-3.0, -2.4, -0.8];
        for (i, series) in panel.series().iter().enumerate() {
            let mut want = 0.0;
            for t in 0..series.len() {
                for x in 0..3 {
                    want += BetaProp::new(inv_logit(betas[x]), 50.0)
                        .unwrap()
                        .log_density(series.value(t, x))
                        .unwrap();
                }
            }
            assert!(
                (est.per_country[i] - want).abs() < 1e-10,
                "country {i}: {} vs {want}",
                est.per_country[i]
            );
            assert!(est.per_country_se[i] < 1e-12, "weights should be constant");
            want_total += want;
        }
        assert!((est.total - want_total).abs() < 1e-9);
        assert_eq!(est.jittered_blocks, 0);
        assert!(est.low_ess_countries.is_empty());
        // Constant weights give full effective sample size.
        for &ess in &est.weight_ess {
            assert!((ess - 64.0).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_reports_jitter_for_a_degenerate_draw_cloud() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        // Identical draws: every latent block has zero covariance.
        let mut draw = draw_with(&spec, |_| 0.0);
        {
            let values = draw.values_mut();
            for x in 0..3 {
                values[layout.alpha(x, 0)] = 0.3;
                values[layout.beta(x)] = -2.0;
            }
            values[layout.log_kappa()] = 100.0f64.ln();
            for i in 0..2 {
                values[layout.u_phi(i)] = 0.2;
                values[layout.log_sigma(i)] = -0.7;
            }
        }
        let draws = vec![draw; 6];
        let est = is_marginal_loglik(&spec, &panel, &draws, 32, 11).unwrap();
        assert_eq!(est.jittered_blocks, 5, "every (country, period) block");
        assert!((est.max_jitter - BASE_JITTER).abs() < 1e-20);
        assert!(est.total.is_finite());
        assert!(!est.warnings().is_empty());
    }

    #[test]
    fn marginal_warns_on_degenerate_weights() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // A draw cloud whose latent spread is far wider than the prior
        // makes most proposals land where the integrand vanishes.
        let draws: Vec<ParamVector> = (0..200)
            .map(|_| {
                let mut draw = draw_with(&spec, |_| 0.0);
                {
                    let values = draw.values_mut();
                    for x in 0..3 {
                        values[layout.alpha(x, 0)] = 0.5;
                        values[layout.beta(x)] = -2.0;
                    }
                    values[layout.log_kappa()] = 200.0f64.ln();
                    for i in 0..2 {
                        values[layout.u_phi(i)] = 0.1;
                        values[layout.log_sigma(i)] = -0.5;
                    }
                    for i in 0..2 {
                        for t in 0..spec.counts()[i] {
                            values[layout.latent(i, t, 0)] =
                                50.0 * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
                draw
            })
            .collect();
        let est = is_marginal_loglik(&spec, &panel, &draws, 2000, 17).unwrap();
        assert_eq!(est.low_ess_countries, vec![0, 1]);
        assert!(est
            .warnings()
            .iter()
            .any(|w| w.contains("degenerate")));
    }

    fn random_blv_draws(spec: &ModelSpec, count: usize, seed: u64) -> Vec<ParamVector> {
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let values: Vec<f64> = (0..layout.len())
                    .map(|idx| {
                        let base = 0.25 * rng.sample::<f64, _>(StandardNormal);
                        if idx >= layout.n_ages() * layout.k()
                            && idx < layout.n_ages() * layout.k() + layout.n_ages()
                        {
                            base - 2.5
                        } else if idx == layout.log_kappa() {
                            base + 4.0
                        } else {
                            base
                        }
                    })
                    .collect();
                ParamVector::new(layout.clone(), values).unwrap()
            })
            .collect()
    }

    #[test]
    fn waic_of_a_single_draw_has_no_penalty() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        let draws = random_blv_draws(&spec, 1, 21);
        let res = waic_c(&spec, &panel, &draws).unwrap();
        assert_eq!(res.p_waic, 0.0);
        // Direct conditional log likelihood of the single draw.
        let mu = expected_mortality(&spec, &draws[0]).unwrap();
        let kappa = draws[0].log_kappa().exp();
        let mut want = 0.0;
        for (i, series) in panel.series().iter().enumerate() {
            for t in 0..series.len() {
                for x in 0..3 {
                    want += BetaProp::new(mu[i][(t, x)], kappa)
                        .unwrap()
                        .log_density(series.value(t, x))
                        .unwrap();
                }
            }
        }
        assert!((res.lppd - want).abs() < 1e-10);
        assert!((res.waic - (-2.0 * want)).abs() < 1e-9);
        // Copies of one draw carry no extra information.
        let copies = vec![draws[0].clone(); 5];
        let repeated = waic_c(&spec, &panel, &copies).unwrap();
        assert!((repeated.waic - res.waic).abs() < 1e-9);
        assert_eq!(repeated.p_waic, 0.0);
    }

    #[test]
    fn waic_matches_a_direct_formula_oracle() {
        let panel = toy_panel();
        for variant in [Variant::Blv, Variant::Bfa] {
            let spec = ModelSpec::new(&panel, 2, variant).unwrap();
            let draws: Vec<ParamVector> = match variant {
                Variant::Blv => random_blv_draws(&spec, 7, 22),
                Variant::Bfa => {
                    let layout = spec.layout();
                    let mut rng = ChaCha8Rng::seed_from_u64(23);
                    (0..7)
                        .map(|_| {
                            let values: Vec<f64> = (0..layout.len())
                                .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                                .collect();
                            ParamVector::new(layout.clone(), values).unwrap()
                        })
                        .collect()
                }
            };
            let res = waic_c(&spec, &panel, &draws).unwrap();
            // Naive oracle: gather the per-observation log densities and
            // apply the definition with plain means and variances.
            let n_obs = panel.n_obs();
            let mut table = vec![Vec::new(); n_obs];
            for draw in &draws {
                per_obs_log_densities(&spec, &panel, draw, |obs, lp| table[obs].push(lp))
                    .unwrap();
            }
            let mut lppd = 0.0;
            let mut p_waic = 0.0;
            for lps in &table {
                let s = lps.len() as f64;
                let mean_density = lps.iter().map(|lp| lp.exp()).sum::<f64>() / s;
                lppd += mean_density.ln();
                let mean_lp = lps.iter().sum::<f64>() / s;
                p_waic += lps.iter().map(|lp| (lp - mean_lp).powi(2)).sum::<f64>() / (s - 1.0);
            }
            let want = -2.0 * (lppd - p_waic);
            assert!(
                (res.waic - want).abs() < 1e-10,
                "{variant:?}: {} vs {want}",
                res.waic
            );
            assert!((res.lppd - lppd).abs() < 1e-10);
            assert!((res.p_waic - p_waic).abs() < 1e-10);
        }
    }

    #[test]
    fn predictive_mean_of_one_draw_is_its_surface() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        let draws = random_blv_draws(&spec, 1, 31);
        let pred = posterior_predict_mean(&spec, &panel, &draws).unwrap();
        let mu = expected_mortality(&spec, &draws[0]).unwrap();
        for (p, m) in pred.iter().zip(&mu) {
            for (a, b) in p.iter().zip(m.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        // Averages of (0, 1) values stay inside the open interval.
        let many = random_blv_draws(&spec, 40, 33);
        for m in posterior_predict_mean(&spec, &panel, &many).unwrap() {
            assert!(m.iter().all(|q| *q > 0.0 && *q < 1.0));
        }
    }

    #[test]
    fn predictive_mean_recentres_the_gaussian_baseline() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Bfa).unwrap();
        let layout = spec.layout();
        let mut draw = draw_with(&spec, |_| 0.0);
        {
            let values = draw.values_mut();
            for x in 0..3 {
                values[layout.alpha(x, 0)] = 0.4;
            }
            for i in 0..2 {
                for t in 0..spec.counts()[i] {
                    values[layout.latent(i, t, 0)] = 0.5 * (t as f64 - 1.0);
                }
            }
        }
        let pred = posterior_predict_mean(&spec, &panel, &[draw.clone()]).unwrap();
        let col_means = panel.logit_column_means();
        for i in 0..2 {
            for t in 0..spec.counts()[i] {
                for x in 0..3 {
                    let want = inv_logit(col_means[x] + 0.4 * draw.latent(i, t, 0));
                    assert!((pred[i][(t, x)] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn fit_metrics_hit_exact_cases() {
        let panel = toy_panel();
        let exact: Vec<DMatrix<f64>> = panel
            .series()
            .iter()
            .map(|s| s.values().clone())
            .collect();
        let (rmse, mape) = fit_metrics(&exact, &panel).unwrap();
        assert_eq!(rmse, 0.0);
        assert_eq!(mape, 0.0);
        let inflated: Vec<DMatrix<f64>> = exact.iter().map(|m| m * 1.1).collect();
        let (rmse, mape) = fit_metrics(&inflated, &panel).unwrap();
        assert!((mape - 10.0).abs() < 1e-10, "constant 10% error, got {mape}");
        let mut want_sq = 0.0;
        for s in panel.series() {
            for q in s.values().iter() {
                want_sq += (0.1 * q) * (0.1 * q);
            }
        }
        assert!((rmse - (want_sq / panel.n_obs() as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_metrics_vanish_on_exact_predictions() {
        let panel = toy_panel();
        let exact: Vec<DMatrix<f64>> = panel
            .series()
            .iter()
            .map(|s| s.values().clone())
            .collect();
        // Identity embedding: the latent rows are the observed rows.
        let metrics = distance_metrics(&panel, &exact, &exact).unwrap();
        assert_eq!(metrics.rmse_d, 0.0);
        assert_eq!(metrics.mape_d, 0.0);
        assert!(metrics.cophenetic > 1.0 - 1e-12);
    }

    #[test]
    fn cophenetic_matches_a_three_point_hand_ranking() {
        // Three rows, three pairs. Observed distances rank the pairs
        // (AB, AC, BC) as (1, 2, 3); the latent embedding swaps the first
        // two, giving Spearman 1 - 6*(1+1)/(3*8) = 0.5.
        let ages = vec![AgeGroup::new(0).unwrap()];
        let s = MortalityPanel::series_from_matrix(
            "AAA",
            1,
            DMatrix::from_row_slice(3, 1, &[0.10, 0.20, 0.45]),
        );
        let panel = MortalityPanel::new(ages, vec![s]).unwrap();
        // Pairs: AB = 0.10, AC = 0.35, BC = 0.25 -> ranks (1, 3, 2).
        let theta = DMatrix::from_row_slice(3, 1, &[0.0, 3.0, 1.0]);
        // Latent pairs: AB = 3, AC = 1, BC = 2 -> ranks (3, 1, 2).
        let exact: Vec<DMatrix<f64>> = panel
            .series()
            .iter()
            .map(|s| s.values().clone())
            .collect();
        let metrics = distance_metrics(&panel, &exact, &[theta]).unwrap();
        // Hand Spearman of ranks (1,3,2) vs (3,1,2): 1 - 6*(4+4+0)/(3*8) = -1.
        // Recompute: d^2 = (1-3)^2 + (3-1)^2 + (2-2)^2 = 8, rho = 1 - 48/24 = -1.
        assert!((metrics.cophenetic - (-1.0)).abs() < 1e-12);
        let direct = spearman(&[1.0, 3.0, 2.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((metrics.cophenetic - direct).abs() < 1e-12);
        let half = spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_survives_monotone_transforms_and_handles_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let base = spearman(&a, &b).unwrap();
        let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let cb: Vec<f64> = b.iter().map(|v| v.powi(3) + 5.0 * v).collect();
        assert!((spearman(&ea, &b).unwrap() - base).abs() < 1e-12);
        assert!((spearman(&a, &cb).unwrap() - base).abs() < 1e-12);
        // Tied values share an averaged rank.
        let tied = spearman(&[1.0, 1.0, 2.0, 3.0], &[4.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((tied - 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn log_kappa_summary_of_constant_draws() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv)
            .unwrap()
            .with_priors(PriorScales::default());
        let layout = spec.layout();
        let draws: Vec<ParamVector> = (0..150)
            .map(|_| {
                let mut d = draw_with(&spec, |_| 0.0);
                d.values_mut()[layout.log_kappa()] = 9.92;
                d
            })
            .collect();
        let s = log_kappa_summary(&draws).unwrap();
        assert!((s.mean - 9.92).abs() < 1e-12);
        assert_eq!(s.hpd_low, 9.92);
        assert_eq!(s.hpd_high, 9.92);
        let bfa = ModelSpec::new(&panel, 1, Variant::Bfa).unwrap();
        let bfa_draws: Vec<ParamVector> = (0..150).map(|_| draw_with(&bfa, |_| 0.1)).collect();
        assert!(log_kappa_summary(&bfa_draws).is_err());
    }

    #[test]
    fn posterior_mean_is_the_coordinate_average() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let a = draw_with(&spec, |i| i as f64);
        let b = draw_with(&spec, |i| -(i as f64) + 1.0);
        let mean = posterior_mean_params(&[a, b]).unwrap();
        for v in mean.values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_report_validation_and_best_row() {
        let row = |k: usize, bic: f64| SelectionRow {
            k,
            log_marginal: -100.0,
            log_marginal_se: 0.1,
            bic_m: bic,
            waic_c: -500.0,
            log_kappa_mean: 9.9,
            log_kappa_hpd_low: 9.8,
            log_kappa_hpd_high: 10.0,
            rmse_q: 0.002,
            mape_q: 4.0,
            rmse_d: 0.01,
            mape_d: 6.0,
            cophenetic: 0.8,
        };
        let report = SelectionReport {
            rows: vec![row(1, 350.0), row(2, 310.0), row(3, 340.0)],
        };
        report.validate().unwrap();
        assert_eq!(report.best_by_bic().unwrap().k, 2);
        let mut bad = report.clone();
        bad.rows[1].cophenetic = f64::NAN;
        assert!(bad.validate().is_err());
    }
}
