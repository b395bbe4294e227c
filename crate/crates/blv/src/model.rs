//! The time-dependent beta latent variable model: parameter layout,
//! posterior density with analytic gradient, latent-state reconstruction,
//! initialisation and the intercept-only maximum likelihood fit.
//!
//! Observations `q_{x,i,t}` follow a beta distribution with mean
//! `mu = inv_logit(beta_x + alpha_x . theta_i^(t))` and common precision
//! `kappa`. The latent state of country `i` is a stationary AR(1) process
//! per factor, written in non-centred form: with innovations
//! `eps ~ N(0, I)`,
//!
//! ```text
//! theta^(s_i) = sigma_i / sqrt(1 - phi_i^2) * eps^(s_i)
//! theta^(t)   = phi_i * theta^(t-1) + sigma_i * eps^(t)
//! ```
//!
//! The sampler works on the unconstrained vector
//! `(alpha, beta, log kappa, atanh phi, log sigma, eps)`; the posterior
//! includes the `log(1 - phi^2)` Jacobian of the `tanh` reparameterisation.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{inv_logit, logit, MortalityPanel};
use crate::error::{Error, Result};
use crate::nuts::Target;
use crate::special::{digamma, log_gamma, trigamma};

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Time-dependent beta latent variable model.
    Blv,
    /// Gaussian factor baseline on centred logits.
    Bfa,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Blv => write!(f, "blv"),
            Variant::Bfa => write!(f, "bfa"),
        }
    }
}

/// Prior standard deviations, exposed for sensitivity analysis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorScales {
    /// Loadings `alpha_xk ~ N(0, alpha_sd^2)`.
    pub alpha_sd: f64,
    /// Intercepts `beta_x ~ N(0, beta_sd^2)`.
    pub beta_sd: f64,
    /// Log precision `log kappa ~ N(0, log_kappa_sd^2)`.
    pub log_kappa_sd: f64,
    /// Innovation scale `log sigma_i ~ N(0, log_sigma_sd^2)`.
    pub log_sigma_sd: f64,
}

impl Default for PriorScales {
    fn default() -> Self {
        Self {
            alpha_sd: 1.0,
            beta_sd: 10.0,
            log_kappa_sd: 10.0,
            log_sigma_sd: 1.0,
        }
    }
}

/// Shape and settings of one model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    k: usize,
    variant: Variant,
    priors: PriorScales,
    counts: Vec<usize>,
    first_times: Vec<u32>,
    n_ages: usize,
}

impl ModelSpec {
    /// Builds a spec for `k` factors over the given panel's shape.
    pub fn new(panel: &MortalityPanel, k: usize, variant: Variant) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidInput("factor count must be at least 1".into()));
        }
        if k > panel.n_ages() {
            return Err(Error::InvalidInput(format!(
                "factor count {k} exceeds the number of age groups {}",
                panel.n_ages()
            )));
        }
        Ok(Self {
            k,
            variant,
            priors: PriorScales::default(),
            counts: panel.counts(),
            first_times: panel.first_times(),
            n_ages: panel.n_ages(),
        })
    }

    pub fn with_priors(mut self, priors: PriorScales) -> Self {
        self.priors = priors;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn priors(&self) -> &PriorScales {
        &self.priors
    }

    /// Number of countries `n`.
    pub fn n_countries(&self) -> usize {
        self.counts.len()
    }

    /// Number of age groups `J`.
    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    /// Periods per country.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn first_times(&self) -> &[u32] {
        &self.first_times
    }

    /// Unconstrained parameter layout for this spec's variant.
    pub fn layout(&self) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(
            self.k,
            self.n_ages,
            self.counts.clone(),
            self.variant,
        ))
    }

    /// Checks that a panel has the shape this spec was built from.
    pub fn matches_panel(&self, panel: &MortalityPanel) -> Result<()> {
        if panel.n_ages() != self.n_ages
            || panel.counts() != self.counts
            || panel.first_times() != self.first_times
        {
            return Err(Error::InvalidInput(
                "panel shape does not match the model spec".into(),
            ));
        }
        Ok(())
    }
}

/// Index map for the flat unconstrained parameter vector.
///
/// BLV order: `alpha` (J x K, row major), `beta` (J), `log_kappa`,
/// `u_phi = atanh(phi)` (n), `log_sigma` (n), then `eps` grouped by
/// country, period, factor. BFA order: `alpha` (J x K), `log_psi` (J),
/// `theta` grouped by country, period, factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    k: usize,
    j: usize,
    counts: Vec<usize>,
    row_offsets: Vec<usize>,
    total_rows: usize,
    variant: Variant,
}

impl ParamLayout {
    fn new(k: usize, j: usize, counts: Vec<usize>, variant: Variant) -> Self {
        let mut row_offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            row_offsets.push(acc);
            acc += c;
        }
        Self {
            k,
            j,
            counts,
            row_offsets,
            total_rows: acc,
            variant,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_ages(&self) -> usize {
        self.j
    }

    pub fn n_countries(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Total country-period rows across the panel.
    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Full dimension of the unconstrained vector.
    pub fn len(&self) -> usize {
        match self.variant {
            Variant::Blv => {
                self.j * self.k + self.j + 1 + 2 * self.counts.len() + self.k * self.total_rows
            }
            Variant::Bfa => self.j * self.k + self.j + self.k * self.total_rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of structural (non-latent) parameters: `JK + J + 1 + 2n` for
    /// the BLV model, `JK + J` for the Gaussian baseline.
    pub fn structural_param_count(&self) -> usize {
        match self.variant {
            Variant::Blv => self.j * self.k + self.j + 1 + 2 * self.counts.len(),
            Variant::Bfa => self.j * self.k + self.j,
        }
    }

    pub fn alpha(&self, x: usize, k: usize) -> usize {
        debug_assert!(x < self.j && k < self.k);
        x * self.k + k
    }

    pub fn beta(&self, x: usize) -> usize {
        debug_assert!(matches!(self.variant, Variant::Blv));
        debug_assert!(x < self.j);
        self.j * self.k + x
    }

    /// Uniqueness `log psi_x` (BFA only), stored where BLV keeps `beta`.
    pub fn log_psi(&self, x: usize) -> usize {
        debug_assert!(matches!(self.variant, Variant::Bfa));
        debug_assert!(x < self.j);
        self.j * self.k + x
    }

    pub fn log_kappa(&self) -> usize {
        debug_assert!(matches!(self.variant, Variant::Blv));
        self.j * self.k + self.j
    }

    pub fn u_phi(&self, i: usize) -> usize {
        debug_assert!(matches!(self.variant, Variant::Blv));
        debug_assert!(i < self.counts.len());
        self.j * self.k + self.j + 1 + i
    }

    pub fn log_sigma(&self, i: usize) -> usize {
        debug_assert!(matches!(self.variant, Variant::Blv));
        debug_assert!(i < self.counts.len());
        self.j * self.k + self.j + 1 + self.counts.len() + i
    }

    /// Innovation (BLV) or static latent state (BFA) index for country
    /// `i`, period offset `t`, factor `k`.
    pub fn latent(&self, i: usize, t: usize, k: usize) -> usize {
        debug_assert!(i < self.counts.len() && t < self.counts[i] && k < self.k);
        let base = match self.variant {
            Variant::Blv => self.j * self.k + self.j + 1 + 2 * self.counts.len(),
            Variant::Bfa => self.j * self.k + self.j,
        };
        base + (self.row_offsets[i] + t) * self.k + k
    }

    /// Start of the latent block.
    pub fn latent_start(&self) -> usize {
        match self.variant {
            Variant::Blv => self.j * self.k + self.j + 1 + 2 * self.counts.len(),
            Variant::Bfa => self.j * self.k + self.j,
        }
    }

    /// Human-readable name per scalar parameter, in layout order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for x in 0..self.j {
            for k in 0..self.k {
                names.push(format!("alpha[{x},{k}]"));
            }
        }
        match self.variant {
            Variant::Blv => {
                for x in 0..self.j {
                    names.push(format!("beta[{x}]"));
                }
                names.push("log_kappa".to_string());
                for i in 0..self.counts.len() {
                    names.push(format!("u_phi[{i}]"));
                }
                for i in 0..self.counts.len() {
                    names.push(format!("log_sigma[{i}]"));
                }
                for (i, &c) in self.counts.iter().enumerate() {
                    for t in 0..c {
                        for k in 0..self.k {
                            names.push(format!("eps[{i},{t},{k}]"));
                        }
                    }
                }
            }
            Variant::Bfa => {
                for x in 0..self.j {
                    names.push(format!("log_psi[{x}]"));
                }
                for (i, &c) in self.counts.iter().enumerate() {
                    for t in 0..c {
                        for k in 0..self.k {
                            names.push(format!("theta[{i},{t},{k}]"));
                        }
                    }
                }
            }
        }
        names
    }
}

/// One point in the unconstrained parameter space, with named views.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has length {}, layout needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn alpha(&self, x: usize, k: usize) -> f64 {
        self.values[self.layout.alpha(x, k)]
    }

    /// Loadings as a `J x K` matrix.
    pub fn alpha_matrix(&self) -> DMatrix<f64> {
        let j = self.layout.j;
        let k = self.layout.k;
        DMatrix::from_fn(j, k, |x, kk| self.values[self.layout.alpha(x, kk)])
    }

    pub fn beta(&self, x: usize) -> f64 {
        self.values[self.layout.beta(x)]
    }

    pub fn log_kappa(&self) -> f64 {
        self.values[self.layout.log_kappa()]
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa().exp()
    }

    pub fn phi(&self, i: usize) -> f64 {
        self.values[self.layout.u_phi(i)].tanh()
    }

    /// Uniqueness variance for age group `x` (BFA layouts).
    pub fn psi(&self, x: usize) -> f64 {
        self.values[self.layout.log_psi(x)].exp()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.values[self.layout.log_sigma(i)].exp()
    }

    pub fn latent(&self, i: usize, t: usize, k: usize) -> f64 {
        self.values[self.layout.latent(i, t, k)]
    }
}

/// `log(cosh(u))` without overflow for large `|u|`.
fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Reconstructs the latent states `theta_i` (an `N_i x K` matrix per
/// country) from innovations via the AR(1) recursion.
pub fn latent_states(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<DMatrix<f64>>> {
    if spec.variant != Variant::Blv {
        return Err(Error::InvalidInput(
            "latent state reconstruction applies to the BLV variant".into(),
        ));
    }
    let layout = params.layout();
    let mut out = Vec::with_capacity(spec.n_countries());
    for (i, &ni) in spec.counts.iter().enumerate() {
        let phi = params.phi(i);
        let sigma = params.sigma(i);
        let sech2 = (-2.0 * ln_cosh(params.values[layout.u_phi(i)])).exp();
        if sech2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "autocorrelation for country {i} is at the unit boundary"
            )));
        }
        let scale0 = sigma / sech2.sqrt();
        let mut theta = DMatrix::zeros(ni, spec.k);
        for k in 0..spec.k {
            theta[(0, k)] = scale0 * params.latent(i, 0, k);
            for t in 1..ni {
                theta[(t, k)] = phi * theta[(t - 1, k)] + sigma * params.latent(i, t, k);
            }
        }
        out.push(theta);
    }
    Ok(out)
}

/// Model-implied beta means `mu_{x,i,t}` (an `N_i x J` matrix per country).
pub fn expected_mortality(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<DMatrix<f64>>> {
    let thetas = latent_states(spec, params)?;
    let mut out = Vec::with_capacity(spec.n_countries());
    for (i, theta) in thetas.iter().enumerate() {
        let ni = spec.counts[i];
        let mut mu = DMatrix::zeros(ni, spec.n_ages);
        for t in 0..ni {
            for x in 0..spec.n_ages {
                let mut eta = params.beta(x);
                for k in 0..spec.k {
                    eta += params.alpha(x, k) * theta[(t, k)];
                }
                mu[(t, x)] = inv_logit(eta);
            }
        }
        out.push(mu);
    }
    Ok(out)
}

/// Posterior density target for the BLV model over a fixed panel.
///
/// Caches the log observations so repeated gradient evaluations during
/// sampling touch no transcendental functions of the data.
pub struct BlvPosterior {
    spec: ModelSpec,
    log_q: Vec<DMatrix<f64>>,
    log_1mq: Vec<DMatrix<f64>>,
    layout: Arc<ParamLayout>,
}

impl BlvPosterior {
    pub fn new(spec: ModelSpec, panel: &MortalityPanel) -> Result<Self> {
        if spec.variant != Variant::Blv {
            return Err(Error::InvalidInput(
                "BlvPosterior requires the BLV variant".into(),
            ));
        }
        spec.matches_panel(panel)?;
        let mut log_q = Vec::with_capacity(panel.n_countries());
        let mut log_1mq = Vec::with_capacity(panel.n_countries());
        for s in panel.series() {
            log_q.push(s.values().map(|q| q.ln()));
            log_1mq.push(s.values().map(|q| (-q).ln_1p()));
        }
        let layout = spec.layout();
        Ok(Self {
            spec,
            log_q,
            log_1mq,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Log posterior and gradient; `None` when the point is out of support
    /// (overflowing scales, autocorrelation at the boundary).
    fn eval(&self, v: &[f64], grad: &mut [f64]) -> Option<f64> {
        let l = &*self.layout;
        let k_dim = l.k();
        let j = l.n_ages();
        let n = l.n_countries();
        let pr = &self.spec.priors;

        grad.iter_mut().for_each(|g| *g = 0.0);
        let log_kappa = v[l.log_kappa()];
        let kappa = log_kappa.exp();
        if !kappa.is_finite() || kappa <= 0.0 {
            return None;
        }
        let psi_kappa = digamma(kappa).ok()?;
        let lgam_kappa = log_gamma(kappa).ok()?;

        let mut logp = 0.0;
        // dL/dkappa accumulated over observations (chained to log kappa at
        // the end).
        let mut d_kappa = 0.0;

        let mut theta = vec![0.0; k_dim];
        for i in 0..n {
            let ni = self.spec.counts[i];
            let u = v[l.u_phi(i)];
            let phi = u.tanh();
            let sech2 = (-2.0 * ln_cosh(u)).exp();
            let log_sigma = v[l.log_sigma(i)];
            let sigma = log_sigma.exp();
            if sech2 <= 0.0 || !sigma.is_finite() || sigma <= 0.0 {
                return None;
            }
            let scale0 = sigma / sech2.sqrt();

            // Forward pass: latent states for this country.
            let mut theta_rows = vec![0.0; ni * k_dim];
            for k in 0..k_dim {
                theta_rows[k] = scale0 * v[l.latent(i, 0, k)];
            }
            for t in 1..ni {
                for k in 0..k_dim {
                    theta_rows[t * k_dim + k] =
                        phi * theta_rows[(t - 1) * k_dim + k] + sigma * v[l.latent(i, t, k)];
                }
            }

            // Observation loop: accumulate the likelihood, parameter
            // scores and the adjoint of theta.
            let mut g_theta = vec![0.0; ni * k_dim];
            let log_q = &self.log_q[i];
            let log_1mq = &self.log_1mq[i];
            for t in 0..ni {
                theta.copy_from_slice(&theta_rows[t * k_dim..(t + 1) * k_dim]);
                for x in 0..j {
                    let mut eta = v[l.beta(x)];
                    for k in 0..k_dim {
                        eta += v[l.alpha(x, k)] * theta[k];
                    }
                    // Evaluate both tails directly so neither rounds to 0.
                    let mu = inv_logit(eta);
                    let mu_c = inv_logit(-eta);
                    let a = kappa * mu;
                    let b = kappa * mu_c;
                    let lq = log_q[(t, x)];
                    let l1q = log_1mq[(t, x)];
                    let (lga, psi_a) = (log_gamma(a).ok()?, digamma(a).ok()?);
                    let (lgb, psi_b) = (log_gamma(b).ok()?, digamma(b).ok()?);
                    logp += (a - 1.0) * lq + (b - 1.0) * l1q - lga - lgb + lgam_kappa;
                    let d_mu = kappa * (lq - l1q - psi_a + psi_b);
                    let g_eta = d_mu * mu * mu_c;
                    d_kappa += mu * (lq - psi_a) + mu_c * (l1q - psi_b) + psi_kappa;
                    grad[l.beta(x)] += g_eta;
                    for k in 0..k_dim {
                        grad[l.alpha(x, k)] += g_eta * theta[k];
                        g_theta[t * k_dim + k] += g_eta * v[l.alpha(x, k)];
                    }
                }
            }

            // Backward pass through the AR(1) recursion. The adjoint of
            // theta^(t) is its own score plus phi times the adjoint of
            // theta^(t+1).
            let mut d_phi = 0.0;
            let mut d_sigma = 0.0;
            let mut carry = vec![0.0; k_dim];
            for t in (1..ni).rev() {
                for k in 0..k_dim {
                    let a_t = g_theta[t * k_dim + k] + carry[k];
                    let e = v[l.latent(i, t, k)];
                    grad[l.latent(i, t, k)] += sigma * a_t;
                    d_sigma += a_t * e;
                    d_phi += a_t * theta_rows[(t - 1) * k_dim + k];
                    carry[k] = phi * a_t;
                }
            }
            let inv_sqrt = 1.0 / sech2.sqrt();
            for k in 0..k_dim {
                let a_0 = g_theta[k] + carry[k];
                let e0 = v[l.latent(i, 0, k)];
                grad[l.latent(i, 0, k)] += scale0 * a_0;
                d_sigma += a_0 * e0 * inv_sqrt;
                d_phi += a_0 * e0 * sigma * phi * inv_sqrt / sech2;
            }

            // Stationarity-preserving reparameterisation: phi = tanh(u)
            // contributes the Jacobian log(1 - phi^2); the uniform base
            // density on (-1, 1) is the constant -log 2.
            logp += sech2.ln() - std::f64::consts::LN_2;
            grad[l.u_phi(i)] += d_phi * sech2 - 2.0 * phi;
            let s = pr.log_sigma_sd;
            logp += -0.5 * (log_sigma / s).powi(2) - s.ln() - crate::special::HALF_LN_TWO_PI;
            grad[l.log_sigma(i)] += d_sigma * sigma - log_sigma / (s * s);
        }

        // Gaussian priors on loadings, intercepts, log precision and
        // innovations.
        let sa = pr.alpha_sd;
        for x in 0..j {
            for k in 0..k_dim {
                let idx = l.alpha(x, k);
                let a = v[idx];
                logp += -0.5 * (a / sa).powi(2) - sa.ln() - crate::special::HALF_LN_TWO_PI;
                grad[idx] += -a / (sa * sa);
            }
            let idx = l.beta(x);
            let b = v[idx];
            let sb = pr.beta_sd;
            logp += -0.5 * (b / sb).powi(2) - sb.ln() - crate::special::HALF_LN_TWO_PI;
            grad[idx] += -b / (sb * sb);
        }
        let sk = pr.log_kappa_sd;
        logp += -0.5 * (log_kappa / sk).powi(2) - sk.ln() - crate::special::HALF_LN_TWO_PI;
        grad[l.log_kappa()] += kappa * d_kappa - log_kappa / (sk * sk);
        let start = l.latent_start();
        for idx in start..l.len() {
            let e = v[idx];
            logp += -0.5 * e * e - crate::special::HALF_LN_TWO_PI;
            grad[idx] += -e;
        }

        logp.is_finite().then_some(logp)
    }
}

impl Target for BlvPosterior {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        match self.eval(position, grad) {
            Some(lp) => lp,
            None => f64::NEG_INFINITY,
        }
    }
}

/// Log posterior density at `params`; errors on non-finite parameters,
/// returns negative infinity for out-of-support points.
pub fn log_posterior(spec: &ModelSpec, panel: &MortalityPanel, params: &ParamVector) -> Result<f64> {
    Ok(log_posterior_grad(spec, panel, params)?.0)
}

/// Log posterior and its gradient with respect to the unconstrained vector.
pub fn log_posterior_grad(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    params: &ParamVector,
) -> Result<(f64, Vec<f64>)> {
    if params.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "parameter vector contains non-finite entries".into(),
        ));
    }
    let post = BlvPosterior::new(spec.clone(), panel)?;
    let mut grad = vec![0.0; post.dim()];
    let lp = post.logp_grad(params.values(), &mut grad);
    Ok((lp, grad))
}

/// Result of the intercept-only maximum likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct InterceptOnlyMle {
    /// Per-age intercepts on the logit scale.
    pub beta: Vec<f64>,
    pub log_kappa: f64,
    /// Set when the precision ran away (near noise-free data) and was
    /// capped rather than estimated.
    pub kappa_capped: bool,
    pub iterations: usize,
}

const LOG_KAPPA_CAP: f64 = 30.0;

/// Fits the model with all loadings fixed at zero by maximum likelihood:
/// one beta mean per age group and a common precision.
///
/// Newton steps alternate between the intercepts (whose Hessian is
/// diagonal given `kappa`) and the log precision. Early steps are damped
/// by a line search; once the predicted improvement falls below f64
/// resolution of the likelihood the raw Newton step is taken, which
/// converges quadratically to the stationary point. On return the
/// gradient max-norm is below 1e-9 unless the precision was capped, in
/// which case convergence is declared when the steps vanish.
pub fn mle_intercept_only(panel: &MortalityPanel) -> Result<InterceptOnlyMle> {
    let j = panel.n_ages();
    let m = panel.to_matrix();
    let rows = m.nrows() as f64;

    // Data sums are all the likelihood needs; compute them once.
    let sum_lq: Vec<f64> = (0..j)
        .map(|x| m.column(x).iter().map(|q| q.ln()).sum())
        .collect();
    let sum_l1q: Vec<f64> = (0..j)
        .map(|x| m.column(x).iter().map(|q| (-q).ln_1p()).sum())
        .collect();

    // Moment-matched starting values.
    let mut beta: Vec<f64> = (0..j).map(|x| logit(m.column(x).mean())).collect();
    let mut kappa_guesses: Vec<f64> = Vec::new();
    for x in 0..j {
        let mean = m.column(x).mean();
        let var = m
            .column(x)
            .iter()
            .map(|q| (q - mean).powi(2))
            .sum::<f64>()
            / (rows - 1.0).max(1.0);
        if var > 0.0 {
            let g = mean * (1.0 - mean) / var - 1.0;
            if g.is_finite() && g > 0.0 {
                kappa_guesses.push(g);
            }
        }
    }
    let mut log_kappa = if kappa_guesses.is_empty() {
        2.0f64
    } else {
        kappa_guesses.sort_by(|a, b| a.partial_cmp(b).expect("finite by construction"));
        kappa_guesses[kappa_guesses.len() / 2].max(1e-2).ln()
    };
    log_kappa = log_kappa.min(LOG_KAPPA_CAP);

    let loglik = |beta: &[f64], lk: f64| -> Result<f64> {
        let kappa = lk.exp();
        let lgam_kappa = log_gamma(kappa)?;
        let mut ll = 0.0;
        for x in 0..j {
            let mu = inv_logit(beta[x]);
            let mu_c = inv_logit(-beta[x]);
            let a = kappa * mu;
            let b = kappa * mu_c;
            ll += (a - 1.0) * sum_lq[x] + (b - 1.0) * sum_l1q[x]
                + rows * (lgam_kappa - log_gamma(a)? - log_gamma(b)?);
        }
        Ok(ll)
    };

    // Gradient and curvature of one intercept, all else fixed.
    let beta_derivs = |bx: f64, kappa: f64, x: usize| -> Result<(f64, f64)> {
        let mu = inv_logit(bx);
        let mu_c = inv_logit(-bx);
        let a = kappa * mu;
        let b = kappa * mu_c;
        let d_mu = kappa * (sum_lq[x] - sum_l1q[x] - rows * (digamma(a)? - digamma(b)?));
        let g = d_mu * mu * mu_c;
        let d2_mu = -kappa * kappa * rows * (trigamma(a)? + trigamma(b)?);
        let h = d2_mu * (mu * mu_c).powi(2) + d_mu * mu * mu_c * (mu_c - mu);
        Ok((g, h))
    };

    // Gradient and curvature in log kappa, all intercepts fixed.
    let lk_derivs = |beta: &[f64], lk: f64| -> Result<(f64, f64)> {
        let kappa = lk.exp();
        let psi_kappa = digamma(kappa)?;
        let tri_kappa = trigamma(kappa)?;
        let mut d = 0.0;
        let mut h = 0.0;
        for x in 0..j {
            let mu = inv_logit(beta[x]);
            let mu_c = inv_logit(-beta[x]);
            let a = kappa * mu;
            let b = kappa * mu_c;
            d += mu * (sum_lq[x] - rows * digamma(a)?)
                + mu_c * (sum_l1q[x] - rows * digamma(b)?)
                + rows * psi_kappa;
            h += rows * (tri_kappa - mu * mu * trigamma(a)? - mu_c * mu_c * trigamma(b)?);
        }
        let g = kappa * d;
        Ok((g, g + kappa * kappa * h))
    };

    let mut capped = false;
    let mut iterations = 0;
    let max_iter = 500;
    let mut current = loglik(&beta, log_kappa)?;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NoConvergence(format!(
                "intercept-only fit did not reach tolerance in {max_iter} iterations"
            )));
        }

        // Convergence check on the gradient at the current iterate.
        let mut max_abs_grad: f64 = 0.0;
        for x in 0..j {
            let (g, _) = beta_derivs(beta[x], log_kappa.exp(), x)?;
            max_abs_grad = max_abs_grad.max(g.abs());
        }
        if !capped {
            let (g_lk, _) = lk_derivs(&beta, log_kappa)?;
            max_abs_grad = max_abs_grad.max(g_lk.abs());
        }
        if max_abs_grad < 1e-9 {
            break;
        }

        // The improvement a line search can still resolve in f64.
        let resolvable = 256.0 * f64::EPSILON * (1.0 + current.abs());
        let mut max_step: f64 = 0.0;

        for x in 0..j {
            let kappa = log_kappa.exp();
            let (g, h) = beta_derivs(beta[x], kappa, x)?;
            if h >= 0.0 {
                continue; // outside the concave region; the kappa step moves first
            }
            let mut step = -g / h;
            if step.abs() > 1.0 {
                step = step.signum();
            }
            let predicted = 0.5 * g * step;
            if predicted.abs() < resolvable {
                // Endgame: quadratic convergence, no verification possible.
                beta[x] += step;
            } else {
                for _ in 0..50 {
                    let mut trial = beta.clone();
                    trial[x] = beta[x] + step;
                    let t = loglik(&trial, log_kappa)?;
                    if t > current - resolvable {
                        beta = trial;
                        current = t;
                        break;
                    }
                    step *= 0.5;
                }
            }
            max_step = max_step.max(step.abs());
        }

        if !capped {
            let (g, h) = lk_derivs(&beta, log_kappa)?;
            let mut step = if h < 0.0 { -g / h } else { g.signum() * 0.5 };
            if step.abs() > 2.0 {
                step = 2.0 * step.signum();
            }
            let predicted = 0.5 * g * step;
            if h < 0.0 && predicted.abs() < resolvable {
                log_kappa += step;
            } else {
                for _ in 0..50 {
                    let t = loglik(&beta, log_kappa + step)?;
                    if t > current - resolvable {
                        log_kappa += step;
                        current = t;
                        break;
                    }
                    step *= 0.5;
                }
            }
            max_step = max_step.max(step.abs());
            if log_kappa >= LOG_KAPPA_CAP {
                log_kappa = LOG_KAPPA_CAP;
                capped = true;
            }
        }

        // With the precision capped (or the gradient floor set by f64
        // rounding) the parameters stop moving; that is convergence.
        if capped && max_step < 1e-12 {
            break;
        }
    }

    Ok(InterceptOnlyMle {
        beta,
        log_kappa,
        kappa_capped: capped,
        iterations,
    })
}

/// Draws one chain starting point around the intercept-only fit.
///
/// Loadings and innovations start near zero (N(0, 0.1^2)), the
/// autocorrelations uniformly in (-0.1, 0.1), the innovation log scales at
/// N(0, 0.1^2), and the intercepts and log precision at their
/// intercept-only estimates plus N(0, 0.1^2) jitter.
pub fn initialize_from_mle<R: Rng + ?Sized>(
    spec: &ModelSpec,
    mle: &InterceptOnlyMle,
    rng: &mut R,
) -> Result<ParamVector> {
    if spec.variant != Variant::Blv {
        return Err(Error::InvalidInput(
            "BLV initialisation requires the BLV variant".into(),
        ));
    }
    let layout = spec.layout();
    let mut pv = ParamVector::zeros(layout.clone());
    let small = Normal::new(0.0, 0.1).expect("valid normal");
    for x in 0..spec.n_ages {
        for k in 0..spec.k {
            pv.values_mut()[layout.alpha(x, k)] = small.sample(rng);
        }
        pv.values_mut()[layout.beta(x)] = mle.beta[x] + small.sample(rng);
    }
    pv.values_mut()[layout.log_kappa()] = mle.log_kappa + small.sample(rng);
    for i in 0..spec.n_countries() {
        let phi: f64 = rng.random_range(-0.1..0.1);
        pv.values_mut()[layout.u_phi(i)] = phi.atanh();
        pv.values_mut()[layout.log_sigma(i)] = small.sample(rng);
    }
    for idx in layout.latent_start()..layout.len() {
        pv.values_mut()[idx] = small.sample(rng);
    }
    Ok(pv)
}

/// Draws one chain starting point, fitting the intercept-only model first.
/// Falls back to moment-matched intercepts when that fit does not converge.
pub fn initialize<R: Rng + ?Sized>(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    rng: &mut R,
) -> Result<ParamVector> {
    spec.matches_panel(panel)?;
    let mle = match mle_intercept_only(panel) {
        Ok(m) => m,
        Err(_) => {
            let m = panel.to_matrix();
            InterceptOnlyMle {
                beta: (0..panel.n_ages())
                    .map(|x| logit(m.column(x).mean()))
                    .collect(),
                log_kappa: 2.0,
                kappa_capped: false,
                iterations: 0,
            }
        }
    };
    initialize_from_mle(spec, &mle, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AgeGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn layout_indices_are_a_bijection() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        let l = spec.layout();
        // J=3, K=2, n=2, total rows 5: 6 + 3 + 1 + 4 + 10 = 24.
        assert_eq!(l.len(), 24);
        assert_eq!(l.structural_param_count(), 14);
        let mut seen = vec![false; l.len()];
        let mut mark = |idx: usize| {
            assert!(!seen[idx], "index {idx} assigned twice");
            seen[idx] = true;
        };
        for x in 0..3 {
            for k in 0..2 {
                mark(l.alpha(x, k));
            }
            mark(l.beta(x));
        }
        mark(l.log_kappa());
        for i in 0..2 {
            mark(l.u_phi(i));
            mark(l.log_sigma(i));
        }
        for (i, &c) in [3usize, 2].iter().enumerate() {
            for t in 0..c {
                for k in 0..2 {
                    mark(l.latent(i, t, k));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(l.names().len(), l.len());
        assert_eq!(l.names()[l.log_kappa()], "log_kappa");
    }

    #[test]
    fn k_bounds_are_enforced() {
        let panel = toy_panel();
        assert!(ModelSpec::new(&panel, 0, Variant::Blv).is_err());
        assert!(ModelSpec::new(&panel, 4, Variant::Blv).is_err());
        assert!(ModelSpec::new(&panel, 3, Variant::Blv).is_ok());
    }

    #[test]
    fn latent_recursion_hand_values() {
        // phi = 0.5, sigma = 2, eps = (1, 1):
        // theta1 = 2 / sqrt(0.75), theta2 = 0.5 theta1 + 2.
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        pv.values_mut()[layout.u_phi(1)] = 0.5f64.atanh();
        pv.values_mut()[layout.log_sigma(1)] = 2.0f64.ln();
        pv.values_mut()[layout.latent(1, 0, 0)] = 1.0;
        pv.values_mut()[layout.latent(1, 1, 0)] = 1.0;
        let theta = latent_states(&spec, &pv).unwrap();
        assert!((theta[1][(0, 0)] - 2.309401076758503).abs() < 1e-12);
        assert!((theta[1][(1, 0)] - 3.154700538379252).abs() < 1e-12);
        // Country 0 has all-zero innovations, so its states vanish.
        assert!(theta[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stationary_scaling_at_initial_period() {
        // At the first period the marginal standard deviation is
        // sigma / sqrt(1 - phi^2) regardless of later innovations.
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        let phi: f64 = 0.9;
        pv.values_mut()[layout.u_phi(0)] = phi.atanh();
        pv.values_mut()[layout.log_sigma(0)] = 0.0;
        pv.values_mut()[layout.latent(0, 0, 0)] = 1.0;
        let theta = latent_states(&spec, &pv).unwrap();
        assert!((theta[0][(0, 0)] - 1.0 / (1.0 - phi * phi).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn expected_mortality_hand_value() {
        // beta = -3, alpha = (1, 0), theta = (2, 5): eta = -1 and
        // mu = logistic(-1).
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        pv.values_mut()[layout.beta(0)] = -3.0;
        pv.values_mut()[layout.alpha(0, 0)] = 1.0;
        pv.values_mut()[layout.alpha(0, 1)] = 0.0;
        // Force theta at country 0, period 0 to (2, 5): phi = 0 makes the
        // initial scale sigma, so eps = theta with sigma = 1.
        pv.values_mut()[layout.latent(0, 0, 0)] = 2.0;
        pv.values_mut()[layout.latent(0, 0, 1)] = 5.0;
        let mu = expected_mortality(&spec, &pv).unwrap();
        assert!((mu[0][(0, 0)] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let panel = toy_panel();
        for k in [1usize, 2] {
            let spec = ModelSpec::new(&panel, k, Variant::Blv).unwrap();
            let layout = spec.layout();
            let mut rng = ChaCha8Rng::seed_from_u64(42 + k as u64);
            let normal = Normal::new(0.0, 0.4).unwrap();
            let mut values: Vec<f64> = (0..layout.len()).map(|_| normal.sample(&mut rng)).collect();
            // Keep the precision in a realistic range.
            values[layout.log_kappa()] = 4.0 + 0.3 * normal.sample(&mut rng);
            let pv = ParamVector::new(layout.clone(), values.clone()).unwrap();
            let (lp, grad) = log_posterior_grad(&spec, &panel, &pv).unwrap();
            assert!(lp.is_finite());
            let h = 1e-5;
            for idx in 0..layout.len() {
                let mut plus = values.clone();
                plus[idx] += h;
                let mut minus = values.clone();
                minus[idx] -= h;
                let lp_p = log_posterior(
                    &spec,
                    &panel,
                    &ParamVector::new(layout.clone(), plus).unwrap(),
                )
                .unwrap();
                let lp_m = log_posterior(
                    &spec,
                    &panel,
                    &ParamVector::new(layout.clone(), minus).unwrap(),
                )
                .unwrap();
                let fd = (lp_p - lp_m) / (2.0 * h);
                let denom = fd.abs().max(grad[idx].abs()).max(1.0);
                assert!(
                    (grad[idx] - fd).abs() / denom < 1e-5,
                    "k={k} index {idx} ({}): analytic {} vs fd {fd}",
                    layout.names()[idx],
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn log_posterior_rejects_non_finite_parameters() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        pv.values_mut()[0] = f64::NAN;
        assert!(log_posterior(&spec, &panel, &pv).is_err());
    }

    #[test]
    fn out_of_support_points_return_negative_infinity() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        // Precision overflow.
        pv.values_mut()[layout.log_kappa()] = 800.0;
        let lp = log_posterior(&spec, &panel, &pv).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn mle_recovers_simulated_intercept_parameters() {
        // Panel simulated from the intercept-only model itself.
        use crate::betaprop::BetaProp;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let beta_true = [-3.0, -1.5];
        let kappa_true = 400.0;
        let n_rows = 400;
        let mut values = DMatrix::zeros(n_rows, 2);
        for r in 0..n_rows {
            for x in 0..2 {
                let d = BetaProp::new(inv_logit(beta_true[x]), kappa_true).unwrap();
                values[(r, x)] = d.sample(&mut rng);
            }
        }
        let half = n_rows / 2;
        let ages = vec![AgeGroup::new(0).unwrap(), AgeGroup::new(60).unwrap()];
        let s1 = MortalityPanel::series_from_matrix("AAA", 1, values.rows(0, half).into());
        let s2 = MortalityPanel::series_from_matrix("BBB", 1, values.rows(half, half).into());
        let panel = MortalityPanel::new(ages, vec![s1, s2]).unwrap();
        let fit = mle_intercept_only(&panel).unwrap();
        assert!(!fit.kappa_capped);
        for x in 0..2 {
            assert!(
                (fit.beta[x] - beta_true[x]).abs() < 0.05,
                "beta[{x}] = {} vs {}",
                fit.beta[x],
                beta_true[x]
            );
        }
        assert!(
            (fit.log_kappa - kappa_true.ln()).abs() < 0.2,
            "log_kappa {} vs {}",
            fit.log_kappa,
            kappa_true.ln()
        );
    }

    #[test]
    fn mle_gradient_vanishes_at_optimum() {
        let panel = toy_panel();
        let fit = mle_intercept_only(&panel).unwrap();
        // Finite-difference gradient of the likelihood at the optimum.
        let ll = |beta: &[f64], lk: f64| -> f64 {
            let kappa = lk.exp();
            let m = panel.to_matrix();
            let mut total = 0.0;
            for x in 0..panel.n_ages() {
                let d = crate::betaprop::BetaProp::new(inv_logit(beta[x]), kappa).unwrap();
                for r in 0..m.nrows() {
                    total += d.log_density(m[(r, x)]).unwrap();
                }
            }
            total
        };
        let h = 1e-6;
        if !fit.kappa_capped {
            let fd =
                (ll(&fit.beta, fit.log_kappa + h) - ll(&fit.beta, fit.log_kappa - h)) / (2.0 * h);
            assert!(fd.abs() < 1e-2, "log kappa gradient {fd}");
        }
        for x in 0..panel.n_ages() {
            let mut plus = fit.beta.clone();
            plus[x] += h;
            let mut minus = fit.beta.clone();
            minus[x] -= h;
            let fd = (ll(&plus, fit.log_kappa) - ll(&minus, fit.log_kappa)) / (2.0 * h);
            assert!(fd.abs() < 1e-2, "beta[{x}] gradient {fd}");
        }
    }

    #[test]
    fn mle_caps_runaway_precision() {
        // Nearly noise-free panel: the precision estimate diverges and is
        // capped with the flag set.
        let ages = vec![AgeGroup::new(0).unwrap()];
        let mut values = DMatrix::zeros(6, 1);
        for t in 0..6 {
            values[(t, 0)] = 0.2 + 1e-13 * t as f64;
        }
        let s = MortalityPanel::series_from_matrix("AAA", 1, values);
        let panel = MortalityPanel::new(ages, vec![s]).unwrap();
        let fit = mle_intercept_only(&panel).unwrap();
        assert!(fit.kappa_capped);
        assert_eq!(fit.log_kappa, LOG_KAPPA_CAP);
    }

    #[test]
    fn initialize_is_reproducible_and_near_mle() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        let mle = mle_intercept_only(&panel).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let a = initialize(&spec, &panel, &mut rng1).unwrap();
        let b = initialize(&spec, &panel, &mut rng2).unwrap();
        assert_eq!(a.values(), b.values());
        let layout = spec.layout();
        for x in 0..3 {
            assert!((a.beta(x) - mle.beta[x]).abs() < 0.5);
            for k in 0..2 {
                assert!(a.alpha(x, k).abs() < 0.5);
            }
        }
        assert!((a.log_kappa() - mle.log_kappa).abs() < 0.5);
        for i in 0..2 {
            assert!(a.phi(i).abs() < 0.1 + 1e-12);
        }
        for idx in layout.latent_start()..layout.len() {
            assert!(a.values()[idx].abs() < 0.5);
        }
        // The starting point must have a finite log posterior.
        assert!(log_posterior(&spec, &panel, &a).unwrap().is_finite());
    }
}
