//! Beta distribution parameterised by mean and precision.
//!
//! For mean `mu` in (0,1) and precision `kappa > 0` the density is a
//! standard beta with shapes `a = kappa * mu` and `b = kappa * (1 - mu)`,
//! so the mean is exactly `mu` and the variance is
//! `mu * (1 - mu) / (1 + kappa)`. Densities and score functions are
//! evaluated on the log scale throughout; sampling goes through a pair of
//! gamma draws so that it is deterministic under a seeded generator.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::special::{digamma, log_beta, stirling_error, HALF_LN_TWO_PI};

/// Beta distribution with mean/precision parameterisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaProp {
    mu: f64,
    kappa: f64,
}

impl BetaProp {
    /// Builds the distribution, rejecting out-of-domain parameters.
    pub fn new(mu: f64, kappa: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta mean must lie in (0, 1), got {mu}"
            )));
        }
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta precision must be finite and positive, got {kappa}"
            )));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mean(&self) -> f64 {
        self.mu
    }

    pub fn precision(&self) -> f64 {
        self.kappa
    }

    /// Shape parameters `(a, b)` of the equivalent standard beta.
    pub fn shapes(&self) -> (f64, f64) {
        (self.kappa * self.mu, self.kappa * (1.0 - self.mu))
    }

    pub fn variance(&self) -> f64 {
        self.mu * (1.0 - self.mu) / (1.0 + self.kappa)
    }

    /// Log density at `y`; boundary values are outside the support.
    pub fn log_density(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta support is the open interval (0, 1), got {y}"
            )));
        }
        let (a, b) = self.shapes();
        let total = a + b;
        if total < 1e3 {
            return Ok((a - 1.0) * y.ln() + (b - 1.0) * (-y).ln_1p() - log_beta(a, b)?);
        }
        // Large shapes: the direct formula cancels terms of size lgam(a + b)
        // down to an O(1) result. Regrouping around the mean p = a / (a + b)
        // keeps every term small:
        //   ln f = a ln(y/p) + b ln((1-y)/(1-p)) + ln(ab/(a+b))/2
        //          - ln(y(1-y)) - ln(2 pi)/2 - (s(a) + s(b) - s(a+b))
        // with s the Stirling remainder of log-gamma.
        let p = a / total;
        let log_ratio_a = if (y - p).abs() < 0.5 * p {
            ((y - p) / p).ln_1p()
        } else {
            (y / p).ln()
        };
        let q = 1.0 - p;
        let log_ratio_b = if (p - y).abs() < 0.5 * q {
            ((p - y) / q).ln_1p()
        } else {
            ((1.0 - y) / q).ln()
        };
        let stirling = stirling_error(a)? + stirling_error(b)? - stirling_error(total)?;
        Ok(a * log_ratio_a + b * log_ratio_b + 0.5 * (a * b / total).ln()
            - (y * (1.0 - y)).ln()
            - HALF_LN_TWO_PI
            - stirling)
    }

    /// Partial derivatives of the log density with respect to `(mu, kappa)`.
    pub fn log_density_grad(&self, y: f64) -> Result<(f64, f64)> {
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta support is the open interval (0, 1), got {y}"
            )));
        }
        let (a, b) = self.shapes();
        let log_y = y.ln();
        let log_1my = (-y).ln_1p();
        let psi_a = digamma(a)?;
        let psi_b = digamma(b)?;
        let d_mu = self.kappa * (log_y - log_1my - psi_a + psi_b);
        let d_kappa = self.mu * (log_y - psi_a) + (1.0 - self.mu) * (log_1my - psi_b)
            + digamma(self.kappa)?;
        Ok((d_mu, d_kappa))
    }

    /// Draws one value via a gamma pair, `X / (X + Y)`.
    ///
    /// The ratio can round to a boundary when one shape is extreme; callers
    /// that need open-interval draws re-sample (see the simulator).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = self.shapes();
        let ga = Gamma::new(a, 1.0).expect("shape a is positive by construction");
        let gb = Gamma::new(b, 1.0).expect("shape b is positive by construction");
        let x: f64 = ga.sample(rng);
        let y: f64 = gb.sample(rng);
        if x + y == 0.0 {
            // Both gammas underflowed (tiny shapes); fall back to the mean.
            return self.mu;
        }
        x / (x + y)
    }
}
