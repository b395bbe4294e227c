//! Gaussian factor baseline on the centred logit scale.
//!
//! The comparison model treats centred logit mortality as
//! `y_xit ~ N(alpha_x' theta_i^(t), psi_x)` with iid standard normal
//! latent states: a plain factor analysis with no temporal structure.
//! Loadings carry N(0,1) priors and the log uniqueness variances reuse
//! the innovation-scale prior width from [`crate::model::PriorScales`].

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::MortalityPanel;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamLayout, ParamVector, Variant};
use crate::nuts::Target;
use crate::special::HALF_LN_TWO_PI;

/// Posterior density target for the factor baseline over a fixed panel.
///
/// The panel is reduced to its pooled centred logit matrix once at
/// construction; evaluations only touch that matrix.
pub struct BfaPosterior {
    spec: ModelSpec,
    centred: DMatrix<f64>,
    layout: Arc<ParamLayout>,
}

impl BfaPosterior {
    pub fn new(spec: ModelSpec, panel: &MortalityPanel) -> Result<Self> {
        if spec.variant() != Variant::Bfa {
            return Err(Error::InvalidInput(
                "BfaPosterior requires the BFA variant".into(),
            ));
        }
        spec.matches_panel(panel)?;
        let centred = panel.logit_matrix(true);
        let layout = spec.layout();
        Ok(Self {
            spec,
            centred,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Log posterior and gradient; `None` when a uniqueness variance
    /// overflows or underflows out of support.
    fn eval(&self, v: &[f64], grad: &mut [f64]) -> Option<f64> {
        let l = &*self.layout;
        let k_dim = l.k();
        let j = l.n_ages();
        let pr = self.spec.priors();

        grad.iter_mut().for_each(|g| *g = 0.0);

        let mut psi = vec![0.0; j];
        let mut inv_psi = vec![0.0; j];
        for x in 0..j {
            let p = v[l.log_psi(x)].exp();
            if !p.is_finite() || p <= 0.0 {
                return None;
            }
            psi[x] = p;
            inv_psi[x] = 1.0 / p;
        }

        let mut logp = 0.0;
        // d logp / d log_psi_x, likelihood part.
        let mut d_lpsi = vec![0.0; j];

        let mut row = 0usize;
        for (i, &ni) in self.spec.counts().iter().enumerate() {
            for t in 0..ni {
                for x in 0..j {
                    let mut mean = 0.0;
                    for k in 0..k_dim {
                        mean += v[l.alpha(x, k)] * v[l.latent(i, t, k)];
                    }
                    let resid = self.centred[(row, x)] - mean;
                    let scaled = resid * inv_psi[x];
                    logp += -0.5 * resid * scaled - 0.5 * psi[x].ln() - HALF_LN_TWO_PI;
                    d_lpsi[x] += 0.5 * (resid * scaled - 1.0);
                    for k in 0..k_dim {
                        grad[l.alpha(x, k)] += scaled * v[l.latent(i, t, k)];
                        grad[l.latent(i, t, k)] += scaled * v[l.alpha(x, k)];
                    }
                }
                row += 1;
            }
        }

        // Priors: loadings, log uniquenesses, standard normal latents.
        let sa = pr.alpha_sd;
        let sp = pr.log_sigma_sd;
        for x in 0..j {
            for k in 0..k_dim {
                let idx = l.alpha(x, k);
                let a = v[idx];
                logp += -0.5 * (a / sa).powi(2) - sa.ln() - HALF_LN_TWO_PI;
                grad[idx] += -a / (sa * sa);
            }
            let idx = l.log_psi(x);
            let lp = v[idx];
            logp += -0.5 * (lp / sp).powi(2) - sp.ln() - HALF_LN_TWO_PI;
            grad[idx] += d_lpsi[x] - lp / (sp * sp);
        }
        for idx in l.latent_start()..l.len() {
            let th = v[idx];
            logp += -0.5 * th * th - HALF_LN_TWO_PI;
            grad[idx] += -th;
        }

        logp.is_finite().then_some(logp)
    }
}

impl Target for BfaPosterior {
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

/// Log posterior of the factor baseline; errors on non-finite parameters,
/// returns negative infinity for out-of-support points.
pub fn bfa_log_posterior(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    params: &ParamVector,
) -> Result<f64> {
    Ok(bfa_log_posterior_grad(spec, panel, params)?.0)
}

/// Log posterior and gradient with respect to the unconstrained vector.
pub fn bfa_log_posterior_grad(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    params: &ParamVector,
) -> Result<(f64, Vec<f64>)> {
    if params.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "parameter vector contains non-finite entries".into(),
        ));
    }
    let post = BfaPosterior::new(spec.clone(), panel)?;
    let mut grad = vec![0.0; post.dim()];
    let lp = post.logp_grad(params.values(), &mut grad);
    Ok((lp, grad))
}

/// Draws one chain starting point for the factor baseline: loadings and
/// latent states at N(0, 0.1^2), each log uniqueness at the log sample
/// variance of its centred logit column plus the same jitter. With all
/// loadings zero the column variance is the maximum likelihood estimate
/// of the uniqueness, mirroring the intercept-anchored start of the main
/// model.
pub fn initialize_bfa<R: Rng + ?Sized>(
    spec: &ModelSpec,
    panel: &MortalityPanel,
    rng: &mut R,
) -> Result<ParamVector> {
    if spec.variant() != Variant::Bfa {
        return Err(Error::InvalidInput(
            "BFA initialisation requires the BFA variant".into(),
        ));
    }
    spec.matches_panel(panel)?;
    let centred = panel.logit_matrix(true);
    let rows = centred.nrows() as f64;
    let layout = spec.layout();
    let mut pv = ParamVector::zeros(layout.clone());
    let small = Normal::new(0.0, 0.1).expect("valid normal");
    for x in 0..spec.n_ages() {
        for k in 0..spec.k() {
            pv.values_mut()[layout.alpha(x, k)] = small.sample(rng);
        }
        // Columns are centred, so the mean square is the variance.
        let var = centred.column(x).iter().map(|y| y * y).sum::<f64>() / rows;
        pv.values_mut()[layout.log_psi(x)] = var.max(1e-6).ln() + small.sample(rng);
    }
    for idx in layout.latent_start()..layout.len() {
        pv.values_mut()[idx] = small.sample(rng);
    }
    Ok(pv)
}

/// Model-implied covariance `alpha alpha' + diag(psi)` of one centred
/// logit row, used by the predictive reconstruction and in tests.
pub fn implied_covariance(alpha: &DMatrix<f64>, psi: &[f64]) -> Result<DMatrix<f64>> {
    if alpha.nrows() != psi.len() {
        return Err(Error::InvalidInput(format!(
            "loading rows {} do not match uniqueness count {}",
            alpha.nrows(),
            psi.len()
        )));
    }
    let mut cov = alpha * alpha.transpose();
    for (x, &p) in psi.iter().enumerate() {
        cov[(x, x)] += p;
    }
    Ok(cov)
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
    fn layout_has_expected_length() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Bfa).unwrap();
        let l = spec.layout();
        // J=3, K=2, 5 pooled rows: 6 loadings + 3 uniquenesses + 10 latents.
        assert_eq!(l.len(), 19);
        assert_eq!(l.latent_start(), 9);
    }

    #[test]
    fn zero_loadings_separate_into_per_column_gaussians() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Bfa).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        let log_psi = [0.3, -0.2, 0.1];
        for (x, lp) in log_psi.iter().enumerate() {
            pv.values_mut()[layout.log_psi(x)] = *lp;
        }

        let got = bfa_log_posterior(&spec, &panel, &pv).unwrap();

        // With loadings and latents zero the likelihood is a product of
        // independent column Gaussians; build the same number directly.
        let centred = panel.logit_matrix(true);
        let mut expect = 0.0;
        for x in 0..3 {
            let psi = log_psi[x].exp();
            for r in 0..centred.nrows() {
                let y = centred[(r, x)];
                expect += -0.5 * y * y / psi - 0.5 * psi.ln() - HALF_LN_TWO_PI;
            }
            // Priors on the log uniquenesses (sd 1) and two zero loadings.
            expect += -0.5 * log_psi[x] * log_psi[x] - HALF_LN_TWO_PI;
            expect += 2.0 * (-HALF_LN_TWO_PI);
        }
        // Ten standard normal latents at zero.
        expect += 10.0 * (-HALF_LN_TWO_PI);
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 2, Variant::Bfa).unwrap();
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pv = initialize_bfa(&spec, &panel, &mut rng).unwrap();
        // Push the point away from the origin so every term is active.
        for (idx, val) in pv.values_mut().iter_mut().enumerate() {
            *val += 0.17 * ((idx % 5) as f64 - 2.0) / 5.0;
        }

        let (_, grad) = bfa_log_posterior_grad(&spec, &panel, &pv).unwrap();
        let h = 1e-5;
        for idx in 0..layout.len() {
            let mut hi = pv.clone();
            hi.values_mut()[idx] += h;
            let mut lo = pv.clone();
            lo.values_mut()[idx] -= h;
            let num = (bfa_log_posterior(&spec, &panel, &hi).unwrap()
                - bfa_log_posterior(&spec, &panel, &lo).unwrap())
                / (2.0 * h);
            let denom = num.abs().max(grad[idx].abs()).max(1e-8);
            let rel = (num - grad[idx]).abs() / denom;
            assert!(
                rel < 1e-5,
                "index {idx}: analytic {} vs numeric {num}",
                grad[idx]
            );
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Bfa).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        pv.values_mut()[0] = f64::NAN;
        assert!(bfa_log_posterior(&spec, &panel, &pv).is_err());
    }

    #[test]
    fn overflowing_uniqueness_is_out_of_support() {
        let panel = toy_panel();
        let spec = ModelSpec::new(&panel, 1, Variant::Bfa).unwrap();
        let layout = spec.layout();
        let mut pv = ParamVector::zeros(layout.clone());
        pv.values_mut()[layout.log_psi(0)] = 800.0;
        let lp = bfa_log_posterior(&spec, &panel, &pv).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn simulated_covariance_matches_implied_covariance() {
        // y = alpha theta + e with orthogonal loadings, K=J: the sample
        // covariance of simulated rows must approach alpha alpha' + Psi.
        let j = 3;
        let alpha = DMatrix::from_row_slice(
            j,
            j,
            &[1.2, 0.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 0.7],
        );
        let psi = [0.09, 0.04, 0.01];
        let implied = implied_covariance(&alpha, &psi).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let std = Normal::new(0.0, 1.0).unwrap();
        let draws = 200_000;
        let mut acc = DMatrix::<f64>::zeros(j, j);
        let mut mean = nalgebra::DVector::<f64>::zeros(j);
        for _ in 0..draws {
            let theta =
                nalgebra::DVector::from_fn(j, |_, _| std.sample(&mut rng));
            let e = nalgebra::DVector::from_fn(j, |x, _| {
                psi[x].sqrt() * std.sample(&mut rng)
            });
            let y = &alpha * theta + e;
            mean += &y;
            acc += &y * y.transpose();
        }
        let nf = draws as f64;
        mean /= nf;
        let cov = acc / nf - &mean * mean.transpose();
        for r in 0..j {
            for c in 0..j {
                // Standard error of a covariance entry is O(1/sqrt(n)).
                assert!(
                    (cov[(r, c)] - implied[(r, c)]).abs() < 0.02,
                    "({r},{c}): sample {} vs implied {}",
                    cov[(r, c)],
                    implied[(r, c)]
                );
            }
        }
    }
}
