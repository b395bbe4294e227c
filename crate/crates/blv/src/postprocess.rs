//! Identification post-processing for factor draws.
//!
//! Loadings and latent states enter the likelihood only through the product
//! `alpha_x' theta_i^(t)`, so every posterior draw is free to sit in its own
//! orthogonally rotated frame. This module builds a fixed reference frame
//! from PCA of the data correlation matrix, maps each draw onto it with an
//! orthogonal Procrustes solve, optionally rotates to a varimax solution
//! for interpretability, and reduces the aligned draws to means and highest
//! posterior density intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{MortalityPanel, Scale};
use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Minimum number of draws for a meaningful interval summary.
const MIN_SUMMARY_DRAWS: usize = 100;

/// Pairwise rotation sweeps stop once every angle update is below this.
const VARIMAX_ANGLE_TOL: f64 = 1e-10;

const VARIMAX_MAX_SWEEPS: usize = 1000;

/// Fixed loading frame from PCA of the logit-scale correlation matrix.
///
/// Columns are eigenvectors scaled by the square root of their eigenvalues,
/// ordered by decreasing eigenvalue, with each column's sign fixed so its
/// largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLoadings {
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl ReferenceLoadings {
    /// The J x K reference loading matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Eigenvalues backing the retained columns, decreasing.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// PCA reference loadings for `k` factors over a panel.
pub fn pca_reference(panel: &MortalityPanel, k: usize) -> Result<ReferenceLoadings> {
    let corr = panel.correlation_matrix(Scale::Logit)?;
    pca_from_correlation(&corr, k)
}

/// PCA reference loadings from an explicit symmetric correlation matrix.
pub fn pca_from_correlation(corr: &DMatrix<f64>, k: usize) -> Result<ReferenceLoadings> {
    let j = corr.nrows();
    if corr.ncols() != j || j == 0 {
        return Err(Error::InvalidInput(
            "correlation matrix must be square and non-empty".into(),
        ));
    }
    if k < 1 || k > j {
        return Err(Error::InvalidInput(format!(
            "factor count {k} must lie in 1..={j}"
        )));
    }
    let eig = corr.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues of a finite symmetric matrix are finite")
    });
    // Numerically zero eigenvalues count as rank deficiency.
    let tol = eig.eigenvalues[order[0]].abs() * 1e-12;
    let mut matrix = DMatrix::zeros(j, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let lam = eig.eigenvalues[idx];
        if !(lam > tol) {
            return Err(Error::Degenerate(format!(
                "correlation matrix has fewer than {k} positive eigenvalues"
            )));
        }
        let mut v: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        fix_sign(v.as_mut_slice());
        matrix.set_column(col, &(v * lam.sqrt()));
        eigenvalues.push(lam);
    }
    Ok(ReferenceLoadings {
        matrix,
        eigenvalues,
    })
}

/// Flips a column so its largest-magnitude entry is positive.
///
/// Ties in magnitude resolve to the first occurrence, which keeps the
/// convention deterministic.
fn fix_sign(col: &mut [f64]) {
    let mut lead = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[lead].abs() {
            lead = i;
        }
    }
    if col[lead] < 0.0 {
        for v in col.iter_mut() {
            *v = -*v;
        }
    }
}

/// Orthogonal matrix `L` minimising `||loadings * L - target||_F`.
///
/// Solved through the SVD of `loadings' * target` as `L = U V'`; the full
/// orthogonal group is searched, so reflections are admitted. When the
/// cross-product is rank deficient some directions of `L` are not pinned
/// down by the objective and the factorization's own sign choice breaks
/// the tie.
pub fn procrustes_align(loadings: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if loadings.shape() != target.shape() {
        return Err(Error::InvalidInput(format!(
            "loading shapes disagree: {:?} vs {:?}",
            loadings.shape(),
            target.shape()
        )));
    }
    let cross = loadings.transpose() * target;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u factor requested");
    let v_t = svd.v_t.expect("v factor requested");
    Ok(u * v_t)
}

/// Posterior draws mapped into a common orthogonal frame.
///
/// Holds the rotated draws next to the per-draw orthogonal matrices that
/// produced them; each matrix satisfies `L'L = I` and leaves the posterior
/// density of its draw unchanged.
#[derive(Debug, Clone)]
pub struct AlignedDraws {
    draws: Vec<ParamVector>,
    rotations: Vec<DMatrix<f64>>,
}

impl AlignedDraws {
    pub fn draws(&self) -> &[ParamVector] {
        &self.draws
    }

    pub fn rotations(&self) -> &[DMatrix<f64>] {
        &self.rotations
    }

    pub fn into_draws(self) -> Vec<ParamVector> {
        self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Aligns every draw to a common target loading matrix.
///
/// Each draw's loadings `alpha` become `alpha * L` and every latent vector
/// becomes `L' * latent`, which leaves `alpha_x' theta_i^(t)` invariant.
/// For the autoregressive variant the stored latent block holds the white
/// increments; the state recursion applies the same scalar coefficients to
/// every factor, so rotating increments rotates states identically.
pub fn align_all(draws: &[ParamVector], target: &DMatrix<f64>) -> Result<AlignedDraws> {
    if draws.is_empty() {
        return Err(Error::InvalidInput("no draws to align".into()));
    }
    let expect = (draws[0].layout().n_ages(), draws[0].layout().k());
    if target.shape() != expect {
        return Err(Error::InvalidInput(format!(
            "target shape {:?} does not match the draw layout {:?}",
            target.shape(),
            expect
        )));
    }
    let aligned: Result<Vec<(ParamVector, DMatrix<f64>)>> = draws
        .par_iter()
        .map(|draw| align_draw(draw, target))
        .collect();
    let (draws, rotations) = aligned?.into_iter().unzip();
    Ok(AlignedDraws { draws, rotations })
}

fn align_draw(draw: &ParamVector, target: &DMatrix<f64>) -> Result<(ParamVector, DMatrix<f64>)> {
    let layout = draw.layout().clone();
    let k = layout.k();
    let alpha = draw.alpha_matrix();
    let l = procrustes_align(&alpha, target)?;
    let l_t = l.transpose();
    let mut values = draw.values().to_vec();
    let rotated = &alpha * &l;
    for x in 0..layout.n_ages() {
        for f in 0..k {
            values[layout.alpha(x, f)] = rotated[(x, f)];
        }
    }
    let mut latent = DVector::zeros(k);
    for i in 0..layout.n_countries() {
        for t in 0..layout.counts()[i] {
            for f in 0..k {
                latent[f] = values[layout.latent(i, t, f)];
            }
            let mapped = &l_t * &latent;
            for f in 0..k {
                values[layout.latent(i, t, f)] = mapped[f];
            }
        }
    }
    let aligned = ParamVector::new(layout, values)?;
    Ok((aligned, l))
}

/// Raw varimax criterion: per-column variance of squared loadings, summed.
pub fn varimax_criterion(loadings: &DMatrix<f64>) -> f64 {
    let (j, k) = loadings.shape();
    if j == 0 {
        return 0.0;
    }
    let jf = j as f64;
    let mut total = 0.0;
    for col in 0..k {
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        for row in 0..j {
            let sq = loadings[(row, col)] * loadings[(row, col)];
            s2 += sq;
            s4 += sq * sq;
        }
        total += s4 / jf - (s2 / jf) * (s2 / jf);
    }
    total
}

/// Varimax rotation by pairwise planar sweeps.
///
/// Returns `(rotated, rotation)` with `rotated = loadings * rotation` and
/// `rotation` orthogonal. Each planar step maximises the criterion exactly
/// for its column pair, so the criterion never decreases; sweeps stop when
/// every angle update falls below 1e-10. `K = 1` is returned unchanged.
/// Column order and signs are left as the sweeps produce them; see
/// [`canonicalize_columns`] for the deterministic presentation.
pub fn varimax(loadings: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (j, k) = loadings.shape();
    let mut rotated = loadings.clone();
    let mut rotation = DMatrix::identity(k, k);
    if k < 2 || j == 0 {
        return (rotated, rotation);
    }
    let jf = j as f64;
    #[cfg(debug_assertions)]
    let mut last_criterion = varimax_criterion(&rotated);
    for _ in 0..VARIMAX_MAX_SWEEPS {
        let mut max_angle = 0.0f64;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let (mut a_s, mut b_s, mut c_s, mut d_s) = (0.0, 0.0, 0.0, 0.0);
                for x in 0..j {
                    let ap = rotated[(x, p)];
                    let aq = rotated[(x, q)];
                    let u = ap * ap - aq * aq;
                    let v = 2.0 * ap * aq;
                    a_s += u;
                    b_s += v;
                    c_s += u * u - v * v;
                    d_s += 2.0 * u * v;
                }
                let num = d_s - 2.0 * a_s * b_s / jf;
                let den = c_s - (a_s * a_s - b_s * b_s) / jf;
                let angle = 0.25 * num.atan2(den);
                max_angle = max_angle.max(angle.abs());
                if angle.abs() < VARIMAX_ANGLE_TOL {
                    continue;
                }
                let (s, c) = angle.sin_cos();
                for x in 0..j {
                    let ap = rotated[(x, p)];
                    let aq = rotated[(x, q)];
                    rotated[(x, p)] = c * ap + s * aq;
                    rotated[(x, q)] = c * aq - s * ap;
                }
                for r in 0..k {
                    let rp = rotation[(r, p)];
                    let rq = rotation[(r, q)];
                    rotation[(r, p)] = c * rp + s * rq;
                    rotation[(r, q)] = c * rq - s * rp;
                }
            }
        }
        #[cfg(debug_assertions)]
        {
            let now = varimax_criterion(&rotated);
            debug_assert!(
                now + 1e-9 >= last_criterion,
                "varimax criterion decreased: {last_criterion} -> {now}"
            );
            last_criterion = now;
        }
        if max_angle < VARIMAX_ANGLE_TOL {
            break;
        }
    }
    (rotated, rotation)
}

/// Deterministic column presentation for a loading matrix.
///
/// Orders columns by decreasing sum of squared loadings (stable on ties)
/// and flips each so its largest-magnitude entry is positive. Returns
/// `(canonical, p)` where `p` is the signed permutation with
/// `canonical = loadings * p`.
pub fn canonicalize_columns(loadings: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (j, k) = loadings.shape();
    let ss: Vec<f64> = (0..k)
        .map(|col| loadings.column(col).iter().map(|v| v * v).sum())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ss[b].partial_cmp(&ss[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut canonical = DMatrix::zeros(j, k);
    let mut perm = DMatrix::zeros(k, k);
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut col: Vec<f64> = loadings.column(old_col).iter().copied().collect();
        let flipped = {
            let before = col.first().copied();
            fix_sign(&mut col);
            // A zero-length column cannot occur: j >= 1 is checked upstream.
            before.map(|b| col.first().copied() != Some(b)).unwrap_or(false)
                && col.iter().any(|v| *v != 0.0)
        };
        let sign = if flipped { -1.0 } else { 1.0 };
        for (row, v) in col.iter().enumerate() {
            canonical[(row, new_col)] = *v;
        }
        perm[(old_col, new_col)] = sign;
    }
    (canonical, perm)
}

/// Mean and highest posterior density interval of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
}

/// Shortest contiguous interval covering `ceil(level * S)` sorted draws.
pub fn hpd_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InvalidInput(format!(
            "interval summaries need at least {MIN_SUMMARY_DRAWS} draws, got {}",
            samples.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "interval level {level} must lie in (0, 1)"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite draw in summary input".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws are ordered"));
    let s = sorted.len();
    let want = ((level * s as f64).ceil() as usize).clamp(1, s);
    let mut best = 0usize;
    let mut best_width = f64::INFINITY;
    for lo in 0..=(s - want) {
        let width = sorted[lo + want - 1] - sorted[lo];
        if width < best_width {
            best_width = width;
            best = lo;
        }
    }
    Ok((sorted[best], sorted[best + want - 1]))
}

/// Summarises one scalar stream of draws.
pub fn summarize_scalar(samples: &[f64], level: f64) -> Result<ParameterSummary> {
    let (hpd_low, hpd_high) = hpd_interval(samples, level)?;
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(ParameterSummary {
        mean,
        hpd_low,
        hpd_high,
    })
}

/// Per-parameter means and HPD intervals over pooled draws.
///
/// One entry per scalar in the layout, in layout order; pair with
/// `ParamLayout::names` for labelling.
pub fn summarize(draws: &[ParamVector], level: f64) -> Result<Vec<ParameterSummary>> {
    if draws.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InvalidInput(format!(
            "interval summaries need at least {MIN_SUMMARY_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    let dim = draws[0].layout().len();
    if draws.iter().any(|d| d.layout().len() != dim) {
        return Err(Error::InvalidInput(
            "draws disagree on parameter dimension".into(),
        ));
    }
    (0..dim)
        .into_par_iter()
        .map(|idx| {
            let column: Vec<f64> = draws.iter().map(|d| d.values()[idx]).collect();
            summarize_scalar(&column, level)
        })
        .collect()
}
