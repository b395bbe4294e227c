//! Convergence diagnostics: rank-normalised split R-hat and
//! autocorrelation-based effective sample size with Geyer's initial
//! monotone truncation.
//!
//! Both statistics first split every chain in half, so slow trends
//! inside a single chain register as disagreement between chains.
//! Constant parameters yield `None` rather than NaN.

use crate::error::{Error, Result};

/// Inverse standard normal CDF (Wichura's PPND16 rational
/// approximations), accurate to about 1e-15 over (0, 1).
pub fn inv_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie strictly in (0,1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-9) * r
            + 1.846_318_317_510_054_8e-6)
            * r
            + 7.868_691_311_456_132e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_879e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Per-parameter convergence summary.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalarDiagnostics {
    /// `None` when the parameter is constant across all draws.
    pub r_hat: Option<f64>,
    pub ess: Option<f64>,
}

fn validate(chains: &[&[f64]]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::InvalidInput(
            "diagnostics need at least two chains".into(),
        ));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidInput(
            "diagnostics need chains of equal length".into(),
        ));
    }
    if len < 4 {
        return Err(Error::InvalidInput(
            "diagnostics need at least four draws per chain".into(),
        ));
    }
    if chains
        .iter()
        .any(|c| c.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidInput(
            "diagnostics need finite draws".into(),
        ));
    }
    Ok(len)
}

fn is_constant(chains: &[&[f64]]) -> bool {
    let first = chains[0][0];
    chains.iter().all(|c| c.iter().all(|&v| v == first))
}

/// Splits every chain in half; an odd middle element is dropped.
fn split_chains(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces values by normal quantiles of their pooled fractional ranks,
/// averaging ranks over ties.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_index = 0usize;
    for c in chains {
        for &v in c {
            indexed.push((v, flat_index));
            flat_index += 1;
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite draws"));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average.
        let avg = (i + j + 2) as f64 / 2.0;
        for item in &indexed[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let n = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut flat_index = 0usize;
    for c in chains {
        let mut z = Vec::with_capacity(c.len());
        for _ in c {
            let frac = (ranks[flat_index] - 0.375) / (n + 0.25);
            z.push(inv_normal_cdf(frac));
            flat_index += 1;
        }
        out.push(z);
    }
    out
}

struct ChainMoments {
    means: Vec<f64>,
    within: f64,
    var_plus: f64,
}

fn moments(chains: &[Vec<f64>]) -> ChainMoments {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n)
        .collect();
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let between_over_n =
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let var_plus = (n - 1.0) / n * within + between_over_n;
    ChainMoments {
        means,
        within,
        var_plus,
    }
}

/// Rank-normalised split R-hat. `None` for a constant parameter;
/// infinite when chains are stuck at distinct constants.
pub fn r_hat(chains: &[&[f64]]) -> Result<Option<f64>> {
    validate(chains)?;
    if is_constant(chains) {
        return Ok(None);
    }
    let z = rank_normalize(&split_chains(chains));
    let mo = moments(&z);
    if mo.within == 0.0 {
        return Ok(Some(f64::INFINITY));
    }
    Ok(Some((mo.var_plus / mo.within).sqrt()))
}

/// Effective sample size across chains: multi-chain autocorrelations
/// truncated at Geyer's initial monotone sequence. `None` for a constant
/// parameter.
pub fn effective_sample_size(chains: &[&[f64]]) -> Result<Option<f64>> {
    validate(chains)?;
    if is_constant(chains) {
        return Ok(None);
    }
    let split = split_chains(chains);
    let mo = moments(&split);
    if mo.var_plus <= 0.0 {
        return Ok(None);
    }
    let n = split[0].len();
    let m = split.len();

    // Biased per-chain autocovariances, averaged over chains.
    let max_lag = n - 1;
    let mut mean_acov = vec![0.0; max_lag + 1];
    for (c, &mu) in split.iter().zip(&mo.means) {
        for (lag, slot) in mean_acov.iter_mut().enumerate() {
            let mut s = 0.0;
            for t in 0..n - lag {
                s += (c[t] - mu) * (c[t + lag] - mu);
            }
            *slot += s / n as f64;
        }
    }
    for slot in mean_acov.iter_mut() {
        *slot /= m as f64;
    }

    // Combined autocorrelation at lag 0 is 1 by definition; later lags
    // fold the between-chain variance in so separated chains shrink the
    // effective size.
    let rho = |lag: usize| -> f64 {
        1.0 - (mo.within - mean_acov[lag]) / mo.var_plus
    };
    let mut tau_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0usize;
    while lag + 1 <= max_lag {
        let pair = if lag == 0 {
            1.0 + rho(1)
        } else {
            rho(lag) + rho(lag + 1)
        };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau_sum += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * tau_sum).max(1.0 / (m * n) as f64);
    Ok(Some((m * n) as f64 / tau))
}

/// Both diagnostics for one scalar parameter.
pub fn diagnose(chains: &[&[f64]]) -> Result<ScalarDiagnostics> {
    Ok(ScalarDiagnostics {
        r_hat: r_hat(chains)?,
        ess: effective_sample_size(chains)?,
    })
}
