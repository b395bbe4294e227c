//! Run artifacts: draw archives, plot-ready CSV tables, digests, and run
//! manifests.
//!
//! Draw archives are directories holding `meta.json` plus one pair of raw
//! binary files per chain. Binary files store little-endian f64 values,
//! draw-major, with lengths cross-checked against the metadata on read.
//! CSV writers format floats in shortest round-trip form so identical
//! inputs always produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::MortalityPanel;
use crate::diagnostics::ScalarDiagnostics;
use crate::error::{Error, Result};
use crate::model::{ParamLayout, ParamVector};
use crate::postprocess::ParameterSummary;
use crate::sampler::ChainOutput;
use crate::selection::SelectionRow;
use crate::simulator::{CellOutcome, RecoveryReport};

/// Per-chain sampler statistics stored in archive metadata.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainStats {
    pub accept_mean: f64,
    pub divergences: usize,
    pub divergence_warning: bool,
    pub step_size: f64,
}

/// Metadata describing a draw archive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchiveMeta {
    /// Model variant label, `blv` or `bfa`.
    pub variant: String,
    /// Fitted factor count.
    pub k: usize,
    /// Parameter vector length.
    pub dim: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
    /// Parameter names in storage order.
    pub names: Vec<String>,
    /// Digest of the panel the fit consumed, for later cross-checks.
    pub panel_digest: String,
    /// Whether stored draws were rotation-aligned.
    pub aligned: bool,
    pub chain_stats: Vec<ChainStats>,
}

/// A draw archive read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawArchive {
    pub meta: ArchiveMeta,
    /// Per chain, per draw, flat parameter vectors.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// Per chain log densities.
    pub log_densities: Vec<Vec<f64>>,
}

impl DrawArchive {
    /// Pools all chains into typed parameter vectors under `layout`.
    pub fn pooled_draws(&self, layout: &std::sync::Arc<ParamLayout>) -> Result<Vec<ParamVector>> {
        if layout.len() != self.meta.dim {
            return Err(Error::InvalidInput(format!(
                "archive stores vectors of length {}, layout expects {}",
                self.meta.dim,
                layout.len()
            )));
        }
        self.draws
            .iter()
            .flat_map(|chain| chain.iter())
            .map(|v| ParamVector::new(layout.clone(), v.clone()))
            .collect()
    }
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.json")
}

fn draws_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("draws_{chain}.bin"))
}

fn logdens_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("logdens_{chain}.bin"))
}

fn write_f64_file(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64_file(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::Archive(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

/// Writes a draw archive directory; returns the files written.
pub fn write_draw_archive(
    dir: impl AsRef<Path>,
    meta: &ArchiveMeta,
    outputs: &[ChainOutput],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if meta.chains != outputs.len() {
        return Err(Error::InvalidInput(format!(
            "metadata declares {} chains, got {}",
            meta.chains,
            outputs.len()
        )));
    }
    for o in outputs {
        if o.draws.len() != meta.draws_per_chain
            || o.draws.iter().any(|d| d.len() != meta.dim)
            || o.log_densities.len() != meta.draws_per_chain
        {
            return Err(Error::InvalidInput(
                "chain output shape does not match archive metadata".into(),
            ));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mp = meta_path(dir);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Archive(format!("could not encode metadata: {e}")))?;
    std::fs::write(&mp, json + "\n")?;
    written.push(mp);
    for (c, o) in outputs.iter().enumerate() {
        let dp = draws_path(dir, c);
        write_f64_file(&dp, o.draws.iter().flat_map(|d| d.iter().copied()))?;
        written.push(dp);
        let lp = logdens_path(dir, c);
        write_f64_file(&lp, o.log_densities.iter().copied())?;
        written.push(lp);
    }
    Ok(written)
}

/// Reads a draw archive directory back, validating shapes.
pub fn read_draw_archive(dir: impl AsRef<Path>) -> Result<DrawArchive> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(meta_path(dir))?;
    let meta: ArchiveMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Archive(format!("bad archive metadata: {e}")))?;
    if meta.names.len() != meta.dim {
        return Err(Error::Archive(
            "archive metadata names do not match the stored dimension".into(),
        ));
    }
    let mut draws = Vec::with_capacity(meta.chains);
    let mut log_densities = Vec::with_capacity(meta.chains);
    for c in 0..meta.chains {
        let flat = read_f64_file(&draws_path(dir, c), meta.draws_per_chain * meta.dim)?;
        draws.push(
            flat.chunks_exact(meta.dim)
                .map(|d| d.to_vec())
                .collect::<Vec<Vec<f64>>>(),
        );
        log_densities.push(read_f64_file(&logdens_path(dir, c), meta.draws_per_chain)?);
    }
    Ok(DrawArchive {
        meta,
        draws,
        log_densities,
    })
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path.as_ref())?))
}

/// A path with the digest of its contents.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Digests a list of files, storing paths relative to `base` when possible.
pub fn digest_files(base: &Path, files: &[PathBuf]) -> Result<Vec<FileDigest>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(base).unwrap_or(f);
            Ok(FileDigest {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_file(f)?,
            })
        })
        .collect()
}

/// Record of one command run: what ran, on what, producing what.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    /// Digest of the fully resolved configuration JSON.
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

/// Writes `manifest.json` into `dir`; returns its path.
pub fn write_manifest(dir: impl AsRef<Path>, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.as_ref().join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Archive(format!("could not encode manifest: {e}")))?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}

fn push_float(out: &mut String, v: f64) {
    let _ = write!(out, "{v}");
}

fn finish_csv(path: &Path, out: String) -> Result<()> {
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameter summary table: one row per parameter, convergence columns
/// filled when diagnostics are available.
pub fn write_summary_csv(
    path: impl AsRef<Path>,
    names: &[String],
    summaries: &[ParameterSummary],
    diagnostics: Option<&[ScalarDiagnostics]>,
) -> Result<()> {
    if names.len() != summaries.len() {
        return Err(Error::InvalidInput(
            "summary table needs one name per parameter".into(),
        ));
    }
    if let Some(d) = diagnostics {
        if d.len() != names.len() {
            return Err(Error::InvalidInput(
                "diagnostics length does not match parameter count".into(),
            ));
        }
    }
    let mut out = String::from("name,mean,hpd_low,hpd_high,r_hat,ess\n");
    for (idx, (name, s)) in names.iter().zip(summaries).enumerate() {
        let _ = write!(out, "{name},");
        push_float(&mut out, s.mean);
        out.push(',');
        push_float(&mut out, s.hpd_low);
        out.push(',');
        push_float(&mut out, s.hpd_high);
        out.push(',');
        if let Some(d) = diagnostics {
            if let Some(r) = d[idx].r_hat {
                push_float(&mut out, r);
            }
            out.push(',');
            if let Some(e) = d[idx].ess {
                push_float(&mut out, e);
            }
        } else {
            out.push(',');
        }
        out.push('\n');
    }
    finish_csv(path.as_ref(), out)
}

/// One row of the model-choice table, fitted or failed.
#[derive(Debug, Clone)]
pub struct SelectionTableRow {
    pub k: usize,
    pub row: Option<SelectionRow>,
    /// Failure message when `row` is `None`.
    pub message: String,
}

/// Model-choice table across candidate factor counts; the minimum-BIC row
/// among fitted rows is flagged in the `selected` column.
pub fn write_selection_csv(path: impl AsRef<Path>, rows: &[SelectionTableRow]) -> Result<()> {
    let selected_k = rows
        .iter()
        .filter_map(|r| r.row.as_ref())
        .min_by(|a, b| a.bic_m.total_cmp(&b.bic_m))
        .map(|r| r.k);
    let mut out = String::from(
        "k,status,selected,log_marginal,log_marginal_se,bic_m,waic_c,log_kappa_mean,\
         log_kappa_hpd_low,log_kappa_hpd_high,rmse_q,mape_q,rmse_d,mape_d,cophenetic,message\n",
    );
    for r in rows {
        match &r.row {
            Some(row) => {
                let _ = write!(
                    out,
                    "{},ok,{},",
                    r.k,
                    if selected_k == Some(r.k) { "1" } else { "0" }
                );
                for (i, v) in [
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
                ]
                .into_iter()
                .enumerate()
                {
                    if i > 0 {
                        out.push(',');
                    }
                    push_float(&mut out, v);
                }
                out.push_str(",\n");
            }
            None => {
                let msg = r.message.replace([',', '\n'], ";");
                let _ = writeln!(out, "{},failed,0,,,,,,,,,,,,,{msg}", r.k);
            }
        }
    }
    finish_csv(path.as_ref(), out)
}

/// Kendall trend table: one row per country and age group.
pub fn write_trend_csv(path: impl AsRef<Path>, rows: &[crate::data::TrendRow]) -> Result<()> {
    let mut out = String::from("country,age,tau\n");
    for r in rows {
        let _ = write!(out, "{},{},", r.country, r.age);
        push_float(&mut out, r.tau);
        out.push('\n');
    }
    finish_csv(path.as_ref(), out)
}

/// Long-format correlation table over age-group pairs.
pub fn write_correlation_csv(
    path: impl AsRef<Path>,
    ages: &[u32],
    corr: &nalgebra::DMatrix<f64>,
) -> Result<()> {
    if corr.nrows() != ages.len() || corr.ncols() != ages.len() {
        return Err(Error::InvalidInput(
            "correlation matrix does not match the age list".into(),
        ));
    }
    let mut out = String::from("age_row,age_col,correlation\n");
    for (i, a) in ages.iter().enumerate() {
        for (j, b) in ages.iter().enumerate() {
            let _ = write!(out, "{a},{b},");
            push_float(&mut out, corr[(i, j)]);
            out.push('\n');
        }
    }
    finish_csv(path.as_ref(), out)
}

/// Long-format observed/fitted surface: one row per country, time, age.
pub fn write_surface_csv(
    path: impl AsRef<Path>,
    panel: &MortalityPanel,
    q_hat: &[nalgebra::DMatrix<f64>],
) -> Result<()> {
    if q_hat.len() != panel.n_countries()
        || q_hat
            .iter()
            .zip(panel.series())
            .any(|(m, s)| m.nrows() != s.len() || m.ncols() != panel.n_ages())
    {
        return Err(Error::InvalidInput(
            "fitted surface does not match the panel shape".into(),
        ));
    }
    let mut out = String::from("country,time,age,observed,fitted\n");
    for (i, s) in panel.series().iter().enumerate() {
        for t in 0..s.len() {
            for (x, age) in panel.age_groups().iter().enumerate() {
                let _ = write!(
                    out,
                    "{},{},{},",
                    s.country(),
                    s.first_time() + t as u32,
                    age.lower_bound()
                );
                push_float(&mut out, s.value(t, x));
                out.push(',');
                push_float(&mut out, q_hat[i][(t, x)]);
                out.push('\n');
            }
        }
    }
    finish_csv(path.as_ref(), out)
}

/// Country-period label of every stacked row, panel order.
pub fn stacked_row_labels(panel: &MortalityPanel) -> Vec<(String, u32)> {
    let mut labels = Vec::with_capacity(panel.total_rows());
    for s in panel.series() {
        for t in 0..s.len() {
            labels.push((s.country().to_string(), s.first_time() + t as u32));
        }
    }
    labels
}

/// Long-format pairwise distance table over stacked country-period rows,
/// pairs in lexicographic order.
pub fn write_distance_csv(
    path: impl AsRef<Path>,
    labels: &[(String, u32)],
    observed: &[f64],
    fitted: &[f64],
) -> Result<()> {
    let m = labels.len();
    let want = m * (m - 1) / 2;
    if observed.len() != want || fitted.len() != want {
        return Err(Error::InvalidInput(format!(
            "{m} rows imply {want} pairs, got {} observed and {} fitted",
            observed.len(),
            fitted.len()
        )));
    }
    let mut out = String::from("country_a,time_a,country_b,time_b,observed,fitted\n");
    let mut p = 0usize;
    for a in 0..m {
        for b in (a + 1)..m {
            let _ = write!(
                out,
                "{},{},{},{},",
                labels[a].0, labels[a].1, labels[b].0, labels[b].1
            );
            push_float(&mut out, observed[p]);
            out.push(',');
            push_float(&mut out, fitted[p]);
            out.push('\n');
            p += 1;
        }
    }
    finish_csv(path.as_ref(), out)
}

/// Long-format metric table.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (name, v) in metrics {
        let _ = write!(out, "{name},");
        push_float(&mut out, *v);
        out.push('\n');
    }
    finish_csv(path.as_ref(), out)
}

/// Per-chain sampler statistics table.
pub fn write_chain_stats_csv(path: impl AsRef<Path>, stats: &[ChainStats]) -> Result<()> {
    let mut out = String::from("chain,accept_mean,divergences,divergence_warning,step_size\n");
    for (c, s) in stats.iter().enumerate() {
        let _ = write!(out, "{c},");
        push_float(&mut out, s.accept_mean);
        let _ = write!(
            out,
            ",{},{},",
            s.divergences,
            if s.divergence_warning { 1 } else { 0 }
        );
        push_float(&mut out, s.step_size);
        out.push('\n');
    }
    finish_csv(path.as_ref(), out)
}

/// Selected-K scoreboard: one row per selection metric, one column per
/// candidate factor count.
pub fn write_recovery_scoreboard_csv(
    path: impl AsRef<Path>,
    report: &RecoveryReport,
) -> Result<()> {
    let mut out = String::from("metric");
    for k in &report.k_grid {
        let _ = write!(out, ",k_{k}");
    }
    out.push_str(",completed_replicates\n");
    for (label, hist) in [
        ("bic_m", &report.selected_by_bic),
        ("waic_c", &report.selected_by_waic),
    ] {
        out.push_str(label);
        for v in hist {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", report.completed_replicates);
    }
    finish_csv(path.as_ref(), out)
}

/// Per-cell recovery results, one row per (replicate, fitted K).
pub fn write_recovery_cells_csv(path: impl AsRef<Path>, report: &RecoveryReport) -> Result<()> {
    let mut out = String::from(
        "replicate,k,status,log_marginal,log_marginal_se,bic_m,waic_c,log_kappa_mean,\
         max_r_hat,divergences,message\n",
    );
    for cell in &report.cells {
        match &cell.outcome {
            CellOutcome::Fitted(m) => {
                let _ = write!(out, "{},{},ok,", cell.replicate, cell.k);
                for v in [m.log_marginal, m.log_marginal_se, m.bic_m, m.waic_c] {
                    push_float(&mut out, v);
                    out.push(',');
                }
                push_float(&mut out, m.log_kappa_mean);
                out.push(',');
                if let Some(r) = m.max_r_hat {
                    push_float(&mut out, r);
                }
                let _ = writeln!(out, ",{},", m.divergences);
            }
            CellOutcome::Failed { message } => {
                let msg = message.replace([',', '\n'], ";");
                let _ = writeln!(out, "{},{},failed,,,,,,,,{msg}", cell.replicate, cell.k);
            }
        }
    }
    finish_csv(path.as_ref(), out)
}

/// Interval-coverage table at the true factor count.
pub fn write_coverage_csv(path: impl AsRef<Path>, report: &RecoveryReport) -> Result<()> {
    let mut out = String::from("replicate,name,truth,mean,hpd_low,hpd_high,covered\n");
    for c in &report.coverage {
        let _ = write!(out, "{},{},", c.replicate, c.name);
        for v in [c.truth, c.mean, c.hpd_low, c.hpd_high] {
            push_float(&mut out, v);
            out.push(',');
        }
        let _ = writeln!(out, "{}", if c.covered { 1 } else { 0 });
    }
    finish_csv(path.as_ref(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{CellMetrics, CoverageRecord, RecoveryCell};

    fn fake_outputs(chains: usize, draws: usize, dim: usize) -> Vec<ChainOutput> {
        (0..chains)
            .map(|c| ChainOutput {
                draws: (0..draws)
                    .map(|d| (0..dim).map(|p| (c * 100 + d * 10 + p) as f64 * 0.25).collect())
                    .collect(),
                log_densities: (0..draws).map(|d| -((c + d) as f64)).collect(),
                accept_mean: 0.9,
                divergences: c,
                divergence_warning: false,
                step_size: 0.1 * (c + 1) as f64,
                inv_mass_diag: vec![1.0; dim],
            })
            .collect()
    }

    fn fake_meta(chains: usize, draws: usize, dim: usize) -> ArchiveMeta {
        ArchiveMeta {
            variant: "blv".into(),
            k: 1,
            dim,
            chains,
            draws_per_chain: draws,
            seed: 7,
            names: (0..dim).map(|p| format!("p{p}")).collect(),
            panel_digest: "abc".into(),
            aligned: true,
            chain_stats: (0..chains)
                .map(|c| ChainStats {
                    accept_mean: 0.9,
                    divergences: c,
                    divergence_warning: false,
                    step_size: 0.1 * (c + 1) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn draw_archive_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = fake_outputs(2, 3, 4);
        let meta = fake_meta(2, 3, 4);
        let files = write_draw_archive(dir.path(), &meta, &outputs).unwrap();
        assert_eq!(files.len(), 1 + 2 * 2);
        let back = read_draw_archive(dir.path()).unwrap();
        assert_eq!(back.meta, meta);
        for (c, o) in outputs.iter().enumerate() {
            assert_eq!(back.draws[c], o.draws);
            assert_eq!(back.log_densities[c], o.log_densities);
        }
    }

    #[test]
    fn draw_archive_rejects_shape_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = fake_outputs(2, 3, 4);
        let mut meta = fake_meta(2, 3, 4);
        meta.draws_per_chain = 5;
        assert!(write_draw_archive(dir.path(), &meta, &outputs).is_err());
        let meta = fake_meta(2, 3, 4);
        write_draw_archive(dir.path(), &meta, &outputs).unwrap();
        // Truncate one binary file and expect a read error.
        let victim = dir.path().join("draws_1.bin");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            read_draw_archive(dir.path()),
            Err(Error::Archive(_))
        ));
    }

    #[test]
    fn pooled_draws_need_a_matching_layout() {
        use crate::data::MortalityPanel;
        use crate::model::{ModelSpec, Variant};
        let panel = {
            let ages = vec![
                crate::data::AgeGroup::new(0).unwrap(),
                crate::data::AgeGroup::new(40).unwrap(),
            ];
            let series = vec![MortalityPanel::series_from_matrix(
                "AAA",
                1,
                nalgebra::DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.11, 0.21, 0.12, 0.22]),
            )];
            MortalityPanel::new(ages, series).unwrap()
        };
        let spec = ModelSpec::new(&panel, 1, Variant::Blv).unwrap();
        let dim = spec.layout().len();
        let dir = tempfile::tempdir().unwrap();
        let outputs = fake_outputs(2, 3, dim);
        let mut meta = fake_meta(2, 3, dim);
        meta.names = spec.layout().names();
        write_draw_archive(dir.path(), &meta, &outputs).unwrap();
        let back = read_draw_archive(dir.path()).unwrap();
        let pooled = back.pooled_draws(&spec.layout()).unwrap();
        assert_eq!(pooled.len(), 6);
        assert_eq!(pooled[0].values(), outputs[0].draws[0].as_slice());
        // A layout of the wrong dimension is refused.
        let spec2 = ModelSpec::new(&panel, 2, Variant::Blv).unwrap();
        assert!(back.pooled_draws(&spec2.layout()).is_err());
    }

    #[test]
    fn summary_csv_is_deterministic_and_golden() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let names = vec!["a".to_string(), "b".to_string()];
        let summaries = vec![
            ParameterSummary {
                mean: 0.5,
                hpd_low: -1.25,
                hpd_high: 2.0,
            },
            ParameterSummary {
                mean: 10.0,
                hpd_low: 9.5,
                hpd_high: 10.5,
            },
        ];
        let diags = vec![
            ScalarDiagnostics {
                r_hat: Some(1.0),
                ess: Some(400.0),
            },
            ScalarDiagnostics {
                r_hat: None,
                ess: None,
            },
        ];
        write_summary_csv(&path, &names, &summaries, Some(&diags)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "name,mean,hpd_low,hpd_high,r_hat,ess\n\
             a,0.5,-1.25,2,1,400\n\
             b,10,9.5,10.5,,\n"
        );
        let digest_one = sha256_file(&path).unwrap();
        write_summary_csv(&path, &names, &summaries, Some(&diags)).unwrap();
        assert_eq!(digest_one, sha256_file(&path).unwrap());
    }

    #[test]
    fn selection_csv_flags_the_minimum_bic_row_and_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selection.csv");
        let row = |k: usize, bic: f64| SelectionRow {
            k,
            log_marginal: -100.0,
            log_marginal_se: 1.0,
            bic_m: bic,
            waic_c: -50.0,
            log_kappa_mean: 8.0,
            log_kappa_hpd_low: 7.5,
            log_kappa_hpd_high: 8.5,
            rmse_q: 0.01,
            mape_q: 2.0,
            rmse_d: 0.1,
            mape_d: 5.0,
            cophenetic: 0.5,
        };
        let rows = vec![
            SelectionTableRow {
                k: 1,
                row: Some(row(1, 230.0)),
                message: String::new(),
            },
            SelectionTableRow {
                k: 2,
                row: Some(row(2, 210.0)),
                message: String::new(),
            },
            SelectionTableRow {
                k: 3,
                row: None,
                message: "sampler failed, with commas".into(),
            },
        ];
        write_selection_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,ok,0,"));
        assert!(lines[2].starts_with("2,ok,1,"));
        assert_eq!(lines[3], "3,failed,0,,,,,,,,,,,,,sampler failed; with commas");
    }

    #[test]
    fn recovery_tables_match_a_fabricated_report() {
        let report = RecoveryReport {
            scenario: "toy".into(),
            k_grid: vec![1, 2],
            replicates: 2,
            completed_replicates: 2,
            complete: true,
            resampled_observations: 0,
            cells: vec![
                RecoveryCell {
                    replicate: 0,
                    k: 1,
                    outcome: CellOutcome::Fitted(CellMetrics {
                        log_marginal: -10.0,
                        log_marginal_se: 0.5,
                        bic_m: 30.0,
                        waic_c: -20.0,
                        log_kappa_mean: 8.0,
                        max_r_hat: Some(1.01),
                        divergences: 0,
                    }),
                },
                RecoveryCell {
                    replicate: 0,
                    k: 2,
                    outcome: CellOutcome::Failed {
                        message: "boom".into(),
                    },
                },
            ],
            selected_by_bic: vec![1, 1],
            selected_by_waic: vec![0, 2],
            coverage: vec![CoverageRecord {
                replicate: 0,
                name: "phi[0]".into(),
                truth: 0.9,
                mean: 0.88,
                hpd_low: 0.8,
                hpd_high: 0.95,
                covered: true,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let sb = dir.path().join("scoreboard.csv");
        write_recovery_scoreboard_csv(&sb, &report).unwrap();
        assert_eq!(
            std::fs::read_to_string(&sb).unwrap(),
            "metric,k_1,k_2,completed_replicates\nbic_m,1,1,2\nwaic_c,0,2,2\n"
        );
        let cells = dir.path().join("cells.csv");
        write_recovery_cells_csv(&cells, &report).unwrap();
        let text = std::fs::read_to_string(&cells).unwrap();
        assert!(text.contains("0,1,ok,-10,0.5,30,-20,8,1.01,0,"));
        assert!(text.contains("0,2,failed,,,,,,,,boom"));
        let cov = dir.path().join("coverage.csv");
        write_coverage_csv(&cov, &report).unwrap();
        assert_eq!(
            std::fs::read_to_string(&cov).unwrap(),
            "replicate,name,truth,mean,hpd_low,hpd_high,covered\n\
             0,phi[0],0.9,0.88,0.8,0.95,1\n"
        );
    }

    #[test]
    fn manifest_digests_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let f1 = dir.path().join("one.txt");
        std::fs::write(&f1, "hello").unwrap();
        // Known SHA-256 of the ASCII string "hello".
        let digests = digest_files(dir.path(), &[f1.clone()]).unwrap();
        assert_eq!(digests[0].path, "one.txt");
        assert_eq!(
            digests[0].sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        let manifest = RunManifest {
            command: "fit".into(),
            version: "0.1.0".into(),
            seed: 11,
            threads: 2,
            config_digest: sha256_bytes(b"{}"),
            inputs: digests.clone(),
            outputs: digests,
            wall_clock_seconds: 1.5,
        };
        let mp = write_manifest(dir.path(), &manifest).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn surface_distance_and_metric_tables_are_golden() {
        use crate::data::AgeGroup;
        let ages = vec![AgeGroup::new(0).unwrap(), AgeGroup::new(60).unwrap()];
        let series = vec![MortalityPanel::series_from_matrix(
            "AAA",
            2000,
            nalgebra::DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.15, 0.25]),
        )];
        let panel = MortalityPanel::new(ages, series).unwrap();
        let q_hat = vec![nalgebra::DMatrix::from_row_slice(
            2,
            2,
            &[0.1, 0.2, 0.15, 0.25],
        )];
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("surface.csv");
        write_surface_csv(&sp, &panel, &q_hat).unwrap();
        assert_eq!(
            std::fs::read_to_string(&sp).unwrap(),
            "country,time,age,observed,fitted\n\
             AAA,2000,0,0.1,0.1\n\
             AAA,2000,60,0.2,0.2\n\
             AAA,2001,0,0.15,0.15\n\
             AAA,2001,60,0.25,0.25\n"
        );
        let labels = stacked_row_labels(&panel);
        assert_eq!(labels, vec![("AAA".into(), 2000), ("AAA".into(), 2001)]);
        let dp = dir.path().join("distance.csv");
        write_distance_csv(&dp, &labels, &[0.25], &[0.5]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&dp).unwrap(),
            "country_a,time_a,country_b,time_b,observed,fitted\n\
             AAA,2000,AAA,2001,0.25,0.5\n"
        );
        let mp = dir.path().join("metrics.csv");
        write_metrics_csv(&mp, &[("rmse_q".into(), 0.5)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&mp).unwrap(),
            "metric,value\nrmse_q,0.5\n"
        );
        let cp = dir.path().join("corr.csv");
        let corr = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        write_correlation_csv(&cp, &[0, 60], &corr).unwrap();
        assert_eq!(
            std::fs::read_to_string(&cp).unwrap(),
            "age_row,age_col,correlation\n0,0,1\n0,60,0.5\n60,0,0.5\n60,60,1\n"
        );
    }
}
