//! Shared numerical oracles and process helpers for integration tests.
//!
//! The quadrature routines here are deliberately independent of the
//! library's evaluation paths: plain Simpson rules plus power-law
//! substitutions, so library results can be checked against them as
//! references.

#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

/// Composite three-point Simpson estimate on one interval.
fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adapt(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= 15.0 * tol {
        return refined + (refined - whole) / 15.0;
    }
    adapt(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adapt(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature with Richardson acceptance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson_rule(a, b, fa, fm, fb);
    adapt(f, a, b, fa, fm, fb, whole, tol, 64)
}

/// Integrates `f` over the open unit interval where `f` behaves like
/// `y^(a_shape-1)` near 0 and `(1-y)^(b_shape-1)` near 1.
///
/// Sub-unit shapes get a power substitution that removes the endpoint
/// singularity; the interval is split at the beta mean so sharp
/// high-precision densities peak at a partition point. Shapes below 0.3
/// are refused: their mass extends below floating-point range.
pub fn integrate_unit_interval(
    f: &dyn Fn(f64) -> f64,
    a_shape: f64,
    b_shape: f64,
    tol: f64,
) -> f64 {
    assert!(
        a_shape >= 0.3 && b_shape >= 0.3,
        "shapes this small put non-negligible mass below f64 range"
    );
    let split = (a_shape / (a_shape + b_shape)).clamp(1e-6, 1.0 - 1e-6);
    let half_tol = 0.5 * tol;
    // Cut-off for the substituted variable; neglected mass is checked.
    let t_lo = 1e-18;
    let left = if a_shape >= 1.0 {
        adaptive_simpson(f, 0.0, split, half_tol)
    } else {
        let g = move |t: f64| f(t.powf(1.0 / a_shape)) * t.powf(1.0 / a_shape - 1.0) / a_shape;
        let hi = split.powf(a_shape);
        assert!(g(t_lo) * t_lo < 0.1 * tol, "left tail cut-off too coarse");
        adaptive_simpson(&g, t_lo, hi, half_tol)
    };
    let right = if b_shape >= 1.0 {
        let h = move |u: f64| f(1.0 - u);
        adaptive_simpson(&h, 0.0, 1.0 - split, half_tol)
    } else {
        let g = move |t: f64| {
            f(1.0 - t.powf(1.0 / b_shape)) * t.powf(1.0 / b_shape - 1.0) / b_shape
        };
        let hi = (1.0 - split).powf(b_shape);
        assert!(g(t_lo) * t_lo < 0.1 * tol, "right tail cut-off too coarse");
        adaptive_simpson(&g, t_lo, hi, half_tol)
    };
    left + right
}

/// Log of the double integral of `exp(logf)` over `[lo, hi]^2` by
/// composite Simpson with `n` intervals per axis (`n` even), evaluated
/// with a running maximum shift so sharp integrands cannot overflow.
pub fn log_integral_2d(logf: &dyn Fn(f64, f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "need an even interval count");
    let h = (hi - lo) / n as f64;
    let weight = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut values = Vec::with_capacity((n + 1) * (n + 1));
    let mut peak = f64::NEG_INFINITY;
    for i in 0..=n {
        let x = lo + h * i as f64;
        for j in 0..=n {
            let y = lo + h * j as f64;
            let lg = logf(x, y);
            peak = peak.max(lg);
            values.push(lg);
        }
    }
    assert!(peak.is_finite(), "integrand is nowhere finite on the grid");
    let mut sum = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            sum += weight(i) * weight(j) * (values[i * (n + 1) + j] - peak).exp();
        }
    }
    peak + (sum * (h / 3.0) * (h / 3.0)).ln()
}

/// Runs the installed CLI binary; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_blv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Digest of one file, as the library computes it.
pub fn digest(path: &Path) -> String {
    blv::archive::sha256_file(path).expect("file digests")
}

/// Recursively digests every regular file under `dir`, sorted by
/// relative path, skipping file names in `skip`.
pub fn digest_tree(dir: &Path, skip: &[&str]) -> Vec<(String, String)> {
    fn walk(base: &Path, dir: &Path, skip: &[&str], out: &mut Vec<(String, String)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .expect("directory listing")
            .map(|e| e.expect("directory entry").path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(base, &path, skip, out);
            } else {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                if skip.contains(&name.as_str()) {
                    continue;
                }
                let rel = path
                    .strip_prefix(base)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, blv::archive::sha256_file(&path).expect("file digests")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, skip, &mut out);
    out
}
