//! Oracle table run by the `selfcheck` subcommand.

use std::fmt::Write as _;

use attnlimit_core::attention::{sample_output_batch, AttentionConfig, Coordinate};
use attnlimit_core::limitlaw::{build_limit_spec, clip_second_moment, fourth_moment_isserlis};
use attnlimit_core::rng;
use attnlimit_core::stats::{kde, kl_divergence, SampleSet, DEFAULT_GRID_POINTS};
use serde::{Deserialize, Serialize};

use crate::oracle;

/// Clip constants checked against quadrature.
pub const CLIP_CONSTANTS: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 5.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        CheckRow {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub rows: Vec<CheckRow>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text table, one row per check.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>12}  status",
            "check", "measured", "tolerance"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3e}  {:>12.3e}  {}",
                r.name,
                r.measured,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// Replaceable pieces of the library under test, for negative controls.
#[derive(Debug, Clone, Copy)]
pub struct Hooks {
    pub clip_moment: fn(f64) -> f64,
}

fn library_clip_moment(c: f64) -> f64 {
    clip_second_moment(c).expect("nonnegative clip constant")
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks {
            clip_moment: library_clip_moment,
        }
    }
}

pub const CLIP_ORACLE: &str = "clip moment vs quadrature";
pub const CLIP_SATURATION: &str = "clip moment at C=100";
pub const ISSERLIS_ORACLE: &str = "Isserlis vs Monte Carlo";
pub const KL_ORACLE: &str = "Gaussian KL closed form";
pub const FINITE_REPLAY: &str = "finite batch replay";
pub const LIMIT_REPLAY: &str = "limit batch replay";
pub const THREAD_REPLAY: &str = "thread-count replay";

pub fn run_selfcheck() -> SelfcheckReport {
    run_selfcheck_with(&Hooks::default())
}

pub fn run_selfcheck_with(hooks: &Hooks) -> SelfcheckReport {
    let mut rows = Vec::new();

    let clip_err = CLIP_CONSTANTS
        .iter()
        .map(|&c| ((hooks.clip_moment)(c) - oracle::clip_moment_by_quadrature(c)).abs())
        .fold(0.0, f64::max);
    rows.push(CheckRow::new(CLIP_ORACLE, clip_err, 1e-10));
    rows.push(CheckRow::new(
        CLIP_SATURATION,
        ((hooks.clip_moment)(100.0) - 1.0).abs(),
        1e-12,
    ));

    let isserlis_err = (0..4u64)
        .map(|k| {
            let cov = oracle::random_covariance4(0xC0FF + k);
            let exact = fourth_moment_isserlis(&cov).expect("symmetric");
            let (mc, _) = oracle::fourth_moment_monte_carlo(&cov, 4_000_000, 0xBEEF + k);
            oracle::floored_relative_error(mc, exact)
        })
        .fold(0.0, f64::max);
    rows.push(CheckRow::new(ISSERLIS_ORACLE, isserlis_err, 0.01));

    rows.push(CheckRow::new(
        KL_ORACLE,
        (kl_of_gaussians(50_000, 17) - oracle::gaussian_kl(1.0, 2.0)).abs(),
        0.01,
    ));

    let config = AttentionConfig {
        width: 64,
        ..AttentionConfig::default()
    };
    let finite = |seed| {
        sample_output_batch(&config, seed, 2_000, Coordinate::FIRST)
            .expect("valid config")
            .digest()
    };
    rows.push(CheckRow::new(
        FINITE_REPLAY,
        mismatch(&finite(1), &finite(1)),
        0.0,
    ));
    let spec = build_limit_spec(&config).expect("valid config");
    let limit = |seed| {
        attnlimit_core::limitlaw::sample_limit(&spec, seed, 2_000, 0)
            .expect("valid spec")
            .digest()
    };
    rows.push(CheckRow::new(
        LIMIT_REPLAY,
        mismatch(&limit(2), &limit(2)),
        0.0,
    ));
    let pooled = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(|| finite(3))
    };
    rows.push(CheckRow::new(
        THREAD_REPLAY,
        mismatch(&pooled(1), &pooled(3)),
        0.0,
    ));

    SelfcheckReport { rows }
}

fn mismatch(a: &str, b: &str) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// Pipeline KL between KDEs of `count` draws of N(0, 1) and N(0, 2).
pub fn kl_of_gaussians(count: usize, seed: u64) -> f64 {
    let draw = |stream: u64, sd: f64| {
        let mut r = rng::stream(seed, stream);
        let v = (0..count).map(|_| sd * rng::normal(&mut r)).collect();
        SampleSet::from_values(format!("normal(sd={sd})"), v).expect("finite draws")
    };
    let p = kde(&draw(0, 1.0), DEFAULT_GRID_POINTS).expect("enough draws");
    let q = kde(&draw(1, 2f64.sqrt()), DEFAULT_GRID_POINTS).expect("enough draws");
    kl_divergence(&p, &q).expect("overlapping supports")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted_clip(c: f64) -> f64 {
        // A slipped constant, small but far above rounding.
        library_clip_moment(c) * (1.0 + 1e-6)
    }

    #[test]
    fn fresh_build_passes_and_is_repeatable() {
        let a = run_selfcheck();
        assert!(a.all_passed(), "{}", a.render());
        let b = run_selfcheck();
        assert_eq!(a, b);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn corrupted_clip_formula_is_flagged() {
        let report = run_selfcheck_with(&Hooks {
            clip_moment: corrupted_clip,
        });
        assert!(!report.row(CLIP_ORACLE).unwrap().passed);
        assert!(!report.all_passed());
        assert!(report.row(KL_ORACLE).unwrap().passed);
        assert!(report.render().contains("FAIL"));
    }
}
