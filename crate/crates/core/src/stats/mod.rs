//! Densities, divergences and moments over batches of scalar draws.

mod divergence;
mod kde;
mod moments;

pub use divergence::{kl_divergence, ks_two_sample, KL_FLOOR};
pub use kde::{kde, silverman_bandwidth, DensityEstimate, BANDWIDTH_FLOOR, DEFAULT_GRID_POINTS};
pub use moments::{moments, Moments};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Smallest batch the estimators accept.
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("provenance count {declared} does not match {actual} values")]
    CountMismatch { declared: usize, actual: usize },
    #[error("density supports do not overlap")]
    EmptyOverlap,
    #[error("grid needs at least 2 points")]
    GridTooSmall,
}

/// Where a [`SampleSet`] came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub master_seed: u64,
    pub count: usize,
    pub config_digest: String,
}

/// A batch of finite scalar draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
    provenance: Provenance,
}

impl SampleSet {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Result<Self, StatsError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { index });
        }
        if provenance.count != values.len() {
            return Err(StatsError::CountMismatch {
                declared: provenance.count,
                actual: values.len(),
            });
        }
        Ok(SampleSet { values, provenance })
    }

    /// Wraps raw values with a placeholder provenance.
    pub fn from_values(source: impl Into<String>, values: Vec<f64>) -> Result<Self, StatsError> {
        let provenance = Provenance {
            source: source.into(),
            master_seed: 0,
            count: values.len(),
            config_digest: String::new(),
        };
        Self::new(values, provenance)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// SHA-256 over the little-endian bytes of the values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Summary of how two sample sets differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `KL(a ‖ b)` in nats between the two kernel density estimates.
    pub kl: f64,
    /// Natural log of `kl`, floored at `ln(KL_FLOOR)`.
    pub log_kl: f64,
    pub ks_statistic: f64,
    pub moments_a: Moments,
    pub moments_b: Moments,
    pub count_a: usize,
    pub count_b: usize,
    pub bandwidth_a: f64,
    pub bandwidth_b: f64,
}

/// Compares `a` against the reference `b`.
pub fn compare(
    a: &SampleSet,
    b: &SampleSet,
    grid_points: usize,
) -> Result<ComparisonReport, StatsError> {
    let da = kde(a, grid_points)?;
    let db = kde(b, grid_points)?;
    compare_with_densities(a, b, &da, &db)
}

/// Same as [`compare`] with precomputed density estimates.
pub fn compare_with_densities(
    a: &SampleSet,
    b: &SampleSet,
    da: &DensityEstimate,
    db: &DensityEstimate,
) -> Result<ComparisonReport, StatsError> {
    let kl = kl_divergence(da, db)?;
    Ok(ComparisonReport {
        kl,
        log_kl: kl.max(KL_FLOOR).ln(),
        ks_statistic: ks_two_sample(a, b)?,
        moments_a: moments(a)?,
        moments_b: moments(b)?,
        count_a: a.len(),
        count_b: b.len(),
        bandwidth_a: da.bandwidth(),
        bandwidth_b: db.bandwidth(),
    })
}

pub(crate) fn require(count: usize) -> Result<(), StatsError> {
    if count < MIN_SAMPLES {
        Err(StatsError::TooFewSamples {
            needed: MIN_SAMPLES,
            got: count,
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_counts() {
        assert_eq!(
            SampleSet::from_values("x", vec![1.0, f64::NAN]).unwrap_err(),
            StatsError::NonFinite { index: 1 }
        );
        let prov = Provenance {
            source: "x".into(),
            master_seed: 1,
            count: 3,
            config_digest: String::new(),
        };
        assert!(matches!(
            SampleSet::new(vec![1.0], prov),
            Err(StatsError::CountMismatch { .. })
        ));
    }

    #[test]
    fn digest_tracks_values() {
        let a = SampleSet::from_values("a", vec![1.0, 2.0]).unwrap();
        let b = SampleSet::from_values("b", vec![1.0, 2.0]).unwrap();
        let c = SampleSet::from_values("c", vec![2.0, 1.0]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
