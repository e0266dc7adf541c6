use serde::{Deserialize, Serialize};

use super::{require, SampleSet, StatsError};

/// First four moments with asymptotic standard errors.
///
/// `variance` is the unbiased estimate; skewness and excess kurtosis are the
/// moment ratios `m₃/m₂^{3/2}` and `m₄/m₂² − 3` of the central sample moments.
/// The skewness and kurtosis errors are the normal-reference scales
/// `√(6/N)` and `√(24/N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    pub se_skewness: f64,
    pub se_kurtosis: f64,
}

pub fn moments(samples: &SampleSet) -> Result<Moments, StatsError> {
    require(samples.len())?;
    let xs = samples.values();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let variance = m2 / (n - 1.0);
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Ok(Moments {
        count: xs.len(),
        mean,
        variance,
        skewness,
        excess_kurtosis,
        se_mean: (variance / n).sqrt(),
        se_variance: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        se_skewness: (6.0 / n).sqrt(),
        se_kurtosis: (24.0 / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn two_point_law() {
        let values: Vec<f64> = (0..10_000)
            .map(|k| if k % 2 == 0 { -1.0 } else { 1.0 })
            .collect();
        let m = moments(&SampleSet::from_values("pm1", values).unwrap()).unwrap();
        assert_eq!(m.mean, 0.0);
        assert!((m.variance - 10_000.0 / 9_999.0).abs() < 1e-12);
        assert!((m.variance - 1.0001).abs() < 1e-6);
        assert!((m.excess_kurtosis + 2.0).abs() < 1e-12);
        assert_eq!(m.skewness, 0.0);
    }

    #[test]
    fn gaussian_null_kurtosis() {
        let mut r = rng::stream(21, 0);
        let values: Vec<f64> = (0..50_000).map(|_| rng::normal(&mut r)).collect();
        let m = moments(&SampleSet::from_values("n", values).unwrap()).unwrap();
        assert!(m.excess_kurtosis.abs() <= 4.0 * m.se_kurtosis);
        assert!(m.skewness.abs() <= 4.0 * m.se_skewness);
        assert!((m.se_kurtosis - (24.0f64 / 50_000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_samples_are_degenerate_not_nan() {
        let m = moments(&SampleSet::from_values("c", vec![3.0; 200]).unwrap()).unwrap();
        assert_eq!(m.variance, 0.0);
        assert_eq!(m.excess_kurtosis, 0.0);
    }
}
