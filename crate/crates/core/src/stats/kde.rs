use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{require, SampleSet, StatsError};

pub const DEFAULT_GRID_POINTS: usize = 2048;
/// Lower bound on the bandwidth, applied to degenerate (e.g. constant) samples.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Grid padding beyond the sample range, in bandwidths.
const PAD: f64 = 4.0;
/// Kernel contributions beyond this many bandwidths are below 1e-17 and skipped.
const CUTOFF: f64 = 9.0;

/// A Gaussian-kernel density estimate tabulated on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    grid: Vec<f64>,
    density: Vec<f64>,
    bandwidth: f64,
}

impl DensityEstimate {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn support(&self) -> (f64, f64) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    /// Trapezoidal integral of the tabulated density.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// Linear interpolation on the grid, zero outside it.
    pub fn value_at(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if !(lo..=hi).contains(&x) {
            return 0.0;
        }
        let k = self.grid.partition_point(|&g| g <= x);
        if k >= self.grid.len() {
            return self.density[self.grid.len() - 1];
        }
        if k == 0 {
            return self.density[0];
        }
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let (y0, y1) = (self.density[k - 1], self.density[k]);
        if x1 == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Linear-interpolated quantile of sorted data (type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 · min(std, IQR/1.34) · N^(−1/5)`, floored at [`BANDWIDTH_FLOOR`].
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = match (std > 0.0, iqr > 0.0) {
        (true, true) => std.min(iqr / 1.34),
        (true, false) => std,
        (false, true) => iqr / 1.34,
        (false, false) => 0.0,
    };
    (0.9 * spread * n.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

/// Gaussian KDE on `grid_points` uniform points over `[min − 4h, max + 4h]`.
///
/// The tabulated density is rescaled so its trapezoidal integral is exactly 1.
pub fn kde(samples: &SampleSet, grid_points: usize) -> Result<DensityEstimate, StatsError> {
    require(samples.len())?;
    if grid_points < 2 {
        return Err(StatsError::GridTooSmall);
    }
    let mut sorted = samples.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = silverman_bandwidth(&sorted);
    let lo = sorted[0] - PAD * h;
    let hi = sorted[sorted.len() - 1] + PAD * h;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points)
        .map(|k| {
            if k == grid_points - 1 {
                hi
            } else {
                lo + step * k as f64
            }
        })
        .collect();

    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * PI).sqrt());
    let inv_2h2 = 1.0 / (2.0 * h * h);
    let mut density: Vec<f64> = grid
        .par_iter()
        .map(|&x| {
            let start = sorted.partition_point(|&v| v < x - CUTOFF * h);
            let end = sorted.partition_point(|&v| v <= x + CUTOFF * h);
            let sum: f64 = sorted[start..end]
                .iter()
                .map(|&v| (-(x - v) * (x - v) * inv_2h2).exp())
                .sum();
            norm * sum
        })
        .collect();

    let mass = trapezoid(&grid, &density);
    if mass > 0.0 {
        density.iter_mut().for_each(|d| *d /= mass);
    }
    Ok(DensityEstimate {
        grid,
        density,
        bandwidth: h,
    })
}
