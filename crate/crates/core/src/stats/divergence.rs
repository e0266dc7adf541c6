use super::kde::trapezoid;
use super::{require, DensityEstimate, SampleSet, StatsError};

/// Density floor applied to both estimates before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// `∫ p ln(p/q)` on the union of both grids.
///
/// Both densities are linearly interpolated onto the merged grid (zero outside
/// their own support) and clamped at [`KL_FLOOR`].
pub fn kl_divergence(p: &DensityEstimate, q: &DensityEstimate) -> Result<f64, StatsError> {
    let (p_lo, p_hi) = p.support();
    let (q_lo, q_hi) = q.support();
    if p_hi < q_lo || q_hi < p_lo {
        return Err(StatsError::EmptyOverlap);
    }
    let mut grid: Vec<f64> = p.grid().iter().chain(q.grid()).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let integrand: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let pv = p.value_at(x).max(KL_FLOOR);
            let qv = q.value_at(x).max(KL_FLOOR);
            pv * (pv / qv).ln()
        })
        .collect();
    Ok(trapezoid(&grid, &integrand))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &SampleSet, b: &SampleSet) -> Result<f64, StatsError> {
    require(a.len())?;
    require(b.len())?;
    let mut xs = a.values().to_vec();
    let mut ys = b.values().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}
