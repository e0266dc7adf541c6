//! Independent reference computations used by `selfcheck` and the acceptance
//! suite. Nothing here reuses the library's quadrature or moment code.

use attnlimit_core::linalg;
use attnlimit_core::rng::{self, StreamRng};
use rand::Rng;
use rayon::prelude::*;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step<F: Fn(f64) -> f64 + Copy>(
        f: F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn std_density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `∫ clip(z, c)² φ(z) dz` by adaptive quadrature: `z²φ` on `[−c, c]` plus
/// `c²` times both tails. Mass beyond 40 deviations is ignored.
pub fn clip_moment_by_quadrature(c: f64) -> f64 {
    // Unit panels, so the initial Simpson probes never all land in the tails.
    let panels = |f: fn(f64) -> f64, a: f64, b: f64, tol: f64| {
        let n = (b - a).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        (0..n)
            .map(|k| adaptive_simpson(f, a + k as f64 * h, a + (k + 1) as f64 * h, tol))
            .sum::<f64>()
    };
    let edge = c.min(40.0);
    let inner = 2.0 * panels(|z| z * z * std_density(z), 0.0, edge, 1e-16);
    let tail = if c < 40.0 {
        2.0 * c * c * panels(std_density, c, 40.0, 1e-17)
    } else {
        0.0
    };
    inner + tail
}

/// Closed-form `KL(N(0, var_p) ‖ N(0, var_q))`.
pub fn gaussian_kl(var_p: f64, var_q: f64) -> f64 {
    0.5 * (var_p / var_q + (var_q / var_p).ln() - 1.0)
}

/// A seeded 4×4 covariance with strong shared structure: a one-factor model
/// with signed loadings of magnitude `[0.7, 1.5]` plus `0.05·GGᵀ` noise.
///
/// Fully random covariances put many fourth moments near zero, where 1e7
/// draws cannot resolve a 1e-3 absolute floor. A dominant factor keeps the
/// moment well away from zero while the noise keeps every entry generic.
pub fn random_covariance4(seed: u64) -> [[f64; 4]; 4] {
    let mut r: StreamRng = rng::stream(seed, 0);
    let load: Vec<f64> = (0..4).map(|_| r.random_range(0.7..1.5)).collect();
    let sign: Vec<f64> = (0..4)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut g = [[0.0; 4]; 4];
    for row in g.iter_mut() {
        for v in row.iter_mut() {
            *v = rng::normal(&mut r);
        }
    }
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let noise: f64 = (0..4).map(|k| g[i][k] * g[j][k]).sum();
            c[i][j] = sign[i] * load[i] * sign[j] * load[j] + 0.05 * noise;
        }
    }
    c
}

/// Monte Carlo estimate of `E[Z₁Z₂Z₃Z₄]` and its standard error.
///
/// Draws are split into fixed chunks, each on its own stream, so the result
/// does not depend on thread count.
pub fn fourth_moment_monte_carlo(cov: &[[f64; 4]; 4], draws: usize, seed: u64) -> (f64, f64) {
    const CHUNK: usize = 250_000;
    let flat: Vec<f64> = cov.iter().flatten().copied().collect();
    let l = linalg::cholesky_psd(&flat, 4).expect("oracle covariance is PSD");
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, k as u64);
            let n = CHUNK.min(draws - k * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            let mut z = [0.0; 4];
            let mut x = [0.0; 4];
            for _ in 0..n {
                rng::fill_normal(&mut r, &mut z);
                linalg::lower_mul_vec(&l, 4, &z, &mut x);
                let p = x[0] * x[1] * x[2] * x[3];
                s += p;
                s2 += p * p;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums
        .iter()
        .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Error of `estimate` against `reference` relative to `max(|reference|, 0.1)`,
/// so a 1% relative tolerance carries a 1e-3 absolute floor.
pub fn floored_relative_error(estimate: f64, reference: f64) -> f64 {
    (estimate - reference).abs() / reference.abs().max(0.1)
}
