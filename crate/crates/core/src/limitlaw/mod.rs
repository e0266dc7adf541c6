//! The infinite-width limit of the attention layer.
//!
//! In the limit the clipped inputs become a Gaussian family with covariance
//! `Σx`, the value projections `ṽ^{a,j}` become Gaussian with covariance
//! `σ_O²σ_V² Σx` inside each head, and the scores `p̊^{(a)}_{ij}` become an
//! independent Gaussian vector whose covariance is a fourth moment of the
//! query/key limits. The output is the softmax mixture
//!
//! ```text
//! Z^{y^i} = Σ_a Σ_j SoftMax_j(p̊^{(a)}_{i·}) Z^{ṽ^{a,j}}
//! ```
//!
//! which is Gaussian conditionally on `p̊` and heavy-tailed marginally.
//! Everything is block-diagonal across heads, so only one `s × s` value block
//! and one `s² × s²` score block are stored and factored.

mod quadrature;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::{erf, erfc};
use thiserror::Error;

use crate::attention::{sample_seed, softmax_into, AttentionConfig, AttentionError, ScalingRule};
use crate::linalg::{self, FactorError};
use crate::nonlin::Nonlinearity;
use crate::rng;
use crate::stats::{Provenance, SampleSet, StatsError};

const LIMIT_TAG: u64 = 0x4c49_4d49;
/// Smallest accepted quadrature order.
pub const MIN_ORDER: usize = 16;
/// Order used when assembling limit specifications.
pub const DEFAULT_ORDER: usize = 64;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitLawError {
    #[error("clip constant must be nonnegative, got {0}")]
    NegativeClip(f64),
    #[error("covariance is not positive semidefinite: {0}")]
    NonPsdCovariance(FactorError),
    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose by {gap:e}")]
    AsymmetricInput { row: usize, col: usize, gap: f64 },
    #[error("quadrature order must be at least {MIN_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("map `{0}` is not scalar")]
    NotScalar(String),
    #[error("{what} covariance could not be factored after jitter: {source}")]
    FactorizationFailure {
        what: &'static str,
        source: FactorError,
    },
    #[error("expected a {expected}×{expected} matrix for {what}, got {rows}×{cols}")]
    Shape {
        what: &'static str,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("head count must be positive")]
    NoHeads,
    #[error("position {0} is out of range")]
    PositionOutOfRange(usize),
    #[error("score vector has length {got}, expected {expected}")]
    ScoreLength { expected: usize, got: usize },
    #[error("sample count must be positive")]
    ZeroCount,
    #[error(transparent)]
    Config(#[from] AttentionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// `E[clip(Z, C)²]` for `Z ~ N(0, 1)`:
/// `2C²(1 − Φ(C)) − 2Cφ(C) + 2Φ(C) − 1`.
pub fn clip_second_moment(c: f64) -> Result<f64, LimitLawError> {
    if c.is_nan() || c < 0.0 {
        return Err(LimitLawError::NegativeClip(c));
    }
    if c.is_infinite() {
        return Ok(1.0);
    }
    let r = c / std::f64::consts::SQRT_2;
    let tail = 0.5 * erfc(r);
    let density = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(2.0 * c * c * tail - 2.0 * c * density + erf(r))
}

/// `E[f(U) g(V)]` for zero-mean jointly Gaussian `(U, V)` with covariance `cov2`.
///
/// Smooth maps use a tensor Gauss–Hermite rule of the given order. Maps with
/// kinks use composite Gauss–Legendre panels of that order, split where either
/// argument crosses a kink, which keeps the result exact to rounding.
pub fn nonlin_second_moment(
    f: &Nonlinearity,
    g: &Nonlinearity,
    cov2: [[f64; 2]; 2],
    order: usize,
) -> Result<f64, LimitLawError> {
    if order < MIN_ORDER {
        return Err(LimitLawError::InvalidOrder(order));
    }
    for m in [f, g] {
        if m.arity() != 1 {
            return Err(LimitLawError::NotScalar(m.name()));
        }
    }
    let [[a, b], [b2, d]] = cov2;
    if [a, b, b2, d].iter().any(|v| !v.is_finite()) {
        return Err(LimitLawError::NonPsdCovariance(FactorError::NonFinite));
    }
    let scale = a.abs().max(d.abs()).max(1.0);
    if (b - b2).abs() > SYMMETRY_TOL * scale {
        return Err(LimitLawError::NonPsdCovariance(FactorError::NotSymmetric {
            row: 0,
            col: 1,
            gap: (b - b2).abs(),
        }));
    }
    let flat = [a, 0.5 * (b + b2), 0.5 * (b + b2), d];
    let l = linalg::cholesky_psd(&flat, 2).map_err(LimitLawError::NonPsdCovariance)?;
    let (l11, l21, l22) = (l[0], l[2], l[3]);

    let f_kinks = f.breakpoints();
    let g_kinks = g.breakpoints();
    if f_kinks.is_empty() && g_kinks.is_empty() {
        let rule = quadrature::hermite_rule(order);
        let total = rule
            .iter()
            .map(|&(z1, w1)| {
                let u = f.eval(l11 * z1);
                let inner: f64 = rule
                    .iter()
                    .map(|&(z2, w2)| w2 * g.eval(l21 * z1 + l22 * z2))
                    .sum();
                w1 * u * inner
            })
            .sum();
        return Ok(total);
    }

    let mut outer_kinks: Vec<f64> = Vec::new();
    if l11 > 0.0 {
        outer_kinks.extend(f_kinks.iter().map(|k| k / l11));
    }
    if l22 == 0.0 && l21 != 0.0 {
        outer_kinks.extend(g_kinks.iter().map(|k| k / l21));
    }
    let outer = quadrature::composite_rule(order, &outer_kinks);
    let total = outer
        .iter()
        .map(|&(z1, w1)| {
            let u = f.eval(l11 * z1);
            if u == 0.0 {
                return 0.0;
            }
            let shift = l21 * z1;
            let inner = if l22 == 0.0 {
                g.eval(shift)
            } else {
                let kinks: Vec<f64> = g_kinks.iter().map(|k| (k - shift) / l22).collect();
                quadrature::expect_standard(|z2| g.eval(shift + l22 * z2), &kinks, order)
            };
            w1 * u * inner
        })
        .sum();
    Ok(total)
}

/// `E[Z₁Z₂Z₃Z₄] = c₁₂c₃₄ + c₁₃c₂₄ + c₁₄c₂₃` for a zero-mean Gaussian vector.
pub fn fourth_moment_isserlis(cov4: &[[f64; 4]; 4]) -> Result<f64, LimitLawError> {
    for (r, row) in cov4.iter().enumerate() {
        for (c, &upper) in row.iter().enumerate().skip(r + 1) {
            let lower = cov4[c][r];
            let gap = (upper - lower).abs();
            let scale = upper.abs().max(lower.abs()).max(1.0);
            if gap > SYMMETRY_TOL * scale || gap.is_nan() {
                return Err(LimitLawError::AsymmetricInput {
                    row: r,
                    col: c,
                    gap,
                });
            }
        }
    }
    let c = cov4;
    Ok(c[0][1] * c[2][3] + c[0][2] * c[1][3] + c[0][3] * c[1][2])
}

/// A block-diagonal matrix made of `heads` copies of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlocks {
    block: DMatrix<f64>,
    heads: usize,
}

impl HeadBlocks {
    pub fn new(block: DMatrix<f64>, heads: usize) -> Self {
        HeadBlocks { block, heads }
    }

    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Side length of the full matrix.
    pub fn dim(&self) -> usize {
        self.heads * self.block.nrows()
    }

    /// Entry of the full matrix; zero off the diagonal blocks.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let b = self.block.nrows();
        if row / b == col / b {
            self.block[(row % b, col % b)]
        } else {
            0.0
        }
    }

    /// The full `(heads·b) × (heads·b)` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |r, c| self.entry(r, c))
    }
}

/// Covariance blocks of the limit law, with their factors.
#[derive(Debug, Clone)]
pub struct LimitLawSpec {
    spatial_dim: usize,
    heads: usize,
    sigma_x: DMatrix<f64>,
    sigma_v: HeadBlocks,
    sigma_p: HeadBlocks,
    /// Row-major lower factors of the value and score blocks.
    factor_v: Vec<f64>,
    factor_p: Vec<f64>,
    digest: String,
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &'static str) -> Result<(), LimitLawError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(LimitLawError::Shape {
            what,
            expected: n,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    linalg::check_symmetric(m, SYMMETRY_TOL).map_err(LimitLawError::NonPsdCovariance)
}

fn row_major_factor(m: &DMatrix<f64>, what: &'static str) -> Result<Vec<f64>, LimitLawError> {
    let l = linalg::factor_with_jitter(m)
        .map_err(|source| LimitLawError::FactorizationFailure { what, source })?;
    let n = l.nrows();
    Ok((0..n * n).map(|k| l[(k / n, k % n)]).collect())
}

impl LimitLawSpec {
    /// Assembles a spec from explicit blocks: `sigma_x` (`s × s`), one value
    /// block (`s × s`) and one score block (`s² × s²`, index `i·s + j`).
    pub fn from_blocks(
        sigma_x: DMatrix<f64>,
        value_block: DMatrix<f64>,
        score_block: DMatrix<f64>,
        heads: usize,
    ) -> Result<Self, LimitLawError> {
        if heads == 0 {
            return Err(LimitLawError::NoHeads);
        }
        let s = sigma_x.nrows();
        check_square(&sigma_x, s, "sigma_x")?;
        check_square(&value_block, s, "value block")?;
        check_square(&score_block, s * s, "score block")?;
        row_major_factor(&sigma_x, "input")?;
        let factor_v = row_major_factor(&value_block, "value")?;
        let factor_p = row_major_factor(&score_block, "score")?;

        let mut hasher = Sha256::new();
        hasher.update((heads as u64).to_le_bytes());
        for m in [&sigma_x, &value_block, &score_block] {
            hasher.update((m.nrows() as u64).to_le_bytes());
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(LimitLawSpec {
            spatial_dim: s,
            heads,
            sigma_x,
            sigma_v: HeadBlocks::new(value_block, heads),
            sigma_p: HeadBlocks::new(score_block, heads),
            factor_v,
            factor_p,
            digest: hex::encode(hasher.finalize()),
        })
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `E[Z^{x^i} Z^{x^j}]`.
    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    /// Covariance of `Z^{ṽ^{a,j}}`, indexed `a·s + j`.
    pub fn sigma_v(&self) -> &HeadBlocks {
        &self.sigma_v
    }

    /// Covariance of `p̊^{(a)}_{ij}`, indexed `(a·s + i)·s + j`.
    pub fn sigma_p(&self) -> &HeadBlocks {
        &self.sigma_p
    }

    /// SHA-256 over the head count and the three blocks.
    pub fn digest(&self) -> String {
        self.digest.clone()
    }

    fn score_len(&self) -> usize {
        self.heads * self.spatial_dim * self.spatial_dim
    }
}

/// Limit-law covariance blocks for `config`.
///
/// `Σx[i,i] = E[clip(σ_in Z, C)²]` in closed form; off-diagonal entries come
/// from [`nonlin_second_moment`] on the (diagonal) pre-activation covariance.
/// Score covariances are evaluated with [`fourth_moment_isserlis`] over the
/// query/key limits, which are independent with covariances `σ_Q²Σx` and
/// `σ_K²Σx`. Under `1/n` scaling the score limit is identically zero.
pub fn build_limit_spec(config: &AttentionConfig) -> Result<LimitLawSpec, LimitLawError> {
    config.validate()?;
    let s = config.spatial_dim;
    let var_in = config.sigma_input_sq;
    let sd_in = var_in.sqrt();
    let diag = var_in * clip_second_moment(config.clip_c / sd_in)?;
    let clip = Nonlinearity::clip(config.clip_c);
    // Independent input matrices leave the pre-activations uncorrelated.
    let cross = nonlin_second_moment(&clip, &clip, [[var_in, 0.0], [0.0, var_in]], DEFAULT_ORDER)?;
    let sigma_x = DMatrix::from_fn(s, s, |i, j| if i == j { diag } else { cross });

    let value_block = sigma_x.scale(config.sigma_o_sq * config.sigma_v_sq);

    let mut score_block = DMatrix::zeros(s * s, s * s);
    if config.scaling != ScalingRule::InvWidth {
        let (vq, vk) = (config.sigma_q_sq, config.sigma_k_sq);
        for i in 0..s {
            for j in 0..s {
                for i2 in 0..s {
                    for j2 in 0..s {
                        // Order (q_i, k_j, q_i', k_j').
                        let cq = vq * sigma_x[(i, i2)];
                        let ck = vk * sigma_x[(j, j2)];
                        let cov4 = [
                            [vq * sigma_x[(i, i)], 0.0, cq, 0.0],
                            [0.0, vk * sigma_x[(j, j)], 0.0, ck],
                            [cq, 0.0, vq * sigma_x[(i2, i2)], 0.0],
                            [0.0, ck, 0.0, vk * sigma_x[(j2, j2)]],
                        ];
                        score_block[(i * s + j, i2 * s + j2)] = fourth_moment_isserlis(&cov4)?;
                    }
                }
            }
        }
    }
    LimitLawSpec::from_blocks(sigma_x, value_block, score_block, config.heads)
}

/// One draw of the limit law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSample {
    spatial_dim: usize,
    /// `p̊^{(a)}_{ij}` at `(a·s + i)·s + j`.
    pub p_ring: Vec<f64>,
    /// `Z^{ṽ^{a,j}}` at `a·s + j`.
    pub z_v: Vec<f64>,
    /// `Z^{y^i}` at `i`.
    pub z_y: Vec<f64>,
}

impl LimitSample {
    pub fn score(&self, head: usize, row: usize, col: usize) -> f64 {
        self.p_ring[(head * self.spatial_dim + row) * self.spatial_dim + col]
    }

    pub fn value(&self, head: usize, pos: usize) -> f64 {
        self.z_v[head * self.spatial_dim + pos]
    }
}

fn draw_values(spec: &LimitLawSpec, base: u64) -> Vec<f64> {
    let s = spec.spatial_dim;
    let mut z_v = vec![0.0; spec.heads * s];
    let mut noise = vec![0.0; s];
    for a in 0..spec.heads {
        let mut r = rng::stream(base, 2 * a as u64 + 1);
        rng::fill_normal(&mut r, &mut noise);
        linalg::lower_mul_vec(&spec.factor_v, s, &noise, &mut z_v[a * s..(a + 1) * s]);
    }
    z_v
}

fn assemble(spec: &LimitLawSpec, p_ring: Vec<f64>, z_v: Vec<f64>) -> LimitSample {
    let s = spec.spatial_dim;
    let mut z_y = vec![0.0; s];
    let mut w = vec![0.0; s];
    for a in 0..spec.heads {
        for (i, y) in z_y.iter_mut().enumerate() {
            let row = (a * s + i) * s;
            softmax_into(&p_ring[row..row + s], &mut w).expect("limit scores are finite");
            *y += w
                .iter()
                .zip(&z_v[a * s..(a + 1) * s])
                .map(|(p, v)| p * v)
                .sum::<f64>();
        }
    }
    LimitSample {
        spatial_dim: s,
        p_ring,
        z_v,
        z_y,
    }
}

/// One draw: `p̊` from stream `2a` and `Z^ṽ` from stream `2a + 1` of the
/// generator keyed by `seed`, head by head.
pub fn draw(spec: &LimitLawSpec, seed: u64) -> LimitSample {
    let s = spec.spatial_dim;
    let s2 = s * s;
    let base = rng::derive_seed(&[seed, LIMIT_TAG]);
    let mut p_ring = vec![0.0; spec.score_len()];
    let mut noise = vec![0.0; s2];
    for a in 0..spec.heads {
        let mut r = rng::stream(base, 2 * a as u64);
        rng::fill_normal(&mut r, &mut noise);
        linalg::lower_mul_vec(
            &spec.factor_p,
            s2,
            &noise,
            &mut p_ring[a * s2..(a + 1) * s2],
        );
    }
    let z_v = draw_values(spec, base);
    assemble(spec, p_ring, z_v)
}

/// A draw with the scores frozen at `p_ring`; only `Z^ṽ` is random.
pub fn draw_conditional(
    spec: &LimitLawSpec,
    p_ring: &[f64],
    seed: u64,
) -> Result<LimitSample, LimitLawError> {
    if p_ring.len() != spec.score_len() {
        return Err(LimitLawError::ScoreLength {
            expected: spec.score_len(),
            got: p_ring.len(),
        });
    }
    let base = rng::derive_seed(&[seed, LIMIT_TAG]);
    let z_v = draw_values(spec, base);
    Ok(assemble(spec, p_ring.to_vec(), z_v))
}

fn collect<F>(
    spec: &LimitLawSpec,
    master_seed: u64,
    count: usize,
    source: String,
    extract: F,
) -> Result<SampleSet, LimitLawError>
where
    F: Fn(u64) -> f64 + Sync,
{
    if count == 0 {
        return Err(LimitLawError::ZeroCount);
    }
    let values: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|k| extract(sample_seed(master_seed, k)))
        .collect();
    let provenance = Provenance {
        source,
        master_seed,
        count,
        config_digest: spec.digest(),
    };
    Ok(SampleSet::new(values, provenance)?)
}

/// `count` draws of `Z^{y^position}`; draw `k` uses the same per-sample seed
/// derivation as the finite-width samplers.
pub fn sample_limit(
    spec: &LimitLawSpec,
    master_seed: u64,
    count: usize,
    position: usize,
) -> Result<SampleSet, LimitLawError> {
    if position >= spec.spatial_dim {
        return Err(LimitLawError::PositionOutOfRange(position));
    }
    let source = format!("limit:y[{position}]");
    collect(spec, master_seed, count, source, |seed| {
        draw(spec, seed).z_y[position]
    })
}

/// `count` draws of an arbitrary statistic of the limit sample.
pub fn sample_limit_with<F>(
    spec: &LimitLawSpec,
    master_seed: u64,
    count: usize,
    source: impl Into<String>,
    statistic: F,
) -> Result<SampleSet, LimitLawError>
where
    F: Fn(&LimitSample) -> f64 + Sync,
{
    collect(spec, master_seed, count, source.into(), |seed| {
        statistic(&draw(spec, seed))
    })
}

/// `count` draws of `Z^{y^position}` given frozen scores.
pub fn sample_limit_conditional(
    spec: &LimitLawSpec,
    p_ring: &[f64],
    master_seed: u64,
    count: usize,
    position: usize,
) -> Result<SampleSet, LimitLawError> {
    if position >= spec.spatial_dim {
        return Err(LimitLawError::PositionOutOfRange(position));
    }
    draw_conditional(spec, p_ring, 0)?;
    let source = format!("limit|p:y[{position}]");
    collect(spec, master_seed, count, source, |seed| {
        draw_conditional(spec, p_ring, seed)
            .expect("length checked")
            .z_y[position]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::moments;

    /// Adaptive Simpson on `[a, b]`, independent of the library quadrature.
    fn simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec<F: Fn(f64) -> f64 + Copy>(
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
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn clip_oracle(c: f64) -> f64 {
        let dens = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let inner = simpson(|z| z * z * dens(z), -c.min(12.0), c.min(12.0), 1e-14);
        let tails = if c < 12.0 {
            2.0 * c * c * simpson(dens, c, 40.0, 1e-15)
        } else {
            0.0
        };
        inner + tails
    }

    #[test]
    fn clip_moment_examples() {
        assert_eq!(clip_second_moment(0.0).unwrap(), 0.0);
        assert!((clip_second_moment(100.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            clip_second_moment(-1.0),
            Err(LimitLawError::NegativeClip(_))
        ));
        let v = clip_second_moment(1.0).unwrap();
        assert!(
            (v - clip_oracle(1.0)).abs() < 1e-10,
            "{v} vs {}",
            clip_oracle(1.0)
        );
    }

    #[test]
    fn clip_moment_is_monotone() {
        let mut prev = 0.0;
        for k in 1..200 {
            let c = k as f64 * 0.05;
            let v = clip_second_moment(c).unwrap();
            // Strict growth until the tail mass drops below rounding.
            if c < 6.0 {
                assert!(v > prev, "C={c}");
            } else {
                assert!(v >= prev, "C={c}");
            }
            assert!(v <= 1.0);
            prev = v;
        }
    }

    #[test]
    fn identity_covariance() {
        let id = Nonlinearity::Identity;
        for rho in [-0.9, -0.3, 0.0, 0.4, 1.0] {
            let v = nonlin_second_moment(&id, &id, [[1.0, rho], [rho, 1.0]], 32).unwrap();
            assert!((v - rho).abs() < 1e-12, "{rho}: {v}");
        }
    }

    #[test]
    fn fully_correlated_clip_matches_closed_form() {
        for c in [0.1, 0.5, 1.0, 2.0, 5.0, 100.0] {
            let f = Nonlinearity::clip(c);
            let v = nonlin_second_moment(&f, &f, [[1.0, 1.0], [1.0, 1.0]], 32).unwrap();
            assert!(
                (v - clip_second_moment(c).unwrap()).abs() < 1e-8,
                "C={c}: {v}"
            );
        }
    }

    #[test]
    fn independent_clip_is_zero() {
        let f = Nonlinearity::clip(100.0);
        let v = nonlin_second_moment(&f, &f, [[1.0, 0.0], [0.0, 1.0]], 32).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn nonlin_moment_errors() {
        let f = Nonlinearity::Identity;
        assert!(matches!(
            nonlin_second_moment(&f, &f, [[1.0, 2.0], [2.0, 1.0]], 32),
            Err(LimitLawError::NonPsdCovariance(_))
        ));
        assert_eq!(
            nonlin_second_moment(&f, &f, [[1.0, 0.0], [0.0, 1.0]], 8).unwrap_err(),
            LimitLawError::InvalidOrder(8)
        );
        let pair = Nonlinearity::multi("prod", 2, |v| v[0] * v[1]);
        assert!(matches!(
            nonlin_second_moment(&pair, &f, [[1.0, 0.0], [0.0, 1.0]], 32),
            Err(LimitLawError::NotScalar(_))
        ));
    }

    #[test]
    fn quadrature_orders_agree_for_clip_family() {
        let covs = [
            [[1.0, 0.0], [0.0, 1.0]],
            [[1.0, 0.5], [0.5, 1.0]],
            [[1.0, 1.0], [1.0, 1.0]],
            [[2.0, -0.7], [-0.7, 0.5]],
            [[0.3, 0.3], [0.3, 0.3]],
        ];
        for c in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let f = Nonlinearity::clip(c);
            for cov in covs {
                let lo = nonlin_second_moment(&f, &f, cov, 32).unwrap();
                let hi = nonlin_second_moment(&f, &f, cov, 64).unwrap();
                assert!((lo - hi).abs() <= 1e-9, "C={c} {cov:?}: {lo} vs {hi}");
            }
        }
    }

    #[test]
    fn smooth_custom_map_uses_hermite() {
        // E[U² V²] = 1 + 2ρ² for unit variances.
        let sq = Nonlinearity::scalar("square", |x| x * x, vec![]);
        let v = nonlin_second_moment(&sq, &sq, [[1.0, 0.6], [0.6, 1.0]], 32).unwrap();
        assert!((v - (1.0 + 2.0 * 0.36)).abs() < 1e-12);
    }

    #[test]
    fn isserlis_examples() {
        let mut id = [[0.0; 4]; 4];
        for (k, row) in id.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        assert_eq!(fourth_moment_isserlis(&id).unwrap(), 0.0);
        let mut pair = id;
        pair[0][2] = 1.0;
        pair[2][0] = 1.0;
        pair[1][3] = 1.0;
        pair[3][1] = 1.0;
        assert_eq!(fourth_moment_isserlis(&pair).unwrap(), 1.0);
        let mut bad = id;
        bad[0][1] = 0.5;
        assert!(matches!(
            fourth_moment_isserlis(&bad),
            Err(LimitLawError::AsymmetricInput { row: 0, col: 1, .. })
        ));
        // All four equal: E[Z⁴] = 3.
        assert_eq!(fourth_moment_isserlis(&[[1.0; 4]; 4]).unwrap(), 3.0);
    }

    fn default_spec(heads: usize) -> LimitLawSpec {
        build_limit_spec(&AttentionConfig {
            heads,
            ..AttentionConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_score_block_is_identity() {
        let spec = default_spec(1);
        let m = clip_second_moment(100.0).unwrap();
        let p = spec.sigma_p().block();
        for r in 0..16 {
            for c in 0..16 {
                let want = if r == c { m * m } else { 0.0 };
                assert!((p[(r, c)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn value_block_scales_with_variances() {
        let spec = build_limit_spec(&AttentionConfig {
            sigma_o_sq: 2.0,
            sigma_v_sq: 3.0,
            ..AttentionConfig::default()
        })
        .unwrap();
        let m = clip_second_moment(100.0).unwrap();
        for j in 0..4 {
            assert!((spec.sigma_v().entry(j, j) - 6.0 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn blocks_vanish_across_heads() {
        let spec = default_spec(2);
        let v = spec.sigma_v().to_dense();
        let p = spec.sigma_p().to_dense();
        for r in 0..4 {
            for c in 4..8 {
                assert_eq!(v[(r, c)], 0.0);
                assert_eq!(v[(c, r)], 0.0);
            }
        }
        for r in 0..16 {
            for c in 16..32 {
                assert_eq!(p[(r, c)], 0.0);
            }
        }
        linalg::check_symmetric(&p, 1e-10).unwrap();
        linalg::factor_with_jitter(&p).unwrap();
    }

    #[test]
    fn score_block_factorizes_into_input_covariances() {
        let config = AttentionConfig {
            sigma_q_sq: 1.5,
            sigma_k_sq: 0.7,
            sigma_input_sq: 2.0,
            clip_c: 0.8,
            ..AttentionConfig::default()
        };
        let spec = build_limit_spec(&config).unwrap();
        let sx = spec.sigma_x();
        let p = spec.sigma_p().block();
        for i in 0..4 {
            for j in 0..4 {
                for i2 in 0..4 {
                    for j2 in 0..4 {
                        let want = 1.5 * 0.7 * sx[(i, i2)] * sx[(j, j2)];
                        assert!((p[(i * 4 + j, i2 * 4 + j2)] - want).abs() < 1e-12);
                    }
                }
            }
        }
        let diag = 2.0 * clip_second_moment(0.8 / 2f64.sqrt()).unwrap();
        assert!((sx[(0, 0)] - diag).abs() < 1e-14);
        assert!(sx[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn inv_width_scores_collapse() {
        let spec = build_limit_spec(&AttentionConfig {
            scaling: ScalingRule::InvWidth,
            ..AttentionConfig::default()
        })
        .unwrap();
        assert!(spec.sigma_p().block().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_values_give_zero_outputs() {
        let sx = DMatrix::identity(4, 4);
        let spec =
            LimitLawSpec::from_blocks(sx, DMatrix::zeros(4, 4), DMatrix::identity(16, 16), 3)
                .unwrap();
        let set = sample_limit(&spec, 1, 200, 0).unwrap();
        assert!(set.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_blocks_rejects_bad_input() {
        let sx = DMatrix::identity(4, 4);
        let mut neg = DMatrix::identity(4, 4);
        neg[(0, 0)] = -1.0;
        assert!(matches!(
            LimitLawSpec::from_blocks(sx.clone(), neg, DMatrix::identity(16, 16), 1),
            Err(LimitLawError::FactorizationFailure { what: "value", .. })
        ));
        assert!(matches!(
            LimitLawSpec::from_blocks(sx.clone(), sx.clone(), DMatrix::identity(9, 9), 1),
            Err(LimitLawError::Shape { .. })
        ));
        assert_eq!(
            LimitLawSpec::from_blocks(sx.clone(), sx.clone(), DMatrix::identity(16, 16), 0)
                .unwrap_err(),
            LimitLawError::NoHeads
        );
    }

    #[test]
    fn reconstruction_identity_holds() {
        let spec = default_spec(3);
        for seed in 0..20 {
            let d = draw(&spec, seed);
            for i in 0..4 {
                let mut want = 0.0;
                for a in 0..3 {
                    let row: Vec<f64> = (0..4).map(|j| d.score(a, i, j)).collect();
                    let w = crate::attention::softmax_row(&row).unwrap();
                    want += (0..4).map(|j| w[j] * d.value(a, j)).sum::<f64>();
                }
                assert_eq!(d.z_y[i], want);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = default_spec(2);
        let a = sample_limit(&spec, 9, 500, 0).unwrap();
        let b = sample_limit(&spec, 9, 500, 0).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = sample_limit(&spec, 10, 500, 0).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn single_head_limit_is_heavy_tailed() {
        let spec = default_spec(1);
        let set = sample_limit(&spec, 2024, 50_000, 0).unwrap();
        let m = moments(&set).unwrap();
        assert!(
            m.excess_kurtosis > 4.0 * m.se_kurtosis,
            "kurtosis {}",
            m.excess_kurtosis
        );
    }

    #[test]
    fn variance_matches_conditional_variance_oracle() {
        let spec = default_spec(1);
        let set = sample_limit(&spec, 77, 50_000, 0).unwrap();
        let m = moments(&set).unwrap();

        // Var Z^y = E[Σ_j softmax_j(p̊)²] · Var Z^ṽ since the values are
        // uncorrelated. The default score covariance is (clip moment)² · I.
        let cm = clip_second_moment(100.0).unwrap();
        let sd_p = cm;
        let var_v = cm;
        let mut r = rng::stream(0x5eed, 3);
        let draws = 1_000_000;
        let mut acc = 0.0;
        let mut row = [0.0; 4];
        for _ in 0..draws {
            row.iter_mut().for_each(|p| *p = sd_p * rng::normal(&mut r));
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|p| (p - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            acc += e.iter().map(|v| (v / z).powi(2)).sum::<f64>();
        }
        let expected = var_v * acc / draws as f64;
        assert!(
            (m.variance - expected).abs() <= 3.0 * m.se_variance,
            "{} vs {expected} (se {})",
            m.variance,
            m.se_variance
        );
    }

    #[test]
    fn scores_are_independent_of_values() {
        let spec = default_spec(2);
        let n = 50_000;
        let pairs: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let d = draw(&spec, sample_seed(5, k));
                (d.score(0, 0, 0), d.value(0, 0))
            })
            .collect();
        let (mx, my) = pairs
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (mx / n as f64, my / n as f64);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() <= 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn frozen_scores_give_gaussian_output() {
        let spec = default_spec(1);
        let frozen = draw(&spec, 123).p_ring;
        let set = sample_limit_conditional(&spec, &frozen, 4, 10_000, 0).unwrap();
        let m = moments(&set).unwrap();
        assert!(m.excess_kurtosis.abs() <= 4.0 * (24.0f64 / 10_000.0).sqrt());
        assert!(matches!(
            sample_limit_conditional(&spec, &frozen[..3], 4, 10, 0),
            Err(LimitLawError::ScoreLength { .. })
        ));
    }
}
