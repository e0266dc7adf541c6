//! Finite-width multi-head attention over clipped random inputs.
//!
//! The inputs are `x^i = clip(W^i h, C)` for a standard normal `h ∈ ℝⁿ` and
//! independent `W^i`. For each head `a` the layer computes
//!
//! ```text
//! p_{ij}^{(a)} = scale · (W^{Q,a} x^i)ᵀ (W^{K,a} x^j)
//! y_α^i       = Σ_a Σ_j SoftMax_j(p_{i·}^{(a)}) · (W^{O,a} W^{V,a} x^j)_α
//! ```
//!
//! with `scale` chosen by [`ScalingRule`].
//!
//! Two samplers realize the same joint law of scores and output coordinates:
//!
//! * [`forward`] uses sufficient statistics. Conditional on the inputs, the
//!   rows of `W X^T` are i.i.d. `N(0, σ²/n · G)` with `G` the Gram matrix of the
//!   inputs, so `W X^T = √(σ²/n) Z Lᵀ` with `L Lᵀ = G`. Scores only need
//!   `Z_Qᵀ Z_K`, which equals `Ξ Aᵀ` in law, where `A Aᵀ = Z_Kᵀ Z_K` is a
//!   Bartlett-factored Wishart draw and `Ξ` is an `s × s` standard normal
//!   matrix. Output coordinate `α` only needs row `α` of `W^{O,a}`, which given
//!   the values is `N(0, σ_O²/n_H · VᵀV)`. A draw costs `O(n s² + H s³)`.
//! * [`DenseAttention`] materializes every weight matrix through a
//!   [`NetsorProgram`] and is kept as the reference route.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg;
use crate::netsor::{
    build_program, DimRole, NetsorError, NetsorProgram, NodeDef, VectorId, WeightSpec,
};
use crate::nonlin::{clip, Nonlinearity};
use crate::rng::{self, StreamRng};
use crate::stats::{Provenance, SampleSet, StatsError};

const INPUT_TAG: u64 = 0x494e_5055;
const HEAD_TAG: u64 = 0x4845_4144;
const OUTPUT_TAG: u64 = 0x4f55_5450;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRule {
    /// `1/√n`
    InvSqrtWidth,
    /// `1/n`
    InvWidth,
    /// `1/√n_H` with `n = H · n_H` (low-rank heads).
    InvSqrtHead,
}

impl ScalingRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScalingRule::InvSqrtWidth => "inv_sqrt_width",
            ScalingRule::InvWidth => "inv_width",
            ScalingRule::InvSqrtHead => "inv_sqrt_head",
        }
    }
}

impl fmt::Display for ScalingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScalingRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "inv_sqrt_width" | "sqrt" => Ok(ScalingRule::InvSqrtWidth),
            "inv_width" | "linear" => Ok(ScalingRule::InvWidth),
            "inv_sqrt_head" | "low_rank" | "lowrank" => Ok(ScalingRule::InvSqrtHead),
            other => Err(format!("unknown scaling rule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub width: usize,
    pub spatial_dim: usize,
    pub heads: usize,
    pub scaling: ScalingRule,
    pub head_dim: Option<usize>,
    pub sigma_q_sq: f64,
    pub sigma_k_sq: f64,
    pub sigma_v_sq: f64,
    pub sigma_o_sq: f64,
    pub sigma_input_sq: f64,
    pub clip_c: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            width: 256,
            spatial_dim: 4,
            heads: 2,
            scaling: ScalingRule::InvSqrtWidth,
            head_dim: None,
            sigma_q_sq: 1.0,
            sigma_k_sq: 1.0,
            sigma_v_sq: 1.0,
            sigma_o_sq: 1.0,
            sigma_input_sq: 1.0,
            clip_c: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("score vector contains a non-finite entry")]
    NonFiniteScore,
    #[error("`{field}` must be positive")]
    NonPositive { field: &'static str },
    #[error("low-rank scaling requires a head dimension")]
    HeadDimRequired,
    #[error("low-rank layout needs width = heads · head_dim, got {width} ≠ {heads}·{head_dim}")]
    LayoutMismatch {
        width: usize,
        heads: usize,
        head_dim: usize,
    },
    #[error("no output coordinates requested")]
    EmptyCoordinates,
    #[error("coordinate (position {position}, index {index}) is out of range")]
    CoordinateOutOfRange { position: usize, index: usize },
    #[error("score index (head {head}, {row}, {col}) is out of range")]
    ScoreOutOfRange { head: usize, row: usize, col: usize },
    #[error("inputs must be {expected_rows} vectors of width {expected_width}")]
    InputShape {
        expected_rows: usize,
        expected_width: usize,
    },
    #[error("sample count must be positive")]
    ZeroCount,
    #[error(transparent)]
    Program(#[from] NetsorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let counts = [
            ("width", self.width),
            ("spatial_dim", self.spatial_dim),
            ("heads", self.heads),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(AttentionError::NonPositive { field });
            }
        }
        let reals = [
            ("sigma_q_sq", self.sigma_q_sq),
            ("sigma_k_sq", self.sigma_k_sq),
            ("sigma_v_sq", self.sigma_v_sq),
            ("sigma_o_sq", self.sigma_o_sq),
            ("sigma_input_sq", self.sigma_input_sq),
            ("clip_c", self.clip_c),
        ];
        for (field, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AttentionError::NonPositive { field });
            }
        }
        if self.head_dim == Some(0) {
            return Err(AttentionError::NonPositive { field: "head_dim" });
        }
        if self.scaling == ScalingRule::InvSqrtHead {
            let head_dim = self.head_dim.ok_or(AttentionError::HeadDimRequired)?;
            if self.width != self.heads * head_dim {
                return Err(AttentionError::LayoutMismatch {
                    width: self.width,
                    heads: self.heads,
                    head_dim,
                });
            }
        }
        Ok(())
    }

    /// Output dimension of the query/key/value projections.
    pub fn projection_dim(&self) -> usize {
        match self.scaling {
            ScalingRule::InvSqrtHead => self.head_dim.unwrap_or(self.width),
            _ => self.width,
        }
    }

    pub fn score_scale(&self) -> f64 {
        match self.scaling {
            ScalingRule::InvSqrtWidth => 1.0 / (self.width as f64).sqrt(),
            ScalingRule::InvWidth => 1.0 / self.width as f64,
            ScalingRule::InvSqrtHead => 1.0 / (self.projection_dim() as f64).sqrt(),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Output coordinate `y_index^position` (both zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coordinate {
    pub position: usize,
    pub index: usize,
}

impl Coordinate {
    /// `y_1^1` in one-based notation.
    pub const FIRST: Coordinate = Coordinate {
        position: 0,
        index: 0,
    };

    pub fn new(position: usize, index: usize) -> Self {
        Coordinate { position, index }
    }
}

/// Score `p_{row,col}^{(head)}` (zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreIndex {
    pub head: usize,
    pub row: usize,
    pub col: usize,
}

impl ScoreIndex {
    pub const FIRST: ScoreIndex = ScoreIndex {
        head: 0,
        row: 0,
        col: 0,
    };
}

/// One realization of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSample {
    heads: usize,
    spatial_dim: usize,
    scores: Vec<f64>,
    attn_weights: Vec<f64>,
    outputs: Vec<(Coordinate, f64)>,
}

impl AttentionSample {
    fn offset(&self, head: usize, row: usize, col: usize) -> usize {
        (head * self.spatial_dim + row) * self.spatial_dim + col
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn score(&self, head: usize, row: usize, col: usize) -> f64 {
        self.scores[self.offset(head, row, col)]
    }

    pub fn weight(&self, head: usize, row: usize, col: usize) -> f64 {
        self.attn_weights[self.offset(head, row, col)]
    }

    /// Scores laid out as `(head, row, col)` row-major.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn attn_weights(&self) -> &[f64] {
        &self.attn_weights
    }

    pub fn outputs(&self) -> &[(Coordinate, f64)] {
        &self.outputs
    }

    pub fn output(&self, coord: Coordinate) -> Option<f64> {
        self.outputs
            .iter()
            .find(|(c, _)| *c == coord)
            .map(|&(_, v)| v)
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>, AttentionError> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) -> Result<(), AttentionError> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(AttentionError::NonFiniteScore);
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

/// Seed of Monte Carlo sample `k` under `master_seed`.
pub fn sample_seed(master_seed: u64, k: usize) -> u64 {
    rng::derive_seed(&[master_seed, k as u64])
}

fn check_coords(config: &AttentionConfig, coords: &[Coordinate]) -> Result<(), AttentionError> {
    if coords.is_empty() {
        return Err(AttentionError::EmptyCoordinates);
    }
    for c in coords {
        if c.position >= config.spatial_dim || c.index >= config.width {
            return Err(AttentionError::CoordinateOutOfRange {
                position: c.position,
                index: c.index,
            });
        }
    }
    Ok(())
}

fn check_score(config: &AttentionConfig, idx: ScoreIndex) -> Result<(), AttentionError> {
    if idx.head >= config.heads || idx.row >= config.spatial_dim || idx.col >= config.spatial_dim {
        return Err(AttentionError::ScoreOutOfRange {
            head: idx.head,
            row: idx.row,
            col: idx.col,
        });
    }
    Ok(())
}

/// Input vectors `x^1..x^s` (each of width `n`) for one realization.
pub fn sample_inputs(config: &AttentionConfig, seed: u64) -> Result<Vec<Vec<f64>>, AttentionError> {
    config.validate()?;
    let n = config.width;
    let x = reduced_inputs(config, seed);
    Ok(x.chunks_exact(n).map(<[f64]>::to_vec).collect())
}

/// `s × n` row-major block of clipped inputs.
///
/// `W^i h` given `h` is `N(0, σ²‖h‖²/n · I)` independently across `i`, so only
/// `‖h‖² ~ χ²_n` is drawn for the initial vector.
fn reduced_inputs(config: &AttentionConfig, seed: u64) -> Vec<f64> {
    let n = config.width;
    let mut r = rng::stream(rng::derive_seed(&[seed, INPUT_TAG]), 0);
    let norm_sq = rng::chi_square(&mut r, n as f64);
    let tau = (config.sigma_input_sq * norm_sq / n as f64).sqrt();
    let c = config.clip_c;
    (0..config.spatial_dim * n)
        .map(|_| clip(tau * rng::normal(&mut r), c))
        .collect()
}

/// Factor `A` with `A Aᵀ ~ Wishart_s(dof, I)`, lower triangular when `dof ≥ s`.
fn wishart_factor(rng: &mut StreamRng, dof: usize, s: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if dof >= s {
        for i in 0..s {
            out[i * s + i] = rng::chi_square(rng, (dof - i) as f64).sqrt();
            for j in 0..i {
                out[i * s + j] = rng::normal(rng);
            }
        }
    } else {
        // Singular Wishart: with Z ~ N(0, I) of shape dof × s, the zero-padded
        // Zᵀ already satisfies (Zᵀ)(Zᵀ)ᵀ = ZᵀZ.
        for r in 0..dof {
            for i in 0..s {
                out[i * s + r] = rng::normal(rng);
            }
        }
    }
}

/// One draw of scores, attention weights and requested outputs.
pub fn forward(
    config: &AttentionConfig,
    seed: u64,
    coords: &[Coordinate],
) -> Result<AttentionSample, AttentionError> {
    config.validate()?;
    check_coords(config, coords)?;
    reduced_forward(config, seed, coords)
}

fn reduced_forward(
    config: &AttentionConfig,
    seed: u64,
    coords: &[Coordinate],
) -> Result<AttentionSample, AttentionError> {
    let x = reduced_inputs(config, seed);
    forward_from_block(config, &x, seed, coords)
}

/// [`forward`] with the inputs `x^1..x^s` supplied instead of drawn.
///
/// Weights are drawn from `seed` exactly as in [`forward`].
pub fn forward_with_inputs(
    config: &AttentionConfig,
    inputs: &[Vec<f64>],
    seed: u64,
    coords: &[Coordinate],
) -> Result<AttentionSample, AttentionError> {
    config.validate()?;
    check_coords(config, coords)?;
    if inputs.len() != config.spatial_dim || inputs.iter().any(|x| x.len() != config.width) {
        return Err(AttentionError::InputShape {
            expected_rows: config.spatial_dim,
            expected_width: config.width,
        });
    }
    let block: Vec<f64> = inputs.concat();
    forward_from_block(config, &block, seed, coords)
}

fn forward_from_block(
    config: &AttentionConfig,
    x: &[f64],
    seed: u64,
    coords: &[Coordinate],
) -> Result<AttentionSample, AttentionError> {
    let n = config.width;
    let s = config.spatial_dim;
    let heads = config.heads;
    let proj = config.projection_dim();

    let mut gram = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..=i {
            let g: f64 = x[i * n..(i + 1) * n]
                .iter()
                .zip(&x[j * n..(j + 1) * n])
                .map(|(a, b)| a * b)
                .sum();
            gram[i * s + j] = g;
            gram[j * s + i] = g;
        }
    }
    let l = linalg::cholesky_psd(&gram, s).expect("Gram matrix is PSD");

    let score_coef =
        config.score_scale() * (config.sigma_q_sq * config.sigma_k_sq).sqrt() / n as f64;
    let out_coef = (config.sigma_o_sq / proj as f64).sqrt() * (config.sigma_v_sq / n as f64).sqrt();
    let head_seed = rng::derive_seed(&[seed, HEAD_TAG]);
    let out_seed = rng::derive_seed(&[seed, OUTPUT_TAG]);

    let mut scores = vec![0.0; heads * s * s];
    let mut weights = vec![0.0; heads * s * s];
    let mut outputs: Vec<(Coordinate, f64)> = coords.iter().map(|&c| (c, 0.0)).collect();

    let mut a_key = vec![0.0; s * s];
    let mut xi = vec![0.0; s * s];
    let mut m = vec![0.0; s * s];
    let mut t = vec![0.0; s * s];
    let mut b_val = vec![0.0; s * s];
    let mut f_val = vec![0.0; s * s];
    let mut noise = vec![0.0; s];
    let mut o = vec![0.0; s];

    for a in 0..heads {
        let mut r = rng::stream(head_seed, a as u64);
        wishart_factor(&mut r, proj, s, &mut a_key);
        rng::fill_normal(&mut r, &mut xi);
        linalg::mat_mul_transposed(&xi, &a_key, s, &mut m);
        linalg::mat_mul(&l, &m, s, &mut t);
        let block = &mut scores[a * s * s..(a + 1) * s * s];
        linalg::mat_mul_transposed(&t, &l, s, block);
        block.iter_mut().for_each(|p| *p *= score_coef);
        for i in 0..s {
            let row = a * s * s + i * s;
            softmax_into(&scores[row..row + s], &mut weights[row..row + s])?;
        }

        wishart_factor(&mut r, proj, s, &mut b_val);
        linalg::mat_mul(&l, &b_val, s, &mut f_val);
        for (coord, y) in outputs.iter_mut() {
            let stream_id = ((a as u64) << 32) | coord.index as u64;
            let mut ro = rng::stream(out_seed, stream_id);
            rng::fill_normal(&mut ro, &mut noise);
            for (i, oi) in o.iter_mut().enumerate() {
                let row = &f_val[i * s..(i + 1) * s];
                *oi = out_coef * row.iter().zip(&noise).map(|(p, q)| p * q).sum::<f64>();
            }
            let w_row =
                &weights[a * s * s + coord.position * s..a * s * s + (coord.position + 1) * s];
            *y += w_row.iter().zip(&o).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    Ok(AttentionSample {
        heads,
        spatial_dim: s,
        scores,
        attn_weights: weights,
        outputs,
    })
}

fn batch<F>(
    config: &AttentionConfig,
    master_seed: u64,
    count: usize,
    source: String,
    draw: F,
) -> Result<SampleSet, AttentionError>
where
    F: Fn(u64) -> Result<f64, AttentionError> + Sync,
{
    if count == 0 {
        return Err(AttentionError::ZeroCount);
    }
    let values = (0..count)
        .into_par_iter()
        .map(|k| draw(sample_seed(master_seed, k)))
        .collect::<Result<Vec<f64>, _>>()?;
    let provenance = Provenance {
        source,
        master_seed,
        count,
        config_digest: config.digest(),
    };
    Ok(SampleSet::new(values, provenance)?)
}

/// `count` independent draws of one output coordinate, each from a fresh
/// network realization. Sample `k` uses [`sample_seed`]`(master_seed, k)`.
pub fn sample_output_batch(
    config: &AttentionConfig,
    master_seed: u64,
    count: usize,
    coord: Coordinate,
) -> Result<SampleSet, AttentionError> {
    config.validate()?;
    check_coords(config, &[coord])?;
    let source = format!("finite:y[{},{}]", coord.position, coord.index);
    batch(config, master_seed, count, source, |seed| {
        Ok(reduced_forward(config, seed, &[coord])?.outputs[0].1)
    })
}

/// `count` independent draws of one attention score.
pub fn sample_score_batch(
    config: &AttentionConfig,
    master_seed: u64,
    count: usize,
    idx: ScoreIndex,
) -> Result<SampleSet, AttentionError> {
    config.validate()?;
    check_score(config, idx)?;
    let source = format!("finite:p[{},{},{}]", idx.head, idx.row, idx.col);
    batch(config, master_seed, count, source, |seed| {
        let sample = reduced_forward(config, seed, &[Coordinate::FIRST])?;
        Ok(sample.score(idx.head, idx.row, idx.col))
    })
}

/// Reference sampler that materializes every weight matrix.
#[derive(Debug, Clone)]
pub struct DenseAttention {
    config: AttentionConfig,
    program: NetsorProgram,
    inputs: Vec<VectorId>,
    queries: Vec<Vec<VectorId>>,
    keys: Vec<Vec<VectorId>>,
    outputs: Vec<Vec<VectorId>>,
}

impl DenseAttention {
    /// Builds the program `h → W^i h → clip → Q, K, V → W^O V` for `config`.
    pub fn new(config: &AttentionConfig) -> Result<Self, AttentionError> {
        config.validate()?;
        let s = config.spatial_dim;
        let role = match config.scaling {
            ScalingRule::InvSqrtHead => DimRole::Head,
            _ => DimRole::Full,
        };
        let mut nodes = vec![NodeDef::Initial];
        let mut push = |node: NodeDef| {
            nodes.push(node);
            VectorId(nodes.len() - 1)
        };
        let pre: Vec<VectorId> = (0..s)
            .map(|i| {
                push(NodeDef::MatMul {
                    weight: WeightSpec::square(format!("W_in{i}"), config.sigma_input_sq),
                    input: VectorId(0),
                })
            })
            .collect();
        let inputs: Vec<VectorId> = pre
            .iter()
            .map(|&h| {
                push(NodeDef::Nonlin {
                    map: Nonlinearity::clip(config.clip_c),
                    inputs: vec![h],
                })
            })
            .collect();
        let mut queries = Vec::with_capacity(config.heads);
        let mut keys = Vec::with_capacity(config.heads);
        let mut outputs = Vec::with_capacity(config.heads);
        for a in 0..config.heads {
            let proj = |name: &str, sigma_sq: f64| {
                WeightSpec::with_roles(format!("{name}{a}"), sigma_sq, role, DimRole::Full)
            };
            let q: Vec<VectorId> = inputs
                .iter()
                .map(|&x| {
                    push(NodeDef::MatMul {
                        weight: proj("W_Q", config.sigma_q_sq),
                        input: x,
                    })
                })
                .collect();
            let k: Vec<VectorId> = inputs
                .iter()
                .map(|&x| {
                    push(NodeDef::MatMul {
                        weight: proj("W_K", config.sigma_k_sq),
                        input: x,
                    })
                })
                .collect();
            let out: Vec<VectorId> = inputs
                .iter()
                .map(|&x| {
                    let v = push(NodeDef::MatMul {
                        weight: proj("W_V", config.sigma_v_sq),
                        input: x,
                    });
                    push(NodeDef::MatMul {
                        weight: WeightSpec::with_roles(
                            format!("W_O{a}"),
                            config.sigma_o_sq,
                            DimRole::Full,
                            role,
                        ),
                        input: v,
                    })
                })
                .collect();
            queries.push(q);
            keys.push(k);
            outputs.push(out);
        }
        let program = build_program(nodes, DMatrix::from_element(1, 1, 1.0))?;
        Ok(DenseAttention {
            config: config.clone(),
            program,
            inputs,
            queries,
            keys,
            outputs,
        })
    }

    pub fn program(&self) -> &NetsorProgram {
        &self.program
    }

    /// Input vectors `x^1..x^s` of the realization at `seed`.
    pub fn sample_inputs(&self, seed: u64) -> Result<Vec<Vec<f64>>, AttentionError> {
        let sample = self.sample_program(seed)?;
        Ok(self.inputs.iter().map(|&id| sample[id].to_vec()).collect())
    }

    fn sample_program(&self, seed: u64) -> Result<crate::netsor::ProgramSample, AttentionError> {
        let head_dim = match self.config.scaling {
            ScalingRule::InvSqrtHead => self.config.head_dim,
            _ => None,
        };
        Ok(self
            .program
            .sample_finite(self.config.width, head_dim, seed)?)
    }

    pub fn forward(
        &self,
        seed: u64,
        coords: &[Coordinate],
    ) -> Result<AttentionSample, AttentionError> {
        check_coords(&self.config, coords)?;
        let s = self.config.spatial_dim;
        let heads = self.config.heads;
        let scale = self.config.score_scale();
        let sample = self.sample_program(seed)?;
        let mut scores = vec![0.0; heads * s * s];
        let mut weights = vec![0.0; heads * s * s];
        for a in 0..heads {
            for i in 0..s {
                let q = &sample[self.queries[a][i]];
                for j in 0..s {
                    let k = &sample[self.keys[a][j]];
                    scores[(a * s + i) * s + j] =
                        scale * q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>();
                }
                let row = (a * s + i) * s;
                softmax_into(&scores[row..row + s], &mut weights[row..row + s])?;
            }
        }
        let outputs = coords
            .iter()
            .map(|&c| {
                let y = (0..heads)
                    .map(|a| {
                        (0..s)
                            .map(|j| {
                                weights[(a * s + c.position) * s + j]
                                    * sample[self.outputs[a][j]][c.index]
                            })
                            .sum::<f64>()
                    })
                    .sum();
                (c, y)
            })
            .collect();
        Ok(AttentionSample {
            heads,
            spatial_dim: s,
            scores,
            attn_weights: weights,
            outputs,
        })
    }

    pub fn sample_output_batch(
        &self,
        master_seed: u64,
        count: usize,
        coord: Coordinate,
    ) -> Result<SampleSet, AttentionError> {
        check_coords(&self.config, &[coord])?;
        let source = format!("dense:y[{},{}]", coord.position, coord.index);
        batch(&self.config, master_seed, count, source, |seed| {
            Ok(self.forward(seed, &[coord])?.outputs[0].1)
        })
    }

    pub fn sample_score_batch(
        &self,
        master_seed: u64,
        count: usize,
        idx: ScoreIndex,
    ) -> Result<SampleSet, AttentionError> {
        check_score(&self.config, idx)?;
        let source = format!("dense:p[{},{},{}]", idx.head, idx.row, idx.col);
        batch(&self.config, master_seed, count, source, |seed| {
            let sample = self.forward(seed, &[Coordinate::FIRST])?;
            Ok(sample.score(idx.head, idx.row, idx.col))
        })
    }
}
