//! Netsor programs: initial vectors, `MatMul` and coordinatewise `Nonlin`
//! nodes, sampled at finite width.
//!
//! A program is validated once by [`build_program`] and is immutable
//! afterwards. [`NetsorProgram::sample_finite`] draws every vector of the
//! program for one realization of the initial vectors and weights.
//!
//! Randomness is counter-addressed: row `α` of the weight matrix with share
//! key ordinal `k` is read from stream `α` of the generator keyed by
//! `derive_seed([seed, WEIGHT_TAG, k])`, and coordinate `α` of the initial
//! vectors from stream `α` of `derive_seed([seed, INITIAL_TAG])`. Whether a
//! matrix is streamed row by row or cached for reuse therefore never changes
//! its entries.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, FactorError};
use crate::nonlin::Nonlinearity;
use crate::rng;

const INITIAL_TAG: u64 = 0x494e_4954;
const WEIGHT_TAG: u64 = 0x5745_4947;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VectorId(pub usize);

/// Whether a matrix dimension is the full width `n` or the head dimension `n_H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimRole {
    Full,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    /// Equal keys denote the same matrix.
    pub share_key: String,
    pub sigma_sq: f64,
    pub out_dim: DimRole,
    pub in_dim: DimRole,
}

impl WeightSpec {
    /// An `n × n` matrix.
    pub fn square(share_key: impl Into<String>, sigma_sq: f64) -> Self {
        Self::with_roles(share_key, sigma_sq, DimRole::Full, DimRole::Full)
    }

    pub fn with_roles(
        share_key: impl Into<String>,
        sigma_sq: f64,
        out_dim: DimRole,
        in_dim: DimRole,
    ) -> Self {
        WeightSpec {
            share_key: share_key.into(),
            sigma_sq,
            out_dim,
            in_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeDef {
    Initial,
    MatMul {
        weight: WeightSpec,
        input: VectorId,
    },
    Nonlin {
        map: Nonlinearity,
        inputs: Vec<VectorId>,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetsorError {
    #[error("node {node} references vector {input}, which is not defined before it")]
    CyclicProgram { node: usize, input: usize },
    #[error("initial covariance is not positive semidefinite: {0}")]
    NonPsdCovariance(FactorError),
    #[error("weights sharing key `{key}` disagree on variance or dimension roles")]
    ShareKeyMismatch { key: String },
    #[error("program uses head-dimension weights but no head dimension was supplied")]
    MissingHeadDim,
    #[error("initial covariance is {rows}×{cols} but the program has {expected} initial nodes")]
    CovarianceShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("program has no initial node")]
    NoInitialNode,
    #[error("node {node}: map expects {expected} inputs, got {got}")]
    ArityMismatch {
        node: usize,
        expected: usize,
        got: usize,
    },
    #[error("node {node}: input dimensions do not match")]
    DimensionMismatch { node: usize },
    #[error("weight `{key}` has non-positive variance {sigma_sq}")]
    InvalidVariance { key: String, sigma_sq: f64 },
    #[error("width and head dimension must be positive")]
    ZeroWidth,
}

#[derive(Debug, Clone)]
pub struct NetsorProgram {
    nodes: Vec<NodeDef>,
    initial_cov: DMatrix<f64>,
    /// Row-major lower factor of `initial_cov`.
    initial_factor: Vec<f64>,
    initial_count: usize,
    initial_slot: Vec<Option<usize>>,
    weight_slot: Vec<Option<usize>>,
    weights: Vec<WeightSpec>,
    weight_uses: Vec<usize>,
    dims: Vec<DimRole>,
}

/// Validates `nodes` (in topological order) against the law of the initial vectors.
pub fn build_program(
    nodes: Vec<NodeDef>,
    initial_cov: DMatrix<f64>,
) -> Result<NetsorProgram, NetsorError> {
    let mut initial_slot = Vec::with_capacity(nodes.len());
    let mut weight_slot = Vec::with_capacity(nodes.len());
    let mut dims = Vec::with_capacity(nodes.len());
    let mut weights: Vec<WeightSpec> = Vec::new();
    let mut weight_uses: Vec<usize> = Vec::new();
    let mut key_index: HashMap<String, usize> = HashMap::new();
    let mut initial_count = 0;

    for (idx, node) in nodes.iter().enumerate() {
        match node {
            NodeDef::Initial => {
                initial_slot.push(Some(initial_count));
                weight_slot.push(None);
                dims.push(DimRole::Full);
                initial_count += 1;
            }
            NodeDef::MatMul { weight, input } => {
                if input.0 >= idx {
                    return Err(NetsorError::CyclicProgram {
                        node: idx,
                        input: input.0,
                    });
                }
                if !(weight.sigma_sq > 0.0 && weight.sigma_sq.is_finite()) {
                    return Err(NetsorError::InvalidVariance {
                        key: weight.share_key.clone(),
                        sigma_sq: weight.sigma_sq,
                    });
                }
                if dims[input.0] != weight.in_dim {
                    return Err(NetsorError::DimensionMismatch { node: idx });
                }
                let slot = match key_index.get(&weight.share_key) {
                    Some(&k) => {
                        if weights[k] != *weight {
                            return Err(NetsorError::ShareKeyMismatch {
                                key: weight.share_key.clone(),
                            });
                        }
                        weight_uses[k] += 1;
                        k
                    }
                    None => {
                        let k = weights.len();
                        key_index.insert(weight.share_key.clone(), k);
                        weights.push(weight.clone());
                        weight_uses.push(1);
                        k
                    }
                };
                initial_slot.push(None);
                weight_slot.push(Some(slot));
                dims.push(weight.out_dim);
            }
            NodeDef::Nonlin { map, inputs } => {
                if let Some(bad) = inputs.iter().find(|v| v.0 >= idx) {
                    return Err(NetsorError::CyclicProgram {
                        node: idx,
                        input: bad.0,
                    });
                }
                if inputs.len() != map.arity() || inputs.is_empty() {
                    return Err(NetsorError::ArityMismatch {
                        node: idx,
                        expected: map.arity(),
                        got: inputs.len(),
                    });
                }
                let role = dims[inputs[0].0];
                if inputs.iter().any(|v| dims[v.0] != role) {
                    return Err(NetsorError::DimensionMismatch { node: idx });
                }
                initial_slot.push(None);
                weight_slot.push(None);
                dims.push(role);
            }
        }
    }

    if initial_count == 0 {
        return Err(NetsorError::NoInitialNode);
    }
    if initial_cov.nrows() != initial_count || initial_cov.ncols() != initial_count {
        return Err(NetsorError::CovarianceShape {
            expected: initial_count,
            rows: initial_cov.nrows(),
            cols: initial_cov.ncols(),
        });
    }
    let factor = linalg::factor_with_jitter(&initial_cov).map_err(NetsorError::NonPsdCovariance)?;
    let initial_factor = (0..initial_count * initial_count)
        .map(|k| factor[(k / initial_count, k % initial_count)])
        .collect();

    Ok(NetsorProgram {
        nodes,
        initial_cov,
        initial_factor,
        initial_count,
        initial_slot,
        weight_slot,
        weights,
        weight_uses,
        dims,
    })
}

/// All vectors of one program realization, indexed by [`VectorId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramSample {
    vectors: Vec<Vec<f64>>,
}

impl ProgramSample {
    pub fn get(&self, id: VectorId) -> &[f64] {
        &self.vectors[id.0]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn into_vectors(self) -> Vec<Vec<f64>> {
        self.vectors
    }
}

impl std::ops::Index<VectorId> for ProgramSample {
    type Output = [f64];

    fn index(&self, id: VectorId) -> &[f64] {
        &self.vectors[id.0]
    }
}

impl NetsorProgram {
    pub fn nodes(&self) -> &[NodeDef] {
        &self.nodes
    }

    pub fn initial_cov(&self) -> &DMatrix<f64> {
        &self.initial_cov
    }

    pub fn dim_role(&self, id: VectorId) -> DimRole {
        self.dims[id.0]
    }

    pub fn uses_head_dim(&self) -> bool {
        self.dims.contains(&DimRole::Head) || self.weights.iter().any(|w| w.in_dim == DimRole::Head)
    }

    /// Draws every vector of the program at width `width`.
    ///
    /// Identical `(program, width, head_dim, seed)` give bit-identical output.
    pub fn sample_finite(
        &self,
        width: usize,
        head_dim: Option<usize>,
        seed: u64,
    ) -> Result<ProgramSample, NetsorError> {
        if width == 0 || head_dim == Some(0) {
            return Err(NetsorError::ZeroWidth);
        }
        if self.uses_head_dim() && head_dim.is_none() {
            return Err(NetsorError::MissingHeadDim);
        }
        let dim_of = |role: DimRole| match role {
            DimRole::Full => width,
            DimRole::Head => head_dim.unwrap_or(width),
        };

        let initial = self.sample_initial(width, seed);
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());

        for (idx, node) in self.nodes.iter().enumerate() {
            let out = match node {
                NodeDef::Initial => {
                    let slot = self.initial_slot[idx].expect("initial slot");
                    (0..width)
                        .map(|a| initial[a * self.initial_count + slot])
                        .collect()
                }
                NodeDef::MatMul { weight, input } => {
                    let k = self.weight_slot[idx].expect("weight slot");
                    let rows = dim_of(weight.out_dim);
                    let cols = dim_of(weight.in_dim);
                    let key_seed = rng::derive_seed(&[seed, WEIGHT_TAG, k as u64]);
                    let scale = (weight.sigma_sq / cols as f64).sqrt();
                    let x = &vectors[input.0];
                    if self.weight_uses[k] > 1 {
                        let w = cache
                            .entry(k)
                            .or_insert_with(|| materialize(key_seed, rows, cols));
                        matvec(w, x, rows, cols, scale)
                    } else {
                        streamed_matvec(key_seed, x, rows, scale)
                    }
                }
                NodeDef::Nonlin { map, inputs } => {
                    let len = vectors[inputs[0].0].len();
                    let mut args = vec![0.0; inputs.len()];
                    (0..len)
                        .map(|a| {
                            for (slot, id) in args.iter_mut().zip(inputs) {
                                *slot = vectors[id.0][a];
                            }
                            map.apply(&args)
                        })
                        .collect()
                }
            };
            vectors.push(out);
        }
        Ok(ProgramSample { vectors })
    }

    /// Row-major `width × initial_count` block; row α is one joint draw.
    fn sample_initial(&self, width: usize, seed: u64) -> Vec<f64> {
        let k = self.initial_count;
        let init_seed = rng::derive_seed(&[seed, INITIAL_TAG]);
        let mut out = vec![0.0; width * k];
        let mut xi = vec![0.0; k];
        for a in 0..width {
            let mut r = rng::stream(init_seed, a as u64);
            rng::fill_normal(&mut r, &mut xi);
            linalg::lower_mul_vec(&self.initial_factor, k, &xi, &mut out[a * k..(a + 1) * k]);
        }
        out
    }
}

fn materialize(key_seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut w = vec![0.0; rows * cols];
    for (a, row) in w.chunks_exact_mut(cols).enumerate() {
        let mut r = rng::stream(key_seed, a as u64);
        rng::fill_normal(&mut r, row);
    }
    w
}

fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    w.chunks_exact(cols)
        .map(|row| scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn streamed_matvec(key_seed: u64, x: &[f64], rows: usize, scale: f64) -> Vec<f64> {
    (0..rows)
        .map(|a| {
            let mut r = rng::stream(key_seed, a as u64);
            scale * x.iter().map(|&xb| rng::normal(&mut r) * xb).sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_program(c: f64, init_var: f64) -> NetsorProgram {
        build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(0),
                },
                NodeDef::Nonlin {
                    map: Nonlinearity::clip(c),
                    inputs: vec![VectorId(1)],
                },
            ],
            DMatrix::from_element(1, 1, init_var),
        )
        .unwrap()
    }

    #[test]
    fn minimal_program_is_valid() {
        let p = build_program(vec![NodeDef::Initial], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let s = p.sample_finite(8, None, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[VectorId(0)].len(), 8);
    }

    #[test]
    fn forward_reference_is_cyclic() {
        let err = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(2),
                },
                NodeDef::Initial,
            ],
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert_eq!(err, NetsorError::CyclicProgram { node: 1, input: 2 });

        let self_ref = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::Nonlin {
                    map: Nonlinearity::Identity,
                    inputs: vec![VectorId(1)],
                },
            ],
            DMatrix::identity(1, 1),
        );
        assert!(matches!(self_ref, Err(NetsorError::CyclicProgram { .. })));
    }

    #[test]
    fn share_key_mismatch() {
        let err = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(0),
                },
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 2.0),
                    input: VectorId(0),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap_err();
        assert_eq!(err, NetsorError::ShareKeyMismatch { key: "W".into() });
    }

    #[test]
    fn non_psd_and_shape_errors() {
        let nodes = || vec![NodeDef::Initial, NodeDef::Initial];
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(matches!(
            build_program(nodes(), bad),
            Err(NetsorError::NonPsdCovariance(_))
        ));
        assert!(matches!(
            build_program(nodes(), DMatrix::identity(3, 3)),
            Err(NetsorError::CovarianceShape { expected: 2, .. })
        ));
        assert_eq!(
            build_program(Vec::new(), DMatrix::zeros(0, 0)).unwrap_err(),
            NetsorError::NoInitialNode
        );
    }

    #[test]
    fn degenerate_initial_law_propagates_zero() {
        let p = clip_program(100.0, 0.0);
        let s = p.sample_finite(64, None, 9).unwrap();
        for v in s.into_vectors() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn same_seed_same_vectors() {
        let p = clip_program(1.0, 1.0);
        let a = p.sample_finite(32, None, 77).unwrap();
        let b = p.sample_finite(32, None, 77).unwrap();
        let c = p.sample_finite(32, None, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shared_weights_give_equal_outputs_on_equal_inputs() {
        let p = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::Nonlin {
                    map: Nonlinearity::Identity,
                    inputs: vec![VectorId(0)],
                },
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(0),
                },
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(1),
                },
                NodeDef::MatMul {
                    weight: WeightSpec::square("U", 1.0),
                    input: VectorId(1),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let s = p.sample_finite(48, None, 3).unwrap();
        assert_eq!(s[VectorId(2)], s[VectorId(3)]);
        assert_ne!(s[VectorId(2)], s[VectorId(4)]);
    }

    #[test]
    fn cached_and_streamed_matrices_agree() {
        // W used twice (cached) vs. once (streamed) must realize the same matrix.
        let single = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(0),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let shared = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(0),
                },
                NodeDef::MatMul {
                    weight: WeightSpec::square("W", 1.0),
                    input: VectorId(1),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let a = single.sample_finite(16, None, 5).unwrap();
        let b = shared.sample_finite(16, None, 5).unwrap();
        assert_eq!(a[VectorId(1)], b[VectorId(1)]);
    }

    #[test]
    fn head_roles_need_head_dim() {
        let p = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::with_roles("Q", 1.0, DimRole::Head, DimRole::Full),
                    input: VectorId(0),
                },
                NodeDef::MatMul {
                    weight: WeightSpec::with_roles("O", 1.0, DimRole::Full, DimRole::Head),
                    input: VectorId(1),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert_eq!(
            p.sample_finite(16, None, 1).unwrap_err(),
            NetsorError::MissingHeadDim
        );
        let s = p.sample_finite(16, Some(4), 1).unwrap();
        assert_eq!(s[VectorId(1)].len(), 4);
        assert_eq!(s[VectorId(2)].len(), 16);
    }

    #[test]
    fn mismatched_roles_rejected() {
        let err = build_program(
            vec![
                NodeDef::Initial,
                NodeDef::MatMul {
                    weight: WeightSpec::with_roles("O", 1.0, DimRole::Full, DimRole::Head),
                    input: VectorId(0),
                },
            ],
            DMatrix::identity(1, 1),
        )
        .unwrap_err();
        assert_eq!(err, NetsorError::DimensionMismatch { node: 1 });
    }

    #[test]
    fn correlated_initial_vectors() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 2.0]);
        let p = build_program(vec![NodeDef::Initial, NodeDef::Initial], cov).unwrap();
        let s = p.sample_finite(40_000, None, 11).unwrap();
        let (a, b) = (&s[VectorId(0)], &s[VectorId(1)]);
        let n = a.len() as f64;
        let cab = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let cbb = b.iter().map(|y| y * y).sum::<f64>() / n;
        assert!((cab - 0.8).abs() < 0.04, "cov {cab}");
        assert!((cbb - 2.0).abs() < 0.08, "var {cbb}");
    }
}
