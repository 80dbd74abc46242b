//! Per-head attention math: vectors, scores, softmax, outputs, and norms.
//!
//! Everything here is a pure function over `f64` slices. Cached KV data is
//! stored as `f32` elsewhere; arithmetic is carried out in `f64` so the
//! perturbation-bound checks in [`crate::bounds`] see minimal rounding slack.

use crate::error::{invalid_arg, Result};

/// A nonempty finite real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Validates that the data is nonempty and every element is finite.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid_arg("vector must be nonempty"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("vector elements must be finite"));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(invalid_arg(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean distance to another vector of the same dimension.
    pub fn l2_distance(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(invalid_arg(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One attention head's working set at a single decode position: the query
/// plus the key and value caches accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    query: Vector,
    keys: Vec<Vector>,
    values: Vec<Vector>,
}

impl AttentionState {
    pub fn new(query: Vector, keys: Vec<Vector>, values: Vec<Vector>) -> Result<Self> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(invalid_arg(format!(
                "keys and values must be nonempty and equal length: {} vs {}",
                keys.len(),
                values.len()
            )));
        }
        let d = query.dim();
        if keys.iter().chain(values.iter()).any(|v| v.dim() != d) {
            return Err(invalid_arg(
                "every key and value must match the query dimension",
            ));
        }
        Ok(Self {
            query,
            keys,
            values,
        })
    }

    /// Number of cached positions `t`.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-head dimension of the vectors being dotted.
    pub fn head_dim(&self) -> usize {
        self.query.dim()
    }

    pub fn query(&self) -> &Vector {
        &self.query
    }

    pub fn keys(&self) -> &[Vector] {
        &self.keys
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    /// Copy of this state with the key at `j` substituted.
    pub fn with_key_replaced(&self, j: usize, key: Vector) -> Result<Self> {
        if j >= self.len() {
            return Err(invalid_arg(format!("key index {j} out of range")));
        }
        if key.dim() != self.head_dim() {
            return Err(invalid_arg("replacement key has wrong dimension"));
        }
        let mut out = self.clone();
        out.keys[j] = key;
        Ok(out)
    }

    /// Copy of this state with the value at `j` substituted.
    pub fn with_value_replaced(&self, j: usize, value: Vector) -> Result<Self> {
        if j >= self.len() {
            return Err(invalid_arg(format!("value index {j} out of range")));
        }
        if value.dim() != self.head_dim() {
            return Err(invalid_arg("replacement value has wrong dimension"));
        }
        let mut out = self.clone();
        out.values[j] = value;
        Ok(out)
    }
}

/// Attention weights: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    weights: Vec<f64>,
}

impl AttnWeights {
    /// Validates nonnegativity and a sum within 1e-6 of one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid_arg("weights must be nonempty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid_arg("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid_arg(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Numerically stabilized softmax. Subtracts the max before exponentiation;
/// shift invariance makes this exact.
pub fn softmax(scores: &[f64]) -> Result<AttnWeights> {
    if scores.is_empty() {
        return Err(invalid_arg("softmax requires at least one score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid_arg("softmax scores must be finite"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(AttnWeights {
        weights: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// Unnormalized attention scores: `dot(query, key_i) / sqrt(d_h)` for each
/// cached position.
pub fn attention_scores(state: &AttentionState) -> Vec<f64> {
    let scale = (state.head_dim() as f64).sqrt();
    state
        .keys
        .iter()
        .map(|k| dot(state.query.as_slice(), k.as_slice()) / scale)
        .collect()
}

/// Attention output: the softmax-weighted sum of the cached values.
pub fn attention_output(state: &AttentionState) -> Result<Vector> {
    let weights = softmax(&attention_scores(state))?;
    let mut out = vec![0.0; state.head_dim()];
    for (w, v) in weights.as_slice().iter().zip(&state.values) {
        for (o, x) in out.iter_mut().zip(v.as_slice()) {
            *o += w * x;
        }
    }
    Vector::new(out)
}

/// Which norm to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

pub fn norm(v: &[f64], kind: NormKind) -> Result<f64> {
    if v.is_empty() {
        return Err(invalid_arg("norm of an empty vector is undefined"));
    }
    Ok(match kind {
        NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
        NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormKind::LInf => v.iter().map(|x| x.abs()).fold(0.0, f64::max),
    })
}

/// Square root of the sum of squared element-wise differences between two
/// same-shape tensors given in flattened form.
pub fn frobenius_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid_arg(format!(
            "shape mismatch: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
