//! From a concrete (gated) attention layer to its mixture-of-experts form.
//!
//! Every entry of the attention output matrix is an omega-weighted double sum
//! over channels and sequence positions, gated by softmax weights whose
//! logits are quadratic forms in the vectorized input. This module builds
//! that per-entry structure explicitly and checks it against the direct
//! forward pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::ModelError;
use crate::measure::{symmetrize, MixingMeasure, ModelSpec, Variant};
use crate::model::softmax_from_logits;

/// Where the activation sits in the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    /// Plain multi-head attention.
    None,
    /// Activation applied to the value projection output.
    AfterValue,
    /// Activation applied to the scaled dot-product attention output.
    AfterSdpa,
}

impl GatePlacement {
    pub fn variant(&self) -> Variant {
        match self {
            GatePlacement::None => Variant::Mha,
            GatePlacement::AfterValue => Variant::GatedValue,
            GatePlacement::AfterSdpa => Variant::GatedSdpa,
        }
    }
}

/// Per-head projection weights of a (gated) attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    heads: usize,
    seq_len: usize,
    embed_dim: usize,
    head_dim: usize,
    w_q: Vec<DMatrix<f64>>,
    w_k: Vec<DMatrix<f64>>,
    w_v: Vec<DMatrix<f64>>,
    w_o: Vec<DMatrix<f64>>,
    placement: GatePlacement,
    activation: ActivationKind,
}

impl AttentionWeights {
    /// Validate and assemble a weight set.
    ///
    /// `w_q`, `w_k`, `w_v` are `d x d_v` per head and `w_o` is `d_v x d`.
    /// Placement `None` requires the identity activation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seq_len: usize,
        embed_dim: usize,
        head_dim: usize,
        w_q: Vec<DMatrix<f64>>,
        w_k: Vec<DMatrix<f64>>,
        w_v: Vec<DMatrix<f64>>,
        w_o: Vec<DMatrix<f64>>,
        placement: GatePlacement,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        let heads = w_q.len();
        if heads == 0 {
            return Err(ModelError::EmptyInput {
                context: "attention weights",
            });
        }
        if seq_len == 0 || embed_dim == 0 || head_dim == 0 {
            return Err(ModelError::InvalidShape {
                context: "attention weights",
                detail: "seq_len, embed_dim and head_dim must be positive".into(),
            });
        }
        if w_k.len() != heads || w_v.len() != heads || w_o.len() != heads {
            return Err(ModelError::InvalidShape {
                context: "attention weights",
                detail: format!(
                    "head counts disagree: q={} k={} v={} o={}",
                    heads,
                    w_k.len(),
                    w_v.len(),
                    w_o.len()
                ),
            });
        }
        for (name, mats, rows, cols) in [
            ("w_q", &w_q, embed_dim, head_dim),
            ("w_k", &w_k, embed_dim, head_dim),
            ("w_v", &w_v, embed_dim, head_dim),
            ("w_o", &w_o, head_dim, embed_dim),
        ] {
            for (h, m) in mats.iter().enumerate() {
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(ModelError::InvalidShape {
                        context: "attention weights",
                        detail: format!(
                            "{name}[{h}] is {}x{}, expected {rows}x{cols}",
                            m.nrows(),
                            m.ncols()
                        ),
                    });
                }
            }
        }
        if placement == GatePlacement::None && !activation.is_identity() {
            return Err(ModelError::InvalidShape {
                context: "attention weights",
                detail: "placement `none` requires the identity activation".into(),
            });
        }
        Ok(AttentionWeights {
            heads,
            seq_len,
            embed_dim,
            head_dim,
            w_q,
            w_k,
            w_v,
            w_o,
            placement,
            activation,
        })
    }

    /// Draw a weight set with independent uniform entries in [-1, 1].
    pub fn random<R: Rng>(
        rng: &mut R,
        heads: usize,
        seq_len: usize,
        embed_dim: usize,
        head_dim: usize,
        placement: GatePlacement,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        let mut draw = |rows: usize, cols: usize| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
        };
        let w_q = (0..heads).map(|_| draw(embed_dim, head_dim)).collect();
        let w_k = (0..heads).map(|_| draw(embed_dim, head_dim)).collect();
        let w_v = (0..heads).map(|_| draw(embed_dim, head_dim)).collect();
        let w_o = (0..heads).map(|_| draw(head_dim, embed_dim)).collect();
        AttentionWeights::new(
            seq_len, embed_dim, head_dim, w_q, w_k, w_v, w_o, placement, activation,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn placement(&self) -> GatePlacement {
        self.placement
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    /// Scaled query-key product `W_Q W_K' / sqrt(d_v)` of one head.
    pub fn logit_matrix(&self, h: usize) -> DMatrix<f64> {
        &self.w_q[h] * self.w_k[h].transpose() / (self.head_dim as f64).sqrt()
    }

    /// Forward pass: `sum_h softmax(X P_h X') gate(X W_V,h) W_O,h`, with the
    /// activation inserted at the configured placement.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
        if x.nrows() != self.seq_len || x.ncols() != self.embed_dim {
            return Err(ModelError::InvalidShape {
                context: "attention_forward",
                detail: format!(
                    "input is {}x{}, expected {}x{}",
                    x.nrows(),
                    x.ncols(),
                    self.seq_len,
                    self.embed_dim
                ),
            });
        }
        let mut out = DMatrix::zeros(self.seq_len, self.embed_dim);
        for h in 0..self.heads {
            let logits = x * self.logit_matrix(h) * x.transpose();
            let gates = row_softmax(&logits);
            let values = x * &self.w_v[h];
            let head = match self.placement {
                GatePlacement::None => &gates * values,
                GatePlacement::AfterValue => &gates * values.map(|v| self.activation.value(v)),
                GatePlacement::AfterSdpa => (&gates * values).map(|v| self.activation.value(v)),
            };
            out += head * &self.w_o[h];
        }
        Ok(out)
    }
}

fn row_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// `J_i = e_i' (x) I_d`: the matrix extracting row `i` of the stacked input
/// from its vectorization, so `J_i vec(X) = x_i`.
pub fn extraction_matrix(i: usize, seq_len: usize, dim: usize) -> Result<DMatrix<f64>, ModelError> {
    if i >= seq_len {
        return Err(ModelError::IndexOutOfRange {
            context: "extraction_matrix",
            index: i,
            bound: seq_len,
        });
    }
    let mut j = DMatrix::zeros(dim, seq_len * dim);
    for p in 0..dim {
        j[(p, i * dim + p)] = 1.0;
    }
    Ok(j)
}

/// Row-major vectorization `(x_1', ..., x_N')'` of an `N x d` matrix.
pub fn vectorize(x: &DMatrix<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.nrows() * x.ncols());
    for i in 0..x.nrows() {
        for p in 0..x.ncols() {
            v[i * x.ncols() + p] = x[(i, p)];
        }
    }
    v
}

/// Mixture form of one output entry `(row, col)` of the attention matrix.
///
/// For the fixed row there are `heads x d_v` channels weighted by
/// `omega[h][k] = W_O,h[k, col]`, each mixing `seq_len` inner experts
/// `a[h][j][k]` under softmax gates with logit matrices `m[h][j]`.
#[derive(Debug, Clone)]
pub struct EntryHmoe {
    pub row: usize,
    pub col: usize,
    pub dim: usize,
    pub omega: Vec<Vec<f64>>,
    pub gating: Vec<Vec<DMatrix<f64>>>,
    pub expert: Vec<Vec<Vec<DVector<f64>>>>,
    pub placement: GatePlacement,
    pub activation: ActivationKind,
}

impl EntryHmoe {
    /// Evaluate the structure at a vectorized input.
    pub fn eval(&self, x: &DVector<f64>) -> Result<f64, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                context: "entry_hmoe_eval",
                expected: self.dim,
                got: x.len(),
            });
        }
        let xs = x.as_slice();
        let mut total = 0.0;
        for h in 0..self.omega.len() {
            let logits: Vec<f64> = self.gating[h]
                .iter()
                .map(|m| crate::model::quad_form(m, xs))
                .collect();
            let gates = softmax_from_logits(&logits);
            for (k, &w) in self.omega[h].iter().enumerate() {
                let component = match self.placement {
                    GatePlacement::None => self.expert[h]
                        .iter()
                        .zip(&gates)
                        .map(|(per_k, g)| g * per_k[k].dot(x))
                        .sum(),
                    GatePlacement::AfterValue => self.expert[h]
                        .iter()
                        .zip(&gates)
                        .map(|(per_k, g)| g * self.activation.value(per_k[k].dot(x)))
                        .sum(),
                    GatePlacement::AfterSdpa => {
                        let inner: f64 = self.expert[h]
                            .iter()
                            .zip(&gates)
                            .map(|(per_k, g)| g * per_k[k].dot(x))
                            .sum();
                        self.activation.value(inner)
                    }
                };
                total += w * component;
            }
        }
        Ok(total)
    }

    /// Convert to a `MixingMeasure`, normalizing the gating matrices so the
    /// last one per head is zero (softmax gates are unchanged).
    pub fn to_mixing_measure(&self) -> Result<(MixingMeasure, ModelSpec), ModelError> {
        let gating = self
            .gating
            .iter()
            .map(|mats| {
                let last = mats.last().expect("at least one inner expert").clone();
                mats.iter().map(|m| m - &last).collect()
            })
            .collect();
        let measure = MixingMeasure::new(self.omega.clone(), gating, self.expert.clone())?;
        let spec = ModelSpec::new(self.placement.variant(), self.activation);
        Ok((measure, spec))
    }
}

/// Build the mixture form of attention output entry `(row, col)`.
pub fn attention_entry_as_hmoe(
    weights: &AttentionWeights,
    row: usize,
    col: usize,
) -> Result<EntryHmoe, ModelError> {
    let n = weights.seq_len;
    let d = weights.embed_dim;
    if row >= n {
        return Err(ModelError::IndexOutOfRange {
            context: "attention_entry row",
            index: row,
            bound: n,
        });
    }
    if col >= d {
        return Err(ModelError::IndexOutOfRange {
            context: "attention_entry col",
            index: col,
            bound: d,
        });
    }
    let j_row = extraction_matrix(row, n, d)?;
    let mut omega = Vec::with_capacity(weights.heads);
    let mut gating = Vec::with_capacity(weights.heads);
    let mut expert = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let p = weights.logit_matrix(h);
        let mut head_gates = Vec::with_capacity(n);
        let mut head_experts = Vec::with_capacity(n);
        for j in 0..n {
            let j_j = extraction_matrix(j, n, d)?;
            // Only the quadratic form of J_row' P J_j enters the gates, so the
            // symmetric part is stored.
            head_gates.push(symmetrize(&(j_row.transpose() * &p * &j_j)));
            let a_j = j_j.transpose() * &weights.w_v[h];
            head_experts.push((0..weights.head_dim).map(|k| a_j.column(k).into_owned()).collect());
        }
        omega.push((0..weights.head_dim).map(|k| weights.w_o[h][(k, col)]).collect());
        gating.push(head_gates);
        expert.push(head_experts);
    }
    Ok(EntryHmoe {
        row,
        col,
        dim: n * d,
        omega,
        gating,
        expert,
        placement: weights.placement,
        activation: weights.activation,
    })
}

/// Sweep every output entry, evaluate both the direct forward pass and the
/// mixture form, and return the largest absolute difference.
pub fn verify_equivalence(
    weights: &AttentionWeights,
    x: &DMatrix<f64>,
) -> Result<f64, ModelError> {
    let forward = weights.forward(x)?;
    let vec_x = vectorize(x);
    let mut max_diff = 0.0_f64;
    for row in 0..weights.seq_len {
        for col in 0..weights.embed_dim {
            let entry = attention_entry_as_hmoe(weights, row, col)?;
            let diff = (entry.eval(&vec_x)? - forward[(row, col)]).abs();
            max_diff = max_diff.max(diff);
        }
    }
    Ok(max_diff)
}

/// Serialization document for attention weights.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsDoc {
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "N")]
    seq_len: usize,
    #[serde(rename = "d")]
    embed_dim: usize,
    #[serde(rename = "d_v")]
    head_dim: usize,
    w_q: Vec<Vec<Vec<f64>>>,
    w_k: Vec<Vec<Vec<f64>>>,
    w_v: Vec<Vec<Vec<f64>>>,
    w_o: Vec<Vec<Vec<f64>>>,
    placement: GatePlacement,
    activation: ActivationKind,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|p| (0..m.ncols()).map(|q| m[(p, q)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |p, q| rows[p][q])
}

impl Serialize for AttentionWeights {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WeightsDoc {
            heads: self.heads,
            seq_len: self.seq_len,
            embed_dim: self.embed_dim,
            head_dim: self.head_dim,
            w_q: self.w_q.iter().map(to_rows).collect(),
            w_k: self.w_k.iter().map(to_rows).collect(),
            w_v: self.w_v.iter().map(to_rows).collect(),
            w_o: self.w_o.iter().map(to_rows).collect(),
            placement: self.placement,
            activation: self.activation,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AttentionWeights {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = WeightsDoc::deserialize(deserializer)?;
        if doc.w_q.len() != doc.heads {
            return Err(serde::de::Error::custom("declared H disagrees with w_q"));
        }
        AttentionWeights::new(
            doc.seq_len,
            doc.embed_dim,
            doc.head_dim,
            doc.w_q.iter().map(|m| from_rows(m)).collect(),
            doc.w_k.iter().map(|m| from_rows(m)).collect(),
            doc.w_v.iter().map(|m| from_rows(m)).collect(),
            doc.w_o.iter().map(|m| from_rows(m)).collect(),
            doc.placement,
            doc.activation,
        )
        .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}
