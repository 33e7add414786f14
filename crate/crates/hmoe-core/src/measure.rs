//! Mixing measures: the parameter object of the hierarchical mixture model.
//!
//! A measure collects, for `H` heads, `K` channels and `N` experts per head,
//! the channel weights `omega[h][k]`, the symmetric gating matrices `M[h][i]`
//! and the expert vectors `a[h][i][k]`. The last gating matrix of every head
//! is the zero matrix; softmax gates are translation invariant, so this
//! normalization removes a free direction without changing the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::ModelError;

/// Which regression function the measure parameterizes.
///
/// * `Mha` — linear experts, gates inside: `sum_i w_i(x) a_i'x`
/// * `GatedValue` — activation on each expert: `sum_i w_i(x) act(a_i'x)`
/// * `GatedSdpa` — activation outside the inner mixture: `act(sum_i w_i(x) a_i'x)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mha,
    GatedValue,
    GatedSdpa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mha, Variant::GatedValue, Variant::GatedSdpa];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::GatedValue => "gated_value",
            Variant::GatedSdpa => "gated_sdpa",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mha" => Ok(Variant::Mha),
            "gated_value" | "gated-value" | "value" => Ok(Variant::GatedValue),
            "gated_sdpa" | "gated-sdpa" | "sdpa" => Ok(Variant::GatedSdpa),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Model variant plus activation. The MHA variant has linear experts, so its
/// effective activation is the identity regardless of what is configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub activation: ActivationKind,
}

impl ModelSpec {
    pub fn new(variant: Variant, activation: ActivationKind) -> Self {
        ModelSpec {
            variant,
            activation,
        }
    }

    pub fn mha() -> Self {
        ModelSpec::new(Variant::Mha, ActivationKind::Identity)
    }

    /// Activation actually applied by the evaluator.
    pub fn effective_activation(&self) -> ActivationKind {
        match self.variant {
            Variant::Mha => ActivationKind::Identity,
            _ => self.activation,
        }
    }
}

/// Discrete mixing measure over gating matrices and expert vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMeasure {
    heads: usize,
    experts: usize,
    channels: usize,
    dim: usize,
    omega: Vec<Vec<f64>>,
    gating: Vec<Vec<DMatrix<f64>>>,
    expert: Vec<Vec<Vec<DVector<f64>>>>,
}

impl MixingMeasure {
    /// Build a measure from nested parameter arrays.
    ///
    /// Shapes are validated strictly. Gating matrices are symmetrized on
    /// ingest as `(M + M') / 2`; only the quadratic form `x'Mx` ever enters
    /// the model, which the symmetric part preserves.
    pub fn new(
        omega: Vec<Vec<f64>>,
        gating: Vec<Vec<DMatrix<f64>>>,
        expert: Vec<Vec<Vec<DVector<f64>>>>,
    ) -> Result<Self, ModelError> {
        let heads = omega.len();
        if heads == 0 {
            return Err(ModelError::EmptyInput { context: "omega" });
        }
        let channels = omega[0].len();
        if channels == 0 {
            return Err(ModelError::EmptyInput { context: "omega[0]" });
        }
        if gating.len() != heads || expert.len() != heads {
            return Err(ModelError::InvalidShape {
                context: "measure",
                detail: format!(
                    "omega has {} heads, gating {}, experts {}",
                    heads,
                    gating.len(),
                    expert.len()
                ),
            });
        }
        let experts = gating[0].len();
        if experts == 0 {
            return Err(ModelError::EmptyInput { context: "gating[0]" });
        }
        let dim = gating[0][0].nrows();
        for (h, row) in omega.iter().enumerate() {
            if row.len() != channels {
                return Err(ModelError::InvalidShape {
                    context: "omega",
                    detail: format!("head {h} has {} channels, expected {channels}", row.len()),
                });
            }
        }
        for (h, mats) in gating.iter().enumerate() {
            if mats.len() != experts {
                return Err(ModelError::InvalidShape {
                    context: "gating",
                    detail: format!("head {h} has {} experts, expected {experts}", mats.len()),
                });
            }
            for (i, m) in mats.iter().enumerate() {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(ModelError::InvalidShape {
                        context: "gating",
                        detail: format!(
                            "matrix ({h},{i}) is {}x{}, expected {dim}x{dim}",
                            m.nrows(),
                            m.ncols()
                        ),
                    });
                }
            }
        }
        for (h, per_expert) in expert.iter().enumerate() {
            if per_expert.len() != experts {
                return Err(ModelError::InvalidShape {
                    context: "experts",
                    detail: format!(
                        "head {h} has {} expert rows, expected {experts}",
                        per_expert.len()
                    ),
                });
            }
            for (i, per_channel) in per_expert.iter().enumerate() {
                if per_channel.len() != channels {
                    return Err(ModelError::InvalidShape {
                        context: "experts",
                        detail: format!(
                            "expert ({h},{i}) has {} channels, expected {channels}",
                            per_channel.len()
                        ),
                    });
                }
                for (k, a) in per_channel.iter().enumerate() {
                    if a.len() != dim {
                        return Err(ModelError::InvalidShape {
                            context: "experts",
                            detail: format!(
                                "vector ({h},{i},{k}) has length {}, expected {dim}",
                                a.len()
                            ),
                        });
                    }
                }
            }
        }
        let gating = gating
            .into_iter()
            .map(|mats| mats.into_iter().map(|m| symmetrize(&m)).collect())
            .collect();
        Ok(MixingMeasure {
            heads,
            experts,
            channels,
            dim,
            omega,
            gating,
            expert,
        })
    }

    /// Measure with all parameters zero, useful as a construction base.
    pub fn zeros(heads: usize, experts: usize, channels: usize, dim: usize) -> Self {
        MixingMeasure {
            heads,
            experts,
            channels,
            dim,
            omega: vec![vec![0.0; channels]; heads],
            gating: vec![vec![DMatrix::zeros(dim, dim); experts]; heads],
            expert: vec![vec![vec![DVector::zeros(dim); channels]; experts]; heads],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega(&self, h: usize, k: usize) -> f64 {
        self.omega[h][k]
    }

    pub fn set_omega(&mut self, h: usize, k: usize, value: f64) {
        self.omega[h][k] = value;
    }

    pub fn gating(&self, h: usize, i: usize) -> &DMatrix<f64> {
        &self.gating[h][i]
    }

    /// Replace a gating matrix; the stored copy is symmetrized.
    pub fn set_gating(&mut self, h: usize, i: usize, m: DMatrix<f64>) {
        self.gating[h][i] = symmetrize(&m);
    }

    pub fn gating_row(&self, h: usize) -> &[DMatrix<f64>] {
        &self.gating[h]
    }

    pub fn expert(&self, h: usize, i: usize, k: usize) -> &DVector<f64> {
        &self.expert[h][i][k]
    }

    pub fn set_expert(&mut self, h: usize, i: usize, k: usize, a: DVector<f64>) {
        self.expert[h][i][k] = a;
    }

    /// Check a measure against the model assumptions and report violations.
    ///
    /// With `as_ground_truth` set, the weight-positivity, gate-nondegeneracy
    /// and expert-distinctness conditions are checked in addition to the
    /// structural normalization; fitted measures are only held to the latter.
    pub fn validate(&self, as_ground_truth: bool) -> ValidationReport {
        let mut violations = Vec::new();
        let tol = 1e-12;
        for h in 0..self.heads {
            for i in 0..self.experts {
                let m = &self.gating[h][i];
                let asym = (0..self.dim)
                    .flat_map(|p| (0..self.dim).map(move |q| (p, q)))
                    .map(|(p, q)| (m[(p, q)] - m[(q, p)]).abs())
                    .fold(0.0_f64, f64::max);
                if asym > tol {
                    violations.push(AssumptionViolation::AsymmetricGate {
                        head: h,
                        expert: i,
                        max_asymmetry: asym,
                    });
                }
            }
            let last = &self.gating[h][self.experts - 1];
            if last.iter().any(|&v| v != 0.0) {
                violations.push(AssumptionViolation::LastGateNotZero { head: h });
            }
        }
        if as_ground_truth {
            let mut any_positive = false;
            for h in 0..self.heads {
                for k in 0..self.channels {
                    let w = self.omega[h][k];
                    if w < 0.0 {
                        violations.push(AssumptionViolation::NegativeWeight {
                            head: h,
                            channel: k,
                            weight: w,
                        });
                    }
                    if w > 0.0 {
                        any_positive = true;
                    }
                }
            }
            if !any_positive {
                violations.push(AssumptionViolation::AllWeightsZero);
            }
            for h in 0..self.heads {
                if self.experts >= 2 {
                    let any_nonzero = (0..self.experts - 1)
                        .any(|i| self.gating[h][i].iter().any(|&v| v != 0.0));
                    if !any_nonzero {
                        violations.push(AssumptionViolation::ConstantGates { head: h });
                    }
                }
            }
            let mut seen: Vec<((usize, usize, usize), &DVector<f64>)> = Vec::new();
            for h in 0..self.heads {
                for i in 0..self.experts {
                    for k in 0..self.channels {
                        let a = &self.expert[h][i][k];
                        for (prev_idx, prev) in &seen {
                            if *prev == a {
                                violations.push(AssumptionViolation::DuplicateExperts {
                                    first: *prev_idx,
                                    second: (h, i, k),
                                });
                            }
                        }
                        seen.push(((h, i, k), a));
                    }
                }
            }
        }
        ValidationReport { violations }
    }
}

/// Symmetric part `(m + m') / 2`. Exact for already-symmetric input.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for p in 0..m.nrows() {
        for q in 0..m.ncols() {
            out[(p, q)] = 0.5 * (m[(p, q)] + m[(q, p)]);
        }
    }
    out
}

/// One violated assumption, with the offending indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum AssumptionViolation {
    /// Weight below zero on a ground-truth measure.
    NegativeWeight {
        head: usize,
        channel: usize,
        weight: f64,
    },
    /// No strictly positive weight anywhere.
    AllWeightsZero,
    /// A gating matrix is not symmetric to 1e-12.
    AsymmetricGate {
        head: usize,
        expert: usize,
        max_asymmetry: f64,
    },
    /// The last gating matrix of a head is not exactly zero.
    LastGateNotZero { head: usize },
    /// Every non-last gating matrix of a head is zero, so the gates ignore x.
    ConstantGates { head: usize },
    /// Two expert vectors coincide.
    DuplicateExperts {
        first: (usize, usize, usize),
        second: (usize, usize, usize),
    },
}

/// Outcome of `MixingMeasure::validate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<AssumptionViolation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Serialization document: plain nested row-major arrays.
#[derive(Debug, Serialize, Deserialize)]
struct MeasureDoc {
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "N")]
    experts: usize,
    #[serde(rename = "K")]
    channels: usize,
    #[serde(rename = "d")]
    dim: usize,
    omega: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    gating: Vec<Vec<Vec<Vec<f64>>>>,
    a: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Serialize for MixingMeasure {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let doc = MeasureDoc {
            heads: self.heads,
            experts: self.experts,
            channels: self.channels,
            dim: self.dim,
            omega: self.omega.clone(),
            gating: self
                .gating
                .iter()
                .map(|mats| {
                    mats.iter()
                        .map(|m| {
                            (0..m.nrows())
                                .map(|p| (0..m.ncols()).map(|q| m[(p, q)]).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            a: self
                .expert
                .iter()
                .map(|per_expert| {
                    per_expert
                        .iter()
                        .map(|per_channel| {
                            per_channel
                                .iter()
                                .map(|v| v.iter().copied().collect())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MixingMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = MeasureDoc::deserialize(deserializer)?;
        let gating = doc
            .gating
            .iter()
            .map(|mats| {
                mats.iter()
                    .map(|rows| {
                        let nrows = rows.len();
                        let ncols = rows.first().map_or(0, Vec::len);
                        DMatrix::from_fn(nrows, ncols, |p, q| rows[p][q])
                    })
                    .collect()
            })
            .collect();
        let expert = doc
            .a
            .iter()
            .map(|per_expert| {
                per_expert
                    .iter()
                    .map(|per_channel| {
                        per_channel
                            .iter()
                            .map(|v| DVector::from_vec(v.clone()))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let measure = MixingMeasure::new(doc.omega, gating, expert)
            .map_err(|e| serde::de::Error::custom(e.to_string()))?;
        if measure.heads() != doc.heads
            || measure.experts() != doc.experts
            || measure.channels() != doc.channels
            || measure.dim() != doc.dim
        {
            return Err(serde::de::Error::custom(
                "declared H/N/K/d disagree with array shapes",
            ));
        }
        Ok(measure)
    }
}
