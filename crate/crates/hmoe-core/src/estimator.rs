//! Penalty-free least squares over mixing measures.
//!
//! The optimizer works on a packed parameter vector holding the channel
//! weights, the upper triangles of all non-last gating matrices, and the
//! expert vectors. The last gating matrix of each head is pinned to zero and
//! symmetry is a property of the parameterization, so both normalizations
//! survive any number of steps by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{FitError, ModelError};
use crate::measure::{MixingMeasure, ModelSpec, Variant};
use crate::model::eval_model;
use nalgebra::{DMatrix, DVector};

/// Decay exponent of the near-truth initialization radius in the sample size.
pub const INIT_DECAY_EXPONENT: f64 = 0.083;

/// Gradient-descent settings. `step` is the step size each epoch starts
/// from before backtracking; `grad_tol_per_sample` is multiplied by the
/// sample count to form the gradient-norm stopping threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step: f64,
    pub max_epochs: usize,
    pub shrink: f64,
    pub armijo_c1: f64,
    pub grad_tol_per_sample: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 0.05,
            max_epochs: 1000,
            shrink: 0.5,
            armijo_c1: 1e-4,
            grad_tol_per_sample: 1e-8,
            max_backtracks: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.step > 0.0) {
            return Err(FitError::InvalidConfig {
                detail: format!("step must be positive, got {}", self.step),
            });
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(FitError::InvalidConfig {
                detail: format!("shrink must lie in (0,1), got {}", self.shrink),
            });
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(FitError::InvalidConfig {
                detail: format!("armijo_c1 must lie in (0,1), got {}", self.armijo_c1),
            });
        }
        if !(self.grad_tol_per_sample >= 0.0) {
            return Err(FitError::InvalidConfig {
                detail: format!(
                    "grad_tol_per_sample must be nonnegative, got {}",
                    self.grad_tol_per_sample
                ),
            });
        }
        Ok(())
    }
}

/// Why a fit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    EpochBudget,
    LineSearchStall,
}

/// Result of a gradient-descent fit. The loss trajectory starts with the
/// initial loss and is non-increasing; the line search only accepts steps
/// with sufficient decrease.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub final_sse: f64,
    pub epochs: usize,
    pub trajectory: Vec<f64>,
    pub termination: Termination,
}

/// Dimensions of the free-parameter vector of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamShape {
    pub heads: usize,
    pub experts: usize,
    pub channels: usize,
    pub dim: usize,
}

impl ParamShape {
    pub fn of(measure: &MixingMeasure) -> Self {
        ParamShape {
            heads: measure.heads(),
            experts: measure.experts(),
            channels: measure.channels(),
            dim: measure.dim(),
        }
    }

    /// Entries in one upper triangle (diagonal included).
    pub fn tri(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn omega_len(&self) -> usize {
        self.heads * self.channels
    }

    pub fn gate_len(&self) -> usize {
        self.heads * (self.experts - 1) * self.tri()
    }

    pub fn expert_len(&self) -> usize {
        self.heads * self.experts * self.channels * self.dim
    }

    pub fn total_len(&self) -> usize {
        self.omega_len() + self.gate_len() + self.expert_len()
    }

    pub fn omega_idx(&self, h: usize, k: usize) -> usize {
        h * self.channels + k
    }

    /// Offset of the triangle of free gating matrix `(h, i)`, `i < N-1`.
    pub fn gate_base(&self, h: usize, i: usize) -> usize {
        self.omega_len() + (h * (self.experts - 1) + i) * self.tri()
    }

    pub fn expert_base(&self, h: usize, i: usize, k: usize) -> usize {
        self.omega_len()
            + self.gate_len()
            + ((h * self.experts + i) * self.channels + k) * self.dim
    }

    /// Offset within a triangle of entry `(p, q)` with `p <= q`.
    pub fn tri_offset(&self, p: usize, q: usize) -> usize {
        // Row p starts after p full rows of shrinking length.
        p * self.dim - p * (p + 1) / 2 + p + (q - p)
    }
}

/// Packed evaluator for one (shape, spec) pair, with reusable scratch space.
pub(crate) struct Packed {
    pub shape: ParamShape,
    variant: Variant,
    expert_gated: bool,
    outer_gated: bool,
    act: crate::ActivationKind,
}

/// Scratch buffers sized for one head sweep.
pub(crate) struct Workspace {
    gates: Vec<f64>,
    dots: Vec<f64>,
    evals: Vec<f64>,
    mixes: Vec<f64>,
    comps: Vec<f64>,
    dlogit: Vec<f64>,
}

impl Workspace {
    pub fn new(shape: &ParamShape) -> Self {
        Workspace {
            gates: vec![0.0; shape.experts],
            dots: vec![0.0; shape.experts * shape.channels],
            evals: vec![0.0; shape.experts * shape.channels],
            mixes: vec![0.0; shape.channels],
            comps: vec![0.0; shape.channels],
            dlogit: vec![0.0; shape.experts],
        }
    }
}

impl Packed {
    pub fn new(shape: ParamShape, spec: &ModelSpec) -> Self {
        let act = spec.effective_activation();
        Packed {
            shape,
            variant: spec.variant,
            expert_gated: spec.variant == Variant::GatedValue,
            outer_gated: spec.variant == Variant::GatedSdpa,
            act,
        }
    }

    /// Flatten a measure. Gating matrices are first translated so the last
    /// one per head is zero, which leaves all softmax gates unchanged.
    pub fn pack(&self, measure: &MixingMeasure) -> Vec<f64> {
        let s = &self.shape;
        let mut params = vec![0.0; s.total_len()];
        for h in 0..s.heads {
            for k in 0..s.channels {
                params[s.omega_idx(h, k)] = measure.omega(h, k);
            }
            let last = measure.gating(h, s.experts - 1);
            for i in 0..s.experts - 1 {
                let m = measure.gating(h, i);
                let base = s.gate_base(h, i);
                let mut idx = base;
                for p in 0..s.dim {
                    for q in p..s.dim {
                        params[idx] = m[(p, q)] - last[(p, q)];
                        idx += 1;
                    }
                }
            }
            for i in 0..s.experts {
                for k in 0..s.channels {
                    let a = measure.expert(h, i, k);
                    let base = s.expert_base(h, i, k);
                    params[base..base + s.dim].copy_from_slice(a.as_slice());
                }
            }
        }
        params
    }

    pub fn unpack(&self, params: &[f64]) -> MixingMeasure {
        let s = &self.shape;
        let mut omega = vec![vec![0.0; s.channels]; s.heads];
        let mut gating = vec![vec![DMatrix::zeros(s.dim, s.dim); s.experts]; s.heads];
        let mut expert =
            vec![vec![vec![DVector::zeros(s.dim); s.channels]; s.experts]; s.heads];
        for h in 0..s.heads {
            for k in 0..s.channels {
                omega[h][k] = params[s.omega_idx(h, k)];
            }
            for i in 0..s.experts - 1 {
                let mut idx = s.gate_base(h, i);
                for p in 0..s.dim {
                    for q in p..s.dim {
                        gating[h][i][(p, q)] = params[idx];
                        gating[h][i][(q, p)] = params[idx];
                        idx += 1;
                    }
                }
            }
            for i in 0..s.experts {
                for k in 0..s.channels {
                    let base = s.expert_base(h, i, k);
                    expert[h][i][k] = DVector::from_column_slice(&params[base..base + s.dim]);
                }
            }
        }
        MixingMeasure::new(omega, gating, expert).expect("packed shapes are consistent")
    }

    /// Model value at one covariate row; fills the workspace caches for the
    /// head currently being processed.
    #[inline]
    fn forward_head(&self, params: &[f64], h: usize, x: &[f64], ws: &mut Workspace) {
        let s = &self.shape;
        let n = s.experts;
        let d = s.dim;
        // Logits of the free gates; the pinned last gate has logit zero.
        let mut max_logit = 0.0_f64;
        for i in 0..n - 1 {
            let mut idx = s.gate_base(h, i);
            let mut acc = 0.0;
            for p in 0..d {
                let xp = x[p];
                acc += params[idx] * xp * xp;
                idx += 1;
                for q in p + 1..d {
                    acc += 2.0 * params[idx] * xp * x[q];
                    idx += 1;
                }
            }
            ws.gates[i] = acc;
            if acc > max_logit {
                max_logit = acc;
            }
        }
        ws.gates[n - 1] = 0.0;
        let mut total = 0.0;
        for g in ws.gates.iter_mut() {
            *g = (*g - max_logit).exp();
            total += *g;
        }
        for g in ws.gates.iter_mut() {
            *g /= total;
        }
        for k in 0..s.channels {
            ws.mixes[k] = 0.0;
        }
        for i in 0..n {
            let gate = ws.gates[i];
            for k in 0..s.channels {
                let base = s.expert_base(h, i, k);
                let mut dot = 0.0;
                for p in 0..d {
                    dot += params[base + p] * x[p];
                }
                let e = if self.expert_gated {
                    self.act.value(dot)
                } else {
                    dot
                };
                ws.dots[i * s.channels + k] = dot;
                ws.evals[i * s.channels + k] = e;
                ws.mixes[k] += gate * e;
            }
        }
        for k in 0..s.channels {
            ws.comps[k] = if self.outer_gated {
                self.act.value(ws.mixes[k])
            } else {
                ws.mixes[k]
            };
        }
    }

    #[inline]
    fn value_from_comps(&self, params: &[f64], h: usize, ws: &Workspace) -> f64 {
        let s = &self.shape;
        let mut acc = 0.0;
        for k in 0..s.channels {
            acc += params[s.omega_idx(h, k)] * ws.comps[k];
        }
        acc
    }

    fn predict(&self, params: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
        let mut f = 0.0;
        for h in 0..self.shape.heads {
            self.forward_head(params, h, x, ws);
            f += self.value_from_comps(params, h, ws);
        }
        f
    }

    /// Sum of squared residuals.
    pub fn sse(&self, params: &[f64], data: &Dataset, ws: &mut Workspace) -> f64 {
        let mut acc = 0.0;
        for (x, y) in data.rows() {
            let r = y - self.predict(params, x, ws);
            acc += r * r;
        }
        acc
    }

    /// Like `sse`, but returns early once the running sum exceeds `cap`.
    /// Residual squares are nonnegative, so a partial sum above the cap
    /// already decides an Armijo rejection; the returned value is then only
    /// a lower bound on the true loss.
    pub fn sse_capped(&self, params: &[f64], data: &Dataset, cap: f64, ws: &mut Workspace) -> f64 {
        let mut acc = 0.0;
        for (x, y) in data.rows() {
            let r = y - self.predict(params, x, ws);
            acc += r * r;
            if acc > cap {
                return acc;
            }
        }
        acc
    }

    /// Fused loss and gradient with respect to the packed parameters.
    pub fn sse_grad(
        &self,
        params: &[f64],
        data: &Dataset,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let s = self.shape;
        grad.fill(0.0);
        let mut acc = 0.0;
        for (x, y) in data.rows() {
            // Forward pass over all heads first to get the residual.
            let mut f = 0.0;
            for h in 0..s.heads {
                self.forward_head(params, h, x, ws);
                f += self.value_from_comps(params, h, ws);
            }
            let r = y - f;
            acc += r * r;
            let scale = -2.0 * r;
            for h in 0..s.heads {
                // Recompute the per-head caches; cheaper than storing all
                // heads and keeps the workspace small.
                self.forward_head(params, h, x, ws);
                for i in 0..s.experts {
                    ws.dlogit[i] = 0.0;
                }
                for k in 0..s.channels {
                    let omega = params[s.omega_idx(h, k)];
                    grad[s.omega_idx(h, k)] += scale * ws.comps[k];
                    let dcomp = if self.outer_gated {
                        // Sigmoid derivative from the cached value.
                        match self.act {
                            crate::ActivationKind::Identity => 1.0,
                            crate::ActivationKind::SigmoidWithBias { .. } => {
                                ws.comps[k] * (1.0 - ws.comps[k])
                            }
                        }
                    } else {
                        1.0
                    };
                    let chain = scale * omega * dcomp;
                    for i in 0..s.experts {
                        let cell = i * s.channels + k;
                        let dexpert = if self.expert_gated {
                            match self.act {
                                crate::ActivationKind::Identity => 1.0,
                                crate::ActivationKind::SigmoidWithBias { .. } => {
                                    ws.evals[cell] * (1.0 - ws.evals[cell])
                                }
                            }
                        } else {
                            1.0
                        };
                        let coef = chain * ws.gates[i] * dexpert;
                        let base = s.expert_base(h, i, k);
                        for p in 0..s.dim {
                            grad[base + p] += coef * x[p];
                        }
                        ws.dlogit[i] += chain * (ws.evals[cell] - ws.mixes[k]);
                    }
                }
                for i in 0..s.experts - 1 {
                    let dlogit = ws.dlogit[i] * ws.gates[i];
                    let mut idx = s.gate_base(h, i);
                    for p in 0..s.dim {
                        let xp = x[p];
                        grad[idx] += dlogit * xp * xp;
                        idx += 1;
                        for q in p + 1..s.dim {
                            grad[idx] += dlogit * 2.0 * xp * x[q];
                            idx += 1;
                        }
                    }
                }
            }
        }
        acc
    }
}

/// Sum of squared residuals of a measure on a dataset.
pub fn sse_loss(
    measure: &MixingMeasure,
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<f64, ModelError> {
    if data.dim() != measure.dim() {
        return Err(ModelError::DimensionMismatch {
            context: "sse_loss",
            expected: measure.dim(),
            got: data.dim(),
        });
    }
    let mut acc = 0.0;
    for (x, y) in data.rows() {
        let r = y - eval_model(measure, spec, x)?;
        acc += r * r;
    }
    Ok(acc)
}

/// Analytic gradient of `sse_loss` with respect to the free parameters.
#[derive(Debug, Clone)]
pub struct LossGradient {
    shape: ParamShape,
    values: Vec<f64>,
}

impl LossGradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn omega(&self, h: usize, k: usize) -> f64 {
        self.values[self.shape.omega_idx(h, k)]
    }

    /// Gradient entry of the free gating matrix `(h, i)` at `(p, q)`, `p <= q`.
    pub fn gate_entry(&self, h: usize, i: usize, p: usize, q: usize) -> f64 {
        self.values[self.shape.gate_base(h, i) + self.shape.tri_offset(p, q)]
    }

    pub fn expert_entry(&self, h: usize, i: usize, k: usize, p: usize) -> f64 {
        self.values[self.shape.expert_base(h, i, k) + p]
    }
}

pub fn loss_gradient(
    measure: &MixingMeasure,
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<LossGradient, ModelError> {
    if data.dim() != measure.dim() {
        return Err(ModelError::DimensionMismatch {
            context: "loss_gradient",
            expected: measure.dim(),
            got: data.dim(),
        });
    }
    let shape = ParamShape::of(measure);
    let packed = Packed::new(shape, spec);
    let params = packed.pack(measure);
    let mut ws = Workspace::new(&shape);
    let mut values = vec![0.0; shape.total_len()];
    packed.sse_grad(&params, data, &mut values, &mut ws);
    Ok(LossGradient { shape, values })
}

/// Full-batch gradient descent with Armijo backtracking.
///
/// Every epoch restarts the line search at `cfg.step` and halves until the
/// sufficient-decrease condition holds; if the backtracking budget runs out
/// the fit stops without taking the step.
pub fn fit(
    start: &MixingMeasure,
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &OptimizerConfig,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if data.dim() != start.dim() {
        return Err(FitError::Model(ModelError::DimensionMismatch {
            context: "fit",
            expected: start.dim(),
            got: data.dim(),
        }));
    }
    let shape = ParamShape::of(start);
    let packed = Packed::new(shape, spec);
    let mut params = packed.pack(start);
    let mut candidate = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(&shape);
    let grad_tol = cfg.grad_tol_per_sample * data.len() as f64;

    let mut sse = packed.sse(&params, data, &mut ws);
    if !sse.is_finite() {
        return Err(FitError::NonFinite {
            what: "loss",
            epoch: 0,
        });
    }
    let mut trajectory = vec![sse];
    let mut termination = Termination::EpochBudget;
    let mut epochs = 0;

    for epoch in 0..cfg.max_epochs {
        packed.sse_grad(&params, data, &mut grad, &mut ws);
        let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
        if !gnorm_sq.is_finite() {
            return Err(FitError::NonFinite {
                what: "gradient",
                epoch,
            });
        }
        if gnorm_sq.sqrt() <= grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut step = cfg.step;
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            for (c, (p, g)) in candidate.iter_mut().zip(params.iter().zip(grad.iter())) {
                *c = p - step * g;
            }
            let target = sse - cfg.armijo_c1 * step * gnorm_sq;
            let cand_sse = packed.sse_capped(&candidate, data, target, &mut ws);
            if cand_sse <= target {
                std::mem::swap(&mut params, &mut candidate);
                sse = cand_sse;
                accepted = true;
                break;
            }
            step *= cfg.shrink;
        }
        if !accepted {
            termination = Termination::LineSearchStall;
            break;
        }
        epochs = epoch + 1;
        trajectory.push(sse);
    }

    Ok(FitResult {
        measure: packed.unpack(&params),
        final_sse: sse,
        epochs,
        trajectory,
        termination,
    })
}

/// Over-specified initialization near a ground-truth measure.
///
/// The first `K*` channels copy the truth; extra channels duplicate true
/// channels round-robin, with the weight of each true channel split evenly
/// over its copies so per-head weight sums are preserved. Every free
/// parameter then receives an independent uniform perturbation of magnitude
/// at most `scale * n^-0.083`.
pub fn init_near_truth<R: Rng>(
    truth: &MixingMeasure,
    k_fit: usize,
    n: usize,
    scale: f64,
    rng: &mut R,
) -> Result<MixingMeasure, FitError> {
    let k_true = truth.channels();
    if k_fit < k_true {
        return Err(FitError::TooFewChannels { k_fit, k_true });
    }
    let mut copies = vec![0usize; k_true];
    for k in 0..k_fit {
        copies[k % k_true] += 1;
    }
    let mut base = MixingMeasure::zeros(truth.heads(), truth.experts(), k_fit, truth.dim());
    for h in 0..truth.heads() {
        for i in 0..truth.experts() {
            base.set_gating(h, i, truth.gating(h, i).clone());
        }
        for k in 0..k_fit {
            let source = k % k_true;
            base.set_omega(h, k, truth.omega(h, source) / copies[source] as f64);
            for i in 0..truth.experts() {
                base.set_expert(h, i, k, truth.expert(h, i, source).clone());
            }
        }
    }
    let radius = scale * (n as f64).powf(-INIT_DECAY_EXPONENT);
    if radius > 0.0 {
        let shape = ParamShape::of(&base);
        let packed = Packed::new(shape, &ModelSpec::mha());
        let mut params = packed.pack(&base);
        for p in params.iter_mut() {
            *p += rng.random_range(-radius..=radius);
        }
        base = packed.unpack(&params);
    }
    Ok(base)
}
