//! Evaluation of the mixture regression functions.

use nalgebra::DMatrix;

use crate::error::ModelError;
use crate::measure::{MixingMeasure, ModelSpec, Variant};

/// Quadratic form `x' M x` without temporaries.
pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = m.nrows();
    let mut acc = 0.0;
    for p in 0..d {
        let mut row = 0.0;
        for q in 0..d {
            row += m[(p, q)] * x[q];
        }
        acc += x[p] * row;
    }
    acc
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(ai, xi)| ai * xi).sum()
}

/// Softmax gates `w_i = exp(x'M_i x) / sum_j exp(x'M_j x)`.
///
/// The largest logit is subtracted before exponentiation; with the bounded
/// covariates used here the logits stay small, but gate matrices produced by
/// an optimizer are not bounded a priori.
pub fn softmax_gates(gates: &[DMatrix<f64>], x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if gates.is_empty() {
        return Err(ModelError::EmptyInput {
            context: "softmax_gates",
        });
    }
    for m in gates {
        if m.nrows() != x.len() || m.ncols() != x.len() {
            return Err(ModelError::DimensionMismatch {
                context: "softmax_gates",
                expected: x.len(),
                got: m.nrows(),
            });
        }
    }
    let logits: Vec<f64> = gates.iter().map(|m| quad_form(m, x)).collect();
    Ok(softmax_from_logits(&logits))
}

pub(crate) fn softmax_from_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// One head/channel component of the regression function.
///
/// MHA: `sum_i w_i (a_i'x)`; gated value: `sum_i w_i act(a_i'x)`;
/// gated SDPA: `act(sum_i w_i (a_i'x))`.
pub fn eval_component(
    measure: &MixingMeasure,
    spec: &ModelSpec,
    h: usize,
    k: usize,
    x: &[f64],
) -> Result<f64, ModelError> {
    if h >= measure.heads() {
        return Err(ModelError::IndexOutOfRange {
            context: "eval_component head",
            index: h,
            bound: measure.heads(),
        });
    }
    if k >= measure.channels() {
        return Err(ModelError::IndexOutOfRange {
            context: "eval_component channel",
            index: k,
            bound: measure.channels(),
        });
    }
    if x.len() != measure.dim() {
        return Err(ModelError::DimensionMismatch {
            context: "eval_component",
            expected: measure.dim(),
            got: x.len(),
        });
    }
    let weights = softmax_gates(measure.gating_row(h), x)?;
    let act = spec.effective_activation();
    let value = match spec.variant {
        Variant::Mha => (0..measure.experts())
            .map(|i| weights[i] * dot(measure.expert(h, i, k).as_slice(), x))
            .sum(),
        Variant::GatedValue => (0..measure.experts())
            .map(|i| weights[i] * act.value(dot(measure.expert(h, i, k).as_slice(), x)))
            .sum(),
        Variant::GatedSdpa => {
            let inner: f64 = (0..measure.experts())
                .map(|i| weights[i] * dot(measure.expert(h, i, k).as_slice(), x))
                .sum();
            act.value(inner)
        }
    };
    Ok(value)
}

/// Full regression function: the omega-weighted sum of all components.
pub fn eval_model(measure: &MixingMeasure, spec: &ModelSpec, x: &[f64]) -> Result<f64, ModelError> {
    if x.len() != measure.dim() {
        return Err(ModelError::DimensionMismatch {
            context: "eval_model",
            expected: measure.dim(),
            got: x.len(),
        });
    }
    let act = spec.effective_activation();
    let mut total = 0.0;
    for h in 0..measure.heads() {
        let weights = softmax_gates(measure.gating_row(h), x)?;
        for k in 0..measure.channels() {
            let component = match spec.variant {
                Variant::Mha => (0..measure.experts())
                    .map(|i| weights[i] * dot(measure.expert(h, i, k).as_slice(), x))
                    .sum(),
                Variant::GatedValue => (0..measure.experts())
                    .map(|i| weights[i] * act.value(dot(measure.expert(h, i, k).as_slice(), x)))
                    .sum(),
                Variant::GatedSdpa => {
                    let inner: f64 = (0..measure.experts())
                        .map(|i| weights[i] * dot(measure.expert(h, i, k).as_slice(), x))
                        .sum();
                    act.value(inner)
                }
            };
            total += measure.omega(h, k) * component;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_x(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }

    #[test]
    fn zero_gates_give_uniform_weights() {
        let gates = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        let w = softmax_gates(&gates, &[0.3, -0.7]).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gate_values_match_scalar_evaluation() {
        // Logits 2 and 0 at x = (1,0): weights e^2/(e^2+1) and 1/(e^2+1).
        let gates = vec![
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]),
            DMatrix::zeros(2, 2),
        ];
        let w = softmax_gates(&gates, &[1.0, 0.0]).unwrap();
        let e2 = 2.0_f64.exp();
        assert_abs_diff_eq!(w[0], e2 / (e2 + 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 1.0 / (e2 + 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(w[0], 0.88080, epsilon = 1e-5);
        assert_abs_diff_eq!(w[1], 0.11920, epsilon = 1e-5);
    }

    #[test]
    fn gates_sum_to_one_and_are_translation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = rng.random_range(1..4usize);
            let n = rng.random_range(1..5usize);
            let gates: Vec<DMatrix<f64>> = (0..n)
                .map(|_| {
                    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.5..1.5));
                    crate::measure::symmetrize(&m)
                })
                .collect();
            let delta = crate::measure::symmetrize(&DMatrix::from_fn(d, d, |_, _| {
                rng.random_range(-1.0..1.0)
            }));
            let x = random_x(&mut rng, d);
            let w = softmax_gates(&gates, &x).unwrap();
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(w.iter().all(|&wi| wi > 0.0 && wi <= 1.0));
            let shifted: Vec<DMatrix<f64>> = gates.iter().map(|m| m + &delta).collect();
            let w2 = softmax_gates(&shifted, &x).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let gates = vec![DMatrix::zeros(3, 3)];
        assert!(matches!(
            softmax_gates(&gates, &[1.0, 0.0]),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mha_component_vanishes_at_origin() {
        let g = fixtures::true_measure();
        let spec = ModelSpec::mha();
        for h in 0..2 {
            for k in 0..2 {
                assert_eq!(eval_component(&g, &spec, h, k, &[0.0, 0.0]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn gated_value_with_identity_reduces_to_mha() {
        let g = fixtures::true_measure();
        let mha = ModelSpec::mha();
        let gv = ModelSpec::new(Variant::GatedValue, ActivationKind::Identity);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_x(&mut rng, 2);
            let lhs = eval_component(&g, &gv, 1, 0, &x).unwrap();
            let rhs = eval_component(&g, &mha, 1, 0, &x).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
        }
    }

    #[test]
    fn gated_value_component_at_origin_is_sigmoid_of_bias() {
        let g = fixtures::true_measure();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let v = eval_component(&g, &spec, 0, 0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.622459, epsilon = 1e-6);
    }

    #[test]
    fn model_at_origin_matches_closed_forms() {
        let g = fixtures::true_measure();
        assert_eq!(eval_model(&g, &ModelSpec::mha(), &[0.0, 0.0]).unwrap(), 0.0);
        let gv = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let v = eval_model(&g, &gv, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, fixtures::true_omega_sum() * 0.622_459_331_201_854_6, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.618394, epsilon = 1e-6);
    }

    #[test]
    fn gated_sdpa_with_identity_reduces_to_mha() {
        let g = fixtures::true_measure();
        let mha = ModelSpec::mha();
        let sdpa = ModelSpec::new(Variant::GatedSdpa, ActivationKind::Identity);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x = random_x(&mut rng, 2);
            let lhs = eval_model(&g, &sdpa, &x).unwrap();
            let rhs = eval_model(&g, &mha, &x).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn sigmoid_components_are_bounded() {
        let g = fixtures::true_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for variant in [Variant::GatedValue, Variant::GatedSdpa] {
            let spec = ModelSpec::new(variant, ActivationKind::sigmoid(0.5));
            for _ in 0..100 {
                let x = random_x(&mut rng, 2);
                let v = eval_component(&g, &spec, 0, 1, &x).unwrap();
                assert!(v.abs() <= 1.0);
            }
        }
    }
}
