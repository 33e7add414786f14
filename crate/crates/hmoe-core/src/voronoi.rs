//! Voronoi parameter-estimation losses.
//!
//! A fitted component (head, channel) is assigned to the closest true
//! component under an empirical L2 distance between component functions on a
//! seeded uniform grid. Expert indices within a matched pair are aligned by
//! the permutation minimizing total parameter distance; the losses then
//! compare weights and matched parameters cell by cell.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{ModelError, VoronoiError};
use crate::measure::{MixingMeasure, ModelSpec};
use crate::model::{eval_component, eval_model};
use crate::seed;

/// Experts per head above which brute-force permutation matching is refused.
/// A polynomial assignment solver can be slotted into `best_permutation` if
/// larger mixtures ever appear.
const MAX_BRUTE_FORCE_EXPERTS: usize = 8;

/// Fixed sample of quadrature points, identical for every measure compared
/// against it.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    points: Vec<f64>,
    size: usize,
    dim: usize,
    pub seed: u64,
}

impl QuadratureGrid {
    /// `size` points drawn i.i.d. uniform on `[-1,1]^dim` from a seeded stream.
    pub fn uniform(size: usize, dim: usize, grid_seed: u64) -> Self {
        let mut rng = seed::child_rng(grid_seed, "quadrature", &[size as u64, dim as u64]);
        let points = (0..size * dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        QuadratureGrid {
            points,
            size,
            dim,
            seed: grid_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }
}

/// Empirical L2 distance between one fitted and one true component function.
pub fn component_distance(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    fitted_idx: (usize, usize),
    true_idx: (usize, usize),
    spec: &ModelSpec,
    grid: &QuadratureGrid,
) -> Result<f64, VoronoiError> {
    let mut acc = 0.0;
    for x in grid.rows() {
        let a = eval_component(fitted, spec, fitted_idx.0, fitted_idx.1, x)?;
        let b = eval_component(truth, spec, true_idx.0, true_idx.1, x)?;
        acc += (a - b) * (a - b);
    }
    Ok((acc / grid.len() as f64).sqrt())
}

/// Empirical L2 distance between two full regression functions on the grid.
pub fn model_distance(
    left: &MixingMeasure,
    right: &MixingMeasure,
    spec: &ModelSpec,
    grid: &QuadratureGrid,
) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for x in grid.rows() {
        let diff = eval_model(left, spec, x)? - eval_model(right, spec, x)?;
        acc += diff * diff;
    }
    Ok((acc / grid.len() as f64).sqrt())
}

/// Cell structure and expert matching between a fitted and a true measure.
#[derive(Debug, Clone)]
pub struct VoronoiAssignment {
    /// true (h,k) -> fitted components in its cell.
    pub cells: BTreeMap<(usize, usize), Vec<(usize, usize)>>,
    /// fitted (h',k') -> matched expert permutation; entry `i` is the fitted
    /// expert index aligned with true expert `i`.
    pub kappa: BTreeMap<(usize, usize), Vec<usize>>,
    /// fitted (h',k') -> its assigned true component.
    pub assigned_to: BTreeMap<(usize, usize), (usize, usize)>,
    /// Component-distance matrix, fitted-major:
    /// `distances[f][t]` with `f = h'*K + k'` and `t = h*K* + k`.
    pub distances: Vec<Vec<f64>>,
}

impl VoronoiAssignment {
    /// JSON-friendly view (tuple keys do not serialize as JSON maps).
    pub fn to_doc(&self) -> AssignmentDoc {
        AssignmentDoc {
            cells: self
                .cells
                .iter()
                .map(|(truth, members)| CellDoc {
                    true_component: *truth,
                    fitted: members.clone(),
                })
                .collect(),
            kappa: self
                .kappa
                .iter()
                .map(|(fitted, perm)| KappaDoc {
                    fitted_component: *fitted,
                    permutation: perm.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellDoc {
    pub true_component: (usize, usize),
    pub fitted: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KappaDoc {
    pub fitted_component: (usize, usize),
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssignmentDoc {
    pub cells: Vec<CellDoc>,
    pub kappa: Vec<KappaDoc>,
}

fn check_compatible(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
) -> Result<(), VoronoiError> {
    if fitted.heads() != truth.heads() {
        return Err(VoronoiError::ShapeMismatch {
            what: "head count",
            left: fitted.heads(),
            right: truth.heads(),
        });
    }
    if fitted.experts() != truth.experts() {
        return Err(VoronoiError::ShapeMismatch {
            what: "experts per head",
            left: fitted.experts(),
            right: truth.experts(),
        });
    }
    if fitted.dim() != truth.dim() {
        return Err(VoronoiError::ShapeMismatch {
            what: "input dimension",
            left: fitted.dim(),
            right: truth.dim(),
        });
    }
    if fitted.channels() < truth.channels() {
        return Err(VoronoiError::ShapeMismatch {
            what: "channel count",
            left: fitted.channels(),
            right: truth.channels(),
        });
    }
    Ok(())
}

/// Parameter distance between fitted expert `i_fit` (of `(h', k')`) and true
/// expert `i_true` (of `(h, k)`): Euclidean norm over the stacked gating
/// matrix difference and expert vector difference.
fn theta_distance(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    fitted_idx: (usize, usize),
    true_idx: (usize, usize),
    i_fit: usize,
    i_true: usize,
) -> f64 {
    let dm = fitted.gating(fitted_idx.0, i_fit) - truth.gating(true_idx.0, i_true);
    let da = fitted.expert(fitted_idx.0, i_fit, fitted_idx.1)
        - truth.expert(true_idx.0, i_true, true_idx.1);
    (dm.norm_squared() + da.norm_squared()).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    heap_permute(&mut current, n, &mut out);
    out.sort();
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Minimizer over permutations of the total parameter distance; ties resolve
/// to the lexicographically smallest permutation.
fn best_permutation(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    fitted_idx: (usize, usize),
    true_idx: (usize, usize),
) -> Result<Vec<usize>, VoronoiError> {
    let n = truth.experts();
    if n > MAX_BRUTE_FORCE_EXPERTS {
        return Err(VoronoiError::TooManyExperts {
            got: n,
            max: MAX_BRUTE_FORCE_EXPERTS,
        });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = (0..n)
            .map(|i| theta_distance(fitted, truth, fitted_idx, true_idx, perm[i], i))
            .sum();
        match &best {
            Some((cost, _)) if total >= *cost => {}
            _ => best = Some((total, perm)),
        }
    }
    Ok(best.expect("at least one permutation").1)
}

/// Assign every fitted component to its closest true component and align
/// expert indices within each matched pair.
pub fn assign_cells(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    spec: &ModelSpec,
    grid: &QuadratureGrid,
) -> Result<VoronoiAssignment, VoronoiError> {
    check_compatible(fitted, truth)?;
    let k_true = truth.channels();
    let mut cells: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for h in 0..truth.heads() {
        for k in 0..k_true {
            cells.insert((h, k), Vec::new());
        }
    }
    let mut kappa = BTreeMap::new();
    let mut assigned_to = BTreeMap::new();
    let mut distances = Vec::new();
    for h_fit in 0..fitted.heads() {
        for k_fit in 0..fitted.channels() {
            let mut row = Vec::with_capacity(truth.heads() * k_true);
            let mut best = (0usize, 0usize);
            let mut best_dist = f64::INFINITY;
            for h in 0..truth.heads() {
                for k in 0..k_true {
                    let dist = component_distance(
                        fitted,
                        truth,
                        (h_fit, k_fit),
                        (h, k),
                        spec,
                        grid,
                    )?;
                    row.push(dist);
                    // Strict improvement keeps the lexicographically first
                    // minimizer on ties.
                    if dist < best_dist {
                        best_dist = dist;
                        best = (h, k);
                    }
                }
            }
            distances.push(row);
            cells.get_mut(&best).expect("cell exists").push((h_fit, k_fit));
            assigned_to.insert((h_fit, k_fit), best);
            kappa.insert(
                (h_fit, k_fit),
                best_permutation(fitted, truth, (h_fit, k_fit), best)?,
            );
        }
    }
    Ok(VoronoiAssignment {
        cells,
        kappa,
        assigned_to,
        distances,
    })
}

/// Matched parameter discrepancy `sum_i ||dM_i||^r + ||da_i||^r` for one
/// fitted/true component pair, using the precomputed expert permutation.
fn parameter_term(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    assignment: &VoronoiAssignment,
    fitted_idx: (usize, usize),
    true_idx: (usize, usize),
    r: f64,
) -> f64 {
    let perm = &assignment.kappa[&fitted_idx];
    let mut acc = 0.0;
    for i in 0..truth.experts() {
        let dm = fitted.gating(fitted_idx.0, perm[i]) - truth.gating(true_idx.0, i);
        let da = fitted.expert(fitted_idx.0, perm[i], fitted_idx.1)
            - truth.expert(true_idx.0, i, true_idx.1);
        acc += dm.norm().powf(r) + da.norm().powf(r);
    }
    acc
}

fn weight_term(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    assignment: &VoronoiAssignment,
) -> f64 {
    let mut acc = 0.0;
    for (true_idx, members) in &assignment.cells {
        let cell_weight: f64 = members
            .iter()
            .map(|&(h, k)| fitted.omega(h, k))
            .sum();
        acc += (cell_weight - truth.omega(true_idx.0, true_idx.1)).abs();
    }
    acc
}

/// First Voronoi loss: weight discrepancies plus `omega`-weighted parameter
/// discrepancies with a uniform power `r`.
pub fn loss_l1_with(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    assignment: &VoronoiAssignment,
    r: f64,
) -> f64 {
    let mut acc = weight_term(fitted, truth, assignment);
    for (true_idx, members) in &assignment.cells {
        for &fitted_idx in members {
            acc += fitted.omega(fitted_idx.0, fitted_idx.1)
                * parameter_term(fitted, truth, assignment, fitted_idx, *true_idx, r);
        }
    }
    acc
}

/// Second Voronoi loss: first powers on singleton cells, squares on cells
/// holding several fitted components.
pub fn loss_l2_with(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    assignment: &VoronoiAssignment,
) -> f64 {
    let mut acc = weight_term(fitted, truth, assignment);
    for (true_idx, members) in &assignment.cells {
        let r = if members.len() > 1 { 2.0 } else { 1.0 };
        for &fitted_idx in members {
            acc += fitted.omega(fitted_idx.0, fitted_idx.1)
                * parameter_term(fitted, truth, assignment, fitted_idx, *true_idx, r);
        }
    }
    acc
}

pub fn loss_l1(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    r: f64,
    spec: &ModelSpec,
    grid: &QuadratureGrid,
) -> Result<f64, VoronoiError> {
    let assignment = assign_cells(fitted, truth, spec, grid)?;
    Ok(loss_l1_with(fitted, truth, &assignment, r))
}

pub fn loss_l2(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    spec: &ModelSpec,
    grid: &QuadratureGrid,
) -> Result<f64, VoronoiError> {
    let assignment = assign_cells(fitted, truth, spec, grid)?;
    Ok(loss_l2_with(fitted, truth, &assignment, r_unused()))
}

// loss_l2_with ignores a uniform power; keep the call sites uniform.
fn r_unused() -> f64 {
    f64::NAN
}

/// The duplicated-channel sequence whose regression functions collapse onto
/// the truth faster than its parameter loss decays.
///
/// Channel 0 of the truth is split into two copies with weights
/// `w/2 + 1/(2 n^(r+1))` and expert vectors shifted by `+-e_1/n`; remaining
/// channels are copied unchanged, gating matrices are untouched.
pub fn adversarial_sequence(truth: &MixingMeasure, n: u64, r: f64) -> MixingMeasure {
    let nf = n as f64;
    let k_true = truth.channels();
    let mut out = MixingMeasure::zeros(
        truth.heads(),
        truth.experts(),
        k_true + 1,
        truth.dim(),
    );
    let bump = 0.5 / nf.powf(r + 1.0);
    for h in 0..truth.heads() {
        for i in 0..truth.experts() {
            out.set_gating(h, i, truth.gating(h, i).clone());
        }
        out.set_omega(h, 0, 0.5 * truth.omega(h, 0) + bump);
        out.set_omega(h, 1, 0.5 * truth.omega(h, 0) + bump);
        for k in 2..k_true + 1 {
            out.set_omega(h, k, truth.omega(h, k - 1));
        }
        for i in 0..truth.experts() {
            let mut plus = truth.expert(h, i, 0).clone();
            plus[0] += 1.0 / nf;
            let mut minus = truth.expert(h, i, 0).clone();
            minus[0] -= 1.0 / nf;
            out.set_expert(h, i, 0, plus);
            out.set_expert(h, i, 1, minus);
            for k in 2..k_true + 1 {
                out.set_expert(h, i, k, truth.expert(h, i, k - 1).clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::estimator::init_near_truth;
    use crate::fixtures;
    use crate::measure::Variant;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grid() -> QuadratureGrid {
        QuadratureGrid::uniform(4096, 2, 7)
    }

    #[test]
    fn identical_components_have_zero_distance() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let d = component_distance(&truth, &truth, (1, 1), (1, 1), &spec, &grid()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distance_is_symmetric() {
        let truth = fixtures::true_measure();
        let mut other = truth.clone();
        other.set_expert(0, 0, 0, DVector::from_vec(vec![0.9, -0.1]));
        let spec = ModelSpec::mha();
        let g = grid();
        let ab = component_distance(&other, &truth, (0, 0), (0, 0), &spec, &g).unwrap();
        let ba = component_distance(&truth, &other, (0, 0), (0, 0), &spec, &g).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn shifted_expert_distance_matches_the_second_moment() {
        // With zero gating matrices the gates are constant, so shifting every
        // expert vector of a component by delta*e1 shifts the component by
        // delta*x1; its L2 norm under U(-1,1) is delta/sqrt(3).
        let mut a = MixingMeasure::zeros(1, 2, 1, 2);
        a.set_omega(0, 0, 1.0);
        a.set_expert(0, 0, 0, DVector::from_vec(vec![0.4, 0.2]));
        a.set_expert(0, 1, 0, DVector::from_vec(vec![-0.3, 0.5]));
        let delta = 0.37;
        let mut b = a.clone();
        for i in 0..2 {
            let mut v = a.expert(0, i, 0).clone();
            v[0] += delta;
            b.set_expert(0, i, 0, v);
        }
        let spec = ModelSpec::mha();
        let big = QuadratureGrid::uniform(8192, 2, 11);
        let d = component_distance(&b, &a, (0, 0), (0, 0), &spec, &big).unwrap();
        let expected = delta / 3.0_f64.sqrt();
        assert!(
            (d - expected).abs() / expected < 0.02,
            "distance {d} vs {expected}"
        );
    }

    #[test]
    fn truth_assigns_to_itself_with_identity_permutations() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let assignment = assign_cells(&truth, &truth, &spec, &grid()).unwrap();
        for (true_idx, members) in &assignment.cells {
            assert_eq!(members, &vec![*true_idx]);
        }
        for perm in assignment.kappa.values() {
            assert_eq!(perm, &vec![0, 1]);
        }
    }

    #[test]
    fn duplicated_channels_share_a_cell() {
        let truth = fixtures::true_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = init_near_truth(&truth, 3, 50_000, 0.3, &mut rng).unwrap();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let assignment = assign_cells(&g, &truth, &spec, &grid()).unwrap();
        for h in 0..2 {
            let cell0 = &assignment.cells[&(h, 0)];
            let cell1 = &assignment.cells[&(h, 1)];
            assert_eq!(cell0, &vec![(h, 0), (h, 2)]);
            assert_eq!(cell1, &vec![(h, 1)]);
        }
    }

    #[test]
    fn losses_vanish_on_the_truth() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let g = grid();
        for r in [1.0, 2.0] {
            assert_eq!(loss_l1(&truth, &truth, r, &spec, &g).unwrap(), 0.0);
        }
        assert_eq!(loss_l2(&truth, &truth, &spec, &g).unwrap(), 0.0);
    }

    #[test]
    fn relabeling_fitted_channels_changes_nothing() {
        let truth = fixtures::true_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let g = init_near_truth(&truth, 3, 10_000, 0.5, &mut rng).unwrap();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        // Rotate the channel labels within every head: k -> (k+1) mod 3.
        let mut relabeled = MixingMeasure::zeros(2, 2, 3, 2);
        for h in 0..2 {
            for i in 0..2 {
                relabeled.set_gating(h, i, g.gating(h, i).clone());
            }
            for k in 0..3 {
                let to = (k + 1) % 3;
                relabeled.set_omega(h, to, g.omega(h, k));
                for i in 0..2 {
                    relabeled.set_expert(h, i, to, g.expert(h, i, k).clone());
                }
            }
        }
        let q = grid();
        let l1 = loss_l1(&g, &truth, 1.0, &spec, &q).unwrap();
        let l1_relabeled = loss_l1(&relabeled, &truth, 1.0, &spec, &q).unwrap();
        assert_abs_diff_eq!(l1, l1_relabeled, epsilon = 1e-12);
        let l2 = loss_l2(&g, &truth, &spec, &q).unwrap();
        let l2_relabeled = loss_l2(&relabeled, &truth, &spec, &q).unwrap();
        assert_abs_diff_eq!(l2, l2_relabeled, epsilon = 1e-12);
    }

    #[test]
    fn adversarial_loss_matches_the_hand_derivation() {
        // At n=10, r=1: the cell weight sums overshoot by 1/n^2 per head
        // (weight term 2/100), and each of the two duplicated channels
        // carries weight w0/2 + 1/200 and expert shifts of norm 1/10 for
        // both of its experts:
        //   2/100 + [(1.0 + 0.01) + (0.8 + 0.01)] * 2 * (1/10) = 0.384.
        let truth = fixtures::true_measure();
        let g10 = adversarial_sequence(&truth, 10, 1.0);
        let spec = ModelSpec::mha();
        let l1 = loss_l1(&g10, &truth, 1.0, &spec, &grid()).unwrap();
        assert_abs_diff_eq!(l1, 0.384, epsilon = 1e-12);
    }

    #[test]
    fn adversarial_sequence_approaches_the_even_split_limit() {
        let truth = fixtures::true_measure();
        let g = adversarial_sequence(&truth, 1_000_000_000, 1.0);
        for h in 0..2 {
            assert_abs_diff_eq!(g.omega(h, 0), truth.omega(h, 0) / 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(g.omega(h, 1), truth.omega(h, 0) / 2.0, epsilon = 1e-12);
            assert_eq!(g.omega(h, 2), truth.omega(h, 1));
            for i in 0..2 {
                let da = g.expert(h, i, 0) - truth.expert(h, i, 0);
                assert!(da.norm() <= 1e-9 + 1e-12);
            }
        }
    }

    #[test]
    fn doubling_expert_shifts_doubles_the_parameter_part() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let q = grid();
        let g = adversarial_sequence(&truth, 10, 1.0);
        let assignment = assign_cells(&g, &truth, &spec, &q).unwrap();
        let l1 = loss_l1_with(&g, &truth, &assignment, 1.0);
        let weight_only = {
            let mut zero_shift = g.clone();
            for h in 0..2 {
                for i in 0..2 {
                    zero_shift.set_expert(h, i, 0, truth.expert(h, i, 0).clone());
                    zero_shift.set_expert(h, i, 1, truth.expert(h, i, 0).clone());
                }
            }
            loss_l1_with(&zero_shift, &truth, &assignment, 1.0)
        };
        let mut doubled = g.clone();
        for h in 0..2 {
            for i in 0..2 {
                for k in 0..2 {
                    let base = truth.expert(h, i, 0);
                    let shifted = g.expert(h, i, k);
                    doubled.set_expert(h, i, k, base + (shifted - base) * 2.0);
                }
            }
        }
        let l1_doubled = loss_l1_with(&doubled, &truth, &assignment, 1.0);
        assert_abs_diff_eq!(
            l1_doubled - weight_only,
            2.0 * (l1 - weight_only),
            epsilon = 1e-12
        );
    }

    #[test]
    fn l2_equals_l1_on_singleton_cells() {
        let truth = fixtures::true_measure();
        let mut g = truth.clone();
        g.set_expert(0, 0, 0, DVector::from_vec(vec![1.05, -0.45]));
        g.set_omega(1, 1, 0.35);
        let spec = ModelSpec::mha();
        let q = grid();
        let assignment = assign_cells(&g, &truth, &spec, &q).unwrap();
        assert!(assignment.cells.values().all(|m| m.len() == 1));
        assert_eq!(
            loss_l1_with(&g, &truth, &assignment, 1.0),
            loss_l2_with(&g, &truth, &assignment)
        );
    }

    #[test]
    fn unperturbed_duplication_has_zero_l2() {
        let truth = fixtures::true_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let g = init_near_truth(&truth, 3, 1000, 0.0, &mut rng).unwrap();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let l2 = loss_l2(&g, &truth, &spec, &grid()).unwrap();
        assert!(l2 <= 1e-15, "l2 = {l2}");
    }

    #[test]
    fn l1_is_monotone_in_r_for_small_discrepancies() {
        let truth = fixtures::true_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let g = init_near_truth(&truth, 3, 10_000, 0.5, &mut rng).unwrap();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let q = grid();
        let assignment = assign_cells(&g, &truth, &spec, &q).unwrap();
        // All matched parameter differences stay below 1, so raising the
        // power can only shrink each term.
        let l1 = loss_l1_with(&g, &truth, &assignment, 1.0);
        let l2 = loss_l1_with(&g, &truth, &assignment, 2.0);
        let l3 = loss_l1_with(&g, &truth, &assignment, 3.0);
        assert!(l2 <= l1);
        assert!(l3 <= l2);
    }

    #[test]
    fn adversarial_ratio_decays_with_n() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let q = grid();
        let ratio = |n: u64| {
            let g = adversarial_sequence(&truth, n, 1.0);
            let norm = model_distance(&g, &truth, &spec, &q).unwrap();
            let l1 = loss_l1(&g, &truth, 1.0, &spec, &q).unwrap();
            norm / l1
        };
        let r10 = ratio(10);
        let r100 = ratio(100);
        assert!(
            r100 < 0.2 * r10,
            "ratio at n=100 is {r100}, at n=10 is {r10}"
        );
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let truth = fixtures::true_measure();
        let skinny = MixingMeasure::zeros(2, 2, 1, 2);
        let spec = ModelSpec::mha();
        assert!(matches!(
            assign_cells(&skinny, &truth, &spec, &grid()),
            Err(VoronoiError::ShapeMismatch { .. })
        ));
    }
}
