//! The ground-truth measure used by the rate experiments.
//!
//! Two heads, two experts per head, two channels, input dimension two. The
//! gating matrices are stored in normalized form: within each head the last
//! matrix has been subtracted from every matrix of that head, which leaves
//! all softmax gates (and hence the regression function) unchanged while
//! pinning the last matrix to zero.

use nalgebra::{DMatrix, DVector};

use crate::measure::MixingMeasure;

/// Build the ground-truth mixing measure.
pub fn true_measure() -> MixingMeasure {
    // Head 0 raw gates diag(2.0, 0.5) and diag(0.5, 2.0); normalized by the
    // second. Head 1 raw gates [[1.5,0.2],[0.2,0.3]] and [[0.3,-0.1],[-0.1,1.2]].
    let gating = vec![
        vec![
            DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, -1.5]),
            DMatrix::zeros(2, 2),
        ],
        vec![
            DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, -0.9]),
            DMatrix::zeros(2, 2),
        ],
    ];
    let omega = vec![vec![1.0, 0.5], vec![0.8, 0.3]];
    let expert = vec![
        vec![
            vec![
                DVector::from_vec(vec![1.0, -0.5]),
                DVector::from_vec(vec![0.5, 0.8]),
            ],
            vec![
                DVector::from_vec(vec![-1.0, 0.8]),
                DVector::from_vec(vec![0.2, -0.3]),
            ],
        ],
        vec![
            vec![
                DVector::from_vec(vec![0.6, 0.4]),
                DVector::from_vec(vec![-0.2, 0.5]),
            ],
            vec![
                DVector::from_vec(vec![-0.7, -0.2]),
                DVector::from_vec(vec![0.3, -0.4]),
            ],
        ],
    ];
    MixingMeasure::new(omega, gating, expert).expect("fixture shapes are consistent")
}

/// Sum of all channel weights of the ground truth; handy in closed-form tests.
pub fn true_omega_sum() -> f64 {
    1.0 + 0.5 + 0.8 + 0.3
}
