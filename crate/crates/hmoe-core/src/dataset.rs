//! Synthetic regression data.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::measure::{MixingMeasure, ModelSpec, Variant};
use crate::model::eval_model;
use crate::seed;

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub d: usize,
    pub variant: Variant,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Covariates and responses. Rows of `x` are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn from_parts(meta: DatasetMeta, x: Vec<f64>, y: Vec<f64>) -> Result<Self, ModelError> {
        if y.len() != meta.n || x.len() != meta.n * meta.d {
            return Err(ModelError::InvalidShape {
                context: "dataset",
                detail: format!(
                    "meta says {}x{}, arrays have {} covariate values and {} responses",
                    meta.n,
                    meta.d,
                    x.len(),
                    y.len()
                ),
            });
        }
        Ok(Dataset { meta, x, y })
    }

    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn dim(&self) -> usize {
        self.meta.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.meta.d..(i + 1) * self.meta.d]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.x.chunks_exact(self.meta.d).zip(self.y.iter().copied())
    }
}

/// Draw `n` covariate rows uniformly from `[-1,1]^d`, evaluate the model and
/// add centered Gaussian noise with standard deviation `noise_sd`.
///
/// The covariate draws are completed before any noise is drawn, so the same
/// seed yields the same design regardless of the noise level.
pub fn generate_dataset(
    truth: &MixingMeasure,
    spec: &ModelSpec,
    n: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset, ModelError> {
    let d = truth.dim();
    let mut rng: ChaCha12Rng = seed::child_rng(seed, "dataset", &[n as u64]);
    let mut x = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        x.push(rng.random_range(-1.0..=1.0));
    }
    let mut y = Vec::with_capacity(n);
    for row in x.chunks_exact(d) {
        y.push(eval_model(truth, spec, row)?);
    }
    if noise_sd > 0.0 {
        for value in &mut y {
            let eps: f64 = rng.sample(StandardNormal);
            *value += noise_sd * eps;
        }
    }
    Dataset::from_parts(
        DatasetMeta {
            n,
            d,
            variant: spec.variant,
            noise_sd,
            seed,
        },
        x,
        y,
    )
}

/// Serialization document with row-major nested covariates.
#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    meta: DatasetMeta,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Serialize for Dataset {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DatasetDoc {
            meta: self.meta.clone(),
            x: self.x.chunks_exact(self.meta.d).map(<[f64]>::to_vec).collect(),
            y: self.y.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = DatasetDoc::deserialize(deserializer)?;
        let x = doc.x.into_iter().flatten().collect();
        Dataset::from_parts(doc.meta, x, doc.y)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::fixtures;

    #[test]
    fn noiseless_responses_equal_the_model() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::new(Variant::GatedValue, ActivationKind::sigmoid(0.5));
        let data = generate_dataset(&truth, &spec, 50, 0.0, 3).unwrap();
        for (row, y) in data.rows() {
            assert_eq!(y, eval_model(&truth, &spec, row).unwrap());
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset_exactly() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let a = generate_dataset(&truth, &spec, 200, 0.1, 9).unwrap();
        let b = generate_dataset(&truth, &spec, 200, 0.1, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn column_means_concentrate() {
        // Var of U(-1,1) is 1/3; allow four standard errors.
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let n = 100_000;
        let data = generate_dataset(&truth, &spec, n, 0.0, 4).unwrap();
        let bound = 4.0 / (3.0_f64.sqrt() * (n as f64).sqrt());
        for col in 0..2 {
            let mean: f64 =
                (0..n).map(|i| data.row(i)[col]).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "column {col} mean {mean} vs bound {bound}");
        }
    }

    #[test]
    fn json_round_trip() {
        let truth = fixtures::true_measure();
        let spec = ModelSpec::mha();
        let data = generate_dataset(&truth, &spec, 10, 0.1, 12).unwrap();
        let json = serde_json::to_string(&data).unwrap();
        let back: Dataset = serde_json::from_str(&json).unwrap();
        assert_eq!(data, back);
    }
}
