use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::tensor::Tensor;

/// Knobs of the synthetic Gaussian-mixture task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Smallest distance between two class means, in units of the noise std.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Extra scale on the first two mean coordinates (the rotation plane)
    /// before the separation rescale. `1.0` leaves the means isotropic.
    #[serde(default = "default_plane_emphasis")]
    pub plane_emphasis: f64,
}

fn default_separation() -> f64 {
    4.0
}

fn default_plane_emphasis() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            separation: default_separation(),
            plane_emphasis: default_plane_emphasis(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.dim < 2 {
            return Err(Error::Config(format!(
                "task needs n_classes >= 2 and dim >= 2, got {} and {}",
                self.n_classes, self.dim
            )));
        }
        if self.separation.is_nan()
            || self.separation <= 0.0
            || self.plane_emphasis.is_nan()
            || self.plane_emphasis <= 0.0
        {
            return Err(Error::Config(
                "separation and plane_emphasis must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Class-conditional Gaussians with unit covariance.
#[derive(Clone, Debug)]
pub struct GaussianTask {
    n_classes: usize,
    dim: usize,
    means: Vec<f64>,
}

impl GaussianTask {
    /// Draws class means and rescales them so the closest pair sits exactly
    /// `spec.separation` apart.
    pub fn new(spec: &TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (c, d) = (spec.n_classes, spec.dim);
        let mut rng = rng_for(&[seed, stream::TASK]);
        let mut means: Vec<f64> = (0..c * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in means.chunks_exact_mut(d) {
            row[0] *= spec.plane_emphasis;
            row[1] *= spec.plane_emphasis;
        }
        let mut min_dist = f64::INFINITY;
        for i in 0..c {
            for j in i + 1..c {
                let dist = (0..d)
                    .map(|k| (means[i * d + k] - means[j * d + k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        let factor = spec.separation / min_dist;
        means.iter_mut().for_each(|m| *m *= factor);
        Ok(Self {
            n_classes: c,
            dim: d,
            means,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// `m` samples with class counts balanced within one, in shuffled order.
    pub fn sample(&self, m: usize, seed: u64) -> LabeledDataset {
        let mut labels: Vec<usize> = (0..m).map(|i| i % self.n_classes).collect();
        labels.shuffle(&mut rng_for(&[seed, stream::SAMPLES, 0]));
        self.sample_with_labels(&labels, seed)
    }

    /// Fresh features for the given labels.
    pub fn sample_with_labels(&self, labels: &[usize], seed: u64) -> LabeledDataset {
        let mut rng = rng_for(&[seed, stream::SAMPLES, 1]);
        let d = self.dim;
        let mut x = Vec::with_capacity(labels.len() * d);
        for &y in labels {
            let mu = self.mean(y);
            for &m in mu {
                let z: f64 = StandardNormal.sample(&mut rng);
                x.push(m + z);
            }
        }
        LabeledDataset::new(
            Tensor::matrix(labels.len(), d, x),
            labels.to_vec(),
            self.n_classes,
        )
        .expect("labels drawn from the task are in range")
    }
}

/// Balanced Gaussian-mixture dataset with default separation.
pub fn generate_base_task(
    n_classes: usize,
    dim: usize,
    samples: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let task = GaussianTask::new(&TaskSpec::new(n_classes, dim), seed)?;
    Ok(task.sample(samples, seed))
}

/// Fresh unlabeled draws from the same mixture, for distillation.
pub fn make_public_dataset(task: &GaussianTask, m_p: usize, seed: u64) -> Result<UnlabeledDataset> {
    if m_p == 0 {
        return Err(Error::Config(
            "public dataset needs at least one sample".into(),
        ));
    }
    let ds = task.sample(m_p, crate::seed::derive_seed(&[seed, stream::PUBLIC]));
    UnlabeledDataset::new(ds.features().clone())
}
