//! Desk-scale synthetic data: a Gaussian-mixture classification task, an
//! unrelated auxiliary pool, and i.i.d. partitioning across data-owners.
//! All features live on the canonical `[0, 255]` input scale.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    /// Row-major `[len, dim]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyData("concatenating zero datasets".into()))?;
        let mut out = Dataset {
            dim: first.dim,
            features: Vec::new(),
            labels: Vec::new(),
        };
        for p in parts {
            if p.dim != out.dim {
                return Err(Error::Length {
                    op: "concat",
                    left: out.dim,
                    right: p.dim,
                });
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub samples_per_owner: usize,
    pub test_samples: usize,
    /// Per-coordinate noise around each class mean.
    pub noise_std: f64,
    /// Class means are uniform on `[mean_low, mean_high]^d`.
    pub mean_low: f64,
    pub mean_high: f64,
    pub aux_samples: usize,
    /// Standard deviation of the isotropic auxiliary pool around 127.5.
    pub aux_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            samples_per_owner: 200,
            test_samples: 2000,
            noise_std: 50.0,
            mean_low: 64.0,
            mean_high: 192.0,
            aux_samples: 500,
            aux_std: 70.0,
        }
    }
}

/// Training pool, test set and auxiliary pool for one run.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub means: Vec<f64>,
    pub train: Dataset,
    pub test: Dataset,
    /// Unlabeled auxiliary inputs `[aux_samples, dim]`.
    pub aux: Vec<f64>,
}

fn draw_samples(means: &[f64], dim: usize, q: usize, n: usize, std: f64, rng: &mut StreamRng) -> Dataset {
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..q);
        labels.push(c);
        for k in 0..dim {
            let v = means[c * dim + k] + noise.sample(rng);
            features.push(v.clamp(0.0, 255.0));
        }
    }
    Dataset { dim, features, labels }
}

impl SyntheticTask {
    pub fn generate(cfg: &TaskConfig, dim: usize, q: usize, n_owners: usize, seed: u64) -> Result<Self> {
        if !(cfg.noise_std > 0.0 && cfg.aux_std > 0.0) || cfg.mean_low > cfg.mean_high {
            return Err(Error::InvalidParameter("invalid synthetic task settings".into()));
        }
        let mut rng = stream(seed, &[tag::DATA, 0]);
        let means: Vec<f64> = (0..q * dim)
            .map(|_| rng.random_range(cfg.mean_low..=cfg.mean_high))
            .collect();
        let mut train_rng = stream(seed, &[tag::DATA, 1]);
        let train = draw_samples(&means, dim, q, cfg.samples_per_owner * n_owners, cfg.noise_std, &mut train_rng);
        let mut test_rng = stream(seed, &[tag::DATA, 2]);
        let test = draw_samples(&means, dim, q, cfg.test_samples, cfg.noise_std, &mut test_rng);
        let aux = aux_pool(dim, cfg.aux_samples, cfg.aux_std, seed);
        Ok(Self { means, train, test, aux })
    }
}

/// Isotropic Gaussian noise around mid-scale, unrelated to any class.
pub fn aux_pool(dim: usize, n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[tag::AUX]);
    let noise = Normal::new(127.5, std).expect("finite std");
    (0..n * dim)
        .map(|_| noise.sample(&mut rng).clamp(0.0, 255.0))
        .collect()
}

/// Shuffles and splits into `n` disjoint shards whose sizes differ by at most one.
pub fn partition_data(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n == 0 || dataset.len() < n {
        return Err(Error::EmptyData(format!(
            "cannot split {} samples across {n} owners",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut stream(seed, &[tag::PARTITION]));
    let base = dataset.len() / n;
    let extra = dataset.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for j in 0..n {
        let size = base + usize::from(j < extra);
        shards.push(dataset.subset(&idx[start..start + size]));
        start += size;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed(n: usize) -> Dataset {
        Dataset {
            dim: 1,
            features: (0..n).map(|i| i as f64).collect(),
            labels: (0..n).map(|i| i % 10).collect(),
        }
    }

    #[test]
    fn ten_equal_shards() {
        let shards = partition_data(&indexed(100), 10, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn shards_disjoint_and_cover() {
        let shards = partition_data(&indexed(103), 10, 4).unwrap();
        let mut seen: Vec<usize> = shards
            .iter()
            .flat_map(|s| s.features.iter().map(|v| *v as usize))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn partition_is_deterministic() {
        let a = partition_data(&indexed(50), 5, 9).unwrap();
        let b = partition_data(&indexed(50), 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_dataset() {
        assert!(partition_data(&indexed(3), 4, 0).is_err());
    }

    #[test]
    fn synthetic_task_in_range() {
        let task = SyntheticTask::generate(&TaskConfig::default(), 32, 10, 3, 1).unwrap();
        assert_eq!(task.train.len(), 600);
        assert_eq!(task.test.len(), 2000);
        assert_eq!(task.aux.len(), 500 * 32);
        assert!(task.train.features.iter().all(|v| (0.0..=255.0).contains(v)));
        assert!(task.train.labels.iter().all(|&l| l < 10));
    }
}
