//! Synthetic continual-learning streams.
//!
//! Every task places `C` class means equally spaced on the unit circle of a
//! shared 2-D plane (columns of `Q`) embedded in `ℝ^d`, rotated by a
//! task-specific angle. Samples add isotropic Gaussian noise in `ℝ^d`.
//! Seen tasks take angles equally spaced in `[0, π)`; unseen tasks sit half a
//! spacing away from seen ones.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// An owned split of one task. Training code only ever sees one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn prefix(&self, n: usize) -> &[Sample] {
        &self.samples[..n.min(self.samples.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Rotation in radians, in `[0, 2π)`.
    pub angle: f64,
    pub n_classes: usize,
    pub sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// Nearest-class-mean accuracy on the test split.
    pub oracle_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub seen_tasks: usize,
    pub unseen_tasks: usize,
    pub sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_classes: 4,
            seen_tasks: 8,
            unseen_tasks: 4,
            sigma: 0.15,
            train_size: 512,
            test_size: 256,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!("dim: need d ≥ 2, got {}", self.dim)));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes: need C ≥ 2, got {}", self.n_classes)));
        }
        if self.seen_tasks == 0 {
            return Err(Error::invalid("seen_tasks: need at least one seen task"));
        }
        if self.train_size < self.n_classes || self.test_size < self.n_classes {
            return Err(Error::invalid(format!(
                "train_size/test_size must be at least n_classes = {}",
                self.n_classes
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma: must be finite and ≥ 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn seen_angle(&self, t: usize) -> f64 {
        t as f64 * PI / self.seen_tasks as f64
    }

    /// Unseen angles take every `seen/unseen`-th half-offset slot, so they
    /// never coincide with a seen angle.
    pub fn unseen_angle(&self, j: usize) -> f64 {
        let spacing = PI / self.seen_tasks as f64;
        let stride = (self.seen_tasks as f64 / self.unseen_tasks.max(1) as f64).max(1.0);
        let slot = (j as f64 * stride).floor();
        ((slot + 0.5) * spacing).rem_euclid(2.0 * PI)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub seed: u64,
    /// `d × 2`, orthonormal columns.
    pub embedding: Matrix,
    pub seen: Vec<TaskData>,
    pub unseen: Vec<TaskData>,
}

/// What gets written next to checkpoints so a run can be audited without the
/// raw samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub config: StreamConfig,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub oracle_accuracy: Vec<f64>,
}

impl TaskStream {
    pub fn manifest(&self) -> StreamManifest {
        let all = self.seen.iter().chain(&self.unseen);
        StreamManifest {
            config: self.config.clone(),
            seed: self.seed,
            tasks: all.clone().map(|t| t.spec.clone()).collect(),
            oracle_accuracy: all.map(|t| t.oracle_accuracy).collect(),
        }
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskData> {
        self.seen.iter().chain(&self.unseen)
    }

    /// Embedded mean of `class` under rotation `angle`.
    pub fn class_mean(&self, angle: f64, class: usize) -> Vec<f64> {
        class_mean(&self.embedding, angle, class, self.config.n_classes)
    }
}

fn class_mean(q: &Matrix, angle: f64, class: usize, n_classes: usize) -> Vec<f64> {
    let phi = angle + 2.0 * PI * class as f64 / n_classes as f64;
    let (s, c) = phi.sin_cos();
    (0..q.rows()).map(|r| q.get(r, 0) * c + q.get(r, 1) * s).collect()
}

fn orthonormal_pair(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let nu = dot(&u, &u).sqrt();
        if nu < 1e-8 {
            continue;
        }
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let proj = dot(&u, &v);
        let w: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
        let nw = dot(&w, &w).sqrt();
        if nw < 1e-8 {
            continue;
        }
        return Matrix::from_fn(dim, 2, |r, c| if c == 0 { u[r] } else { w[r] / nw });
    }
}

fn make_task(cfg: &StreamConfig, q: &Matrix, spec: TaskSpec, seed: u64, index: u64) -> TaskData {
    let mut rng = rng_for(seed, Stream::TaskData, index);
    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| class_mean(q, spec.angle, c, cfg.n_classes))
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut samples: Vec<Sample> = (0..n)
            .map(|i| {
                let label = i % cfg.n_classes;
                let x = means[label]
                    .iter()
                    .map(|m| {
                        let eps: f64 = StandardNormal.sample(rng);
                        m + cfg.sigma * eps
                    })
                    .collect();
                Sample { x, label }
            })
            .collect();
        samples.shuffle(rng);
        Dataset::new(samples)
    };
    let train = draw(spec.train_size, &mut rng);
    let test = draw(spec.test_size, &mut rng);
    let oracle_accuracy = nearest_mean_accuracy(&means, &test);
    TaskData {
        spec,
        train,
        test,
        oracle_accuracy,
    }
}

/// Accuracy of the classifier that assigns each sample to its nearest class mean.
pub fn nearest_mean_accuracy(means: &[Vec<f64>], data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .samples()
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| m.iter().zip(&s.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for c in 1..means.len() {
                if dist(&means[c]) < dist(&means[best]) {
                    best = c;
                }
            }
            best == s.label
        })
        .count();
    correct as f64 / data.len() as f64
}

pub fn make_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let mut erng = rng_for(seed, Stream::Embedding, 0);
    let embedding = orthonormal_pair(cfg.dim, &mut erng);
    let spec = |task_id: usize, angle: f64, seen: bool| TaskSpec {
        task_id,
        angle,
        n_classes: cfg.n_classes,
        sigma: cfg.sigma,
        train_size: cfg.train_size,
        test_size: cfg.test_size,
        seen,
    };
    let seen = (0..cfg.seen_tasks)
        .map(|t| make_task(cfg, &embedding, spec(t, cfg.seen_angle(t), true), seed, t as u64))
        .collect();
    let unseen = (0..cfg.unseen_tasks)
        .map(|j| {
            let id = cfg.seen_tasks + j;
            make_task(cfg, &embedding, spec(id, cfg.unseen_angle(j), false), seed, id as u64)
        })
        .collect();
    Ok(TaskStream {
        config: cfg.clone(),
        seed,
        embedding,
        seen,
        unseen,
    })
}

/// One pass over a dataset in a seeded random order.
pub struct Batches<'a> {
    data: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.data[i]).collect();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(data: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(Batches {
        data: data.samples(),
        order,
        batch_size,
        pos: 0,
    })
}
