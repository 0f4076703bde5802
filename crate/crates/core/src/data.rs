//! In-memory classification datasets and a seeded synthetic generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// `inputs` is `[N, sample…]` with one label per leading row.
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Config("empty dataset slice".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, y) = self.gather(&idx);
        Self::new(x, y, self.classes)
    }

    /// Batches of sample indices in sequential order; the last may be short.
    pub fn sequential_batches(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Batches of a seeded permutation.
    pub fn shuffled_batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Gaussian-blob classification problem.
///
/// Each class has a prototype made of a shared base pattern plus a
/// class-specific one; samples are the prototype scaled by a random gain,
/// shifted by up to `max_shift` pixels (image shapes only) and perturbed by
/// isotropic Gaussian noise. For `[C, H, W]` shapes the patterns are sums of
/// 2-D Gaussian bumps; for flat shapes they are standard normal vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shape: Vec<usize>,
    pub train: usize,
    pub eval: usize,
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default = "default_separation")]
    pub separation: f32,
    #[serde(default = "default_shift")]
    pub max_shift: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f32 {
    1.2
}

fn default_separation() -> f32 {
    1.0
}

fn default_shift() -> usize {
    1
}

impl SyntheticSpec {
    /// Ten-class 1×12×12 images for the reference CNN.
    pub fn images(train: usize, eval: usize, seed: u64) -> Self {
        Self {
            classes: 10,
            shape: vec![1, 12, 12],
            train,
            eval,
            noise: default_noise(),
            separation: default_separation(),
            max_shift: default_shift(),
            seed,
        }
    }

    /// Default desk-scale experiment: 4096 training and 4096 evaluation images.
    pub fn desk(seed: u64) -> Self {
        Self::images(4096, 4096, seed)
    }
}

fn bump_pattern(rng: &mut ChaCha8Rng, shape: &[usize], bumps: usize) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0f32; c * h * w];
    for _ in 0..bumps {
        let ch = rng.gen_range(0..c);
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let sigma = rng.gen_range(0.8..2.0f32);
        let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.5..1.5f32);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                out[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

fn shifted(pattern: &[f32], shape: &[usize], dy: isize, dx: isize) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; pattern.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[(ch * h + y) * w + x] = pattern[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Generates `(train, eval)` sets; identical specs give identical data.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.shape.is_empty() || spec.shape.contains(&0) {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes and a nonempty shape, got {} / {:?}",
            spec.classes, spec.shape
        )));
    }
    if spec.train == 0 || spec.eval == 0 {
        return Err(Error::Config(
            "synthetic train and eval sizes must be positive".into(),
        ));
    }
    let image = spec.shape.len() == 3;
    let dim: usize = spec.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pattern = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        if image {
            bump_pattern(rng, &spec.shape, 6)
        } else {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        }
    };
    let base = pattern(&mut rng);
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            pattern(&mut rng)
                .iter()
                .zip(&base)
                .map(|(p, b)| b + spec.separation * p)
                .collect()
        })
        .collect();

    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.gen_range(0..spec.classes);
            let gain = rng.gen_range(0.8..1.2f32);
            let proto = if image && spec.max_shift > 0 {
                let s = spec.max_shift as isize;
                let dy = rng.gen_range(-s..=s);
                let dx = rng.gen_range(-s..=s);
                shifted(&prototypes[label], &spec.shape, dy, dx)
            } else {
                prototypes[label].clone()
            };
            for p in proto {
                let eps: f32 = StandardNormal.sample(rng);
                data.push(gain * p + spec.noise * eps);
            }
            labels.push(label);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&spec.shape);
        Dataset::new(Tensor::new(shape, data)?, labels, spec.classes)
    };
    let train = draw(spec.train, &mut rng)?;
    let eval = draw(spec.eval, &mut rng)?;
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec::images(32, 8, 7);
        let (a, b) = synthetic(&spec).unwrap();
        let (c, d) = synthetic(&spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.sample_shape(), &[1, 12, 12]);
        let other = synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn flat_shapes_supported() {
        let spec = SyntheticSpec {
            classes: 3,
            shape: vec![5],
            train: 10,
            eval: 4,
            noise: 0.1,
            separation: 1.0,
            max_shift: 0,
            seed: 1,
        };
        let (train, eval) = synthetic(&spec).unwrap();
        assert_eq!(train.inputs().shape(), &[10, 5]);
        assert_eq!(eval.len(), 4);
        assert!(train.labels().iter().all(|&l| l < 3));
    }

    #[test]
    fn batches_cover_everything_once() {
        let (train, _) = synthetic(&SyntheticSpec::images(10, 1, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = train.shuffled_batches(4, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(x.clone(), vec![0, 5], 3).is_err());
        assert!(Dataset::new(x, vec![0], 3).is_err());
    }
}
