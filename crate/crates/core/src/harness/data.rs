use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => streams::DATA_TRAIN,
            Split::Test => streams::DATA_TEST,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled samples stored row-wise in an `N × d` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split, seed: u64) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::dim("Dataset::new", inputs.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Argument("dataset must not be empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                index: bad,
                len: classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::matrix(indices.len(), d, data)?,
            labels,
            self.classes,
            self.split,
            self.seed,
        )
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Dataset> {
        Dataset::new(inputs, self.labels.clone(), self.classes, self.split, self.seed)
    }
}

/// Gaussian class clusters.
///
/// Class means lie in the first `signal_dims` coordinates, pairwise
/// `separation` apart when `classes <= signal_dims`. Remaining coordinates
/// carry class-independent noise of scale `nuisance_sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub separation: f64,
    pub noise: f64,
    pub signal_dims: usize,
    pub nuisance_sigma: f64,
    pub seed: u64,
}

impl BlobConfig {
    pub fn new(classes: usize, dim: usize, samples: usize, seed: u64) -> Self {
        Self {
            classes,
            dim,
            samples,
            separation: 4.0,
            noise: 1.0,
            signal_dims: dim,
            nuisance_sigma: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.samples < self.classes * 10 {
            return Err(Error::Argument(format!(
                "need at least {} samples for {} classes, got {}",
                self.classes * 10,
                self.classes,
                self.samples
            )));
        }
        if self.dim == 0 || self.signal_dims == 0 || self.signal_dims > self.dim {
            return Err(Error::Argument(format!(
                "signal dims {} must lie in [1, {}]",
                self.signal_dims, self.dim
            )));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, streams::DATA_CENTERS);
        let s = self.signal_dims;
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..self.classes {
            let mut v: Vec<f64> = (0..s).map(|_| StandardNormal.sample(&mut r)).collect();
            if dirs.len() < s {
                for u in &dirs {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let n = norm(&v).max(1e-12);
            v.iter_mut().for_each(|a| *a /= n);
            dirs.push(v);
        }
        let scale = if self.classes == 2 {
            self.separation / 2.0
        } else {
            self.separation / std::f64::consts::SQRT_2
        };
        let place = |u: &[f64], sign: f64| {
            let mut mu = vec![0.0; self.dim];
            for (m, &ui) in mu.iter_mut().zip(u) {
                *m = sign * scale * ui;
            }
            mu
        };
        if self.classes == 2 {
            // one direction, mirrored
            return vec![place(&dirs[0], 1.0), place(&dirs[0], -1.0)];
        }
        dirs.iter().map(|u| place(u, 1.0)).collect()
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let centers = self.centers();
        let mut r = rng::stream(self.seed, split.stream());
        let mut data = Vec::with_capacity(self.samples * self.dim);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let c = i % self.classes;
            for (j, &mu) in centers[c].iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut r);
                let sigma = if j < self.signal_dims {
                    self.noise
                } else {
                    self.nuisance_sigma
                };
                data.push(mu + sigma * z);
            }
            labels.push(c);
        }
        Dataset::new(
            Tensor::matrix(self.samples, self.dim, data)?,
            labels,
            self.classes,
            split,
            self.seed,
        )
    }
}

/// Balanced Gaussian blobs with default separation (training split).
pub fn make_blobs(classes: usize, dim: usize, samples: usize, seed: u64) -> Result<Dataset> {
    BlobConfig::new(classes, dim, samples, seed).generate(Split::Train)
}

pub const GLYPH_SIDE: usize = 8;

/// Procedural 8×8 binary glyphs: each class owns a prototype drawn from a few
/// line strokes; samples flip pixels of the prototype with `flip_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphConfig {
    pub classes: usize,
    pub samples: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl GlyphConfig {
    pub fn new(classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            classes,
            samples,
            flip_prob: 0.08,
            seed,
        }
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, streams::DATA_CENTERS);
        let n = GLYPH_SIDE;
        let mut protos: Vec<Vec<f64>> = Vec::new();
        while protos.len() < self.classes {
            let mut img = vec![0.0; n * n];
            let strokes = r.random_range(2..=4);
            for _ in 0..strokes {
                let kind = r.random_range(0..4);
                let a = r.random_range(0..n);
                let (lo, hi) = {
                    let s = r.random_range(0..n - 2);
                    (s, r.random_range(s + 2..n))
                };
                for t in lo..=hi {
                    let (row, col) = match kind {
                        0 => (a, t),
                        1 => (t, a),
                        2 => (t, t),
                        _ => (t, n - 1 - t),
                    };
                    img[row * n + col] = 1.0;
                }
            }
            // distinct prototypes, at least 6 pixels apart
            let distinct = protos
                .iter()
                .all(|p| p.iter().zip(&img).filter(|(a, b)| a != b).count() >= 6);
            if distinct {
                protos.push(img);
            }
        }
        protos
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        if self.classes < 2 || self.samples < self.classes * 10 {
            return Err(Error::Argument(format!(
                "glyphs need >= 2 classes and >= 10 samples per class, got {} / {}",
                self.classes, self.samples
            )));
        }
        let protos = self.prototypes();
        let mut r = rng::stream(self.seed, split.stream());
        let d = GLYPH_SIDE * GLYPH_SIDE;
        let mut data = Vec::with_capacity(self.samples * d);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let c = i % self.classes;
            for &px in &protos[c] {
                let flip = r.random::<f64>() < self.flip_prob;
                data.push(if flip { 1.0 - px } else { px });
            }
            labels.push(c);
        }
        Dataset::new(
            Tensor::matrix(self.samples, d, data)?,
            labels,
            self.classes,
            split,
            self.seed,
        )
    }
}

/// Balanced glyph set (training split), flattened to 64 features.
pub fn make_glyphs(classes: usize, samples: usize, seed: u64) -> Result<Dataset> {
    GlyphConfig::new(classes, samples, seed).generate(Split::Train)
}
