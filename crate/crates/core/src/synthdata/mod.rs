//! Synthetic segmentation tasks, dataset containers and file formats.

mod checkpoint;
mod dir;
mod gstn;

pub use checkpoint::{config_digest, Checkpoint};
pub use dir::{load_dataset, load_splits, read_pgm, save_dataset, DataSplits, MANIFEST};
pub use gstn::{load_tensor, read_tensor, save_tensor, write_tensor};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Ordered mask/image pairs stored as two aligned (N, 1, H, W) stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    masks: Tensor<T>,
    provenance: String,
}

impl<T: Real> Dataset<T> {
    /// Checks alignment, binary masks and the [−1, 1] image range.
    pub fn new(images: Tensor<T>, masks: Tensor<T>, provenance: impl Into<String>) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        images.check_same_shape(&masks, "dataset")?;
        if masks.shape()[1] != 1 {
            return Err(Error::invalid(format!("masks must have one channel, got shape {:?}", masks.shape())));
        }
        if let Some(v) = masks.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        if let Some(v) = images.data().iter().find(|v| !(v.abs() <= T::one())) {
            return Err(Error::invalid(format!("image value {v} lies outside [-1, 1]")));
        }
        Ok(Self { images, masks, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial extent (H, W).
    pub fn extent(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn masks(&self) -> &Tensor<T> {
        &self.masks
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Pair `i` as two (1, 1, H, W) tensors.
    pub fn pair(&self, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.images.slice_batch(i, 1)?, self.masks.slice_batch(i, 1)?))
    }

    /// Stacks the listed pairs, in order, into (images, masks).
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let parts = indices.iter().map(|&i| t.slice_batch(i, 1)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            let stacked = Tensor::stack(&refs)?;
            let s = t.shape();
            stacked.reshape(&[indices.len(), s[1], s[2], s[3]])
        };
        Ok((pick(&self.images)?, pick(&self.masks)?))
    }

    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Self> {
        let (images, masks) = self.batch(indices)?;
        Ok(Self { images, masks, provenance: provenance.into() })
    }

    /// Seeded shuffle followed by contiguous train/val/test slices. Slice
    /// sizes are `round(f·n)`, with test taking at most what remains.
    pub fn split(&self, fractions: (f64, f64, f64), seed: u64) -> Result<(Option<Self>, Option<Self>, Option<Self>)> {
        let parts = split_indices(self.len(), fractions, seed)?;
        let make = |idx: &Vec<usize>, tag: &str| -> Result<Option<Self>> {
            if idx.is_empty() {
                Ok(None)
            } else {
                self.subset(idx, format!("{} [{tag}]", self.provenance)).map(Some)
            }
        };
        Ok((make(&parts[0], "train")?, make(&parts[1], "val")?, make(&parts[2], "test")?))
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset { images: self.images.cast(), masks: self.masks.cast(), provenance: self.provenance.clone() }
    }
}

/// Index partition behind [`Dataset::split`].
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to at most 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let count = |f: f64| (f * n as f64).round() as usize;
    let n_train = count(a).min(n);
    let n_val = count(b).min(n - n_train);
    let n_test = count(c).min(n - n_train - n_val);
    Ok([
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..n_train + n_val + n_test].to_vec(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Difficulty {
    Easy,
    #[default]
    Default,
    Hard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Difficulty::Easy),
            "default" => Some(Difficulty::Default),
            "hard" => Some(Difficulty::Hard),
            _ => None,
        }
    }

    pub fn params(&self) -> TaskParams {
        match self {
            Difficulty::Easy => TaskParams { shapes: (1, 2), noise: 0.03, background: -0.8, glow: 0.2 },
            Difficulty::Default => TaskParams { shapes: (1, 3), noise: 0.1, background: 0.1, glow: 0.5 },
            Difficulty::Hard => TaskParams { shapes: (2, 3), noise: 0.15, background: 0.2, glow: 0.45 },
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Default => "default",
            Difficulty::Hard => "hard",
        })
    }
}

/// Rendering knobs of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    /// Inclusive range of shapes per mask.
    pub shapes: (usize, usize),
    /// Gaussian noise σ.
    pub noise: f64,
    /// Background level far from any shape.
    pub background: f64,
    /// Extra brightness of background pixels next to a shape; it decays
    /// with distance, so boundaries blur into the foreground range.
    pub glow: f64,
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

pub fn gen_task<T: Real>(seed: u64, n: usize, size: usize, difficulty: Difficulty) -> Result<Dataset<T>> {
    let ds = gen_task_with(seed, n, size, difficulty.params())?;
    Ok(Dataset { provenance: format!("synthetic seed={seed} n={n} size={size} difficulty={difficulty}"), ..ds })
}

pub fn gen_task_with<T: Real>(seed: u64, n: usize, size: usize, params: TaskParams) -> Result<Dataset<T>> {
    if size < 8 || !size.is_power_of_two() {
        return Err(Error::invalid(format!("task size must be a power of two >= 8, got {size}")));
    }
    if n == 0 {
        return Err(Error::invalid("task needs at least one example"));
    }
    let (lo, hi) = params.shapes;
    if lo == 0 || lo > hi || !(params.noise >= 0.0) {
        return Err(Error::invalid(format!("bad task parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let plane = size * size;
    let (mut images, mut masks) = (Vec::with_capacity(n * plane), Vec::with_capacity(n * plane));
    for _ in 0..n {
        let mask = loop {
            let count = rng.gen_range(lo..=hi);
            let m = random_mask(&mut rng, size, count);
            let frac = m.iter().sum::<f64>() / plane as f64;
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                break m;
            }
        };
        let clean = render(&mask, size, &params);
        images.extend(clean.iter().map(|&v| T::lit((v + noise.sample(&mut rng)).clamp(-1.0, 1.0))));
        masks.extend(mask.iter().map(|&v| T::lit(v)));
    }
    let shape = vec![n, 1, size, size];
    Ok(Dataset {
        images: Tensor::new(shape.clone(), images)?,
        masks: Tensor::new(shape, masks)?,
        provenance: format!("synthetic seed={seed} n={n} size={size}"),
    })
}

fn random_mask(rng: &mut impl Rng, size: usize, shapes: usize) -> Vec<f64> {
    let s = size as f64;
    let mut m = vec![0.0; size * size];
    for _ in 0..shapes {
        let (cy, cx) = (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s);
        let (ry, rx) = (rng.gen_range(0.08..0.3) * s, rng.gen_range(0.08..0.3) * s);
        let ellipse = rng.gen_bool(0.5);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    m[r * size + c] = 1.0;
                }
            }
        }
    }
    m
}

/// Decay length, in pixels, of the background glow.
const GLOW_DECAY: f64 = 2.0;
/// Angular frequency of the foreground rings per pixel of depth.
const RING_FREQ: f64 = 1.2;

/// Noise-free image of a mask. Foreground pixels carry rings
/// `0.4 + 0.2·sin(ω·depth)`, depth being the distance to the nearest
/// background pixel; background pixels glow with `background + glow·e^(−d/τ)`,
/// d being the distance to the nearest shape. Both depend on the mask only
/// locally and are translation equivariant.
fn render(mask: &[f64], size: usize, params: &TaskParams) -> Vec<f64> {
    let fg: Vec<(f64, f64)> = points(mask, size, true);
    let bg: Vec<(f64, f64)> = points(mask, size, false);
    let nearest = |r: f64, c: f64, set: &[(f64, f64)]| {
        set.iter().map(|&(y, x)| (y - r).powi(2) + (x - c).powi(2)).fold(f64::INFINITY, f64::min).sqrt()
    };
    (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            if mask[i] > 0.5 {
                let depth = nearest(r, c, &bg).min(size as f64);
                0.4 + 0.2 * (RING_FREQ * depth).sin()
            } else {
                let d = nearest(r, c, &fg);
                params.background + params.glow * (-(d - 1.0).max(0.0) / GLOW_DECAY).exp()
            }
        })
        .collect()
}

fn points(mask: &[f64], size: usize, foreground: bool) -> Vec<(f64, f64)> {
    (0..size * size)
        .filter(|&i| (mask[i] > 0.5) == foreground)
        .map(|i| ((i / size) as f64, (i % size) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = gen_task::<f64>(3, 6, 16, Difficulty::Default).unwrap();
        let b = gen_task::<f64>(3, 6, 16, Difficulty::Default).unwrap();
        assert_eq!(a, b);
        let c = gen_task::<f64>(4, 6, 16, Difficulty::Default).unwrap();
        assert_ne!(a.masks(), c.masks());
        assert_eq!(a.images().shape(), &[6, 1, 16, 16]);
    }

    #[test]
    fn foreground_fraction_and_range() {
        let ds = gen_task::<f64>(11, 1000, 16, Difficulty::Default).unwrap();
        for i in 0..ds.len() {
            let (img, m) = ds.pair(i).unwrap();
            let frac = m.mean_all();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "{frac}");
            assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        }
        for d in [Difficulty::Easy, Difficulty::Hard] {
            let ds = gen_task::<f64>(1, 50, 32, d).unwrap();
            assert!(ds.images().data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn noise_free_images_are_a_function_of_the_mask() {
        let params = TaskParams { noise: 0.0, ..Difficulty::Default.params() };
        let ds = gen_task_with::<f64>(5, 1, 16, params).unwrap();
        let (img, m) = ds.pair(0).unwrap();
        let again = render(m.data(), 16, &params);
        assert_eq!(img.data(), again.as_slice());
        let twin = Dataset::new(Tensor::stack(&[&img, &img]).unwrap().reshape(&[2, 1, 16, 16]).unwrap(),
            Tensor::stack(&[&m, &m]).unwrap().reshape(&[2, 1, 16, 16]).unwrap(), "twin").unwrap();
        assert_eq!(twin.pair(0).unwrap(), twin.pair(1).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_task::<f64>(0, 4, 31, Difficulty::Default).is_err());
        assert!(gen_task::<f64>(0, 4, 4, Difficulty::Default).is_err());
        assert!(gen_task::<f64>(0, 0, 16, Difficulty::Default).is_err());
    }

    #[test]
    fn split_examples() {
        let ds = gen_task::<f64>(1, 50, 8, Difficulty::Easy).unwrap();
        let (tr, va, te) = ds.split((0.8, 0.2, 0.0), 7).unwrap();
        assert_eq!((tr.unwrap().len(), va.unwrap().len()), (40, 10));
        assert!(te.is_none());
        let (tr, va, te) = ds.split((1.0, 0.0, 0.0), 7).unwrap();
        let tr = tr.unwrap();
        assert_eq!(tr.len(), 50);
        assert_eq!(tr.masks().sum_all(), ds.masks().sum_all());
        assert!(va.is_none() && te.is_none());
        assert!(ds.split((0.8, 0.3, 0.0), 7).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        for n in [1, 7, 50, 123] {
            let parts = split_indices(n, (0.6, 0.25, 0.15), 3).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert_eq!(parts, split_indices(n, (0.6, 0.25, 0.15), 3).unwrap());
        }
    }

    #[test]
    fn dataset_validation() {
        let img = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(Dataset::new(img.clone(), Tensor::full(&[1, 1, 4, 4], 0.5), "x").is_err());
        assert!(Dataset::new(img.add_scalar(1.5), Tensor::zeros(&[1, 1, 4, 4]), "x").is_err());
        assert!(Dataset::new(img.clone(), Tensor::zeros(&[1, 1, 4, 2]), "x").is_err());
        assert!(Dataset::new(img.clone(), Tensor::zeros(&[1, 1, 4, 4]), "x").is_ok());
    }
}
