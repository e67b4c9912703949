//! Labelled image sets with split tags, a seeded synthetic generator and a
//! flat binary loader.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Attack,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset columns disagree: {images} images, {labels} labels, {splits} split tags")]
    Lengths { images: usize, labels: usize, splits: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("image {index} has shape {got:?}, expected {expected:?}")]
    Shape { index: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("pixel values must lie in [0,1]; image {0} does not")]
    Range(usize),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("bad dataset file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self, DataError> {
        if images.len() != labels.len() || images.len() != splits.len() {
            return Err(DataError::Lengths { images: images.len(), labels: labels.len(), splits: splits.len() });
        }
        if num_classes < 2 {
            return Err(DataError::Classes(num_classes));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::BadLabel { label, classes: num_classes });
        }
        if let Some(first) = images.first() {
            for (index, img) in images.iter().enumerate() {
                if img.shape() != first.shape() || img.rank() != 3 {
                    return Err(DataError::Shape { index, expected: first.shape().to_vec(), got: img.shape().to_vec() });
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(DataError::Range(index));
                }
            }
        }
        Ok(Self { images, labels, splits, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices tagged with `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// The first `n` samples of a split, re-tagged as that split.
    pub fn take(&self, split: Split, n: usize) -> Dataset {
        let idx: Vec<usize> = self.indices(split).into_iter().take(n).collect();
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: vec![split; idx.len()],
            num_classes: self.num_classes,
        }
    }

    /// Serializes to the flat `VIDS` binary layout. Split tags are not stored.
    pub fn to_vids(&self) -> Vec<u8> {
        let shape = self.images.first().map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![1, 1, 1]);
        let mut out = Vec::new();
        out.extend_from_slice(b"VIDS");
        for v in [self.len(), self.num_classes, shape[1], shape[2], shape[0]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for img in &self.images {
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }

    /// Parses the `VIDS` layout; splits are assigned per class 80/10/10 by order of appearance.
    pub fn from_vids(bytes: &[u8]) -> Result<Self, DataError> {
        let fail = |m: &str| DataError::Format(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != b"VIDS" {
            return Err(fail("missing VIDS magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (count, classes, h, w, channels) = (word(0), word(1), word(2), word(3), word(4));
        if h != w || h == 0 || channels == 0 {
            return Err(fail("images must be square and non-empty"));
        }
        let pixels = channels * h * w;
        let expected = 24 + count * pixels * 4 + count;
        if bytes.len() != expected {
            return Err(DataError::Format(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let body = &bytes[24..];
        let images = (0..count)
            .map(|n| {
                let chunk = &body[n * pixels * 4..(n + 1) * pixels * 4];
                let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::new(vec![channels, h, w], data).map_err(|e| DataError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let labels: Vec<usize> = body[count * pixels * 4..].iter().map(|&b| usize::from(b)).collect();
        let splits = assign_splits(&labels, classes);
        Dataset::new(images, labels, splits, classes)
    }
}

/// 80/10/10 split by position within each class.
fn assign_splits(labels: &[usize], classes: usize) -> Vec<Split> {
    let mut totals = vec![0usize; classes.max(1)];
    for &l in labels {
        if l < totals.len() {
            totals[l] += 1;
        }
    }
    let mut seen = vec![0usize; totals.len()];
    labels
        .iter()
        .map(|&l| {
            let Some(total) = totals.get(l).copied() else { return Split::Train };
            let k = seen[l];
            seen[l] += 1;
            let n_train = (total * 8).div_ceil(10);
            let n_val = total / 10;
            if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Attack
            }
        })
        .collect()
}

/// Image geometry and noise of the synthetic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub size: usize,
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_noise() -> f32 {
    0.2
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self { size: 32, channels: 3, noise: default_noise() }
    }
}

/// Seeded class-conditional gratings.
///
/// Class `c` fixes an orientation and a spatial frequency; each sample draws
/// a random phase, orientation/frequency/contrast jitter and Gaussian pixel
/// noise. Random phase keeps a linear read-out weak, so recognising a class
/// needs phase-invariant features. Samples are interleaved by class, so the label
/// histogram is exactly uniform.
pub fn synth_dataset(seed: u64, n_per_class: usize, num_classes: usize, spec: &ImageSpec) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::Classes(num_classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spec.noise.max(1e-6)).expect("positive sigma");
    let orientations = num_classes.div_ceil(2);
    let s = spec.size as f32;
    let mut images = Vec::with_capacity(n_per_class * num_classes);
    let mut labels = Vec::with_capacity(images.capacity());
    for _ in 0..n_per_class {
        for c in 0..num_classes {
            let step = PI / orientations as f32;
            let theta = (c % orientations) as f32 * step + rng.gen_range(-0.3..0.3) * step;
            let freq = if c < orientations { 2.0 } else { 3.5 } * rng.gen_range(0.85f32..1.15);
            let phase: f32 = rng.gen_range(0.0..2.0 * PI);
            let contrast: f32 = rng.gen_range(0.12..0.35);
            let (sin, cos) = theta.sin_cos();
            let plane = spec.size * spec.size;
            let mut data = vec![0.0f32; spec.channels * plane];
            for ch in 0..spec.channels {
                let gain = 1.0 - 0.15 * ch as f32;
                for y in 0..spec.size {
                    for x in 0..spec.size {
                        let u = (x as f32 * cos + y as f32 * sin) / s;
                        let v = 0.5 + gain * contrast * (2.0 * PI * freq * u + phase).sin() + noise.sample(&mut rng);
                        data[ch * plane + y * spec.size + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            images.push(Tensor::new(vec![spec.channels, spec.size, spec.size], data).expect("shape matches"));
            labels.push(c);
        }
    }
    let splits = assign_splits(&labels, num_classes);
    Dataset::new(images, labels, splits, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        synth_dataset(3, 10, 4, &ImageSpec { size: 8, channels: 2, noise: 0.05 }).unwrap()
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(small(), small());
        let other = synth_dataset(4, 10, 4, &ImageSpec { size: 8, channels: 2, noise: 0.05 }).unwrap();
        assert_ne!(small(), other);
    }

    #[test]
    fn labels_are_uniform_and_splits_are_80_10_10() {
        let d = synth_dataset(1, 200, 10, &ImageSpec::default()).unwrap();
        let mut hist = [0usize; 10];
        for &l in d.labels() {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&h| h == 200));
        assert_eq!(d.indices(Split::Train).len(), 1600);
        assert_eq!(d.indices(Split::Val).len(), 200);
        assert_eq!(d.indices(Split::Attack).len(), 200);
        assert!(d.images().iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn vids_round_trip() {
        let d = small();
        let back = Dataset::from_vids(&d.to_vids()).unwrap();
        assert_eq!(back, d);
        let mut bytes = d.to_vids();
        bytes.pop();
        assert!(Dataset::from_vids(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Dataset::from_vids(&bytes).is_err());
    }

    #[test]
    fn invalid_columns_rejected() {
        let img = Tensor::zeros(&[1, 2, 2]);
        assert!(Dataset::new(vec![img.clone()], vec![5], vec![Split::Train], 3).is_err());
        assert!(Dataset::new(vec![img], vec![0, 1], vec![Split::Train], 3).is_err());
    }
}
