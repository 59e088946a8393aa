use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spikesplit_core::{FeatureShape, Real, Shape5, Tensor};

use crate::{Result, TrainError};

/// Labelled static images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(1, N, C, H, W)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.images.shape().feature()
    }

    /// Gathers samples `idx` into one batch.
    pub fn batch<F: Real>(&self, idx: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let s = self.images.shape();
        let len = s.frame_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend(self.images.frame(0, i).iter().map(|&v| F::lit(v as f64)));
        }
        let images = Tensor::from_vec(Shape5::new(1, idx.len(), s.c, s.h, s.w), data).expect("sized above");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// One Gaussian blob per class at a class-specific position on a circle
/// around the image center, with positional jitter and pixel noise.
pub fn gaussian_blobs(
    shape: FeatureShape,
    n_classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, noise).expect("noise >= 0");
    let (h, w) = (shape.h as f64, shape.w as f64);
    let radius = 0.3 * h.min(w);
    let sigma = 0.15 * h.min(w);
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let angle = std::f64::consts::TAU * (class as f64 + 0.125) / n_classes as f64;
        let cy = (h - 1.0) / 2.0 + radius * angle.sin() + rng.gen_range(-0.5..0.5);
        let cx = (w - 1.0) / 2.0 + radius * angle.cos() + rng.gen_range(-0.5..0.5);
        for _ in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp() + pixel_noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class);
    }
    Dataset {
        images: Tensor::from_vec(Shape5::new(1, n, shape.c, shape.h, shape.w), data).expect("sized above"),
        labels,
        n_classes,
    }
}

/// Reads CIFAR binary batches: each record is `label_bytes` label bytes
/// followed by 3072 channel-major pixels. CIFAR-10 has one label byte;
/// CIFAR-100 has two (coarse, fine) and the last one is used.
pub fn read_cifar(mut reader: impl Read, label_bytes: usize, n_classes: usize) -> Result<Dataset> {
    const PIXELS: usize = 3 * 32 * 32;
    if label_bytes == 0 {
        return Err(TrainError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "CIFAR records need a label byte",
        )));
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let rec = label_bytes + PIXELS;
    if raw.is_empty() || raw.len() % rec != 0 {
        return Err(TrainError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{} bytes is not a whole number of {rec}-byte records", raw.len()),
        )));
    }
    let n = raw.len() / rec;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in raw.chunks_exact(rec) {
        let label = r[label_bytes - 1] as usize;
        if label >= n_classes {
            return Err(TrainError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("label {label} >= {n_classes} classes"),
            )));
        }
        labels.push(label);
        data.extend(r[label_bytes..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_vec(Shape5::new(1, n, 3, 32, 32), data).expect("sized above"),
        labels,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let shape = FeatureShape::new(1, 8, 8);
        let a = gaussian_blobs(shape, 2, 10, 0.1, 3);
        assert_eq!(a, gaussian_blobs(shape, 2, 10, 0.1, 3));
        assert_ne!(a, gaussian_blobs(shape, 2, 10, 0.1, 4));
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 10);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.extend([0, label]);
            bytes.extend(std::iter::repeat(255u8).take(3072));
        }
        let d = read_cifar(bytes.as_slice(), 2, 100).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.images.shape(), Shape5::new(1, 2, 3, 32, 32));
        assert!(d.images.data().iter().all(|&v| v == 1.0));
        assert!(read_cifar(&bytes[..100], 2, 100).is_err());
        assert!(read_cifar(bytes.as_slice(), 2, 5).is_err());
    }
}
