//! Labeled image collections and deterministic batching.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled set of `[C,H,W]` images stacked into one `[N,C,H,W]` tensor.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, ..] = *images.shape() else {
            return Err(Error::config(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        };
        if images.shape().len() != 4 {
            return Err(Error::config(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::config(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
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

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy out the selected samples as a `[B,C,H,W]` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Shuffled batch index lists for one epoch.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Sequential batches in dataset order (for evaluation).
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// A dataset holding transformed images with the same labels.
    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        Dataset::new(images, self.labels.clone(), self.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gather_copies_rows_and_labels() {
        let images = Tensor::new(vec![3, 1, 1, 2], vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]).unwrap();
        let ds = Dataset::new(images, vec![0, 1, 0], 2).unwrap();
        let (batch, labels) = ds.gather(&[2, 0]).unwrap();
        assert_eq!(batch.data(), &[2.0, 2.1, 0.0, 0.1]);
        assert_eq!(labels, vec![0, 0]);
    }

    #[test]
    fn shuffled_batches_cover_every_sample_once() {
        let images = Tensor::zeros(vec![10, 1, 2, 2]);
        let ds = Dataset::new(images, (0..10).map(|i| i % 3).collect(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = ds.epoch_batches(4, &mut rng);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_label_out_of_range() {
        let images = Tensor::zeros(vec![2, 1, 2, 2]);
        assert!(Dataset::new(images, vec![0, 5], 3).is_err());
    }
}
