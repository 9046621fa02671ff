//! Fixed-capacity replay buffer with reservoir update.

use ndarray::Array2;
use rand::Rng as _;

use crate::datastream::{Batch, Dataset, ImageShape, LabeledSample, SourceKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    dim: usize,
    image_shape: Option<ImageShape>,
    slots: Vec<LabeledSample>,
    seen: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, dim: usize, image_shape: Option<ImageShape>) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            image_shape,
            slots: Vec::with_capacity(capacity),
            seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Samples offered over the buffer's lifetime, stored or not.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn slots(&self) -> &[LabeledSample] {
        &self.slots
    }

    /// Offers each row in order. The k-th sample ever offered is kept outright
    /// while k <= M, otherwise it overwrites a uniform slot with probability M/k.
    pub fn reservoir_update(&mut self, batch: &Batch, rng: &mut Rng) -> Result<()> {
        if !batch.is_empty() && batch.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds dim {}, batch has dim {}",
                self.dim,
                batch.dim()
            )));
        }
        for (r, (&label, &id)) in batch.labels.iter().zip(&batch.ids).enumerate() {
            self.seen += 1;
            let sample = || LabeledSample {
                id,
                features: batch.features.row(r).to_vec(),
                label,
            };
            if self.slots.len() < self.capacity {
                self.slots.push(sample());
            } else {
                let j = rng.random_range(0..self.seen);
                if j < self.capacity as u64 {
                    self.slots[j as usize] = sample();
                }
            }
        }
        Ok(())
    }

    /// Up to `request` distinct slots drawn uniformly; empty buffer gives an
    /// empty batch.
    pub fn random_retrieve(&self, request: usize, rng: &mut Rng) -> Batch {
        let n = request.min(self.slots.len());
        if n == 0 {
            return Batch::empty(self.dim, self.image_shape);
        }
        let picks = rand::seq::index::sample(rng, self.slots.len(), n);
        self.gather(picks.iter())
    }

    /// Every stored sample, in slot order.
    pub fn as_batch(&self) -> Batch {
        self.gather(0..self.slots.len())
    }

    fn gather(&self, indices: impl Iterator<Item = usize>) -> Batch {
        let indices: Vec<usize> = indices.collect();
        let mut features = Array2::zeros((indices.len(), self.dim));
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let s = &self.slots[i];
            features.row_mut(r).assign(&ndarray::ArrayView1::from(&s.features));
            labels.push(s.label);
            ids.push(s.id);
        }
        Batch {
            features,
            labels,
            ids,
            image_shape: self.image_shape,
        }
    }

    /// Buffer contents as a dataset, for writing in the `OCL1` format.
    pub fn to_dataset(&self, class_count: usize) -> Result<Dataset> {
        let batch = self.as_batch();
        let ds = Dataset::new(
            SourceKind::FileBacked {
                path: "memory-buffer".into(),
            },
            batch.features,
            batch.labels,
            class_count,
        )?;
        match self.image_shape {
            Some(shape) => ds.with_image_shape(shape),
            None => Ok(ds),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn numbered(start: usize, n: usize) -> Batch {
        Batch {
            features: Array2::from_shape_fn((n, 2), |(r, c)| (start + r) as f64 + c as f64 * 0.5),
            labels: (start..start + n).map(|i| i % 3).collect(),
            ids: (start..start + n).collect(),
            image_shape: None,
        }
    }

    #[test]
    fn below_capacity_stores_everything() {
        let mut buf = MemoryBuffer::new(5, 2, None).unwrap();
        buf.reservoir_update(&numbered(0, 3), &mut rng::from_seed(0)).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.seen_count(), 3);
        let ids: Vec<usize> = buf.slots().iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn seen_count_counts_rejected_samples() {
        let mut buf = MemoryBuffer::new(2, 2, None).unwrap();
        let mut r = rng::from_seed(1);
        for k in 0..10 {
            buf.reservoir_update(&numbered(k * 4, 4), &mut r).unwrap();
            assert_eq!(buf.seen_count(), (k as u64 + 1) * 4);
            assert_eq!(buf.len(), 2);
        }
    }

    #[test]
    fn retrieval_clamps_and_leaves_buffer_alone() {
        let mut buf = MemoryBuffer::new(10, 2, None).unwrap();
        buf.reservoir_update(&numbered(0, 3), &mut rng::from_seed(0)).unwrap();
        let before = buf.clone();
        let got = buf.random_retrieve(64, &mut rng::from_seed(4));
        assert_eq!(got.len(), 3);
        let mut ids = got.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(buf, before);
        assert!(buf.random_retrieve(0, &mut rng::from_seed(4)).is_empty());
    }

    #[test]
    fn empty_buffer_retrieves_empty_batch() {
        let buf = MemoryBuffer::new(4, 3, None).unwrap();
        let got = buf.random_retrieve(8, &mut rng::from_seed(0));
        assert!(got.is_empty());
        assert_eq!(got.dim(), 3);
    }

    #[test]
    fn retrieval_is_uniform_over_slots() {
        let mut buf = MemoryBuffer::new(10, 2, None).unwrap();
        buf.reservoir_update(&numbered(0, 10), &mut rng::from_seed(0)).unwrap();
        let mut counts = [0usize; 10];
        let mut r = rng::from_seed(77);
        let draws = 10_000;
        for _ in 0..draws {
            counts[buf.random_retrieve(1, &mut r).ids[0]] += 1;
        }
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * 0.1).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut buf = MemoryBuffer::new(4, 3, None).unwrap();
        assert!(buf.reservoir_update(&numbered(0, 2), &mut rng::from_seed(0)).is_err());
        assert!(MemoryBuffer::new(0, 3, None).is_err());
    }

    #[test]
    fn exports_to_dataset_format() {
        let mut buf = MemoryBuffer::new(4, 2, None).unwrap();
        buf.reservoir_update(&numbered(0, 4), &mut rng::from_seed(0)).unwrap();
        let ds = buf.to_dataset(3).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice(), "mem").unwrap();
        assert_eq!(back.labels, vec![0, 1, 2, 0]);
    }
}
