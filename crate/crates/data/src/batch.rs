use ienet_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, AugmentPolicy};
use crate::dataset::ImageDataset;
use crate::error::{DataError, Result};
use crate::normalize::{normalize_pixels, Normalization};

/// Normalized `(images [B, C, H, W], labels)` batches over a dataset, in
/// natural order or in a seed-keyed shuffled order, optionally augmented.
pub struct Batches<'a> {
    ds: &'a ImageDataset,
    norm: &'a Normalization,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(&'a AugmentPolicy, ChaCha8Rng)>,
    scratch: Vec<u8>,
}

impl<'a> Batches<'a> {
    pub fn sequential(ds: &'a ImageDataset, norm: &'a Normalization, batch_size: usize) -> Result<Self> {
        Self::build(ds, norm, batch_size, (0..ds.len()).collect(), None)
    }

    /// Shuffled order keyed by `seed`; augmentation draws from a stream keyed
    /// by the same seed.
    pub fn shuffled(
        ds: &'a ImageDataset,
        norm: &'a Normalization,
        batch_size: usize,
        seed: u64,
        augment: Option<&'a AugmentPolicy>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        if let Some(p) = augment {
            p.validate(ds.dims())?;
        }
        Self::build(ds, norm, batch_size, order, augment.map(|p| (p, rng)))
    }

    fn build(
        ds: &'a ImageDataset,
        norm: &'a Normalization,
        batch_size: usize,
        order: Vec<usize>,
        augment: Option<(&'a AugmentPolicy, ChaCha8Rng)>,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(DataError::Format("batch size must be positive".into()));
        }
        if norm.channels() != ds.channels() {
            return Err(DataError::Normalization(format!(
                "statistics cover {} channels, images have {}",
                norm.channels(),
                ds.channels()
            )));
        }
        Ok(Self { ds, norm, order, pos: 0, batch_size, augment, scratch: Vec::new() })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn next_batch(&mut self) -> Result<(Tensor<f32>, Vec<usize>)> {
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        self.scratch.clear();
        for &i in idx {
            self.scratch.extend_from_slice(self.ds.image(i));
        }
        let labels = idx.iter().map(|&i| self.ds.labels()[i]).collect();
        let x = match &mut self.augment {
            Some((policy, rng)) => {
                let aug = augment_batch(&self.scratch, self.ds.dims(), policy, rng)?;
                normalize_pixels(&aug, self.ds.dims(), self.norm)?
            }
            None => normalize_pixels(&self.scratch, self.ds.dims(), self.norm)?,
        };
        Ok((x, labels))
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor<f32>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.pos < self.order.len()).then(|| self.next_batch())
    }
}
