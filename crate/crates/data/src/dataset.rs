use crate::error::{DataError, Result};

/// An in-memory image classification set stored as raw bytes in
/// `[M, channels, height, width]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    name: String,
    images: Vec<u8>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    class_count: usize,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<u8>,
        labels: Vec<usize>,
        dims: [usize; 3],
        class_count: usize,
    ) -> Result<Self> {
        let [channels, height, width] = dims;
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::Format(format!("image extents must be positive, got {dims:?}")));
        }
        let per = channels * height * width;
        if !images.len().is_multiple_of(per) {
            return Err(DataError::Format(format!(
                "{} pixel bytes is not a multiple of the image size {per}",
                images.len()
            )));
        }
        let m = images.len() / per;
        if m != labels.len() {
            return Err(DataError::CountMismatch { images: m, labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Label { label, classes: class_count });
        }
        Ok(Self { name: name.into(), images, labels, channels, height, width, class_count })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[channels, height, width]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Examples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// A new dataset holding the listed examples in the listed order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Format(format!("example index {i} out of range {}", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(name, images, labels, self.dims(), self.class_count)
    }
}
