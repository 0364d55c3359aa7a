use ienet_core::Tensor;

use crate::dataset::ImageDataset;
use crate::error::{DataError, Result};

/// Per-channel mean and standard deviation on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(DataError::Normalization(format!(
                "{} means for {} standard deviations",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(DataError::Normalization(format!("standard deviation must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(DataError::Normalization("mean must be finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// The normalized value of a zero pixel in channel `c`.
    pub fn zero_value(&self, c: usize) -> f32 {
        (-self.mean[c] / self.std[c]) as f32
    }

    /// Normalizes a run of whole images laid out `[n, channels, plane]`.
    pub fn apply(&self, pixels: &[u8], plane: usize, out: &mut Vec<f32>) -> Result<()> {
        let c = self.channels();
        if plane == 0 || !pixels.len().is_multiple_of(c * plane) {
            return Err(DataError::Normalization(format!(
                "{} bytes do not form whole {c}-channel images of {plane} pixels",
                pixels.len()
            )));
        }
        let tables: Vec<[f32; 256]> = (0..c)
            .map(|ch| std::array::from_fn(|p| ((p as f64 / 255.0 - self.mean[ch]) / self.std[ch]) as f32))
            .collect();
        out.reserve(pixels.len());
        for (i, chunk) in pixels.chunks_exact(plane).enumerate() {
            let t = &tables[i % c];
            out.extend(chunk.iter().map(|&p| t[p as usize]));
        }
        Ok(())
    }
}

/// Population mean and standard deviation of every channel over the dataset.
pub fn channel_stats(ds: &ImageDataset) -> Result<Normalization> {
    if ds.is_empty() {
        return Err(DataError::Normalization("statistics of an empty dataset".into()));
    }
    let c = ds.channels();
    let plane = ds.height() * ds.width();
    let mut sum = vec![0u64; c];
    let mut sq = vec![0u64; c];
    for (i, chunk) in ds.images().chunks_exact(plane).enumerate() {
        let ch = i % c;
        for &p in chunk {
            sum[ch] += p as u64;
            sq[ch] += (p as u64) * (p as u64);
        }
    }
    let n = (ds.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|&s| s as f64 / n / 255.0).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(&q, m)| ((q as f64 / n / (255.0 * 255.0)) - m * m).max(0.0).sqrt())
        .collect();
    Normalization::new(mean, std)
}

/// `x' = (x/255 − mean)/std` over the whole dataset, shaped `[M, C, H, W]`.
pub fn normalize(ds: &ImageDataset, norm: &Normalization) -> Result<Tensor<f32>> {
    normalize_pixels(ds.images(), ds.dims(), norm)
}

pub fn normalize_pixels(pixels: &[u8], dims: [usize; 3], norm: &Normalization) -> Result<Tensor<f32>> {
    let [c, h, w] = dims;
    if norm.channels() != c {
        return Err(DataError::Normalization(format!(
            "statistics cover {} channels, images have {c}",
            norm.channels()
        )));
    }
    let mut out = Vec::new();
    norm.apply(pixels, h * w, &mut out)?;
    let n = out.len() / (c * h * w);
    Ok(Tensor::new(vec![n, c, h, w], out)?)
}
