use rand::Rng;

use crate::error::{DataError, Result};

/// Zero-pad and random-crop, horizontal flip, and cutout of a square patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub pad: usize,
    /// Crop extent `[height, width]`; must equal the image extent.
    pub crop: [usize; 2],
    pub hflip_prob: f64,
    pub cutout_size: usize,
    pub pad_crop: bool,
    pub hflip: bool,
    pub cutout: bool,
}

/// Cutout side for a given image side: 16 at 32 pixels, 8 at 28 pixels,
/// a quarter of the side otherwise.
pub fn default_cutout_size(side: usize) -> usize {
    match side {
        32.. => side / 2,
        28..=31 => 8,
        _ => (side / 4).max(1),
    }
}

impl AugmentPolicy {
    pub fn standard(height: usize, width: usize) -> Self {
        Self {
            pad: 4,
            crop: [height, width],
            hflip_prob: 0.5,
            cutout_size: default_cutout_size(height.min(width)),
            pad_crop: true,
            hflip: true,
            cutout: true,
        }
    }

    pub fn disabled(height: usize, width: usize) -> Self {
        Self { pad_crop: false, hflip: false, cutout: false, ..Self::standard(height, width) }
    }

    pub fn is_identity(&self) -> bool {
        !(self.pad_crop || self.hflip || self.cutout)
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let [_, h, w] = dims;
        if self.crop != [h, w] {
            return Err(DataError::Augment(format!("crop {:?} must equal the image extent [{h}, {w}]", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(DataError::Augment(format!("flip probability {} outside [0, 1]", self.hflip_prob)));
        }
        if self.cutout && (self.cutout_size == 0 || self.cutout_size > h.min(w)) {
            return Err(DataError::Augment(format!(
                "cutout size {} must be in [1, {}]",
                self.cutout_size,
                h.min(w)
            )));
        }
        Ok(())
    }
}

/// Zeroes the `size × size` square centred at `(cy, cx)`, clipped to the image.
pub fn apply_cutout(img: &mut [u8], dims: [usize; 3], size: usize, cy: usize, cx: usize) {
    let [c, h, w] = dims;
    let y0 = cy.saturating_sub(size / 2);
    let x0 = cx.saturating_sub(size / 2);
    let y1 = (cy + size - size / 2).min(h);
    let x1 = (cx + size - size / 2).min(w);
    for ch in 0..c {
        for y in y0..y1 {
            img[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(0);
        }
    }
}

fn augment_image<R: Rng + ?Sized>(src: &[u8], dst: &mut [u8], dims: [usize; 3], policy: &AugmentPolicy, rng: &mut R) {
    let [c, h, w] = dims;
    let (oy, ox) = if policy.pad_crop {
        (rng.random_range(0..=2 * policy.pad), rng.random_range(0..=2 * policy.pad))
    } else {
        (policy.pad, policy.pad)
    };
    let flip = policy.hflip && rng.random_bool(policy.hflip_prob);
    for ch in 0..c {
        for y in 0..h {
            let row = &mut dst[(ch * h + y) * w..][..w];
            let sy = (y + oy) as isize - policy.pad as isize;
            if sy < 0 || sy >= h as isize {
                row.fill(0);
                continue;
            }
            let src_row = &src[(ch * h + sy as usize) * w..][..w];
            for (x, d) in row.iter_mut().enumerate() {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + ox) as isize - policy.pad as isize;
                *d = if sx < 0 || sx >= w as isize { 0 } else { src_row[sx as usize] };
            }
        }
    }
    if policy.cutout {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        apply_cutout(dst, dims, policy.cutout_size, cy, cx);
    }
}

/// Augments a batch of raw images laid out `[n, C, H, W]`. Padding and the
/// cutout patch are zero pixels, so after normalization they carry the
/// normalized value of 0.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: &[u8],
    dims: [usize; 3],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<u8>> {
    policy.validate(dims)?;
    let per: usize = dims.iter().product();
    if !batch.len().is_multiple_of(per) {
        return Err(DataError::Augment(format!("{} bytes is not a whole batch of {per}-byte images", batch.len())));
    }
    if policy.is_identity() {
        return Ok(batch.to_vec());
    }
    let mut out = vec![0u8; batch.len()];
    for (src, dst) in batch.chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        augment_image(src, dst, dims, policy, rng);
    }
    Ok(out)
}
