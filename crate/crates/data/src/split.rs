use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageDataset;
use crate::error::{DataError, Result};

/// Stratified, seed-keyed split. Each class's examples are permuted and cut
/// into contiguous slices of `floor(fraction · class_size)`; each split is
/// then shuffled so classes interleave.
pub fn deterministic_split(ds: &ImageDataset, fractions: &[f64], seed: u64) -> Result<Vec<ImageDataset>> {
    if fractions.is_empty() {
        return Err(DataError::Split("no fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(DataError::Split(format!("fraction {f} must be positive")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(DataError::Split(format!("fractions sum to {total}, more than 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut start = 0;
        for (j, &f) in fractions.iter().enumerate() {
            let take = (f * members.len() as f64 + 1e-9).floor() as usize;
            let end = (start + take).min(members.len());
            if end == start {
                return Err(DataError::Split(format!(
                    "split {j} (fraction {f}) receives no examples of class {class}"
                )));
            }
            parts[j].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(j, mut idx)| {
            idx.shuffle(&mut rng);
            ds.subset(&idx, format!("{}[split {j}]", ds.name()))
        })
        .collect()
}
