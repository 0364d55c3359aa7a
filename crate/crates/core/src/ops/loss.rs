use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub probs: Tensor<T>,
    pub loss: T,
    pub grad_logits: Tensor<T>,
}

/// Row-wise softmax of a `[B, C]` tensor with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let (_, classes) = logits.dims2();
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(probs)
}

/// Mean negative log-likelihood and its gradient `(probs - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let (batch, classes) = logits.dims2();
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    let probs = softmax_rows(logits)?;
    let inv_batch = T::from_f64(1.0 / batch as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for ((row, &label), logit_row) in grad.data_mut().chunks_exact_mut(classes).zip(labels).zip(logits.data().chunks_exact(classes)) {
        // log-sum-exp form keeps saturated probabilities finite
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logit_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - logit_row[label];
        row[label] -= T::one();
        row.iter_mut().for_each(|g| *g *= inv_batch);
    }
    Ok(LossOutput { probs, loss: loss * inv_batch, grad_logits: grad })
}
