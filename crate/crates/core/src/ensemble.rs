//! Combining sub-network softmax outputs: averaging, per-class stacking and
//! the all-agree similarity score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::SharedNetwork;
use crate::ops::softmax_rows;
use crate::plan::SubNetworkPlan;
use crate::tensor::Tensor;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Softmax outputs of N sub-networks for one example, `[N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMatrix {
    subnets: usize,
    classes: usize,
    data: Vec<f64>,
}

impl SoftmaxMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map(Vec::len).ok_or(Error::Empty("softmax matrix"))?;
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("softmax rows of different lengths".into()));
        }
        Self::from_flat(rows.len(), classes, rows.concat())
    }

    pub fn from_flat(subnets: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if subnets == 0 || classes == 0 {
            return Err(Error::Empty("softmax matrix"));
        }
        if data.len() != subnets * classes {
            return Err(Error::Shape(format!("{} values for a {subnets}x{classes} matrix", data.len())));
        }
        for row in data.chunks_exact(classes) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Shape(format!("row is not a probability vector (sum {sum})")));
            }
        }
        Ok(SoftmaxMatrix { subnets, classes, data })
    }

    pub fn subnets(&self) -> usize {
        self.subnets
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, subnet: usize) -> &[f64] {
        &self.data[subnet * self.classes..(subnet + 1) * self.classes]
    }

    pub fn get(&self, subnet: usize, class: usize) -> f64 {
        self.data[subnet * self.classes + class]
    }
}

/// Per-class stacking weights `W`, `[C, N]`; exactly `N·C` parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackingWeights {
    classes: usize,
    subnets: usize,
    data: Vec<f64>,
}

impl StackingWeights {
    pub fn new(classes: usize, subnets: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * subnets || classes == 0 || subnets == 0 {
            return Err(Error::Shape(format!("{} stacking weights for {classes}x{subnets}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stacking weights"));
        }
        Ok(StackingWeights { classes, subnets, data })
    }

    /// Every weight `1/N`: reproduces averaging.
    pub fn uniform(classes: usize, subnets: usize) -> Self {
        let v = 1.0 / subnets as f64;
        StackingWeights { classes, subnets, data: vec![v; classes * subnets] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn subnets(&self) -> usize {
        self.subnets
    }

    pub fn get(&self, class: usize, subnet: usize) -> f64 {
        self.data[class * self.subnets + subnet]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }

    /// Mean weight given to `subnet` across classes.
    pub fn column_mean(&self, subnet: usize) -> f64 {
        (0..self.classes).map(|c| self.get(c, subnet)).sum::<f64>() / self.classes as f64
    }
}

/// Mean of the sub-network rows.
pub fn average_combine(o: &SoftmaxMatrix) -> Vec<f64> {
    let mut out = vec![0.0; o.classes];
    for row in o.data.chunks_exact(o.classes) {
        out.iter_mut().zip(row).for_each(|(acc, &p)| *acc += p);
    }
    let n = o.subnets as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// `out_c = Σ_n W[c,n]·O[n,c]`, the diagonal of `W·O`.
pub fn stacking_combine(o: &SoftmaxMatrix, w: &StackingWeights) -> Result<Vec<f64>> {
    if w.classes != o.classes || w.subnets != o.subnets {
        return Err(Error::Shape(format!(
            "stacking weights {}x{} against outputs {}x{}",
            w.classes, w.subnets, o.subnets, o.classes
        )));
    }
    Ok((0..o.classes)
        .map(|c| (0..o.subnets).map(|n| w.get(c, n) * o.get(n, c)).sum())
        .collect())
}

/// Softmax over a score vector.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub enum Combiner {
    Averaging,
    Stacking(StackingWeights),
}

impl Combiner {
    pub fn combine(&self, o: &SoftmaxMatrix) -> Result<Vec<f64>> {
        match self {
            Combiner::Averaging => Ok(average_combine(o)),
            Combiner::Stacking(w) => stacking_combine(o, w).map(|s| normalize_scores(&s)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Combiner::Averaging => "averaging",
            Combiner::Stacking(_) => "stacking",
        }
    }

    pub fn parameter_count(&self) -> Option<usize> {
        match self {
            Combiner::Averaging => None,
            Combiner::Stacking(w) => Some(w.parameter_count()),
        }
    }
}

/// Trains `W` from uniform `1/N` by minibatch SGD on the cross-entropy of
/// `softmax(diag(W·O))`. Only `W` changes: the inputs are precomputed
/// sub-network outputs.
pub fn train_stacking(
    outputs: &[SoftmaxMatrix],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<StackingWeights> {
    let first = outputs.first().ok_or(Error::Empty("stacking training set"))?;
    if labels.len() != outputs.len() {
        return Err(Error::Shape(format!("{} labels for {} examples", labels.len(), outputs.len())));
    }
    let (classes, subnets) = (first.classes, first.subnets);
    if outputs.iter().any(|o| o.classes != classes || o.subnets != subnets) {
        return Err(Error::Shape("stacking examples disagree on shape".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    let mut w = StackingWeights::uniform(classes, subnets);
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch_size = batch_size.max(1);
    let mut grad = vec![0.0; classes * subnets];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            grad.fill(0.0);
            for &i in chunk {
                let o = &outputs[i];
                let probs = normalize_scores(&stacking_combine(o, &w)?);
                for c in 0..classes {
                    let g = probs[c] - if c == labels[i] { 1.0 } else { 0.0 };
                    for n in 0..subnets {
                        grad[c * subnets + n] += g * o.get(n, c);
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            w.data.iter_mut().zip(&grad).for_each(|(wv, g)| *wv -= scale * g);
        }
    }
    if w.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stacking training"));
    }
    Ok(w)
}

/// `K` = examples on which every sub-network predicts the same class, `S = K / M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityReport {
    #[serde(rename = "K")]
    pub agree: usize,
    #[serde(rename = "M")]
    pub total: usize,
    #[serde(rename = "S")]
    pub similarity: f64,
}

/// `predictions[n][m]` is sub-network `n`'s class for example `m`.
pub fn similarity(predictions: &[Vec<usize>]) -> Result<SimilarityReport> {
    let m = predictions.first().map(Vec::len).ok_or(Error::Empty("prediction matrix"))?;
    if m == 0 {
        return Err(Error::Empty("prediction matrix has no examples"));
    }
    if predictions.iter().any(|row| row.len() != m) {
        return Err(Error::Shape("ragged prediction matrix".into()));
    }
    let agree = (0..m)
        .filter(|&j| predictions.iter().all(|row| row[j] == predictions[0][j]))
        .count();
    Ok(SimilarityReport { agree, total: m, similarity: agree as f64 / m as f64 })
}

/// Sub-network softmax outputs over a dataset, one matrix per example.
#[derive(Debug, Clone)]
pub struct SubnetOutputs {
    pub outputs: Vec<SoftmaxMatrix>,
    pub labels: Vec<usize>,
}

/// Runs every plan in eval mode over `batches` of `(images, labels)`.
pub fn collect_outputs<I>(net: &SharedNetwork<f32>, plans: &[SubNetworkPlan], batches: I) -> Result<SubnetOutputs>
where
    I: IntoIterator<Item = (Tensor<f32>, Vec<usize>)>,
{
    if plans.is_empty() {
        return Err(Error::Empty("plan list"));
    }
    let mut outputs = Vec::new();
    let mut labels = Vec::new();
    let classes = net.arch().classes();
    for (x, y) in batches {
        if x.shape()[0] != y.len() {
            return Err(Error::Shape(format!("{} labels for batch of {}", y.len(), x.shape()[0])));
        }
        let probs: Vec<Tensor<f64>> = plans
            .iter()
            .map(|plan| softmax_rows(&net.forward_eval(plan, &x)?.cast::<f64>()))
            .collect::<Result<_>>()?;
        for b in 0..y.len() {
            let data: Vec<f64> = probs.iter().flat_map(|p| p.data()[b * classes..(b + 1) * classes].iter().copied()).collect();
            outputs.push(SoftmaxMatrix::from_flat(plans.len(), classes, data)?);
        }
        labels.extend(y);
    }
    if outputs.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    Ok(SubnetOutputs { outputs, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub per_subnet_acc: Vec<f64>,
    pub ensemble_acc: f64,
    pub similarity: SimilarityReport,
}

pub fn evaluate_outputs(outputs: &SubnetOutputs, combiner: &Combiner) -> Result<EnsembleReport> {
    let first = outputs.outputs.first().ok_or(Error::Empty("evaluation outputs"))?;
    let n = first.subnets;
    let m = outputs.outputs.len();
    let mut predictions = vec![Vec::with_capacity(m); n];
    let mut correct = vec![0usize; n];
    let mut ensemble_correct = 0usize;
    for (o, &label) in outputs.outputs.iter().zip(&outputs.labels) {
        for (s, preds) in predictions.iter_mut().enumerate() {
            let p = argmax(o.row(s));
            correct[s] += usize::from(p == label);
            preds.push(p);
        }
        ensemble_correct += usize::from(argmax(&combiner.combine(o)?) == label);
    }
    Ok(EnsembleReport {
        per_subnet_acc: correct.iter().map(|&c| c as f64 / m as f64).collect(),
        ensemble_acc: ensemble_correct as f64 / m as f64,
        similarity: similarity(&predictions)?,
    })
}

/// Single pass over `batches`: all sub-network outputs, then the combiner.
pub fn evaluate_ensemble<I>(net: &SharedNetwork<f32>, plans: &[SubNetworkPlan], combiner: &Combiner, batches: I) -> Result<EnsembleReport>
where
    I: IntoIterator<Item = (Tensor<f32>, Vec<usize>)>,
{
    evaluate_outputs(&collect_outputs(net, plans, batches)?, combiner)
}
