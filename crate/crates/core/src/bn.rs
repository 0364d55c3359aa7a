//! Switchable batch normalization: one private slot of scale, shift and
//! running statistics per (BN layer, sub-network).

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic: `new = 0.9·old + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnSlot<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Saved normalized activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BnSlot<T> {
    pub fn new(channels: usize) -> Self {
        BnSlot {
            scale: Param::new(Tensor::filled(&[channels], T::one())),
            shift: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check_channels(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::Shape(format!("batch norm slot has {} channels, input has {c}", self.channels())));
        }
        Ok((b, c, h * w))
    }

    /// Normalizes with batch statistics and folds them into the running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (b, c, hw) = self.check_channels(x)?;
        let count = b * hw;
        if count < 2 {
            return Err(Error::BatchTooSmall(count));
        }
        let n = T::from_f64(count as f64);
        let eps = T::from_f64(BN_EPS);
        let keep = T::from_f64(BN_MOMENTUM);
        let blend = T::one() - keep;
        let unbias = T::from_f64(count as f64 / (count - 1) as f64);
        let planes = || x.data().chunks_exact(hw).enumerate().map(|(i, p)| (i % c, p));

        let mut mean = vec![T::zero(); c];
        for (ch, p) in planes() {
            mean[ch] += lane_sum(p, p, |v, _| v);
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for (ch, p) in planes() {
            let m = mean[ch];
            var[ch] += lane_sum(p, p, |v, _| (v - m) * (v - m));
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let (scale, shift) = (self.scale.value.data(), self.shift.value.data());
        for (ch, p) in planes() {
            let (m, istd, g, beta) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            let start = x_hat.len();
            x_hat.extend(p.iter().map(|&v| (v - m) * istd));
            out.extend(x_hat[start..].iter().map(|&h| g * h + beta));
        }
        for ch in 0..c {
            self.running_mean[ch] = keep * self.running_mean[ch] + blend * mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + blend * var[ch] * unbias;
        }
        let shape = x.shape().to_vec();
        Ok((Tensor::new(shape.clone(), out)?, BnCache { x_hat: Tensor::new(shape, x_hat)?, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, hw) = self.check_channels(x)?;
        let eps = T::from_f64(BN_EPS);
        let mut out = x.clone();
        for (idx, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = idx % c;
            let istd = T::one() / (self.running_var[ch] + eps).sqrt();
            let (g, beta, mean) = (self.scale.value.data()[ch], self.shift.value.data()[ch], self.running_mean[ch]);
            plane.iter_mut().for_each(|v| *v = g * (*v - mean) * istd + beta);
        }
        debug_assert_eq!(out.len(), b * c * hw);
        Ok(out)
    }

    /// Accumulates scale/shift gradients into this slot and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        self.backward_in_place(cache, &mut g)?;
        Ok(g)
    }

    /// [`BnSlot::backward`] overwriting `grad` with the input gradient.
    pub fn backward_in_place(&mut self, cache: &BnCache<T>, grad: &mut Tensor<T>) -> Result<()> {
        let (b, c, hw) = self.check_channels(grad)?;
        if grad.shape() != cache.x_hat.shape() {
            return Err(Error::Shape("batch norm backward".into()));
        }
        let n = T::from_f64((b * hw) as f64);
        let xh = cache.x_hat.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for (i, (dy, h)) in grad.data().chunks_exact(hw).zip(xh.chunks_exact(hw)).enumerate() {
            sum_dy[i % c] += lane_sum(dy, dy, |d, _| d);
            sum_dy_xh[i % c] += lane_sum(dy, h, |d, x| d * x);
        }
        for ch in 0..c {
            self.scale.grad.data_mut()[ch] += sum_dy_xh[ch];
            self.shift.grad.data_mut()[ch] += sum_dy[ch];
        }
        let scale = self.scale.value.data();
        for (i, (dy, h)) in grad.data_mut().chunks_exact_mut(hw).zip(xh.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            let coef = scale[ch] * cache.inv_std[ch] / n;
            let (sd, sdx) = (sum_dy[ch], sum_dy_xh[ch]);
            for (d, &x) in dy.iter_mut().zip(h) {
                *d = coef * (n * *d - sd - x * sdx);
            }
        }
        Ok(())
    }
}

/// `Σ f(a_i, b_i)` with eight interleaved accumulators, which vectorizes and
/// rounds better than a single running total.
fn lane_sum<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += f(x[k], y[k]);
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + f(x, y));
    acc.iter().fold(tail, |s, &v| s + v)
}

/// All BN slots of a network, indexed `[bn_layer][subnet_id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchableBnBank<T> {
    layers: Vec<Vec<BnSlot<T>>>,
}

impl<T: Scalar> SwitchableBnBank<T> {
    /// `sizes[layer][subnet]` is the channel count of that slot.
    pub fn new(sizes: &[Vec<usize>]) -> Self {
        SwitchableBnBank {
            layers: sizes.iter().map(|row| row.iter().map(|&c| BnSlot::new(c)).collect()).collect(),
        }
    }

    /// Bank from explicit slots, `[bn_layer][subnet]`.
    pub fn from_slots(layers: Vec<Vec<BnSlot<T>>>) -> Result<Self> {
        let n = layers.first().map_or(0, Vec::len);
        if layers.iter().any(|row| row.len() != n) {
            return Err(Error::Shape("every batch norm layer needs the same number of slots".into()));
        }
        Ok(SwitchableBnBank { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_subnets(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn slot(&self, layer: usize, subnet: usize) -> Result<&BnSlot<T>> {
        self.layers
            .get(layer)
            .and_then(|row| row.get(subnet))
            .ok_or_else(|| Error::PlanMismatch(format!("no batch norm slot ({layer}, {subnet})")))
    }

    pub fn slot_mut(&mut self, layer: usize, subnet: usize) -> Result<&mut BnSlot<T>> {
        self.layers
            .get_mut(layer)
            .and_then(|row| row.get_mut(subnet))
            .ok_or_else(|| Error::PlanMismatch(format!("no batch norm slot ({layer}, {subnet})")))
    }

    /// Batch norm through the slot of `subnet`; train mode also returns the backward cache.
    pub fn forward(&mut self, layer: usize, subnet: usize, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let slot = self.slot_mut(layer, subnet)?;
        match mode {
            Mode::Train => slot.forward_train(x).map(|(y, c)| (y, Some(c))),
            Mode::Eval => slot.forward_eval(x).map(|y| (y, None)),
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, usize, &BnSlot<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(s, slot)| (l, s, slot)))
    }

    pub fn slots_mut(&mut self) -> impl Iterator<Item = &mut BnSlot<T>> {
        self.layers.iter_mut().flatten()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.slots_mut().flat_map(|s| [&mut s.scale, &mut s.shift])
    }

    /// Scale and shift of every slot owned by one of `subnets`.
    pub fn subnet_params_mut<'a>(&'a mut self, subnets: &'a [usize]) -> impl Iterator<Item = &'a mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(move |row| row.iter_mut().enumerate().filter(move |(s, _)| subnets.contains(s)))
            .flat_map(|(_, s)| [&mut s.scale, &mut s.shift])
    }
}
