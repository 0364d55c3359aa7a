//! The shared over-parameterized network: one parameter store, one switchable
//! BN bank, and forward/backward execution of any sub-network plan.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::arch::{ArchSpec, LayerSpec};
use crate::bn::{BnCache, Mode, SwitchableBnBank};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGradsMut, ConvWeights, MaxPoolIndices};
use crate::optim::{sgd_momentum_step, Param};
use crate::plan::SubNetworkPlan;
use crate::tensor::{Scalar, Tensor};

/// Named shared weight tensors with their gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    /// Builds a store from `(name, param)` pairs; names must be unique and
    /// gradient buffers are reset.
    pub fn from_entries(entries: Vec<(String, Param<T>)>) -> Result<Self> {
        let mut store = ParameterStore { names: Vec::new(), params: Vec::new() };
        for (name, mut p) in entries {
            if store.names.contains(&name) {
                return Err(Error::Arch(format!("duplicate parameter name {name:?}")));
            }
            p.zero_grad();
            store.names.push(name);
            store.params.push(p);
        }
        Ok(store)
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        debug_assert!(!self.names.contains(&name));
        self.names.push(name);
        self.params.push(Param::new(value));
        self.params.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Indices into the store for one parameterized layer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerParams {
    weight: usize,
    bias: Option<usize>,
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"ienet/init");
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
}

/// Channel count each BN slot needs, `[bn_layer][subnet]`.
fn bn_slot_sizes(arch: &ArchSpec, plans: &[SubNetworkPlan]) -> Vec<Vec<usize>> {
    arch.batchnorm_layers()
        .iter()
        .map(|&bn_id| {
            plans
                .iter()
                .map(|plan| {
                    arch.layers()[..bn_id]
                        .iter()
                        .enumerate()
                        .rev()
                        .find_map(|(id, l)| match l {
                            LayerSpec::Conv { .. } => plan.selection(id).map(|s| s.len()),
                            _ => None,
                        })
                        .unwrap_or(arch.input_shape()[0])
                })
                .collect()
        })
        .collect()
}

/// Shared weights and BN bank for `plans`, initialized deterministically from `seed`.
///
/// Conv and dense weights are drawn from `N(0, 2/fan_in)`, biases start at
/// zero, BN scale at one and shift at zero.
pub fn init_parameters<T: Scalar>(
    arch: &ArchSpec,
    plans: &[SubNetworkPlan],
    seed: u64,
) -> Result<(ParameterStore<T>, SwitchableBnBank<T>)> {
    if plans.is_empty() {
        return Err(Error::PlanMismatch("at least one sub-network plan is required".into()));
    }
    for (i, plan) in plans.iter().enumerate() {
        plan.validate(arch)?;
        if plan.subnet_id() != i {
            return Err(Error::PlanMismatch(format!("plan {i} carries subnet id {}", plan.subnet_id())));
        }
    }
    let mut store = ParameterStore { names: Vec::new(), params: Vec::new() };
    for (id, layer) in arch.layers().iter().enumerate() {
        match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, bias, .. } => {
                let name = format!("layer{id}.weight");
                let w = he_normal(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, seed, &name);
                store.push(name, w);
                if bias {
                    store.push(format!("layer{id}.bias"), Tensor::zeros(&[out_channels]));
                }
            }
            LayerSpec::Dense { in_features, out_features } => {
                let name = format!("layer{id}.weight");
                let w = he_normal(&[out_features, in_features], in_features, seed, &name);
                store.push(name, w);
                store.push(format!("layer{id}.bias"), Tensor::zeros(&[out_features]));
            }
            _ => {}
        }
    }
    let bank = SwitchableBnBank::new(&bn_slot_sizes(arch, plans));
    Ok((store, bank))
}

/// Parameter totals. Running BN statistics are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Every conv and dense weight and bias.
    pub shared: usize,
    /// `2·c` per BN layer: what a single stand-alone network would carry.
    pub bn_baseline: usize,
    /// All BN slot parameters minus `bn_baseline`.
    pub sbn_extra: usize,
    pub stacking: usize,
    pub total: usize,
}

enum LayerCache<T> {
    Conv { input: Tensor<T>, in_sel: Vec<usize>, out_sel: Vec<usize> },
    Bn { cache: BnCache<T> },
    Relu { input: Tensor<T> },
    Pool { indices: MaxPoolIndices },
    GlobalAvg { shape: Vec<usize> },
    Dense { input: Tensor<T>, in_sel: Vec<usize> },
}

struct ForwardCache<T> {
    subnet_id: usize,
    plan: Option<SubNetworkPlan>,
    layers: Vec<LayerCache<T>>,
}

enum BankAccess<'a, T> {
    Train(&'a mut SwitchableBnBank<T>),
    Eval(&'a SwitchableBnBank<T>),
}

/// One network whose parameters are shared by every sub-network plan.
pub struct SharedNetwork<T> {
    arch: ArchSpec,
    store: ParameterStore<T>,
    bank: SwitchableBnBank<T>,
    layer_params: Vec<Option<LayerParams>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> SharedNetwork<T> {
    pub fn new(arch: &ArchSpec, plans: &[SubNetworkPlan], seed: u64) -> Result<Self> {
        let (store, bank) = init_parameters(arch, plans, seed)?;
        SharedNetwork::from_parts(arch.clone(), store, bank)
    }

    /// Reassembles a network from stored state; names must follow the
    /// `layer{id}.weight` / `layer{id}.bias` scheme of [`init_parameters`].
    pub fn from_parts(arch: ArchSpec, store: ParameterStore<T>, bank: SwitchableBnBank<T>) -> Result<Self> {
        let mut layer_params = Vec::with_capacity(arch.layers().len());
        for (id, layer) in arch.layers().iter().enumerate() {
            let find = |suffix: &str| store.names.iter().position(|n| *n == format!("layer{id}.{suffix}"));
            let entry = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, bias, .. } => {
                    let weight = find("weight").ok_or_else(|| Error::Arch(format!("missing weight for layer {id}")))?;
                    if store.params[weight].value.shape() != [out_channels, in_channels, kernel, kernel] {
                        return Err(Error::Arch(format!("layer {id} weight shape")));
                    }
                    let b = find("bias");
                    if b.is_some() != bias {
                        return Err(Error::Arch(format!("layer {id} bias presence")));
                    }
                    Some(LayerParams { weight, bias: b })
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let weight = find("weight").ok_or_else(|| Error::Arch(format!("missing weight for layer {id}")))?;
                    let b = find("bias").ok_or_else(|| Error::Arch(format!("missing bias for layer {id}")))?;
                    if store.params[weight].value.shape() != [out_features, in_features] {
                        return Err(Error::Arch(format!("layer {id} weight shape")));
                    }
                    Some(LayerParams { weight, bias: Some(b) })
                }
                _ => None,
            };
            layer_params.push(entry);
        }
        if bank.num_layers() != arch.batchnorm_layers().len() {
            return Err(Error::Arch("batch norm bank does not match architecture".into()));
        }
        Ok(SharedNetwork { arch, store, bank, layer_params, cache: None })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn bank(&self) -> &SwitchableBnBank<T> {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut SwitchableBnBank<T> {
        &mut self.bank
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn num_subnets(&self) -> usize {
        self.bank.num_subnets()
    }

    fn check_plan(&self, plan: &SubNetworkPlan) -> Result<()> {
        plan.validate(&self.arch)?;
        if plan.subnet_id() >= self.num_subnets() {
            return Err(Error::PlanMismatch(format!(
                "subnet {} but the bank has {} slots per layer",
                plan.subnet_id(),
                self.num_subnets()
            )));
        }
        self.check_bn_sizes(plan)
    }

    /// Every BN slot of `plan.subnet_id()` must match the width the plan feeds it.
    pub fn check_bn_sizes(&self, plan: &SubNetworkPlan) -> Result<()> {
        let sizes = bn_slot_sizes(&self.arch, std::slice::from_ref(plan));
        for (layer, row) in sizes.iter().enumerate() {
            let have = self.bank.slot(layer, plan.subnet_id())?.channels();
            if have != row[0] {
                return Err(Error::PlanMismatch(format!(
                    "batch norm layer {layer} slot {} has {have} channels, plan feeds {}",
                    plan.subnet_id(),
                    row[0]
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.arch.input_shape() {
            return Err(Error::Shape(format!(
                "input {:?} does not match architecture input {:?}",
                x.shape(),
                self.arch.input_shape()
            )));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        arch: &ArchSpec,
        store: &ParameterStore<T>,
        layer_params: &[Option<LayerParams>],
        mut bank: BankAccess<'_, T>,
        plan: Option<&SubNetworkPlan>,
        subnet_id: usize,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        let train = matches!(bank, BankAccess::Train(_));
        let mut caches = Vec::new();
        let mut h = x.clone();
        let mut current: Vec<usize> = (0..arch.input_shape()[0]).collect();
        let mut bn_index = 0;
        for (id, layer) in arch.layers().iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let lp = layer_params[id].expect("conv params");
                    let w = ConvWeights {
                        kernel: &store.params[lp.weight].value,
                        bias: lp.bias.map(|b| &store.params[b].value),
                    };
                    match plan {
                        Some(plan) => {
                            let out_sel = plan.selection(id).expect("validated plan").indices().to_vec();
                            let y = ops::conv2d(&h, w, &current, &out_sel, stride, pad)?;
                            let in_sel = std::mem::replace(&mut current, out_sel.clone());
                            if train {
                                caches.push(LayerCache::Conv { input: h, in_sel, out_sel });
                            }
                            y
                        }
                        None => {
                            let y = ops::conv2d_unrestricted(&h, w, stride, pad)?;
                            current = (0..y.shape()[1]).collect();
                            y
                        }
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    let y = match &mut bank {
                        BankAccess::Train(bank) => {
                            let (y, cache) = bank.forward(bn_index, subnet_id, &h, Mode::Train)?;
                            caches.push(LayerCache::Bn { cache: cache.expect("train cache") });
                            y
                        }
                        BankAccess::Eval(bank) => bank.slot(bn_index, subnet_id)?.forward_eval(&h)?,
                    };
                    bn_index += 1;
                    y
                }
                LayerSpec::Relu => {
                    let y = ops::relu(&h);
                    if train {
                        caches.push(LayerCache::Relu { input: h });
                    }
                    y
                }
                LayerSpec::MaxPool2 => {
                    let (y, indices) = ops::maxpool2(&h)?;
                    if train {
                        caches.push(LayerCache::Pool { indices });
                    }
                    y
                }
                LayerSpec::GlobalAvg => {
                    let y = ops::global_avg(&h)?;
                    if train {
                        caches.push(LayerCache::GlobalAvg { shape: h.shape().to_vec() });
                    }
                    y
                }
                LayerSpec::Dense { .. } => {
                    let lp = layer_params[id].expect("dense params");
                    let (w, b) = (&store.params[lp.weight].value, &store.params[lp.bias.expect("dense bias")].value);
                    let y = ops::dense(&h, w, b, &current)?;
                    if train {
                        caches.push(LayerCache::Dense { input: h, in_sel: current.clone() });
                    }
                    y
                }
            };
            h = next;
        }
        Ok((h, caches))
    }

    /// Sub-network forward pass. Train mode uses batch statistics, updates the
    /// plan's BN slots and keeps activations for [`SharedNetwork::backward_subnet`].
    pub fn forward_subnet(&mut self, plan: &SubNetworkPlan, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward_eval(plan, x),
            Mode::Train => {
                self.check_plan(plan)?;
                self.check_input(x)?;
                self.cache = None;
                let (y, layers) = Self::run(
                    &self.arch,
                    &self.store,
                    &self.layer_params,
                    BankAccess::Train(&mut self.bank),
                    Some(plan),
                    plan.subnet_id(),
                    x,
                )?;
                self.cache = Some(ForwardCache { subnet_id: plan.subnet_id(), plan: Some(plan.clone()), layers });
                Ok(y)
            }
        }
    }

    /// Read-only inference with running statistics.
    pub fn forward_eval(&self, plan: &SubNetworkPlan, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_plan(plan)?;
        self.check_input(x)?;
        let (y, _) = Self::run(&self.arch, &self.store, &self.layer_params, BankAccess::Eval(&self.bank), Some(plan), plan.subnet_id(), x)?;
        Ok(y)
    }

    /// Inference over every weight entry, without channel selection, using the
    /// BN slots of `subnet_id` (which must be full width).
    pub fn forward_unrestricted(&self, subnet_id: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (y, _) = Self::run(&self.arch, &self.store, &self.layer_params, BankAccess::Eval(&self.bank), None, subnet_id, x)?;
        Ok(y)
    }

    /// Accumulates the gradient of a loss with `grad_logits` into the shared
    /// store (plan-selected entries only) and the plan's BN slots.
    pub fn backward_subnet(&mut self, plan: &SubNetworkPlan, grad_logits: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::MissingCache("no cached train-mode forward".into()))?;
        if cache.subnet_id != plan.subnet_id() || cache.plan.as_ref() != Some(plan) {
            return Err(Error::MissingCache(format!(
                "cached forward belongs to subnet {}, backward requested for {}",
                cache.subnet_id,
                plan.subnet_id()
            )));
        }
        let mut grad = grad_logits.clone();
        let mut layers = cache.layers;
        let mut bn_index = self.bank.num_layers();
        for (id, layer) in self.arch.layers().iter().enumerate().rev() {
            let lc = layers.pop().ok_or_else(|| Error::MissingCache("activation cache too short".into()))?;
            grad = match (layer, lc) {
                (LayerSpec::Conv { stride, pad, .. }, LayerCache::Conv { input, in_sel, out_sel }) => {
                    let lp = self.layer_params[id].expect("conv params");
                    match lp.bias {
                        Some(bi) => {
                            let [pw, pb] = self.store.params.get_disjoint_mut([lp.weight, bi]).expect("distinct params");
                            let w = ConvWeights { kernel: &pw.value, bias: Some(&pb.value) };
                            let grads = ConvGradsMut { kernel: &mut pw.grad, bias: Some(&mut pb.grad) };
                            ops::conv2d_backward(&input, w, &in_sel, &out_sel, *stride, *pad, &grad, grads)?
                        }
                        None => {
                            let pw = &mut self.store.params[lp.weight];
                            let w = ConvWeights { kernel: &pw.value, bias: None };
                            let grads = ConvGradsMut { kernel: &mut pw.grad, bias: None };
                            ops::conv2d_backward(&input, w, &in_sel, &out_sel, *stride, *pad, &grad, grads)?
                        }
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerCache::Bn { cache }) => {
                    bn_index -= 1;
                    let mut g = grad;
                    self.bank.slot_mut(bn_index, plan.subnet_id())?.backward_in_place(&cache, &mut g)?;
                    g
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => {
                    let mut g = grad;
                    ops::relu_backward_in_place(&input, &mut g)?;
                    g
                }
                (LayerSpec::MaxPool2, LayerCache::Pool { indices }) => ops::maxpool2_backward(&indices, &grad)?,
                (LayerSpec::GlobalAvg, LayerCache::GlobalAvg { shape }) => ops::global_avg_backward(&shape, &grad)?,
                (LayerSpec::Dense { .. }, LayerCache::Dense { input, in_sel }) => {
                    let lp = self.layer_params[id].expect("dense params");
                    let bi = lp.bias.expect("dense bias");
                    let [pw, pb] = self.store.params.get_disjoint_mut([lp.weight, bi]).expect("distinct params");
                    ops::dense_backward(&input, &pw.value, &pb.value, &in_sel, &grad, &mut pw.grad, &mut pb.grad)?
                }
                _ => return Err(Error::MissingCache(format!("cache entry does not match layer {id}"))),
            };
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.store.params.iter_mut().for_each(Param::zero_grad);
        self.bank.params_mut().for_each(Param::zero_grad);
    }

    /// Every trainable parameter: shared weights first, then BN slots.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.store.params.iter_mut().chain(self.bank.params_mut())
    }

    pub fn sgd_step(&mut self, lr: T, momentum: T, weight_decay: T) {
        sgd_momentum_step(self.params_mut(), lr, momentum, weight_decay);
    }

    /// SGD step over the shared weights and the BN slots of `subnets` only;
    /// every other slot, momentum buffer included, is left untouched.
    pub fn sgd_step_subnets(&mut self, subnets: &[usize], lr: T, momentum: T, weight_decay: T) {
        let params = self.store.params.iter_mut().chain(self.bank.subnet_params_mut(subnets));
        sgd_momentum_step(params, lr, momentum, weight_decay);
    }

    /// Shared / S-BN / stacking parameter totals; `stacking` is the stacking
    /// weight count when a stacking combiner is present.
    pub fn parameter_count(&self, stacking: Option<usize>) -> ParamBreakdown {
        let shared: usize = self.store.params.iter().map(|p| p.value.len()).sum();
        let bn_total: usize = self.bank.slots().map(|(_, _, s)| 2 * s.channels()).sum();
        let bn_baseline: usize = self
            .arch
            .layers()
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::BatchNorm { channels } => Some(2 * channels),
                _ => None,
            })
            .sum();
        let stacking = stacking.unwrap_or(0);
        ParamBreakdown {
            shared,
            bn_baseline,
            sbn_extra: bn_total.saturating_sub(bn_baseline),
            stacking,
            total: shared + bn_total + stacking,
        }
    }
}

/// One joint training step on a batch: forward and backward every plan in
/// order with its loss scaled by `loss_weight`, then a single SGD step over
/// the shared weights and the BN slots of those plans.
/// Returns the unscaled loss of each sub-network.
#[allow(clippy::too_many_arguments)]
pub fn joint_train_step<T: Scalar>(
    net: &mut SharedNetwork<T>,
    plans: &[SubNetworkPlan],
    x: &Tensor<T>,
    labels: &[usize],
    lr: T,
    momentum: T,
    weight_decay: T,
    loss_weight: T,
) -> Result<Vec<T>> {
    let mut losses = Vec::with_capacity(plans.len());
    for plan in plans {
        let logits = net.forward_subnet(plan, x, Mode::Train)?;
        let mut out = ops::softmax_cross_entropy(&logits, labels)?;
        out.grad_logits.data_mut().iter_mut().for_each(|g| *g *= loss_weight);
        net.backward_subnet(plan, &out.grad_logits)?;
        losses.push(out.loss);
    }
    let active: Vec<usize> = plans.iter().map(SubNetworkPlan::subnet_id).collect();
    net.sgd_step_subnets(&active, lr, momentum, weight_decay);
    Ok(losses)
}
