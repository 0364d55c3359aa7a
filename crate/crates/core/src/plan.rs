//! Per-layer channel selections that carve sub-networks out of the shared
//! network: random cut, random offset and shuffled channel subsets.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchSpec, LayerSpec};
use crate::error::{Error, Result};

/// Width ratio of each sub-network, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRatioList(Vec<f64>);

impl WidthRatioList {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Widths("at least one width ratio is required".into()));
        }
        if let Some(w) = ratios.iter().find(|w| !(w.is_finite() && **w > 0.0 && **w <= 1.0)) {
            return Err(Error::Widths(format!("ratio {w} outside (0, 1]")));
        }
        Ok(WidthRatioList(ratios))
    }

    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecombinationKind {
    RandomCut,
    RandomOffset,
    ShuffleChannel,
    Full,
}

impl RecombinationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecombinationKind::RandomCut => "rc",
            RecombinationKind::RandomOffset => "ro",
            RecombinationKind::ShuffleChannel => "sc",
            RecombinationKind::Full => "full",
        }
    }
}

impl fmt::Display for RecombinationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecombinationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rc" | "random_cut" => Ok(RecombinationKind::RandomCut),
            "ro" | "random_offset" => Ok(RecombinationKind::RandomOffset),
            "sc" | "shuffle" | "shuffle_channel" => Ok(RecombinationKind::ShuffleChannel),
            "full" | "identity" => Ok(RecombinationKind::Full),
            other => Err(Error::Selection(format!("unknown recombination kind {other:?}"))),
        }
    }
}

/// Ordered channel indices one sub-network uses in one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelSelection {
    layer_id: usize,
    indices: Vec<usize>,
}

impl ChannelSelection {
    /// Validates that `indices` are non-empty, distinct and below `channels`.
    pub fn new(layer_id: usize, indices: Vec<usize>, channels: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Selection(format!("layer {layer_id}: empty selection")));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if i >= channels {
                return Err(Error::SelectionRange { index: i, extent: channels });
            }
            if !seen.insert(i) {
                return Err(Error::Selection(format!("layer {layer_id}: duplicate channel {i}")));
            }
        }
        Ok(ChannelSelection { layer_id, indices })
    }

    pub fn identity(layer_id: usize, channels: usize) -> Self {
        ChannelSelection { layer_id, indices: (0..channels).collect() }
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self, channels: usize) -> bool {
        self.indices.len() == channels && self.indices.iter().enumerate().all(|(i, &c)| i == c)
    }
}

/// Channels a sub-network of width `w` keeps out of `c`: `round(w·c)`, ties up, at least 1.
pub fn kept_count(c: usize, w: f64) -> usize {
    ((w * c as f64 + 0.5).floor() as usize).clamp(1, c.max(1))
}

/// Random cut with an explicit cut start `t`: drops `[t, t + cut)` where `cut = c − kept`.
pub fn random_cut_at(layer_id: usize, c: usize, w: f64, t: usize) -> Result<ChannelSelection> {
    let cut = c - kept_count(c, w);
    if cut > 0 && t >= c - cut {
        return Err(Error::Selection(format!("cut start {t} outside [0, {})", c - cut)));
    }
    let indices = (0..c).filter(|&i| cut == 0 || i < t || i >= t + cut).collect();
    ChannelSelection::new(layer_id, indices, c)
}

/// Random offset with an explicit start `t`: keeps `[t, t + kept)`.
pub fn random_offset_at(layer_id: usize, c: usize, w: f64, t: usize) -> Result<ChannelSelection> {
    let n = kept_count(c, w);
    if t > c - n {
        return Err(Error::Selection(format!("offset {t} outside [0, {}]", c - n)));
    }
    ChannelSelection::new(layer_id, (t..t + n).collect(), c)
}

/// Drops one contiguous block; the block start is uniform over `[0, c − cut)`.
pub fn sample_random_cut(layer_id: usize, c: usize, w: f64, rng: &mut impl Rng) -> Result<ChannelSelection> {
    let cut = c - kept_count(c, w);
    let t = if cut == 0 { 0 } else { rng.random_range(0..c - cut) };
    random_cut_at(layer_id, c, w, t)
}

/// Keeps one contiguous run; the start is uniform over `[0, c − kept]`.
pub fn sample_random_offset(layer_id: usize, c: usize, w: f64, rng: &mut impl Rng) -> Result<ChannelSelection> {
    let n = kept_count(c, w);
    let t = rng.random_range(0..=c - n);
    random_offset_at(layer_id, c, w, t)
}

/// Uniform random subset of size `kept` in uniform random order.
pub fn sample_shuffle(layer_id: usize, c: usize, w: f64, rng: &mut impl Rng) -> Result<ChannelSelection> {
    let mut all: Vec<usize> = (0..c).collect();
    all.shuffle(rng);
    all.truncate(kept_count(c, w));
    ChannelSelection::new(layer_id, all, c)
}

pub fn sample_selection(kind: RecombinationKind, layer_id: usize, c: usize, w: f64, rng: &mut impl Rng) -> Result<ChannelSelection> {
    match kind {
        RecombinationKind::RandomCut => sample_random_cut(layer_id, c, w, rng),
        RecombinationKind::RandomOffset => sample_random_offset(layer_id, c, w, rng),
        RecombinationKind::ShuffleChannel => sample_shuffle(layer_id, c, w, rng),
        RecombinationKind::Full => {
            if kept_count(c, w) != c {
                return Err(Error::Selection(format!("full selection requires width 1.0, got {w}")));
            }
            Ok(ChannelSelection::identity(layer_id, c))
        }
    }
}

/// Independent generator for one (seed, sub-network, layer) triple.
pub fn selection_rng(seed: u64, subnet_id: usize, layer_id: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"ienet/channel-plan");
    hasher.update(seed.to_le_bytes());
    hasher.update((subnet_id as u64).to_le_bytes());
    hasher.update((layer_id as u64).to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// The frozen channel selections of one sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetworkPlan {
    subnet_id: usize,
    width: f64,
    kind: RecombinationKind,
    selections: Vec<ChannelSelection>,
}

impl SubNetworkPlan {
    /// Assembles a plan and checks it against `arch`.
    pub fn new(
        arch: &ArchSpec,
        subnet_id: usize,
        width: f64,
        kind: RecombinationKind,
        selections: Vec<ChannelSelection>,
    ) -> Result<Self> {
        let plan = SubNetworkPlan { subnet_id, width, kind, selections };
        plan.validate(arch)?;
        Ok(plan)
    }

    /// One identity selection per recombinable layer.
    pub fn identity(arch: &ArchSpec, subnet_id: usize) -> Self {
        let selections = arch
            .recombinable_layers()
            .into_iter()
            .map(|(id, c)| ChannelSelection::identity(id, c))
            .collect();
        SubNetworkPlan { subnet_id, width: 1.0, kind: RecombinationKind::Full, selections }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let layers = arch.recombinable_layers();
        if layers.len() != self.selections.len() {
            return Err(Error::PlanMismatch(format!(
                "plan has {} selections, arch has {} recombinable layers",
                self.selections.len(),
                layers.len()
            )));
        }
        if self.kind == RecombinationKind::Full && self.width != 1.0 {
            return Err(Error::PlanMismatch("full plans must have width 1.0".into()));
        }
        for (&(id, c), sel) in layers.iter().zip(&self.selections) {
            if sel.layer_id != id {
                return Err(Error::PlanMismatch(format!("selection for layer {} where {id} expected", sel.layer_id)));
            }
            if sel.len() != kept_count(c, self.width) {
                return Err(Error::PlanMismatch(format!(
                    "layer {id}: {} channels selected, width {} keeps {}",
                    sel.len(),
                    self.width,
                    kept_count(c, self.width)
                )));
            }
            ChannelSelection::new(id, sel.indices.clone(), c).map_err(|e| Error::PlanMismatch(e.to_string()))?;
        }
        Ok(())
    }

    pub fn subnet_id(&self) -> usize {
        self.subnet_id
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn kind(&self) -> RecombinationKind {
        self.kind
    }

    pub fn selections(&self) -> &[ChannelSelection] {
        &self.selections
    }

    pub fn selection(&self, layer_id: usize) -> Option<&ChannelSelection> {
        self.selections.iter().find(|s| s.layer_id == layer_id)
    }
}

/// One plan per width. Width-1.0 sub-networks get identity selections; every
/// other (sub-network, layer) pair is sampled from its own seed-derived stream.
pub fn build_plan(arch: &ArchSpec, widths: &WidthRatioList, kind: RecombinationKind, seed: u64) -> Result<Vec<SubNetworkPlan>> {
    let layers = arch.recombinable_layers();
    if let Some(&(id, _)) = layers.iter().find(|(_, c)| *c == 0) {
        return Err(Error::Arch(format!("layer {id} has zero channels")));
    }
    widths
        .ratios()
        .iter()
        .enumerate()
        .map(|(subnet_id, &w)| {
            if w == 1.0 {
                return Ok(SubNetworkPlan::identity(arch, subnet_id));
            }
            if kind == RecombinationKind::Full {
                return Err(Error::Widths(format!("kind full requires every width to be 1.0, got {w}")));
            }
            let selections = layers
                .iter()
                .map(|&(id, c)| sample_selection(kind, id, c, w, &mut selection_rng(seed, subnet_id, id)))
                .collect::<Result<Vec<_>>>()?;
            SubNetworkPlan::new(arch, subnet_id, w, kind, selections)
        })
        .collect()
}

/// Input-channel selection feeding each convolution under `plan`, keyed like
/// `plan.selections()`.
pub(crate) fn input_selections(arch: &ArchSpec, plan: &SubNetworkPlan) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..arch.input_shape()[0]).collect();
    let mut out = Vec::new();
    for (id, layer) in arch.layers().iter().enumerate() {
        if let LayerSpec::Conv { .. } = layer {
            out.push(current.clone());
            if let Some(sel) = plan.selection(id) {
                current = sel.indices.clone();
            }
        }
    }
    out
}

/// Jaccard overlap of the convolution kernel entries two plans use, each entry
/// weighted by its `k·k` spatial taps.
pub fn pairwise_overlap(a: &SubNetworkPlan, b: &SubNetworkPlan, arch: &ArchSpec) -> Result<f64> {
    a.validate(arch)?;
    b.validate(arch)?;
    let ins_a = input_selections(arch, a);
    let ins_b = input_selections(arch, b);
    let mut shared = 0.0;
    let mut union = 0.0;
    let kernels = arch.layers().iter().filter_map(|l| match *l {
        LayerSpec::Conv { kernel, .. } => Some(kernel),
        _ => None,
    });
    for (((sel_a, sel_b), (in_a, in_b)), k) in a.selections.iter().zip(&b.selections).zip(ins_a.iter().zip(&ins_b)).zip(kernels) {
        let common = |x: &[usize], y: &[usize]| {
            let ys: HashSet<_> = y.iter().collect();
            x.iter().filter(|i| ys.contains(i)).count() as f64
        };
        let taps = (k * k) as f64;
        let both = common(&sel_a.indices, &sel_b.indices) * common(in_a, in_b);
        let used_a = (sel_a.len() * in_a.len()) as f64;
        let used_b = (sel_b.len() * in_b.len()) as f64;
        shared += taps * both;
        union += taps * (used_a + used_b - both);
    }
    Ok(if union == 0.0 { 1.0 } else { shared / union })
}
