//! Little-endian checkpoint container.
//!
//! Layout: the 8-byte magic `IENETCK1`; a `u64` length and a UTF-8 manifest of
//! `key=value` lines; a `u64` array count; then per array a `u32`-prefixed
//! name, a dtype tag byte (0 = f32, 1 = f64, 2 = i64), a `u32` rank, `rank`
//! `u64` extents and the raw little-endian values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::arch::ArchSpec;
use crate::bn::{BnSlot, SwitchableBnBank};
use crate::ensemble::StackingWeights;
use crate::error::{Error, Result};
use crate::network::{ParameterStore, SharedNetwork};
use crate::optim::Param;
use crate::plan::{ChannelSelection, RecombinationKind, SubNetworkPlan};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"IENETCK1";
pub const FORMAT_VERSION: &str = "1";
const TAG_I64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

fn decode<T>(raw: &[u8], size: usize, f: impl Fn(&[u8]) -> T) -> Vec<T> {
    raw.chunks_exact(size).map(f).collect()
}

impl Checkpoint {
    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = t.data().iter().map(|v| v.as_f64());
        let data = match T::TAG {
            0 => ArrayData::F32(data.map(|v| v as f32).collect()),
            _ => ArrayData::F64(data.collect()),
        };
        self.arrays.push(NamedArray { name: name.into(), shape: t.shape().to_vec(), data });
    }

    pub fn push_i64(&mut self, name: impl Into<String>, values: Vec<i64>) {
        let shape = vec![values.len()];
        self.arrays.push(NamedArray { name: name.into(), shape, data: ArrayData::I64(values) });
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self.array(name)?;
        let values: Vec<T> = match (&a.data, T::TAG) {
            (ArrayData::F32(v), 0) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (ArrayData::F64(v), 1) => v.iter().map(|&x| T::from_f64(x)).collect(),
            _ => return Err(Error::Checkpoint(format!("array {name:?} has an unexpected dtype"))),
        };
        Tensor::new(a.shape.clone(), values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.array(name)?.data {
            ArrayData::I64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("array {name:?} is not i64"))),
        }
    }

    pub fn manifest_value(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {key:?}")))
    }

    /// Architecture named by the manifest (`arch`, `input`, `classes`).
    pub fn arch(&self) -> Result<ArchSpec> {
        let dims: Vec<usize> = split(self.manifest_value("input")?).map(|v| parse(v, "input")).collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Checkpoint("manifest input must list three extents".into()))?;
        let classes = parse(self.manifest_value("classes")?, "classes")?;
        ArchSpec::by_name(self.manifest_value("arch")?, input, classes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry {k:?} is not a single key=value line")));
            }
            manifest.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {:?} shape does not match its data", a.name)));
            }
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            let tag = match a.data {
                ArrayData::F32(_) => f32::TAG,
                ArrayData::F64(_) => f64::TAG,
                ArrayData::I64(_) => TAG_I64,
            };
            out.push(tag);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        match manifest.get("format_version") {
            Some(v) if v == FORMAT_VERSION => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "format version {:?}, expected {FORMAT_VERSION}",
                    other.map(String::as_str).unwrap_or("<missing>")
                )))
            }
        }
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("array extent overflow".into()))?;
            let data = match tag {
                0 => ArrayData::F32(decode(r.take(n.saturating_mul(4))?, 4, f32::read_le)),
                1 => ArrayData::F64(decode(r.take(n.saturating_mul(8))?, 8, f64::read_le)),
                TAG_I64 => ArrayData::I64(decode(r.take(n.saturating_mul(8))?, 8, |b| i64::from_le_bytes(b.try_into().expect("8 bytes")))),
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { manifest, arrays })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Everything needed to resume or evaluate a run.
pub struct ModelState {
    pub network: SharedNetwork<f32>,
    pub plans: Vec<SubNetworkPlan>,
    pub stacking: Option<StackingWeights>,
    /// Caller-defined manifest entries (seed, epoch, normalization, ...).
    pub extra: BTreeMap<String, String>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn push_param(ck: &mut Checkpoint, prefix: &str, p: &Param<f32>) {
    ck.push_tensor(prefix, &p.value);
    ck.push_tensor(format!("{prefix}.velocity"), &p.velocity);
}

fn read_param(ck: &Checkpoint, prefix: &str) -> Result<Param<f32>> {
    let mut p = Param::new(ck.tensor(prefix)?);
    p.velocity = ck.tensor(&format!("{prefix}.velocity"))?;
    if p.velocity.shape() != p.value.shape() {
        return Err(Error::Checkpoint(format!("{prefix}: velocity shape")));
    }
    Ok(p)
}

impl ModelState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        for (k, v) in &self.extra {
            ck.manifest.insert(k.clone(), v.clone());
        }
        let arch = self.network.arch();
        let m = &mut ck.manifest;
        m.insert("format_version".into(), FORMAT_VERSION.into());
        m.insert("arch".into(), arch.name().into());
        m.insert("arch_hash".into(), arch.hash());
        m.insert("input".into(), join(arch.input_shape()));
        m.insert("classes".into(), arch.classes().to_string());
        m.insert("n".into(), self.plans.len().to_string());
        m.insert("widths".into(), join(self.plans.iter().map(|p| p.width())));
        m.insert("kinds".into(), join(self.plans.iter().map(|p| p.kind())));
        m.insert("stacking".into(), self.stacking.is_some().to_string());

        for (name, p) in self.network.store().iter() {
            push_param(&mut ck, &format!("store.{name}"), p);
        }
        for (layer, subnet, slot) in self.network.bank().slots() {
            let prefix = format!("bn.{layer}.{subnet}");
            push_param(&mut ck, &format!("{prefix}.scale"), &slot.scale);
            push_param(&mut ck, &format!("{prefix}.shift"), &slot.shift);
            let stat = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec());
            ck.push_tensor(format!("{prefix}.running_mean"), &stat(&slot.running_mean)?);
            ck.push_tensor(format!("{prefix}.running_var"), &stat(&slot.running_var)?);
        }
        for plan in &self.plans {
            for sel in plan.selections() {
                let values = sel.indices().iter().map(|&i| i as i64).collect();
                ck.push_i64(format!("plan.{}.layer{}", plan.subnet_id(), sel.layer_id()), values);
            }
        }
        if let Some(w) = &self.stacking {
            let t = Tensor::new(vec![w.classes(), w.subnets()], w.data().to_vec())?;
            ck.push_tensor("stacking.weights", &t);
        }
        Ok(ck)
    }

    /// Rebuilds the state, refusing checkpoints written for another architecture.
    pub fn from_checkpoint(ck: &Checkpoint, arch: &ArchSpec) -> Result<Self> {
        let found = ck.manifest_value("arch_hash")?;
        if found != arch.hash() {
            return Err(Error::ArchHash { expected: arch.hash(), found: found.to_string() });
        }
        let n: usize = parse(ck.manifest_value("n")?, "n")?;
        let widths: Vec<f64> = split(ck.manifest_value("widths")?).map(|w| parse(w, "widths")).collect::<Result<_>>()?;
        let kinds: Vec<RecombinationKind> = split(ck.manifest_value("kinds")?).map(str::parse).collect::<Result<_>>()?;
        if widths.len() != n || kinds.len() != n {
            return Err(Error::Checkpoint("manifest widths/kinds do not match n".into()));
        }

        let mut plans = Vec::with_capacity(n);
        for (subnet, (&w, &kind)) in widths.iter().zip(&kinds).enumerate() {
            let selections = arch
                .recombinable_layers()
                .into_iter()
                .map(|(id, c)| {
                    let idx = ck.i64s(&format!("plan.{subnet}.layer{id}"))?;
                    let idx = idx
                        .iter()
                        .map(|&i| usize::try_from(i).map_err(|_| Error::Checkpoint("negative channel index".into())))
                        .collect::<Result<Vec<_>>>()?;
                    ChannelSelection::new(id, idx, c)
                })
                .collect::<Result<Vec<_>>>()?;
            plans.push(SubNetworkPlan::new(arch, subnet, w, kind, selections)?);
        }

        let mut entries = Vec::new();
        for a in &ck.arrays {
            if let Some(name) = a.name.strip_prefix("store.") {
                if !name.ends_with(".velocity") {
                    entries.push((name.to_string(), read_param(ck, &a.name)?));
                }
            }
        }
        let store = ParameterStore::from_entries(entries)?;

        let bn_layers = arch.batchnorm_layers().len();
        let mut slots = Vec::with_capacity(bn_layers);
        for layer in 0..bn_layers {
            let mut row = Vec::with_capacity(n);
            for subnet in 0..n {
                let prefix = format!("bn.{layer}.{subnet}");
                let scale = read_param(ck, &format!("{prefix}.scale"))?;
                let shift = read_param(ck, &format!("{prefix}.shift"))?;
                let running_mean = ck.tensor::<f32>(&format!("{prefix}.running_mean"))?.into_data();
                let running_var = ck.tensor::<f32>(&format!("{prefix}.running_var"))?.into_data();
                let c = scale.value.len();
                if shift.value.len() != c || running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Checkpoint(format!("{prefix}: slot arrays disagree in size")));
                }
                row.push(BnSlot { scale, shift, running_mean, running_var });
            }
            slots.push(row);
        }
        let network = SharedNetwork::from_parts(arch.clone(), store, SwitchableBnBank::from_slots(slots)?)?;
        for plan in &plans {
            network.check_bn_sizes(plan)?;
        }

        let stacking = if ck.manifest_value("stacking")? == "true" {
            let t = ck.tensor::<f64>("stacking.weights")?;
            let [c, s] = t.shape()[..] else {
                return Err(Error::Checkpoint("stacking weights must be rank 2".into()));
            };
            Some(StackingWeights::new(c, s, t.into_data())?)
        } else {
            None
        };

        const CORE_KEYS: [&str; 9] = ["format_version", "arch", "arch_hash", "input", "classes", "n", "widths", "kinds", "stacking"];
        let extra = ck
            .manifest
            .iter()
            .filter(|(k, _)| !CORE_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(ModelState { network, plans, stacking, extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, arch: &ArchSpec) -> Result<Self> {
        ModelState::from_checkpoint(&Checkpoint::load(path)?, arch)
    }

    /// Loads a checkpoint whose architecture is rebuilt from its own manifest.
    pub fn load_any(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ModelState::from_checkpoint(&ck, &ck.arch()?)
    }
}

fn split(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty())
}

fn parse<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Checkpoint(format!("manifest {key}: cannot parse {s:?}")))
}
