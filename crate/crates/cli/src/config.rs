use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ienet_core::plan::{RecombinationKind, WidthRatioList};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `train-images-idx3-ubyte` and friends inside `data_dir`.
    Idx,
    /// `data_batch_{1..5}.bin` and `test_batch.bin` inside `data_dir`.
    Cifar10,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "idx" | "mnist" | "fashion-mnist" => Ok(DatasetFormat::Idx),
            "cifar10" | "cifar-10" => Ok(DatasetFormat::Cifar10),
            other => Err(format!("unknown dataset {other:?} (expected idx, mnist, fashion-mnist or cifar10)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerKind {
    Averaging,
    Stacking,
}

impl FromStr for CombinerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "averaging" | "avg" | "a" => Ok(CombinerKind::Averaging),
            "stacking" | "s" => Ok(CombinerKind::Stacking),
            other => Err(format!("unknown combiner {other:?} (expected averaging or stacking)")),
        }
    }
}

impl CombinerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinerKind::Averaging => "averaging",
            CombinerKind::Stacking => "stacking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(format!("unknown lr schedule {other:?} (expected cosine or constant)")),
        }
    }
}

/// Every experiment setting. Built by [`parse_config`] or directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetFormat,
    pub data_dir: PathBuf,
    pub arch: String,
    pub widths: WidthRatioList,
    pub kind: RecombinationKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the stratified train/test subsetting; the run seed when unset.
    pub split_seed: Option<u64>,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub combiner: CombinerKind,
    pub stacking_epochs: usize,
    pub stacking_lr: f64,
    pub stacking_batch_size: usize,
    pub augment: bool,
    pub pad: usize,
    pub hflip_prob: f64,
    /// Cutout side; derived from the image side when unset, `0` disables cutout.
    pub cutout_size: Option<usize>,
    pub norm_mean: Option<Vec<f64>>,
    pub norm_std: Option<Vec<f64>>,
    pub out_dir: PathBuf,
    pub save_checkpoints: bool,
}

pub struct KeyDoc {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

/// Every recognised key. Keys without a default are required.
pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "dataset", default: None, doc: "idx | mnist | fashion-mnist | cifar10" },
    KeyDoc { key: "data_dir", default: None, doc: "directory holding the dataset files" },
    KeyDoc { key: "widths", default: None, doc: "comma-separated width ratios, one per sub-network" },
    KeyDoc { key: "kind", default: None, doc: "rc | ro | sc | full" },
    KeyDoc { key: "epochs", default: None, doc: "joint training epochs (0 = evaluate at init)" },
    KeyDoc { key: "seed", default: None, doc: "seed for plans, initialization, batching and augmentation" },
    KeyDoc { key: "out_dir", default: None, doc: "directory for metrics, checkpoints and evaluation output" },
    KeyDoc { key: "n", default: Some("len(widths)"), doc: "sub-network count; must match the width list" },
    KeyDoc { key: "arch", default: Some("ienet-mini"), doc: "architecture id" },
    KeyDoc { key: "batch_size", default: Some("128"), doc: "training batch size" },
    KeyDoc { key: "eval_batch_size", default: Some("256"), doc: "evaluation batch size" },
    KeyDoc { key: "lr", default: Some("0.05"), doc: "initial learning rate" },
    KeyDoc { key: "lr_schedule", default: Some("cosine"), doc: "cosine (per epoch, to 0) | constant" },
    KeyDoc { key: "momentum", default: Some("0.9"), doc: "SGD momentum" },
    KeyDoc { key: "weight_decay", default: Some("3e-4"), doc: "L2 weight decay" },
    KeyDoc { key: "split_seed", default: Some("seed"), doc: "seed of the stratified subset selection" },
    KeyDoc { key: "train_fraction", default: Some("1.0"), doc: "stratified fraction of the training set used" },
    KeyDoc { key: "test_fraction", default: Some("1.0"), doc: "stratified fraction of the test set used" },
    KeyDoc { key: "combiner", default: Some("averaging"), doc: "averaging | stacking" },
    KeyDoc { key: "stacking_epochs", default: Some("5"), doc: "stacking training epochs" },
    KeyDoc { key: "stacking_lr", default: Some("0.1"), doc: "stacking learning rate" },
    KeyDoc { key: "stacking_batch_size", default: Some("128"), doc: "stacking minibatch size" },
    KeyDoc { key: "augment", default: Some("true"), doc: "pad-crop, flip and cutout on training batches" },
    KeyDoc { key: "pad", default: Some("4"), doc: "zero padding before the random crop" },
    KeyDoc { key: "hflip_prob", default: Some("0.5"), doc: "horizontal flip probability" },
    KeyDoc { key: "cutout_size", default: Some("auto"), doc: "cutout side (auto: 16 at 32 px, 8 at 28 px; 0 disables)" },
    KeyDoc { key: "norm_mean", default: Some("training set"), doc: "per-channel mean on the [0,1] scale" },
    KeyDoc { key: "norm_std", default: Some("training set"), doc: "per-channel standard deviation on the [0,1] scale" },
    KeyDoc { key: "save_checkpoints", default: Some("true"), doc: "write latest and best checkpoints at each epoch end" },
];

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|d| d.key == k) {
            return Err(CliError::Config(format!("line {}: unknown key {k:?}", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key {k:?}", no + 1)));
        }
    }
    Ok(map)
}

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}"))))
        .transpose()
}

fn list(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f64>>> {
    map.get(key)
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}"))))
                .collect()
        })
        .transpose()
}

fn flag(map: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match map.get(key).map(String::as_str) {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(v) => Err(CliError::Config(format!("{key} = {v:?}: expected true or false"))),
    }
}

impl TrainConfig {
    /// Builds a config from parsed key/values. Relative paths resolve
    /// against `base`.
    pub fn from_map(map: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let missing: Vec<&str> =
            KEYS.iter().filter(|d| d.default.is_none() && !map.contains_key(d.key)).map(|d| d.key).collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let req = |k: &str| map[k].clone();
        let widths = list(map, "widths")?.expect("required");
        let widths = WidthRatioList::new(widths).map_err(|e| CliError::Config(format!("widths: {e}")))?;
        if let Some(n) = value::<usize>(map, "n")? {
            if n != widths.len() {
                return Err(CliError::Config(format!("n = {n} but widths lists {} ratios", widths.len())));
            }
        }
        let kind: RecombinationKind = req("kind").parse().map_err(|e| CliError::Config(format!("kind: {e}")))?;
        let cutout_size = match map.get("cutout_size").map(String::as_str) {
            None | Some("auto") => None,
            Some(v) => Some(v.parse().map_err(|e| CliError::Config(format!("cutout_size = {v:?}: {e}")))?),
        };
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let cfg = TrainConfig {
            dataset: req("dataset").parse().map_err(CliError::Config)?,
            data_dir: resolve(req("data_dir")),
            arch: value(map, "arch")?.unwrap_or_else(|| "ienet-mini".to_string()),
            widths,
            kind,
            epochs: value(map, "epochs")?.expect("required"),
            batch_size: value(map, "batch_size")?.unwrap_or(128),
            eval_batch_size: value(map, "eval_batch_size")?.unwrap_or(256),
            lr: value(map, "lr")?.unwrap_or(0.05),
            lr_schedule: value::<String>(map, "lr_schedule")?
                .map_or(Ok(LrSchedule::Cosine), |s| s.parse().map_err(CliError::Config))?,
            momentum: value(map, "momentum")?.unwrap_or(0.9),
            weight_decay: value(map, "weight_decay")?.unwrap_or(3e-4),
            seed: value(map, "seed")?.expect("required"),
            split_seed: value(map, "split_seed")?,
            train_fraction: value(map, "train_fraction")?.unwrap_or(1.0),
            test_fraction: value(map, "test_fraction")?.unwrap_or(1.0),
            combiner: value::<String>(map, "combiner")?
                .map_or(Ok(CombinerKind::Averaging), |s| s.parse().map_err(CliError::Config))?,
            stacking_epochs: value(map, "stacking_epochs")?.unwrap_or(5),
            stacking_lr: value(map, "stacking_lr")?.unwrap_or(0.1),
            stacking_batch_size: value(map, "stacking_batch_size")?.unwrap_or(128),
            augment: flag(map, "augment", true)?,
            pad: value(map, "pad")?.unwrap_or(4),
            hflip_prob: value(map, "hflip_prob")?.unwrap_or(0.5),
            cutout_size,
            norm_mean: list(map, "norm_mean")?,
            norm_std: list(map, "norm_std")?,
            out_dir: resolve(req("out_dir")),
            save_checkpoints: flag(map, "save_checkpoints", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.stacking_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (k, v) in [("lr", self.lr), ("stacking_lr", self.stacking_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (k, v) in [("train_fraction", self.train_fraction), ("test_fraction", self.test_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{k} must be in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob));
        }
        if self.norm_mean.is_some() != self.norm_std.is_some() {
            return bad("norm_mean and norm_std must be given together".into());
        }
        if self.kind == RecombinationKind::Full && self.widths.ratios().iter().any(|&w| w != 1.0) {
            return bad("kind = full requires every width to be 1.0".into());
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn n(&self) -> usize {
        self.widths.len()
    }

    /// Flat key/value form, parseable by [`parse_config`].
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("dataset", match self.dataset {
            DatasetFormat::Idx => "idx".into(),
            DatasetFormat::Cifar10 => "cifar10".into(),
        });
        put("data_dir", self.data_dir.display().to_string());
        put("arch", self.arch.clone());
        put("widths", join(self.widths.ratios()));
        put("kind", self.kind.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("eval_batch_size", self.eval_batch_size.to_string());
        put("lr", self.lr.to_string());
        put("lr_schedule", match self.lr_schedule {
            LrSchedule::Cosine => "cosine".into(),
            LrSchedule::Constant => "constant".into(),
        });
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("seed", self.seed.to_string());
        if let Some(s) = self.split_seed {
            put("split_seed", s.to_string());
        }
        put("train_fraction", self.train_fraction.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("combiner", self.combiner.as_str().into());
        put("stacking_epochs", self.stacking_epochs.to_string());
        put("stacking_lr", self.stacking_lr.to_string());
        put("stacking_batch_size", self.stacking_batch_size.to_string());
        put("augment", self.augment.to_string());
        put("pad", self.pad.to_string());
        put("hflip_prob", self.hflip_prob.to_string());
        put("cutout_size", self.cutout_size.map_or("auto".into(), |c| c.to_string()));
        if let (Some(m), Some(sd)) = (&self.norm_mean, &self.norm_std) {
            put("norm_mean", join(m));
            put("norm_std", join(sd));
        }
        put("out_dir", self.out_dir.display().to_string());
        put("save_checkpoints", self.save_checkpoints.to_string());
        s
    }
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<TrainConfig> {
    TrainConfig::from_map(&parse_key_values(text)?, base)
}

/// Reads a config file; relative paths inside it resolve against the file's directory.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TYPICAL: &str = "
        dataset = fashion-mnist
        data_dir = data/fashion-mnist   # relative to the config
        widths = 0.9,0.9,0.9,1.0
        kind = rc
        combiner = stacking
        epochs = 10
        seed = 1
        out_dir = runs/a
    ";

    #[test]
    fn typical_configuration() {
        let c = parse_config_str(TYPICAL, Path::new("/base")).unwrap();
        assert_eq!(c.widths.ratios(), &[0.9, 0.9, 0.9, 1.0]);
        assert_eq!(c.kind, RecombinationKind::RandomCut);
        assert_eq!(c.combiner, CombinerKind::Stacking);
        assert_eq!(c.data_dir, PathBuf::from("/base/data/fashion-mnist"));
        assert_eq!((c.batch_size, c.lr, c.momentum, c.weight_decay), (128, 0.05, 0.9, 3e-4));
        assert_eq!((c.stacking_epochs, c.stacking_lr), (5, 0.1));
    }

    #[test]
    fn text_round_trip() {
        let c = parse_config_str(TYPICAL, Path::new("/base")).unwrap();
        assert_eq!(parse_config_str(&c.to_text(), Path::new("/elsewhere")).unwrap(), c);
    }

    #[test]
    fn empty_file_lists_required_keys() {
        let err = parse_config_str("", Path::new(".")).unwrap_err().to_string();
        for k in ["dataset", "data_dir", "widths", "kind", "epochs", "seed", "out_dir"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn width_count_must_match_n() {
        let text = format!("{TYPICAL}\nn = 3");
        assert!(parse_config_str(&text, Path::new(".")).unwrap_err().to_string().contains("n = 3"));
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert!(parse_config_str(&format!("{TYPICAL}\nlearning_rate = 1"), Path::new(".")).is_err());
        assert!(parse_config_str(&TYPICAL.replace("epochs = 10", "epochs = ten"), Path::new(".")).is_err());
        assert!(parse_config_str(&TYPICAL.replace("0.9,0.9,0.9,1.0", "0.9,1.5"), Path::new(".")).is_err());
        assert!(parse_config_str(&format!("{TYPICAL}\nseed = 2"), Path::new(".")).is_err());
        assert!(parse_config_str("widths", Path::new(".")).is_err());
    }
}
