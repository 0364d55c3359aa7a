use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use ienet_core::checkpoint::ModelState;
use ienet_core::ensemble::{collect_outputs, evaluate_outputs, train_stacking, Combiner, EnsembleReport, StackingWeights, SubnetOutputs};
use ienet_core::optim::cosine_lr;
use ienet_core::plan::{build_plan, SubNetworkPlan};
use ienet_core::{joint_train_step, ArchSpec, ParamBreakdown, SharedNetwork, Tensor};
use ienet_data::augment::default_cutout_size;
use ienet_data::{
    channel_stats, deterministic_split, load_cifar10_bin, load_idx, AugmentPolicy, Batches, CifarSplit, ImageDataset,
    Normalization,
};
use serde::Serialize;

use crate::config::{CombinerKind, DatasetFormat, LrSchedule, TrainConfig};
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EVAL_FILE: &str = "eval.json";

/// Train and test sets after subsetting, with the normalization used for both.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub norm: Normalization,
}

pub fn load_raw(format: DatasetFormat, dir: &std::path::Path) -> Result<(ImageDataset, ImageDataset)> {
    Ok(match format {
        DatasetFormat::Idx => (
            load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?,
            load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?,
        ),
        DatasetFormat::Cifar10 => (load_cifar10_bin(dir, CifarSplit::Train)?, load_cifar10_bin(dir, CifarSplit::Test)?),
    })
}

pub fn dataset_name(format: DatasetFormat) -> &'static str {
    match format {
        DatasetFormat::Idx => "idx",
        DatasetFormat::Cifar10 => "cifar10",
    }
}

pub(crate) fn take_fraction(ds: ImageDataset, fraction: f64, seed: u64) -> Result<ImageDataset> {
    if fraction >= 1.0 {
        return Ok(ds);
    }
    Ok(deterministic_split(&ds, &[fraction], seed)?.remove(0))
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let (train, test) = load_raw(cfg.dataset, &cfg.data_dir)?;
    if train.dims() != test.dims() {
        return Err(CliError::Usage(format!("train images {:?} and test images {:?} differ", train.dims(), test.dims())));
    }
    let classes = train.class_count().max(test.class_count());
    let train = take_fraction(train, cfg.train_fraction, cfg.split_seed())?;
    let test = take_fraction(test, cfg.test_fraction, cfg.split_seed().wrapping_add(1))?;
    let norm = match (&cfg.norm_mean, &cfg.norm_std) {
        (Some(m), Some(s)) => Normalization::new(m.clone(), s.clone())?,
        _ => channel_stats(&train)?,
    };
    let widen = |ds: ImageDataset| {
        ImageDataset::new(ds.name().to_string(), ds.images().to_vec(), ds.labels().to_vec(), ds.dims(), classes)
    };
    Ok(PreparedData { train: widen(train)?, test: widen(test)?, norm })
}

pub fn augment_policy(cfg: &TrainConfig, dims: [usize; 3]) -> Option<AugmentPolicy> {
    if !cfg.augment {
        return None;
    }
    let [_, h, w] = dims;
    let cutout = cfg.cutout_size.unwrap_or_else(|| default_cutout_size(h.min(w)));
    Some(AugmentPolicy {
        pad: cfg.pad,
        crop: [h, w],
        hflip_prob: cfg.hflip_prob,
        cutout_size: cutout.max(1),
        pad_crop: cfg.pad > 0,
        hflip: cfg.hflip_prob > 0.0,
        cutout: cutout > 0,
    })
}

/// Evaluation summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub widths: Vec<f64>,
    pub kind: String,
    pub combiner: String,
    pub per_subnet_acc: Vec<f64>,
    pub ensemble_acc: f64,
    #[serde(rename = "S")]
    pub similarity: f64,
    #[serde(rename = "K")]
    pub agree: usize,
    #[serde(rename = "M")]
    pub total: usize,
    pub params: ParamBreakdown,
}

impl EvalSummary {
    pub fn new(net: &SharedNetwork<f32>, plans: &[SubNetworkPlan], combiner: &Combiner, r: &EnsembleReport) -> Self {
        EvalSummary {
            n: plans.len(),
            widths: plans.iter().map(|p| p.width()).collect(),
            kind: plans.first().map_or_else(String::new, |p| p.kind().to_string()),
            combiner: combiner.name().to_string(),
            per_subnet_acc: r.per_subnet_acc.clone(),
            ensemble_acc: r.ensemble_acc,
            similarity: r.similarity.similarity,
            agree: r.similarity.agree,
            total: r.similarity.total,
            params: net.parameter_count(combiner.parameter_count()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub eval: EvalSummary,
    pub state: ModelState,
    pub out_dir: PathBuf,
    pub wall_seconds: f64,
}

pub fn eval_batches(ds: &ImageDataset, norm: &Normalization, batch_size: usize) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    Ok(Batches::sequential(ds, norm, batch_size)?.collect::<std::result::Result<_, _>>()?)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Cosine => cosine_lr(cfg.lr, epoch, cfg.epochs),
        LrSchedule::Constant => cfg.lr,
    }
}

fn manifest_extra(cfg: &TrainConfig, norm: &Normalization, epoch: usize) -> BTreeMap<String, String> {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("norm_mean".to_string(), join(norm.mean())),
        ("norm_std".to_string(), join(norm.std())),
        ("combiner".to_string(), cfg.combiner.as_str().to_string()),
        ("dataset".to_string(), dataset_name(cfg.dataset).to_string()),
        ("data_dir".to_string(), cfg.data_dir.display().to_string()),
        ("test_fraction".to_string(), format!("{:?}", cfg.test_fraction)),
        ("split_seed".to_string(), cfg.split_seed().to_string()),
    ])
}

fn snapshot(net: &SharedNetwork<f32>, plans: &[SubNetworkPlan], stacking: Option<StackingWeights>, extra: BTreeMap<String, String>) -> Result<ModelState> {
    let network = SharedNetwork::from_parts(net.arch().clone(), net.store().clone(), net.bank().clone())?;
    Ok(ModelState { network, plans: plans.to_vec(), stacking, extra })
}

/// Joint training of every plan, optional stacking, per-epoch metrics and
/// checkpoints under `cfg.out_dir`. `progress` sees each record as it is written.
pub fn run_training(cfg: &TrainConfig, data: &PreparedData, progress: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(cfg.out_dir.display().to_string()))?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text()).map_err(CliError::io("config copy"))?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::new(
        fs::File::create(&metrics_path).map_err(CliError::io(metrics_path.display().to_string()))?,
    )?;

    let arch = ArchSpec::by_name(&cfg.arch, data.train.dims(), data.train.class_count())?;
    let plans = build_plan(&arch, &cfg.widths, cfg.kind, cfg.seed)?;
    let mut net = SharedNetwork::<f32>::new(&arch, &plans, cfg.seed)?;
    let policy = augment_policy(cfg, data.train.dims());
    let test = eval_batches(&data.test, &data.norm, cfg.eval_batch_size)?;
    let loss_weight = 1.0 / plans.len() as f32;
    let stacking_params = match cfg.combiner {
        CombinerKind::Stacking => Some(plans.len() * arch.classes()),
        CombinerKind::Averaging => None,
    };
    let params_total = net.parameter_count(stacking_params).total;

    let mut records = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        metrics.append(&r)?;
        progress(&r);
        records.push(r);
        Ok(())
    };
    let record = |epoch: usize, combiner: &Combiner, lr: f64, train_loss: Vec<f64>, r: &EnsembleReport| MetricsRecord {
        epoch,
        combiner: combiner.name().to_string(),
        lr,
        train_loss,
        test_acc: r.per_subnet_acc.clone(),
        ensemble_acc: r.ensemble_acc,
        similarity: r.similarity.similarity,
        wall_seconds: start.elapsed().as_secs_f64(),
        params_total,
    };

    let mut test_outputs = None;
    if cfg.epochs == 0 {
        let combiner = match cfg.combiner {
            CombinerKind::Stacking => Combiner::Stacking(StackingWeights::uniform(arch.classes(), plans.len())),
            CombinerKind::Averaging => Combiner::Averaging,
        };
        let outs = collect_outputs(&net, &plans, test.iter().cloned())?;
        let report = evaluate_outputs(&outs, &combiner)?;
        emit(record(0, &combiner, lr_at(cfg, 0), vec![f64::NAN; plans.len()], &report), &mut records)?;
        test_outputs = Some(outs);
    }

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut loss_sum = vec![0.0f64; plans.len()];
        let mut seen = 0usize;
        for batch in Batches::shuffled(&data.train, &data.norm, cfg.batch_size, epoch_seed(cfg.seed, epoch), policy.as_ref())? {
            let (x, y) = batch?;
            let losses = joint_train_step(
                &mut net,
                &plans,
                &x,
                &y,
                lr as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
                loss_weight,
            )?;
            for (s, l) in loss_sum.iter_mut().zip(&losses) {
                *s += *l as f64 * y.len() as f64;
            }
            seen += y.len();
        }
        let outs = collect_outputs(&net, &plans, test.iter().cloned())?;
        let report = evaluate_outputs(&outs, &Combiner::Averaging)?;
        test_outputs = Some(outs);
        let acc = report.ensemble_acc;
        let train_loss = loss_sum.iter().map(|s| s / seen.max(1) as f64).collect();
        emit(record(epoch + 1, &Combiner::Averaging, lr, train_loss, &report), &mut records)?;
        if cfg.save_checkpoints {
            let state = snapshot(&net, &plans, None, manifest_extra(cfg, &data.norm, epoch + 1))?;
            state.save(&cfg.out_dir.join(LATEST_CHECKPOINT))?;
            if acc > best_acc {
                state.save(&cfg.out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        best_acc = best_acc.max(acc);
    }

    let mut stacking = None;
    let mut combiner = Combiner::Averaging;
    if cfg.combiner == CombinerKind::Stacking {
        let weights = if cfg.epochs > 0 {
            let train_eval = Batches::sequential(&data.train, &data.norm, cfg.eval_batch_size)?;
            let outs: SubnetOutputs = collect_outputs(&net, &plans, train_eval.collect::<std::result::Result<Vec<_>, _>>()?)?;
            train_stacking(&outs.outputs, &outs.labels, cfg.stacking_epochs, cfg.stacking_lr, cfg.stacking_batch_size, cfg.seed)?
        } else {
            StackingWeights::uniform(arch.classes(), plans.len())
        };
        stacking = Some(weights.clone());
        combiner = Combiner::Stacking(weights);
        if cfg.epochs > 0 {
            let report = evaluate_outputs(test_outputs.as_ref().expect("evaluated"), &combiner)?;
            let last = records.last().expect("one record per epoch").clone();
            emit(record(cfg.epochs, &combiner, last.lr, last.train_loss, &report), &mut records)?;
        }
    }

    let report = evaluate_outputs(test_outputs.as_ref().expect("evaluated at least once"), &combiner)?;
    let eval = EvalSummary::new(&net, &plans, &combiner, &report);
    fs::write(cfg.out_dir.join(EVAL_FILE), eval.to_json()).map_err(CliError::io("evaluation output"))?;
    let state = snapshot(&net, &plans, stacking, manifest_extra(cfg, &data.norm, cfg.epochs))?;
    if cfg.save_checkpoints {
        state.save(&cfg.out_dir.join(LATEST_CHECKPOINT))?;
        if cfg.epochs == 0 {
            state.save(&cfg.out_dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome { records, eval, state, out_dir: cfg.out_dir.clone(), wall_seconds: start.elapsed().as_secs_f64() })
}
