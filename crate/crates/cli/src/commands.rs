use std::fs;
use std::path::{Path, PathBuf};

use ienet_core::checkpoint::ModelState;
use ienet_core::ensemble::{evaluate_ensemble, Combiner};
use ienet_data::{ImageDataset, Normalization};

use crate::config::{parse_config, DatasetFormat};
use crate::error::{CliError, Result};
use crate::metrics::MetricsRecord;
use crate::report::{render_csv, render_text, summarize_files};
use crate::train::{eval_batches, load_raw, prepare_data, run_training, take_fraction, EvalSummary, TrainOutcome, EVAL_FILE};

pub fn cmd_train(
    config: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mut cfg = parse_config(config)?;
    if let Some(dir) = out {
        cfg.out_dir = dir.to_path_buf();
    }
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let data = prepare_data(&cfg)?;
    run_training(&cfg, &data, progress)
}

fn manifest<'a>(state: &'a ModelState, key: &str) -> Result<&'a str> {
    state
        .extra
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Usage(format!("checkpoint does not record {key:?}; pass --config")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| CliError::Usage(format!("checkpoint list value {v:?}"))))
        .collect()
}

/// The test split a checkpoint was evaluated on, from `config` when given,
/// from the checkpoint manifest otherwise.
fn test_set(state: &ModelState, config: Option<&Path>) -> Result<ImageDataset> {
    let (format, dir, fraction, seed) = match config {
        Some(path) => {
            let cfg = parse_config(path)?;
            (cfg.dataset, cfg.data_dir.clone(), cfg.test_fraction, cfg.split_seed())
        }
        None => {
            let format: DatasetFormat = manifest(state, "dataset")?.parse().map_err(CliError::Usage)?;
            let dir = PathBuf::from(manifest(state, "data_dir")?);
            let fraction = manifest(state, "test_fraction")?.parse().map_err(|_| CliError::Usage("test_fraction".into()))?;
            let seed = manifest(state, "split_seed")?.parse().map_err(|_| CliError::Usage("split_seed".into()))?;
            (format, dir, fraction, seed)
        }
    };
    let (_, test) = load_raw(format, &dir)?;
    take_fraction(test, fraction, seed.wrapping_add(1))
}

pub fn evaluate_state(state: &ModelState, test: &ImageDataset, batch_size: usize) -> Result<EvalSummary> {
    let norm = Normalization::new(parse_list(manifest(state, "norm_mean")?)?, parse_list(manifest(state, "norm_std")?)?)?;
    let arch = state.network.arch();
    if test.dims() != arch.input_shape() {
        return Err(CliError::Usage(format!(
            "dataset images {:?} do not fit the checkpoint architecture input {:?}",
            test.dims(),
            arch.input_shape()
        )));
    }
    let combiner = state.stacking.clone().map_or(Combiner::Averaging, Combiner::Stacking);
    let report = evaluate_ensemble(&state.network, &state.plans, &combiner, eval_batches(test, &norm, batch_size)?)?;
    Ok(EvalSummary::new(&state.network, &state.plans, &combiner, &report))
}

/// Evaluates a checkpoint; writes the JSON to `out` when given.
pub fn cmd_eval(checkpoint: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<EvalSummary> {
    let state = ModelState::load_any(checkpoint)?;
    let test = test_set(&state, config)?;
    let summary = evaluate_state(&state, &test, 256)?;
    if let Some(path) = out {
        let path = if path.is_dir() { path.join(EVAL_FILE) } else { path.to_path_buf() };
        fs::write(&path, summary.to_json()).map_err(CliError::io(path.display().to_string()))?;
    }
    Ok(summary)
}

/// Comparison table of runs; with `out`, also writes it as CSV.
pub fn cmd_report(metrics: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let runs = summarize_files(metrics)?;
    if let Some(path) = out {
        fs::write(path, render_csv(&runs)?).map_err(CliError::io(path.display().to_string()))?;
    }
    Ok(render_text(&runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ienet_core::{build_plan, ArchSpec, RecombinationKind, SharedNetwork, WidthRatioList};
    use std::collections::BTreeMap;

    fn state(extra: &[(&str, &str)]) -> ModelState {
        let arch = ArchSpec::ienet_mini([1, 8, 8], 3).unwrap();
        let plans = build_plan(&arch, &WidthRatioList::new(vec![1.0]).unwrap(), RecombinationKind::Full, 0).unwrap();
        let network = SharedNetwork::new(&arch, &plans, 0).unwrap();
        let extra: BTreeMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        ModelState { network, plans, stacking: None, extra }
    }

    #[test]
    fn list_values_parse() {
        assert_eq!(parse_list("0.5, 0.25").unwrap(), vec![0.5, 0.25]);
        assert!(parse_list("0.5,x").is_err());
    }

    #[test]
    fn missing_manifest_keys_ask_for_a_config() {
        let err = test_set(&state(&[]), None).unwrap_err();
        assert!(err.to_string().contains("--config"), "{err}");
    }

    #[test]
    fn evaluation_checks_image_shape() {
        let s = state(&[("norm_mean", "0.5"), ("norm_std", "0.25")]);
        let wrong = ImageDataset::new("w", vec![0; 32], vec![0, 1], [1, 4, 4], 3).unwrap();
        assert!(matches!(evaluate_state(&s, &wrong, 8), Err(CliError::Usage(_))));
        let right = ImageDataset::new("r", vec![9; 128], vec![0, 2], [1, 8, 8], 3).unwrap();
        let summary = evaluate_state(&s, &right, 8).unwrap();
        assert_eq!((summary.n, summary.total, summary.similarity), (1, 2, 1.0));
    }
}
