use std::collections::BTreeMap;

use ienet_core::checkpoint::{Checkpoint, ModelState};
use ienet_core::ensemble::{collect_outputs, train_stacking, StackingWeights};
use ienet_core::{build_plan, joint_train_step, ArchSpec, Error, RecombinationKind, SharedNetwork, Tensor, WidthRatioList};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_state(kind: RecombinationKind, stacking: bool) -> ModelState {
    let arch = ArchSpec::ienet_mini([1, 8, 8], 10).unwrap();
    let widths = WidthRatioList::new(vec![0.9, 0.75, 1.0]).unwrap();
    let plans = build_plan(&arch, &widths, kind, 21).unwrap();
    let mut net = SharedNetwork::<f32>::new(&arch, &plans, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batches = Vec::new();
    for _ in 0..4 {
        let x = Tensor::from_fn(&[8, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0));
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..10)).collect();
        joint_train_step(&mut net, &plans, &x, &y, 0.05, 0.9, 3e-4, 1.0 / 3.0).unwrap();
        batches.push((x, y));
    }
    let stacking = stacking.then(|| {
        let outs = collect_outputs(&net, &plans, batches).unwrap();
        train_stacking(&outs.outputs, &outs.labels, 2, 0.1, 8, 0).unwrap()
    });
    let mut extra = BTreeMap::new();
    extra.insert("seed".to_string(), "21".to_string());
    extra.insert("epoch".to_string(), "4".to_string());
    ModelState { network: net, plans, stacking, extra }
}

fn eval_all(state: &ModelState, x: &Tensor<f32>) -> Vec<Vec<u32>> {
    state
        .plans
        .iter()
        .map(|p| state.network.forward_eval(p, x).unwrap().data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn save_load_reproduces_state_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = Tensor::from_fn(&[100, 1, 8, 8], |_| rng.random_range(-2.0f32..2.0));
    for (kind, stacking) in [(RecombinationKind::RandomCut, true), (RecombinationKind::ShuffleChannel, false)] {
        let state = trained_state(kind, stacking);
        let path = dir.path().join(format!("{kind}.ckpt"));
        state.save(&path).unwrap();
        let loaded = ModelState::load(&path, state.network.arch()).unwrap();
        assert_eq!(loaded.network.store(), state.network.store());
        assert_eq!(loaded.network.bank(), state.network.bank());
        assert_eq!(loaded.plans, state.plans);
        assert_eq!(loaded.stacking.as_ref().map(StackingWeights::data), state.stacking.as_ref().map(StackingWeights::data));
        assert_eq!(loaded.extra.get("epoch").map(String::as_str), Some("4"));
        assert_eq!(eval_all(&loaded, &x), eval_all(&state, &x));

        let any = ModelState::load_any(&path).unwrap();
        assert_eq!(eval_all(&any, &x), eval_all(&state, &x));

        // saving the loaded state again yields the same bytes
        let again = dir.path().join("again.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn load_errors_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let state = trained_state(RecombinationKind::RandomOffset, false);
    let path = dir.path().join("model.ckpt");
    state.save(&path).unwrap();

    let other = ArchSpec::ienet_mini([1, 8, 8], 7).unwrap();
    assert!(matches!(ModelState::load(&path, &other), Err(Error::ArchHash { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(ModelState::load_any(&bad).is_err());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Checkpoint::load(&bad).is_err());
    assert!(ModelState::load_any(&dir.path().join("missing.ckpt")).is_err());
}
