use ienet_core::ensemble::{
    argmax, average_combine, collect_outputs, evaluate_ensemble, evaluate_outputs, similarity, stacking_combine,
    train_stacking, Combiner, SoftmaxMatrix, StackingWeights, SubnetOutputs,
};
use ienet_core::{build_plan, ArchSpec, RecombinationKind, SharedNetwork, Tensor, WidthRatioList};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_softmax(n: usize, c: usize, rng: &mut impl Rng) -> SoftmaxMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0f64).exp()).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect();
    SoftmaxMatrix::new(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn uniform_stacking_is_averaging(n in 1usize..8, c in 1usize..20, seed: u64) {
        let o = random_softmax(n, c, &mut ChaCha8Rng::seed_from_u64(seed));
        let avg = average_combine(&o);
        let st = stacking_combine(&o, &StackingWeights::uniform(c, n)).unwrap();
        for (a, s) in avg.iter().zip(&st) {
            prop_assert!((a - s).abs() <= 1e-12);
        }
        prop_assert!((avg.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(avg.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn similarity_is_permutation_invariant(n in 1usize..6, m in 1usize..40, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut preds: Vec<Vec<usize>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..3)).collect()).collect();
        let base = similarity(&preds).unwrap();
        preds.reverse();
        prop_assert_eq!(similarity(&preds).unwrap(), base);
        let perm: Vec<usize> = (0..m).rev().collect();
        let shuffled: Vec<Vec<usize>> = preds.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect();
        prop_assert_eq!(similarity(&shuffled).unwrap(), base);
    }
}

#[test]
fn similarity_matches_column_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..50);
        let classes = rng.random_range(1..4);
        let preds: Vec<Vec<usize>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..classes)).collect()).collect();
        let mut k = 0;
        for j in 0..m {
            let mut all = true;
            for row in &preds {
                all &= row[j] == preds[0][j];
            }
            k += all as usize;
        }
        let r = similarity(&preds).unwrap();
        assert_eq!((r.agree, r.total), (k, m));
        assert_eq!(r.similarity, k as f64 / m as f64);
    }
    assert_eq!(similarity(&[vec![0, 1, 2], vec![1, 2, 0]]).unwrap().similarity, 0.0);
    assert!(similarity(&[vec![0, 1], vec![1]]).is_err());
}

#[test]
fn averaging_decisions_match_recomputed_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let o = random_softmax(4, 10, &mut rng);
        let mut mean = [0.0; 10];
        for n in 0..4 {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += o.get(n, c) / 4.0;
            }
        }
        let want = (0..10).fold(0, |best, c| if mean[c] > mean[best] { c } else { best });
        assert_eq!(argmax(&average_combine(&o)), want);
    }
}

/// Sub-network 0 always puts most mass on the true label; the rest are noise.
fn synthetic(m: usize, n: usize, c: usize, rng: &mut ChaCha8Rng) -> (Vec<SoftmaxMatrix>, Vec<usize>) {
    let mut outputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..m {
        let y = rng.random_range(0..c);
        let mut o = random_softmax(n, c, rng);
        let mut good = vec![0.1 / (c - 1) as f64; c];
        good[y] = 0.9;
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| o.row(i).to_vec()).collect();
        rows[0] = good;
        o = SoftmaxMatrix::new(&rows).unwrap();
        outputs.push(o);
        labels.push(y);
    }
    (outputs, labels)
}

#[test]
fn stacking_concentrates_on_the_reliable_subnetwork() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (outputs, labels) = synthetic(600, 4, 5, &mut rng);
    let w = train_stacking(&outputs, &labels, 20, 0.5, 32, 1).unwrap();
    assert_eq!(w.parameter_count(), 20);
    let good = w.column_mean(0);
    for n in 1..4 {
        assert!(good > w.column_mean(n), "column 0 mean {good} vs column {n} {}", w.column_mean(n));
    }
    let outs = SubnetOutputs { outputs, labels };
    let stacked = evaluate_outputs(&outs, &Combiner::Stacking(w)).unwrap().ensemble_acc;
    let averaged = evaluate_outputs(&outs, &Combiner::Averaging).unwrap().ensemble_acc;
    assert!(stacked >= averaged);
}

#[test]
fn stacking_training_leaves_the_network_untouched() {
    let arch = ArchSpec::ienet_mini([1, 8, 8], 10).unwrap();
    let plans = build_plan(&arch, &WidthRatioList::new(vec![0.8, 1.0]).unwrap(), RecombinationKind::RandomCut, 1).unwrap();
    let net = SharedNetwork::<f32>::new(&arch, &plans, 1).unwrap();
    let store = net.store().clone();
    let bank = net.bank().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batches: Vec<(Tensor<f32>, Vec<usize>)> = (0..3)
        .map(|_| {
            let x = Tensor::from_fn(&[5, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0));
            (x, (0..5).map(|_| rng.random_range(0..10)).collect())
        })
        .collect();
    let outs = collect_outputs(&net, &plans, batches.clone()).unwrap();
    assert_eq!(outs.outputs.len(), 15);
    let w = train_stacking(&outs.outputs, &outs.labels, 3, 0.1, 4, 0).unwrap();
    assert_eq!(net.store(), &store);
    assert_eq!(net.bank(), &bank);

    let direct = evaluate_ensemble(&net, &plans, &Combiner::Stacking(w.clone()), batches).unwrap();
    assert_eq!(direct, evaluate_outputs(&outs, &Combiner::Stacking(w)).unwrap());
    assert_eq!(direct.per_subnet_acc.len(), 2);
}

#[test]
fn identical_subnetworks_form_a_degenerate_ensemble() {
    let arch = ArchSpec::ienet_mini([1, 8, 8], 10).unwrap();
    let plans = build_plan(&arch, &WidthRatioList::new(vec![1.0, 1.0, 1.0]).unwrap(), RecombinationKind::RandomCut, 1).unwrap();
    let net = SharedNetwork::<f32>::new(&arch, &plans, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[32, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0));
    let y: Vec<usize> = (0..32).map(|_| rng.random_range(0..10)).collect();
    let r = evaluate_ensemble(&net, &plans, &Combiner::Averaging, [(x, y)]).unwrap();
    assert_eq!(r.similarity.similarity, 1.0);
    assert!(r.per_subnet_acc.iter().all(|&a| a == r.ensemble_acc));
}

#[test]
fn zero_epoch_stacking_behaves_like_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (outputs, labels) = synthetic(100, 3, 4, &mut rng);
    let w = train_stacking(&outputs, &labels, 0, 0.1, 8, 0).unwrap();
    assert_eq!(w.data(), StackingWeights::uniform(4, 3).data());
    for o in &outputs {
        assert_eq!(argmax(&Combiner::Stacking(w.clone()).combine(o).unwrap()), argmax(&average_combine(o)));
    }
    assert!(train_stacking(&[], &[], 1, 0.1, 8, 0).is_err());
}
