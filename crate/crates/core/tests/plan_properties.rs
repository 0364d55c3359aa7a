use ienet_core::plan::{
    pairwise_overlap, random_cut_at, random_offset_at, sample_random_cut, sample_random_offset, sample_shuffle,
    selection_rng,
};
use ienet_core::{build_plan, kept_count, ArchSpec, ChannelSelection, LayerSpec, RecombinationKind, SubNetworkPlan, WidthRatioList};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distinct_in_range(idx: &[usize], c: usize) -> bool {
    let mut seen = vec![false; c];
    idx.iter().all(|&i| i < c && !std::mem::replace(&mut seen[i], true))
}

/// Strictly ascending runs in `idx`.
fn ascending_runs(idx: &[usize]) -> usize {
    if idx.is_empty() {
        return 0;
    }
    1 + idx.windows(2).filter(|w| w[1] != w[0] + 1).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_cut_shape(c in 1usize..200, w in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = sample_random_cut(0, c, w, &mut rng).unwrap();
        let idx = sel.indices();
        prop_assert_eq!(idx.len(), kept_count(c, w));
        prop_assert!(distinct_in_range(idx, c));
        prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(ascending_runs(idx) <= 2);
        // the cut start never reaches the last block, so c-1 always survives
        prop_assert_eq!(*idx.last().unwrap(), c - 1);
    }

    #[test]
    fn random_offset_shape(c in 1usize..200, w in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = sample_random_offset(0, c, w, &mut rng).unwrap();
        let idx = sel.indices();
        prop_assert_eq!(idx.len(), kept_count(c, w));
        prop_assert!(distinct_in_range(idx, c));
        prop_assert_eq!(ascending_runs(idx), 1);
    }

    #[test]
    fn shuffle_shape(c in 1usize..200, w in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = sample_shuffle(0, c, w, &mut rng).unwrap();
        prop_assert_eq!(sel.len(), kept_count(c, w));
        prop_assert!(distinct_in_range(sel.indices(), c));
        let again = sample_shuffle(0, c, w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(sel, again);
    }

    #[test]
    fn full_width_is_identity(c in 1usize..200, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(sample_random_cut(0, c, 1.0, &mut rng).unwrap().is_identity(c));
        prop_assert!(sample_random_offset(0, c, 1.0, &mut rng).unwrap().is_identity(c));
        let mut perm = sample_shuffle(0, c, 1.0, &mut rng).unwrap().indices().to_vec();
        perm.sort_unstable();
        prop_assert_eq!(perm, (0..c).collect::<Vec<_>>());
    }

    #[test]
    fn kept_count_is_rounded_and_clamped(c in 1usize..10_000, w in 0.0001f64..=1.0) {
        let k = kept_count(c, w);
        prop_assert!(k >= 1 && k <= c);
        if k > 1 {
            prop_assert!((k as f64 - w * c as f64).abs() <= 0.5 + 1e-9);
        }
    }
}

#[test]
fn spec_examples() {
    assert_eq!(kept_count(64, 0.9), 58);
    assert_eq!(random_offset_at(0, 10, 0.8, 1).unwrap().indices(), (1..9).collect::<Vec<_>>());
    assert_eq!(random_offset_at(0, 16, 0.5, 5).unwrap().indices(), (5..13).collect::<Vec<_>>());
    assert!(random_offset_at(0, 10, 1.0, 1).is_err());
    assert_eq!(random_cut_at(0, 10, 1.0, 0).unwrap().indices(), (0..10).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sel = sample_shuffle(0, 5, 0.8, &mut rng).unwrap();
    assert_eq!(sel.len(), 4);
}

/// Frequencies of the start offset over `draws` samples stay within five
/// standard deviations of a uniform distribution over `0..slots`.
fn offsets_uniform(slots: usize, draws: usize, mut start: impl FnMut(&mut ChaCha8Rng) -> usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; slots];
    for _ in 0..draws {
        counts[start(&mut rng)] += 1;
    }
    let p = 1.0 / slots as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (t, &n) in counts.iter().enumerate() {
        assert!((n as f64 - mean).abs() <= 5.0 * sd, "offset {t}: {n} draws, expected {mean:.0} ± {:.0}", 5.0 * sd);
    }
}

#[test]
fn random_cut_offsets_are_uniform() {
    // c=10, w=0.8 drops 2 channels; the block may start anywhere in 0..8
    offsets_uniform(8, 10_000, |rng| {
        let idx = sample_random_cut(0, 10, 0.8, rng).unwrap().indices().to_vec();
        (0..10).find(|i| !idx.contains(i)).unwrap()
    });
}

#[test]
fn random_offset_offsets_are_uniform() {
    // keeps 8 of 10; the run may start at 0, 1 or 2
    offsets_uniform(3, 10_000, |rng| sample_random_offset(0, 10, 0.8, rng).unwrap().indices()[0]);
}

fn two_conv_arch(c: usize) -> ArchSpec {
    ArchSpec::new(
        "two-conv",
        [1, 4, 4],
        3,
        vec![
            LayerSpec::conv3x3(1, c),
            LayerSpec::BatchNorm { channels: c },
            LayerSpec::Relu,
            LayerSpec::conv3x3(c, c),
            LayerSpec::BatchNorm { channels: c },
            LayerSpec::Relu,
            LayerSpec::GlobalAvg,
            LayerSpec::Dense { in_features: c, out_features: 3 },
        ],
    )
    .unwrap()
}

fn plan_from(arch: &ArchSpec, id: usize, width: f64, kind: RecombinationKind, per_layer: &[Vec<usize>]) -> SubNetworkPlan {
    let sels = arch
        .recombinable_layers()
        .iter()
        .zip(per_layer)
        .map(|(&(layer, c), idx)| ChannelSelection::new(layer, idx.clone(), c).unwrap())
        .collect();
    SubNetworkPlan::new(arch, id, width, kind, sels).unwrap()
}

/// Counts kernel entries `(layer, out, in, tap)` used by both / either plan
/// by listing them.
fn brute_force_overlap(arch: &ArchSpec, a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    use std::collections::HashSet;
    let entries = |sels: &[Vec<usize>]| {
        let mut set = HashSet::new();
        let mut inputs: Vec<usize> = (0..arch.input_shape()[0]).collect();
        for (layer, out_sel) in sels.iter().enumerate() {
            for &o in out_sel {
                for &i in &inputs {
                    for tap in 0..9 {
                        set.insert((layer, o, i, tap));
                    }
                }
            }
            inputs = out_sel.clone();
        }
        set
    };
    let (ea, eb) = (entries(a), entries(b));
    ea.intersection(&eb).count() as f64 / ea.union(&eb).count() as f64
}

#[test]
fn overlap_matches_enumeration() {
    let arch = two_conv_arch(10);
    let a_sel = vec![(0..8).collect::<Vec<_>>(), (0..8).collect()];
    let b_sel = vec![(2..10).collect::<Vec<_>>(), (2..10).collect()];
    let a = plan_from(&arch, 0, 0.8, RecombinationKind::RandomOffset, &a_sel);
    let b = plan_from(&arch, 1, 0.8, RecombinationKind::RandomOffset, &b_sel);
    let got = pairwise_overlap(&a, &b, &arch).unwrap();
    // layer 0: 6 shared of 10 used; layer 1: 6·6 shared of 64 + 64 − 36
    assert!((got - 42.0 / 102.0).abs() < 1e-12);
    assert!((got - brute_force_overlap(&arch, &a_sel, &b_sel)).abs() < 1e-12);

    let same = pairwise_overlap(&a, &a, &arch).unwrap();
    assert_eq!(same, 1.0);

    let lo = vec![(0..5).collect::<Vec<_>>(), (0..5).collect()];
    let hi = vec![(5..10).collect::<Vec<_>>(), (5..10).collect()];
    let p = plan_from(&arch, 0, 0.5, RecombinationKind::RandomOffset, &lo);
    let q = plan_from(&arch, 1, 0.5, RecombinationKind::RandomOffset, &hi);
    assert_eq!(pairwise_overlap(&p, &q, &arch).unwrap(), 0.0);
}

#[test]
fn overlap_of_random_plans_matches_enumeration() {
    let arch = two_conv_arch(12);
    for kind in [RecombinationKind::RandomCut, RecombinationKind::RandomOffset, RecombinationKind::ShuffleChannel] {
        let widths = WidthRatioList::new(vec![0.6, 0.75, 0.9]).unwrap();
        let plans = build_plan(&arch, &widths, kind, 11).unwrap();
        let sels = |p: &SubNetworkPlan| p.selections().iter().map(|s| s.indices().to_vec()).collect::<Vec<_>>();
        for a in &plans {
            for b in &plans {
                let got = pairwise_overlap(a, b, &arch).unwrap();
                let want = brute_force_overlap(&arch, &sels(a), &sels(b));
                assert!((got - want).abs() < 1e-12, "{kind}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn typical_configuration_plans() {
    let arch = ArchSpec::ienet_mini([1, 28, 28], 10).unwrap();
    let widths = WidthRatioList::new(vec![0.9, 0.9, 0.9, 1.0]).unwrap();
    let plans = build_plan(&arch, &widths, RecombinationKind::RandomCut, 7).unwrap();
    assert_eq!(plans.len(), 4);
    assert_eq!(plans[3].kind(), RecombinationKind::Full);
    assert!(plans[3].selections().iter().zip(arch.recombinable_layers()).all(|(s, (_, c))| s.is_identity(c)));
    for plan in &plans[..3] {
        for (sel, (_, c)) in plan.selections().iter().zip(arch.recombinable_layers()) {
            assert_eq!(sel.len(), kept_count(c, 0.9));
        }
    }
    assert_eq!(plans, build_plan(&arch, &widths, RecombinationKind::RandomCut, 7).unwrap());
    assert_ne!(plans, build_plan(&arch, &widths, RecombinationKind::RandomCut, 8).unwrap());

    let ones = WidthRatioList::new(vec![1.0, 1.0]).unwrap();
    let id = build_plan(&arch, &ones, RecombinationKind::RandomCut, 7).unwrap();
    assert_eq!(id[0].selections(), id[1].selections());
    assert_eq!(pairwise_overlap(&id[0], &id[1], &arch).unwrap(), 1.0);
}

#[test]
fn adding_a_subnetwork_keeps_existing_plans() {
    let arch = ArchSpec::ienet_mini([1, 28, 28], 10).unwrap();
    let three = build_plan(&arch, &WidthRatioList::new(vec![0.9, 0.8, 0.7]).unwrap(), RecombinationKind::ShuffleChannel, 3).unwrap();
    let four = build_plan(&arch, &WidthRatioList::new(vec![0.9, 0.8, 0.7, 0.6]).unwrap(), RecombinationKind::ShuffleChannel, 3).unwrap();
    assert_eq!(&four[..3], &three[..]);
    // each layer draws from its own stream
    let a = sample_shuffle(0, 32, 0.9, &mut selection_rng(3, 0, 0)).unwrap();
    assert_eq!(a.indices(), three[0].selections()[0].indices());
}
