use std::collections::HashSet;

use fsl_core::data::{make_split, sample_episode, EpisodeSpec, LabeledDataset, LabeledUnlabeledPartition, Phase};
use fsl_core::methods::proto::{compute_prototypes, refine_masked, refine_soft_kmeans, refine_with_distractor};
use fsl_core::rng::rng_from;
use fsl_core::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

/// A dataset of `classes × per_class` one-pixel images.
fn counting_dataset(classes: usize, per_class: usize) -> LabeledDataset<f32> {
    let n = classes * per_class;
    LabeledDataset::new(
        [1, 1, 1],
        (0..n).map(|i| i as f32).collect(),
        (0..n).map(|i| i % classes).collect(),
        (0..classes).map(|c| format!("c{c}")).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v).unwrap();
        let out = g.value(s);
        for r in 0..x.shape()[0] {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_ignore_support_order(
        ways in 1usize..5,
        shots in 1usize..4,
        dim in 1usize..5,
        seed in any::<u64>(),
    ) {
        let n = ways * shots;
        let mut rng = rng_from(seed, 0);
        let x = fsl_core::nn::uniform::<f64, _>(&[n, dim], 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % ways).collect();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let xp = x.select(&order);
        let lp: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

        let mut g = Graph::new();
        let a = g.constant(x);
        let pa = compute_prototypes(&mut g, a, &labels, ways).unwrap();
        let b = g.constant(xp);
        let pb = compute_prototypes(&mut g, b, &lp, ways).unwrap();
        prop_assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn refinements_reduce_to_prototypes_without_unlabeled_data(
        ways in 1usize..4,
        shots in 1usize..3,
        dim in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n = ways * shots;
        let mut rng = rng_from(seed, 1);
        let x = fsl_core::nn::uniform::<f64, _>(&[n, dim], 2.0, &mut rng);
        let unl = fsl_core::nn::uniform::<f64, _>(&[3, dim], 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % ways).collect();
        let mut g = Graph::new();
        let s = g.constant(x);
        let protos = compute_prototypes(&mut g, s, &labels, ways).unwrap();
        let p = g.value(protos).clone();

        let empty = g.constant(Tensor::zeros(&[0, dim]));
        let skm = refine_soft_kmeans(&mut g, s, &labels, ways, empty, 3).unwrap();
        prop_assert_eq!(g.value(skm), &p);

        let q = g.constant(Tensor::new(&[1], vec![1.5]).unwrap());
        let dis = refine_with_distractor(&mut g, s, &labels, ways, empty, q, 2).unwrap();
        let head = g.narrow(dis, 0, 0, ways).unwrap();
        prop_assert_eq!(g.value(head), &p);
        let tail = g.narrow(dis, 0, ways, 1).unwrap();
        prop_assert!(g.value(tail).data().iter().all(|&v| v == 0.0));

        // All-zero masks switch off every unlabeled contribution.
        let u = g.constant(unl);
        let zero = g.constant(Tensor::zeros(&[3, ways]));
        let masked = refine_masked(&mut g, s, &labels, ways, u, zero).unwrap();
        prop_assert!(g.value(masked).max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn splits_are_disjoint_and_sized(
        train in 1usize..6,
        val in 1usize..4,
        test in 1usize..4,
        extra in 0usize..4,
        seed in any::<u64>(),
    ) {
        let ds = counting_dataset(train + val + test + extra, 2);
        let s = make_split(&ds, train, val, test, seed, 1).unwrap();
        prop_assert!(s.is_disjoint());
        prop_assert_eq!(s.classes(Phase::Train).len(), train);
        prop_assert_eq!(s.classes(Phase::Val).len(), val);
        prop_assert_eq!(s.classes(Phase::Test).len(), test);
        prop_assert_eq!(make_split(&ds, train, val, test, seed, 1).unwrap(), s);
    }

    #[test]
    fn partitions_respect_the_fraction(fraction in 0.05f64..1.0, per_class in 2usize..30, seed in any::<u64>()) {
        let ds = counting_dataset(4, per_class);
        let p = LabeledUnlabeledPartition::new(&ds, fraction, seed).unwrap();
        for c in 0..4 {
            let l = p.labeled(c).len();
            prop_assert_eq!(l + p.unlabeled(c).len(), per_class);
            let want = (fraction * per_class as f64).round().clamp(1.0, per_class as f64);
            prop_assert_eq!(l as f64, want);
            let all: HashSet<usize> = p.labeled(c).iter().chain(p.unlabeled(c)).copied().collect();
            prop_assert_eq!(all.len(), per_class);
        }
    }

    #[test]
    fn episodes_are_valid(
        shots in 1usize..4,
        ways in 1usize..5,
        targets in 1usize..4,
        unlabeled in 0usize..3,
        distractors in 0usize..3,
        seed in any::<u64>(),
    ) {
        let distractors = if unlabeled == 0 { 0 } else { distractors };
        let spec = EpisodeSpec { shots, ways, targets, unlabeled, distractors };
        let classes = ways + distractors + 2;
        let ds = counting_dataset(classes, 20);
        let partition = LabeledUnlabeledPartition::new(&ds, 0.5, seed).unwrap();
        let pool: Vec<usize> = (0..classes).collect();
        let ep = sample_episode(&partition, &pool, &spec, &mut rng_from(seed, 7)).unwrap();

        prop_assert_eq!(ep.classes.len(), ways);
        prop_assert_eq!(ep.distractor_classes.len(), distractors);
        let chosen: HashSet<usize> = ep.classes.iter().chain(&ep.distractor_classes).copied().collect();
        prop_assert_eq!(chosen.len(), ways + distractors);

        prop_assert_eq!(ep.support.len(), shots * ways);
        prop_assert_eq!(ep.target.len(), targets * ways);
        prop_assert_eq!(ep.unlabeled.len(), unlabeled * (ways + distractors));
        for label in 0..ways {
            prop_assert_eq!(ep.support.iter().filter(|(_, l)| *l == label).count(), shots);
            prop_assert_eq!(ep.target.iter().filter(|(_, l)| *l == label).count(), targets);
        }
        for &(i, l) in ep.support.iter().chain(&ep.target) {
            prop_assert_eq!(ds.labels()[i], ep.classes[l]);
            prop_assert!(partition.labeled(ds.labels()[i]).contains(&i));
        }
        for &(i, l) in &ep.unlabeled {
            let class = ds.labels()[i];
            prop_assert!(partition.unlabeled(class).contains(&i));
            match l {
                Some(l) => prop_assert_eq!(ep.classes[l], class),
                None => prop_assert!(ep.distractor_classes.contains(&class)),
            }
        }
        let s: HashSet<usize> = ep.support.iter().map(|p| p.0).collect();
        let t: HashSet<usize> = ep.target.iter().map(|p| p.0).collect();
        let u: HashSet<usize> = ep.unlabeled.iter().map(|p| p.0).collect();
        prop_assert!(s.is_disjoint(&t) && s.is_disjoint(&u) && t.is_disjoint(&u));
        prop_assert_eq!(s.len() + t.len() + u.len(), ep.support.len() + ep.target.len() + ep.unlabeled.len());

        let again = sample_episode(&partition, &pool, &spec, &mut rng_from(seed, 7)).unwrap();
        prop_assert_eq!(again, ep);
    }
}

#[test]
fn different_seeds_give_different_splits() {
    let ds = counting_dataset(18, 2);
    let splits: HashSet<Vec<usize>> = (0..20).map(|s| make_split(&ds, 8, 5, 5, s, 1).unwrap().train).collect();
    assert!(splits.len() > 15, "only {} distinct splits", splits.len());
}
