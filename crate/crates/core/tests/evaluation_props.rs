use ctxzsl::evaluation::{
    class_accuracies, harmonic_mean, per_class_accuracy, per_instance_accuracy, topk_accuracy, EvalRecord,
};
use proptest::prelude::*;

const CLASSES: usize = 5;

fn record(id: usize) -> impl Strategy<Value = EvalRecord> {
    (0..CLASSES, Just(()).prop_perturb(|_, mut rng| {
        let mut order: Vec<usize> = (0..CLASSES).collect();
        for i in (1..CLASSES).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order
    }))
        .prop_map(move |(gt, order)| EvalRecord {
            region_id: format!("r{id}"),
            gt,
            ranked: order.iter().enumerate().map(|(r, &c)| (c, 1.0 - r as f64 / CLASSES as f64)).collect(),
        })
}

fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
    (1usize..40).prop_flat_map(|n| (0..n).map(record).collect::<Vec<_>>())
}

proptest! {
    #[test]
    fn metrics_ignore_record_order(recs in records(), seed in any::<u64>()) {
        let mut shuffled = recs.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let all: Vec<usize> = (0..CLASSES).collect();
        prop_assert_eq!(per_instance_accuracy(&recs, &all).unwrap(), per_instance_accuracy(&shuffled, &all).unwrap());
        prop_assert_eq!(per_class_accuracy(&recs, &all).unwrap(), per_class_accuracy(&shuffled, &all).unwrap());
        for k in 1..=CLASSES {
            prop_assert_eq!(topk_accuracy(&recs, k, &all).unwrap(), topk_accuracy(&shuffled, k, &all).unwrap());
        }
    }

    #[test]
    fn topk_grows_with_k(recs in records()) {
        let all: Vec<usize> = (0..CLASSES).collect();
        let mut prev = 0.0;
        for k in 1..=CLASSES + 2 {
            let a = topk_accuracy(&recs, k, &all).unwrap();
            prop_assert!(a >= prev);
            prev = a;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn balanced_classes_make_both_averages_equal(per in 1usize..6, hits in prop::collection::vec(0usize..6, CLASSES)) {
        let mut recs = Vec::new();
        for (c, &h) in hits.iter().enumerate() {
            for i in 0..per {
                let top = if i < h.min(per) { c } else { (c + 1) % CLASSES };
                recs.push(EvalRecord { region_id: format!("{c}-{i}"), gt: c, ranked: vec![(top, 1.0)] });
            }
        }
        let all: Vec<usize> = (0..CLASSES).collect();
        let a = per_instance_accuracy(&recs, &all).unwrap();
        let b = per_class_accuracy(&recs, &all).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert_eq!(class_accuracies(&recs, &all).unwrap().len(), CLASSES);
    }

    #[test]
    fn harmonic_mean_bounds(a in 0.0..100.0f64, b in 0.0..100.0f64) {
        let h = harmonic_mean(a, b);
        let tol = 1e-9 * (1.0 + a + b);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= 2.0 * a.min(b) + tol);
        prop_assert!(h <= (a * b).sqrt() + tol);
        prop_assert!((a * b).sqrt() <= (a + b) / 2.0 + tol);
        prop_assert!((h - harmonic_mean(b, a)).abs() <= tol);
    }
}
