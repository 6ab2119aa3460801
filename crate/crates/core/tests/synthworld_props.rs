use ctxzsl::scene::{read_scenes, write_scenes};
use ctxzsl::synthworld::{gen_world, into_scenes, SceneConfig, WorldConfig};
use ctxzsl::Exec;
use proptest::prelude::*;

fn small(seed: u64) -> WorldConfig {
    WorldConfig {
        n_classes: 14,
        n_seen: 10,
        feature_dim: 16,
        embed_dim: 16,
        n_predicates: 4,
        edge_density: 0.05,
        confusable_pairs: vec![(10, 0), (11, 1), (12, 2)],
        n_ancestors: 3,
        seed,
        ..WorldConfig::default()
    }
}

fn scenes(n: usize, seed: u64) -> SceneConfig {
    SceneConfig { n_scenes: n, min_objects: 2, max_objects: 5, include_unseen: true, seed }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_reproducible(seed in any::<u64>(), scene_seed in any::<u64>()) {
        let a = gen_world(&small(seed)).unwrap();
        let b = gen_world(&small(seed)).unwrap();
        prop_assert_eq!(&a.triples, &b.triples);
        prop_assert_eq!(&a.graph, &b.graph);
        let sa = into_scenes(a.gen_scenes(&scenes(20, scene_seed), Exec::Parallel).unwrap());
        let sb = into_scenes(b.gen_scenes(&scenes(20, scene_seed), Exec::Sequential).unwrap());
        let ta = write_scenes(&sa, &a.labels).unwrap();
        prop_assert_eq!(&ta, &write_scenes(&sb, &b.labels).unwrap());
        prop_assert_eq!(read_scenes(&ta, &a.labels).unwrap(), sa);
    }

    #[test]
    fn confusable_partners_have_distinct_neighborhoods(seed in any::<u64>()) {
        let w = gen_world(&small(seed)).unwrap();
        for &(u, s) in &w.config.confusable_pairs {
            let hood = |c: usize| -> Vec<(usize, usize, bool)> {
                let mut v: Vec<_> = w
                    .graph
                    .edges()
                    .filter_map(|(a, p, b)| {
                        if a == c { Some((p, b, true)) } else if b == c { Some((p, a, false)) } else { None }
                    })
                    .collect();
                v.sort_unstable();
                v
            };
            prop_assert_ne!(hood(u), hood(s));
        }
    }
}

#[test]
fn ambiguous_objects_are_near_chance_for_the_unary() {
    let cfg = WorldConfig { noise_sigma: 0.01, ambiguity_rate: 1.0, ..small(4) };
    let w = gen_world(&cfg).unwrap();
    let batch = w.gen_scenes(&scenes(400, 5), Exec::Parallel).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &batch {
        for (r, &amb) in s.scene.regions.iter().zip(&s.ambiguous) {
            if !amb {
                continue;
            }
            let c = r.label.unwrap();
            let partner = w.config.confusable_pairs.iter().find(|p| p.0 == c).unwrap().1;
            let score = |k: usize| w.prototypes.row(k).iter().zip(&r.feature).map(|(a, b)| a * b).sum::<f64>();
            total += 1;
            if score(c) > score(partner) {
                hit += 1;
            }
        }
    }
    assert!(total >= 50, "only {total} ambiguous regions");
    let acc = hit as f64 / total as f64;
    assert!(acc <= 0.6, "pairwise unary accuracy {acc}");
}
