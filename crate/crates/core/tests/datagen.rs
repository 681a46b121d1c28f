use std::collections::BTreeSet;

use hilora::datagen::{
    gen_pool, load_csv, partition, sample_dirichlet, split_unseen, FederationData, LabeledPool,
    PartitionSpec, MIN_CLIENT_SAMPLES,
};
use hilora::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// Straight-line reimplementation of the documented GL-Dir sampler: pool
/// classes shuffled on stream (2), client `i` draws a Gamma prior and then
/// one categorical draw per sample on stream (1, i), skipping exhausted
/// classes.
fn reference_gl_dir(pool: &LabeledPool, alpha: f64, n: usize, seed: u64) -> Vec<BTreeSet<usize>> {
    let c = pool.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in pool.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut shuffle_rng = rng::stream(seed, &[2]);
    for list in &mut by_class {
        list.shuffle(&mut shuffle_rng);
    }
    let quota = pool.samples.len() / n;
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut out = Vec::new();
    for i in 0..n {
        let mut r = rng::stream(seed, &[1, i as u64]);
        let g: Vec<f64> = (0..c).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = g.iter().sum();
        let prior: Vec<f64> = g.iter().map(|v| v / total).collect();
        let mut taken = BTreeSet::new();
        while taken.len() < quota {
            let mass: f64 = (0..c).filter(|&k| !by_class[k].is_empty()).map(|k| prior[k]).sum();
            let u = r.random::<f64>() * mass;
            let mut acc = 0.0;
            let mut pick = None;
            for k in 0..c {
                if by_class[k].is_empty() || prior[k] <= 0.0 {
                    continue;
                }
                acc += prior[k];
                pick = Some(k);
                if u < acc {
                    break;
                }
            }
            taken.insert(by_class[pick.unwrap()].pop().unwrap());
        }
        out.push(taken);
    }
    out
}

fn all_indices(data: &FederationData) -> Vec<usize> {
    let mut v: Vec<usize> = data
        .clients
        .iter()
        .chain(&data.unseen)
        .flat_map(|c| c.pool_indices.iter().copied())
        .collect();
    v.sort_unstable();
    v
}

#[test]
fn gl_dir_matches_reference_sampler() {
    let pool = gen_pool(10, 4, 100, 2.0, 5).unwrap();
    let data = partition(&pool, &PartitionSpec::GlDir { alpha: 0.3 }, 20, 5).unwrap();
    let reference = reference_gl_dir(&pool, 0.3, 20, 5);
    for (client, want) in data.clients.iter().zip(&reference) {
        let got: BTreeSet<usize> = client.pool_indices.iter().copied().collect();
        assert_eq!(&got, want, "client {}", client.id);
        let n = client.pool_indices.len();
        assert_eq!(client.test.len(), (n / 5).max(1));
        assert_eq!(client.train.len() + client.test.len(), n);
    }
}

#[test]
fn train_and_test_follow_pool_indices() {
    let pool = gen_pool(6, 3, 40, 2.0, 8).unwrap();
    let data = partition(&pool, &PartitionSpec::GlDir { alpha: 1.0 }, 4, 8).unwrap();
    for c in &data.clients {
        let samples: Vec<_> = c.train.iter().chain(&c.test).collect();
        for (s, &idx) in samples.iter().zip(&c.pool_indices) {
            assert_eq!(**s, pool.samples[idx]);
        }
    }
}

#[test]
fn patho_with_hundred_classes_owns_exactly_ten() {
    let pool = gen_pool(100, 4, 30, 2.0, 3).unwrap();
    let data = partition(&pool, &PartitionSpec::Patho { classes_per_client: 10 }, 20, 3).unwrap();
    for c in &data.clients {
        assert_eq!(c.label_support().len(), 10, "client {}", c.id);
    }
    assert_eq!(all_indices(&data), (0..3000).collect::<Vec<_>>());
}

#[test]
fn sc_dir_labels_stay_in_drawn_superclasses() {
    let pool = gen_pool(20, 3, 30, 2.0, 4).unwrap();
    let map: Vec<usize> = (0..20).map(|c| c / 5).collect();
    let spec = PartitionSpec::ScDir {
        alpha: 0.05,
        superclass_of: Some(map.clone()),
    };
    let data = partition(&pool, &spec, 6, 4).unwrap();
    // With a very peaked prior most clients concentrate on one superclass.
    let concentrated = data
        .clients
        .iter()
        .filter(|c| {
            let mut counts = [0usize; 4];
            for s in c.train.iter().chain(&c.test) {
                counts[map[s.label]] += 1;
            }
            *counts.iter().max().unwrap() * 10 >= c.pool_indices.len() * 8
        })
        .count();
    assert!(concentrated >= 3, "{concentrated}");
}

#[test]
fn unseen_split_keeps_every_group_across_seeds() {
    let pool = gen_pool(8, 4, 40, 2.0, 1).unwrap();
    let spec = PartitionSpec::ClusterShift {
        k_true: 4,
        rotation_angle: 0.5,
        label_subset_size: 2,
    };
    let data = partition(&pool, &spec, 8, 1).unwrap();
    for seed in 0..100 {
        let split = split_unseen(&data, 0.5, seed).unwrap();
        assert_eq!(split.unseen.len(), 4);
        let kept: BTreeSet<usize> = split.true_groups().unwrap().into_iter().collect();
        assert_eq!(kept, (0..4).collect(), "seed {seed}");
        let mut ids: Vec<usize> = split.clients.iter().chain(&split.unseen).map(|c| c.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }
}

#[test]
fn csv_round_trip() {
    let text = "client_id,label,f0,f1\n\
                7,0,1.0,2.0\n7,1,0.5,0.5\n7,1,0.0,1.0\n\
                3,2,1.5,-1.0\n3,0,2.0,2.0\n";
    let data = load_csv(text.as_bytes(), None, 0).unwrap();
    assert_eq!(data.class_count, 3);
    assert_eq!(data.feature_dim, 2);
    assert_eq!(data.clients.len(), 2);
    assert_eq!(data.clients[0].train.len() + data.clients[0].test.len(), 2);
    assert_eq!(data.clients[1].train.len() + data.clients[1].test.len(), 3);
    assert!(load_csv("client_id,label,f0\n0,x,1.0\n".as_bytes(), None, 0).is_err());
    assert!(load_csv("id,label,f0\n".as_bytes(), None, 0).is_err());
    assert!(load_csv("client_id,label,f0\n0,4,1.0\n0,1,1.0\n".as_bytes(), Some(3), 0).is_err());
}

#[test]
fn tiny_pool_is_rejected() {
    let pool = gen_pool(2, 2, 5, 1.0, 0).unwrap();
    let err = partition(&pool, &PartitionSpec::GlDir { alpha: 1.0 }, 2, 0);
    assert!(err.is_err());
    assert!(pool.samples.len() / 2 < MIN_CLIENT_SAMPLES);
}

fn spec_strategy() -> impl Strategy<Value = PartitionSpec> {
    prop_oneof![
        (0.05f64..5.0).prop_map(|alpha| PartitionSpec::GlDir { alpha }),
        (0.05f64..5.0).prop_map(|alpha| PartitionSpec::ScDir { alpha, superclass_of: None }),
        (1usize..=6).prop_map(|k| PartitionSpec::Patho { classes_per_client: k }),
        (1usize..=3, 0.0f64..3.0, 1usize..=6).prop_map(|(k, a, s)| PartitionSpec::ClusterShift {
            k_true: k,
            rotation_angle: a,
            label_subset_size: s,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_never_duplicate_samples(spec in spec_strategy(), seed in any::<u64>(), n in 3usize..8) {
        let pool = gen_pool(12, 3, 80, 2.0, seed).unwrap();
        let data = partition(&pool, &spec, n, seed).unwrap();
        let idx = all_indices(&data);
        let unique: BTreeSet<usize> = idx.iter().copied().collect();
        prop_assert_eq!(unique.len(), idx.len());
        prop_assert!(idx.iter().all(|&i| i < pool.samples.len()));
        prop_assert_eq!(data.distributed_samples(), idx.len());
        // Owned-class schemes hand out every sample of every owned class.
        if matches!(spec, PartitionSpec::Patho { .. } | PartitionSpec::ClusterShift { .. }) {
            let owned: BTreeSet<usize> = data.clients.iter().flat_map(|c| c.label_support()).collect();
            prop_assert_eq!(idx.len(), owned.len() * 80);
        }
        for c in &data.clients {
            prop_assert!(c.size() + c.test.len() >= MIN_CLIENT_SAMPLES);
        }
        let again = partition(&pool, &spec, n, seed).unwrap();
        prop_assert_eq!(again, data);
    }

    #[test]
    fn cluster_shift_groups_are_identifiable(seed in any::<u64>(), k in 1usize..4) {
        let pool = gen_pool(12, 4, 60, 2.0, seed).unwrap();
        let spec = PartitionSpec::ClusterShift { k_true: k, rotation_angle: 0.7, label_subset_size: 3 };
        let data = partition(&pool, &spec, 9, seed).unwrap();
        let groups = data.true_groups().unwrap();
        let distinct: BTreeSet<usize> = groups.iter().copied().collect();
        prop_assert_eq!(distinct.len(), k);
        for g in 0..k {
            let members: Vec<_> = data.clients.iter().filter(|c| c.true_group == Some(g)).collect();
            let support = members[0].label_support();
            for c in &members {
                prop_assert_eq!(&c.label_support(), &support);
            }
            // Features are a norm-preserving map of the pool sample.
            for c in &members {
                for (s, &idx) in c.train.iter().zip(&c.pool_indices) {
                    let a: f64 = s.x.iter().map(|v| v * v).sum();
                    let b: f64 = pool.samples[idx].x.iter().map(|v| v * v).sum();
                    prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
                }
            }
        }
    }

    #[test]
    fn dirichlet_draws_lie_on_simplex(alpha in 0.01f64..10.0, dim in 1usize..20, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let p = sample_dirichlet(alpha, dim, &mut r).unwrap();
        prop_assert_eq!(p.len(), dim);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
