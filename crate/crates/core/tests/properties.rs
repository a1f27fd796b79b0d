mod common;

use fedyolo_core::data::{partition_by_classes, split_local, synth_task};
use fedyolo_core::fl::*;
use fedyolo_core::peft::{segment, sparse_decode, sparse_encode, ModuleBlob, ModuleKind, ModuleSpec};
use fedyolo_core::telemetry::{forgetting_ratio, hetero_drop};
use fedyolo_core::vit::ParamSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partitions_are_disjoint_contained_and_exact(
        classes in 2usize..12,
        clients in 1usize..10,
        cpc_frac in 0.0f64..1.0,
        spc in 1usize..12,
        seed in any::<u64>(),
    ) {
        let cpc = 1 + ((classes - 1) as f64 * cpc_frac) as usize;
        let spc = spc.max(cpc);
        let ds = synth_task(classes, clients * spc, 4, 0.1, seed % 97).unwrap();
        let p = partition_by_classes(&ds, clients, cpc, spc, seed).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (idx, cls) in p.client_indices.iter().zip(&p.client_classes) {
            prop_assert_eq!(idx.len(), spc);
            prop_assert_eq!(cls.len(), cpc);
            for &i in idx {
                prop_assert!(seen.insert(i), "sample {} given twice", i);
                prop_assert!(cls.contains(&ds.labels()[i]));
            }
        }
        if clients * cpc >= classes {
            let mut all: Vec<usize> = p.client_classes.concat();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), classes);
        }
    }

    #[test]
    fn stratified_split_balances_each_class(
        classes in 1usize..6,
        per_class in 2usize..9,
        seed in any::<u64>(),
    ) {
        let ds = synth_task(classes, per_class, 4, 0.1, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let s = split_local(&ds, &idx, 0.5, seed).unwrap();
        let train = ds.subset(&s.train).unwrap().class_counts();
        let test = ds.subset(&s.test).unwrap().class_counts();
        for (a, b) in train.iter().zip(&test) {
            prop_assert!(a.abs_diff(*b) <= 1, "train {:?} test {:?}", train, test);
        }
        prop_assert!(s.train.len().abs_diff(s.test.len()) <= 1);
    }

    #[test]
    fn relative_drops_are_scale_invariant(a in 0.01f64..1.0, b in 0.0f64..1.0, c in 0.01f64..100.0) {
        let f = forgetting_ratio(a, b).unwrap();
        let g = forgetting_ratio(c * a, c * b).unwrap();
        prop_assert!((f - g).abs() < 1e-9);
        prop_assert!((hetero_drop(a, b).unwrap() - hetero_drop(c * a, c * b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sparse_sums_split_into_per_task_sums(
        k_total in 1usize..5,
        uploads in proptest::collection::vec((0usize..5, proptest::collection::vec(-4.0f64..4.0, 3)), 1..8),
    ) {
        let mut sum = vec![0.0; 3 * k_total];
        let mut per_task = vec![vec![0.0; 3]; k_total];
        for (k, v) in &uploads {
            let k = k % k_total;
            let mut set = ParamSet::new();
            set.insert("w", fedyolo_core::tensor::Tensor::from_vec(v.clone()).unwrap(), false);
            let blob = ModuleBlob { spec: ModuleSpec::new(ModuleKind::HeadOnly), task_id: Some(k), params: set };
            for (s, x) in sum.iter_mut().zip(sparse_encode(&blob, k, k_total).unwrap()) {
                *s += x;
            }
            for (s, x) in per_task[k].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (k, expect) in per_task.iter().enumerate() {
            prop_assert_eq!(segment(&sum, k, k_total).unwrap(), expect.as_slice());
        }
    }
}

#[test]
fn sparse_round_trip_on_a_real_module() {
    let cfg = common::micro();
    let spec = ModuleSpec::new(ModuleKind::Lora);
    let model = fedyolo_core::peft::attach(&fedyolo_core::vit::build_vit(&cfg, 0).unwrap(), &cfg, &spec, 4).unwrap();
    let blob = fedyolo_core::peft::extract(&model);
    let v = sparse_encode(&blob, 2, 3).unwrap();
    let (k, back) = sparse_decode(&v, 3, &spec, &cfg).unwrap();
    assert_eq!(k, 2);
    assert!(back.params.is_bitwise_eq(&blob.params));
}

#[test]
fn sampling_is_uniform_over_many_rounds() {
    let (n, m, rounds) = (10usize, 3usize, 10_000usize);
    let mut counts = vec![0usize; n];
    for r in 0..rounds {
        let s = sample_clients(n, m, 42, r).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]), "repeat in round {r}");
        for c in s {
            counts[c] += 1;
        }
    }
    let p = m as f64 / n as f64;
    let mean = rounds as f64 * p;
    let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!(
            (k as f64 - mean).abs() < 3.0 * sd,
            "client {c} sampled {k} times, expected {mean} ± {}",
            3.0 * sd
        );
    }
}

#[test]
fn absent_tasks_are_untouched_over_random_rounds() {
    let mut s = common::setup(3, 3, 4, ModuleKind::HeadOnly);
    s.spec = ModuleSpec::new(ModuleKind::HeadOnly);
    let mut cfg = FedConfig::new(2, 0.05);
    cfg.update_mode = UpdateMode::HeadOnly;
    cfg.rounds = 100;
    cfg.batch_size = 2;
    cfg.rounds = 1;
    let mut registry = run_fedyolo(&s, &cfg).unwrap().registry;
    cfg.rounds = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 1..=100 {
        let m = rng.random_range(1..=3);
        let sampled = rand::seq::index::sample(&mut rng, s.clients.len(), m).into_vec();
        let active: Vec<usize> = sampled.iter().map(|&c| s.clients[c].task_id).collect();
        let out = fedyolo_round(&registry, &s.clients, &sampled, &cfg, round).unwrap();
        for k in 0..3 {
            if !active.contains(&k) {
                assert!(
                    out.weights[k].is_bitwise_eq(&registry.weights[k]),
                    "round {round} touched idle task {k}"
                );
            }
        }
        registry.weights = out.weights;
    }
}
