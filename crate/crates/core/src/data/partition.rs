use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    Homogeneous,
    ClassesPerClient(usize),
}

/// Which samples of a dataset each client holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub client_indices: Vec<Vec<usize>>,
    pub client_classes: Vec<Vec<usize>>,
    pub samples_per_client: usize,
    pub seed: u64,
    pub heterogeneity: Heterogeneity,
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Gives each client `classes_per_client` classes and `samples_per_client`
/// samples drawn from them.
///
/// Classes are dealt round-robin from one shuffled class list, so as long as
/// `n_clients · classes_per_client ≥ num_classes` every class is held by some
/// client. A client's samples are split as evenly as possible over its
/// classes, earlier classes in its list taking the remainder. Samples are
/// drawn without replacement across clients.
pub fn partition_by_classes(
    ds: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<PartitionSpec> {
    let c = ds.num_classes;
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Partition(format!(
            "classes_per_client {classes_per_client} must be in 1..={c}"
        )));
    }
    if samples_per_client < classes_per_client {
        return Err(Error::Partition(format!(
            "{samples_per_client} samples cannot cover {classes_per_client} classes per client"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let base = samples_per_client / classes_per_client;
    let extra = samples_per_client % classes_per_client;
    let mut demand = vec![0usize; c];
    let mut client_classes = Vec::with_capacity(n_clients);
    let mut quotas = Vec::with_capacity(n_clients);
    for m in 0..n_clients {
        let classes: Vec<usize> = (0..classes_per_client).map(|j| order[(m * classes_per_client + j) % c]).collect();
        let q: Vec<usize> = (0..classes_per_client).map(|j| base + usize::from(j < extra)).collect();
        for (&cl, &n) in classes.iter().zip(&q) {
            demand[cl] += n;
        }
        client_classes.push(classes);
        quotas.push(q);
    }
    let shortfalls: Vec<String> = (0..c)
        .filter(|&cl| demand[cl] > pools[cl].len())
        .map(|cl| format!("class {cl} needs {} samples but has {}", demand[cl], pools[cl].len()))
        .collect();
    if !shortfalls.is_empty() {
        return Err(Error::Partition(shortfalls.join("; ")));
    }

    let mut cursor = vec![0usize; c];
    let mut client_indices = Vec::with_capacity(n_clients);
    for (classes, q) in client_classes.iter_mut().zip(&quotas) {
        let mut idx = Vec::with_capacity(samples_per_client);
        for (&cl, &n) in classes.iter().zip(q) {
            idx.extend_from_slice(&pools[cl][cursor[cl]..cursor[cl] + n]);
            cursor[cl] += n;
        }
        idx.sort_unstable();
        classes.sort_unstable();
        client_indices.push(idx);
    }
    Ok(PartitionSpec {
        client_indices,
        client_classes,
        samples_per_client,
        seed,
        heterogeneity: if classes_per_client == c {
            Heterogeneity::Homogeneous
        } else {
            Heterogeneity::ClassesPerClient(classes_per_client)
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified train/test split of one client's samples.
///
/// Each class is split by `train_fraction`. When a class cannot be split
/// exactly, the odd sample alternates between train and test (train first)
/// so the totals stay balanced. A class with a single sample always goes to
/// train and is reported in `warnings`.
pub fn split_local(ds: &Dataset, indices: &[usize], train_fraction: f64, seed: u64) -> Result<LocalSplit> {
    if indices.len() < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, got {}", indices.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Data(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for &i in indices {
        by_class[ds.labels()[i]].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut warnings = Vec::new();
    let mut odd_to_train = true;
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.sort_unstable();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = if n == 1 {
            warnings.push(format!("class {class} has a single sample; kept in train"));
            1
        } else {
            let exact = n as f64 * train_fraction;
            let floor = exact.floor() as usize;
            if exact > floor as f64 {
                let take = if odd_to_train { floor + 1 } else { floor };
                odd_to_train = !odd_to_train;
                take.clamp(1, n - 1)
            } else {
                floor.clamp(1, n - 1)
            }
        };
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(LocalSplit { train, test, warnings })
}

/// Per-client affine pixel perturbation `x ↦ clamp(a·x + b)` with
/// `a ∈ [1-s, 1+s]` and `b ∈ [-s, s]` drawn from `(seed, client)`.
pub fn apply_client_shift(ds: &Dataset, client: usize, strength: f64, seed: u64) -> Dataset {
    if strength <= 0.0 {
        return ds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let a = 1.0 + rng.random_range(-strength..=strength);
    let b = rng.random_range(-strength..=strength);
    let p = precision();
    ds.map_images(|x| p.round((a * x + b).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_task;

    #[test]
    fn homogeneous_clients_see_every_class() {
        let ds = synth_task(4, 20, 4, 0.1, 0).unwrap();
        let p = partition_by_classes(&ds, 2, 4, 8, 1).unwrap();
        assert_eq!(p.heterogeneity, Heterogeneity::Homogeneous);
        for (idx, classes) in p.client_indices.iter().zip(&p.client_classes) {
            assert_eq!(classes, &vec![0, 1, 2, 3]);
            let mut seen: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn round_robin_assigns_each_class_once() {
        let ds = synth_task(10, 10, 4, 0.1, 0).unwrap();
        let p = partition_by_classes(&ds, 5, 2, 10, 3).unwrap();
        let mut all: Vec<usize> = p.client_classes.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mild_cifar100_shape() {
        let ds = synth_task(100, 20, 4, 0.1, 0).unwrap();
        let p = partition_by_classes(&ds, 20, 20, 100, 9).unwrap();
        assert!(p.client_indices.iter().all(|c| c.len() == 100));
        assert!(p.client_classes.iter().all(|c| c.len() == 20));
    }

    #[test]
    fn infeasible_demand_names_shortfall() {
        let ds = synth_task(2, 5, 4, 0.1, 0).unwrap();
        let err = partition_by_classes(&ds, 4, 2, 6, 0).unwrap_err().to_string();
        assert!(err.contains("needs 12 samples but has 5"), "{err}");
    }

    #[test]
    fn partition_json_round_trip() {
        let ds = synth_task(4, 10, 4, 0.1, 0).unwrap();
        let p = partition_by_classes(&ds, 3, 2, 6, 5).unwrap();
        assert_eq!(PartitionSpec::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    #[test]
    fn split_100_over_20_classes() {
        let ds = synth_task(20, 5, 4, 0.1, 0).unwrap();
        let idx: Vec<usize> = (0..100).collect();
        let s = split_local(&ds, &idx, 0.5, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (50, 50));
        let train = ds.subset(&s.train).unwrap().class_counts();
        let test = ds.subset(&s.test).unwrap().class_counts();
        for (a, b) in train.iter().zip(&test) {
            assert!((2..=3).contains(a) && (2..=3).contains(b));
        }
    }

    #[test]
    fn split_two_samples() {
        let ds = synth_task(1, 2, 4, 0.1, 0).unwrap();
        let s = split_local(&ds, &[0, 1], 0.5, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
        assert_eq!(split_local(&ds, &[0, 1], 0.5, 0).unwrap(), s);
    }

    #[test]
    fn singleton_class_goes_to_train_with_warning() {
        let ds = synth_task(2, 3, 4, 0.1, 0).unwrap();
        let s = split_local(&ds, &[0, 1, 2, 3], 0.5, 0).unwrap();
        assert!(s.train.contains(&3));
        assert_eq!(s.warnings.len(), 1);
        assert!(split_local(&ds, &[0], 0.5, 0).is_err());
    }

    #[test]
    fn client_shift_is_deterministic_and_bounded() {
        let ds = synth_task(2, 3, 4, 0.1, 0).unwrap();
        let a = apply_client_shift(&ds, 1, 0.2, 7);
        let b = apply_client_shift(&ds, 1, 0.2, 7);
        assert_eq!(a, b);
        assert_ne!(a, ds);
        assert!(a.images().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
