use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{apply_rotation, GaussianTask, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, stream};

const DIRICHLET_RETRIES: usize = 10;

/// How samples are spread over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    /// Each client holds at most `k_labels` classes.
    Pathological {
        k_labels: usize,
    },
    /// Per class, client shares drawn from `Dirichlet(alpha)`. With
    /// `test_alpha`, training and test clients come from separate pools with
    /// their own concentration.
    Dirichlet {
        alpha: f64,
        #[serde(default)]
        test_alpha: Option<f64>,
    },
    /// Per client, label proportions drawn from `Dirichlet(alpha)` and fresh
    /// samples generated accordingly. Stays feasible at very small `alpha`.
    ClientDirichlet {
        alpha: f64,
        #[serde(default)]
        test_alpha: Option<f64>,
    },
    /// IID labels; every client rotates its features by an angle drawn
    /// uniformly from its role's list.
    Rotated {
        train_angles: Vec<f64>,
        test_angles: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub n_train_clients: usize,
    pub n_test_clients: usize,
    pub samples_per_client: usize,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.n_train_clients + self.n_test_clients
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train_clients == 0 || self.n_test_clients == 0 || self.samples_per_client == 0 {
            return Err(Error::Config(
                "client counts and samples_per_client must be positive".into(),
            ));
        }
        let positive = |a: f64| a > 0.0 && a.is_finite();
        match &self.scheme {
            PartitionScheme::Iid => Ok(()),
            PartitionScheme::Pathological { k_labels } if *k_labels >= 1 => Ok(()),
            PartitionScheme::Pathological { .. } => {
                Err(Error::Config("k_labels must be >= 1".into()))
            }
            PartitionScheme::Dirichlet { alpha, test_alpha }
            | PartitionScheme::ClientDirichlet { alpha, test_alpha } => {
                if positive(*alpha) && test_alpha.is_none_or(positive) {
                    Ok(())
                } else {
                    Err(Error::Config("dirichlet alpha must be positive".into()))
                }
            }
            PartitionScheme::Rotated {
                train_angles,
                test_angles,
            } => {
                if train_angles.is_empty() || test_angles.is_empty() {
                    Err(Error::Config(
                        "rotation angle lists must be non-empty".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Builds training and test client datasets from `task`.
    ///
    /// Single-pool schemes partition one dataset over all clients, then a
    /// seeded half goes to training. Schemes with a separate test
    /// distribution draw the two pools independently.
    pub fn federate(
        &self,
        task: &GaussianTask,
        seed: u64,
    ) -> Result<(Vec<LabeledDataset>, Vec<LabeledDataset>)> {
        self.validate()?;
        let spc = self.samples_per_client;
        let (n_train, n_test) = (self.n_train_clients, self.n_test_clients);
        let pool = |n: usize, tag: u64| {
            let ds = task.sample(n * spc, derive_seed(&[seed, stream::SAMPLES, tag]));
            relabel_ids(ds, tag as usize * 1_000_000_000)
        };
        match &self.scheme {
            PartitionScheme::Dirichlet {
                alpha,
                test_alpha: Some(test_alpha),
            } => {
                let train = partition_dirichlet(
                    &pool(n_train, 0),
                    n_train,
                    *alpha,
                    derive_seed(&[seed, 0]),
                )?;
                let test = partition_dirichlet(
                    &pool(n_test, 1),
                    n_test,
                    *test_alpha,
                    derive_seed(&[seed, 1]),
                )?;
                Ok((train, test))
            }
            PartitionScheme::ClientDirichlet { alpha, test_alpha } => {
                let train = sample_client_dirichlet(
                    task,
                    n_train,
                    spc,
                    *alpha,
                    derive_seed(&[seed, 0]),
                    0,
                )?;
                let test_alpha = test_alpha.unwrap_or(*alpha);
                let test = sample_client_dirichlet(
                    task,
                    n_test,
                    spc,
                    test_alpha,
                    derive_seed(&[seed, 1]),
                    1_000_000_000,
                )?;
                Ok((train, test))
            }
            PartitionScheme::Rotated {
                train_angles,
                test_angles,
            } => {
                let clients = partition_iid(&pool(n_train + n_test, 0), n_train + n_test, seed);
                let (train, test) = assign_roles(clients, n_train, seed);
                let mut rng = rng_for(&[seed, stream::ROTATION]);
                let mut rotate =
                    |set: Vec<LabeledDataset>, angles: &[f64]| -> Vec<LabeledDataset> {
                        set.iter()
                            .map(|c| apply_rotation(c, angles[rng.random_range(0..angles.len())]))
                            .collect()
                    };
                let train = rotate(train, train_angles);
                let test = rotate(test, test_angles);
                Ok((train, test))
            }
            _ => {
                let clients = partition(&pool(n_train + n_test, 0), self, seed)?;
                Ok(assign_roles(clients, n_train, seed))
            }
        }
    }
}

fn relabel_ids(ds: LabeledDataset, offset: usize) -> LabeledDataset {
    let ids = ds.ids().iter().map(|i| i + offset).collect();
    LabeledDataset::with_ids(
        ds.features().clone(),
        ds.labels().to_vec(),
        ids,
        ds.n_classes(),
    )
    .expect("same shapes")
}

/// Seeded 50/50-style role assignment: the first `n_train` of a shuffled
/// client order train, the rest are new clients.
fn assign_roles(
    clients: Vec<LabeledDataset>,
    n_train: usize,
    seed: u64,
) -> (Vec<LabeledDataset>, Vec<LabeledDataset>) {
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.shuffle(&mut rng_for(&[seed, stream::ROLES]));
    let mut slots: Vec<Option<LabeledDataset>> = clients.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each client assigned once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let test = order[n_train..].iter().map(|&i| take(i)).collect();
    (train, test)
}

/// Single-pool partition of `ds` over `spec.n_clients()` clients.
pub fn partition(
    ds: &LabeledDataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    spec.validate()?;
    let n = spec.n_clients();
    match &spec.scheme {
        PartitionScheme::Iid | PartitionScheme::Rotated { .. } => Ok(partition_iid(ds, n, seed)),
        PartitionScheme::Pathological { k_labels } => {
            partition_pathological(ds, n, *k_labels, seed)
        }
        PartitionScheme::Dirichlet { alpha, .. } => partition_dirichlet(ds, n, *alpha, seed),
        PartitionScheme::ClientDirichlet { .. } => Err(Error::Config(
            "client_dirichlet generates samples per client; use PartitionSpec::federate".into(),
        )),
    }
}

/// Shuffled, near-equal split.
pub fn partition_iid(ds: &LabeledDataset, n_clients: usize, seed: u64) -> Vec<LabeledDataset> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(&[seed, stream::PARTITION, 0]));
    split_even(&order, n_clients)
        .into_iter()
        .map(|rows| ds.subset(rows))
        .collect()
}

fn split_even<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// Label-skew partition: every client gets `k_labels` class shards.
///
/// Shard labels are dealt round-robin from repeated seeded shuffles of the
/// classes, so every class owns at least one shard when
/// `n_clients * k_labels >= C`; each class's samples are then divided evenly
/// among its shards.
pub fn partition_pathological(
    ds: &LabeledDataset,
    n_clients: usize,
    k_labels: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let c = ds.n_classes();
    if n_clients == 0 || k_labels == 0 || n_clients * k_labels < c {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients x {k_labels} labels cannot cover {c} classes"
        )));
    }
    let mut rng = rng_for(&[seed, stream::PARTITION, 1]);
    let n_slots = n_clients * k_labels;
    let mut slot_labels = Vec::with_capacity(n_slots);
    while slot_labels.len() < n_slots {
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        slot_labels.extend(perm.into_iter().take(n_slots - slot_labels.len()));
    }

    let mut rows_per_slot: Vec<Vec<usize>> = vec![Vec::new(); n_slots];
    for class in 0..c {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
        rows.shuffle(&mut rng);
        let slots: Vec<usize> = (0..n_slots).filter(|&s| slot_labels[s] == class).collect();
        for (slot, chunk) in slots.iter().zip(split_even(&rows, slots.len())) {
            rows_per_slot[*slot] = chunk.to_vec();
        }
    }
    Ok((0..n_clients)
        .map(|client| {
            let mut rows: Vec<usize> = (0..k_labels)
                .flat_map(|j| rows_per_slot[client * k_labels + j].iter().copied())
                .collect();
            rows.sort_unstable();
            ds.subset(&rows)
        })
        .collect())
}

/// Sample from `Dirichlet(alpha * 1_k)`.
///
/// Works in log space (`G_a = G_{a+1} * U^{1/a}`) so tiny `alpha` does not
/// underflow every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Splits `n` items by `shares` with floors plus largest remainders.
fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet allocation over clients. A draw that leaves any
/// client empty is redrawn, up to ten times.
pub fn partition_dirichlet(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if alpha.is_nan() || alpha <= 0.0 || n_clients == 0 {
        return Err(Error::Config(format!(
            "dirichlet needs alpha > 0 and clients > 0, got {alpha}"
        )));
    }
    let mut rng = rng_for(&[seed, stream::PARTITION, 2]);
    let c = ds.n_classes();
    let by_class: Vec<Vec<usize>> = (0..c)
        .map(|class| (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect())
        .collect();
    for _attempt in 0..=DIRICHLET_RETRIES {
        let mut rows_per_client: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for rows in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let shares = sample_dirichlet(alpha, n_clients, &mut rng);
            let mut start = 0;
            for (client, count) in apportion(rows.len(), &shares).into_iter().enumerate() {
                rows_per_client[client].extend_from_slice(&rows[start..start + count]);
                start += count;
            }
        }
        if rows_per_client.iter().all(|r| !r.is_empty()) {
            return Ok(rows_per_client
                .into_iter()
                .map(|mut rows| {
                    rows.sort_unstable();
                    ds.subset(&rows)
                })
                .collect());
        }
    }
    Err(Error::Infeasible(format!(
        "dirichlet(alpha = {alpha}) left a client empty after {DIRICHLET_RETRIES} retries"
    )))
}

/// Every client draws label proportions from `Dirichlet(alpha)` and then
/// `samples_per_client` labels from them; features are generated fresh.
pub fn sample_client_dirichlet(
    task: &GaussianTask,
    n_clients: usize,
    samples_per_client: usize,
    alpha: f64,
    seed: u64,
    id_offset: usize,
) -> Result<Vec<LabeledDataset>> {
    if alpha.is_nan() || alpha <= 0.0 || samples_per_client == 0 {
        return Err(Error::Config(
            "client_dirichlet needs alpha > 0 and samples > 0".into(),
        ));
    }
    let c = task.n_classes();
    Ok((0..n_clients)
        .map(|client| {
            let mut rng = rng_for(&[seed, stream::PARTITION, 3, client as u64]);
            let shares = sample_dirichlet(alpha, c, &mut rng);
            let mut labels = Vec::with_capacity(samples_per_client);
            for (class, count) in apportion(samples_per_client, &shares)
                .into_iter()
                .enumerate()
            {
                labels.extend(std::iter::repeat_n(class, count));
            }
            labels.shuffle(&mut rng);
            let ds = task.sample_with_labels(
                &labels,
                derive_seed(&[seed, stream::SAMPLES, client as u64]),
            );
            let base = id_offset + client * samples_per_client;
            relabel_ids(ds, base)
        })
        .collect())
}
