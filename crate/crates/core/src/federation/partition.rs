use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Random assignment; shard sizes differ by at most one.
    Uniform { n_clients: usize },
    /// Client `i` holds classes `(i * c + j) mod K` for `j < c`; each class's
    /// samples are dealt round-robin among its holders.
    LabelSkew {
        n_clients: usize,
        classes_per_client: usize,
    },
}

impl PartitionScheme {
    pub fn n_clients(&self) -> usize {
        match *self {
            PartitionScheme::Uniform { n_clients } | PartitionScheme::LabelSkew { n_clients, .. } => n_clients,
        }
    }
}

/// Row indices of each client's shard.
pub fn partition_indices(data: &Batch, scheme: PartitionScheme, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n_clients = scheme.n_clients();
    if n_clients == 0 {
        return Err(Error::config("partition.n_clients", "must be at least 1"));
    }
    if data.len() < n_clients {
        return Err(Error::config(
            "partition.n_clients",
            format!("{n_clients} clients but only {} samples", data.len()),
        ));
    }
    let mut rng = rng::seeded_rng(seed, "partition", &[]);
    let shards = match scheme {
        PartitionScheme::Uniform { .. } => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let mut shards = vec![Vec::new(); n_clients];
            for (j, i) in idx.into_iter().enumerate() {
                shards[j % n_clients].push(i);
            }
            shards
        }
        PartitionScheme::LabelSkew { classes_per_client, .. } => {
            let labels = data
                .class_labels()
                .ok_or_else(|| Error::config("partition.scheme", "label skew needs class labels"))?;
            let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let k = classes.len();
            if classes_per_client == 0 || classes_per_client > k {
                return Err(Error::config(
                    "partition.classes_per_client",
                    format!("must lie in 1..={k} for this dataset"),
                ));
            }
            if n_clients * classes_per_client < k {
                return Err(Error::config(
                    "partition.classes_per_client",
                    format!("{n_clients} clients x {classes_per_client} classes cannot cover {k} classes"),
                ));
            }
            let mut holders = vec![Vec::new(); k];
            for client in 0..n_clients {
                for j in 0..classes_per_client {
                    holders[(client * classes_per_client + j) % k].push(client);
                }
            }
            let mut shards = vec![Vec::new(); n_clients];
            for (slot, &class) in classes.iter().enumerate() {
                let mut members: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == class).collect();
                members.shuffle(&mut rng);
                for (j, i) in members.into_iter().enumerate() {
                    shards[holders[slot][j % holders[slot].len()]].push(i);
                }
            }
            shards
        }
    };
    if let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        return Err(Error::config(
            "partition",
            format!("client {empty} would receive no samples"),
        ));
    }
    Ok(shards)
}

pub fn partition_data(data: &Batch, scheme: PartitionScheme, seed: u64) -> Result<Vec<Batch>> {
    partition_indices(data, scheme, seed)?
        .iter()
        .map(|rows| data.select(rows))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::synthetic_blobs;

    #[test]
    fn uniform_ten_by_ten() {
        let d = synthetic_blobs(100, 2, 2, 1.0, 0).unwrap();
        let shards = partition_data(&d, PartitionScheme::Uniform { n_clients: 10 }, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn single_label_shards() {
        let d = synthetic_blobs(40, 2, 2, 1.0, 0).unwrap();
        let scheme = PartitionScheme::LabelSkew {
            n_clients: 4,
            classes_per_client: 1,
        };
        for shard in partition_data(&d, scheme, 3).unwrap() {
            let labels: BTreeSet<_> = shard.class_labels().unwrap().iter().collect();
            assert_eq!(labels.len(), 1);
        }
    }

    #[test]
    fn infeasible_skew_rejected() {
        let d = synthetic_blobs(40, 4, 2, 1.0, 0).unwrap();
        let cover = PartitionScheme::LabelSkew {
            n_clients: 3,
            classes_per_client: 1,
        };
        assert!(partition_indices(&d, cover, 0).is_err());
        let too_many = PartitionScheme::LabelSkew {
            n_clients: 3,
            classes_per_client: 5,
        };
        assert!(partition_indices(&d, too_many, 0).is_err());
        assert!(partition_indices(&d, PartitionScheme::Uniform { n_clients: 41 }, 0).is_err());
    }

    proptest! {
        #[test]
        fn shards_form_an_exact_partition(
            n in 20usize..120,
            k in 2usize..5,
            clients in 1usize..8,
            skew in any::<bool>(),
            c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let d = synthetic_blobs(n, k, 2, 1.0, seed).unwrap();
            let scheme = if skew {
                PartitionScheme::LabelSkew { n_clients: clients, classes_per_client: c.min(k) }
            } else {
                PartitionScheme::Uniform { n_clients: clients }
            };
            match partition_indices(&d, scheme, seed) {
                Ok(shards) => {
                    let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                    if let PartitionScheme::LabelSkew { classes_per_client, .. } = scheme {
                        let labels = d.class_labels().unwrap();
                        for s in &shards {
                            let distinct: BTreeSet<_> = s.iter().map(|&i| labels[i]).collect();
                            prop_assert!(distinct.len() <= classes_per_client);
                        }
                    } else {
                        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
                        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                    }
                }
                Err(Error::Config { .. }) => prop_assert!(skew),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
