//! Data generation and partitioning.
//!
//! * [`generate_synthetic`] builds the argmax-linear synthetic benchmark with
//!   one heterogeneity source active at a time.
//! * [`partition_iid`], [`partition_dirichlet`] and [`partition_by_sizes`]
//!   split any labeled pool into device shards; [`sample_unbalanced_sizes`]
//!   draws lognormal shard sizes.
//! * [`quadratic_ensemble`] draws per-device quadratics with controlled
//!   curvature, used where closed-form optima are needed.

mod io;
mod partition;
mod quadratic;
mod synthetic;

pub use io::{dump_dataset, load_csv_pool, load_dataset_dump, read_features_csv, read_labels_csv};
pub use partition::{
    classes_covering, label_entropy, partition_by_sizes, partition_dirichlet, partition_iid,
    sample_unbalanced_sizes,
};
pub use quadratic::{quadratic_ensemble, QuadraticEnsembleConfig};
pub use synthetic::{feature_variances, generate_synthetic, generate_with_models, HeterogeneityMode, SyntheticConfig};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::DataShard;

/// Per-device label histograms and sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub sizes: Vec<usize>,
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionMeta {
    pub fn from_shards(shards: &[DataShard], classes: usize) -> Self {
        PartitionMeta {
            sizes: shards.iter().map(DataShard::len).collect(),
            histograms: shards.iter().map(|s| s.label_histogram(classes)).collect(),
        }
    }
}

/// Device shards plus a held-out test shard.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub shards: Vec<DataShard>,
    pub test: DataShard,
    pub classes: usize,
    pub meta: PartitionMeta,
}

impl FederatedDataset {
    pub fn new(shards: Vec<DataShard>, test: DataShard, classes: usize) -> Self {
        let meta = PartitionMeta::from_shards(&shards, classes);
        FederatedDataset {
            shards,
            test,
            classes,
            meta,
        }
    }

    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    pub fn num_features(&self) -> usize {
        self.test.num_features()
    }

    pub fn total_train(&self) -> usize {
        self.meta.sizes.iter().sum()
    }

    /// SHA-256 over every shard's features and labels, in device order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for shard in self.shards.iter().chain(std::iter::once(&self.test)) {
            hasher.update((shard.len() as u64).to_le_bytes());
            for v in shard.features() {
                hasher.update(v.to_bits().to_le_bytes());
            }
            for &y in shard.labels() {
                hasher.update((y as u64).to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
