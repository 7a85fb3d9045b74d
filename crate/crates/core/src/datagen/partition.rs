use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::FederatedDataset;
use crate::error::{FedError, Result};
use crate::losses::DataShard;
use crate::seed::{self, domain};

fn check_labels(pool: &DataShard, classes: usize) -> Result<()> {
    match pool.labels().iter().find(|&&y| y >= classes) {
        Some(&label) => Err(FedError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Uniform random split into `m` shards; the remainder `n mod m` goes one
/// sample per device starting from device 0.
pub fn partition_iid(pool: &DataShard, classes: usize, m: usize, seed_value: u64) -> Result<FederatedDataset> {
    let n = pool.len();
    if m == 0 {
        return Err(FedError::config("need at least one device"));
    }
    if m > n {
        return Err(FedError::config(format!("cannot split {n} samples over {m} devices")));
    }
    let sizes: Vec<usize> = (0..m).map(|k| n / m + usize::from(k < n % m)).collect();
    partition_by_sizes(pool, classes, &sizes, seed_value)
}

/// Random split with prescribed shard sizes (which must sum to the pool size).
pub fn partition_by_sizes(
    pool: &DataShard,
    classes: usize,
    sizes: &[usize],
    seed_value: u64,
) -> Result<FederatedDataset> {
    check_labels(pool, classes)?;
    if sizes.iter().sum::<usize>() != pool.len() {
        return Err(FedError::config(format!(
            "shard sizes sum to {} but the pool has {} samples",
            sizes.iter().sum::<usize>(),
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seed::stream(seed_value, &[domain::PARTITION]));
    let mut start = 0;
    let shards = sizes
        .iter()
        .map(|&len| {
            let shard = pool.select(&order[start..start + len]);
            start += len;
            shard
        })
        .collect();
    Ok(FederatedDataset::new(shards, DataShard::empty(pool.num_features()), classes))
}

fn dirichlet_sample<R: Rng>(rng: &mut R, concentration: f64, classes: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 && total.is_finite() {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        // All draws underflowed: put the mass on one class.
        v.iter_mut().for_each(|x| *x = 0.0);
        v[rng.random_range(0..classes)] = 1.0;
    }
    v
}

/// Dirichlet label-skew partition.
///
/// Each device draws class priors from `Dirichlet(prior * 1)`. Devices then
/// take turns: a device samples a label from its priors restricted to
/// classes that still have unassigned samples, and receives one such sample
/// drawn without replacement. The loop runs until the pool is exhausted, so
/// shard sizes differ by at most one.
pub fn partition_dirichlet(
    pool: &DataShard,
    classes: usize,
    m: usize,
    prior: f64,
    seed_value: u64,
) -> Result<FederatedDataset> {
    if !(prior > 0.0) || !prior.is_finite() {
        return Err(FedError::config("dirichlet prior must be positive and finite"));
    }
    if m == 0 {
        return Err(FedError::config("need at least one device"));
    }
    check_labels(pool, classes)?;
    let mut rng = seed::stream(seed_value, &[domain::PARTITION]);

    let priors: Vec<Vec<f64>> = (0..m).map(|_| dirichlet_sample(&mut rng, prior, classes)).collect();

    let mut stock: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in pool.labels().iter().enumerate() {
        stock[y].push(i);
    }
    for pool_c in &mut stock {
        pool_c.shuffle(&mut rng);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut remaining = pool.len();
    while remaining > 0 {
        for (device, rows) in assigned.iter_mut().enumerate() {
            if remaining == 0 {
                break;
            }
            let weights = &priors[device];
            let mass: f64 = (0..classes).filter(|&c| !stock[c].is_empty()).map(|c| weights[c]).sum();
            let label = if mass > 0.0 {
                pick(&mut rng, (0..classes).map(|c| if stock[c].is_empty() { 0.0 } else { weights[c] }), mass)
            } else {
                // The device's prior sits entirely on exhausted classes; fall
                // back to the remaining stock proportions.
                pick(&mut rng, stock.iter().map(|s| s.len() as f64), remaining as f64)
            };
            rows.push(stock[label].pop().expect("label drawn with remaining stock"));
            remaining -= 1;
        }
    }

    let shards = assigned.iter().map(|rows| pool.select(rows)).collect();
    Ok(FederatedDataset::new(shards, DataShard::empty(pool.num_features()), classes))
}

/// Draw an index from nonnegative weights with the given total.
fn pick<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>, total: f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Lognormal shard sizes summing to `total`, each at least 1.
///
/// Sizes are `1 + share` where the `total - m` remaining samples are split in
/// proportion to `LogNormal(0, sigma^2)` draws by largest remainder (ties to
/// the lower index). `sigma = 0` gives equal sizes.
pub fn sample_unbalanced_sizes(m: usize, sigma: f64, total: usize, seed_value: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(FedError::config("need at least one device"));
    }
    if !(sigma >= 0.0) {
        return Err(FedError::config("lognormal sigma must be nonnegative"));
    }
    if total < m {
        return Err(FedError::config(format!("total {total} is smaller than device count {m}")));
    }
    let mut rng = seed::stream(seed_value, &[domain::SIZES]);
    let weights: Vec<f64> = (0..m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (sigma * z).exp()
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let extra = total - m;
    let quotas: Vec<f64> = weights.iter().map(|w| extra as f64 * w / wsum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Smallest number of most frequent classes that together hold at least
/// `fraction` of the samples.
pub fn classes_covering(histogram: &[usize], fraction: f64) -> usize {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0;
    }
    let mut sorted = histogram.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let need = fraction * total as f64;
    let mut acc = 0usize;
    for (i, count) in sorted.iter().enumerate() {
        acc += count;
        if acc as f64 >= need - 1e-9 {
            return i + 1;
        }
    }
    sorted.len()
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
