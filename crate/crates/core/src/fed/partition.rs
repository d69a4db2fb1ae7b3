use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

const MAX_RETRIES: usize = 1000;

/// One device's share of the training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub device_id: usize,
    /// Rows of the training set, ascending.
    pub indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Share of the most frequent label.
    pub fn dominant_share(&self) -> f64 {
        let max = self.label_histogram.iter().copied().max().unwrap_or(0);
        max as f64 / self.len().max(1) as f64
    }
}

/// Splits samples across `devices` with per-class Dirichlet(β) proportions.
///
/// Each class's rows are shuffled and cut at the rounded cumulative
/// proportions, so the partitions are disjoint and cover every row. A draw
/// that leaves some device empty is discarded and redrawn.
pub fn dirichlet_partition(
    labels: &[usize],
    devices: usize,
    beta: f64,
    rng: &SeededRng,
) -> Result<Vec<ClientPartition>> {
    if devices == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if labels.len() < devices {
        return Err(Error::PartitionRetries {
            retries: 0,
            reason: format!("{} samples cannot cover {devices} devices", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    for attempt in 0..MAX_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); devices];
        for (c, rows) in by_class.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut stream = rng.derive(&[attempt as u64, c as u64]).stream();
            let mut rows = rows.clone();
            rows.shuffle(&mut stream);
            let draws: Vec<f64> = (0..devices).map(|_| gamma.sample(&mut stream)).collect();
            let total: f64 = draws.iter().sum();
            let mut start = 0;
            let mut acc = 0.0;
            for (d, g) in draws.iter().enumerate() {
                acc += g;
                let end = if d + 1 == devices {
                    rows.len()
                } else if total > 0.0 {
                    ((acc / total) * rows.len() as f64).round() as usize
                } else {
                    start
                };
                let end = end.clamp(start, rows.len());
                assigned[d].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(device_id, mut indices)| {
                    indices.sort_unstable();
                    let mut label_histogram = vec![0; classes];
                    for &i in &indices {
                        label_histogram[labels[i]] += 1;
                    }
                    ClientPartition {
                        device_id,
                        indices,
                        label_histogram,
                    }
                })
                .collect());
        }
    }
    Err(Error::PartitionRetries {
        retries: MAX_RETRIES,
        reason: format!("some of {devices} devices stayed empty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn single_device_takes_everything() {
        let labels = balanced(4, 10);
        let p = dirichlet_partition(&labels, 1, 0.5, &SeededRng::new(1, 0)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].indices, (0..40).collect::<Vec<_>>());
        assert_eq!(p[0].label_histogram, vec![10; 4]);
    }

    #[test]
    fn huge_beta_is_near_uniform() {
        let labels = balanced(10, 1000);
        let p = dirichlet_partition(&labels, 10, 1e6, &SeededRng::new(2, 0)).unwrap();
        for part in &p {
            for &count in &part.label_histogram {
                assert!((count as f64 - 100.0).abs() <= 10.0, "{count}");
            }
        }
    }

    #[test]
    fn small_beta_is_skewed() {
        let labels = balanced(10, 1000);
        let p = dirichlet_partition(&labels, 100, 0.1, &SeededRng::new(3, 0)).unwrap();
        let mut shares: Vec<f64> = p.iter().map(ClientPartition::dominant_share).collect();
        shares.sort_by(f64::total_cmp);
        assert!(shares[50] >= 0.5, "median dominant share {}", shares[50]);
    }

    #[test]
    fn impossible_requests_fail() {
        let labels = balanced(2, 3);
        assert!(matches!(
            dirichlet_partition(&labels, 10, 0.1, &SeededRng::new(0, 0)),
            Err(Error::PartitionRetries { .. })
        ));
        assert!(dirichlet_partition(&labels, 0, 0.1, &SeededRng::new(0, 0)).is_err());
        assert!(dirichlet_partition(&labels, 2, 0.0, &SeededRng::new(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(seed in 0u64..500, devices in 1usize..12, beta in 0.3f64..5.0) {
            let labels = balanced(5, 40);
            let p = dirichlet_partition(&labels, devices, beta, &SeededRng::new(seed, 0)).unwrap();
            let mut all: Vec<usize> = p.iter().flat_map(|c| c.indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..200).collect::<Vec<_>>());
            prop_assert!(p.iter().all(|c| !c.is_empty()));
            prop_assert!(p.iter().all(|c| c.label_histogram.iter().sum::<usize>() == c.len()));
        }
    }
}
