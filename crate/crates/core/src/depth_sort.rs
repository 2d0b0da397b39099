//! Depth sorting for the blend stage: bucket scatter followed by a bitonic
//! network per bucket, with exact operation accounting.
//!
//! Bucket boundaries propagate frame to frame: the quantiles realized by one
//! frame's sorted output initialize the next frame's buckets, which keeps
//! them balanced under small camera motion and skips the min/max pre-scan a
//! cold start needs. A uniform re-initialization per frame serves as the
//! baseline the stats are compared against.

/// One sortable entry: camera-space depth with the Gaussian id as tie-break,
/// making every sort a total order and bit-reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortKey {
    pub depth: f64,
    pub id: u32,
}

impl SortKey {
    const SENTINEL: SortKey = SortKey { depth: f64::INFINITY, id: u32::MAX };

    fn le(&self, other: &SortKey) -> bool {
        match self.depth.total_cmp(&other.depth) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => self.id <= other.id,
        }
    }
}

/// Per-block bucket boundaries carried frame to frame. `valid` is false
/// until the first frame touching the block completes.
#[derive(Debug, Clone, Default)]
pub struct BucketState {
    /// N-1 ascending cut depths (ties allowed when the data had duplicate
    /// quantiles; tied cuts simply leave buckets empty).
    pub boundaries: Vec<f64>,
    pub valid: bool,
}

impl BucketState {
    pub fn invalid() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SortStats {
    pub scatter_ops: u64,
    pub compare_exchanges: u64,
    pub stages: u64,
    pub max_bucket: u64,
}

impl SortStats {
    pub fn merge(&mut self, other: &SortStats) {
        self.scatter_ops += other.scatter_ops;
        self.compare_exchanges += other.compare_exchanges;
        self.stages += other.stages;
        self.max_bucket = self.max_bucket.max(other.max_bucket);
    }
}

/// N-1 equally spaced cuts in `(min_d, max_d)`.
///
/// A collapsed range (`min_d == max_d`) degenerates to cuts strictly above
/// the data so every key lands in bucket 0.
pub fn init_uniform(min_d: f64, max_d: f64, n_buckets: usize) -> Vec<f64> {
    assert!(n_buckets >= 2 && n_buckets.is_power_of_two());
    if min_d >= max_d {
        return (1..n_buckets).map(|k| min_d + k as f64).collect();
    }
    let step = (max_d - min_d) / n_buckets as f64;
    (1..n_buckets).map(|k| min_d + step * k as f64).collect()
}

/// Index of the half-open interval containing `depth`. Keys below the first
/// cut clamp to bucket 0 and keys at or above the last cut clamp to the top
/// bucket, so stale boundaries never lose keys.
pub fn assign_bucket(boundaries: &[f64], depth: f64) -> usize {
    boundaries.partition_point(|b| *b <= depth)
}

/// Batcher's bitonic network over the keys, padded to the next power of two
/// `m` with +∞ sentinels. Returns the exact network cost:
/// `stages = log₂m·(log₂m+1)/2` and `compare_exchanges = (m/2)·stages`.
pub fn bitonic_sort(keys: &mut Vec<SortKey>) -> SortStats {
    let n = keys.len();
    let mut stats = SortStats::default();
    if n <= 1 {
        return stats;
    }
    let m = n.next_power_of_two();
    keys.resize(m, SortKey::SENTINEL);

    let mut k = 2;
    while k <= m {
        let mut j = k / 2;
        while j > 0 {
            stats.stages += 1;
            for i in 0..m {
                let partner = i ^ j;
                if partner > i {
                    stats.compare_exchanges += 1;
                    let ascending = (i & k) == 0;
                    if keys[partner].le(&keys[i]) == ascending && keys[i] != keys[partner] {
                        keys.swap(i, partner);
                    }
                }
            }
            j /= 2;
        }
        k *= 2;
    }
    keys.truncate(n);
    debug_assert_eq!(stats.compare_exchanges, (m as u64 / 2) * stats.stages);
    stats
}

/// Result of sorting one tile-block's keys.
#[derive(Debug, Clone)]
pub struct SortOutcome {
    pub keys: Vec<SortKey>,
    pub stats: SortStats,
    /// Boundary state for the next frame: equal-count quantiles of the
    /// realized sorted order.
    pub state: BucketState,
    /// The cuts this sort actually scattered with (propagated or uniform).
    pub boundaries_used: Vec<f64>,
}

/// Bucket-scatter + per-bucket bitonic sort of one block's keys.
///
/// An invalid state (first frame touching the block) costs a min/max
/// pre-scan, accounted as one scatter op per key, before the uniform
/// initialization; a valid state skips straight to the scatter, so
/// `scatter_ops` is exactly the key count.
pub fn sort_block(mut keys: Vec<SortKey>, state: &BucketState, n_buckets: usize) -> SortOutcome {
    assert!(n_buckets >= 2 && n_buckets.is_power_of_two());
    let mut stats = SortStats::default();
    if keys.is_empty() {
        return SortOutcome {
            keys,
            stats,
            state: state.clone(),
            boundaries_used: state.boundaries.clone(),
        };
    }

    let boundaries_used = if state.valid {
        state.boundaries.clone()
    } else {
        let mut min_d = f64::INFINITY;
        let mut max_d = f64::NEG_INFINITY;
        for key in &keys {
            min_d = min_d.min(key.depth);
            max_d = max_d.max(key.depth);
        }
        stats.scatter_ops += keys.len() as u64;
        init_uniform(min_d, max_d, n_buckets)
    };

    let mut buckets: Vec<Vec<SortKey>> = vec![Vec::new(); n_buckets];
    for key in keys.drain(..) {
        stats.scatter_ops += 1;
        buckets[assign_bucket(&boundaries_used, key.depth)].push(key);
    }

    let mut out = Vec::with_capacity(buckets.iter().map(Vec::len).sum());
    for bucket in &mut buckets {
        stats.max_bucket = stats.max_bucket.max(bucket.len() as u64);
        let bucket_stats = bitonic_sort(bucket);
        stats.stages += bucket_stats.stages;
        stats.compare_exchanges += bucket_stats.compare_exchanges;
        out.append(bucket);
    }

    // Cuts are order-consistent, so bucket concatenation is globally sorted.
    let n = out.len();
    let boundaries = (1..n_buckets)
        .map(|k| {
            let rank = ((k * n) / n_buckets).max(1); // 1-indexed order statistic
            out[rank - 1].depth
        })
        .collect();
    SortOutcome {
        keys: out,
        stats,
        state: BucketState { boundaries, valid: true },
        boundaries_used,
    }
}

/// Element-wise mean of several boundary vectors of equal length, re-sorted
/// ascending in case the averaging broke monotonicity.
pub fn average_boundaries<'a, I>(boundaries: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for b in boundaries {
        if acc.is_empty() {
            acc = b.to_vec();
        } else {
            assert_eq!(acc.len(), b.len(), "boundary vectors must share N");
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v;
            }
        }
        count += 1;
    }
    if count > 1 {
        let inv = 1.0 / count as f64;
        for a in &mut acc {
            *a *= inv;
        }
    }
    acc.sort_by(f64::total_cmp);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn reference_sort(mut keys: Vec<SortKey>) -> Vec<SortKey> {
        keys.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
        keys
    }

    fn network_stages(m: u64) -> u64 {
        if m <= 1 {
            return 0;
        }
        let lg = m.ilog2() as u64;
        lg * (lg + 1) / 2
    }

    fn keys_from(depths: &[f64]) -> Vec<SortKey> {
        depths
            .iter()
            .enumerate()
            .map(|(i, &d)| SortKey { depth: d, id: i as u32 })
            .collect()
    }

    #[test]
    fn init_uniform_examples() {
        assert_eq!(init_uniform(0.0, 8.0, 4), vec![2.0, 4.0, 6.0]);
        assert_eq!(init_uniform(0.0, 1.0, 2), vec![0.5]);
        assert_eq!(
            init_uniform(-3.0, 5.0, 8),
            vec![-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn init_uniform_degenerate_range_sends_all_to_bucket_zero() {
        let cuts = init_uniform(3.0, 3.0, 4);
        assert_eq!(cuts.len(), 3);
        assert_eq!(assign_bucket(&cuts, 3.0), 0);
        assert_eq!(assign_bucket(&cuts, -100.0), 0);
    }

    #[test]
    fn assign_bucket_examples() {
        let cuts = [2.0, 4.0, 6.0];
        assert_eq!(assign_bucket(&cuts, 3.0), 1);
        assert_eq!(assign_bucket(&cuts, -10.0), 0);
        assert_eq!(assign_bucket(&cuts, 6.0), 3);
    }

    #[test]
    fn bitonic_two_and_four_element_costs() {
        let mut keys = keys_from(&[3.0, 1.0]);
        let stats = bitonic_sort(&mut keys);
        assert_eq!(keys.iter().map(|k| k.depth).collect::<Vec<_>>(), vec![1.0, 3.0]);
        assert_eq!(stats.stages, 1);
        assert_eq!(stats.compare_exchanges, 1);

        let mut keys = keys_from(&[4.0, 2.0, 3.0, 1.0]);
        let stats = bitonic_sort(&mut keys);
        assert_eq!(stats.stages, 3);
        assert_eq!(stats.compare_exchanges, 6);
        assert_eq!(keys, reference_sort(keys_from(&[4.0, 2.0, 3.0, 1.0])));
    }

    #[test]
    fn bitonic_matches_reference_sort() {
        let mut r = rng(71);
        for _ in 0..1000 {
            let n = r.random_range(0..80);
            let keys: Vec<SortKey> = (0..n)
                .map(|i| SortKey {
                    depth: (r.random_range(0..20) as f64) * 0.5, // force ties
                    id: i as u32,
                })
                .collect();
            let mut sorted = keys.clone();
            let stats = bitonic_sort(&mut sorted);
            assert_eq!(sorted, reference_sort(keys));
            let m = n.max(1).next_power_of_two() as u64;
            if n > 1 {
                assert_eq!(stats.stages, network_stages(m));
                assert_eq!(stats.compare_exchanges, m / 2 * stats.stages);
            }
        }
    }

    #[test]
    fn sort_block_empty_passes_state_through() {
        let state = BucketState { boundaries: vec![1.0, 2.0, 3.0], valid: true };
        let out = sort_block(Vec::new(), &state, 4);
        assert!(out.keys.is_empty());
        assert_eq!(out.state.boundaries, state.boundaries);
        assert_eq!(out.stats, SortStats::default());
    }

    #[test]
    fn sort_block_frame0_quantile_boundaries() {
        let keys = keys_from(&[5.0, 1.0, 7.0, 3.0, 8.0, 2.0, 6.0, 4.0]);
        let out = sort_block(keys, &BucketState::invalid(), 4);
        let depths: Vec<f64> = out.keys.iter().map(|k| k.depth).collect();
        assert_eq!(depths, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        // 2nd, 4th and 6th order statistics.
        assert_eq!(out.state.boundaries, vec![2.0, 4.0, 6.0]);
        assert!(out.state.valid);
        // Frame 0 pays the min/max pre-scan: one op per key, twice.
        assert_eq!(out.stats.scatter_ops, 16);
    }

    #[test]
    fn sort_block_balanced_stage_formula() {
        let n = 512usize;
        let n_buckets = 8usize;
        let keys = keys_from(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
        let boundaries: Vec<f64> = (1..n_buckets).map(|k| (k * n / n_buckets) as f64).collect();
        let state = BucketState { boundaries, valid: true };
        let out = sort_block(keys, &state, n_buckets);
        assert_eq!(out.stats.max_bucket, (n / n_buckets) as u64);
        let per_bucket = network_stages((n / n_buckets) as u64);
        assert_eq!(out.stats.stages, n_buckets as u64 * per_bucket);
        assert_eq!(out.stats.scatter_ops, n as u64); // no pre-scan with valid state
    }

    #[test]
    fn sort_block_degenerates_to_single_bitonic_when_state_is_stale() {
        let mut r = rng(73);
        let keys: Vec<SortKey> = (0..100)
            .map(|i| SortKey { depth: r.random_range(10.0..11.0), id: i })
            .collect();
        // Previous frame put everything far below; all keys land in the top bucket.
        let state = BucketState { boundaries: vec![1.0, 2.0, 3.0], valid: true };
        let out = sort_block(keys.clone(), &state, 4);
        assert_eq!(out.keys, reference_sort(keys.clone()));
        let mut lone = keys;
        let lone_stats = bitonic_sort(&mut lone);
        assert_eq!(out.stats.stages, lone_stats.stages);
        assert_eq!(out.stats.compare_exchanges, lone_stats.compare_exchanges);
        assert_eq!(out.stats.max_bucket, 100);
    }

    #[test]
    fn sort_block_correct_under_random_stale_states() {
        let mut r = rng(79);
        for _ in 0..1000 {
            let n = r.random_range(0..200);
            let keys: Vec<SortKey> = (0..n)
                .map(|i| SortKey { depth: r.random_range(-50.0..50.0), id: i as u32 })
                .collect();
            let n_buckets = *[4usize, 8, 16].choose(&mut r).unwrap();
            let state = if r.random_bool(0.5) {
                BucketState::invalid()
            } else {
                let mut cuts: Vec<f64> =
                    (1..n_buckets).map(|_| r.random_range(-80.0..80.0)).collect();
                cuts.sort_by(f64::total_cmp);
                BucketState { boundaries: cuts, valid: true }
            };
            let out = sort_block(keys.clone(), &state, n_buckets);
            assert_eq!(out.keys, reference_sort(keys));
        }
    }

    #[test]
    fn sort_block_is_deterministic() {
        let mut r = rng(83);
        let keys: Vec<SortKey> = (0..333)
            .map(|i| SortKey { depth: r.random_range(0.0..9.0), id: i })
            .collect();
        let state = BucketState { boundaries: vec![2.0, 4.0, 5.0, 5.5, 6.0, 7.0, 8.0], valid: true };
        let a = sort_block(keys.clone(), &state, 8);
        let b = sort_block(keys, &state, 8);
        assert_eq!(a.keys, b.keys);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.state.boundaries, b.state.boundaries);
    }

    /// Propagated quantile boundaries keep buckets balanced under bounded
    /// frame-to-frame drift: max_bucket ≤ 2·n/N on at least 95% of frames.
    #[test]
    fn propagated_boundaries_stay_balanced_under_drift() {
        let mut r = rng(89);
        let n_buckets = 8usize;
        let n0 = 64 * n_buckets * 2;
        // Skewed distribution: density ~ 1/x over [1, e^5].
        let mut depths: Vec<f64> = (0..n0).map(|_| r.random_range(0.0..5.0f64).exp()).collect();
        let mut state = BucketState::invalid();
        let mut balanced = 0usize;
        let frames = 100usize;
        let mut next_id = 0u32;
        for frame in 0..frames {
            let keys: Vec<SortKey> = depths
                .iter()
                .map(|&d| {
                    next_id += 1;
                    SortKey { depth: d, id: next_id }
                })
                .collect();
            let n = keys.len() as u64;
            let out = sort_block(keys, &state, n_buckets);
            state = out.state;
            if frame > 0 && out.stats.max_bucket <= 2 * n / n_buckets as u64 {
                balanced += 1;
            }
            // Drift: perturb each depth, then churn 5% of the population.
            let delta = 1.0;
            for d in &mut depths {
                *d += r.random_range(-delta..delta);
            }
            let churn = depths.len() / 20;
            for _ in 0..churn {
                let victim = r.random_range(0..depths.len());
                depths.swap_remove(victim);
                depths.push(r.random_range(0.0..5.0f64).exp());
            }
        }
        assert!(
            balanced * 100 >= (frames - 1) * 95,
            "balanced on only {balanced}/{} drift frames",
            frames - 1
        );
    }

    #[test]
    fn average_boundaries_examples() {
        let a = vec![2.0, 4.0];
        let b = vec![4.0, 6.0];
        assert_eq!(average_boundaries([a.as_slice(), b.as_slice()]), vec![3.0, 5.0]);
        assert_eq!(average_boundaries([a.as_slice(), a.as_slice()]), a);
    }

    #[test]
    fn average_boundaries_always_ascending() {
        let mut r = rng(97);
        for _ in 0..200 {
            let n = r.random_range(1..10);
            let count = r.random_range(1..6);
            let states: Vec<Vec<f64>> = (0..count)
                .map(|_| (0..n).map(|_| r.random_range(-10.0..10.0)).collect())
                .collect();
            let avg = average_boundaries(states.iter().map(Vec::as_slice));
            assert_eq!(avg.len(), n);
            for w in avg.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }
}
