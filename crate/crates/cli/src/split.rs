//! Seeded proportional train/validation/test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SplitRatio;

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
pub fn split_counts(n: usize, ratio: SplitRatio) -> [usize; 3] {
    let total: usize = ratio.0.iter().sum();
    let mut counts = ratio.0.map(|r| n * r / total);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    // Remainders compared as exact integers `n * r mod total`.
    order.sort_by_key(|&i| std::cmp::Reverse((n * ratio.0[i]) % total));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Shuffles with `seed`, then cuts into train, validation and test.
pub fn split<T: Clone>(items: &[T], ratio: SplitRatio, seed: u64) -> [Vec<T>; 3] {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_counts(items.len(), ratio);
    let test = shuffled.split_off(a + b);
    let val = shuffled.split_off(a);
    [shuffled, val, test]
}
