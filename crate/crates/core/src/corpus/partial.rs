//! Bundle splits, partial-bundle views, and view corruption.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Seeds handed to the model and the held-out targets of one bundle.
///
/// Both lists are sorted ascending and disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialBundleView {
    pub bundle: usize,
    pub seeds: Vec<usize>,
    pub targets: Vec<usize>,
}

impl PartialBundleView {
    pub fn members(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.seeds.iter().chain(&self.targets).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Bundle indices of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n_bundles` with `seed` and cuts it 8:1:1.
///
/// Sizes are `floor(0.8 n)`, `floor(0.1 n)` and the remainder.
pub fn split_indices(n_bundles: usize, seed: u64) -> Result<Split, CorpusError> {
    if n_bundles < 10 {
        return Err(CorpusError::InsufficientData {
            needed: 10,
            got: n_bundles,
        });
    }
    let mut order: Vec<usize> = (0..n_bundles).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n_bundles * 8 / 10;
    let n_val = n_bundles / 10;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

/// Number of seeds drawn from a bundle of `size` items at `ratio`.
pub fn seed_count(size: usize, ratio: f64) -> usize {
    let floor = (ratio * size as f64).floor() as usize;
    floor.max(1).min(size - 1)
}

/// Draws `max(1, floor(ratio·|b|))` seeds uniformly without replacement,
/// keeping at least one target.
pub fn sample_partial<R: Rng + ?Sized>(
    bundle: usize,
    items: &[usize],
    seed_ratio: f64,
    rng: &mut R,
) -> Result<PartialBundleView, CorpusError> {
    if items.len() < 2 {
        return Err(CorpusError::Contract(format!(
            "bundle {bundle} has {} item(s); partial views need at least 2",
            items.len()
        )));
    }
    if !(seed_ratio > 0.0 && seed_ratio < 1.0) {
        return Err(CorpusError::Contract(format!(
            "seed ratio must lie in (0, 1), got {seed_ratio}"
        )));
    }
    let k = seed_count(items.len(), seed_ratio);
    let mut chosen = vec![false; items.len()];
    for i in index::sample(rng, items.len(), k) {
        chosen[i] = true;
    }
    let (mut seeds, mut targets) = (Vec::with_capacity(k), Vec::new());
    for (&item, pick) in items.iter().zip(chosen) {
        if pick {
            seeds.push(item);
        } else {
            targets.push(item);
        }
    }
    seeds.sort_unstable();
    targets.sort_unstable();
    Ok(PartialBundleView {
        bundle,
        seeds,
        targets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Sparsify,
    Noisify,
}

/// Removes (sparsify) or adds (noisify) `floor(rate·|seeds|)` seeds.
///
/// Sparsify always keeps one seed. Noisify draws uniformly from items outside
/// the original bundle. Targets are never touched.
pub fn corrupt_partial<R: Rng + ?Sized>(
    view: &PartialBundleView,
    mode: Corruption,
    rate: f64,
    n_items: usize,
    rng: &mut R,
) -> Result<PartialBundleView, CorpusError> {
    if !(0.0..=0.9).contains(&rate) {
        return Err(CorpusError::Contract(format!(
            "corruption rate must lie in [0, 0.9], got {rate}"
        )));
    }
    let count = (rate * view.seeds.len() as f64).floor() as usize;
    let mut out = view.clone();
    if count == 0 {
        return Ok(out);
    }
    match mode {
        Corruption::Sparsify => {
            let keep = view.seeds.len().saturating_sub(count).max(1);
            let mut kept: Vec<usize> = index::sample(rng, view.seeds.len(), keep)
                .into_iter()
                .map(|i| view.seeds[i])
                .collect();
            kept.sort_unstable();
            out.seeds = kept;
        }
        Corruption::Noisify => {
            let members = view.members();
            let outside: Vec<usize> = (0..n_items)
                .filter(|i| members.binary_search(i).is_err())
                .collect();
            let take = count.min(outside.len());
            out.seeds
                .extend(index::sample(rng, outside.len(), take).into_iter().map(|i| outside[i]));
            out.seeds.sort_unstable();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_indices(20, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        assert_eq!(split_indices(20, 1).unwrap(), s);
        assert!(matches!(
            split_indices(9, 1),
            Err(CorpusError::InsufficientData { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn partial_counts() {
        let v = sample_partial(0, &[1, 2, 3, 4], 0.5, &mut rng()).unwrap();
        assert_eq!((v.seeds.len(), v.targets.len()), (2, 2));
        let v = sample_partial(0, &[5, 9], 0.9, &mut rng()).unwrap();
        assert_eq!((v.seeds.len(), v.targets.len()), (1, 1));
        assert!(sample_partial(0, &[5], 0.5, &mut rng()).is_err());
        assert!(sample_partial(0, &[5, 6], 1.0, &mut rng()).is_err());
    }

    #[test]
    fn seed_frequency_is_uniform() {
        let mut r = rng();
        let items = [10, 11, 12, 13, 14];
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let v = sample_partial(0, &items, 0.5, &mut r).unwrap();
            for s in v.seeds {
                counts[s - 10] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.4).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn corruption_cases() {
        let view = PartialBundleView {
            bundle: 0,
            seeds: vec![0, 1, 2, 3],
            targets: vec![4, 5],
        };
        let same = corrupt_partial(&view, Corruption::Sparsify, 0.0, 20, &mut rng()).unwrap();
        assert_eq!(same, view);
        let sparse = corrupt_partial(&view, Corruption::Sparsify, 0.5, 20, &mut rng()).unwrap();
        assert_eq!(sparse.seeds.len(), 2);
        assert!(sparse.seeds.iter().all(|s| view.seeds.contains(s)));
        assert_eq!(sparse.targets, view.targets);
        let noisy = corrupt_partial(&view, Corruption::Noisify, 0.5, 20, &mut rng()).unwrap();
        assert_eq!(noisy.seeds.len(), 6);
        let added: Vec<_> = noisy.seeds.iter().filter(|s| !view.seeds.contains(s)).collect();
        assert_eq!(added.len(), 2);
        assert!(added.iter().all(|&&s| s >= 6));
        assert!(corrupt_partial(&view, Corruption::Noisify, 0.95, 20, &mut rng()).is_err());
    }

    #[test]
    fn sparsify_keeps_one_seed() {
        let view = PartialBundleView {
            bundle: 0,
            seeds: vec![3],
            targets: vec![4],
        };
        let out = corrupt_partial(&view, Corruption::Sparsify, 0.9, 10, &mut rng()).unwrap();
        assert_eq!(out.seeds, vec![3]);
    }
}
