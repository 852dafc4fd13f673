//! Few-shot episodes and proportional subsets.

use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub seed: u64,
    /// Manifest item indices, `selected[class]` holding exactly `k` entries.
    pub selected: Vec<Vec<usize>>,
}

impl Episode {
    pub fn total(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    /// Class-major flat list of item indices.
    pub fn items(&self) -> Vec<usize> {
        self.selected.iter().flatten().copied().collect()
    }
}

/// Draws `k` items per class from `split` without replacement. One stream,
/// keyed by `(seed, label)`, is consumed class by class in label order.
pub fn sample_balanced(
    manifest: &DatasetManifest,
    split: Split,
    k: usize,
    seed: u64,
    label: &str,
) -> Result<Episode> {
    let mut rng = Rng::stream(seed, label);
    let pools = manifest.by_class(split);
    let mut selected = Vec::with_capacity(pools.len());
    for (c, pool) in pools.into_iter().enumerate() {
        if pool.len() < k {
            return Err(Error::InsufficientData(format!(
                "class '{}' has {} {} items, {k} requested",
                manifest.classes[c],
                pool.len(),
                split.name()
            )));
        }
        let mut pool = pool;
        rng.shuffle(&mut pool);
        pool.truncate(k);
        selected.push(pool);
    }
    Ok(Episode { k, seed, selected })
}

/// The support episode used for few-shot training.
pub fn sample_episode(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Episode> {
    sample_balanced(manifest, Split::Train, k, seed, "episode")
}

/// `k·C / |train|`.
pub fn shot_fraction(manifest: &DatasetManifest, k: usize) -> f64 {
    let train = manifest.indices(Split::Train).len();
    shot_fraction_counts(manifest.num_classes(), k, train)
}

pub fn shot_fraction_counts(classes: usize, k: usize, train_items: usize) -> f64 {
    (k * classes) as f64 / train_items as f64
}

/// Takes `floor(fraction·n_c)` train items of each class from a per-seed
/// permutation. Because every fraction takes a prefix of the same
/// permutation, subsets for increasing fractions are nested.
pub fn fraction_subsample(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for (c, mut pool) in manifest.by_class(Split::Train).into_iter().enumerate() {
        let mut rng = Rng::stream(seed, &format!("fraction.class{c}"));
        rng.shuffle(&mut pool);
        let n = (fraction * pool.len() as f64 + 1e-9).floor() as usize;
        if n == 0 {
            return Err(Error::InsufficientData(format!(
                "fraction {fraction} leaves class '{}' with no items",
                manifest.classes[c]
            )));
        }
        pool.truncate(n);
        out.push(pool);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{Item, Norm};

    pub(crate) fn manifest(classes: usize, per_class: usize) -> DatasetManifest {
        let mut items = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                items.push(Item {
                    path: format!("{c}_{i}"),
                    label: c,
                    split: Split::Train,
                });
            }
            for i in 0..3 {
                items.push(Item {
                    path: format!("v{c}_{i}"),
                    label: c,
                    split: Split::Val,
                });
            }
        }
        DatasetManifest {
            name: "m".into(),
            classes: (0..classes).map(|c| format!("c{c}")).collect(),
            norm: Norm::identity(1),
            items,
        }
    }

    #[test]
    fn counts_match_paper_protocol() {
        let m = manifest(5, 60);
        let e = sample_episode(&m, 2, 0).unwrap();
        assert_eq!(e.total(), 10);
        let m2 = manifest(2, 10);
        assert_eq!(sample_episode(&m2, 1, 3).unwrap().total(), 2);
        for k in [1, 2, 4, 8, 16, 50] {
            let e = sample_episode(&m, k, 7).unwrap();
            assert_eq!(e.total(), 5 * k);
            assert!(e.selected.iter().all(|s| s.len() == k));
        }
    }

    #[test]
    fn deterministic_and_unique() {
        let m = manifest(3, 20);
        let a = sample_episode(&m, 8, 11).unwrap();
        assert_eq!(a, sample_episode(&m, 8, 11).unwrap());
        assert_ne!(a, sample_episode(&m, 8, 12).unwrap());
        for (c, s) in a.selected.iter().enumerate() {
            let mut u = s.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), s.len());
            assert!(s.iter().all(|&i| m.items[i].split == Split::Train && m.items[i].label == c));
        }
    }

    #[test]
    fn too_few_items_names_class() {
        let m = manifest(2, 3);
        match sample_episode(&m, 4, 0) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("'c0'"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shot_fraction_values() {
        assert!((shot_fraction_counts(25, 50, 28_409) - 0.0440).abs() < 5e-5);
        let m = manifest(4, 10);
        assert_eq!(shot_fraction(&m, 10), 1.0);
        assert_eq!(shot_fraction(&m, 0), 0.0);
    }

    #[test]
    fn fractions_are_nested_and_sized() {
        let m = manifest(3, 100);
        let small = fraction_subsample(&m, 0.05, 1).unwrap();
        assert!(small.iter().all(|s| s.len() == 5));
        let big = fraction_subsample(&m, 0.5, 1).unwrap();
        for (s, b) in small.iter().zip(&big) {
            assert!(s.iter().all(|i| b.contains(i)));
        }
        let full = fraction_subsample(&m, 1.0, 1).unwrap();
        assert!(full.iter().all(|s| s.len() == 100));
        assert!(matches!(
            fraction_subsample(&manifest(2, 10), 0.05, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(fraction_subsample(&m, 0.0, 0).is_err());
    }
}
