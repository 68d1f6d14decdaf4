//! Deterministic view splits and few-shot sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of few-shot adaptation views.
pub const DEFAULT_FEWSHOT: usize = 10;
pub const MIN_SPLIT_VIEWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Uniformly spaced viewpoints along the sorted view order.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub preprocess_train: Vec<String>,
    pub reconstruction: Vec<String>,
    pub test: Vec<String>,
    pub fewshot: Vec<String>,
}

/// Index form of a split over `n` sorted views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub reconstruction: Vec<usize>,
    pub test: Vec<usize>,
}

/// 75 % of views (rounded down) to preprocessing training, the rest to
/// reconstruction; 12.5 % of all views (rounded down) from the
/// reconstruction set to test. The seed only shifts the sampling phase.
pub fn split_indices(n: usize, policy: SplitPolicy, seed: u64) -> Result<SplitIndices> {
    if n < MIN_SPLIT_VIEWS {
        return Err(Error::InvalidArgument(format!(
            "splitting needs at least {MIN_SPLIT_VIEWS} views, got {n}"
        )));
    }
    let SplitPolicy::Uniform = policy;
    let n_train = n * 3 / 4;
    let n_recon = n - n_train;
    let n_test = n / 8;
    let stride = n as f64 / n_recon as f64;
    let phase = (seed % stride.floor() as u64) as f64;
    let reconstruction: Vec<usize> = (0..n_recon)
        .map(|i| (phase + i as f64 * stride).floor() as usize)
        .collect();
    let train = (0..n).filter(|i| !reconstruction.contains(i)).collect();
    let test = uniform_pick(&reconstruction, n_test);
    Ok(SplitIndices {
        train,
        reconstruction,
        test,
    })
}

fn uniform_pick<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    let n = items.len();
    (0..k).map(|i| items[i * n / k].clone()).collect()
}

pub fn make_splits(view_ids: &[String], policy: SplitPolicy, seed: u64) -> Result<SplitSpec> {
    let mut ids = view_ids.to_vec();
    ids.sort();
    let idx = split_indices(ids.len(), policy, seed)?;
    let pick = |v: &[usize]| v.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let mut spec = SplitSpec {
        preprocess_train: pick(&idx.train),
        reconstruction: pick(&idx.reconstruction),
        test: pick(&idx.test),
        fewshot: Vec::new(),
    };
    spec.fewshot = sample_fewshot(&spec, DEFAULT_FEWSHOT.min(spec.preprocess_train.len()))?;
    Ok(spec)
}

/// `k` views at uniform index stride over the sorted training split.
pub fn sample_fewshot(split: &SplitSpec, k: usize) -> Result<Vec<String>> {
    let mut train = split.preprocess_train.clone();
    train.sort();
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} few-shot views from a training split of {}",
            train.len()
        )));
    }
    Ok(uniform_pick(&train, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:03}")).collect()
    }

    #[test]
    fn sixteen_views() {
        let s = make_splits(&ids(16), SplitPolicy::Uniform, 0).unwrap();
        assert_eq!((s.preprocess_train.len(), s.reconstruction.len(), s.test.len()), (12, 4, 2));
        assert_eq!(s.fewshot.len(), 10);
    }

    #[test]
    fn eight_views() {
        let s = make_splits(&ids(8), SplitPolicy::Uniform, 0).unwrap();
        assert_eq!((s.preprocess_train.len(), s.reconstruction.len(), s.test.len()), (6, 2, 1));
    }

    #[test]
    fn too_few_views() {
        assert!(make_splits(&ids(7), SplitPolicy::Uniform, 0).is_err());
    }

    #[test]
    fn fewshot_stride() {
        let spec = SplitSpec {
            preprocess_train: ids(100),
            reconstruction: vec![],
            test: vec![],
            fewshot: vec![],
        };
        let picked = sample_fewshot(&spec, 10).unwrap();
        let expect: Vec<String> = (0..10).map(|i| format!("v{:03}", i * 10)).collect();
        assert_eq!(picked, expect);
        assert_eq!(sample_fewshot(&spec, 100).unwrap(), spec.preprocess_train);
        assert!(sample_fewshot(&spec, 101).is_err());
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 8usize..300, seed in 0u64..50) {
            let a = make_splits(&ids(n), SplitPolicy::Uniform, seed).unwrap();
            let b = make_splits(&ids(n), SplitPolicy::Uniform, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let mut all: Vec<_> = a.preprocess_train.iter().chain(&a.reconstruction).cloned().collect();
            all.sort();
            prop_assert_eq!(all, ids(n));
            prop_assert!(a.preprocess_train.iter().all(|v| !a.reconstruction.contains(v)));
            prop_assert!(a.test.iter().all(|v| a.reconstruction.contains(v)));
            prop_assert!(a.fewshot.iter().all(|v| a.preprocess_train.contains(v)));
            let frac = a.preprocess_train.len() as f64 - 0.75 * n as f64;
            prop_assert!(frac.abs() <= 1.0);
            prop_assert_eq!(a.test.len(), n / 8);
        }
    }
}
