use rand::seq::SliceRandom;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Indices of each class, each list shuffled with the dataset seed.
fn shuffled_by_class(ds: &Dataset, salt: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng::substream(ds.seed, streams::RESAMPLE, salt * 1000 + c as u64));
    }
    by_class
}

/// Target size of class `c` under an exponential long-tail profile:
/// `round(n_max · IR^(-c/(C-1)))`.
pub fn longtail_count(n_max: usize, imbalance_ratio: f64, class: usize, classes: usize) -> usize {
    if classes < 2 {
        return n_max;
    }
    let frac = class as f64 / (classes - 1) as f64;
    (n_max as f64 * imbalance_ratio.powf(-frac)).round() as usize
}

pub fn longtail_indices(ds: &Dataset, imbalance_ratio: f64) -> Result<Vec<usize>> {
    if !(imbalance_ratio >= 1.0 && imbalance_ratio.is_finite()) {
        return Err(Error::Argument(format!(
            "imbalance ratio {imbalance_ratio} must be >= 1"
        )));
    }
    let by_class = shuffled_by_class(ds, 1);
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut keep = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let target = longtail_count(n_max, imbalance_ratio, c, ds.classes).min(idx.len());
        if target == 0 {
            return Err(Error::Argument(format!(
                "imbalance ratio {imbalance_ratio} empties class {c}"
            )));
        }
        keep.extend_from_slice(&idx[..target]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Exponential long-tail subsample: class 0 keeps the most samples and class
/// `C-1` roughly `1/IR` as many. Sample order is preserved.
pub fn resample_longtail(ds: &Dataset, imbalance_ratio: f64) -> Result<Dataset> {
    ds.subset(&longtail_indices(ds, imbalance_ratio)?)
}

pub fn fewshot_indices(ds: &Dataset, shots: usize) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::Argument("shots must be >= 1".into()));
    }
    let by_class = shuffled_by_class(ds, 2);
    let mut keep = Vec::with_capacity(shots * ds.classes);
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < shots {
            return Err(Error::Argument(format!(
                "class {c} has {} samples, fewer than {shots} shots",
                idx.len()
            )));
        }
        keep.extend_from_slice(&idx[..shots]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Exactly `shots` samples per class, chosen with the dataset seed.
pub fn resample_fewshot(ds: &Dataset, shots: usize) -> Result<Dataset> {
    ds.subset(&fewshot_indices(ds, shots)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{make_blobs, BlobConfig, Split};

    #[test]
    fn longtail_profile() {
        let ds = make_blobs(3, 2, 90, 0).unwrap();
        assert_eq!(resample_longtail(&ds, 1.0).unwrap().class_counts(), vec![30, 30, 30]);
        assert_eq!(longtail_count(500, 50.0, 1, 2), 10);

        let big = BlobConfig::new(2, 2, 1000, 4).generate(Split::Train).unwrap();
        assert_eq!(resample_longtail(&big, 50.0).unwrap().class_counts(), vec![500, 10]);

        let ten = BlobConfig::new(10, 2, 5000, 4).generate(Split::Train).unwrap();
        let counts = resample_longtail(&ten, 100.0).unwrap().class_counts();
        let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
        assert!((ratio - 100.0).abs() / 100.0 <= 0.05, "{counts:?}");
        for w in counts.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn longtail_errors() {
        let ds = make_blobs(2, 2, 20, 0).unwrap();
        assert!(resample_longtail(&ds, 0.5).is_err());
        assert!(resample_longtail(&ds, 100.0).is_err());
    }

    #[test]
    fn fewshot_exact_subset_and_deterministic() {
        let ds = make_blobs(5, 3, 100, 7).unwrap();
        let idx = fewshot_indices(&ds, 8).unwrap();
        let sub = resample_fewshot(&ds, 8).unwrap();
        assert_eq!(sub.len(), 40);
        assert_eq!(sub.class_counts(), vec![8; 5]);
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < ds.len());
            assert_eq!(sub.row(k), ds.row(i));
        }
        assert_eq!(resample_fewshot(&ds, 8).unwrap(), sub);
        assert!(resample_fewshot(&ds, 21).is_err());
    }
}
