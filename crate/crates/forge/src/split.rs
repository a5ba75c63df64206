//! Seeded k-fold partitioning for cross-validation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::record::{self, AlpacaRecord};

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("cannot split {n} records into {k} folds")]
    KTooLarge { k: usize, n: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Shuffles `0..n` with a ChaCha stream seeded by `rng_seed` and deals it
/// into `k` contiguous folds. The first `n % k` folds get one extra index.
pub fn kfold_indices(n: usize, k: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>, SplitError> {
    if k < 2 {
        return Err(SplitError::KTooSmall(k));
    }
    if n < k {
        return Err(SplitError::KTooLarge { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

pub fn kfold_split<T: Clone>(items: &[T], k: usize, rng_seed: u64) -> Result<Vec<Vec<T>>, SplitError> {
    Ok(kfold_indices(items.len(), k, rng_seed)?
        .into_iter()
        .map(|fold| fold.into_iter().map(|i| items[i].clone()).collect())
        .collect())
}

/// Writes `fold-<i>/train.jsonl` and `fold-<i>/val.jsonl` for each fold of a
/// dataset file. Returns the fold sizes.
pub fn write_folds(dataset: &Path, out_dir: &Path, k: usize, rng_seed: u64) -> Result<Vec<usize>, SplitError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SplitError::Io { path, source }
    };
    let records = record::read_jsonl(dataset).map_err(io(dataset))?;
    let folds = kfold_indices(records.len(), k, rng_seed)?;
    for (f, val) in folds.iter().enumerate() {
        let dir = out_dir.join(format!("fold-{}", f + 1));
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let mut in_val = vec![false; records.len()];
        for &i in val {
            in_val[i] = true;
        }
        let train: Vec<&AlpacaRecord> = records.iter().zip(&in_val).filter(|(_, v)| !**v).map(|(r, _)| r).collect();
        let val_recs: Vec<&AlpacaRecord> = val.iter().map(|&i| &records[i]).collect();
        let (tp, vp) = (dir.join("train.jsonl"), dir.join("val.jsonl"));
        record::write_jsonl(&tp, train).map_err(io(&tp))?;
        record::write_jsonl(&vp, val_recs).map_err(io(&vp))?;
    }
    Ok(folds.iter().map(Vec::len).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_k() {
        assert!(matches!(kfold_indices(10, 1, 0), Err(SplitError::KTooSmall(1))));
        assert!(matches!(kfold_indices(3, 5, 0), Err(SplitError::KTooLarge { k: 5, n: 3 })));
    }

    #[test]
    fn ten_into_five() {
        let f = kfold_indices(10, 5, 9).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
    }
}
