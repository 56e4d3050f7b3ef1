use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Fold index of every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub assignments: Vec<usize>,
    pub k: usize,
    /// False when the split fell back to a plain shuffle.
    pub stratified: bool,
}

impl FoldSplit {
    /// Sample indices held out in fold `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Sample indices used for fitting in fold `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Seeded, label-stratified partition into `k` folds whose sizes differ by at most one.
///
/// Each label's samples are shuffled and dealt round-robin, the dealer continuing across
/// labels. If some label has fewer than `k` samples the split is a plain shuffle instead.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<FoldSplit> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidConfig(format!("{n} samples cannot fill {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = [Label::Cn, Label::Ad]
        .iter()
        .map(|l| (0..n).filter(|&i| labels[i] == *l).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    let stratified = groups.iter().all(|g| g.len() >= k);
    if !stratified {
        warn!("a label has fewer than {k} samples; falling back to a non-stratified split");
        groups = vec![(0..n).collect()];
    }
    let mut assignments = vec![0; n];
    let mut next = 0;
    for group in &mut groups {
        group.shuffle(&mut rng);
        for &i in group.iter() {
            assignments[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldSplit { assignments, k, stratified })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(cn: usize, ad: usize) -> Vec<Label> {
        let mut v = vec![Label::Cn; cn];
        v.extend(vec![Label::Ad; ad]);
        v
    }

    #[test]
    fn balanced_ten_gives_one_of_each_per_fold() {
        let l = labels(5, 5);
        let s = kfold_split(&l, 5, 1).unwrap();
        assert_eq!(s.sizes(), vec![2; 5]);
        for f in 0..5 {
            let ad = s.test_indices(f).iter().filter(|&&i| l[i] == Label::Ad).count();
            assert_eq!(ad, 1);
        }
        assert_eq!(s, kfold_split(&l, 5, 1).unwrap());
        assert_ne!(s, kfold_split(&l, 5, 2).unwrap());
    }

    #[test]
    fn sizes_for_the_paired_cohort() {
        let s = kfold_split(&labels(241, 161), 5, 0).unwrap();
        let mut sizes = s.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![81, 81, 80, 80, 80]);
        assert!(s.stratified);
    }

    #[test]
    fn train_and_test_partition_the_samples() {
        let s = kfold_split(&labels(7, 6), 3, 4).unwrap();
        for f in 0..3 {
            let mut all = s.train_indices(f);
            all.extend(s.test_indices(f));
            all.sort_unstable();
            assert_eq!(all, (0..13).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rare_label_falls_back_to_plain_split() {
        let s = kfold_split(&labels(12, 2), 5, 0).unwrap();
        assert!(!s.stratified);
        assert!(s.sizes().iter().all(|&n| n == 2 || n == 3));
        assert!(kfold_split(&labels(2, 1), 5, 0).is_err());
    }
}
