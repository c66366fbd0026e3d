use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{FaceError, Result};

/// How many query samples an episode draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySize {
    Count(usize),
    /// Every sample not in the support set.
    Remaining,
}

/// Support/query split of one subject's samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub subject: String,
    /// `K` indices per class, grouped by class.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn is_disjoint(&self) -> bool {
        let s: HashSet<usize> = self.support.iter().copied().collect();
        self.query.iter().all(|q| !s.contains(q))
    }
}

/// Splits per-class query quotas: `Q / c` each, the remainder to the lowest
/// class indices, then any class short of samples hands its deficit to the
/// next classes (by index) that still have some.
fn query_quotas(q: usize, available: &[usize]) -> Vec<usize> {
    let c = available.len();
    let mut quota: Vec<usize> = (0..c).map(|k| q / c + usize::from(k < q % c)).collect();
    let mut deficit = 0;
    for k in 0..c {
        if quota[k] > available[k] {
            deficit += quota[k] - available[k];
            quota[k] = available[k];
        }
    }
    while deficit > 0 {
        let mut moved = false;
        for k in 0..c {
            if deficit > 0 && quota[k] < available[k] {
                quota[k] += 1;
                deficit -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    quota
}

/// Draws `k` support samples per class and a class-balanced query set from
/// the rest.
pub fn sample_episode(fs: &FeatureSet, k: usize, query: QuerySize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(FaceError::Precondition("support needs at least one shot per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = fs.class_indices();
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < k {
            return Err(FaceError::InsufficientSamples {
                subject: fs.subject.clone(),
                class,
                have: idx.len(),
                need: k,
            });
        }
    }
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
    }
    let support: Vec<usize> = by_class.iter().flat_map(|idx| idx[..k].iter().copied()).collect();
    let rest: Vec<Vec<usize>> = by_class.iter().map(|idx| idx[k..].to_vec()).collect();
    let pool: usize = rest.iter().map(Vec::len).sum();
    let query = match query {
        QuerySize::Remaining => {
            let mut q: Vec<usize> = rest.into_iter().flatten().collect();
            q.sort_unstable();
            q
        }
        QuerySize::Count(n) => {
            if n > pool {
                return Err(FaceError::Precondition(format!(
                    "subject `{}`: query of {n} requested but only {pool} samples remain",
                    fs.subject
                )));
            }
            let avail: Vec<usize> = rest.iter().map(Vec::len).collect();
            let quotas = query_quotas(n, &avail);
            rest.iter()
                .zip(quotas)
                .flat_map(|(idx, q)| idx[..q].iter().copied())
                .collect()
        }
    };
    Ok(Episode {
        subject: fs.subject.clone(),
        support,
        query,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosoSplit {
    pub target: String,
    pub sources: Vec<String>,
}

/// One split per subject, holding that subject out as the target.
pub fn loso_splits(subjects: &[String]) -> Result<Vec<LosoSplit>> {
    if subjects.len() < 2 {
        return Err(FaceError::Precondition(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let unique: HashSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(FaceError::Precondition("subject ids must be unique".into()));
    }
    Ok(subjects
        .iter()
        .map(|t| LosoSplit {
            target: t.clone(),
            sources: subjects.iter().filter(|s| *s != t).cloned().collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use face_diffcore::Tensor;

    fn fs(per_class: &[usize]) -> FeatureSet {
        let labels: Vec<usize> = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        let n = labels.len();
        FeatureSet::new("S", per_class.len(), Tensor::zeros(&[n, 1, 1]), labels).unwrap()
    }

    #[test]
    fn one_shot_three_way_support() {
        let e = sample_episode(&fs(&[5, 5, 5]), 1, QuerySize::Count(6), 0).unwrap();
        assert_eq!(e.support.len(), 3);
        assert_eq!(e.query.len(), 6);
        assert!(e.is_disjoint());
    }

    #[test]
    fn five_shot_twenty_query() {
        let f = fs(&[40, 40, 40]);
        let e = sample_episode(&f, 5, QuerySize::Count(20), 11).unwrap();
        assert_eq!(e.support.len(), 15);
        assert_eq!(e.query.len(), 20);
        assert!(e.is_disjoint());
        let mut per = [0; 3];
        for &q in &e.query {
            per[f.labels()[q]] += 1;
        }
        assert_eq!(per, [7, 7, 6]);
        for c in 0..3 {
            assert_eq!(e.support.iter().filter(|&&i| f.labels()[i] == c).count(), 5);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let f = fs(&[30, 30]);
        assert_eq!(
            sample_episode(&f, 3, QuerySize::Count(10), 5).unwrap(),
            sample_episode(&f, 3, QuerySize::Count(10), 5).unwrap()
        );
    }

    #[test]
    fn insufficient_class_is_named() {
        match sample_episode(&fs(&[5, 2, 5]), 3, QuerySize::Count(1), 0) {
            Err(FaceError::InsufficientSamples { class, have, need, .. }) => {
                assert_eq!((class, have, need), (1, 2, 3));
            }
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
        assert!(sample_episode(&fs(&[3, 3]), 2, QuerySize::Count(3), 0).is_err());
    }

    #[test]
    fn quotas_redistribute_deficits() {
        assert_eq!(query_quotas(20, &[10, 10, 10]), vec![7, 7, 6]);
        assert_eq!(query_quotas(9, &[1, 10, 10]), vec![1, 4, 4]);
        assert_eq!(query_quotas(10, &[1, 10, 10]), vec![1, 5, 4]);
    }

    #[test]
    fn remaining_query_covers_the_rest() {
        let f = fs(&[6, 6, 6]);
        let e = sample_episode(&f, 2, QuerySize::Remaining, 1).unwrap();
        assert_eq!(e.query.len(), 12);
        let mut all: Vec<usize> = e.support.iter().chain(&e.query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn loso_partitions_subjects() {
        let ids: Vec<String> = (1..=15).map(|i| format!("S{i}")).collect();
        let splits = loso_splits(&ids).unwrap();
        assert_eq!(splits.len(), 15);
        for s in &splits {
            assert!(!s.sources.contains(&s.target));
            let mut all = s.sources.clone();
            all.push(s.target.clone());
            all.sort();
            let mut want = ids.clone();
            want.sort();
            assert_eq!(all, want);
        }
        assert_eq!(loso_splits(&ids[..3]).unwrap()[0].sources.len(), 2);
        assert!(loso_splits(&ids[..1]).is_err());
    }
}
