//! Rank metrics: First Relevant, MFR, Recall@k, MRR, per-class FR
//! summaries and Spearman correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FR in percent: `100 · 2(r − 1)/(n − 1)`. 0 for a perfect ranking, 100 in
/// expectation for a uniformly random one.
pub fn first_relevant(rank: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("FR needs at least 2 candidates, got {n}")));
    }
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!("rank {rank} outside 1..={n}")));
    }
    Ok(100.0 * 2.0 * (rank - 1) as f64 / (n - 1) as f64)
}

/// Five-number summary of a class's FR values (linear interpolation between
/// order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub const QUARTILE_RULE: &str = "linear";

/// Quantile of sorted data with position `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFr {
    pub class: usize,
    pub count: usize,
    #[serde(flatten)]
    pub fr: Quartiles,
}

/// FR five-number summary per true class, sorted by median (then class index).
pub fn per_class_fr(classes: &[usize], ranks: &[usize], n: usize) -> Result<Vec<ClassFr>> {
    if classes.len() != ranks.len() {
        return Err(Error::dim("per-class FR", classes.len(), ranks.len()));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&c, &r) in classes.iter().zip(ranks) {
        groups.entry(c).or_default().push(first_relevant(r, n)?);
    }
    let mut out: Vec<ClassFr> = groups
        .into_iter()
        .map(|(class, v)| ClassFr {
            class,
            count: v.len(),
            fr: Quartiles::of(&v).expect("nonempty group"),
        })
        .collect();
    out.sort_by(|a, b| a.fr.median.total_cmp(&b.fr.median).then(a.class.cmp(&b.class)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub n: usize,
    pub count: usize,
    pub fr: Vec<f64>,
    /// Mean FR in percent.
    pub mfr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
}

/// MFR, Recall@k for each `k` and MRR from 1-based ranks over `n` candidates.
pub fn aggregate(ranks: &[usize], n: usize, ks: &[usize]) -> Result<RankingReport> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranks to aggregate"));
    }
    let fr = ranks
        .iter()
        .map(|&r| first_relevant(r, n))
        .collect::<Result<Vec<_>>>()?;
    let count = ranks.len();
    let mfr = fr.iter().sum::<f64>() / count as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / count as f64))
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / count as f64;
    Ok(RankingReport {
        n,
        count,
        fr,
        mfr,
        recall_at,
        mrr,
    })
}

/// Fractional ranks, ties receiving the average of the positions they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("correlation", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", x.len(), y.len()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fr_examples() {
        assert_eq!(first_relevant(1, 17).unwrap(), 0.0);
        assert_eq!(first_relevant(3, 5).unwrap(), 100.0);
        assert_eq!(first_relevant(2, 2).unwrap(), 200.0);
        assert!(first_relevant(1, 1).is_err());
        assert!(first_relevant(0, 4).is_err());
        assert!(first_relevant(5, 4).is_err());
        // mean over all ranks of a uniform draw is exactly 100
        for n in 2..30 {
            let mean = (1..=n).map(|r| first_relevant(r, n).unwrap()).sum::<f64>() / n as f64;
            assert!((mean - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[1, 1, 1], 10, &[1, 5]).unwrap();
        assert_eq!((r.mfr, r.recall_at[&1], r.mrr), (0.0, 1.0, 1.0));
        let r = aggregate(&[1, 2], 3, &[1]).unwrap();
        assert_eq!(r.mfr, 50.0);
        assert_eq!(r.mrr, 0.75);
        assert_eq!(r.recall_at[&1], 0.5);
        assert!(aggregate(&[], 3, &[1]).is_err());
    }

    #[test]
    fn random_ranker_mfr_near_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ranks: Vec<usize> = (0..2000).map(|_| rng.random_range(1..=50)).collect();
        let r = aggregate(&ranks, 50, &[1]).unwrap();
        assert!((r.mfr - 100.0).abs() < 3.0, "{}", r.mfr);
    }

    #[test]
    fn per_class_quartiles() {
        // n = 5: FR = 50·(r−1)
        let classes = [7, 3, 3, 3, 3];
        let ranks = [2, 1, 2, 4, 5];
        let out = per_class_fr(&classes, &ranks, 5).unwrap();
        assert_eq!(out.len(), 2);
        // class 7: single value 50 -> all equal
        let c7 = out.iter().find(|c| c.class == 7).unwrap();
        assert_eq!(c7.fr, Quartiles { min: 50.0, q1: 50.0, median: 50.0, q3: 50.0, max: 50.0 });
        // class 3: sorted FR [0, 50, 150, 200]; positions 0.75, 1.5, 2.25
        let c3 = out.iter().find(|c| c.class == 3).unwrap();
        assert_eq!(c3.fr.q1, 37.5);
        assert_eq!(c3.fr.median, 100.0);
        assert_eq!(c3.fr.q3, 162.5);
        assert_eq!((c3.fr.min, c3.fr.max), (0.0, 200.0));
        // sorted by median
        assert_eq!(out[0].class, 7);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // d = (1,1,1,1): 1 − 6·4/(4·15) = 0.6
        assert!((spearman(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(fractional_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_mfr_permutation_invariant(
            ranks in proptest::collection::vec(1usize..=20, 1..60),
            seed in any::<u64>(),
        ) {
            let ks: Vec<usize> = (1..=20).collect();
            let r = aggregate(&ranks, 20, &ks).unwrap();
            let vals: Vec<f64> = r.recall_at.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r.recall_at[&20], 1.0);
            prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
            prop_assert!(r.fr.iter().all(|f| (0.0..=200.0).contains(f)));
            let mut shuffled = ranks.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let r2 = aggregate(&shuffled, 20, &ks).unwrap();
            prop_assert!((r.mfr - r2.mfr).abs() < 1e-9);
        }
    }
}
