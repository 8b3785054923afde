//! Vote tallies over accepted candidates and the `gamma` cutoff rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::CandidateSet;
use crate::sets::FeatureSet;

/// Number of candidates whose `R` contains each feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub votes: Vec<usize>,
    pub q: usize,
}

pub fn tally(set: &CandidateSet) -> VoteTally {
    let mut votes = vec![0; set.d];
    for c in &set.candidates {
        for j in c.tuple.r.iter() {
            votes[j] += 1;
        }
    }
    VoteTally { votes, q: set.q() }
}

impl VoteTally {
    pub fn d(&self) -> usize {
        self.votes.len()
    }

    /// Smallest vote count that meets `gamma * q`.
    pub fn threshold(&self, gamma: f64) -> usize {
        // Guards against `0.9 * 10 = 9.000000000000002`.
        (gamma * self.q as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// Features with `votes >= ceil(gamma * q)`; empty when `q = 0`.
    pub fn cutoff(&self, gamma: f64) -> Result<FeatureSet> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma = {gamma} not in [0, 1]")));
        }
        if self.q == 0 {
            return Ok(FeatureSet::empty());
        }
        let t = self.threshold(gamma);
        let mut out = FeatureSet::empty();
        for (j, &v) in self.votes.iter().enumerate() {
            if v >= t {
                out.insert(j);
            }
        }
        Ok(out)
    }

    /// Features ranked by votes descending, ties broken by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.d()).collect();
        idx.sort_by(|&a, &b| self.votes[b].cmp(&self.votes[a]).then(a.cmp(&b)));
        idx
    }

    /// The `k` highest-voted features.
    pub fn top_k(&self, k: usize) -> FeatureSet {
        self.ranking().into_iter().take(k).fold(FeatureSet::empty(), |mut s, j| {
            s.insert(j);
            s
        })
    }

    /// Largest drop between consecutive ranked vote counts, as
    /// `(features above the drop, drop size)`. Advisory only.
    pub fn largest_gap(&self) -> Option<(usize, usize)> {
        let ranked: Vec<usize> = self.ranking().iter().map(|&j| self.votes[j]).collect();
        ranked
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i + 1, w[0] - w[1]))
            .filter(|&(_, gap)| gap > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
    }

    /// CSV with header `feature,votes,q`, one row per feature in index order.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.d() {
            return Err(Error::InvalidArgument(format!(
                "{} feature names for {} features",
                names.len(),
                self.d()
            )));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["feature", "votes", "q"])?;
        for (name, v) in names.iter().zip(&self.votes) {
            w.write_record([name.as_str(), &v.to_string(), &self.q.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Human-readable top-k listing.
    pub fn top_k_report(&self, names: &[String], k: usize) -> String {
        self.ranking()
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, j)| format!("{}\t{}\t{}/{}\n", rank + 1, names[j], self.votes[j], self.q))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imp::{ImpCandidate, Procedure, Tuple};
    use proptest::prelude::*;

    fn candidate(r: &[usize]) -> ImpCandidate {
        let r = r.iter().fold(FeatureSet::empty(), |mut s, &j| {
            s.insert(j);
            s
        });
        ImpCandidate {
            tuple: Tuple { k: 9, r, s: r },
            lambda_hat: 1.0,
            eta_hat: crate::lmmse::EmbeddedCoeffs::zeros(10),
            p_imp: 0.5,
            p_ident: 0.0,
            p_lambda: 0.0,
            score: 0.0,
            procedure: Procedure::Definition,
        }
    }

    fn set(rs: &[&[usize]]) -> CandidateSet {
        CandidateSet {
            candidates: rs.iter().map(|r| candidate(r)).collect(),
            d: 10,
        }
    }

    #[test]
    fn tally_counts_memberships() {
        let t = tally(&set(&[&[0, 1], &[0], &[0, 2]]));
        assert_eq!(t.q, 3);
        assert_eq!(&t.votes[..4], &[3, 1, 1, 0]);
    }

    #[test]
    fn gamma_one_is_intersection() {
        let t = tally(&set(&[&[0, 1], &[0, 1, 3], &[0, 1, 2]]));
        assert_eq!(t.cutoff(1.0).unwrap().to_vec(), vec![0, 1]);
    }

    #[test]
    fn threshold_is_robust_to_rounding() {
        let t = VoteTally { votes: vec![9, 10], q: 10 };
        assert_eq!(t.threshold(0.9), 9);
        assert_eq!(t.cutoff(0.9).unwrap().to_vec(), vec![0, 1]);
        let t = VoteTally { votes: vec![2, 3], q: 3 };
        assert_eq!(t.threshold(2.0 / 3.0), 2);
    }

    #[test]
    fn empty_tally_gives_empty_estimate() {
        let t = VoteTally { votes: vec![0; 4], q: 0 };
        assert!(t.cutoff(0.5).unwrap().is_empty());
        assert!(t.cutoff(1.2).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let t = VoteTally { votes: vec![1, 3, 3, 0, 1], q: 3 };
        assert_eq!(t.ranking(), vec![1, 2, 0, 4, 3]);
        assert_eq!(t.top_k(3).to_vec(), vec![0, 1, 2]);
    }

    #[test]
    fn largest_gap_reports_drop() {
        let t = VoteTally { votes: vec![10, 1, 9, 0], q: 10 };
        assert_eq!(t.largest_gap(), Some((2, 8)));
        let flat = VoteTally { votes: vec![2, 2], q: 2 };
        assert_eq!(flat.largest_gap(), None);
    }

    #[test]
    fn csv_layout() {
        let t = VoteTally { votes: vec![2, 0], q: 2 };
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(t.to_csv(&names).unwrap(), "feature,votes,q\na,2,2\nb,0,2\n");
        assert!(t.to_csv(&names[..1]).is_err());
    }

    proptest! {
        #[test]
        fn cutoff_is_monotone(votes in proptest::collection::vec(0usize..20, 1..10), g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
            let q = votes.iter().copied().max().unwrap_or(0).max(1);
            let t = VoteTally { votes, q };
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            prop_assert!(t.cutoff(hi).unwrap().is_subset(t.cutoff(lo).unwrap()));
        }

        #[test]
        fn gamma_one_equals_intersection(rs in proptest::collection::vec(0u64..1024, 1..12)) {
            let cands: Vec<ImpCandidate> = rs.iter().map(|&b| {
                let mut c = candidate(&[]);
                c.tuple.r = FeatureSet::from_bits(b);
                c
            }).collect();
            let inter = rs.iter().fold(1023u64, |a, &b| a & b);
            let t = tally(&CandidateSet { candidates: cands, d: 10 });
            prop_assert_eq!(t.cutoff(1.0).unwrap(), FeatureSet::from_bits(inter));
        }

        #[test]
        fn ranking_is_permutation_sorted(votes in proptest::collection::vec(0usize..5, 1..12)) {
            let t = VoteTally { q: 5, votes };
            let r = t.ranking();
            let mut sorted = r.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..t.d()).collect::<Vec<_>>());
            for w in r.windows(2) {
                prop_assert!(t.votes[w[0]] > t.votes[w[1]] || (t.votes[w[0]] == t.votes[w[1]] && w[0] < w[1]));
            }
        }
    }
}
