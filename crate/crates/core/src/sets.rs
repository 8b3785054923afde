//! Small index sets over the feature indices `0..d`, stored as bitmasks.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum number of features an index set can address.
pub const MAX_FEATURES: usize = 64;

/// A set of feature indices (0-based) packed into a `u64`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct FeatureSet(u64);

impl FeatureSet {
    pub const fn empty() -> Self {
        FeatureSet(0)
    }

    pub fn singleton(i: usize) -> Self {
        assert!(i < MAX_FEATURES, "feature index {i} out of range");
        FeatureSet(1 << i)
    }

    /// The full set `{0, .., d-1}`.
    pub fn full(d: usize) -> Self {
        assert!(d <= MAX_FEATURES);
        if d == MAX_FEATURES {
            FeatureSet(u64::MAX)
        } else {
            FeatureSet((1u64 << d) - 1)
        }
    }

    pub const fn from_bits(bits: u64) -> Self {
        FeatureSet(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < MAX_FEATURES && self.0 & (1 << i) != 0
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < MAX_FEATURES, "feature index {i} out of range");
        self.0 |= 1 << i;
    }

    pub fn remove(&mut self, i: usize) {
        if i < MAX_FEATURES {
            self.0 &= !(1 << i);
        }
    }

    pub fn without(mut self, i: usize) -> Self {
        self.remove(i);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: FeatureSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: FeatureSet) -> Self {
        FeatureSet(self.0 | other.0)
    }

    pub fn intersection(self, other: FeatureSet) -> Self {
        FeatureSet(self.0 & other.0)
    }

    pub fn difference(self, other: FeatureSet) -> Self {
        FeatureSet(self.0 & !other.0)
    }

    /// Largest index in the set plus one (0 for the empty set).
    pub fn bound(self) -> usize {
        MAX_FEATURES - self.0.leading_zeros() as usize
    }

    /// Indices in ascending order.
    pub fn iter(self) -> Indices {
        Indices(self.0)
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Ordering key: size first, then lexicographic on the ascending index list.
    pub fn canonical_key(self) -> (usize, Vec<usize>) {
        (self.len(), self.to_vec())
    }

    /// Render with 1-based indices, e.g. `{1,3}`.
    pub fn display_one_based(self) -> String {
        let items: Vec<String> = self.iter().map(|i| (i + 1).to_string()).collect();
        format!("{{{}}}", items.join(","))
    }
}

impl fmt::Debug for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_one_based())
    }
}

impl FromIterator<usize> for FeatureSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = FeatureSet::empty();
        for i in iter {
            s.insert(i);
        }
        s
    }
}

impl From<Vec<usize>> for FeatureSet {
    fn from(v: Vec<usize>) -> Self {
        v.into_iter().collect()
    }
}

impl From<FeatureSet> for Vec<usize> {
    fn from(s: FeatureSet) -> Self {
        s.to_vec()
    }
}

impl PartialOrd for FeatureSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Orders by size, then lexicographically on the sorted index lists.
impl Ord for FeatureSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| self.iter().cmp(other.iter()))
    }
}

pub struct Indices(u64);

impl Iterator for Indices {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(i)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Indices {}

/// All subsets of `universe` with at most `max_size` elements, ordered by
/// size and then lexicographically. Includes the empty set.
pub fn subsets_up_to(universe: FeatureSet, max_size: usize) -> Vec<FeatureSet> {
    let items = universe.to_vec();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for size in 0..=max_size.min(items.len()) {
        combinations(&items, size, 0, &mut cur, &mut out);
    }
    out
}

fn combinations(
    items: &[usize],
    size: usize,
    start: usize,
    cur: &mut Vec<usize>,
    out: &mut Vec<FeatureSet>,
) {
    if cur.len() == size {
        out.push(cur.iter().copied().collect());
        return;
    }
    let remaining = size - cur.len();
    for i in start..=items.len().saturating_sub(remaining) {
        if i >= items.len() {
            break;
        }
        cur.push(items[i]);
        combinations(items, size, i + 1, cur, out);
        cur.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_ops() {
        let a: FeatureSet = [0, 2, 5].into_iter().collect();
        let b: FeatureSet = [2, 5].into_iter().collect();
        assert!(b.is_subset(a));
        assert!(!a.is_subset(b));
        assert_eq!(a.difference(b).to_vec(), vec![0]);
        assert_eq!(a.len(), 3);
        assert_eq!(a.bound(), 6);
        assert_eq!(a.to_string(), "{1,3,6}");
        assert_eq!(FeatureSet::empty().to_string(), "{}");
    }

    #[test]
    fn subsets_are_ordered_by_size_then_lex() {
        let subs = subsets_up_to(FeatureSet::full(3), 3);
        let lists: Vec<Vec<usize>> = subs.iter().map(|s| s.to_vec()).collect();
        assert_eq!(
            lists,
            vec![
                vec![],
                vec![0],
                vec![1],
                vec![2],
                vec![0, 1],
                vec![0, 2],
                vec![1, 2],
                vec![0, 1, 2]
            ]
        );
        let mut sorted = subs.clone();
        sorted.sort();
        assert_eq!(sorted, subs);
    }

    #[test]
    fn serde_as_index_list() {
        let s: FeatureSet = [1, 4].into_iter().collect();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[1,4]");
        let back: FeatureSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn subset_counts_match_binomials(d in 1usize..10, max in 0usize..10) {
            let subs = subsets_up_to(FeatureSet::full(d), max);
            let expected: usize = (0..=max.min(d)).map(|k| binom(d, k)).sum();
            prop_assert_eq!(subs.len(), expected);
        }
    }

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }
}
