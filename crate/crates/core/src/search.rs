//! Exhaustive search over tuples `(k, R, S)` with `R ⊆ S \ {k}`.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imp::{
    oracle_verdict, EnvData, Identifiability, ImpCandidate, ImpVerdict, Procedure, Tuple,
};
use crate::lmmse::MomentFit;
use crate::scm::{EnvSample, PopulationModel};
use crate::sets::{subsets_up_to, FeatureSet};

/// Which IMP procedures to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProcedureChoice {
    #[serde(rename = "imp")]
    Definition,
    #[serde(rename = "imp-inv")]
    Invariance,
    #[serde(rename = "both")]
    Both,
}

impl ProcedureChoice {
    pub fn procedures(self) -> &'static [Procedure] {
        match self {
            ProcedureChoice::Definition => &[Procedure::Definition],
            ProcedureChoice::Invariance => &[Procedure::Invariance],
            ProcedureChoice::Both => &[Procedure::Definition, Procedure::Invariance],
        }
    }
}

impl std::fmt::Display for ProcedureChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProcedureChoice::Definition => "imp",
            ProcedureChoice::Invariance => "imp-inv",
            ProcedureChoice::Both => "both",
        })
    }
}

impl std::str::FromStr for ProcedureChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imp" => Ok(ProcedureChoice::Definition),
            "imp-inv" => Ok(ProcedureChoice::Invariance),
            "both" => Ok(ProcedureChoice::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown procedure '{other}' (expected imp, imp-inv or both)"
            ))),
        }
    }
}

impl From<Procedure> for ProcedureChoice {
    fn from(p: Procedure) -> Self {
        match p {
            Procedure::Definition => ProcedureChoice::Definition,
            Procedure::Invariance => ProcedureChoice::Invariance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub alpha: f64,
    /// Cap on `|S|`; `None` uses [`SearchConfig::default_max_set_size`].
    pub max_set_size: Option<usize>,
    pub procedure: ProcedureChoice,
    /// Fraction of accepted candidates (per procedure, best scores first) kept.
    pub score_keep_fraction: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: 0.05,
            max_set_size: None,
            procedure: ProcedureChoice::Definition,
            score_keep_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// `d` for `d <= 8`, otherwise 5.
    pub fn default_max_set_size(d: usize) -> usize {
        if d <= 8 {
            d
        } else {
            5
        }
    }

    pub fn effective_max_set_size(&self, d: usize) -> usize {
        self.max_set_size.unwrap_or_else(|| Self::default_max_set_size(d))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {} not in (0, 1)", self.alpha)));
        }
        let m = self.effective_max_set_size(d);
        if m < 1 || m > d {
            return Err(Error::InvalidArgument(format!("max set size {m} not in 1..={d}")));
        }
        if !(self.score_keep_fraction > 0.0 && self.score_keep_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "score keep fraction {} not in (0, 1]",
                self.score_keep_fraction
            )));
        }
        Ok(())
    }
}

/// Accepted candidates of one search.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<ImpCandidate>,
    pub d: usize,
}

impl CandidateSet {
    pub fn q(&self) -> usize {
        self.candidates.len()
    }

    /// Restriction to candidates produced by one procedure.
    pub fn for_procedure(&self, procedure: Procedure) -> CandidateSet {
        CandidateSet {
            candidates: self
                .candidates
                .iter()
                .filter(|c| c.procedure == procedure)
                .cloned()
                .collect(),
            d: self.d,
        }
    }

    fn canonicalize(&mut self) {
        self.candidates
            .sort_by_key(|c| (c.procedure, c.tuple.sort_key()));
    }

    /// Tab-separated report, one candidate per line, 1-based indices.
    pub fn to_report(&self) -> String {
        let mut out = String::from("k\tR\tS\tlambda\tp_imp\tp_ident\tp_lambda\tscore\tprocedure\n");
        for c in &self.candidates {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.tuple.k + 1,
                c.tuple.r,
                c.tuple.s,
                fmt_num(c.lambda_hat),
                fmt_num(c.p_imp),
                fmt_num(c.p_ident),
                fmt_num(c.p_lambda),
                fmt_num(c.score),
                c.procedure
            );
        }
        out
    }
}

/// Shortest round-trip decimal, switching to exponent form outside `[1e-4, 1e6)`.
pub fn fmt_num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e6).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Lazily enumerates tuples: `k` ascending, then `S` by size and
/// lexicographically, then `R ⊆ S \ {k}` likewise. `S` is non-empty and
/// `|S| <= max_set_size`.
pub fn enumerate_tuples(d: usize, max_set_size: usize) -> TupleIter {
    let mut s_sets = subsets_up_to(FeatureSet::full(d), max_set_size.min(d));
    s_sets.retain(|s| !s.is_empty());
    TupleIter {
        d,
        s_sets,
        k: 0,
        s_index: 0,
        r_sets: Vec::new(),
        r_index: 0,
    }
}

pub struct TupleIter {
    d: usize,
    s_sets: Vec<FeatureSet>,
    k: usize,
    s_index: usize,
    r_sets: Vec<FeatureSet>,
    r_index: usize,
}

impl Iterator for TupleIter {
    type Item = Tuple;

    fn next(&mut self) -> Option<Tuple> {
        loop {
            if self.k >= self.d || self.s_sets.is_empty() {
                return None;
            }
            if self.r_index < self.r_sets.len() {
                let s = self.s_sets[self.s_index];
                let r = self.r_sets[self.r_index];
                self.r_index += 1;
                return Some(Tuple { k: self.k, r, s });
            }
            if !self.r_sets.is_empty() {
                self.s_index += 1;
                if self.s_index == self.s_sets.len() {
                    self.s_index = 0;
                    self.k += 1;
                }
            }
            if self.k >= self.d {
                return None;
            }
            let s = self.s_sets[self.s_index];
            let free = s.without(self.k);
            self.r_sets = subsets_up_to(free, free.len());
            self.r_index = 0;
        }
    }
}

/// `sum_S sum_k 2^{|S \ {k}|}` over non-empty `S` with `|S| <= max_set_size`.
pub fn tuple_count(d: usize, max_set_size: usize) -> u128 {
    let binom = |n: usize, k: usize| -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
    };
    (1..=max_set_size.min(d))
        .map(|s| {
            let per_s = s as u128 * (1u128 << (s - 1)) + (d - s) as u128 * (1u128 << s);
            binom(d, s) * per_s
        })
        .sum()
}

struct FeatureEntry {
    fits: Vec<MomentFit>,
    ident: Identifiability,
}

fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::RankDeficient { .. } | Error::NumericalFailure(_) | Error::DegenerateFit
    )
}

/// Runs identifiability screening and the configured IMP tests over every
/// enumerated tuple.
pub fn run_search(samples: &[EnvSample], config: &SearchConfig) -> Result<CandidateSet> {
    let data = EnvData::new(samples)?;
    let d = data.d();
    config.validate(d)?;
    let max = config.effective_max_set_size(d);

    let s_sets: Vec<FeatureSet> = subsets_up_to(FeatureSet::full(d), max)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    let response: HashMap<FeatureSet, Vec<MomentFit>> = s_sets
        .par_iter()
        .map(|&s| (s, data.response_fits(s)))
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|(s, r)| match r {
            Ok(f) => Some(Ok((s, f))),
            Err(e) if skippable(&e) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, FeatureSet)> = (0..d)
        .flat_map(|k| {
            subsets_up_to(FeatureSet::full(d).without(k), max)
                .into_iter()
                .map(move |r| (k, r))
        })
        .collect();
    let features: HashMap<(usize, FeatureSet), FeatureEntry> = pairs
        .par_iter()
        .map(|&(k, r)| {
            let entry = data.feature_fits(k, r).and_then(|fits| {
                let ident = data.identifiability(k, r, &fits, config.alpha)?;
                Ok(FeatureEntry { fits, ident })
            });
            ((k, r), entry)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|(key, r)| match r {
            Ok(f) => Some(Ok((key, f))),
            Err(e) if skippable(&e) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;

    let tuples: Vec<Tuple> = enumerate_tuples(d, max)
        .filter(|t| features.get(&(t.k, t.r)).is_some_and(|f| f.ident.identifiable))
        .collect();
    let procedures = config.procedure.procedures();
    let evaluated: Vec<Result<Vec<ImpCandidate>>> = tuples
        .par_iter()
        .map(|&t| {
            let (Some(theta), Some(feat)) = (response.get(&t.s), features.get(&(t.k, t.r))) else {
                return Ok(Vec::new());
            };
            let mut out = Vec::new();
            for &p in procedures {
                let verdict = match p {
                    Procedure::Definition => data.matching_test(t, theta, &feat.fits, feat.ident, config.alpha),
                    Procedure::Invariance => data.invariance_test(t, theta, &feat.fits, feat.ident, config.alpha),
                };
                match verdict {
                    Ok(ImpVerdict::Accepted(c)) => out.push(c),
                    Ok(ImpVerdict::Rejected(_)) => {}
                    Err(e) if skippable(&e) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        })
        .collect();
    let mut candidates = Vec::new();
    for r in evaluated {
        candidates.extend(r?);
    }

    let mut set = CandidateSet { candidates, d };
    if config.score_keep_fraction < 1.0 {
        set = filter_by_score(set, config.score_keep_fraction);
    }
    set.canonicalize();
    Ok(set)
}

/// Keeps the best-scoring `ceil(fraction * count)` candidates per procedure.
pub fn filter_by_score(set: CandidateSet, fraction: f64) -> CandidateSet {
    let mut kept = Vec::new();
    for p in [Procedure::Definition, Procedure::Invariance] {
        let mut group: Vec<ImpCandidate> =
            set.candidates.iter().filter(|c| c.procedure == p).cloned().collect();
        group.sort_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then_with(|| a.tuple.sort_key().cmp(&b.tuple.sort_key()))
        });
        let keep = (fraction * group.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        group.truncate(keep);
        kept.extend(group);
    }
    let mut out = CandidateSet { candidates: kept, d: set.d };
    out.canonicalize();
    out
}

/// Tolerance on the population matching residual for oracle acceptance.
pub const ORACLE_RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Oracle-mode search: exact population coefficients replace the samples.
/// A tuple is accepted when its feature coefficients vary across
/// environments, the matching residual is below [`ORACLE_RESIDUAL_TOLERANCE`]
/// and `lambda` is nonzero. Oracle candidates carry no p-values or scores.
pub fn run_oracle_search(pops: &[PopulationModel], max_set_size: usize) -> Result<CandidateSet> {
    if pops.len() < 2 {
        return Err(Error::InvalidArgument("at least 2 environments are required".into()));
    }
    let d = pops[0].d();
    let tuples: Vec<Tuple> = enumerate_tuples(d, max_set_size).collect();
    let verdicts: Vec<Result<Option<ImpCandidate>>> = tuples
        .par_iter()
        .map(|&t| {
            let v = match oracle_verdict(pops, t) {
                Ok(v) => v,
                Err(e) if skippable(&e) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(v.fit.and_then(|fit| {
                (fit.residual_norm < ORACLE_RESIDUAL_TOLERANCE && fit.lambda.abs() > 1e-8).then_some(ImpCandidate {
                    tuple: t,
                    lambda_hat: fit.lambda,
                    eta_hat: fit.eta,
                    p_imp: 1.0,
                    p_ident: 0.0,
                    p_lambda: 0.0,
                    score: f64::NAN,
                    procedure: Procedure::Definition,
                })
            }))
        })
        .collect();
    let mut candidates = Vec::new();
    for v in verdicts {
        candidates.extend(v?);
    }
    let mut set = CandidateSet { candidates, d };
    set.canonicalize();
    Ok(set)
}

/// Whether `tuple` belongs to the family for which the parents are provably
/// contained in `R`: `PA(Y) ⊆ S`.
pub fn covers_parents(tuple: &Tuple, parents: FeatureSet) -> bool {
    parents.is_subset(tuple.s)
}

/// Restriction of a candidate set to tuples whose `S` contains `parents`.
pub fn restrict_to_parent_covering(set: &CandidateSet, parents: FeatureSet) -> CandidateSet {
    CandidateSet {
        candidates: set
            .candidates
            .iter()
            .filter(|c| covers_parents(&c.tuple, parents))
            .cloned()
            .collect(),
        d: set.d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{make_environments, sample_environment, stream_rng, InterventionMode, ScmParams};
    use proptest::prelude::*;

    /// Nested-loop reference: every k, every non-empty S, every R ⊆ S \ {k}.
    fn brute_force(d: usize, max: usize) -> Vec<Tuple> {
        let mut out = Vec::new();
        for k in 0..d {
            for s_bits in 1u64..(1 << d) {
                let s = FeatureSet::from_bits(s_bits);
                if s.len() > max {
                    continue;
                }
                for r_bits in 0u64..(1 << d) {
                    let r = FeatureSet::from_bits(r_bits);
                    if r.is_subset(s.without(k)) {
                        out.push(Tuple { k, r, s });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn d2_hand_enumeration() {
        let tuples: Vec<Tuple> = enumerate_tuples(2, 2).collect();
        let e = FeatureSet::empty();
        let s = FeatureSet::singleton;
        let both = FeatureSet::full(2);
        let expected = vec![
            Tuple { k: 0, r: e, s: s(0) },
            Tuple { k: 0, r: e, s: s(1) },
            Tuple { k: 0, r: s(1), s: s(1) },
            Tuple { k: 0, r: e, s: both },
            Tuple { k: 0, r: s(1), s: both },
            Tuple { k: 1, r: e, s: s(0) },
            Tuple { k: 1, r: s(0), s: s(0) },
            Tuple { k: 1, r: e, s: s(1) },
            Tuple { k: 1, r: e, s: both },
            Tuple { k: 1, r: s(0), s: both },
        ];
        assert_eq!(tuples, expected);
        assert_eq!(tuple_count(2, 2), 10);
    }

    #[test]
    fn max_set_size_one() {
        for t in enumerate_tuples(5, 1) {
            assert_eq!(t.s.len(), 1);
            assert!(t.r.is_empty() || t.r == t.s.without(t.k));
        }
    }

    #[test]
    fn matches_brute_force_multiset() {
        for d in 2..=5 {
            for max in 1..=d {
                let mut a: Vec<_> = enumerate_tuples(d, max).map(|t| t.sort_key()).collect();
                let mut b: Vec<_> = brute_force(d, max).iter().map(|t| t.sort_key()).collect();
                a.sort();
                b.sort();
                assert_eq!(a, b, "d = {d}, max = {max}");
            }
        }
    }

    #[test]
    fn enumeration_order_is_canonical() {
        let tuples: Vec<Tuple> = enumerate_tuples(4, 3).collect();
        let mut sorted = tuples.clone();
        sorted.sort_by_key(|t| t.sort_key());
        assert_eq!(tuples, sorted);
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(d in 2usize..9, max in 1usize..9) {
            let max = max.min(d);
            prop_assert_eq!(enumerate_tuples(d, max).count() as u128, tuple_count(d, max));
        }
    }

    fn chain_samples(n_envs: usize, n: usize, seed: u64) -> Vec<EnvSample> {
        let params = ScmParams::chain(2.0, 1.0);
        let specs =
            make_environments(&params, n_envs, InterventionMode::TargetOnly, 0.5, 1.5, 0, &mut stream_rng(seed, 99))
                .unwrap();
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| sample_environment(&params, s, n, &mut stream_rng(seed, i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn chain_search_contains_true_tuple() {
        let target = Tuple { k: 1, r: FeatureSet::singleton(0), s: FeatureSet::singleton(0) };
        let mut hits = 0;
        for seed in 0..20 {
            let set = run_search(&chain_samples(5, 300, seed), &SearchConfig::default()).unwrap();
            if set.candidates.iter().any(|c| c.tuple == target) {
                hits += 1;
            }
        }
        assert!(hits >= 17, "true tuple found in {hits}/20");
    }

    #[test]
    fn oracle_chain_candidates() {
        let params = ScmParams::chain(2.0, 1.0);
        let specs =
            make_environments(&params, 4, InterventionMode::TargetOnly, 0.5, 1.5, 0, &mut stream_rng(1, 0)).unwrap();
        let pops: Vec<_> = specs.iter().map(|s| crate::scm::population_model(&params, s).unwrap()).collect();
        let set = run_oracle_search(&pops, 2).unwrap();
        let tuples: Vec<String> = set.candidates.iter().map(|c| c.tuple.to_string()).collect();
        assert_eq!(tuples, vec!["(2, {1}, {1})", "(2, {1}, {1,2})"]);
        assert!((set.candidates[0].lambda_hat - 0.5).abs() < 1e-10);
    }

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(1.5e-26), "1.5e-26");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }

    #[test]
    fn search_needs_two_environments() {
        let samples = chain_samples(2, 50, 0);
        assert!(run_search(&samples[..1], &SearchConfig::default()).is_err());
    }

    #[test]
    fn search_is_deterministic() {
        let samples = chain_samples(4, 200, 3);
        let config = SearchConfig { procedure: ProcedureChoice::Both, ..SearchConfig::default() };
        let a = run_search(&samples, &config).unwrap();
        let b = run_search(&samples, &config).unwrap();
        assert_eq!(a.to_report(), b.to_report());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| run_search(&samples, &config).unwrap());
        assert_eq!(a.to_report(), c.to_report());
    }

    #[test]
    fn score_filter_keeps_best_fraction() {
        let samples = chain_samples(5, 300, 4);
        let full = run_search(&samples, &SearchConfig::default()).unwrap();
        let half = filter_by_score(full.clone(), 0.5);
        assert_eq!(half.q(), full.q().div_ceil(2));
        let worst_kept = half.candidates.iter().map(|c| c.score).fold(f64::MIN, f64::max);
        let dropped_best = full
            .candidates
            .iter()
            .filter(|c| !half.candidates.contains(c))
            .map(|c| c.score)
            .fold(f64::MAX, f64::min);
        assert!(worst_kept <= dropped_best);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let samples = chain_samples(3, 50, 0);
        for config in [
            SearchConfig { alpha: 0.0, ..SearchConfig::default() },
            SearchConfig { max_set_size: Some(3), ..SearchConfig::default() },
            SearchConfig { score_keep_fraction: 0.0, ..SearchConfig::default() },
        ] {
            assert!(run_search(&samples, &config).is_err());
        }
    }

    #[test]
    fn report_format() {
        let samples = chain_samples(5, 300, 0);
        let set = run_search(&samples, &SearchConfig::default()).unwrap();
        let report = set.to_report();
        let mut lines = report.lines();
        assert_eq!(lines.next().unwrap(), "k\tR\tS\tlambda\tp_imp\tp_ident\tp_lambda\tscore\tprocedure");
        assert_eq!(lines.count(), set.q());
    }
}
