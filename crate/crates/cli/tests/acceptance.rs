//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use impvote::experiments::{topk_hits, ExperimentReport};
use impvote::imp::{imp_test, oracle_verdict, fit_matching, Procedure, Tuple};
use impvote::lmmse::{ols_fit, Target};
use impvote::scm::{
    attach_parameters, build_random_dag, make_environments, population_model, sample_environment, stream_rng,
    write_samples_csv, EnvSpec, InterventionMode, PopulationModel, ScmParams,
};
use impvote::search::{enumerate_tuples, tuple_count};
use impvote::voting::VoteTally;
use impvote::FeatureSet;

struct Gate {
    failed: Vec<usize>,
}

impl Gate {
    fn record(&mut self, id: usize, title: &str, ok: bool, detail: impl AsRef<str>) {
        println!("criterion {id} {} {title}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
        if !ok {
            self.failed.push(id);
        }
    }
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_impvote"));
    cmd.env_remove("SOURCE_DATE_EPOCH");
    cmd
}

fn run(mut cmd: Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "{:?} failed: {}", cmd, String::from_utf8_lossy(&out.stderr));
    out
}

/// Sorted `(name, bytes)` of every file in `dir`.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Random mode-A SCMs with three environments, `d` cycling through 4..=6.
fn population_suite() -> Vec<(FeatureSet, Vec<PopulationModel>)> {
    (0..100u64)
        .map(|i| {
            let mut rng = stream_rng(i, 0);
            let d = 4 + (i % 3) as usize;
            let parents = 1 + (i % 2) as usize;
            let dag = build_random_dag(d, 0.5, parents, 1, &mut rng).unwrap();
            let params = attach_parameters(&dag, 0.5, 2.0, &mut rng).unwrap();
            let specs = make_environments(&params, 3, InterventionMode::TargetOnly, 0.5, 1.5, 0, &mut rng).unwrap();
            let pops = specs.iter().map(|s| population_model(&params, s).unwrap()).collect();
            (dag.parents_y(), pops)
        })
        .collect()
}

fn population_criteria(gate: &mut Gate) {
    let start = Instant::now();
    let suite = population_suite();
    let (mut suff_checked, mut suff_bad, mut suff_max) = (0usize, 0usize, 0.0f64);
    let (mut nec_checked, mut nec_bad, mut nec_min) = (0usize, 0usize, f64::INFINITY);
    for (pa, pops) in &suite {
        let d = pops[0].d();
        for t in enumerate_tuples(d, d) {
            let covers_r = pa.is_subset(t.r);
            if !pa.is_subset(t.s) {
                continue;
            }
            let verdict = oracle_verdict(pops, t);
            let fit = match &verdict {
                Ok(v) if !v.identifiable => continue,
                Ok(v) => v.fit.clone(),
                Err(_) => None,
            };
            if covers_r {
                suff_checked += 1;
                match fit {
                    Some(f) if f.residual_norm < 1e-8 => suff_max = suff_max.max(f.residual_norm),
                    _ => suff_bad += 1,
                }
            } else {
                match fit {
                    Some(f) if f.lambda.abs() <= 1e-8 => {}
                    Some(f) => {
                        nec_checked += 1;
                        nec_min = nec_min.min(f.residual_norm);
                        if f.residual_norm <= 1e-6 {
                            nec_bad += 1;
                        }
                    }
                    None => {
                        nec_checked += 1;
                        nec_bad += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.record(
        1,
        "population sufficiency",
        suff_bad == 0 && suff_checked > 0 && secs < 120.0,
        format!("{suff_checked} tuples, {suff_bad} exceptions, max residual {suff_max:.2e}, {secs:.1}s"),
    );
    gate.record(
        2,
        "population necessity",
        nec_bad == 0 && nec_checked > 0,
        format!("{nec_checked} tuples, {nec_bad} exceptions, min residual {nec_min:.2e}"),
    );
}

fn chain_lambda(gate: &mut Gate) {
    let alpha = 2.0;
    let truth = 1.0 / alpha;
    let params = ScmParams::chain(alpha, 1.0);
    let specs: Vec<EnvSpec> = [1.0, 3.0]
        .iter()
        .enumerate()
        .map(|(e, &b)| EnvSpec::observational(&params, format!("e{}", e + 1)).with_beta(vec![b, 0.0]))
        .collect();
    let tuple = Tuple::new(1, FeatureSet::singleton(0), FeatureSet::singleton(0)).unwrap();
    let reps = 50;
    let (mut err_sum, mut gls_err_sum, mut gls_n) = (0.0, 0.0, 0usize);
    for rep in 0..reps {
        let samples: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(e, s)| sample_environment(&params, s, 10_000, &mut stream_rng(500 + rep, e as u64)).unwrap())
            .collect();
        let theta: Vec<_> = samples.iter().map(|s| ols_fit(s, Target::Response, tuple.s).unwrap().coeffs).collect();
        let gamma: Vec<_> =
            samples.iter().map(|s| ols_fit(s, Target::Feature(tuple.k), tuple.r).unwrap().coeffs).collect();
        err_sum += (fit_matching(&theta, &gamma).unwrap().lambda - truth).abs();
        if let Some(c) = imp_test(&samples, tuple, 0.05).unwrap().accepted() {
            gls_err_sum += (c.lambda_hat - truth).abs();
            gls_n += 1;
        }
    }
    let mean_err = err_sum / reps as f64;
    gate.record(
        3,
        "chain lambda recovery",
        mean_err < 0.025,
        format!(
            "mean |lambda - 0.5| = {mean_err:.5} over {reps} replicates; weighted estimate {:.5} over {gls_n} accepted",
            gls_err_sum / gls_n.max(1) as f64
        ),
    );
}

fn read_reports(dir: &Path) -> Vec<ExperimentReport> {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn replicate(out: &Path, extra: &[&str]) {
    let mut cmd = bin();
    cmd.arg("replicate").args(["--seed", "7", "--out-dir"]).arg(out).args(extra);
    run(cmd);
}

fn top_parents(report: &ExperimentReport, p: Procedure) -> f64 {
    let k = report.config.n_parents_y;
    report.topk_curve(p).unwrap().iter().find(|(kk, _)| *kk == k).unwrap().1
}

fn experiment_criteria(gate: &mut Gate, work: &Path) -> (Vec<ExperimentReport>, PathBuf) {
    let dir_a = work.join("replicate-a");
    let start = Instant::now();
    replicate(&dir_a, &[]);
    let secs = start.elapsed().as_secs_f64();
    let a = read_reports(&dir_a).remove(0);
    let c = &a.config;
    let setup_ok = c.n_datasets == 200 && c.n_envs == 5 && c.n_per_env == 300 && a.n_failed == 0;
    let def = top_parents(&a, Procedure::Definition);
    let inv = top_parents(&a, Procedure::Invariance);
    gate.record(
        4,
        "experiment A replication",
        setup_ok && (0.65..=0.95).contains(&def) && (0.55..=0.85).contains(&inv),
        format!(
            "top-|PA| rate: definition {def:.3}, invariance {inv:.3}; {} datasets, {} failed, {secs:.0}s",
            a.n_completed, a.n_failed
        ),
    );

    let dir_b = work.join("replicate-b");
    replicate(&dir_b, &["--mode", "B"]);
    let b = read_reports(&dir_b).remove(0);
    let mut ok = b.n_failed == 0;
    let mut parts = Vec::new();
    for gamma in [0.9, 1.0] {
        let sa = a.gamma_metrics(Procedure::Definition, gamma).unwrap().subset_prob;
        let sb = b.gamma_metrics(Procedure::Definition, gamma).unwrap().subset_prob;
        ok &= sa >= 0.85 && sb < sa;
        parts.push(format!("gamma {gamma}: A {sa:.3}, B {sb:.3}"));
    }
    gate.record(5, "subset rate under feature interventions", ok, parts.join("; "));
    (vec![a, b], dir_a)
}

fn monotonicity(gate: &mut Gate, reports: &[ExperimentReport]) {
    let strategy = (2usize..13).prop_flat_map(|d| {
        (vec(0usize..40, d), 0usize..10, 1u64..(1u64 << d), vec(0.0f64..=1.0, 2..6))
    });
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let result = runner.run(&strategy, |(votes, extra, pa_bits, mut gammas)| {
        let q = votes.iter().copied().max().unwrap() + extra;
        let t = VoteTally { votes, q };
        gammas.extend((0..=20).map(|i| i as f64 / 20.0));
        gammas.sort_by(f64::total_cmp);
        for w in gammas.windows(2) {
            let (lo, hi) = (t.cutoff(w[0]).unwrap(), t.cutoff(w[1]).unwrap());
            if !hi.is_subset(lo) {
                return Err(TestCaseError::fail(format!("cutoff({}) = {hi} not within cutoff({}) = {lo}", w[1], w[0])));
            }
        }
        let hits = topk_hits(&t, FeatureSet::from_bits(pa_bits));
        if hits.windows(2).any(|w| w[0] && !w[1]) {
            return Err(TestCaseError::fail(format!("top-k hits not monotone: {hits:?}")));
        }
        Ok(())
    });
    let curves_ok = reports.iter().all(|r| {
        r.metrics.iter().all(|m| m.topk_curve.windows(2).all(|w| w[0].1 <= w[1].1))
    });
    let detail = match &result {
        Ok(()) => "1000 random tallies; experiment top-k curves non-decreasing".to_string(),
        Err(e) => e.to_string(),
    };
    gate.record(6, "monotonicity", result.is_ok() && curves_ok, detail);
}

/// Independent count: every non-empty S, every k, and every R ⊆ S \ {k}.
fn brute_count(d: usize) -> u128 {
    let mut total = 0u128;
    for s in 1u64..(1 << d) {
        for k in 0..d {
            total += 1u128 << (s & !(1 << k)).count_ones();
        }
    }
    total
}

fn enumeration(gate: &mut Gate) {
    let mut bad = Vec::new();
    for d in 2..=12 {
        let listed = enumerate_tuples(d, d).count() as u128;
        let oracle = brute_count(d);
        if listed != oracle || tuple_count(d, d) != oracle {
            bad.push(format!("d={d}: listed {listed}, closed form {}, oracle {oracle}", tuple_count(d, d)));
        }
    }
    let s = FeatureSet::from_bits;
    let hand: HashSet<Tuple> = [
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (1, 0, 2),
        (0, 0, 2),
        (0, 2, 2),
        (0, 0, 3),
        (0, 2, 3),
        (1, 0, 3),
        (1, 1, 3),
    ]
    .iter()
    .map(|&(k, r, sb)| Tuple::new(k, s(r), s(sb)).unwrap())
    .collect();
    let listed: Vec<Tuple> = enumerate_tuples(2, 2).collect();
    let listed_set: HashSet<Tuple> = listed.iter().copied().collect();
    let mut cmd = bin();
    cmd.args(["enumerate", "--d", "2", "--list"]);
    let cli = String::from_utf8(run(cmd).stdout).unwrap();
    let cli_ok = cli.lines().count() == 12 && cli.contains("tuples 10\n");
    let ok = bad.is_empty() && listed.len() == 10 && listed_set == hand && cli_ok;
    let detail = if ok {
        format!("d = 2..=12 agree (d=12: {}); d=2 lists the 10 hand-enumerated tuples", brute_count(12))
    } else {
        format!("{}; d=2 listed {} tuples, cli ok {cli_ok}", bad.join("; "), listed.len())
    };
    gate.record(7, "enumeration audit", ok, detail);
}

/// Eleven features, one parent, two children, sparse feature-feature edges.
/// The first environment is observational; the others raise the parent
/// coefficient and the target mean by 1 and 2.
fn fixture_csv(seed: u64, path: &Path) -> usize {
    let mut rng = stream_rng(seed, 0);
    let dag = build_random_dag(11, 0.1, 1, 2, &mut rng).unwrap();
    let mut params = attach_parameters(&dag, 0.5, 2.0, &mut rng).unwrap();
    for b in params.beta_base.iter_mut() {
        *b = b.abs();
    }
    let samples: Vec<_> = (0..3)
        .map(|e| {
            let beta = params.beta_base.iter().map(|&b| if b != 0.0 { b + e as f64 } else { 0.0 }).collect();
            let spec = EnvSpec::observational(&params, format!("env{}", e + 1)).with_beta(beta).with_shift_y(e as f64);
            sample_environment(&params, &spec, 700, &mut stream_rng(seed, e as u64 + 1)).unwrap()
        })
        .collect();
    let mut bytes = Vec::new();
    write_samples_csv(&mut bytes, &samples).unwrap();
    fs::write(path, bytes).unwrap();
    dag.parents_y().iter().next().unwrap()
}

fn discover(data: &Path, out: &Path) -> String {
    let mut cmd = bin();
    cmd.args(["discover", "--data"]).arg(data).arg("--out-dir").arg(out);
    String::from_utf8(run(cmd).stdout).unwrap()
}

fn determinism(gate: &mut Gate, work: &Path, first: &Path) {
    let again = work.join("replicate-a-again");
    replicate(&again, &[]);
    let replicate_same = snapshot(first) == snapshot(&again);
    let data = work.join("determinism.csv");
    fixture_csv(1, &data);
    let (d1, d2) = (work.join("discover-1"), work.join("discover-2"));
    let same_stdout = discover(&data, &d1) == discover(&data, &d2);
    let discover_same = same_stdout && snapshot(&d1) == snapshot(&d2);
    gate.record(
        8,
        "determinism",
        replicate_same && discover_same,
        format!(
            "replicate --seed 7 identical: {replicate_same} ({} files); discover identical: {discover_same}",
            snapshot(first).len()
        ),
    );
}

fn fixture(gate: &mut Gate, work: &Path) {
    let runs = 50;
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 1..=runs {
        let data = work.join(format!("fixture-{seed}.csv"));
        let parent = fixture_csv(seed, &data);
        let stdout = discover(&data, &work.join(format!("fixture-{seed}")));
        // Line 2 is the top-ranked feature: `1\t<name>\t<votes>/<q>`.
        let top = stdout.lines().nth(1).and_then(|l| l.split('\t').nth(1)).unwrap_or("");
        if top == format!("x{}", parent + 1) {
            hits += 1;
        } else {
            misses.push(seed);
        }
    }
    gate.record(
        9,
        "synthetic 11-feature fixture",
        hits * 10 >= runs * 9,
        format!("planted parent tops the tally in {hits}/{runs} runs; misses at seeds {misses:?}"),
    );
}

fn main() {
    // Honour `cargo test -- <filter>` style invocations that target other suites.
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let mut gate = Gate { failed: Vec::new() };
    population_criteria(&mut gate);
    chain_lambda(&mut gate);
    let (reports, dir_a) = experiment_criteria(&mut gate, work.path());
    monotonicity(&mut gate, &reports);
    enumeration(&mut gate);
    determinism(&mut gate, work.path(), &dir_a);
    fixture(&mut gate, work.path());
    if gate.failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failed criteria {:?}", gate.failed);
        std::process::exit(1);
    }
}
