//! Synthetic replication of the two simulation settings: interventions on `Y`
//! only (mode A) and on `Y` plus a few shifted features (mode B).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imp::Procedure;
use crate::scm::{
    attach_parameters, build_random_dag, make_environments, sample_environment, stream_rng,
    EnvSample, InterventionMode,
};
use crate::search::{run_search, ProcedureChoice, SearchConfig};
use crate::sets::FeatureSet;
use crate::voting::{tally, VoteTally};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_datasets: usize,
    pub n_envs: usize,
    pub n_per_env: usize,
    pub d: usize,
    pub n_parents_y: usize,
    pub n_children_y: usize,
    /// Probability of each feature-feature edge. The default 0 leaves only
    /// the edges into and out of `Y`; denser graphs lower every metric.
    pub edge_prob: f64,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub perturb_low: f64,
    pub perturb_high: f64,
    /// Shifted features per dataset in mode B.
    pub n_x_interventions: usize,
    pub gammas: Vec<f64>,
    pub procedures: Vec<Procedure>,
    pub alpha: f64,
    pub max_set_size: Option<usize>,
    pub score_keep_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_datasets: 200,
            n_envs: 5,
            n_per_env: 300,
            d: 8,
            n_parents_y: 2,
            n_children_y: 2,
            edge_prob: 0.0,
            coeff_low: 0.5,
            coeff_high: 2.0,
            perturb_low: 0.5,
            perturb_high: 1.5,
            n_x_interventions: 4,
            gammas: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            procedures: vec![Procedure::Definition, Procedure::Invariance],
            alpha: 0.05,
            max_set_size: Some(5),
            score_keep_fraction: 1.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_datasets == 0 || self.n_per_env == 0 {
            return bad("dataset and sample counts must be positive".into());
        }
        if self.n_envs < 2 {
            return bad(format!("need at least 2 environments, got {}", self.n_envs));
        }
        if self.d < 2 || self.d > 64 {
            return bad(format!("d = {} not in 2..=64", self.d));
        }
        if self.n_parents_y < 1 || self.n_children_y < 1 || self.n_parents_y + self.n_children_y > self.d {
            return bad(format!(
                "{} parents and {} children do not fit in d = {}",
                self.n_parents_y, self.n_children_y, self.d
            ));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge probability {} not in [0, 1]", self.edge_prob));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return bad(format!("gamma {g} not in [0, 1]"));
        }
        if self.gammas.is_empty() || self.procedures.is_empty() {
            return bad("gammas and procedures must be non-empty".into());
        }
        if self.n_x_interventions > self.d {
            return bad(format!("{} shifted features exceed d = {}", self.n_x_interventions, self.d));
        }
        if self.n_per_env < self.d + 3 {
            return Err(Error::InsufficientSamples { needed: self.d + 3, got: self.n_per_env });
        }
        self.search_config().validate(self.d)
    }

    fn procedure_choice(&self) -> ProcedureChoice {
        let def = self.procedures.contains(&Procedure::Definition);
        let inv = self.procedures.contains(&Procedure::Invariance);
        match (def, inv) {
            (true, true) => ProcedureChoice::Both,
            (false, true) => ProcedureChoice::Invariance,
            _ => ProcedureChoice::Definition,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            alpha: self.alpha,
            max_set_size: self.max_set_size,
            procedure: self.procedure_choice(),
            score_keep_fraction: self.score_keep_fraction,
            seed: self.seed,
        }
    }
}

/// Random stream for dataset `index`; stream 0 draws the SCM and the
/// environments, stream `e + 1` the samples of environment `e`.
fn dataset_stream(seed: u64, index: usize, sub: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, ((index as u64) << 16) | sub as u64)
}

/// Draws dataset `index` of an experiment. Mode A and mode B share the
/// graph, coefficients, `Y` interventions and noise draws.
pub fn generate_dataset(
    config: &ExperimentConfig,
    mode: InterventionMode,
    index: usize,
) -> Result<(FeatureSet, Vec<EnvSample>)> {
    let mut rng = dataset_stream(config.seed, index, 0);
    let dag = build_random_dag(config.d, config.edge_prob, config.n_parents_y, config.n_children_y, &mut rng)?;
    let params = attach_parameters(&dag, config.coeff_low, config.coeff_high, &mut rng)?;
    let n_x = match mode {
        InterventionMode::TargetOnly => 0,
        InterventionMode::TargetAndFeatures => config.n_x_interventions,
    };
    let specs = make_environments(
        &params,
        config.n_envs,
        mode,
        config.perturb_low,
        config.perturb_high,
        n_x,
        &mut rng,
    )?;
    let samples = specs
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            sample_environment(&params, spec, config.n_per_env, &mut dataset_stream(config.seed, index, e + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dag.parents_y(), samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateOutcome {
    pub exact: bool,
    pub subset: bool,
    pub n_false: usize,
}

pub fn evaluate_estimate(estimate: FeatureSet, truth: FeatureSet) -> EstimateOutcome {
    EstimateOutcome {
        exact: estimate == truth,
        subset: estimate.is_subset(truth),
        n_false: estimate.difference(truth).len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaOutcome {
    pub gamma: f64,
    pub estimate: FeatureSet,
    #[serde(flatten)]
    pub outcome: EstimateOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureRecord {
    pub procedure: Procedure,
    pub tally: VoteTally,
    /// `PA(Y) ⊆ top k` for `k = |PA(Y)|..=d`. A tally with `q = 0` misses.
    pub topk_hits: Vec<bool>,
    pub by_gamma: Vec<GammaOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub parents: FeatureSet,
    pub results: Vec<ProcedureRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMetrics {
    pub gamma: f64,
    pub success_prob: f64,
    pub subset_prob: f64,
    pub mean_false: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureMetrics {
    pub procedure: Procedure,
    /// `(k, P(PA(Y) ⊆ top k))` for `k = |PA(Y)|..=d`.
    pub topk_curve: Vec<(usize, f64)>,
    pub by_gamma: Vec<GammaMetrics>,
    pub mean_q: f64,
    pub empty_q: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: InterventionMode,
    pub config: ExperimentConfig,
    pub n_completed: usize,
    pub n_failed: usize,
    pub metrics: Vec<ProcedureMetrics>,
    /// Fixed reference rates for methods not implemented here; annotations only.
    pub references: Vec<ReferenceValue>,
    pub notes: Vec<String>,
    pub datasets: Vec<DatasetRecord>,
}

fn icp_reference(mode: InterventionMode) -> ReferenceValue {
    let (label, value) = match mode {
        InterventionMode::TargetOnly => ("ICP subset rate, interventions on Y only", 0.305),
        InterventionMode::TargetAndFeatures => ("ICP subset rate, interventions on Y and X", 0.435),
    };
    ReferenceValue { label: label.into(), value }
}

/// `PA(Y) ⊆ top k` for `k = |PA(Y)|..=d`; every entry is a miss when `q = 0`.
pub fn topk_hits(tally: &VoteTally, parents: FeatureSet) -> Vec<bool> {
    (parents.len()..=tally.d()).map(|k| tally.q > 0 && parents.is_subset(tally.top_k(k))).collect()
}

fn evaluate_dataset(config: &ExperimentConfig, mode: InterventionMode, index: usize) -> DatasetRecord {
    let run = || -> Result<(FeatureSet, Vec<ProcedureRecord>)> {
        let (parents, samples) = generate_dataset(config, mode, index)?;
        let set = run_search(&samples, &config.search_config())?;
        let mut results = Vec::new();
        for &procedure in &config.procedures {
            let t = tally(&set.for_procedure(procedure));
            let topk_hits = topk_hits(&t, parents);
            let by_gamma = config
                .gammas
                .iter()
                .map(|&gamma| {
                    let estimate = t.cutoff(gamma)?;
                    Ok(GammaOutcome { gamma, estimate, outcome: evaluate_estimate(estimate, parents) })
                })
                .collect::<Result<_>>()?;
            results.push(ProcedureRecord { procedure, tally: t, topk_hits, by_gamma });
        }
        Ok((parents, results))
    };
    match run() {
        Ok((parents, results)) => DatasetRecord { index, parents, results, error: None },
        Err(e) => DatasetRecord {
            index,
            parents: FeatureSet::empty(),
            results: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn aggregate(config: &ExperimentConfig, datasets: &[DatasetRecord]) -> Vec<ProcedureMetrics> {
    let done: Vec<&DatasetRecord> = datasets.iter().filter(|r| r.error.is_none()).collect();
    let n = done.len().max(1) as f64;
    config
        .procedures
        .iter()
        .enumerate()
        .map(|(pi, &procedure)| {
            let recs: Vec<&ProcedureRecord> = done.iter().map(|r| &r.results[pi]).collect();
            let topk_curve = (config.n_parents_y..=config.d)
                .enumerate()
                .map(|(i, k)| (k, recs.iter().filter(|r| r.topk_hits[i]).count() as f64 / n))
                .collect();
            let by_gamma = config
                .gammas
                .iter()
                .enumerate()
                .map(|(gi, &gamma)| {
                    let outs = || recs.iter().map(|r| r.by_gamma[gi].outcome);
                    GammaMetrics {
                        gamma,
                        success_prob: outs().filter(|o| o.exact).count() as f64 / n,
                        subset_prob: outs().filter(|o| o.subset).count() as f64 / n,
                        mean_false: outs().map(|o| o.n_false as f64).sum::<f64>() / n,
                    }
                })
                .collect();
            ProcedureMetrics {
                procedure,
                topk_curve,
                by_gamma,
                mean_q: recs.iter().map(|r| r.tally.q as f64).sum::<f64>() / n,
                empty_q: recs.iter().filter(|r| r.tally.q == 0).count(),
            }
        })
        .collect()
}

/// Runs one experiment. Datasets are independent and evaluated in parallel;
/// results do not depend on the schedule.
pub fn run_experiment(config: &ExperimentConfig, mode: InterventionMode) -> Result<ExperimentReport> {
    config.validate()?;
    let datasets: Vec<DatasetRecord> =
        (0..config.n_datasets).into_par_iter().map(|i| evaluate_dataset(config, mode, i)).collect();
    let n_failed = datasets.iter().filter(|r| r.error.is_some()).count();
    Ok(ExperimentReport {
        mode,
        config: config.clone(),
        n_completed: datasets.len() - n_failed,
        n_failed,
        metrics: aggregate(config, &datasets),
        references: vec![icp_reference(mode)],
        notes: vec![
            "graph family, d, |PA(Y)|, |CH(Y)|, edge probability and coefficient ranges are defaults of this implementation".into(),
            "a dataset with no accepted candidates yields the empty estimate and counts as a top-k miss".into(),
            "probabilities are over completed datasets".into(),
        ],
        datasets,
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn metrics_for(&self, p: Procedure) -> Option<&ProcedureMetrics> {
        self.metrics.iter().find(|m| m.procedure == p)
    }

    pub fn topk_curve(&self, p: Procedure) -> Option<&[(usize, f64)]> {
        self.metrics_for(p).map(|m| m.topk_curve.as_slice())
    }

    pub fn gamma_metrics(&self, p: Procedure, gamma: f64) -> Option<&GammaMetrics> {
        self.metrics_for(p)?.by_gamma.iter().find(|g| (g.gamma - gamma).abs() < 1e-12)
    }

    /// `mode,procedure,k,prob`.
    pub fn topk_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "procedure", "k", "prob"])?;
        for m in &self.metrics {
            for (k, p) in &m.topk_curve {
                w.write_record([self.mode.to_string(), m.procedure.to_string(), k.to_string(), p.to_string()])?;
            }
        }
        finish(w)
    }

    /// `mode,procedure,gamma,<field>` where field is `success_prob` or `subset_prob`.
    pub fn gamma_csv(&self, subset: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let field = if subset { "subset_prob" } else { "success_prob" };
        w.write_record(["mode", "procedure", "gamma", field])?;
        for m in &self.metrics {
            for g in &m.by_gamma {
                let v = if subset { g.subset_prob } else { g.success_prob };
                w.write_record([self.mode.to_string(), m.procedure.to_string(), g.gamma.to_string(), v.to_string()])?;
            }
        }
        finish(w)
    }

    /// One row per (dataset, procedure, gamma); failed datasets get one row
    /// with the error message.
    pub fn datasets_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset", "procedure", "parents", "q", "top_pa_hit", "gamma", "estimate", "exact", "subset", "n_false",
            "error",
        ])?;
        for r in &self.datasets {
            if let Some(e) = &r.error {
                w.write_record([r.index.to_string().as_str(), "", "", "", "", "", "", "", "", "", e])?;
                continue;
            }
            for pr in &r.results {
                for g in &pr.by_gamma {
                    w.write_record([
                        r.index.to_string(),
                        pr.procedure.to_string(),
                        r.parents.to_string(),
                        pr.tally.q.to_string(),
                        pr.topk_hits[0].to_string(),
                        g.gamma.to_string(),
                        g.estimate.to_string(),
                        g.outcome.exact.to_string(),
                        g.outcome.subset.to_string(),
                        g.outcome.n_false.to_string(),
                        String::new(),
                    ])?;
                }
            }
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> FeatureSet {
        v.iter().fold(FeatureSet::empty(), |mut s, &j| {
            s.insert(j);
            s
        })
    }

    #[test]
    fn evaluate_estimate_cases() {
        assert_eq!(evaluate_estimate(set(&[0]), set(&[0])), EstimateOutcome { exact: true, subset: true, n_false: 0 });
        assert_eq!(evaluate_estimate(set(&[]), set(&[0])), EstimateOutcome { exact: false, subset: true, n_false: 0 });
        assert_eq!(
            evaluate_estimate(set(&[0, 2]), set(&[0])),
            EstimateOutcome { exact: false, subset: false, n_false: 1 }
        );
    }

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_datasets: 10,
            d: 4,
            n_parents_y: 1,
            n_children_y: 1,
            n_per_env: 200,
            max_set_size: None,
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_experiment_report() {
        let report = run_experiment(&tiny(), InterventionMode::TargetOnly).unwrap();
        assert_eq!(report.n_completed + report.n_failed, 10);
        for m in &report.metrics {
            let curve: Vec<f64> = m.topk_curve.iter().map(|c| c.1).collect();
            assert_eq!(m.topk_curve.first().unwrap().0, 1);
            assert_eq!(m.topk_curve.last().unwrap().0, 4);
            assert!(curve.windows(2).all(|w| w[0] <= w[1]));
            let nonempty = (report.n_completed - m.empty_q) as f64 / report.n_completed as f64;
            assert!((curve[3] - nonempty).abs() < 1e-12);
            for w in m.by_gamma.windows(2) {
                assert!(w[0].subset_prob <= w[1].subset_prob);
            }
            for g in &m.by_gamma {
                assert!(g.subset_prob >= g.success_prob);
                assert!((0.0..=1.0).contains(&g.success_prob));
            }
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let config = ExperimentConfig { n_datasets: 4, ..tiny() };
        let a = run_experiment(&config, InterventionMode::TargetAndFeatures).unwrap();
        let b = run_experiment(&config, InterventionMode::TargetAndFeatures).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.datasets_csv().unwrap(), b.datasets_csv().unwrap());
    }

    #[test]
    fn modes_share_structure_and_noise() {
        let config = tiny();
        let (pa, a) = generate_dataset(&config, InterventionMode::TargetOnly, 2).unwrap();
        let (pb, b) = generate_dataset(&config, InterventionMode::TargetAndFeatures, 2).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a.len(), b.len());
        assert_ne!(a[0].x, b[0].x);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            ExperimentConfig { gammas: vec![1.2], ..tiny() },
            ExperimentConfig { n_envs: 1, ..tiny() },
            ExperimentConfig { n_datasets: 0, ..tiny() },
            ExperimentConfig { n_parents_y: 3, n_children_y: 2, ..tiny() },
        ] {
            assert!(run_experiment(&c, InterventionMode::TargetOnly).is_err());
        }
    }

    #[test]
    fn csv_exports() {
        let report = run_experiment(&ExperimentConfig { n_datasets: 2, ..tiny() }, InterventionMode::TargetOnly).unwrap();
        let topk = report.topk_csv().unwrap();
        assert!(topk.starts_with("mode,procedure,k,prob\n"));
        assert_eq!(topk.lines().count(), 1 + 2 * 4);
        let subset = report.gamma_csv(true).unwrap();
        assert_eq!(subset.lines().count(), 1 + 2 * 6);
        assert_eq!(report.datasets_csv().unwrap().lines().count(), 1 + 2 * 2 * 6);
    }
}
