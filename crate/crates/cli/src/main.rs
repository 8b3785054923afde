use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use impvote::dataset::{ingest_reader, IngestOptions};
use impvote::experiments::{run_experiment, ExperimentConfig, ExperimentReport};
use impvote::scm::{
    attach_parameters, build_random_dag, make_environments, sample_environment, stream_rng, write_samples_csv,
    InterventionMode, ScmFile,
};
use impvote::search::{enumerate_tuples, fmt_num, run_search, tuple_count, ProcedureChoice, SearchConfig};
use impvote::voting::tally;
use impvote::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "impvote", version, about = "Parent-set discovery from multi-environment data by invariant matching and voting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a multi-environment CSV for matching tuples and vote on the parents of the target.
    Discover(DiscoverArgs),
    /// Run the synthetic replication experiments.
    Replicate(ReplicateArgs),
    /// Draw a random linear SCM with environments and export it with samples.
    Simulate(SimulateArgs),
    /// Count (and optionally list) the candidate tuples for a feature count.
    Enumerate(EnumerateArgs),
}

#[derive(Args, Serialize)]
struct SearchArgs {
    /// Significance level of every test.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Cap on |S|; defaults to d for d <= 8 and 5 otherwise.
    #[arg(long)]
    max_set_size: Option<usize>,
    #[arg(long, default_value = "imp", value_parser = parse_procedure)]
    procedure: ProcedureChoice,
    /// Fraction of accepted candidates kept by prediction score.
    #[arg(long, default_value_t = 1.0)]
    score_keep_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct DiscoverArgs {
    /// Input CSV with one row per observation.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "env")]
    env_col: String,
    #[arg(long, default_value = "y")]
    target_col: String,
    /// Comma-separated feature columns; all remaining columns by default.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Keep only the first N rows of each environment.
    #[arg(long)]
    max_rows_per_env: Option<usize>,
    /// Vote cutoff as a fraction of the candidate count.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct ReplicateArgs {
    /// A (target only), B (target and features) or both.
    #[arg(long, default_value = "A")]
    mode: String,
    #[arg(long, default_value_t = 200)]
    datasets: usize,
    #[arg(long, default_value_t = 5)]
    envs: usize,
    /// Samples per environment.
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    parents: usize,
    #[arg(long, default_value_t = 2)]
    children: usize,
    #[arg(long)]
    edge_prob: Option<f64>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1")]
    gamma: Vec<f64>,
    #[arg(long, default_value = "both", value_parser = parse_procedure)]
    procedure: ProcedureChoice,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    max_set_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    parents: usize,
    #[arg(long, default_value_t = 1)]
    children: usize,
    #[arg(long, default_value_t = 0.3)]
    edge_prob: f64,
    #[arg(long, default_value_t = 3)]
    envs: usize,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value = "A")]
    mode: String,
    /// Shifted features in mode B.
    #[arg(long, default_value_t = 4)]
    n_x: usize,
    #[arg(long, default_value_t = 0.5)]
    coeff_low: f64,
    #[arg(long, default_value_t = 2.0)]
    coeff_high: f64,
    #[arg(long, default_value_t = 0.5)]
    perturb_low: f64,
    #[arg(long, default_value_t = 1.5)]
    perturb_high: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    max_set_size: Option<usize>,
    /// Print every tuple, 1-based.
    #[arg(long)]
    list: bool,
}

fn parse_procedure(s: &str) -> Result<ProcedureChoice, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() { EXIT_INPUT } else { EXIT_NUMERICAL };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_INPUT, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, message: message.into() }
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

/// Reproducibility record written next to every run's outputs.
#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    input: Option<InputDigest>,
    outputs: BTreeMap<String, String>,
    /// From `SOURCE_DATE_EPOCH` when set; never the wall clock.
    created: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

struct OutputWriter {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl OutputWriter {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        Ok(OutputWriter { dir: dir.to_path_buf(), digests: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), Failure> {
        fs::write(self.dir.join(name), contents)?;
        self.digests.insert(name.to_string(), sha256_hex(contents));
        Ok(())
    }

    fn finish(
        mut self,
        command: &'static str,
        seed: u64,
        config: serde_json::Value,
        input: Option<InputDigest>,
    ) -> Result<(), Failure> {
        let manifest = Manifest {
            tool: "impvote",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            input,
            outputs: std::mem::take(&mut self.digests),
            created: std::env::var("SOURCE_DATE_EPOCH").ok(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn parse_mode(s: &str) -> Result<InterventionMode, Failure> {
    s.parse().map_err(|e: Error| input_error(e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, Failure> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn discover(args: &DiscoverArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.gamma) {
        return Err(input_error(format!("gamma = {} not in [0, 1]", args.gamma)));
    }
    let bytes = fs::read(&args.data)
        .map_err(|e| input_error(format!("cannot read {}: {e}", args.data.display())))?;
    let options = IngestOptions {
        feature_columns: args.features.clone(),
        max_rows_per_env: args.max_rows_per_env,
    };
    let dataset = ingest_reader(bytes.as_slice(), &args.env_col, &args.target_col, &options)?;
    let config = SearchConfig {
        alpha: args.search.alpha,
        max_set_size: args.search.max_set_size,
        procedure: args.search.procedure,
        score_keep_fraction: args.search.score_keep_fraction,
        seed: args.search.seed,
    };
    let set = run_search(&dataset.samples, &config)?;
    let votes = tally(&set);
    let estimate = votes.cutoff(args.gamma)?;

    let names = &dataset.feature_names;
    let mut out = OutputWriter::new(&args.out_dir)?;
    out.write("candidates.tsv", set.to_report().as_bytes())?;
    out.write("votes.csv", votes.to_csv(names)?.as_bytes())?;
    let estimate_text: String = estimate.iter().map(|j| format!("{}\n", names[j])).collect();
    out.write("estimate.txt", estimate_text.as_bytes())?;
    let mut config_echo = to_value(args)?;
    config_echo["max_set_size_effective"] = config.effective_max_set_size(dataset.d()).into();
    config_echo["environments"] =
        to_value(&dataset.samples.iter().map(|s| (s.env_id.clone(), s.n())).collect::<Vec<_>>())?;
    out.finish(
        "discover",
        args.search.seed,
        config_echo,
        Some(InputDigest { path: args.data.display().to_string(), sha256: sha256_hex(&bytes) }),
    )?;

    println!(
        "{} environments, {} features, procedure {}, q = {}",
        dataset.n_envs(),
        dataset.d(),
        args.search.procedure,
        votes.q
    );
    print!("{}", votes.top_k_report(names, dataset.d().min(5)));
    if let Some((above, gap)) = votes.largest_gap() {
        println!("largest vote gap: {gap} below the top {above} (advisory)");
    }
    let listed: Vec<&str> = estimate.iter().map(|j| names[j].as_str()).collect();
    println!("estimate at gamma = {}: {{{}}}", fmt_num(args.gamma), listed.join(", "));
    Ok(())
}

fn replicate(args: &ReplicateArgs) -> Result<(), Failure> {
    let modes = match args.mode.as_str() {
        "both" => vec![InterventionMode::TargetOnly, InterventionMode::TargetAndFeatures],
        m => vec![parse_mode(m)?],
    };
    let defaults = ExperimentConfig::default();
    let config = ExperimentConfig {
        n_datasets: args.datasets,
        n_envs: args.envs,
        n_per_env: args.n,
        d: args.d,
        n_parents_y: args.parents,
        n_children_y: args.children,
        edge_prob: args.edge_prob.unwrap_or(defaults.edge_prob),
        gammas: args.gamma.clone(),
        procedures: args.procedure.procedures().to_vec(),
        alpha: args.alpha,
        max_set_size: Some(args.max_set_size),
        seed: args.seed,
        ..defaults
    };
    let reports =
        modes.iter().map(|&m| run_experiment(&config, m)).collect::<impvote::Result<Vec<ExperimentReport>>>()?;

    let join = |f: &dyn Fn(&ExperimentReport) -> impvote::Result<String>| -> Result<String, Failure> {
        let mut out = String::new();
        for (i, r) in reports.iter().enumerate() {
            let text = f(r)?;
            // Keep a single header line across modes.
            out.push_str(if i == 0 { &text } else { text.split_once('\n').map_or("", |x| x.1) });
        }
        Ok(out)
    };
    let mut out = OutputWriter::new(&args.out_dir)?;
    out.write("report.json", (serde_json::to_string_pretty(&reports).map_err(Error::from)? + "\n").as_bytes())?;
    out.write("topk.csv", join(&|r| r.topk_csv())?.as_bytes())?;
    out.write("success.csv", join(&|r| r.gamma_csv(false))?.as_bytes())?;
    out.write("subset.csv", join(&|r| r.gamma_csv(true))?.as_bytes())?;
    let datasets_csv = join(&|r| {
        let text = r.datasets_csv()?;
        let mode = r.mode.to_string();
        let mut lines = text.lines();
        let mut s = format!("mode,{}\n", lines.next().unwrap_or(""));
        for l in lines {
            s.push_str(&format!("{mode},{l}\n"));
        }
        Ok(s)
    })?;
    out.write("datasets.csv", datasets_csv.as_bytes())?;
    out.finish("replicate", args.seed, to_value(&config)?, None)?;

    for r in &reports {
        println!("mode {}: {} datasets completed, {} failed", r.mode, r.n_completed, r.n_failed);
        for m in &r.metrics {
            let curve: Vec<String> = m.topk_curve.iter().map(|(k, p)| format!("{k}:{p:.3}")).collect();
            println!("  {} top-k {}", m.procedure, curve.join(" "));
            for g in &m.by_gamma {
                println!(
                    "  {} gamma {:.2} success {:.3} subset {:.3}",
                    m.procedure, g.gamma, g.success_prob, g.subset_prob
                );
            }
        }
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mode = parse_mode(&args.mode)?;
    let mut rng = stream_rng(args.seed, 0);
    let dag = build_random_dag(args.d, args.edge_prob, args.parents, args.children, &mut rng)?;
    let params = attach_parameters(&dag, args.coeff_low, args.coeff_high, &mut rng)?;
    let n_x = if mode == InterventionMode::TargetOnly { 0 } else { args.n_x };
    let environments =
        make_environments(&params, args.envs, mode, args.perturb_low, args.perturb_high, n_x, &mut rng)?;
    let samples = environments
        .iter()
        .enumerate()
        .map(|(e, spec)| sample_environment(&params, spec, args.n, &mut stream_rng(args.seed, e as u64 + 1)))
        .collect::<impvote::Result<Vec<_>>>()?;
    let scm = ScmFile { dag, params, environments };

    let mut out = OutputWriter::new(&args.out_dir)?;
    out.write("scm.json", (scm.to_json()? + "\n").as_bytes())?;
    let mut csv = Vec::new();
    write_samples_csv(&mut csv, &samples)?;
    out.write("samples.csv", &csv)?;
    out.finish("simulate", args.seed, to_value(args)?, None)?;
    let parents: Vec<String> = scm.dag.parents_y().iter().map(|j| format!("x{}", j + 1)).collect();
    println!("parents of y: {{{}}}", parents.join(", "));
    Ok(())
}

fn enumerate(args: &EnumerateArgs) -> Result<(), Failure> {
    if args.d < 2 || args.d > 64 {
        return Err(input_error(format!("d = {} not in 2..=64", args.d)));
    }
    let max = args.max_set_size.unwrap_or_else(|| SearchConfig::default_max_set_size(args.d));
    if max < 1 || max > args.d {
        return Err(input_error(format!("max set size {max} not in 1..={}", args.d)));
    }
    let mut counted: u128 = 0;
    for t in enumerate_tuples(args.d, max) {
        if args.list {
            println!("{t}");
        }
        counted += 1;
    }
    let closed = tuple_count(args.d, max);
    println!("tuples {counted}");
    println!("closed form {closed}");
    if counted != closed {
        return Err(Failure { code: EXIT_NUMERICAL, message: "enumeration disagrees with the closed form".into() });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Discover(a) => discover(a),
        Command::Replicate(a) => replicate(a),
        Command::Simulate(a) => simulate(a),
        Command::Enumerate(a) => enumerate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
