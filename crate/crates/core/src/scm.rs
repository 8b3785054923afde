//! Linear structural causal models over features `X_1..X_d` and a target `Y`,
//! with interventions on the target's assignment (and optionally shifts on
//! features), random graph/parameter generation, sampling and exact
//! per-environment moments.
//!
//! Joint vectors are ordered `(X_1, .., X_d, Y)`; the target lives at index `d`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sets::{FeatureSet, MAX_FEATURES};

/// Minimum separation between any two environments' coefficients on a parent.
pub const BETA_SEPARATION: f64 = 1e-9;

const MAX_REDRAWS: usize = 1000;

/// Deterministic random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Causal graph over `X_1..X_d` plus the target `Y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    d: usize,
    /// Ordered pairs `(i, j)` meaning `X_i -> X_j`.
    edges_xx: BTreeSet<(usize, usize)>,
    /// `PA(Y)`.
    parents_y: FeatureSet,
    /// `CH(Y)`.
    children_y: FeatureSet,
}

impl Dag {
    pub fn new(
        d: usize,
        edges_xx: impl IntoIterator<Item = (usize, usize)>,
        parents_y: FeatureSet,
        children_y: FeatureSet,
    ) -> Result<Self> {
        if d == 0 || d > MAX_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "feature count {d} must be in 1..={MAX_FEATURES}"
            )));
        }
        let edges_xx: BTreeSet<_> = edges_xx.into_iter().collect();
        for &(i, j) in &edges_xx {
            if i >= d || j >= d || i == j {
                return Err(Error::InvalidArgument(format!("invalid edge x{} -> x{}", i + 1, j + 1)));
            }
        }
        if parents_y.bound() > d || children_y.bound() > d {
            return Err(Error::InvalidArgument("target edge index out of range".into()));
        }
        if !parents_y.intersection(children_y).is_empty() {
            return Err(Error::InvalidArgument(
                "a feature cannot be both parent and child of the target".into(),
            ));
        }
        let dag = Dag {
            d,
            edges_xx,
            parents_y,
            children_y,
        };
        if dag.topological_order().is_none() {
            return Err(Error::InvalidArgument("graph contains a cycle".into()));
        }
        Ok(dag)
    }

    /// `X_1 -> Y -> X_2`.
    pub fn chain() -> Self {
        Dag::new(2, [], FeatureSet::singleton(0), FeatureSet::singleton(1))
            .expect("chain graph is valid")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges_xx(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges_xx
    }

    pub fn parents_y(&self) -> FeatureSet {
        self.parents_y
    }

    pub fn children_y(&self) -> FeatureSet {
        self.children_y
    }

    /// Ordered node list (features `0..d`, target `d`) or `None` if cyclic.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let nodes = self.d + 1;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        let mut indegree = vec![0usize; nodes];
        let mut add = |from: usize, to: usize| {
            children[from].push(to);
            indegree[to] += 1;
        };
        for &(i, j) in &self.edges_xx {
            add(i, j);
        }
        for p in self.parents_y.iter() {
            add(p, self.d);
        }
        for c in self.children_y.iter() {
            add(self.d, c);
        }
        let mut ready: Vec<usize> = (0..nodes).filter(|&v| indegree[v] == 0).collect();
        ready.reverse();
        let mut order = Vec::with_capacity(nodes);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == nodes).then_some(order)
    }

    /// Features reachable from `Y` by a directed path.
    pub fn descendants_y(&self) -> FeatureSet {
        let mut out = self.children_y;
        loop {
            let mut grown = out;
            for &(i, j) in &self.edges_xx {
                if out.contains(i) {
                    grown.insert(j);
                }
            }
            if grown == out {
                return out;
            }
            out = grown;
        }
    }
}

/// Random DAG over a uniformly random topological order of the `d + 1` nodes.
///
/// The target is placed so that exactly `n_parents_y` parents are drawn from
/// its predecessors and `n_children_y` children from its successors; every
/// forward feature-feature pair becomes an edge with probability `edge_prob`.
pub fn build_random_dag<R: Rng + ?Sized>(
    d: usize,
    edge_prob: f64,
    n_parents_y: usize,
    n_children_y: usize,
    rng: &mut R,
) -> Result<Dag> {
    if !(2..=MAX_FEATURES).contains(&d) {
        return Err(Error::InvalidArgument(format!("d = {d} must be in 2..={MAX_FEATURES}")));
    }
    if n_parents_y < 1 || n_children_y < 1 || n_parents_y + n_children_y > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= parents ({n_parents_y}), 1 <= children ({n_children_y}) and parents + children <= d ({d})"
        )));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::InvalidArgument(format!("edge probability {edge_prob} not in [0, 1]")));
    }

    let mut features: Vec<usize> = (0..d).collect();
    features.shuffle(rng);
    // Number of features preceding Y in the order.
    let y_pos = rng.random_range(n_parents_y..=d - n_children_y);
    let (before, after) = features.split_at(y_pos);

    let parents_y: FeatureSet = before
        .choose_multiple(rng, n_parents_y)
        .copied()
        .collect();
    let children_y: FeatureSet = after
        .choose_multiple(rng, n_children_y)
        .copied()
        .collect();

    let mut edges = Vec::new();
    for a in 0..d {
        for b in (a + 1)..d {
            if rng.random_bool(edge_prob) {
                edges.push((features[a], features[b]));
            }
        }
    }
    Dag::new(d, edges, parents_y, children_y)
}

/// Coefficients and noise scales shared by every environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmParams {
    /// Coefficient of `Y` in each feature's assignment (nonzero on `CH(Y)`).
    pub alpha: Vec<f64>,
    /// `b[j][i]` is the coefficient of `X_i` in the assignment of `X_j`.
    pub b: Vec<Vec<f64>>,
    /// Observational coefficients of the target's parents.
    pub beta_base: Vec<f64>,
    pub noise_var_x: Vec<f64>,
    pub noise_var_y: f64,
}

impl ScmParams {
    pub fn d(&self) -> usize {
        self.alpha.len()
    }

    /// Support of `beta_base`, i.e. `PA(Y)`.
    pub fn parents_y(&self) -> FeatureSet {
        self.beta_base
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Checks dimensions, noise positivity and that sparsity matches `dag`.
    pub fn validate(&self, dag: &Dag) -> Result<()> {
        let d = dag.d();
        if self.alpha.len() != d
            || self.beta_base.len() != d
            || self.noise_var_x.len() != d
            || self.b.len() != d
            || self.b.iter().any(|row| row.len() != d)
        {
            return Err(Error::InvalidArgument("parameter dimensions do not match the graph".into()));
        }
        if self.noise_var_y <= 0.0 || self.noise_var_x.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("noise variances must be positive".into()));
        }
        for j in 0..d {
            if (self.alpha[j] != 0.0) != dag.children_y().contains(j) {
                return Err(Error::InvalidArgument(format!("alpha sparsity mismatch at x{}", j + 1)));
            }
            if (self.beta_base[j] != 0.0) != dag.parents_y().contains(j) {
                return Err(Error::InvalidArgument(format!("beta sparsity mismatch at x{}", j + 1)));
            }
            for i in 0..d {
                if (self.b[j][i] != 0.0) != dag.edges_xx().contains(&(i, j)) {
                    return Err(Error::InvalidArgument(format!(
                        "B sparsity mismatch at x{} -> x{}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Chain `X_1 -> Y -> X_2` with the given coefficients and unit noises.
    pub fn chain(alpha: f64, beta: f64) -> Self {
        ScmParams {
            alpha: vec![0.0, alpha],
            b: vec![vec![0.0; 2]; 2],
            beta_base: vec![beta, 0.0],
            noise_var_x: vec![1.0; 2],
            noise_var_y: 1.0,
        }
    }
}

fn signed_uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    let magnitude = if high > low { rng.random_range(low..=high) } else { low };
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Draws every coefficient on an edge of `dag` as `±U[coeff_low, coeff_high]`;
/// all noise variances are 1.
pub fn attach_parameters<R: Rng + ?Sized>(
    dag: &Dag,
    coeff_low: f64,
    coeff_high: f64,
    rng: &mut R,
) -> Result<ScmParams> {
    if !(coeff_low > 0.0 && coeff_low <= coeff_high && coeff_high.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "coefficient range [{coeff_low}, {coeff_high}] must satisfy 0 < low <= high"
        )));
    }
    let d = dag.d();
    let mut alpha = vec![0.0; d];
    let mut b = vec![vec![0.0; d]; d];
    let mut beta_base = vec![0.0; d];
    for j in dag.parents_y().iter() {
        beta_base[j] = signed_uniform(rng, coeff_low, coeff_high);
    }
    for j in dag.children_y().iter() {
        alpha[j] = signed_uniform(rng, coeff_low, coeff_high);
    }
    for &(i, j) in dag.edges_xx() {
        b[j][i] = signed_uniform(rng, coeff_low, coeff_high);
    }
    Ok(ScmParams {
        alpha,
        b,
        beta_base,
        noise_var_x: vec![1.0; d],
        noise_var_y: 1.0,
    })
}

/// Which assignments are intervened across environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterventionMode {
    /// Only the target: parent coefficients and a mean shift.
    #[serde(rename = "A")]
    TargetOnly,
    /// The target plus additive shifts on a fixed random subset of features.
    #[serde(rename = "B")]
    TargetAndFeatures,
}

impl std::str::FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(InterventionMode::TargetOnly),
            "B" | "b" => Ok(InterventionMode::TargetAndFeatures),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}' (expected A or B)"))),
        }
    }
}

impl std::fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterventionMode::TargetOnly => "A",
            InterventionMode::TargetAndFeatures => "B",
        })
    }
}

/// Parameters of one environment's intervened assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    /// Parent coefficients of `Y` in this environment.
    pub beta: Vec<f64>,
    pub shift_y: f64,
    pub shift_x: Vec<f64>,
}

impl EnvSpec {
    /// Environment with the base coefficients and no shifts.
    pub fn observational(params: &ScmParams, env_id: impl Into<String>) -> Self {
        EnvSpec {
            env_id: env_id.into(),
            beta: params.beta_base.clone(),
            shift_y: 0.0,
            shift_x: vec![0.0; params.d()],
        }
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_shift_y(mut self, shift: f64) -> Self {
        self.shift_y = shift;
        self
    }
}

/// Generates `n_envs` intervened environments.
///
/// Each parent coefficient receives a fresh `U[perturb_low, perturb_high]`
/// perturbation per environment (redrawn until it is separated from every
/// other environment's value) plus a target shift from the same range. In
/// [`InterventionMode::TargetAndFeatures`] a random subset of
/// `n_x_interventions` features, shared by all environments, additionally
/// receives per-environment shifts from the same range.
pub fn make_environments<R: Rng + ?Sized>(
    params: &ScmParams,
    n_envs: usize,
    mode: InterventionMode,
    perturb_low: f64,
    perturb_high: f64,
    n_x_interventions: usize,
    rng: &mut R,
) -> Result<Vec<EnvSpec>> {
    let d = params.d();
    if n_envs < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 environments, got {n_envs}")));
    }
    if !(perturb_low >= 0.0 && perturb_high > perturb_low && perturb_high.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "perturbation range [{perturb_low}, {perturb_high}] must satisfy 0 <= low < high"
        )));
    }
    if mode == InterventionMode::TargetAndFeatures && n_x_interventions > d {
        return Err(Error::InvalidArgument(format!(
            "cannot intervene on {n_x_interventions} of {d} features"
        )));
    }

    let parents = params.parents_y();
    let mut specs: Vec<EnvSpec> = Vec::with_capacity(n_envs);
    for e in 0..n_envs {
        let mut beta = params.beta_base.clone();
        for j in parents.iter() {
            let mut redraws = 0;
            loop {
                let candidate = params.beta_base[j] + rng.random_range(perturb_low..=perturb_high);
                let separated = specs
                    .iter()
                    .all(|s| (s.beta[j] - candidate).abs() > BETA_SEPARATION);
                if separated {
                    beta[j] = candidate;
                    break;
                }
                redraws += 1;
                if redraws >= MAX_REDRAWS {
                    return Err(Error::InvalidArgument(
                        "could not separate parent coefficients across environments".into(),
                    ));
                }
            }
        }
        let shift_y = rng.random_range(perturb_low..=perturb_high);
        specs.push(EnvSpec {
            env_id: format!("env{}", e + 1),
            beta,
            shift_y,
            shift_x: vec![0.0; d],
        });
    }

    if mode == InterventionMode::TargetAndFeatures {
        let mut idx: Vec<usize> = (0..d).collect();
        idx.shuffle(rng);
        let mut targets = idx[..n_x_interventions].to_vec();
        targets.sort_unstable();
        for spec in &mut specs {
            for &j in &targets {
                let mut v = 0.0;
                while v == 0.0 {
                    v = rng.random_range(perturb_low..=perturb_high);
                }
                spec.shift_x[j] = v;
            }
        }
    }
    Ok(specs)
}

fn check_spec(params: &ScmParams, spec: &EnvSpec) -> Result<()> {
    let d = params.d();
    if spec.beta.len() != d || spec.shift_x.len() != d {
        return Err(Error::InvalidArgument(format!(
            "environment '{}' dimensions do not match d = {d}",
            spec.env_id
        )));
    }
    for j in 0..d {
        if spec.beta[j] != 0.0 && params.beta_base[j] == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "environment '{}' puts a coefficient on non-parent x{}",
                spec.env_id,
                j + 1
            )));
        }
    }
    Ok(())
}

/// `A_e` such that `A_e (X, Y) = noise + shifts`.
fn structural_matrix(params: &ScmParams, spec: &EnvSpec) -> DMatrix<f64> {
    let d = params.d();
    let mut a = DMatrix::<f64>::identity(d + 1, d + 1);
    for j in 0..d {
        for i in 0..d {
            a[(j, i)] -= params.b[j][i];
        }
        a[(j, d)] = -params.alpha[j];
        a[(d, j)] = -spec.beta[j];
    }
    a
}

fn reduced_form(params: &ScmParams, spec: &EnvSpec) -> Result<DMatrix<f64>> {
    check_spec(params, spec)?;
    let a = structural_matrix(params, spec);
    let inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::NumericalFailure("structural system is singular".into()))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("structural system is ill-conditioned".into()));
    }
    Ok(inv)
}

fn shift_vector(spec: &EnvSpec) -> DVector<f64> {
    let d = spec.shift_x.len();
    DVector::from_fn(d + 1, |i, _| if i < d { spec.shift_x[i] } else { spec.shift_y })
}

fn noise_std(params: &ScmParams) -> Vec<f64> {
    params
        .noise_var_x
        .iter()
        .chain(std::iter::once(&params.noise_var_y))
        .map(|v| v.sqrt())
        .collect()
}

/// Observed data from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSample {
    pub env_id: String,
    /// `n x d` feature matrix.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl EnvSample {
    /// Validates shape, the `n >= d + 3` row requirement and finiteness.
    pub fn new(env_id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let env_id = env_id.into();
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "environment '{env_id}': {} feature rows but {} target values",
                x.nrows(),
                y.len()
            )));
        }
        let needed = x.ncols() + 3;
        if x.nrows() < needed {
            return Err(Error::TooFewRows {
                env: env_id,
                rows: x.nrows(),
                needed,
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("environment '{env_id}' has non-finite values")));
        }
        Ok(EnvSample { env_id, x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Column `index` of the joint `(X, Y)` layout.
    pub fn joint_column(&self, index: usize) -> nalgebra::DVectorView<'_, f64> {
        if index == self.d() {
            self.y.column(0)
        } else {
            self.x.column(index)
        }
    }
}

/// Draws `n` i.i.d. rows from the environment's structural equations.
pub fn sample_environment<R: Rng + ?Sized>(
    params: &ScmParams,
    spec: &EnvSpec,
    n: usize,
    rng: &mut R,
) -> Result<EnvSample> {
    let d = params.d();
    if n < d + 3 {
        return Err(Error::InsufficientSamples { needed: d + 2, got: n });
    }
    let inv = reduced_form(params, spec)?;
    let sd = noise_std(params);
    let shift = shift_vector(spec);
    let mut noise = DMatrix::<f64>::zeros(n, d + 1);
    for r in 0..n {
        for c in 0..=d {
            let z: f64 = rng.sample(StandardNormal);
            noise[(r, c)] = z * sd[c] + shift[c];
        }
    }
    // Rows are W_r^T = (A^{-1} e_r)^T.
    let joint = noise * inv.transpose();
    let x = joint.columns(0, d).into_owned();
    let y = joint.column(d).into_owned();
    EnvSample::new(spec.env_id.clone(), x, y)
}

/// Exact mean and covariance of `(X_1, .., X_d, Y)` in one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    pub env_id: String,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PopulationModel {
    pub fn d(&self) -> usize {
        self.mean.len() - 1
    }
}

/// Closed-form moments: `mean = A^{-1} s`, `cov = A^{-1} D A^{-T}`.
pub fn population_model(params: &ScmParams, spec: &EnvSpec) -> Result<PopulationModel> {
    let inv = reduced_form(params, spec)?;
    let d = params.d();
    let var: Vec<f64> = params
        .noise_var_x
        .iter()
        .copied()
        .chain(std::iter::once(params.noise_var_y))
        .collect();
    let noise = DMatrix::from_diagonal(&DVector::from_vec(var));
    let mut cov = &inv * noise * inv.transpose();
    // Symmetrize rounding error.
    for i in 0..=d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.clone().cholesky().is_none() {
        return Err(Error::NumericalFailure("population covariance is not positive definite".into()));
    }
    let mean = &inv * shift_vector(spec);
    Ok(PopulationModel {
        env_id: spec.env_id.clone(),
        mean,
        cov,
    })
}

/// Serializable description of a simulated SCM and its environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmFile {
    pub dag: Dag,
    pub params: ScmParams,
    pub environments: Vec<EnvSpec>,
}

impl ScmFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScmFile = serde_json::from_str(text)?;
        let dag = Dag::new(
            file.dag.d,
            file.dag.edges_xx.iter().copied(),
            file.dag.parents_y,
            file.dag.children_y,
        )?;
        file.params.validate(&dag)?;
        for spec in &file.environments {
            check_spec(&file.params, spec)?;
        }
        Ok(file)
    }
}

/// Writes samples as CSV with header `env,x1,..,xd,y`.
pub fn write_samples_csv<W: std::io::Write>(writer: W, samples: &[EnvSample]) -> Result<()> {
    let d = samples.first().map_or(0, EnvSample::d);
    let names: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    write_samples_csv_named(writer, samples, "env", &names, "y")
}

/// Writes samples as CSV with caller-supplied column names.
pub fn write_samples_csv_named<W: std::io::Write>(
    writer: W,
    samples: &[EnvSample],
    env_name: &str,
    feature_names: &[String],
    target_name: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![env_name.to_string()];
    header.extend(feature_names.iter().cloned());
    header.push(target_name.to_string());
    w.write_record(&header)?;
    for s in samples {
        if s.d() != feature_names.len() {
            return Err(Error::InvalidArgument("inconsistent feature counts across samples".into()));
        }
        for r in 0..s.n() {
            let mut rec = Vec::with_capacity(s.d() + 2);
            rec.push(s.env_id.clone());
            rec.extend((0..s.d()).map(|c| s.x[(r, c)].to_string()));
            rec.push(s.y[r].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
