//! Tests for the invariant matching property of a tuple `(k, R, S)`:
//!
//! `E_l[Y | X_S] = lambda * E_l[X_k | X_R] + eta^T X` in every environment,
//! with `lambda` and `eta` shared by all environments.
//!
//! Two finite-sample procedures are provided. The definition procedure
//! ([`imp_test`]) fits the matching relation on per-environment regression
//! coefficients and runs a Wald test on its residuals. The invariance
//! procedure ([`imp_inv_test`]) regresses `Y` on `(X_S, Z^e)` with
//! `Z^e = E_l[X_k | X_R]` fitted per environment, pooled over environments,
//! and checks that the residual distribution does not depend on the
//! environment.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmmse::{
    residual_cross_product, unit_cross_covariance, EmbeddedCoeffs, EnvMoments, MomentFit, Target,
};
use crate::scm::{EnvSample, PopulationModel};
use crate::sets::FeatureSet;
use crate::stats;

/// Relative tolerance below which population coefficients count as equal
/// across environments.
pub const POPULATION_IDENT_TOLERANCE: f64 = 1e-9;

const GLS_MAX_ITERATIONS: usize = 20;

/// Candidate `(k, R, S)`; indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tuple {
    pub k: usize,
    pub r: FeatureSet,
    pub s: FeatureSet,
}

impl Tuple {
    pub fn new(k: usize, r: FeatureSet, s: FeatureSet) -> Result<Self> {
        if r.contains(k) {
            return Err(Error::InvalidArgument(format!(
                "matched feature x{} must not be in R = {r}",
                k + 1
            )));
        }
        Ok(Tuple { k, r, s })
    }

    /// `R ⊆ S \ {k}`, the shape produced by the exhaustive search.
    pub fn is_search_shaped(&self) -> bool {
        self.r.is_subset(self.s.without(self.k))
    }

    /// Coordinates with a nonzero coefficient in either regression.
    pub fn union(&self) -> FeatureSet {
        self.s.union(self.r)
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.k >= d || self.r.bound() > d || self.s.bound() > d {
            return Err(Error::InvalidArgument(format!("tuple {self} out of range for d = {d}")));
        }
        if self.r.contains(self.k) {
            return Err(Error::InvalidArgument(format!("tuple {self} has k in R")));
        }
        Ok(())
    }

    /// Ordering key used to canonicalize candidate lists.
    pub fn sort_key(&self) -> (usize, FeatureSet, FeatureSet) {
        (self.k, self.s, self.r)
    }
}

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.k + 1, self.r, self.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Procedure {
    #[serde(rename = "imp")]
    Definition,
    #[serde(rename = "imp-inv")]
    Invariance,
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Definition => "imp",
            Procedure::Invariance => "imp-inv",
        })
    }
}

/// A tuple that passed its tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpCandidate {
    pub tuple: Tuple,
    pub lambda_hat: f64,
    pub eta_hat: EmbeddedCoeffs,
    pub p_imp: f64,
    pub p_ident: f64,
    /// Two-sided p-value of `lambda = 0`.
    pub p_lambda: f64,
    /// Leave-one-environment-out MSE; lower is more predictive.
    pub score: f64,
    pub procedure: Procedure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    NotIdentifiable,
    MatchingRejected,
    LambdaZero,
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpRejection {
    pub tuple: Tuple,
    pub reason: RejectReason,
    pub p_imp: f64,
    pub p_ident: f64,
    pub p_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImpVerdict {
    Accepted(ImpCandidate),
    Rejected(ImpRejection),
}

impl ImpVerdict {
    pub fn accepted(self) -> Option<ImpCandidate> {
        match self {
            ImpVerdict::Accepted(c) => Some(c),
            ImpVerdict::Rejected(_) => None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, ImpVerdict::Accepted(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identifiability {
    pub p_value: f64,
    pub identifiable: bool,
}

/// Per-environment moments shared by all tests on one dataset.
#[derive(Debug, Clone)]
pub struct EnvData {
    moments: Vec<EnvMoments>,
    pooled: EnvMoments,
    /// Joint `(X, Y)` rows per environment, for tests needing raw residuals.
    rows: Vec<DMatrix<f64>>,
    d: usize,
}

impl EnvData {
    pub fn new(samples: &[EnvSample]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least 2 environments are required, got {}",
                samples.len()
            )));
        }
        let d = samples[0].d();
        if samples.iter().any(|s| s.d() != d) {
            return Err(Error::InvalidArgument("environments have different feature counts".into()));
        }
        let moments: Vec<EnvMoments> = samples.iter().map(EnvMoments::from_sample).collect();
        let pooled = EnvMoments::pooled(&moments);
        let rows = samples
            .iter()
            .map(|s| {
                let mut w = DMatrix::<f64>::zeros(s.n(), d + 1);
                w.columns_mut(0, d).copy_from(&s.x);
                w.set_column(d, &s.y);
                w
            })
            .collect();
        Ok(EnvData {
            moments,
            pooled,
            rows,
            d,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_envs(&self) -> usize {
        self.moments.len()
    }

    pub fn moments(&self) -> &[EnvMoments] {
        &self.moments
    }

    /// Per-environment fits of `Y` on `X_S`.
    pub fn response_fits(&self, s: FeatureSet) -> Result<Vec<MomentFit>> {
        self.moments
            .iter()
            .map(|m| MomentFit::new(m, Target::Response, s))
            .collect()
    }

    /// Per-environment fits of `X_k` on `X_R`.
    pub fn feature_fits(&self, k: usize, r: FeatureSet) -> Result<Vec<MomentFit>> {
        self.moments
            .iter()
            .map(|m| MomentFit::new(m, Target::Feature(k), r))
            .collect()
    }

    /// Chow-type F test of equal `X_k ~ X_R` coefficients across environments,
    /// given the per-environment fits.
    pub fn identifiability(
        &self,
        k: usize,
        r: FeatureSet,
        fits: &[MomentFit],
        alpha: f64,
    ) -> Result<Identifiability> {
        let pooled = MomentFit::new(&self.pooled, Target::Feature(k), r)?;
        let p = (r.len() + 1) as f64;
        let envs = self.n_envs() as f64;
        let rss_sep: f64 = fits.iter().map(MomentFit::rss).sum();
        let rss_pooled = pooled.rss();
        let df1 = (envs - 1.0) * p;
        let df2 = self.pooled.n as f64 - envs * p;
        if df2 <= 0.0 {
            return Err(Error::InsufficientSamples {
                needed: (envs * p) as usize,
                got: self.pooled.n,
            });
        }
        let scale = rss_pooled.abs().max(f64::MIN_POSITIVE);
        let gain = rss_pooled - rss_sep;
        let p_value = if gain <= 1e-12 * scale {
            1.0
        } else if rss_sep <= 0.0 {
            0.0
        } else {
            stats::f_sf((gain / df1) / (rss_sep / df2), df1, df2)
        };
        Ok(Identifiability {
            p_value,
            identifiable: p_value < alpha,
        })
    }

    /// Wald matching test given the response and feature fits.
    pub fn matching_test(
        &self,
        tuple: Tuple,
        theta: &[MomentFit],
        gamma: &[MomentFit],
        ident: Identifiability,
        alpha: f64,
    ) -> Result<ImpVerdict> {
        let df = matching_df(self.n_envs(), tuple.union().len());
        if df <= 0 {
            return Err(Error::DegreesOfFreedom { df });
        }
        let reject = |reason, p_imp, p_lambda| {
            Ok(ImpVerdict::Rejected(ImpRejection {
                tuple,
                reason,
                p_imp,
                p_ident: ident.p_value,
                p_lambda,
            }))
        };
        if !ident.identifiable {
            return reject(RejectReason::NotIdentifiable, f64::NAN, f64::NAN);
        }
        let wald = match self.wald_statistic(tuple, theta, gamma) {
            Ok(w) => w,
            Err(Error::DegenerateFit) | Err(Error::NumericalFailure(_)) => {
                return reject(RejectReason::Numerical, f64::NAN, f64::NAN)
            }
            Err(e) => return Err(e),
        };
        let p_imp = stats::chi_square_sf(wald.statistic, df as f64);
        let p_lambda = stats::normal_two_sided(wald.lambda / wald.lambda_se);
        if p_imp < alpha {
            return reject(RejectReason::MatchingRejected, p_imp, p_lambda);
        }
        if !(p_lambda < alpha) {
            return reject(RejectReason::LambdaZero, p_imp, p_lambda);
        }
        let score = self.score_from_fits(tuple, theta, gamma, wald.lambda, &wald.eta)?;
        Ok(ImpVerdict::Accepted(ImpCandidate {
            tuple,
            lambda_hat: wald.lambda,
            eta_hat: wald.eta,
            p_imp,
            p_ident: ident.p_value,
            p_lambda,
            score,
            procedure: Procedure::Definition,
        }))
    }

    fn wald_statistic(&self, tuple: Tuple, theta: &[MomentFit], gamma: &[MomentFit]) -> Result<Wald> {
        let d = self.d;
        let coords: Vec<usize> = tuple.union().to_vec();
        let dim = coords.len() + 1;
        let position = |j: usize| coords.binary_search(&j).expect("coordinate in union") + 1;
        let restrict = |c: &EmbeddedCoeffs| {
            DVector::from_fn(dim, |i, _| if i == 0 { c.intercept } else { c.coef[coords[i - 1]] })
        };
        // Embed covariance blocks from (intercept, cond) coordinates into `coords`.
        let embed = |block: &DMatrix<f64>, rows: FeatureSet, cols: FeatureSet| {
            let rp: Vec<usize> = std::iter::once(0).chain(rows.iter().map(position)).collect();
            let cp: Vec<usize> = std::iter::once(0).chain(cols.iter().map(position)).collect();
            let mut out = DMatrix::<f64>::zeros(dim, dim);
            for (a, &ra) in rp.iter().enumerate() {
                for (b, &cb) in cp.iter().enumerate() {
                    out[(ra, cb)] = block[(a, b)];
                }
            }
            out
        };

        struct EnvTerms {
            theta: DVector<f64>,
            gamma: DVector<f64>,
            v_theta: DMatrix<f64>,
            v_gamma: DMatrix<f64>,
            cross: DMatrix<f64>,
        }
        let mut terms = Vec::with_capacity(self.n_envs());
        let mut theta_emb = Vec::with_capacity(self.n_envs());
        let mut gamma_emb = Vec::with_capacity(self.n_envs());
        for ((m, th), ga) in self.moments.iter().zip(theta).zip(gamma) {
            let df_u = m.n as f64 - 1.0 - coords.len() as f64;
            if df_u <= 0.0 {
                return Err(Error::InsufficientSamples {
                    needed: coords.len() + 1,
                    got: m.n,
                });
            }
            let s_tt = th.rss() / df_u;
            let s_gg = ga.rss() / df_u;
            let s_tg = residual_cross_product(m, th, ga) / df_u;
            let te = th.embedded(d);
            let ge = ga.embedded(d);
            terms.push(EnvTerms {
                theta: restrict(&te),
                gamma: restrict(&ge),
                v_theta: embed(&(unit_cross_covariance(m, th, th) * s_tt), tuple.s, tuple.s),
                v_gamma: embed(&(unit_cross_covariance(m, ga, ga) * s_gg), tuple.r, tuple.r),
                cross: embed(&(unit_cross_covariance(m, th, ga) * s_tg), tuple.s, tuple.r),
            });
            theta_emb.push(te);
            gamma_emb.push(ge);
        }

        let start = fit_matching(&theta_emb, &gamma_emb)?;
        let mut lambda = start.lambda;
        let mut solution = None;
        for _ in 0..GLS_MAX_ITERATIONS {
            let precisions = terms
                .iter()
                .map(|t| {
                    let cp = &t.cross + t.cross.transpose();
                    let w = &t.v_theta + &t.v_gamma * (lambda * lambda) - cp * lambda;
                    spd_inverse(w)
                })
                .collect::<Result<Vec<_>>>()?;
            // Unknowns (lambda, eta_0, .., eta_m); design per env is [gamma_e | I].
            let mut normal = DMatrix::<f64>::zeros(dim + 1, dim + 1);
            let mut rhs = DVector::<f64>::zeros(dim + 1);
            for (t, p) in terms.iter().zip(&precisions) {
                let pg = p * &t.gamma;
                let pt = p * &t.theta;
                normal[(0, 0)] += t.gamma.dot(&pg);
                for i in 0..dim {
                    normal[(0, i + 1)] += pg[i];
                    normal[(i + 1, 0)] += pg[i];
                }
                {
                    let mut block = normal.view_mut((1, 1), (dim, dim));
                    block += p;
                }
                rhs[0] += t.gamma.dot(&pt);
                {
                    let mut tail = rhs.rows_mut(1, dim);
                    tail += &pt;
                }
            }
            let normal_inv = spd_inverse(normal)?;
            let beta = &normal_inv * rhs;
            let eta = beta.rows(1, dim).into_owned();
            let statistic: f64 = terms
                .iter()
                .zip(&precisions)
                .map(|(t, p)| {
                    let r = &t.theta - &t.gamma * beta[0] - &eta;
                    r.dot(&(p * &r))
                })
                .sum();
            let converged = (beta[0] - lambda).abs() <= 1e-10 * (1.0 + lambda.abs());
            lambda = beta[0];
            solution = Some((beta, normal_inv[(0, 0)], statistic));
            if converged {
                break;
            }
        }
        let (beta, var_lambda, statistic) = solution.expect("at least one iteration");
        let mut eta = EmbeddedCoeffs::zeros(d);
        eta.intercept = beta[1];
        for (i, &j) in coords.iter().enumerate() {
            eta.coef[j] = beta[i + 2];
        }
        Ok(Wald {
            statistic,
            lambda: beta[0],
            lambda_se: var_lambda.max(0.0).sqrt(),
            eta,
        })
    }

    /// Pooled-regression invariance test given the feature fits (for `Z^e`)
    /// and the response fits (used only for scoring).
    pub fn invariance_test(
        &self,
        tuple: Tuple,
        theta: &[MomentFit],
        gamma: &[MomentFit],
        ident: Identifiability,
        alpha: f64,
    ) -> Result<ImpVerdict> {
        let reject = |reason, p_imp, p_lambda| {
            Ok(ImpVerdict::Rejected(ImpRejection {
                tuple,
                reason,
                p_imp,
                p_ident: ident.p_value,
                p_lambda,
            }))
        };
        if !ident.identifiable {
            return reject(RejectReason::NotIdentifiable, f64::NAN, f64::NAN);
        }
        let d = self.d;
        let s_cols = tuple.s.to_vec();
        let ps = s_cols.len();
        // Transformed variables v = (X_S, Z, Y) = L_e w + c_e.
        let maps: Vec<(DMatrix<f64>, DVector<f64>)> = gamma
            .iter()
            .map(|g| {
                let mut l = DMatrix::<f64>::zeros(ps + 2, d + 1);
                for (i, &j) in s_cols.iter().enumerate() {
                    l[(i, j)] = 1.0;
                }
                for (i, j) in g.cond_set().iter().enumerate() {
                    l[(ps, j)] = g.slopes()[i];
                }
                l[(ps + 1, d)] = 1.0;
                let mut c = DVector::<f64>::zeros(ps + 2);
                c[ps] = g.intercept();
                (l, c)
            })
            .collect();
        let transformed: Vec<EnvMoments> = self
            .moments
            .iter()
            .zip(&maps)
            .map(|(m, (l, c))| EnvMoments {
                n: m.n,
                mean: l * &m.mean + c,
                scatter: l * &m.scatter * l.transpose(),
            })
            .collect();
        let pooled = EnvMoments::pooled(&transformed);
        let fit = match MomentFit::new(&pooled, Target::Response, FeatureSet::full(ps + 1)) {
            Ok(f) => f,
            Err(Error::RankDeficient { .. }) => return reject(RejectReason::Numerical, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let slopes = fit.slopes();
        let lambda = slopes[ps];
        let resid_df = pooled.n as f64 - ps as f64 - 2.0;
        let sigma2 = fit.rss() / resid_df;
        let lambda_se = (sigma2 * fit.proj.inv[(ps, ps)]).max(0.0).sqrt();
        let p_lambda = stats::t_two_sided(lambda / lambda_se, resid_df);

        // Residual r = h_e^T w + h0_e in each environment.
        let resid_maps: Vec<(DVector<f64>, f64)> = maps
            .iter()
            .map(|(l, c)| {
                let mut coef = DVector::<f64>::zeros(ps + 2);
                for i in 0..=ps {
                    coef[i] = -slopes[i];
                }
                coef[ps + 1] = 1.0;
                let h = l.tr_mul(&coef);
                (h, coef.dot(c) - fit.intercept())
            })
            .collect();
        let envs = self.n_envs();
        let sizes: Vec<f64> = self.moments.iter().map(|m| m.n as f64).collect();
        let means: Vec<f64> = self
            .moments
            .iter()
            .zip(&resid_maps)
            .map(|(m, (h, h0))| h.dot(&m.mean) + h0)
            .collect();
        let ss: Vec<f64> = self
            .moments
            .iter()
            .zip(&resid_maps)
            .map(|(m, (h, _))| h.dot(&(&m.scatter * h)).max(0.0))
            .collect();
        let total_n: f64 = sizes.iter().sum();
        let mut min_p = 1.0f64;
        let mut rest_means = Vec::with_capacity(envs);
        for e in 0..envs {
            let n_rest = total_n - sizes[e];
            let mean_rest = (0..envs).filter(|&h| h != e).map(|h| sizes[h] * means[h]).sum::<f64>() / n_rest;
            let ss_rest: f64 = (0..envs)
                .filter(|&h| h != e)
                .map(|h| ss[h] + sizes[h] * (means[h] - mean_rest).powi(2))
                .sum();
            rest_means.push(mean_rest);
            min_p = min_p.min(stats::welch_t_test(sizes[e], means[e], ss[e], n_rest, mean_rest, ss_rest));
        }
        let bonferroni = (2 * envs) as f64;
        // Once the mean tests alone reject, the variance tests cannot undo it.
        if bonferroni * min_p >= alpha {
            let residuals: Vec<DVector<f64>> = self
                .rows
                .iter()
                .zip(&resid_maps)
                .map(|(w, (h, h0))| {
                    let mut r = w * h;
                    r.add_scalar_mut(*h0);
                    r
                })
                .collect();
            for e in 0..envs {
                min_p = min_p.min(levene_env_vs_rest(&residuals, e, means[e], rest_means[e]));
            }
        }
        let p_imp = (bonferroni * min_p).min(1.0);
        if p_imp < alpha {
            return reject(RejectReason::MatchingRejected, p_imp, p_lambda);
        }
        if !(p_lambda < alpha) {
            return reject(RejectReason::LambdaZero, p_imp, p_lambda);
        }
        let mut eta = EmbeddedCoeffs::zeros(d);
        eta.intercept = fit.intercept();
        for (i, &j) in s_cols.iter().enumerate() {
            eta.coef[j] = slopes[i];
        }
        let score = self.score_from_fits(tuple, theta, gamma, lambda, &eta)?;
        Ok(ImpVerdict::Accepted(ImpCandidate {
            tuple,
            lambda_hat: lambda,
            eta_hat: eta,
            p_imp,
            p_ident: ident.p_value,
            p_lambda,
            score,
            procedure: Procedure::Invariance,
        }))
    }

    /// Leave-one-environment-out MSE of `lambda Z^h + eta^T X` on each held-out
    /// environment `h`, with `(lambda, eta)` refit on the remaining
    /// environments when at least two remain and the refit is identifiable.
    pub fn score_from_fits(
        &self,
        tuple: Tuple,
        theta: &[MomentFit],
        gamma: &[MomentFit],
        lambda: f64,
        eta: &EmbeddedCoeffs,
    ) -> Result<f64> {
        let d = self.d;
        let envs = self.n_envs();
        let theta_emb: Vec<EmbeddedCoeffs> = theta.iter().map(|f| f.embedded(d)).collect();
        let gamma_emb: Vec<EmbeddedCoeffs> = gamma.iter().map(|f| f.embedded(d)).collect();
        let mut total = 0.0;
        for h in 0..envs {
            let (lam, et) = if envs >= 3 {
                let th: Vec<EmbeddedCoeffs> =
                    (0..envs).filter(|&e| e != h).map(|e| theta_emb[e].clone()).collect();
                let ga: Vec<EmbeddedCoeffs> =
                    (0..envs).filter(|&e| e != h).map(|e| gamma_emb[e].clone()).collect();
                match fit_matching(&th, &ga) {
                    Ok(f) => (f.lambda, f.eta),
                    Err(Error::DegenerateFit) => (lambda, eta.clone()),
                    Err(e) => return Err(e),
                }
            } else {
                (lambda, eta.clone())
            };
            total += heldout_mse(&self.moments[h], tuple.k, &gamma_emb[h], lam, &et);
        }
        Ok(total / envs as f64)
    }
}

struct Wald {
    statistic: f64,
    lambda: f64,
    lambda_se: f64,
    eta: EmbeddedCoeffs,
}

/// `|E| (m + 1) - (m + 2)` for `m = |S ∪ R|`.
pub fn matching_df(n_envs: usize, union_size: usize) -> i64 {
    n_envs as i64 * (union_size as i64 + 1) - (union_size as i64 + 2)
}

fn spd_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = m.nrows();
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    let ridge = 1e-12 * (m.trace().abs() / dim as f64).max(f64::MIN_POSITIVE);
    let mut damped = m;
    for i in 0..dim {
        damped[(i, i)] += ridge;
    }
    damped
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NumericalFailure("matching covariance is not positive definite".into()))
}

/// MSE of predicting `Y` by `lambda (gamma^T (1, X)) + eta^T (1, X)` from
/// one environment's moments.
fn heldout_mse(m: &EnvMoments, k: usize, gamma: &EmbeddedCoeffs, lambda: f64, eta: &EmbeddedCoeffs) -> f64 {
    let d = m.d();
    let _ = k;
    let mut h = DVector::<f64>::zeros(d + 1);
    h[d] = 1.0;
    for j in 0..d {
        h[j] = -(lambda * gamma.coef[j] + eta.coef[j]);
    }
    let offset = -(lambda * gamma.intercept + eta.intercept);
    let mean = h.dot(&m.mean) + offset;
    let var = h.dot(&(&m.scatter * &h)) / m.n as f64;
    mean * mean + var.max(0.0)
}

/// Levene's test (absolute deviations from group means) for environment `e`
/// against all others pooled.
fn levene_env_vs_rest(residuals: &[DVector<f64>], e: usize, mean_env: f64, mean_rest: f64) -> f64 {
    let mut sum = [0.0f64; 2];
    let mut sum_sq = [0.0f64; 2];
    let mut count = [0.0f64; 2];
    for (h, r) in residuals.iter().enumerate() {
        let (g, center) = if h == e { (0, mean_env) } else { (1, mean_rest) };
        for &v in r.iter() {
            let z = (v - center).abs();
            sum[g] += z;
            sum_sq[g] += z * z;
            count[g] += 1.0;
        }
    }
    let n = count[0] + count[1];
    let grand = (sum[0] + sum[1]) / n;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in 0..2 {
        let mg = sum[g] / count[g];
        between += count[g] * (mg - grand).powi(2);
        within += sum_sq[g] - count[g] * mg * mg;
    }
    if within <= 0.0 {
        return if between > 0.0 { 0.0 } else { 1.0 };
    }
    stats::f_sf(between / (within / (n - 2.0)), 1.0, n - 2.0)
}

/// Least-squares matching of per-environment coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingFit {
    pub lambda: f64,
    pub eta: EmbeddedCoeffs,
    /// `sum_e ||theta_e - lambda gamma_e - eta||^2` at the optimum.
    pub residual_norm: f64,
}

/// Solves `min_{lambda, eta} sum_e ||theta_e - lambda gamma_e - eta||^2` in
/// closed form over the `(intercept, coefficients)` embedding.
pub fn fit_matching(theta: &[EmbeddedCoeffs], gamma: &[EmbeddedCoeffs]) -> Result<MatchingFit> {
    if theta.len() != gamma.len() || theta.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need equal-length coefficient lists with at least 2 environments, got {} and {}",
            theta.len(),
            gamma.len()
        )));
    }
    let d = theta[0].d();
    if theta.iter().chain(gamma).any(|c| c.d() != d) {
        return Err(Error::InvalidArgument("coefficient dimensions differ".into()));
    }
    let envs = theta.len() as f64;
    let th: Vec<DVector<f64>> = theta.iter().map(EmbeddedCoeffs::to_vector).collect();
    let ga: Vec<DVector<f64>> = gamma.iter().map(EmbeddedCoeffs::to_vector).collect();
    let th_bar = th.iter().fold(DVector::zeros(d + 1), |acc, v| acc + v) / envs;
    let ga_bar = ga.iter().fold(DVector::zeros(d + 1), |acc, v| acc + v) / envs;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for (t, g) in th.iter().zip(&ga) {
        let gc = g - &ga_bar;
        num += (t - &th_bar).dot(&gc);
        den += gc.norm_squared();
        scale += g.norm_squared();
    }
    if den <= 1e-28 * (1.0 + scale) {
        return Err(Error::DegenerateFit);
    }
    let lambda = num / den;
    let eta_v = &th_bar - &ga_bar * lambda;
    let residual_norm = th
        .iter()
        .zip(&ga)
        .map(|(t, g)| (t - g * lambda - &eta_v).norm_squared())
        .sum();
    Ok(MatchingFit {
        lambda,
        eta: EmbeddedCoeffs::from_vector(&eta_v),
        residual_norm,
    })
}

/// F test of equal `X_k ~ X_R` coefficients across environments; the
/// matching parameter is identifiable when equality is rejected.
pub fn identifiability_test(
    samples: &[EnvSample],
    k: usize,
    r: FeatureSet,
    alpha: f64,
) -> Result<Identifiability> {
    let data = EnvData::new(samples)?;
    Tuple::new(k, r, FeatureSet::empty())?.check(data.d())?;
    let fits = data.feature_fits(k, r)?;
    data.identifiability(k, r, &fits, alpha)
}

fn prepare(samples: &[EnvSample], tuple: Tuple, alpha: f64) -> Result<(EnvData, Vec<MomentFit>, Vec<MomentFit>, Identifiability)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("significance level {alpha} not in (0, 1)")));
    }
    let df = matching_df(samples.len(), tuple.union().len());
    if df <= 0 {
        return Err(Error::DegreesOfFreedom { df });
    }
    let data = EnvData::new(samples)?;
    tuple.check(data.d())?;
    let theta = data.response_fits(tuple.s)?;
    let gamma = data.feature_fits(tuple.k, tuple.r)?;
    let ident = data.identifiability(tuple.k, tuple.r, &gamma, alpha)?;
    Ok((data, theta, gamma, ident))
}

/// Definition-based IMP test of `tuple` at level `alpha`.
pub fn imp_test(samples: &[EnvSample], tuple: Tuple, alpha: f64) -> Result<ImpVerdict> {
    let (data, theta, gamma, ident) = prepare(samples, tuple, alpha)?;
    data.matching_test(tuple, &theta, &gamma, ident, alpha)
}

/// Invariance-based IMP test of `tuple` at level `alpha`.
pub fn imp_inv_test(samples: &[EnvSample], tuple: Tuple, alpha: f64) -> Result<ImpVerdict> {
    let (data, theta, gamma, ident) = prepare(samples, tuple, alpha)?;
    data.invariance_test(tuple, &theta, &gamma, ident, alpha)
}

/// Leave-one-environment-out prediction MSE of a fitted candidate.
pub fn prediction_score(samples: &[EnvSample], candidate: &ImpCandidate) -> Result<f64> {
    let data = EnvData::new(samples)?;
    candidate.tuple.check(data.d())?;
    let theta = data.response_fits(candidate.tuple.s)?;
    let gamma = data.feature_fits(candidate.tuple.k, candidate.tuple.r)?;
    data.score_from_fits(candidate.tuple, &theta, &gamma, candidate.lambda_hat, &candidate.eta_hat)
}

/// Exact per-environment coefficients `(theta_e, gamma_e)` of a tuple.
pub fn population_coefficients(
    pops: &[PopulationModel],
    tuple: Tuple,
) -> Result<(Vec<EmbeddedCoeffs>, Vec<EmbeddedCoeffs>)> {
    let d = pops.first().map_or(0, PopulationModel::d);
    tuple.check(d)?;
    let theta = pops
        .iter()
        .map(|p| crate::lmmse::population_lmmse(p, Target::Response, tuple.s))
        .collect::<Result<Vec<_>>>()?;
    let gamma = pops
        .iter()
        .map(|p| crate::lmmse::population_lmmse(p, Target::Feature(tuple.k), tuple.r))
        .collect::<Result<Vec<_>>>()?;
    Ok((theta, gamma))
}

/// Whether exact coefficient vectors differ across environments.
pub fn population_identifiable(gamma: &[EmbeddedCoeffs]) -> bool {
    let vs: Vec<DVector<f64>> = gamma.iter().map(EmbeddedCoeffs::to_vector).collect();
    let scale = vs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    vs.iter()
        .skip(1)
        .any(|v| (v - &vs[0]).norm() > POPULATION_IDENT_TOLERANCE * (1.0 + scale))
}

/// Population-level classification of one tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVerdict {
    pub identifiable: bool,
    /// Present when identifiable.
    pub fit: Option<MatchingFit>,
}

pub fn oracle_verdict(pops: &[PopulationModel], tuple: Tuple) -> Result<OracleVerdict> {
    let (theta, gamma) = population_coefficients(pops, tuple)?;
    if !population_identifiable(&gamma) {
        return Ok(OracleVerdict {
            identifiable: false,
            fit: None,
        });
    }
    Ok(OracleVerdict {
        identifiable: true,
        fit: Some(fit_matching(&theta, &gamma)?),
    })
}
