//! Least-squares kernels: raw-data OLS, population LMMSE coefficients and a
//! moment-based fast path used by the tuple search.
//!
//! Coefficients are always embedded in the `(d + 1)`-dimensional space
//! `(intercept, x_1, .., x_d)` with zeros outside the conditioning set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scm::{EnvSample, PopulationModel};
use crate::sets::FeatureSet;

/// Relative singular-value floor for raw design matrices.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Floor on `1 - R^2` of any conditioning column regressed on the others,
/// used by the moment-based path (correlation-scaled Cholesky pivots).
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Variable being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Feature(usize),
    Response,
}

impl Target {
    /// Position in the joint `(X, Y)` layout.
    pub fn joint_index(self, d: usize) -> usize {
        match self {
            Target::Feature(k) => k,
            Target::Response => d,
        }
    }

    fn check(self, d: usize, cond: FeatureSet) -> Result<()> {
        if cond.bound() > d {
            return Err(Error::InvalidArgument(format!(
                "conditioning set {cond} exceeds {d} features"
            )));
        }
        if let Target::Feature(k) = self {
            if k >= d {
                return Err(Error::InvalidArgument(format!("feature x{} out of range", k + 1)));
            }
            if cond.contains(k) {
                return Err(Error::InvalidArgument(format!(
                    "target x{} is in its own conditioning set",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Intercept plus coefficients on all `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCoeffs {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl EmbeddedCoeffs {
    pub fn zeros(d: usize) -> Self {
        EmbeddedCoeffs {
            intercept: 0.0,
            coef: vec![0.0; d],
        }
    }

    fn from_restricted(d: usize, cond: FeatureSet, intercept: f64, slopes: &[f64]) -> Self {
        let mut coef = vec![0.0; d];
        for (j, &b) in cond.iter().zip(slopes) {
            coef[j] = b;
        }
        EmbeddedCoeffs { intercept, coef }
    }

    pub fn d(&self) -> usize {
        self.coef.len()
    }

    /// `(intercept, coef_1, .., coef_d)`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.d() + 1,
            std::iter::once(self.intercept).chain(self.coef.iter().copied()),
        )
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        EmbeddedCoeffs {
            intercept: v[0],
            coef: v.iter().skip(1).copied().collect(),
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let coef = DVector::from_column_slice(&self.coef);
        let mut out = x * coef;
        out.add_scalar_mut(self.intercept);
        out
    }

    /// Features with a nonzero coefficient.
    pub fn support(&self) -> FeatureSet {
        self.coef
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Sampling covariance of `(intercept, coefficients on cond_set ascending)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffCovariance {
    pub matrix: DMatrix<f64>,
    /// Residual degrees of freedom.
    pub df: usize,
    pub cond_set: FeatureSet,
}

impl CoeffCovariance {
    /// Standard errors in coordinate order.
    pub fn std_errors(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coeffs: EmbeddedCoeffs,
    pub covariance: CoeffCovariance,
    pub residuals: DVector<f64>,
}

fn column_name(j: usize) -> String {
    format!("x{}", j + 1)
}

/// Ordinary least squares with intercept of `target` on `cond_set`.
///
/// The design is column-normalized and decomposed by SVD; singular values
/// below [`RANK_TOLERANCE`] times the largest are reported as collinearity.
pub fn ols_fit(sample: &EnvSample, target: Target, cond_set: FeatureSet) -> Result<OlsFit> {
    let d = sample.d();
    target.check(d, cond_set)?;
    let n = sample.n();
    let p = cond_set.len() + 1;
    if n <= p {
        return Err(Error::InsufficientSamples { needed: p, got: n });
    }
    let y = sample.joint_column(target.joint_index(d)).into_owned();
    let cols: Vec<usize> = cond_set.to_vec();
    let mut design = DMatrix::<f64>::from_element(n, p, 1.0);
    for (c, &j) in cols.iter().enumerate() {
        design.set_column(c + 1, &sample.x.column(j));
    }

    let norms: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    if let Some(c) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::RankDeficient {
            columns: vec![if c == 0 { "intercept".into() } else { column_name(cols[c - 1]) }],
        });
    }
    let mut scaled = design.clone();
    for (c, &s) in norms.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let small: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] <= RANK_TOLERANCE * smax).collect();
    if !small.is_empty() {
        let mut involved = FeatureSet::empty();
        let mut intercept = false;
        for &i in &small {
            let row = v_t.row(i);
            let peak = row.amax();
            for c in 0..p {
                if row[c].abs() > 1e-3 * peak {
                    if c == 0 {
                        intercept = true;
                    } else {
                        involved.insert(cols[c - 1]);
                    }
                }
            }
        }
        let mut columns: Vec<String> = Vec::new();
        if intercept {
            columns.push("intercept".into());
        }
        columns.extend(involved.iter().map(column_name));
        return Err(Error::RankDeficient { columns });
    }

    // Scaled solution: b_s = V S^-1 U^T y, then unscale.
    let uty = u.transpose() * &y;
    let mut b = DVector::<f64>::zeros(p);
    let mut inv_gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..sv.len() {
        let vi = v_t.row(i).transpose();
        b += &vi * (uty[i] / sv[i]);
        inv_gram += &vi * vi.transpose() / (sv[i] * sv[i]);
    }
    for c in 0..p {
        b[c] /= norms[c];
    }
    for r in 0..p {
        for c in 0..p {
            inv_gram[(r, c)] /= norms[r] * norms[c];
        }
    }
    let residuals = &y - &design * &b;
    let df = n - p;
    let sigma2 = residuals.norm_squared() / df as f64;
    let coeffs = EmbeddedCoeffs::from_restricted(d, cond_set, b[0], &b.as_slice()[1..]);
    Ok(OlsFit {
        coeffs,
        covariance: CoeffCovariance {
            matrix: inv_gram * sigma2,
            df,
            cond_set,
        },
        residuals,
    })
}

/// Linear projection of one coordinate onto others, from a mean vector and a
/// second-moment matrix (covariance or scatter).
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub cond: FeatureSet,
    pub target: usize,
    pub slopes: DVector<f64>,
    pub intercept: f64,
    /// `second[t, t] - second[t, S] slopes`: residual variance or RSS.
    pub residual: f64,
    /// `second[S, S]^{-1}`.
    pub inv: DMatrix<f64>,
}

fn cholesky_checked(m: &DMatrix<f64>, cols: &[usize]) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > PIVOT_TOLERANCE) {
            let mut columns: Vec<String> = cols[..=j].iter().map(|&c| column_name(c)).collect();
            if j > 0 {
                columns.rotate_right(1);
            }
            return Err(Error::RankDeficient { columns });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Inverse of `scale * (L L^T) * scale` where `scale` is diagonal.
fn inverse_from_cholesky(l: &DMatrix<f64>, inv_scale: &[f64]) -> DMatrix<f64> {
    let p = l.nrows();
    let identity = DMatrix::<f64>::identity(p, p);
    let l_inv = l
        .solve_lower_triangular(&identity)
        .expect("cholesky factor has positive diagonal");
    let mut inv = l_inv.transpose() * l_inv;
    for r in 0..p {
        for c in 0..p {
            inv[(r, c)] *= inv_scale[r] * inv_scale[c];
        }
    }
    inv
}

pub(crate) fn project(
    mean: &DVector<f64>,
    second: &DMatrix<f64>,
    target: usize,
    cond: FeatureSet,
) -> Result<Projection> {
    let cols = cond.to_vec();
    let p = cols.len();
    if p == 0 {
        return Ok(Projection {
            cond,
            target,
            slopes: DVector::zeros(0),
            intercept: mean[target],
            residual: second[(target, target)],
            inv: DMatrix::zeros(0, 0),
        });
    }
    let mut scale = Vec::with_capacity(p);
    for &c in &cols {
        let v = second[(c, c)];
        if !(v > 0.0) {
            return Err(Error::RankDeficient {
                columns: vec![column_name(c)],
            });
        }
        scale.push(1.0 / v.sqrt());
    }
    let corr = DMatrix::from_fn(p, p, |r, c| second[(cols[r], cols[c])] * scale[r] * scale[c]);
    let l = cholesky_checked(&corr, &cols)?;
    let inv = inverse_from_cholesky(&l, &scale);
    let cross = DVector::from_fn(p, |r, _| second[(cols[r], target)]);
    let slopes = &inv * &cross;
    let intercept = mean[target] - cols.iter().zip(slopes.iter()).map(|(&c, b)| mean[c] * b).sum::<f64>();
    let residual = second[(target, target)] - cross.dot(&slopes);
    Ok(Projection {
        cond,
        target,
        slopes,
        intercept,
        residual,
        inv,
    })
}

impl Projection {
    pub fn embedded(&self, d: usize) -> EmbeddedCoeffs {
        EmbeddedCoeffs::from_restricted(d, self.cond, self.intercept, self.slopes.as_slice())
    }
}

/// Population LMMSE coefficients: `Sigma_SS^{-1} sigma_{S,t}` and the
/// matching intercept.
pub fn population_lmmse(
    pop: &PopulationModel,
    target: Target,
    cond_set: FeatureSet,
) -> Result<EmbeddedCoeffs> {
    let d = pop.d();
    target.check(d, cond_set)?;
    let proj = project(&pop.mean, &pop.cov, target.joint_index(d), cond_set).map_err(|e| match e {
        Error::RankDeficient { columns } => Error::NumericalFailure(format!(
            "singular covariance submatrix on {}",
            columns.join(", ")
        )),
        other => other,
    })?;
    Ok(proj.embedded(d))
}

/// Sample size, mean and centered scatter matrix of `(X, Y)`.
#[derive(Debug, Clone)]
pub struct EnvMoments {
    pub n: usize,
    pub mean: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

impl EnvMoments {
    pub fn from_sample(sample: &EnvSample) -> Self {
        let n = sample.n();
        let d = sample.d();
        let mut joint = DMatrix::<f64>::zeros(n, d + 1);
        joint.columns_mut(0, d).copy_from(&sample.x);
        joint.set_column(d, &sample.y);
        let mean = DVector::from_fn(d + 1, |c, _| joint.column(c).sum() / n as f64);
        for c in 0..=d {
            let m = mean[c];
            joint.column_mut(c).add_scalar_mut(-m);
        }
        let scatter = joint.tr_mul(&joint);
        EnvMoments { n, mean, scatter }
    }

    pub fn d(&self) -> usize {
        self.mean.len() - 1
    }

    /// Moments of the concatenation of several samples.
    pub fn pooled(parts: &[EnvMoments]) -> Self {
        let n: usize = parts.iter().map(|m| m.n).sum();
        let dim = parts[0].mean.len();
        let mut mean = DVector::<f64>::zeros(dim);
        for m in parts {
            mean += &m.mean * m.n as f64;
        }
        mean /= n as f64;
        let mut scatter = DMatrix::<f64>::zeros(dim, dim);
        for m in parts {
            let diff = &m.mean - &mean;
            scatter += &m.scatter + &diff * diff.transpose() * m.n as f64;
        }
        EnvMoments { n, mean, scatter }
    }
}

/// OLS fit computed from [`EnvMoments`].
#[derive(Debug, Clone)]
pub struct MomentFit {
    pub(crate) proj: Projection,
    pub n: usize,
}

impl MomentFit {
    pub fn new(moments: &EnvMoments, target: Target, cond_set: FeatureSet) -> Result<Self> {
        let d = moments.d();
        target.check(d, cond_set)?;
        let p = cond_set.len() + 1;
        if moments.n <= p {
            return Err(Error::InsufficientSamples { needed: p, got: moments.n });
        }
        let proj = project(&moments.mean, &moments.scatter, target.joint_index(d), cond_set)?;
        Ok(MomentFit { proj, n: moments.n })
    }

    pub fn cond_set(&self) -> FeatureSet {
        self.proj.cond
    }

    pub fn intercept(&self) -> f64 {
        self.proj.intercept
    }

    pub fn slopes(&self) -> &DVector<f64> {
        &self.proj.slopes
    }

    pub fn rss(&self) -> f64 {
        self.proj.residual.max(0.0)
    }

    pub fn df(&self) -> usize {
        self.n - self.proj.cond.len() - 1
    }

    pub fn embedded(&self, d: usize) -> EmbeddedCoeffs {
        self.proj.embedded(d)
    }

    /// Classical covariance `sigma^2 (X^T X)^{-1}` over `(intercept, cond)`.
    pub fn covariance(&self, moments: &EnvMoments) -> CoeffCovariance {
        let sigma2 = self.rss() / self.df() as f64;
        CoeffCovariance {
            matrix: unit_cross_covariance(moments, self, self) * sigma2,
            df: self.df(),
            cond_set: self.proj.cond,
        }
    }
}

/// Residual cross product `e_a^T e_b` of two fits on the same sample.
pub fn residual_cross_product(moments: &EnvMoments, a: &MomentFit, b: &MomentFit) -> f64 {
    let s = &moments.scatter;
    let (ta, tb) = (a.proj.target, b.proj.target);
    let ca = a.proj.cond.to_vec();
    let cb = b.proj.cond.to_vec();
    let ba = &a.proj.slopes;
    let bb = &b.proj.slopes;
    let mut v = s[(ta, tb)];
    for (i, &c) in ca.iter().enumerate() {
        v -= ba[i] * s[(c, tb)];
    }
    for (i, &c) in cb.iter().enumerate() {
        v -= bb[i] * s[(c, ta)];
    }
    for (i, &ci) in ca.iter().enumerate() {
        for (j, &cj) in cb.iter().enumerate() {
            v += ba[i] * bb[j] * s[(ci, cj)];
        }
    }
    v
}

/// `Cov(coef_a, coef_b) / sigma_ab` for two OLS fits on the same rows, over
/// coordinates `(intercept, cond_a)` x `(intercept, cond_b)`.
pub fn unit_cross_covariance(moments: &EnvMoments, a: &MomentFit, b: &MomentFit) -> DMatrix<f64> {
    let ca = a.proj.cond.to_vec();
    let cb = b.proj.cond.to_vec();
    let (pa, pb) = (ca.len(), cb.len());
    let n = moments.n as f64;
    // Cov(b_a, b_b) / sigma = S_aa^-1 S_ab S_bb^-1.
    let s_ab = DMatrix::from_fn(pa, pb, |r, c| moments.scatter[(ca[r], cb[c])]);
    let slope_block = &a.proj.inv * s_ab * &b.proj.inv;
    let mu_a = DVector::from_fn(pa, |r, _| moments.mean[ca[r]]);
    let mu_b = DVector::from_fn(pb, |r, _| moments.mean[cb[r]]);
    let mut out = DMatrix::<f64>::zeros(pa + 1, pb + 1);
    // intercept = mean_t - mu^T slopes, with mean_t uncorrelated with slopes.
    let sb_mu_b = &slope_block * &mu_b;
    let mu_a_sb = slope_block.tr_mul(&mu_a);
    out[(0, 0)] = 1.0 / n + mu_a.dot(&sb_mu_b);
    for c in 0..pb {
        out[(0, c + 1)] = -mu_a_sb[c];
    }
    for r in 0..pa {
        out[(r + 1, 0)] = -sb_mu_b[r];
    }
    out.view_mut((1, 1), (pa, pb)).copy_from(&slope_block);
    out
}
