//! Robust EM registration of the articulated surface to points and normals.
//!
//! Each datum is explained either by one of the `P` ellipsoids, through a
//! Gaussian centred on its correspondence `x_ip(Λ, n_i)` with a covariance
//! `Σ` shared by all ellipsoids, or by a uniform outlier class of density
//! `1/V`. One EM iteration is:
//!
//! 1. E step: posteriors `t_ip` of every class for every datum.
//! 2. M step over the pose: a few damped Gauss-Newton iterations on
//!    `½ Σ_i Σ_p t_ip (y_i - x_ip(Λ))ᵀ Σ⁻¹ (y_i - x_ip(Λ))`.
//! 3. M step over the mixture: closed-form `Σ` and priors `π`.
//! 4. Negative log-likelihood and convergence check.
//!
//! The pose step only has to decrease its objective (generalized EM), so the
//! negative log-likelihood is still non-increasing.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::covariance::Precision;
use crate::ellipsoid::{Attachment, Datum, PreparedEllipsoid};
use crate::error::{Error, Result};
use crate::kinematics::{BodyModel, PoseVector, PosedBody};
use crate::math::log_sum_exp;
use crate::surface::pairwise_sum;

/// Absolute lower bound on the covariance floor, in squared length units.
pub const SIGMA_ABSOLUTE_FLOOR: f64 = 1e-10;

/// How a datum is compared with an ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Point and normal: the Gaussian mean is the normal-aligned correspondence.
    #[default]
    Datum,
    /// Points only: the Gaussian mean is the radial projection of the point
    /// onto the ellipsoid, whose offset grows with the algebraic distance.
    Algebraic,
}

impl Metric {
    #[inline]
    fn model_point(self, e: &PreparedEllipsoid, d: &Datum) -> Vector3<f64> {
        match self {
            Metric::Datum => e.surface_point(&d.normal),
            Metric::Algebraic => e.radial_point(&d.point),
        }
    }

    #[inline]
    fn attachment(self, e: &PreparedEllipsoid, d: &Datum) -> Attachment {
        match self {
            Metric::Datum => e.datum_attachment(&d.normal),
            Metric::Algebraic => e.radial_attachment(&d.point),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "datum" => Ok(Metric::Datum),
            "algebraic" => Ok(Metric::Algebraic),
            other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Datum => "datum",
            Metric::Algebraic => "algebraic",
        })
    }
}

/// Priors over the `P` ellipsoids plus the outlier class, the shared
/// covariance and the working volume.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    /// Length `P + 1`; the last entry is the outlier class.
    pub priors: Vec<f64>,
    pub sigma: Matrix3<f64>,
    pub volume: f64,
}

impl MixtureParams {
    /// Equal priors, spherical covariance `scale² I`. Without an outlier class
    /// the last prior is pinned to zero.
    pub fn initial(ellipsoids: usize, scale: f64, volume: f64, outlier_class: bool) -> Self {
        let classes = if outlier_class {
            ellipsoids + 1
        } else {
            ellipsoids
        };
        let mut priors = vec![1.0 / classes as f64; ellipsoids + 1];
        if !outlier_class {
            priors[ellipsoids] = 0.0;
        }
        Self {
            priors,
            sigma: Matrix3::identity() * (scale * scale),
            volume,
        }
    }

    pub fn components(&self) -> usize {
        self.priors.len() - 1
    }

    pub fn outlier_prior(&self) -> f64 {
        self.priors[self.components()]
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.priors.iter().sum();
        if self.priors.len() < 2
            || self.priors.iter().any(|&p| !(p >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig("priors must be a distribution".into()));
        }
        if !(self.volume > 0.0 && self.volume.is_finite()) {
            return Err(Error::InvalidConfig("volume must be positive".into()));
        }
        Ok(())
    }
}

/// Posterior class probabilities, one row per datum, `P + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Responsibilities {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from explicit rows (each of length `P + 1`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: rows.iter().map(Vec::len).find(|&l| l != cols).unwrap_or(0),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, p: usize) -> f64 {
        self.data[i * self.cols + p]
    }

    pub fn outlier(&self, i: usize) -> f64 {
        self.get(i, self.cols - 1)
    }

    /// `T_p = Σ_i t_ip` for every class.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|p| pairwise_sum(&(0..self.rows).map(|i| self.get(i, p)).collect::<Vec<_>>()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MStepConfig {
    pub max_iterations: usize,
    pub damping_init: f64,
    pub gradient_tolerance: f64,
    /// Stop once an accepted step lowers the objective by less than this
    /// fraction.
    pub relative_tolerance: f64,
    /// Pairs with a smaller responsibility are left out of the normal
    /// equations. The objective used to accept steps is always exact.
    pub weight_floor: f64,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            damping_init: 1e-3,
            gradient_tolerance: 1e-8,
            relative_tolerance: 1e-6,
            weight_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub max_em_iterations: usize,
    /// Converged when `|ΔNLL| < em_tolerance * I`.
    pub em_tolerance: f64,
    pub m_step: MStepConfig,
    /// Blending bandwidth of the model surface. The EM likelihood does not use it.
    pub nu: f64,
    /// Working-space volume; `None` uses the inflated bounding box of the data.
    pub volume: Option<f64>,
    /// Scale applied to every bounding-box extent when `volume` is `None`.
    pub volume_inflation: f64,
    /// Initial covariance is `initial_sigma² I`.
    pub initial_sigma: f64,
    pub limit_penalty_weight: f64,
    pub metric: Metric,
    pub outlier_class: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_em_iterations: 50,
            em_tolerance: 1e-5,
            m_step: MStepConfig::default(),
            nu: 0.1,
            volume: None,
            volume_inflation: 1.2,
            initial_sigma: 0.05,
            limit_penalty_weight: 100.0,
            metric: Metric::Datum,
            outlier_class: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("em_tolerance", self.em_tolerance),
            ("nu", self.nu),
            ("volume_inflation", self.volume_inflation),
            ("initial_sigma", self.initial_sigma),
            ("m_step.damping_init", self.m_step.damping_init),
            ("m_step.gradient_tolerance", self.m_step.gradient_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.limit_penalty_weight < 0.0
            || self.m_step.weight_floor < 0.0
            || !(self.m_step.relative_tolerance >= 0.0)
        {
            return Err(Error::InvalidConfig("weights must be non-negative".into()));
        }
        if let Some(v) = self.volume {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig("volume must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Volume of the axis-aligned bounding box of the data points, every extent
/// scaled by `inflation` (and floored at 1 mm).
pub fn working_volume(data: &[Datum], inflation: f64) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for d in data {
        lo = lo.inf(&d.point);
        hi = hi.sup(&d.point);
    }
    (hi - lo)
        .iter()
        .map(|e| (e * inflation).max(1e-3))
        .product()
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub pose: PoseVector,
    pub mixture: MixtureParams,
    pub responsibilities: Responsibilities,
    /// Objective after initialization and after every EM iteration: the
    /// negative log-likelihood plus the joint-limit penalty (which is zero
    /// while every angle is inside its limits).
    pub nll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Serialized form of a [`FrameResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub pose: Vec<f64>,
    pub priors: Vec<f64>,
    /// Row-major.
    pub sigma: [f64; 9],
    pub volume: f64,
    pub nll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FrameResult {
    pub fn record(&self) -> FrameRecord {
        let s = &self.mixture.sigma;
        let mut sigma = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                sigma[3 * r + c] = s[(r, c)];
            }
        }
        FrameRecord {
            pose: self.pose.to_flat(),
            priors: self.mixture.priors.clone(),
            sigma,
            volume: self.mixture.volume,
            nll_trace: self.nll_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            error: self.error.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.record())?)
    }
}

/// `(y_i - x_ip)` for every datum and ellipsoid, row-major `I x P`.
fn residuals(body: &PosedBody<'_>, data: &[Datum], metric: Metric) -> Vec<Vector3<f64>> {
    let ellipsoids = body.prepared();
    let mut out = Vec::with_capacity(data.len() * ellipsoids.len());
    for d in data {
        for e in ellipsoids {
            out.push(d.point - metric.model_point(e, d));
        }
    }
    out
}

fn check_mixture(body: &PosedBody<'_>, mix: &MixtureParams) -> Result<Precision> {
    let p = body.prepared().len();
    if mix.priors.len() != p + 1 {
        return Err(Error::DimensionMismatch {
            expected: p + 1,
            got: mix.priors.len(),
        });
    }
    mix.validate()?;
    Precision::from_covariance(&mix.sigma)
}

/// Posteriors and the negative log-likelihood in one pass.
fn expectation(
    body: &PosedBody<'_>,
    data: &[Datum],
    mix: &MixtureParams,
    metric: Metric,
) -> Result<(Responsibilities, f64)> {
    let precision = check_mixture(body, mix)?;
    let p = body.prepared().len();
    let log_priors: Vec<f64> = mix.priors.iter().map(|v| v.ln()).collect();
    let log_outlier = log_priors[p] - mix.volume.ln();
    let res = residuals(body, data, metric);

    let mut t = Responsibilities::new(data.len(), p + 1);
    let mut log_terms = vec![0.0; p + 1];
    let mut per_datum = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        for k in 0..p {
            log_terms[k] = log_priors[k] + precision.log_gaussian(&res[i * p + k]);
        }
        log_terms[p] = log_outlier;
        let lse = log_sum_exp(&log_terms);
        if !lse.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        let row = &mut t.data[i * (p + 1)..(i + 1) * (p + 1)];
        for (dst, &v) in row.iter_mut().zip(&log_terms) {
            *dst = (v - lse).exp();
        }
        per_datum.push(lse);
    }
    Ok((t, -pairwise_sum(&per_datum)))
}

/// `-ln P_Λ(𝒴_1..𝒴_I)` under the Gaussian-plus-uniform mixture.
pub fn neg_log_likelihood(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    mix: &MixtureParams,
    metric: Metric,
) -> Result<f64> {
    let body = model.pose(pose)?;
    Ok(expectation(&body, data, mix, metric)?.1)
}

pub fn e_step(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    mix: &MixtureParams,
    metric: Metric,
) -> Result<Responsibilities> {
    let body = model.pose(pose)?;
    Ok(expectation(&body, data, mix, metric)?.0)
}

/// Closed-form covariance and prior updates at the new pose.
pub fn m_step_mixture(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    t: &Responsibilities,
    previous: &MixtureParams,
    metric: Metric,
) -> Result<MixtureParams> {
    let body = model.pose(pose)?;
    mixture_update(&body, data, t, previous, metric)
}

fn mixture_update(
    body: &PosedBody<'_>,
    data: &[Datum],
    t: &Responsibilities,
    previous: &MixtureParams,
    metric: Metric,
) -> Result<MixtureParams> {
    let p = body.prepared().len();
    check_responsibilities(t, data.len(), p)?;
    let res = residuals(body, data, metric);

    let sums = t.column_sums();
    let n = data.len() as f64;
    let mut priors: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let total: f64 = priors.iter().sum();
    priors.iter_mut().for_each(|v| *v /= total);

    let inlier_weight: f64 = sums[..p].iter().sum();
    let sigma = if inlier_weight > 0.0 {
        let mut rows = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let mut acc = Matrix3::zeros();
            for k in 0..p {
                let w = t.get(i, k);
                if w > 0.0 {
                    let r = &res[i * p + k];
                    acc += r * r.transpose() * w;
                }
            }
            rows.push(acc);
        }
        regularize(&(sum_matrices(&rows) / inlier_weight))
    } else {
        previous.sigma
    };
    Ok(MixtureParams {
        priors,
        sigma,
        volume: previous.volume,
    })
}

fn sum_matrices(v: &[Matrix3<f64>]) -> Matrix3<f64> {
    if v.len() <= 8 {
        return v.iter().fold(Matrix3::zeros(), |a, b| a + b);
    }
    let mid = v.len() / 2;
    sum_matrices(&v[..mid]) + sum_matrices(&v[mid..])
}

/// Symmetrize and add `εI` when the smallest eigenvalue is below
/// `ε = max(1e-8 tr(Σ)/3, SIGMA_ABSOLUTE_FLOOR)`.
pub fn regularize(sigma: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eps = (1e-8 * sym.trace() / 3.0).max(SIGMA_ABSOLUTE_FLOOR);
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    if min < eps {
        sym + Matrix3::identity() * eps
    } else {
        sym
    }
}

fn check_responsibilities(t: &Responsibilities, rows: usize, p: usize) -> Result<()> {
    if t.rows() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: t.rows(),
        });
    }
    if t.cols() != p + 1 {
        return Err(Error::DimensionMismatch {
            expected: p + 1,
            got: t.cols(),
        });
    }
    Ok(())
}

/// The responsibility-weighted pose objective of the M step.
struct PoseObjective<'a> {
    model: &'a BodyModel,
    data: &'a [Datum],
    t: &'a Responsibilities,
    precision: Precision,
    metric: Metric,
    penalty_weight: f64,
}

impl<'a> PoseObjective<'a> {
    fn value(&self, pose: &PoseVector) -> Result<f64> {
        let body = self.model.pose(pose)?;
        let p = body.prepared().len();
        let res = residuals(&body, self.data, self.metric);
        let rows: Vec<f64> = (0..self.data.len())
            .map(|i| {
                (0..p)
                    .map(|k| {
                        let w = self.t.get(i, k);
                        if w > 0.0 {
                            w * self.precision.mahalanobis_sq(&res[i * p + k])
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let penalty = self.model.limit_penalty(pose).0;
        let v = 0.5 * pairwise_sum(&rows) + self.penalty_weight * penalty;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective)
        }
    }

    /// Gauss-Newton normal equations `(JᵀWJ, gradient)`, leaving out pairs
    /// with responsibility below `floor`.
    fn normal_equations(
        &self,
        pose: &PoseVector,
        floor: f64,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let body = self.model.pose(pose)?;
        let dof = self.model.dof();
        let p = body.prepared().len();
        let w_mat = self.precision.inverse();
        let mut h = DMatrix::zeros(dof, dof);
        let mut g = DVector::zeros(dof);
        let mut cols: Vec<(usize, Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(dof);
        for (i, d) in self.data.iter().enumerate() {
            for k in 0..p {
                let w = self.t.get(i, k);
                if w <= floor || w == 0.0 {
                    continue;
                }
                let att = self.metric.attachment(&body.prepared()[k], d);
                let r = d.point - att.point;
                cols.clear();
                body.for_each_column(k, &att, |idx, c| cols.push((idx, c, w_mat * c)));
                for (a, (ia, _, wca)) in cols.iter().enumerate() {
                    g[*ia] -= w * wca.dot(&r);
                    for (ib, cb, _) in &cols[..=a] {
                        h[(*ia, *ib)] += w * wca.dot(cb);
                    }
                }
            }
        }
        for a in 0..dof {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let (_, pen_grad) = self.model.limit_penalty(pose);
        for (k, gk) in pen_grad.iter().enumerate() {
            if *gk != 0.0 {
                g[k] += self.penalty_weight * gk;
                h[(k, k)] += 2.0 * self.penalty_weight;
            }
        }
        Ok((h, g))
    }
}

/// Outcome of the pose M step.
#[derive(Debug, Clone)]
pub struct PoseStep {
    pub pose: PoseVector,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Max-norm of the (pruned) gradient at the returned pose.
    pub gradient_norm: f64,
}

/// Minimizes the weighted pose objective by Levenberg-Marquardt, starting at
/// `init`. The returned objective never exceeds the starting one.
pub fn m_step_pose(
    model: &BodyModel,
    init: &PoseVector,
    data: &[Datum],
    t: &Responsibilities,
    sigma: &Matrix3<f64>,
    config: &TrackerConfig,
) -> Result<PoseVector> {
    Ok(m_step_pose_detailed(model, init, data, t, sigma, config)?.pose)
}

pub fn m_step_pose_detailed(
    model: &BodyModel,
    init: &PoseVector,
    data: &[Datum],
    t: &Responsibilities,
    sigma: &Matrix3<f64>,
    config: &TrackerConfig,
) -> Result<PoseStep> {
    check_responsibilities(t, data.len(), model.ellipsoid_count())?;
    let objective = PoseObjective {
        model,
        data,
        t,
        precision: Precision::from_covariance(sigma)?,
        metric: config.metric,
        penalty_weight: config.limit_penalty_weight,
    };
    let settings = &config.m_step;
    let mut pose = init.clone();
    let initial = objective.value(&pose)?;
    let mut cost = initial;
    let mut mu = settings.damping_init;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut flat = pose.to_flat();

    'outer: while iterations < settings.max_iterations {
        let (h, g) = objective.normal_equations(&pose, settings.weight_floor)?;
        grad_norm = g.amax();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        if grad_norm < settings.gradient_tolerance {
            break;
        }
        iterations += 1;
        let diag_floor = 1e-9 * h.diagonal().amax().max(1e-12);
        loop {
            let mut a = h.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu * (h[(k, k)] + diag_floor);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 4.0;
                if mu > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let step = chol.solve(&(-&g));
            let cand_flat: Vec<f64> = flat.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            let cand = PoseVector::from_flat(&cand_flat)?;
            match objective.value(&cand) {
                Ok(c) if c < cost => {
                    let relative = (cost - c) / cost.abs().max(1e-300);
                    pose = cand;
                    flat = cand_flat;
                    cost = c;
                    mu = (mu / 3.0).max(1e-12);
                    if relative < settings.relative_tolerance {
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    mu *= 4.0;
                    if mu > 1e16 {
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(PoseStep {
        pose,
        initial_objective: initial,
        objective: cost,
        iterations,
        gradient_norm: grad_norm,
    })
}

/// Weighted M-step objective at `pose` (exact, all pairs).
pub fn pose_objective(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    t: &Responsibilities,
    sigma: &Matrix3<f64>,
    config: &TrackerConfig,
) -> Result<f64> {
    check_responsibilities(t, data.len(), model.ellipsoid_count())?;
    PoseObjective {
        model,
        data,
        t,
        precision: Precision::from_covariance(sigma)?,
        metric: config.metric,
        penalty_weight: config.limit_penalty_weight,
    }
    .value(pose)
}

/// Analytic gradient of [`pose_objective`] (exact, all pairs).
pub fn pose_objective_gradient(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    t: &Responsibilities,
    sigma: &Matrix3<f64>,
    config: &TrackerConfig,
) -> Result<Vec<f64>> {
    check_responsibilities(t, data.len(), model.ellipsoid_count())?;
    let objective = PoseObjective {
        model,
        data,
        t,
        precision: Precision::from_covariance(sigma)?,
        metric: config.metric,
        penalty_weight: config.limit_penalty_weight,
    };
    Ok(objective
        .normal_equations(pose, 0.0)?
        .1
        .iter()
        .copied()
        .collect())
}

/// EM registration of one frame starting from `init`.
pub fn fit_frame(
    model: &BodyModel,
    init: &PoseVector,
    data: &[Datum],
    config: &TrackerConfig,
) -> Result<FrameResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("data"));
    }
    let volume = config
        .volume
        .unwrap_or_else(|| working_volume(data, config.volume_inflation));
    let mix = MixtureParams::initial(
        model.ellipsoid_count(),
        config.initial_sigma,
        volume,
        config.outlier_class,
    );
    fit_frame_from(model, init, data, mix, config)
}

/// EM registration with an explicit initial mixture.
pub fn fit_frame_from(
    model: &BodyModel,
    init: &PoseVector,
    data: &[Datum],
    mut mix: MixtureParams,
    config: &TrackerConfig,
) -> Result<FrameResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("data"));
    }
    let penalty = |pose: &PoseVector| config.limit_penalty_weight * model.limit_penalty(pose).0;
    let mut pose = init.clone();
    let body = model.pose(&pose)?;
    let (mut t, nll) = expectation(&body, data, &mix, config.metric)?;
    let mut trace = vec![nll + penalty(&pose)];
    let tolerance = config.em_tolerance * data.len() as f64;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_em_iterations {
        iterations += 1;
        let step = m_step_pose_detailed(model, &pose, data, &t, &mix.sigma, config)?;
        let body = model.pose(&step.pose)?;
        let next_mix = mixture_update(&body, data, &t, &mix, config.metric)?;
        let (next_t, nll) = expectation(&body, data, &next_mix, config.metric)?;
        let value = nll + penalty(&step.pose);
        let change = value - trace[trace.len() - 1];
        pose = step.pose;
        mix = next_mix;
        t = next_t;
        trace.push(value);
        if change.abs() < tolerance {
            converged = true;
            break;
        }
    }
    Ok(FrameResult {
        pose,
        mixture: mix,
        responsibilities: t,
        nll_trace: trace,
        iterations,
        converged,
        error: None,
    })
}

/// Frame-to-frame tracking: frame `k` starts from frame `k - 1`'s pose.
///
/// A frame that fails records `converged = false` with its error message and
/// hands its starting pose on to the next frame.
pub fn track_sequence(
    model: &BodyModel,
    init: &PoseVector,
    frames: &[Vec<Datum>],
    config: &TrackerConfig,
) -> Result<Vec<FrameResult>> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    if init.dim() != model.dof() {
        return Err(Error::DimensionMismatch {
            expected: model.dof(),
            got: init.dim(),
        });
    }
    let mut seed = init.clone();
    let mut out = Vec::with_capacity(frames.len());
    for data in frames {
        let result = match fit_frame(model, &seed, data, config) {
            Ok(r) if r.pose.is_finite() => r,
            Ok(r) => failed_frame(
                model,
                &seed,
                config,
                "non-finite pose".into(),
                r.mixture.volume,
            ),
            Err(e) => failed_frame(model, &seed, config, e.to_string(), 1.0),
        };
        seed = result.pose.clone();
        out.push(result);
    }
    Ok(out)
}

fn failed_frame(
    model: &BodyModel,
    seed: &PoseVector,
    config: &TrackerConfig,
    message: String,
    volume: f64,
) -> FrameResult {
    let p = model.ellipsoid_count();
    FrameResult {
        pose: seed.clone(),
        mixture: MixtureParams::initial(p, config.initial_sigma, volume, config.outlier_class),
        responsibilities: Responsibilities::new(0, p + 1),
        nll_trace: Vec::new(),
        iterations: 0,
        converged: false,
        error: Some(message),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::LOG_NORMALIZER_3D;
    use crate::ellipsoid::Ellipsoid;
    use crate::kinematics::{default_body_model, Joint, LoadOptions, Part};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_model(centers: &[f64]) -> BodyModel {
        BodyModel::new(
            vec![Part {
                name: "spheres".into(),
                ellipsoids: centers
                    .iter()
                    .map(|&x| Ellipsoid::sphere(1.0, Vector3::new(x, 0.0, 0.0)).unwrap())
                    .collect(),
            }],
            Vec::<Joint>::new(),
            vec![],
            0,
            LoadOptions::default(),
        )
        .unwrap()
    }

    fn unit_normal(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    /// Data exactly on the correspondences of randomly chosen ellipsoids.
    fn exact_data(
        model: &BodyModel,
        pose: &PoseVector,
        n: usize,
        seed: u64,
    ) -> (Vec<Datum>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = model.pose(pose).unwrap();
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..model.ellipsoid_count());
                let normal = unit_normal(&mut rng);
                let x = body.prepared()[k].surface_point(&normal);
                (Datum::new(x, normal).unwrap(), k)
            })
            .unzip()
    }

    fn hard(labels: &[usize], p: usize) -> Responsibilities {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&k| (0..=p).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        Responsibilities::from_rows(&rows).unwrap()
    }

    #[test]
    fn nll_at_zero_residual_is_gaussian_normalizer() {
        let m = sphere_model(&[0.0]);
        let d = Datum::new(Vector3::z(), Vector3::z()).unwrap();
        let mix = MixtureParams {
            priors: vec![1.0, 0.0],
            sigma: Matrix3::identity(),
            volume: 10.0,
        };
        let nll = neg_log_likelihood(&m, &m.zero_pose(), &[d], &mix, Metric::Datum).unwrap();
        assert_relative_eq!(nll, LOG_NORMALIZER_3D, epsilon = 1e-14);
    }

    #[test]
    fn all_outlier_nll_is_log_volume() {
        let m = sphere_model(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Datum> = (0..7)
            .map(|_| Datum::new(unit_normal(&mut rng) * 3.0, unit_normal(&mut rng)).unwrap())
            .collect();
        let mix = MixtureParams {
            priors: vec![0.0, 1.0],
            sigma: Matrix3::identity(),
            volume: 12.5,
        };
        let nll = neg_log_likelihood(&m, &m.zero_pose(), &data, &mix, Metric::Datum).unwrap();
        assert_relative_eq!(nll, 7.0 * 12.5f64.ln(), epsilon = 1e-12);
    }

    /// Hand evaluation: one sphere, datum one unit out along its normal.
    #[test]
    fn mixed_nll_matches_scalar_evaluation() {
        let m = sphere_model(&[0.0]);
        let d = Datum::new(Vector3::new(0.0, 0.0, 2.0), Vector3::z()).unwrap();
        let sigma = Matrix3::from_diagonal(&Vector3::new(0.5, 0.5, 2.0));
        let mix = MixtureParams {
            priors: vec![0.7, 0.3],
            sigma,
            volume: 8.0,
        };
        // N = exp(-0.5 * 1/2) / ((2π)^1.5 * sqrt(0.5*0.5*2))
        let gauss = (-0.25f64).exp() / ((2.0 * std::f64::consts::PI).powf(1.5) * (0.5f64).sqrt());
        let expected = -(0.7 * gauss + 0.3 / 8.0).ln();
        let nll = neg_log_likelihood(&m, &m.zero_pose(), &[d], &mix, Metric::Datum).unwrap();
        assert_relative_eq!(nll, expected, epsilon = 1e-14);
    }

    #[test]
    fn single_component_takes_everything() {
        let m = sphere_model(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Datum> = (0..5)
            .map(|_| Datum::new(unit_normal(&mut rng) * 1.3, unit_normal(&mut rng)).unwrap())
            .collect();
        let mix = MixtureParams {
            priors: vec![1.0, 0.0],
            sigma: Matrix3::identity() * 0.1,
            volume: 5.0,
        };
        let t = e_step(&m, &m.zero_pose(), &data, &mix, Metric::Datum).unwrap();
        for i in 0..5 {
            assert_eq!(t.get(i, 0), 1.0);
            assert_eq!(t.outlier(i), 0.0);
        }
    }

    #[test]
    fn symmetric_datum_splits_evenly() {
        let m = sphere_model(&[-2.0, 2.0]);
        let d = Datum::new(Vector3::new(0.0, 0.0, 1.0), Vector3::z()).unwrap();
        let mix = MixtureParams {
            priors: vec![0.4, 0.4, 0.2],
            sigma: Matrix3::identity(),
            volume: 30.0,
        };
        let t = e_step(&m, &m.zero_pose(), &[d], &mix, Metric::Datum).unwrap();
        assert_eq!(t.get(0, 0), t.get(0, 1));
    }

    #[test]
    fn distant_datum_is_an_outlier() {
        let m = sphere_model(&[0.0, 3.0]);
        let sigma_std: f64 = 0.05;
        let d = Datum::new(Vector3::new(0.0, 0.0, 1.0 + 10.0 * sigma_std), Vector3::z()).unwrap();
        let mix = MixtureParams {
            priors: vec![1.0 / 3.0; 3],
            sigma: Matrix3::identity() * sigma_std * sigma_std,
            volume: 100.0,
        };
        // Gaussian density at 10σ: exp(-50) / ((2π)^1.5 σ³) ≈ 1.0e-17 ≪ 1/V = 0.01.
        let t = e_step(&m, &m.zero_pose(), &[d], &mix, Metric::Datum).unwrap();
        assert!(t.outlier(0) > 0.99);
    }

    #[test]
    fn mixture_update_examples() {
        let m = sphere_model(&[0.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Datum> = (0..6)
            .map(|_| Datum::new(unit_normal(&mut rng), unit_normal(&mut rng)).unwrap())
            .collect();
        let prev = MixtureParams::initial(2, 0.1, 50.0, true);
        let uniform = Responsibilities::from_rows(&vec![vec![1.0 / 3.0; 3]; 6]).unwrap();
        let mix =
            m_step_mixture(&m, &m.zero_pose(), &data, &uniform, &prev, Metric::Datum).unwrap();
        for p in &mix.priors {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }

        // Zero residuals under hard assignment: covariance collapses to the floor.
        let (data, labels) = exact_data(&m, &m.zero_pose(), 10, 5);
        let mix = m_step_mixture(
            &m,
            &m.zero_pose(),
            &data,
            &hard(&labels, 2),
            &prev,
            Metric::Datum,
        )
        .unwrap();
        assert_relative_eq!(
            mix.sigma,
            Matrix3::identity() * SIGMA_ABSOLUTE_FLOOR,
            epsilon = 1e-25
        );

        // Residuals ±x on one ellipsoid: Σ = diag(1, 0, 0) plus the floor.
        let one = sphere_model(&[0.0]);
        let data = [
            Datum::new(Vector3::new(1.0, 0.0, 1.0), Vector3::z()).unwrap(),
            Datum::new(Vector3::new(-1.0, 0.0, 1.0), Vector3::z()).unwrap(),
        ];
        let t = Responsibilities::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let mix = m_step_mixture(
            &one,
            &one.zero_pose(),
            &data,
            &t,
            &MixtureParams::initial(1, 0.1, 1.0, true),
            Metric::Datum,
        )
        .unwrap();
        let eps = (1e-8f64 / 3.0).max(SIGMA_ABSOLUTE_FLOOR);
        assert_relative_eq!(
            mix.sigma,
            Matrix3::from_diagonal(&Vector3::new(1.0 + eps, eps, eps)),
            epsilon = 1e-18
        );
        assert_eq!(mix.priors, vec![1.0, 0.0]);
    }

    #[test]
    fn pose_step_fixed_point() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pose = m.zero_pose();
        for k in 0..m.dof() {
            pose.set(k, rng.random_range(-0.3..0.3));
        }
        let (data, labels) = exact_data(&m, &pose, 300, 8);
        let t = hard(&labels, m.ellipsoid_count());
        let config = TrackerConfig::default();
        let sigma = Matrix3::identity() * 1e-4;
        let step = m_step_pose_detailed(&m, &pose, &data, &t, &sigma, &config).unwrap();
        assert_eq!(step.pose, pose);
        assert!(step.objective <= step.initial_objective);
    }

    #[test]
    fn root_translation_recovered() {
        let m = default_body_model();
        let truth = m.zero_pose();
        let (data, labels) = exact_data(&m, &truth, 400, 11);
        let t = hard(&labels, m.ellipsoid_count());
        let mut init = truth.clone();
        let shift = Vector3::new(0.03, -0.02, 0.015);
        init.free_translation += shift;
        let sigma = Matrix3::identity() * 1e-4;
        let pose = m_step_pose(&m, &init, &data, &t, &sigma, &TrackerConfig::default()).unwrap();
        // Datum correspondences are affine in the root translation, so the
        // optimum is the weighted centroid shift: zero here.
        assert!((pose.free_translation - truth.free_translation).norm() < 1e-6);
        assert!(pose.joint_angles.iter().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn objective_never_increases() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut truth = m.zero_pose();
        for k in 6..m.dof() {
            truth.set(k, rng.random_range(-0.4..0.4));
        }
        let (data, _) = exact_data(&m, &truth, 200, 13);
        let mix = MixtureParams::initial(m.ellipsoid_count(), 0.05, 8.0, true);
        let t = e_step(&m, &m.zero_pose(), &data, &mix, Metric::Datum).unwrap();
        let config = TrackerConfig::default();
        let step =
            m_step_pose_detailed(&m, &m.zero_pose(), &data, &t, &mix.sigma, &config).unwrap();
        assert!(step.objective < step.initial_objective);
    }

    #[test]
    fn fit_frame_fixed_point_on_separated_spheres() {
        let m = sphere_model(&[0.0, 4.0, 8.0]);
        let (data, _) = exact_data(&m, &m.zero_pose(), 90, 14);
        let config = TrackerConfig {
            outlier_class: false,
            ..TrackerConfig::default()
        };
        let result = fit_frame(&m, &m.zero_pose(), &data, &config).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 2, "took {}", result.iterations);
        assert!(result.pose.to_flat().iter().all(|v| v.abs() < 1e-9));

        // The outlier prior needs one more iteration to drain.
        let result = fit_frame(&m, &m.zero_pose(), &data, &TrackerConfig::default()).unwrap();
        assert!(result.converged && result.iterations <= 3);
        assert!(result.pose.to_flat().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn track_sequence_records_failures() {
        let m = sphere_model(&[0.0]);
        let good = exact_data(&m, &m.zero_pose(), 20, 1).0;
        let frames = vec![good.clone(), Vec::new(), good];
        let results =
            track_sequence(&m, &m.zero_pose(), &frames, &TrackerConfig::default()).unwrap();
        assert_eq!(results.len(), 3);
        assert!(results[1].error.is_some());
        assert!(!results[1].converged);
        assert!(results[2].error.is_none());
    }

    #[test]
    fn record_round_trips() {
        let m = sphere_model(&[0.0]);
        let data = exact_data(&m, &m.zero_pose(), 20, 2).0;
        let r = fit_frame(&m, &m.zero_pose(), &data, &TrackerConfig::default()).unwrap();
        let json = r.to_json().unwrap();
        let back: FrameRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r.record());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("datum".parse::<Metric>().unwrap(), Metric::Datum);
        assert_eq!("algebraic".parse::<Metric>().unwrap(), Metric::Algebraic);
        assert!("euclid".parse::<Metric>().is_err());
    }
}
