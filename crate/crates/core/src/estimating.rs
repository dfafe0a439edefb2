//! Estimating functions `q_n(β) = Σ C_i(β)(y_i - μ_i(β))`, their Jacobians,
//! conditional variances and the information matrices used to compare them.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::correlation::{fd_step, TruthTemplate, WorkingCorrelationSpec, WorkingPath};
use crate::linalg::{spectral_norm, Cholesky, LinalgError, Lu, Matrix};
use crate::model::{conditional_moments, Cluster, ConditionalMoments, Link};
use crate::{Error, Result};

/// Determinants at or below this magnitude are treated as zero.
pub const DET_SINGULAR: f64 = 1e-300;

/// Callback producing `C_i(β)` (`p × m_i`) from the history `clusters[..i-1]`
/// and the current regressors `X_i` only.
pub type CoefficientFn = dyn Fn(&[Cluster], &Matrix, &[f64], Link) -> Matrix + Send + Sync;

#[derive(Clone)]
pub struct GeneralCoefficients(pub Arc<CoefficientFn>);

impl fmt::Debug for GeneralCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GeneralCoefficients(..)")
    }
}

#[derive(Debug, Clone)]
pub enum EstimatingKind {
    /// `Σ X_iᵀ A_i^{1/2} R*_{i-1}⁻¹ A_i^{-1/2} (y_i - μ_i)`.
    GeeStar(WorkingCorrelationSpec),
    /// Same form with the true correlation in place of `R*`.
    QuasiScore(TruthTemplate),
    /// `Σ X_iᵀ (y_i - μ_i)`.
    Independence,
    /// `g*` with a precomputed, β-independent sequence of correlations,
    /// one per cluster.
    FrozenSequence(Vec<Matrix>),
    General(GeneralCoefficients),
}

impl EstimatingKind {
    /// True when the weighting does not move with `β`.
    pub fn beta_independent_weights(&self) -> bool {
        match self {
            EstimatingKind::GeeStar(spec) => !spec.depends_on_beta(),
            EstimatingKind::QuasiScore(_)
            | EstimatingKind::Independence
            | EstimatingKind::FrozenSequence(_) => true,
            EstimatingKind::General(_) => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatingKind::GeeStar(_) => "gee_star",
            EstimatingKind::QuasiScore(_) => "quasi_score",
            EstimatingKind::Independence => "independence",
            EstimatingKind::FrozenSequence(_) => "frozen",
            EstimatingKind::General(_) => "general",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    Analytic,
    FiniteDifference,
}

/// Hands out the correlation used for each cluster in filtration order.
enum Weights<'a> {
    Identity,
    Working(WorkingPath<'a>),
    Truth(&'a TruthTemplate),
    Frozen(&'a [Matrix]),
    General(&'a GeneralCoefficients),
}

impl<'a> Weights<'a> {
    fn new(kind: &'a EstimatingKind, link: Link, n: usize) -> Result<Self> {
        Ok(match kind {
            EstimatingKind::Independence => Weights::Identity,
            EstimatingKind::GeeStar(spec) => Weights::Working(WorkingPath::new(spec, link)),
            EstimatingKind::QuasiScore(t) => Weights::Truth(t),
            EstimatingKind::FrozenSequence(seq) => {
                if seq.len() < n {
                    return Err(Error::invalid_argument(format!(
                        "frozen correlation sequence has {} entries for {n} clusters",
                        seq.len()
                    )));
                }
                Weights::Frozen(seq)
            }
            EstimatingKind::General(g) => Weights::General(g),
        })
    }

    /// Correlation for cluster at position `pos`; `None` means identity.
    fn correlation(&mut self, pos: usize, cluster: &Cluster) -> Result<Option<Matrix>> {
        let m = cluster.size();
        match self {
            Weights::Identity | Weights::General(_) => Ok(None),
            Weights::Working(path) => path.current(m).map(Some),
            Weights::Truth(t) => {
                if m > t.dim() {
                    return Err(Error::invalid_argument(format!(
                        "cluster {} larger than the true-correlation template",
                        cluster.index
                    )));
                }
                Ok(Some(t.for_size(m)))
            }
            Weights::Frozen(seq) => {
                let r = &seq[pos];
                if r.shape() != (m, m) {
                    return Err(Error::invalid_argument(format!(
                        "frozen correlation for cluster {} has shape {:?}",
                        cluster.index,
                        r.shape()
                    )));
                }
                Ok(Some(r.clone()))
            }
        }
    }

    fn advance(&mut self, cluster: &Cluster, beta: &[f64]) -> Result<()> {
        if let Weights::Working(path) = self {
            path.advance(cluster, beta)?;
        }
        Ok(())
    }
}

fn factor_correlation(r: &Matrix, cluster: usize) -> Result<Cholesky> {
    Cholesky::new(r).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { lambda_min } => Error::WorkingCorrelationNotPd {
            cluster,
            lambda_min,
        },
        other => Error::Linalg(other),
    })
}

fn check_beta(clusters: &[Cluster], beta: &[f64]) -> Result<()> {
    if let Some(c) = clusters.first() {
        if c.p() != beta.len() {
            return Err(Error::invalid_argument(format!(
                "beta has length {}, data has {} regressors",
                beta.len(),
                c.p()
            )));
        }
    }
    Ok(())
}

/// `X_iᵀ A^{1/2} R⁻¹ A^{-1/2} r` for a single cluster, where `x` and
/// `sqrt_var` may be perturbed while `resid` is not.
fn weighted_term(x: &Matrix, sqrt_var: &[f64], chol: Option<&Cholesky>, resid: &[f64]) -> Vec<f64> {
    match chol {
        None => x.tr_mul_vec(resid),
        Some(ch) => {
            let mut t: Vec<f64> = resid.iter().zip(sqrt_var).map(|(r, s)| r / s).collect();
            ch.solve_in_place(&mut t);
            for (u, s) in t.iter_mut().zip(sqrt_var) {
                *u *= s;
            }
            x.tr_mul_vec(&t)
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Per-cluster contributions `C_i(β)(y_i - μ_i(β))`.
pub fn score_increments(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Vec<Vec<f64>>> {
    check_beta(clusters, beta)?;
    let mut weights = Weights::new(kind, link, clusters.len())?;
    let mut out = Vec::with_capacity(clusters.len());
    for (pos, c) in clusters.iter().enumerate() {
        let mom = conditional_moments(c, beta, link)?;
        let resid = mom.residual(&c.response);
        let term = if let Weights::General(g) = &weights {
            (g.0)(&clusters[..pos], &c.regressors, beta, link).mul_vec(&resid)
        } else {
            let r = weights.correlation(pos, c)?;
            let chol = r
                .as_ref()
                .map(|r| factor_correlation(r, c.index))
                .transpose()?;
            weighted_term(&c.regressors, &mom.sqrt_variance(), chol.as_ref(), &resid)
        };
        out.push(term);
        weights.advance(c, beta)?;
    }
    Ok(out)
}

/// `q_n(β)` summed over `clusters`.
pub fn eval_g(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; beta.len()];
    for term in score_increments(kind, clusters, beta, link)? {
        add_into(&mut g, &term);
    }
    Ok(g)
}

/// `p × m_i` perturbations `δ_i`, one per cluster, with `‖δ_i‖ ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    deltas: Vec<Matrix>,
    bound: f64,
}

impl Perturbation {
    pub fn new(deltas: Vec<Matrix>, bound: f64) -> Result<Self> {
        for (i, d) in deltas.iter().enumerate() {
            let norm = spectral_norm(d)?;
            if norm > bound * (1.0 + 1e-12) {
                return Err(Error::invalid_argument(format!(
                    "perturbation {} has norm {norm} above bound {bound}",
                    i + 1
                )));
            }
        }
        Ok(Self { deltas, bound })
    }

    /// `δ_i = 0` for every cluster.
    pub fn zero(clusters: &[Cluster]) -> Self {
        Self {
            deltas: clusters
                .iter()
                .map(|c| Matrix::zeros(c.p(), c.size()))
                .collect(),
            bound: 0.0,
        }
    }

    pub fn deltas(&self) -> &[Matrix] {
        &self.deltas
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Clusters with regressors `X_i + δ_iᵀ`.
    pub fn apply(&self, clusters: &[Cluster]) -> Result<Vec<Cluster>> {
        if self.deltas.len() < clusters.len() {
            return Err(Error::invalid_argument("fewer perturbations than clusters"));
        }
        clusters
            .iter()
            .zip(&self.deltas)
            .map(|(c, d)| {
                if d.shape() != (c.p(), c.size()) {
                    return Err(Error::invalid_argument(format!(
                        "perturbation for cluster {} must be {}x{}",
                        c.index,
                        c.p(),
                        c.size()
                    )));
                }
                Cluster::new(
                    c.index,
                    c.response.clone(),
                    c.regressors.add(&d.transpose()),
                )
            })
            .collect()
    }
}

/// `g*_n(β, δ)`: regressors, variances and `R*` come from the perturbed
/// data, residuals from the unperturbed means.
pub fn eval_g_perturbed(
    clusters: &[Cluster],
    beta: &[f64],
    perturbation: &Perturbation,
    link: Link,
    spec: &WorkingCorrelationSpec,
) -> Result<Vec<f64>> {
    check_beta(clusters, beta)?;
    let perturbed = perturbation.apply(clusters)?;
    let mut path = WorkingPath::new(spec, link);
    let mut g = vec![0.0; beta.len()];
    for (c, pc) in clusters.iter().zip(&perturbed) {
        let resid = conditional_moments(c, beta, link)?.residual(&c.response);
        let pm = conditional_moments(pc, beta, link)?;
        let r = path.current(pc.size())?;
        let chol = factor_correlation(&r, c.index)?;
        add_into(
            &mut g,
            &weighted_term(&pc.regressors, &pm.sqrt_variance(), Some(&chol), &resid),
        );
        path.advance(pc, beta)?;
    }
    Ok(g)
}

/// Outcome of the summable perturbation construction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct A2Report {
    /// Clusters where `‖Y_i(β,δ_i) - Y_i(β)‖ > 2^{-i}` after all halvings.
    pub y_violations: usize,
    /// Clusters where `‖R*_{i-1}(β,δ)⁻¹ - R*_{i-1}(β)⁻¹‖ > 2^{-i}`. That gap
    /// is fixed by earlier perturbations and cannot be reduced through `δ_i`.
    pub r_violations: usize,
    pub halvings: usize,
    pub max_r_gap: f64,
}

/// Draws `δ_i` with uniform(-1, 1) entries, rescales to spectral norm
/// `2^{-i}` and halves it (at most 40 times) until
/// `‖Y_i(β,δ_i) - Y_i(β)‖ ≤ 2^{-i}`.
pub fn a2_schedule(
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    spec: &WorkingCorrelationSpec,
    seed: u64,
) -> Result<(Perturbation, A2Report)> {
    check_beta(clusters, beta)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut plain = WorkingPath::new(spec, link);
    let mut pert = WorkingPath::new(spec, link);
    let mut deltas = Vec::with_capacity(clusters.len());
    let mut report = A2Report {
        y_violations: 0,
        r_violations: 0,
        halvings: 0,
        max_r_gap: 0.0,
    };
    for (pos, c) in clusters.iter().enumerate() {
        let i = pos + 1;
        let target = 0.5f64.powi(i.min(1100) as i32);
        let (m, p) = (c.size(), c.p());
        let raw = Matrix::from_fn(p, m, |_, _| rng.random_range(-1.0..1.0));
        let norm = spectral_norm(&raw)?;
        let mut delta = if norm > 0.0 {
            raw.scale(target / norm)
        } else {
            raw
        };

        let r_plain = Cholesky::new(&plain.current(m)?)?.inverse();
        let r_pert = Cholesky::new(&pert.current(m)?)?.inverse();
        let r_gap = spectral_norm(&r_pert.sub(&r_plain))?;
        report.max_r_gap = report.max_r_gap.max(r_gap);
        if r_gap > target {
            report.r_violations += 1;
        }

        let y0 = scaled_design(&c.regressors, &conditional_moments(c, beta, link)?);
        let mut halvings = 0;
        let perturbed = loop {
            let x = c.regressors.add(&delta.transpose());
            let pc = Cluster::new(c.index, c.response.clone(), x)?;
            let y = scaled_design(&pc.regressors, &conditional_moments(&pc, beta, link)?);
            let gap = spectral_norm(&y.sub(&y0))?;
            if gap <= target || halvings == 40 {
                if gap > target {
                    report.y_violations += 1;
                }
                break pc;
            }
            delta = delta.scale(0.5);
            halvings += 1;
        };
        report.halvings += halvings;
        plain.advance(c, beta)?;
        pert.advance(&perturbed, beta)?;
        deltas.push(delta);
    }
    Ok((Perturbation { deltas, bound: 0.5 }, report))
}

/// `Y_i = A_i^{1/2} X_i`.
fn scaled_design(x: &Matrix, mom: &ConditionalMoments) -> Matrix {
    x.scale_rows(&mom.sqrt_variance())
}

/// `D_n(β) = -∂q_n(β)/∂βᵀ`.
pub fn jacobian(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    method: JacobianMethod,
) -> Result<Matrix> {
    match method {
        JacobianMethod::Analytic => analytic_jacobian(kind, clusters, beta, link),
        JacobianMethod::FiniteDifference => fd_jacobian(|b| eval_g(kind, clusters, b, link), beta),
    }
}

/// Whether [`JacobianMethod::Analytic`] is available for this combination.
pub fn analytic_available(kind: &EstimatingKind, link: Link) -> bool {
    kind.beta_independent_weights() && matches!(link, Link::Identity | Link::Log)
}

fn analytic_jacobian(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Matrix> {
    if !analytic_available(kind, link) {
        return Err(Error::UnsupportedMethod(
            "analytic Jacobian needs a beta-independent correlation and identity or log link",
        ));
    }
    check_beta(clusters, beta)?;
    let p = beta.len();
    let mut d = Matrix::zeros(p, p);
    let mut weights = Weights::new(kind, link, clusters.len())?;
    for (pos, c) in clusters.iter().enumerate() {
        let x = &c.regressors;
        let eta = c.linear_predictor(beta);
        let mom = conditional_moments(c, beta, link)?;
        let s = mom.sqrt_variance();
        // ds/dη divided by s
        let ds_over_s: Vec<f64> = eta
            .iter()
            .zip(&mom.variance)
            .map(|(&u, &v)| link.d2(u) / (2.0 * v))
            .collect();
        let resid = mom.residual(&c.response);
        let t: Vec<f64> = resid.iter().zip(&s).map(|(r, s)| r / s).collect();
        let r = weights.correlation(pos, c)?;
        let chol = r
            .as_ref()
            .map(|r| factor_correlation(r, c.index))
            .transpose()?;
        // D_i = (S X)ᵀ R⁻¹ [(s + (s'/s)∘t) ∘ X] - Xᵀ diag(s' ∘ R⁻¹t) X
        let row_scale: Vec<f64> = s
            .iter()
            .zip(&ds_over_s)
            .zip(&t)
            .map(|((s, k), t)| s + k * t)
            .collect();
        let mut b = x.scale_rows(&row_scale);
        let mut w = t.clone();
        if let Some(ch) = &chol {
            b = ch.solve(&b)?;
            ch.solve_in_place(&mut w);
        }
        let sx = x.scale_rows(&s);
        let first = sx.tr_matmul(&b);
        let diag: Vec<f64> = w
            .iter()
            .zip(&ds_over_s)
            .zip(&s)
            .map(|((w, k), s)| w * k * s)
            .collect();
        let second = x.tr_matmul(&x.scale_rows(&diag));
        d = d.add(&first.sub(&second));
        weights.advance(c, beta)?;
    }
    Ok(d)
}

/// Central differences with step `cbrt(eps)·max(1, |β_l|)`, returning `-∂g/∂β`.
pub fn fd_jacobian(mut g: impl FnMut(&[f64]) -> Result<Vec<f64>>, beta: &[f64]) -> Result<Matrix> {
    let p = beta.len();
    let mut d = Matrix::zeros(p, p);
    let mut b = beta.to_vec();
    for l in 0..p {
        let h = fd_step(beta[l]);
        b[l] = beta[l] + h;
        let up = g(&b)?;
        b[l] = beta[l] - h;
        let down = g(&b)?;
        b[l] = beta[l];
        let width = 2.0 * h;
        for k in 0..p {
            d[(k, l)] = -(up[k] - down[k]) / width;
        }
    }
    Ok(d)
}

/// The four information-type sums of one path.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimalitySums {
    /// `Σ X_iᵀ A_i X_i`.
    pub h_ind: Matrix,
    /// `Σ X_iᵀ A^{1/2} R*⁻¹ A^{1/2} X_i`.
    pub h_star: Matrix,
    /// `Σ X_iᵀ A^{1/2} R̄⁻¹ A^{1/2} X_i`.
    pub m_bar: Matrix,
    /// `Σ X_iᵀ A^{1/2} R*⁻¹ R̄ R*⁻¹ A^{1/2} X_i`.
    pub m_star: Matrix,
}

impl OptimalitySums {
    pub fn zeros(p: usize) -> Self {
        let z = Matrix::zeros(p, p);
        Self {
            h_ind: z.clone(),
            h_star: z.clone(),
            m_bar: z.clone(),
            m_star: z,
        }
    }

    fn combine(&self, other: &Self, f: impl Fn(&Matrix, &Matrix) -> Matrix) -> Self {
        Self {
            h_ind: f(&self.h_ind, &other.h_ind),
            h_star: f(&self.h_star, &other.h_star),
            m_bar: f(&self.m_bar, &other.m_bar),
            m_star: f(&self.m_star, &other.m_star),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.combine(other, Matrix::add)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.combine(other, Matrix::sub)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.combine(self, |a, _| a.scale(c))
    }

    /// `(det H*/det M̄, det M*/det M̄)`.
    pub fn det_ratios(&self) -> Result<(f64, f64)> {
        Ok((
            det_ratio(&self.h_star, &self.m_bar)?,
            det_ratio(&self.m_star, &self.m_bar)?,
        ))
    }
}

/// Per-path cumulative sums: `cumulative[n]` covers clusters `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOptimality {
    cumulative: Vec<OptimalitySums>,
}

impl PathOptimality {
    pub fn n(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn at(&self, n: usize) -> &OptimalitySums {
        &self.cumulative[n]
    }

    /// Sums over clusters `n0..=n`.
    pub fn partial(&self, n0: usize, n: usize) -> Result<OptimalitySums> {
        if n0 == 0 || n0 > n || n > self.n() {
            return Err(Error::invalid_argument(format!("invalid range {n0}..={n}")));
        }
        Ok(self.cumulative[n].sub(&self.cumulative[n0 - 1]))
    }

    /// `K*_i` and friends for the single cluster `i` (1-based).
    pub fn increment(&self, i: usize) -> Result<OptimalitySums> {
        self.partial(i, i)
    }
}

/// Single-path sums at `beta`, with `R*` from `spec` and `R̄` from `truth`.
pub fn path_optimality(
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    spec: &WorkingCorrelationSpec,
    truth: &TruthTemplate,
) -> Result<PathOptimality> {
    check_beta(clusters, beta)?;
    let p = beta.len();
    let mut path = WorkingPath::new(spec, link);
    let mut cumulative = Vec::with_capacity(clusters.len() + 1);
    let mut acc = OptimalitySums::zeros(p);
    cumulative.push(acc.clone());
    for c in clusters {
        let m = c.size();
        if m > truth.dim() {
            return Err(Error::invalid_argument(format!(
                "cluster {} larger than the true-correlation template",
                c.index
            )));
        }
        let mom = conditional_moments(c, beta, link)?;
        let y = scaled_design(&c.regressors, &mom);
        let rstar = factor_correlation(&path.current(m)?, c.index)?;
        let rbar_m = truth.for_size(m);
        let rbar = factor_correlation(&rbar_m, c.index)?;
        let a = rstar.solve(&y)?;
        let inc = OptimalitySums {
            h_ind: y.tr_matmul(&y),
            h_star: y.tr_matmul(&a),
            m_bar: y.tr_matmul(&rbar.solve(&y)?),
            m_star: a.tr_matmul(&rbar_m.matmul(&a)),
        };
        acc = acc.add(&inc);
        cumulative.push(acc.clone());
        path.advance(c, beta)?;
    }
    Ok(PathOptimality { cumulative })
}

/// Ensemble means (estimates of the expectations) plus the per-path sums.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityMatrices {
    pub mean: OptimalitySums,
    pub per_path: Vec<PathOptimality>,
}

impl OptimalityMatrices {
    /// Ensemble mean over clusters `1..=n`.
    pub fn mean_at(&self, n: usize) -> Result<OptimalitySums> {
        mean_sums(self.per_path.iter().map(|p| p.at(n).clone()))
    }
}

pub fn mean_sums(items: impl Iterator<Item = OptimalitySums>) -> Result<OptimalitySums> {
    let mut count = 0usize;
    let mut acc: Option<OptimalitySums> = None;
    for s in items {
        acc = Some(match acc {
            None => s,
            Some(a) => a.add(&s),
        });
        count += 1;
    }
    acc.map(|a| a.scale(1.0 / count as f64))
        .ok_or_else(|| Error::invalid_argument("empty ensemble"))
}

pub fn optimality_matrices(
    ensemble: &[&[Cluster]],
    beta: &[f64],
    link: Link,
    spec: &WorkingCorrelationSpec,
    truth: &TruthTemplate,
) -> Result<OptimalityMatrices> {
    let n = ensemble
        .first()
        .ok_or_else(|| Error::invalid_argument("empty ensemble"))?
        .len();
    if ensemble.iter().any(|e| e.len() != n) {
        return Err(Error::invalid_argument("ensemble paths differ in length"));
    }
    let per_path = ensemble
        .iter()
        .map(|cl| path_optimality(cl, beta, link, spec, truth))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_sums(per_path.iter().map(|p| p.at(n).clone()))?;
    Ok(OptimalityMatrices { mean, per_path })
}

/// Where `Σ_i^{(c)}` comes from.
#[derive(Debug, Clone, Copy)]
pub enum CovarianceSource<'a> {
    /// `A^{1/2} R̄ A^{1/2}` with a known true correlation.
    Truth(&'a TruthTemplate),
    /// Working approximation `Σ ≈ A`.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalVariance {
    /// `C_i Σ_i C_iᵀ` per cluster.
    pub increments: Vec<Matrix>,
    pub v_n: Matrix,
    /// Set when `Σ` was approximated by `A`.
    pub plug_in: bool,
}

impl ConditionalVariance {
    /// Cumulative `V_k` for `k = 1..=n`.
    pub fn cumulative(&self) -> Vec<Matrix> {
        let mut acc = Matrix::zeros(self.v_n.rows(), self.v_n.cols());
        self.increments
            .iter()
            .map(|inc| {
                acc = acc.add(inc);
                acc.clone()
            })
            .collect()
    }
}

/// Coefficient matrices `C_i(β)` (`p × m_i`).
pub fn coefficient_matrices(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Vec<Matrix>> {
    check_beta(clusters, beta)?;
    let mut weights = Weights::new(kind, link, clusters.len())?;
    let mut out = Vec::with_capacity(clusters.len());
    for (pos, c) in clusters.iter().enumerate() {
        let coef = if let Weights::General(g) = &weights {
            let coef = (g.0)(&clusters[..pos], &c.regressors, beta, link);
            if coef.shape() != (beta.len(), c.size()) {
                return Err(Error::invalid_argument(format!(
                    "coefficient callback returned {:?} for cluster {}",
                    coef.shape(),
                    c.index
                )));
            }
            coef
        } else {
            match weights.correlation(pos, c)? {
                None => c.regressors.transpose(),
                Some(r) => {
                    let s = conditional_moments(c, beta, link)?.sqrt_variance();
                    let inv_s: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
                    let rinv = factor_correlation(&r, c.index)?.inverse();
                    c.regressors
                        .tr_matmul(&rinv.scale_rows(&s).scale_cols(&inv_s))
                }
            }
        };
        out.push(coef);
        weights.advance(c, beta)?;
    }
    Ok(out)
}

/// `V_n = Σ C_i Σ_i^{(c)} C_iᵀ`.
pub fn conditional_variance(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    source: CovarianceSource<'_>,
) -> Result<ConditionalVariance> {
    let coefs = coefficient_matrices(kind, clusters, beta, link)?;
    let p = beta.len();
    let mut v_n = Matrix::zeros(p, p);
    let mut increments = Vec::with_capacity(clusters.len());
    for (c, coef) in clusters.iter().zip(&coefs) {
        let s = conditional_moments(c, beta, link)?.sqrt_variance();
        let sigma = match source {
            CovarianceSource::PlugIn => {
                Matrix::from_diag(&s.iter().map(|v| v * v).collect::<Vec<_>>())
            }
            CovarianceSource::Truth(t) => t.for_size(c.size()).scale_rows(&s).scale_cols(&s),
        };
        let inc = coef
            .matmul(&sigma)
            .matmul(&coef.transpose())
            .symmetric_part();
        v_n = v_n.add(&inc);
        increments.push(inc);
    }
    Ok(ConditionalVariance {
        increments,
        v_n,
        plug_in: matches!(source, CovarianceSource::PlugIn),
    })
}

/// `det(numerator) / det(denominator)` through LU factorizations.
pub fn det_ratio(numerator: &Matrix, denominator: &Matrix) -> Result<f64> {
    if numerator.shape() != denominator.shape() {
        return Err(Error::Linalg(LinalgError::DimensionMismatch {
            expected: denominator.shape(),
            got: numerator.shape(),
        }));
    }
    let den = Lu::new(denominator)?.det();
    if !(den.abs() > DET_SINGULAR) {
        return Err(Error::SingularDenominator { det: den });
    }
    Ok(Lu::new(numerator)?.det() / den)
}

/// Ensemble averages of the moments that must be finite for `q_n` to belong
/// to the estimating-function class.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegrabilityMoments {
    /// Mean of `|c_i^{jk}|`.
    pub coefficient: f64,
    /// Mean of `|∂c_i^{jk}/∂β_l · (y_ik - μ_ik)|`.
    pub derivative_residual: f64,
    /// Mean of `|c_i^{jk} c_i^{lr} v_i^{kr}|`.
    pub cross: f64,
}

impl IntegrabilityMoments {
    fn values(&self) -> [f64; 3] {
        [self.coefficient, self.derivative_residual, self.cross]
    }
}

/// Moments on each half of the ensemble and on the whole, with a stability
/// verdict: all finite and the half-ensemble values within `tolerance`
/// (relative) of the full-ensemble value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegrabilityCertificate {
    pub half: IntegrabilityMoments,
    pub full: IntegrabilityMoments,
    pub max_relative_change: f64,
    pub stable: bool,
}

pub fn integrability_moments(
    kind: &EstimatingKind,
    ensemble: &[&[Cluster]],
    beta: &[f64],
    link: Link,
    source: CovarianceSource<'_>,
) -> Result<IntegrabilityMoments> {
    let p = beta.len();
    let (mut sc, mut sd, mut sx) = (0.0, 0.0, 0.0);
    let (mut nc, mut nd, mut nx) = (0usize, 0usize, 0usize);
    for clusters in ensemble {
        let coefs = coefficient_matrices(kind, clusters, beta, link)?;
        let mut shifted = Vec::with_capacity(p);
        for l in 0..p {
            let h = fd_step(beta[l]);
            let mut up = beta.to_vec();
            up[l] += h;
            let mut down = beta.to_vec();
            down[l] -= h;
            let cu = coefficient_matrices(kind, clusters, &up, link)?;
            let cd = coefficient_matrices(kind, clusters, &down, link)?;
            shifted.push(
                cu.iter()
                    .zip(&cd)
                    .map(|(a, b)| a.sub(b).scale(1.0 / (2.0 * h)))
                    .collect::<Vec<_>>(),
            );
        }
        for (i, (c, coef)) in clusters.iter().zip(&coefs).enumerate() {
            let mom = conditional_moments(c, beta, link)?;
            let resid = mom.residual(&c.response);
            let s = mom.sqrt_variance();
            let sigma = match source {
                CovarianceSource::PlugIn => Matrix::from_diag(&mom.variance),
                CovarianceSource::Truth(t) => t.for_size(c.size()).scale_rows(&s).scale_cols(&s),
            };
            let m = c.size();
            for j in 0..p {
                for k in 0..m {
                    sc += coef[(j, k)].abs();
                    nc += 1;
                    for dl in &shifted {
                        sd += (dl[i][(j, k)] * resid[k]).abs();
                        nd += 1;
                    }
                    for l in 0..p {
                        for r in 0..m {
                            sx += (coef[(j, k)] * coef[(l, r)] * sigma[(k, r)]).abs();
                            nx += 1;
                        }
                    }
                }
            }
        }
    }
    if nc == 0 {
        return Err(Error::invalid_argument("empty ensemble"));
    }
    Ok(IntegrabilityMoments {
        coefficient: sc / nc as f64,
        derivative_residual: sd / nd.max(1) as f64,
        cross: sx / nx.max(1) as f64,
    })
}

pub fn certify_integrability(
    kind: &EstimatingKind,
    ensemble: &[&[Cluster]],
    beta: &[f64],
    link: Link,
    source: CovarianceSource<'_>,
    tolerance: f64,
) -> Result<IntegrabilityCertificate> {
    if ensemble.len() < 2 {
        return Err(Error::invalid_argument("need at least two paths"));
    }
    let half = integrability_moments(kind, &ensemble[..ensemble.len() / 2], beta, link, source)?;
    let full = integrability_moments(kind, ensemble, beta, link, source)?;
    let mut max_relative_change: f64 = 0.0;
    let mut finite = true;
    for (h, f) in half.values().iter().zip(full.values()) {
        finite &= h.is_finite() && f.is_finite();
        let scale = f.abs().max(1e-300);
        max_relative_change = max_relative_change.max((h - f).abs() / scale);
    }
    Ok(IntegrabilityCertificate {
        half,
        full,
        max_relative_change,
        stable: finite && max_relative_change <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{exchangeable_matrix, PseudoOptions};
    use crate::linalg::{Matrix, SymmetricEigen};
    use rand_chacha::ChaCha8Rng;

    fn random_clusters(seed: u64, n: usize, m: usize, p: usize, link: Link) -> Vec<Cluster> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = Matrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
                let y = (0..m)
                    .map(|_| match link {
                        Link::Probit => f64::from(rng.random_range(0..2u8)),
                        Link::Log => f64::from(rng.random_range(0..5u8)),
                        Link::Identity => rng.random_range(-2.0..2.0),
                    })
                    .collect();
                Cluster::new(i + 1, y, x).unwrap()
            })
            .collect()
    }

    fn scalar_cluster(x: f64, y: f64) -> Vec<Cluster> {
        alloc::vec![Cluster::new(1, alloc::vec![y], Matrix::from_rows(&[&[x]])).unwrap()]
    }

    #[test]
    fn identity_spec_matches_independence() {
        for link in [Link::Identity, Link::Log, Link::Probit] {
            let cl = random_clusters(3, 20, 3, 2, link);
            let beta = [0.2, -0.4];
            let a = eval_g(
                &EstimatingKind::GeeStar(WorkingCorrelationSpec::identity(3)),
                &cl,
                &beta,
                link,
            )
            .unwrap();
            let b = eval_g(&EstimatingKind::Independence, &cl, &beta, link).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn zero_residuals_give_zero() {
        let mut cl = random_clusters(4, 10, 2, 2, Link::Log);
        let beta = [0.1, 0.3];
        for c in &mut cl {
            c.response = conditional_moments(c, &beta, Link::Log).unwrap().mean;
        }
        let spec = WorkingCorrelationSpec::exchangeable(0.3, 2).unwrap();
        let g = eval_g(&EstimatingKind::GeeStar(spec), &cl, &beta, Link::Log).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_log_evaluation() {
        let cl = scalar_cluster(1.0, 2.0);
        let spec = WorkingCorrelationSpec::identity(1);
        let g = eval_g(&EstimatingKind::GeeStar(spec), &cl, &[0.0], Link::Log).unwrap();
        assert_eq!(g, alloc::vec![1.0]);
    }

    #[test]
    fn fixed_correlation_scaling() {
        let cl = random_clusters(5, 15, 3, 2, Link::Log);
        let beta = [0.1, -0.2];
        let r = exchangeable_matrix(0.3, 3);
        let base = eval_g(
            &EstimatingKind::GeeStar(WorkingCorrelationSpec::fixed(r.clone()).unwrap()),
            &cl,
            &beta,
            Link::Log,
        )
        .unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = eval_g(
                &EstimatingKind::GeeStar(WorkingCorrelationSpec::fixed(r.scale(c)).unwrap()),
                &cl,
                &beta,
                Link::Log,
            )
            .unwrap();
            for (a, b) in scaled.iter().zip(&base) {
                assert!((a - b / c).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn not_pd_frozen_correlation_names_cluster() {
        let cl = random_clusters(6, 3, 2, 1, Link::Identity);
        let bad = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let seq = alloc::vec![Matrix::identity(2), bad, Matrix::identity(2)];
        let err = eval_g(
            &EstimatingKind::FrozenSequence(seq),
            &cl,
            &[0.0],
            Link::Identity,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::WorkingCorrelationNotPd { cluster: 2, .. }
        ));
    }

    #[test]
    fn perturbed_zero_is_bitwise() {
        let cl = random_clusters(7, 25, 3, 2, Link::Log);
        let beta = [0.3, 0.1];
        for spec in [
            WorkingCorrelationSpec::pseudo_likelihood(3),
            WorkingCorrelationSpec::ar1(0.5, 3).unwrap(),
        ] {
            let a = eval_g(
                &EstimatingKind::GeeStar(spec.clone()),
                &cl,
                &beta,
                Link::Log,
            )
            .unwrap();
            let b =
                eval_g_perturbed(&cl, &beta, &Perturbation::zero(&cl), Link::Log, &spec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbed_scalar_hand_value() {
        let cl = scalar_cluster(1.0, 1.0);
        let pert = Perturbation::new(alloc::vec![Matrix::from_rows(&[&[0.1]])], 0.1).unwrap();
        let g = eval_g_perturbed(
            &cl,
            &[0.0],
            &pert,
            Link::Identity,
            &WorkingCorrelationSpec::identity(1),
        )
        .unwrap();
        assert!((g[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn perturbation_bound_enforced() {
        let d = Matrix::from_rows(&[&[3.0, 4.0]]);
        assert!(Perturbation::new(alloc::vec![d.clone()], 4.9).is_err());
        assert!(Perturbation::new(alloc::vec![d], 5.0).is_ok());
    }

    #[test]
    fn a2_schedule_norms() {
        let cl = random_clusters(8, 60, 3, 2, Link::Log);
        let beta = [0.2, -0.1];
        let spec = WorkingCorrelationSpec::exchangeable(0.3, 3).unwrap();
        let (pert, report) = a2_schedule(&cl, &beta, Link::Log, &spec, 1).unwrap();
        for (i, d) in pert.deltas().iter().enumerate() {
            assert!(spectral_norm(d).unwrap() <= 0.5f64.powi(i as i32 + 1) * (1.0 + 1e-12));
        }
        assert_eq!(report.y_violations, 0);
        // β-independent correlation: the R* part holds trivially
        assert_eq!(report.r_violations, 0);
    }

    #[test]
    fn a2_perturbed_g_stays_close() {
        let beta = [0.2, -0.1];
        let spec = WorkingCorrelationSpec::pseudo_likelihood(3);
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let cl = random_clusters(100 + seed, 200, 3, 2, Link::Log);
            let (pert, _) = a2_schedule(&cl, &beta, Link::Log, &spec, seed).unwrap();
            let a = eval_g(
                &EstimatingKind::GeeStar(spec.clone()),
                &cl,
                &beta,
                Link::Log,
            )
            .unwrap();
            let b = eval_g_perturbed(&cl, &beta, &pert, Link::Log, &spec).unwrap();
            let diff = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
        }
        // summable perturbations: bounded by a constant, not growing with n
        assert!(worst < 5.0, "worst {worst}");
    }

    #[test]
    fn identity_link_jacobian_is_weighted_gram() {
        let cl = random_clusters(9, 12, 3, 3, Link::Identity);
        let r = exchangeable_matrix(0.2, 3);
        let kind = EstimatingKind::GeeStar(WorkingCorrelationSpec::fixed(r.clone()).unwrap());
        let rinv = Cholesky::new(&r).unwrap().inverse();
        let mut want = Matrix::zeros(3, 3);
        for c in &cl {
            want = want.add(&c.regressors.tr_matmul(&rinv.matmul(&c.regressors)));
        }
        for beta in [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]] {
            let d = jacobian(&kind, &cl, &beta, Link::Identity, JacobianMethod::Analytic).unwrap();
            assert!(d.sub(&want).max_abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_log_jacobian() {
        let cl = scalar_cluster(1.0, 3.0);
        for b in [-1.0, 0.0, 0.7] {
            let d = jacobian(
                &EstimatingKind::Independence,
                &cl,
                &[b],
                Link::Log,
                JacobianMethod::Analytic,
            )
            .unwrap();
            assert!((d[(0, 0)] - f64::exp(b)).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for case in 0..20 {
            let link = if case % 2 == 0 {
                Link::Log
            } else {
                Link::Identity
            };
            let cl = random_clusters(200 + case, 15, 3, 3, link);
            let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let kind = match case % 3 {
                0 => EstimatingKind::Independence,
                1 => EstimatingKind::GeeStar(WorkingCorrelationSpec::ar1(0.4, 3).unwrap()),
                _ => EstimatingKind::QuasiScore(
                    TruthTemplate::new(exchangeable_matrix(0.3, 3)).unwrap(),
                ),
            };
            let a = jacobian(&kind, &cl, &beta, link, JacobianMethod::Analytic).unwrap();
            let f = jacobian(&kind, &cl, &beta, link, JacobianMethod::FiniteDifference).unwrap();
            let scale = a.max_abs();
            for (x, y) in a.data().iter().zip(f.data()) {
                assert!(
                    (x - y).abs() <= 1e-5 * x.abs().max(1e-3 * scale),
                    "{x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn analytic_unavailable_cases() {
        let cl = random_clusters(11, 5, 2, 2, Link::Probit);
        let err = jacobian(
            &EstimatingKind::Independence,
            &cl,
            &[0.0, 0.0],
            Link::Probit,
            JacobianMethod::Analytic,
        );
        assert!(matches!(err, Err(Error::UnsupportedMethod(_))));
        let kind = EstimatingKind::GeeStar(WorkingCorrelationSpec::pseudo_likelihood(2));
        let cl = random_clusters(11, 5, 2, 2, Link::Log);
        assert!(matches!(
            jacobian(&kind, &cl, &[0.0, 0.0], Link::Log, JacobianMethod::Analytic),
            Err(Error::UnsupportedMethod(_))
        ));
        assert!(jacobian(
            &kind,
            &cl,
            &[0.0, 0.0],
            Link::Log,
            JacobianMethod::FiniteDifference
        )
        .is_ok());
    }

    #[test]
    fn truth_spec_identity_per_path() {
        let cl = random_clusters(12, 50, 3, 2, Link::Log);
        let r = exchangeable_matrix(0.4, 3);
        let truth = TruthTemplate::new(r.clone()).unwrap();
        let spec = WorkingCorrelationSpec::fixed(r).unwrap();
        let path = path_optimality(&cl, &[0.1, 0.2], Link::Log, &spec, &truth).unwrap();
        for n in [5, 20, 50] {
            let (a, b) = path.at(n).det_ratios().unwrap();
            assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        }
        let s = path.at(50);
        assert_eq!(s.h_star, s.m_bar);
    }

    #[test]
    fn optimality_fixed_design() {
        let cl = random_clusters(13, 30, 2, 2, Link::Identity);
        let truth = TruthTemplate::new(exchangeable_matrix(0.4, 2)).unwrap();
        let spec = WorkingCorrelationSpec::identity(2);
        let ens: Vec<&[Cluster]> = alloc::vec![&cl, &cl, &cl];
        let om = optimality_matrices(&ens, &[0.0, 0.0], Link::Identity, &spec, &truth).unwrap();
        let mut want = Matrix::zeros(2, 2);
        for c in &cl {
            want = want.add(&c.regressors.tr_matmul(&c.regressors));
        }
        assert!(om.mean.h_ind.sub(&want).max_abs() < 1e-12);
        assert_eq!(om.mean.h_ind, om.mean.h_star);
        let partial = om.per_path[0].partial(11, 30).unwrap();
        let tail = om.per_path[0].at(30).sub(om.per_path[0].at(10));
        assert_eq!(partial, tail);
        assert!(optimality_matrices(&[], &[0.0, 0.0], Link::Identity, &spec, &truth).is_err());
    }

    #[test]
    fn optimality_sums_are_symmetric_psd() {
        let cl = random_clusters(14, 40, 3, 2, Link::Log);
        let truth = TruthTemplate::new(exchangeable_matrix(0.4, 3)).unwrap();
        let spec = WorkingCorrelationSpec::pseudo_likelihood(3);
        let path = path_optimality(&cl, &[0.1, 0.0], Link::Log, &spec, &truth).unwrap();
        let s = path.at(40);
        for m in [&s.h_ind, &s.h_star, &s.m_bar, &s.m_star] {
            assert!(m.max_asymmetry() < 1e-10 * m.max_abs());
            assert!(SymmetricEigen::new(&m.symmetric_part()).unwrap().values[0] > 0.0);
        }
    }

    #[test]
    fn conditional_variance_cases() {
        // independence with Σ = A gives H_n'
        let cl = random_clusters(15, 10, 3, 2, Link::Log);
        let beta = [0.2, 0.1];
        let cv = conditional_variance(
            &EstimatingKind::Independence,
            &cl,
            &beta,
            Link::Log,
            CovarianceSource::PlugIn,
        )
        .unwrap();
        assert!(cv.plug_in);
        let mut h = Matrix::zeros(2, 2);
        for c in &cl {
            let mom = conditional_moments(c, &beta, Link::Log).unwrap();
            h = h.add(
                &c.regressors
                    .tr_matmul(&c.regressors.scale_rows(&mom.variance)),
            );
        }
        assert!(cv.v_n.sub(&h).max_abs() < 1e-12 * h.max_abs());

        // scalar ones design
        let ones: Vec<Cluster> = (1..=7)
            .map(|i| Cluster::new(i, alloc::vec![0.0], Matrix::from_rows(&[&[1.0]])).unwrap())
            .collect();
        let cv = conditional_variance(
            &EstimatingKind::Independence,
            &ones,
            &[0.0],
            Link::Identity,
            CovarianceSource::PlugIn,
        )
        .unwrap();
        assert_eq!(cv.v_n[(0, 0)], 7.0);
        assert_eq!(cv.cumulative()[2][(0, 0)], 3.0);
    }

    #[test]
    fn conditional_variance_brute_force() {
        let cl = random_clusters(16, 5, 3, 2, Link::Log);
        let beta = [0.3, -0.2];
        let rbar = exchangeable_matrix(0.4, 3);
        let truth = TruthTemplate::new(rbar.clone()).unwrap();
        let spec = WorkingCorrelationSpec::ar1(0.3, 3).unwrap();
        let kind = EstimatingKind::GeeStar(spec);
        let cv = conditional_variance(
            &kind,
            &cl,
            &beta,
            Link::Log,
            CovarianceSource::Truth(&truth),
        )
        .unwrap();
        let rinv = Cholesky::new(&crate::correlation::ar1_matrix(0.3, 3))
            .unwrap()
            .inverse();
        for (c, inc) in cl.iter().zip(&cv.increments) {
            let mom = conditional_moments(c, &beta, Link::Log).unwrap();
            let s = mom.sqrt_variance();
            let a_half = Matrix::from_diag(&s);
            let a_mhalf = Matrix::from_diag(&s.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
            let coef = c
                .regressors
                .transpose()
                .matmul(&a_half)
                .matmul(&rinv)
                .matmul(&a_mhalf);
            let sigma = a_half.matmul(&rbar).matmul(&a_half);
            let want = coef.matmul(&sigma).matmul(&coef.transpose());
            assert!(inc.sub(&want).max_abs() < 1e-12 * (1.0 + want.max_abs()));
            assert!(SymmetricEigen::new(inc).unwrap().values[0] >= -1e-10);
        }
    }

    #[test]
    fn det_ratio_cases() {
        let a = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        assert_eq!(det_ratio(&a, &a).unwrap(), 1.0);
        for p in 1..=4 {
            let r = det_ratio(&Matrix::identity(p).scale(2.0), &Matrix::identity(p)).unwrap();
            assert!((r - 2f64.powi(p as i32)).abs() < 1e-14);
        }
        assert!(matches!(
            det_ratio(&a, &Matrix::zeros(2, 2)),
            Err(Error::SingularDenominator { .. })
        ));
    }

    #[test]
    fn general_coefficients_reproduce_independence() {
        let cl = random_clusters(17, 10, 2, 2, Link::Log);
        let beta = [0.1, 0.1];
        let kind = EstimatingKind::General(GeneralCoefficients(Arc::new(
            |_hist: &[Cluster], x: &Matrix, _b: &[f64], _l: Link| x.transpose(),
        )));
        let a = eval_g(&kind, &cl, &beta, Link::Log).unwrap();
        let b = eval_g(&EstimatingKind::Independence, &cl, &beta, Link::Log).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficients_consistent_with_eval() {
        let cl = random_clusters(18, 12, 3, 2, Link::Log);
        let beta = [0.2, -0.3];
        let kind = EstimatingKind::GeeStar(
            WorkingCorrelationSpec::pseudo_likelihood_with(PseudoOptions::RAW, 3).unwrap(),
        );
        let coefs = coefficient_matrices(&kind, &cl, &beta, Link::Log).unwrap();
        let mut g = alloc::vec![0.0; 2];
        for (c, coef) in cl.iter().zip(&coefs) {
            let r = conditional_moments(c, &beta, Link::Log)
                .unwrap()
                .residual(&c.response);
            add_into(&mut g, &coef.mul_vec(&r));
        }
        let direct = eval_g(&kind, &cl, &beta, Link::Log).unwrap();
        for (x, y) in g.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn integrability_is_stable() {
        let paths: Vec<Vec<Cluster>> = (0..8)
            .map(|s| random_clusters(300 + s, 30, 2, 2, Link::Log))
            .collect();
        let ens: Vec<&[Cluster]> = paths.iter().map(|p| p.as_slice()).collect();
        let kind = EstimatingKind::GeeStar(WorkingCorrelationSpec::exchangeable(0.3, 2).unwrap());
        let truth = TruthTemplate::new(exchangeable_matrix(0.4, 2)).unwrap();
        let cert = certify_integrability(
            &kind,
            &ens,
            &[0.1, 0.2],
            Link::Log,
            CovarianceSource::Truth(&truth),
            0.5,
        )
        .unwrap();
        assert!(cert.stable, "{cert:?}");
        assert!(cert.full.coefficient > 0.0 && cert.full.cross > 0.0);
    }
}
