//! Working correlations `R*_n(β)` and the true conditional correlation.
//!
//! Every working correlation is kept as an `m_max × m_max` template. The
//! matrix applied to cluster `i` is the leading `m_i × m_i` block of the
//! template built from clusters `1..i-1`, which keeps it predictable even
//! when cluster sizes vary.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::{sym_eigen_extremes, Cholesky, EigenExtremes, Matrix};
use crate::model::{conditional_moments, Cluster, Link};
use crate::{Error, Result};

/// Eigenvalue floor for emitted pseudo-likelihood correlations.
pub const PSEUDO_EIGEN_FLOOR: f64 = 1e-6;

/// How the pseudo-likelihood running average is turned into a correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoOptions {
    /// Rescale the average to unit diagonal before use.
    pub unit_diagonal: bool,
    /// Shrinkage strength `c`: entry `(j, k)`, averaged over `n_jk` clusters,
    /// becomes `(1 - ε) s_jk + ε δ_jk` with `ε = c / (n_jk + c)`. `None`
    /// disables shrinkage and leaves only the eigenvalue floor.
    pub shrinkage: Option<f64>,
}

impl PseudoOptions {
    /// The bare running average, regularized only by the eigenvalue floor.
    pub const RAW: PseudoOptions = PseudoOptions {
        unit_diagonal: false,
        shrinkage: None,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkingKind {
    Identity,
    Exchangeable { rho: f64 },
    Ar1 { rho: f64 },
    PseudoLikelihood { options: PseudoOptions },
    Fixed { matrix: Matrix },
}

/// A validated working-correlation family with its ambient dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelationSpec {
    kind: WorkingKind,
    template_dim: usize,
}

impl WorkingCorrelationSpec {
    pub fn new(kind: WorkingKind, template_dim: usize) -> Result<Self> {
        if template_dim == 0 {
            return Err(Error::config("template_dim", "must be positive"));
        }
        match &kind {
            WorkingKind::Identity => {}
            WorkingKind::Exchangeable { rho } => check_exchangeable(*rho, template_dim)?,
            WorkingKind::Ar1 { rho } => check_ar1(*rho)?,
            WorkingKind::PseudoLikelihood { options } => {
                if let Some(c) = options.shrinkage {
                    if !(c >= 0.0) || !c.is_finite() {
                        return Err(Error::config(
                            "shrinkage",
                            "must be a finite non-negative number",
                        ));
                    }
                }
            }
            WorkingKind::Fixed { matrix } => {
                if matrix.shape() != (template_dim, template_dim) {
                    return Err(Error::config(
                        "fixed",
                        format!("matrix must be {template_dim}x{template_dim}"),
                    ));
                }
                Cholesky::new(matrix)?;
            }
        }
        Ok(Self { kind, template_dim })
    }

    pub fn identity(template_dim: usize) -> Self {
        Self {
            kind: WorkingKind::Identity,
            template_dim,
        }
    }

    pub fn exchangeable(rho: f64, template_dim: usize) -> Result<Self> {
        Self::new(WorkingKind::Exchangeable { rho }, template_dim)
    }

    pub fn ar1(rho: f64, template_dim: usize) -> Result<Self> {
        Self::new(WorkingKind::Ar1 { rho }, template_dim)
    }

    /// Pseudo-likelihood with the default emission: unit diagonal and
    /// shrinkage strength `template_dim`.
    pub fn pseudo_likelihood(template_dim: usize) -> Self {
        Self {
            kind: WorkingKind::PseudoLikelihood {
                options: PseudoOptions {
                    unit_diagonal: true,
                    shrinkage: Some(template_dim as f64),
                },
            },
            template_dim,
        }
    }

    pub fn pseudo_likelihood_with(options: PseudoOptions, template_dim: usize) -> Result<Self> {
        Self::new(WorkingKind::PseudoLikelihood { options }, template_dim)
    }

    pub fn fixed(matrix: Matrix) -> Result<Self> {
        let dim = matrix.rows();
        Self::new(WorkingKind::Fixed { matrix }, dim)
    }

    pub fn kind(&self) -> &WorkingKind {
        &self.kind
    }

    pub fn template_dim(&self) -> usize {
        self.template_dim
    }

    /// Whether the template depends on `β` (through the data).
    pub fn depends_on_beta(&self) -> bool {
        matches!(self.kind, WorkingKind::PseudoLikelihood { .. })
    }

    /// Template for the β-independent families.
    fn static_template(&self) -> Option<Matrix> {
        let m = self.template_dim;
        match &self.kind {
            WorkingKind::Identity => Some(Matrix::identity(m)),
            WorkingKind::Exchangeable { rho } => Some(exchangeable_matrix(*rho, m)),
            WorkingKind::Ar1 { rho } => Some(ar1_matrix(*rho, m)),
            WorkingKind::Fixed { matrix } => Some(matrix.clone()),
            WorkingKind::PseudoLikelihood { .. } => None,
        }
    }

    /// Full `m_max × m_max` template given the history summarized in `state`.
    pub fn template(&self, state: Option<&PseudoLikelihoodState>) -> Result<Matrix> {
        if let Some(t) = self.static_template() {
            return Ok(t);
        }
        let WorkingKind::PseudoLikelihood { options } = &self.kind else {
            unreachable!()
        };
        match state {
            Some(s) if s.count() > 0 => s.emit(options),
            _ => Ok(Matrix::identity(self.template_dim)),
        }
    }
}

fn check_exchangeable(rho: f64, m: usize) -> Result<()> {
    let lower = if m > 1 {
        -1.0 / (m as f64 - 1.0)
    } else {
        f64::NEG_INFINITY
    };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::config(
            "rho",
            format!("exchangeable correlation {rho} outside ({lower}, 1) for dimension {m}"),
        ));
    }
    Ok(())
}

fn check_ar1(rho: f64) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return Err(Error::config(
            "rho",
            format!("AR(1) correlation {rho} outside (-1, 1)"),
        ));
    }
    Ok(())
}

pub fn exchangeable_matrix(rho: f64, m: usize) -> Matrix {
    Matrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho })
}

pub fn ar1_matrix(rho: f64, m: usize) -> Matrix {
    Matrix::from_fn(m, m, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Running sum of standardized residual outer products
/// `A_i^{-1/2}(y_i - μ_i)(y_i - μ_i)ᵀ A_i^{-1/2}`, with per-entry counts so
/// that small clusters only feed their leading block.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLikelihoodState {
    count: usize,
    sum: Matrix,
    entry_counts: Vec<usize>,
}

impl PseudoLikelihoodState {
    pub fn new(template_dim: usize) -> Self {
        Self {
            count: 0,
            sum: Matrix::zeros(template_dim, template_dim),
            entry_counts: vec![0; template_dim * template_dim],
        }
    }

    /// Number of clusters absorbed.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn template_dim(&self) -> usize {
        self.sum.rows()
    }

    pub fn entry_count(&self, i: usize, j: usize) -> usize {
        self.entry_counts[i * self.template_dim() + j]
    }

    /// Adds one standardized residual vector.
    pub fn accumulate(&mut self, e: &[f64]) -> Result<()> {
        let m = self.template_dim();
        if e.len() > m {
            return Err(Error::invalid_argument(format!(
                "cluster of size {} exceeds template dimension {m}",
                e.len()
            )));
        }
        for i in 0..e.len() {
            for j in 0..e.len() {
                self.sum[(i, j)] += e[i] * e[j];
                self.entry_counts[i * m + j] += 1;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Returns the state after absorbing `cluster` at `beta`.
    pub fn update(&self, cluster: &Cluster, beta: &[f64], link: Link) -> Result<Self> {
        let mut next = self.clone();
        next.push(cluster, beta, link)?;
        Ok(next)
    }

    pub fn push(&mut self, cluster: &Cluster, beta: &[f64], link: Link) -> Result<()> {
        let moments = conditional_moments(cluster, beta, link)?;
        self.accumulate(&moments.standardized(&cluster.response))
    }

    /// Entrywise average; entries never observed take identity values.
    pub fn average(&self) -> Matrix {
        let m = self.template_dim();
        Matrix::from_fn(m, m, |i, j| match self.entry_counts[i * m + j] {
            0 => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            c => self.sum[(i, j)] / c as f64,
        })
    }

    fn emit(&self, options: &PseudoOptions) -> Result<Matrix> {
        let m = self.template_dim();
        let mut r = self.average();
        if options.unit_diagonal {
            let scale: Vec<f64> = r
                .diag()
                .iter()
                .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 })
                .collect();
            r = Matrix::from_fn(m, m, |i, j| {
                if i == j {
                    1.0
                } else {
                    r[(i, j)] * scale[i] * scale[j]
                }
            });
        }
        if let Some(c) = options.shrinkage {
            r = Matrix::from_fn(m, m, |i, j| {
                let eps = c / (self.entry_counts[i * m + j] as f64 + c);
                let target = if i == j { 1.0 } else { 0.0 };
                (1.0 - eps) * r[(i, j)] + eps * target
            });
        }
        floor_eigenvalues(&r.symmetric_part())
    }
}

/// Blends toward the identity just enough to lift `λ_min` to
/// [`PSEUDO_EIGEN_FLOOR`]: `(1 - ε) R + ε I` with
/// `ε = (floor - λ_min) / (1 - λ_min)`.
pub fn floor_eigenvalues(r: &Matrix) -> Result<Matrix> {
    let ext = sym_eigen_extremes(r)?;
    if ext.lambda_min >= PSEUDO_EIGEN_FLOOR {
        return Ok(r.clone());
    }
    let eps = (PSEUDO_EIGEN_FLOOR - ext.lambda_min) / (1.0 - ext.lambda_min);
    let n = r.rows();
    Ok(r.scale(1.0 - eps).add(&Matrix::identity(n).scale(eps)))
}

/// `R*_{i-1}(β)` restricted to a cluster of size `target_size`.
pub fn working_corr(
    spec: &WorkingCorrelationSpec,
    state: Option<&PseudoLikelihoodState>,
    target_size: usize,
) -> Result<Matrix> {
    if target_size > spec.template_dim() {
        return Err(Error::invalid_argument(format!(
            "cluster size {target_size} exceeds template dimension {}",
            spec.template_dim()
        )));
    }
    Ok(spec.template(state)?.principal(target_size))
}

/// Walks the clusters in filtration order, handing out the predictable
/// working correlation for each one.
#[derive(Debug, Clone)]
pub struct WorkingPath<'a> {
    spec: &'a WorkingCorrelationSpec,
    link: Link,
    state: Option<PseudoLikelihoodState>,
    cached: Option<Matrix>,
}

impl<'a> WorkingPath<'a> {
    pub fn new(spec: &'a WorkingCorrelationSpec, link: Link) -> Self {
        let state = spec
            .depends_on_beta()
            .then(|| PseudoLikelihoodState::new(spec.template_dim()));
        Self {
            spec,
            link,
            state,
            cached: None,
        }
    }

    /// Template built from the clusters absorbed so far.
    pub fn template(&mut self) -> Result<&Matrix> {
        if self.cached.is_none() {
            self.cached = Some(self.spec.template(self.state.as_ref())?);
        }
        Ok(self.cached.as_ref().expect("just filled"))
    }

    /// Leading block for a cluster of `size`.
    pub fn current(&mut self, size: usize) -> Result<Matrix> {
        if size > self.spec.template_dim() {
            return Err(Error::invalid_argument(format!(
                "cluster size {size} exceeds template dimension {}",
                self.spec.template_dim()
            )));
        }
        Ok(self.template()?.principal(size))
    }

    /// Absorbs `cluster` evaluated at `beta`.
    pub fn advance(&mut self, cluster: &Cluster, beta: &[f64]) -> Result<()> {
        if let Some(state) = self.state.as_mut() {
            state.push(cluster, beta, self.link)?;
            self.cached = None;
        }
        Ok(())
    }
}

/// `R*_{i-1}(β)` for every cluster, each truncated to `m_i × m_i`.
pub fn working_sequence(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Vec<Matrix>> {
    let mut path = WorkingPath::new(spec, link);
    let mut out = Vec::with_capacity(clusters.len());
    for c in clusters {
        out.push(path.current(c.size())?);
        path.advance(c, beta)?;
    }
    Ok(out)
}

/// Full templates `R*_0(β), …, R*_n(β)` (length `n + 1`).
pub fn working_templates(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
) -> Result<Vec<Matrix>> {
    let mut path = WorkingPath::new(spec, link);
    let mut out = Vec::with_capacity(clusters.len() + 1);
    out.push(path.template()?.clone());
    for c in clusters {
        path.advance(c, beta)?;
        out.push(path.template()?.clone());
    }
    Ok(out)
}

/// True conditional correlation `R̄ = A^{-1/2} Σ A^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueCorrelation {
    pub sigma: Matrix,
    pub rbar: Matrix,
    pub extremes: EigenExtremes,
}

pub fn true_correlation(sigma: &Matrix, variance_diag: &[f64]) -> Result<TrueCorrelation> {
    let sigma = sigma.checked_symmetric()?;
    if sigma.rows() != variance_diag.len() {
        return Err(Error::invalid_argument(
            "covariance and variance lengths differ",
        ));
    }
    for (k, (&s, &v)) in sigma.diag().iter().zip(variance_diag).enumerate() {
        if !(v > 0.0) || ((s - v) / v).abs() > 1e-8 {
            return Err(Error::InconsistentMoments {
                index: k,
                sigma: s,
                variance: v,
            });
        }
    }
    let inv_sd: Vec<f64> = variance_diag.iter().map(|v| 1.0 / v.sqrt()).collect();
    let m = sigma.rows();
    let rbar = Matrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            sigma[(i, j)] * inv_sd[i] * inv_sd[j]
        }
    });
    let extremes = sym_eigen_extremes(&rbar)?;
    Ok(TrueCorrelation {
        sigma,
        rbar,
        extremes,
    })
}

/// Known true correlation as an `m_max × m_max` template; cluster `i` sees
/// its leading `m_i × m_i` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTemplate {
    template: Matrix,
}

impl TruthTemplate {
    pub fn new(template: Matrix) -> Result<Self> {
        let template = template.checked_symmetric()?;
        Cholesky::new(&template)?;
        Ok(Self { template })
    }

    pub fn template(&self) -> &Matrix {
        &self.template
    }

    pub fn for_size(&self, m: usize) -> Matrix {
        self.template.principal(m)
    }

    pub fn dim(&self) -> usize {
        self.template.rows()
    }
}

/// Default step `cbrt(machine epsilon) · max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central-difference `∂R*_{i-1}(β)/∂β_l` for every cluster, symmetrized.
/// β-independent families return zero matrices.
pub fn corr_beta_derivative_sequence(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    l: usize,
    step: Option<f64>,
) -> Result<Vec<Matrix>> {
    if l >= beta.len() {
        return Err(Error::invalid_argument(format!(
            "coordinate {l} out of range"
        )));
    }
    if !spec.depends_on_beta() {
        return Ok(clusters
            .iter()
            .map(|c| Matrix::zeros(c.size(), c.size()))
            .collect());
    }
    let h = step.unwrap_or_else(|| fd_step(beta[l]));
    let mut plus = beta.to_vec();
    plus[l] += h;
    let mut minus = beta.to_vec();
    minus[l] -= h;
    let up = working_sequence(spec, clusters, &plus, link)?;
    let down = working_sequence(spec, clusters, &minus, link)?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(a, b)| a.sub(b).scale(1.0 / (2.0 * h)).symmetric_part())
        .collect())
}

/// `∂R*(β)/∂β_l` for a cluster of `size` following `history`.
pub fn corr_beta_derivative(
    spec: &WorkingCorrelationSpec,
    history: &[Cluster],
    size: usize,
    beta: &[f64],
    link: Link,
    l: usize,
    step: Option<f64>,
) -> Result<Matrix> {
    if l >= beta.len() {
        return Err(Error::invalid_argument(format!(
            "coordinate {l} out of range"
        )));
    }
    if !spec.depends_on_beta() {
        return Ok(Matrix::zeros(size, size));
    }
    let h = step.unwrap_or_else(|| fd_step(beta[l]));
    let eval = |b: &[f64]| -> Result<Matrix> {
        let mut path = WorkingPath::new(spec, link);
        for c in history {
            path.advance(c, b)?;
        }
        path.current(size)
    };
    let mut plus = beta.to_vec();
    plus[l] += h;
    let mut minus = beta.to_vec();
    minus[l] -= h;
    Ok(eval(&plus)?
        .sub(&eval(&minus)?)
        .scale(1.0 / (2.0 * h))
        .symmetric_part())
}
