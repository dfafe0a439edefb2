//! Damped Newton root finding for `q_n(β) = 0` and the closed-form
//! weighted least-squares solution of the identity-link case.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::correlation::{working_sequence, WorkingKind};
use crate::estimating::{analytic_available, eval_g, jacobian, EstimatingKind, JacobianMethod};
use crate::linalg::{norm_inf, sym_eigen_extremes, Cholesky, Lu, Matrix};
use crate::model::{BoxRegion, Cluster, Link};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol_g: f64,
    pub tol_x: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// `None` picks the analytic Jacobian where it exists.
    pub jacobian_method: Option<JacobianMethod>,
    /// Outer refits for pseudo-likelihood correlations.
    pub outer_stages: usize,
    pub bounds: Option<BoxRegion>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_g: 1e-10,
            tol_x: 1e-12,
            max_iter: 100,
            max_halvings: 30,
            jacobian_method: None,
            outer_stages: 2,
            bounds: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_g > 0.0) {
            return Err(Error::config("tol_g", "must be positive"));
        }
        if !(self.tol_x > 0.0) {
            return Err(Error::config("tol_x", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub beta: Vec<f64>,
    pub residual_norm: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub beta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub trace: Vec<TraceEntry>,
    /// Newton solves run (more than one for the pseudo-likelihood refits).
    pub stages: usize,
}

fn newton_step(d: &Matrix, g: &[f64]) -> Result<Vec<f64>> {
    let solve = |m: &Matrix| -> Option<Vec<f64>> {
        let lu = Lu::new(m).ok()?;
        if lu.is_singular() {
            return None;
        }
        let x = lu.solve_vec(g).ok()?;
        x.iter().all(|v| v.is_finite()).then_some(x)
    };
    if let Some(x) = solve(d) {
        return Ok(x);
    }
    let p = d.rows();
    let ridge = 1e-8 * d.trace().abs().max(f64::MIN_POSITIVE) / p as f64;
    solve(&d.add(&Matrix::identity(p).scale(ridge))).ok_or(Error::SingularJacobian)
}

/// Newton iteration `β ← β + D(β)⁻¹ g(β)` with step halving on `‖g‖_∞`.
pub fn solve_gee(
    clusters: &[Cluster],
    kind: &EstimatingKind,
    link: Link,
    config: &SolverConfig,
    init: &[f64],
) -> Result<GeeFit> {
    config.validate()?;
    let method = match config.jacobian_method {
        Some(m) => m,
        None if analytic_available(kind, link) => JacobianMethod::Analytic,
        None => JacobianMethod::FiniteDifference,
    };
    let mut beta = init.to_vec();
    if let Some(b) = &config.bounds {
        b.clamp(&mut beta);
    }
    let mut g = eval_g(kind, clusters, &beta, link)?;
    let mut gn = norm_inf(&g);
    let mut trace = vec![TraceEntry {
        beta: beta.clone(),
        residual_norm: gn,
        step_norm: 0.0,
    }];
    let mut converged = false;
    let mut iterations = config.max_iter;
    for iter in 0..config.max_iter {
        let d = jacobian(kind, clusters, &beta, link, method)?;
        let step = newton_step(&d, &g)?;
        if gn < config.tol_g && norm_inf(&step) < config.tol_x {
            converged = true;
            iterations = iter;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let mut cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            if let Some(b) = &config.bounds {
                b.clamp(&mut cand);
            }
            // a trial point can leave the link's domain; treat it as a failed step
            if let Ok(gc) = eval_g(kind, clusters, &cand, link) {
                let n = norm_inf(&gc);
                if n < gn {
                    accepted = Some((cand, gc, n));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, gc, n)) = accepted else {
            converged = gn < config.tol_g;
            iterations = iter;
            break;
        };
        let step_norm = cand
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = cand;
        g = gc;
        gn = n;
        trace.push(TraceEntry {
            beta: beta.clone(),
            residual_norm: gn,
            step_norm,
        });
    }
    Ok(GeeFit {
        beta_hat: beta,
        converged,
        iterations,
        final_residual_norm: gn,
        trace,
        stages: 1,
    })
}

/// Solves `g = 0`; a pseudo-likelihood correlation is fitted in stages: an
/// independence fit, then `R*` frozen at the current estimate and refitted,
/// `outer_stages` times.
pub fn fit_gee(
    clusters: &[Cluster],
    kind: &EstimatingKind,
    link: Link,
    config: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<GeeFit> {
    let p = clusters
        .first()
        .map(Cluster::p)
        .ok_or_else(|| Error::invalid_argument("no clusters to fit"))?;
    let start = match init {
        Some(b) => b.to_vec(),
        None => default_init(clusters, link, p),
    };
    let EstimatingKind::GeeStar(spec) = kind else {
        return solve_gee(clusters, kind, link, config, &start);
    };
    if !matches!(spec.kind(), WorkingKind::PseudoLikelihood { .. }) {
        return solve_gee(clusters, kind, link, config, &start);
    }
    let mut fit = solve_gee(
        clusters,
        &EstimatingKind::Independence,
        link,
        config,
        &start,
    )?;
    let mut stages = 1;
    let mut iterations = fit.iterations;
    for _ in 0..config.outer_stages {
        let frozen = working_sequence(spec, clusters, &fit.beta_hat, link)?;
        let beta = fit.beta_hat.clone();
        fit = solve_gee(
            clusters,
            &EstimatingKind::FrozenSequence(frozen),
            link,
            config,
            &beta,
        )?;
        stages += 1;
        iterations += fit.iterations;
    }
    fit.stages = stages;
    fit.iterations = iterations;
    Ok(fit)
}

/// Least squares on link-transformed responses; zeros where that fails.
pub fn default_init(clusters: &[Cluster], link: Link, p: usize) -> Vec<f64> {
    let transform: fn(f64) -> f64 = match link {
        Link::Identity => |y| y,
        Link::Log => |y| y.max(0.5).ln(),
        Link::Probit => return vec![0.0; p],
    };
    let mut xtx = Matrix::zeros(p, p);
    let mut xty = vec![0.0; p];
    for c in clusters {
        let z: Vec<f64> = c.response.iter().map(|&y| transform(y)).collect();
        xtx = xtx.add(&c.regressors.tr_matmul(&c.regressors));
        for (a, b) in xty.iter_mut().zip(c.regressors.tr_mul_vec(&z)) {
            *a += b;
        }
    }
    match Cholesky::new(&xtx) {
        Ok(ch) => ch.solve_vec(&xty),
        Err(_) => vec![0.0; p],
    }
}

/// `(Σ X_iᵀ R_i⁻¹ X_i)⁻¹ Σ X_iᵀ R_i⁻¹ y_i`.
pub fn linear_closed_form(clusters: &[Cluster], r_sequence: &[Matrix]) -> Result<Vec<f64>> {
    let p = clusters
        .first()
        .map(Cluster::p)
        .ok_or_else(|| Error::invalid_argument("no clusters"))?;
    if r_sequence.len() < clusters.len() {
        return Err(Error::invalid_argument(format!(
            "{} correlation matrices for {} clusters",
            r_sequence.len(),
            clusters.len()
        )));
    }
    let mut normal = Matrix::zeros(p, p);
    let mut rhs = vec![0.0; p];
    for (c, r) in clusters.iter().zip(r_sequence) {
        let ch = Cholesky::new(r).map_err(|e| match e {
            crate::linalg::LinalgError::NotPositiveDefinite { lambda_min } => {
                Error::WorkingCorrelationNotPd {
                    cluster: c.index,
                    lambda_min,
                }
            }
            other => other.into(),
        })?;
        let w = ch.solve(&c.regressors)?;
        normal = normal.add(&c.regressors.tr_matmul(&w));
        for (a, b) in rhs.iter_mut().zip(w.tr_mul_vec(&c.response)) {
            *a += b;
        }
    }
    let normal = normal.symmetric_part();
    let lambda_min = sym_eigen_extremes(&normal)?.lambda_min;
    if !(lambda_min > 1e-12) {
        return Err(Error::SingularDesign { lambda_min });
    }
    Ok(Cholesky::new(&normal)?.solve_vec(&rhs))
}

/// First grid size from which every later fit converged.
pub fn first_convergence(n_grid: &[usize], converged: &[bool]) -> Option<usize> {
    let mut first = None;
    for (&n, &ok) in n_grid.iter().zip(converged) {
        match (ok, first) {
            (true, None) => first = Some(n),
            (false, _) => first = None,
            _ => {}
        }
    }
    first
}
