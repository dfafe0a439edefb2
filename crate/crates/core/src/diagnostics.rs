//! Finite-sample trajectories of the large-sample conditions: design growth,
//! eigenvalue bounds, link curvature, correlation sensitivity, the
//! martingale normalization ratio, determinant ratios and working vs true
//! correlation gaps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::correlation::{
    corr_beta_derivative_sequence, working_sequence, working_templates, TruthTemplate,
    WorkingCorrelationSpec,
};
use crate::estimating::{
    a2_schedule, conditional_variance, jacobian, mean_sums, path_optimality, score_increments,
    A2Report, CovarianceSource, EstimatingKind, JacobianMethod, OptimalitySums,
};
use crate::linalg::{
    norm2, numerical_radius, sym_eigen_extremes, sym_sqrt, Cholesky, EigenExtremes, Matrix,
};
use crate::model::{conditional_moments, Cluster, Link};
use crate::simulation::{
    check_grid, replication_config, simulate_scenario, EstimatorSpec, ReplicationResult,
    ScenarioConfig,
};
use crate::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.25;

/// Description of the β-lattice approximating suprema over balls.
pub const LATTICE_DESCRIPTION: &str =
    "centre, 2p axis points at radius r, 2^p sign corners at radius r/sqrt(p)";

/// `λ_min(H)` at or below this is treated as singular.
const SINGULAR_EIGEN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticParams {
    pub delta: f64,
    /// Positive and decreasing.
    pub r_grid: Vec<f64>,
}

impl Default for DiagnosticParams {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            r_grid: vec![0.5, 0.25, 0.1],
        }
    }
}

impl DiagnosticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(Error::config("delta", "must lie in (0, 1/2]"));
        }
        if self.r_grid.is_empty() || self.r_grid.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("r_grid", "entries must be positive"));
        }
        if self.r_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("r_grid", "must be strictly decreasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl From<EigenExtremes> for EigenPair {
    fn from(e: EigenExtremes) -> Self {
        Self {
            lambda_min: e.lambda_min,
            lambda_max: e.lambda_max,
        }
    }
}

/// Quantities that depend on the radius `r` of the ball around `β_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusPoint {
    pub r: f64,
    /// `sup |μ''/μ'|` over the lattice and observations so far.
    pub k2: f64,
    pub k3: f64,
    pub eta: f64,
    pub pi: f64,
    pub d: f64,
    /// `r · d · λ_max(H')^{1/2-δ}`.
    pub c3_prime: f64,
    /// `n · π² · ã · λ_max(H')`; absent while `H'` is singular.
    pub c4: Option<f64>,
    /// `n · π⁴ · d² · λ_max(H')`.
    pub c5: f64,
    /// Lattice minimum of `λ_min` of the symmetric part of `D_n(β)`.
    pub s_i_min: f64,
    /// `λ_max(H')^{-1/2-δ} · max over the lattice of |||D_n(β) - D_n(β_ref)|||`.
    pub s_ii: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPoint {
    pub n: usize,
    /// `H_n' = Σ X_iᵀ A_i X_i`.
    pub h_prime: EigenPair,
    /// Running extremes of `R*_k`, `k ≤ n`.
    pub working: EigenPair,
    /// Running extremes of `R̄_k` and the cluster size bound, when known.
    pub truth: Option<EigenPair>,
    pub m_max_seen: usize,
    pub gamma: Option<f64>,
    pub a: Option<f64>,
    pub a_tilde: Option<f64>,
    /// `γ^{1/2} λ_max(H')^{1-δ}`.
    pub gamma_h: Option<f64>,
    /// `λ_min(H') / λ_max(H')^{1/2+δ}`.
    pub s_delta_ratio: f64,
    /// Running minimum of the ratio from the first nonsingular grid point.
    pub c0: Option<f64>,
    pub a1_gap: Option<f64>,
    pub slln_ratio: Option<f64>,
    pub v_lambda_min: f64,
    /// `(det H*/det M̄, det M*/det M̄)` on this path.
    pub det_ratios: Option<(f64, f64)>,
    pub per_r: Vec<RadiusPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub delta: f64,
    pub r_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub lattice: String,
    pub beta_ref: Vec<f64>,
    /// The martingale variance used `Σ ≈ A` instead of a known truth.
    pub plug_in_variance: bool,
    pub points: Vec<ConditionPoint>,
}

/// Lattice points in the ball of radius `r` around `center`.
pub fn ball_lattice(center: &[f64], r: f64) -> Vec<Vec<f64>> {
    let p = center.len();
    let mut pts = vec![center.to_vec()];
    for k in 0..p {
        for sign in [1.0, -1.0] {
            let mut b = center.to_vec();
            b[k] += sign * r;
            pts.push(b);
        }
    }
    let c = r / (p as f64).sqrt();
    for mask in 0..(1usize << p) {
        let b = center
            .iter()
            .enumerate()
            .map(|(k, v)| if mask >> k & 1 == 1 { v - c } else { v + c })
            .collect();
        pts.push(b);
    }
    pts
}

/// Index in `n_grid` order of the points we need, as a running fold over
/// clusters: calls `emit(k)` after cluster `n_grid[k]` has been absorbed.
fn at_grid(n_grid: &[usize], n: usize, mut emit: impl FnMut(usize)) {
    for (k, &g) in n_grid.iter().enumerate() {
        if g == n {
            emit(k);
        }
    }
}

fn running_max_at_grid(per_cluster: &[f64], n_grid: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; n_grid.len()];
    let mut acc: f64 = 0.0;
    for (i, v) in per_cluster.iter().enumerate() {
        acc = acc.max(*v);
        at_grid(n_grid, i + 1, |k| out[k] = acc);
    }
    out
}

/// `(k2, k3, η)` per cluster, each already maximized over the lattice.
fn link_curvature(
    clusters: &[Cluster],
    lattice: &[Vec<f64>],
    link: Link,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut k2 = Vec::with_capacity(clusters.len());
    let mut k3 = Vec::with_capacity(clusters.len());
    let mut eta = Vec::with_capacity(clusters.len());
    for c in clusters {
        let (mut a2, mut a3, mut e): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for j in 0..c.size() {
            let x = c.regressors.row(j);
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for b in lattice {
                let u: f64 = x.iter().zip(b).map(|(a, b)| a * b).sum();
                let d1 = link.d1(u);
                a2 = a2.max((link.d2(u) / d1).abs());
                a3 = a3.max((link.d3(u) / d1).abs());
                lo = lo.min(d1);
                hi = hi.max(d1);
            }
            e = e.max((hi / lo).sqrt() - 1.0);
        }
        k2.push(a2);
        k3.push(a3);
        eta.push(e);
    }
    (k2, k3, eta)
}

/// Per-cluster `λ_max[(R*)^{1/2} R*(β)⁻¹ (R*)^{1/2}]` maximized over the lattice.
fn pi_per_cluster(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    beta_ref: &[f64],
    lattice: &[Vec<f64>],
    link: Link,
) -> Result<Vec<f64>> {
    if !spec.depends_on_beta() {
        return Ok(vec![1.0; clusters.len()]);
    }
    let base: Vec<Matrix> = working_sequence(spec, clusters, beta_ref, link)?
        .iter()
        .map(sym_sqrt)
        .collect::<core::result::Result<_, _>>()?;
    let mut out = vec![0.0f64; clusters.len()];
    for b in lattice {
        let seq = working_sequence(spec, clusters, b, link)?;
        for (i, (half, r)) in base.iter().zip(&seq).enumerate() {
            let rinv = Cholesky::new(r)?.inverse();
            let m = half.matmul(&rinv).matmul(half).symmetric_part();
            out[i] = out[i].max(sym_eigen_extremes(&m)?.lambda_max);
        }
    }
    Ok(out)
}

/// Per-cluster `max |λ_j(∂R*_{i-1}(β)/∂β_l)|` over the lattice and `l`.
fn d_per_cluster(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    lattice: &[Vec<f64>],
    link: Link,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; clusters.len()];
    if !spec.depends_on_beta() {
        return Ok(out);
    }
    for b in lattice {
        for l in 0..b.len() {
            let ds = corr_beta_derivative_sequence(spec, clusters, b, link, l, None)?;
            for (i, d) in ds.iter().enumerate() {
                out[i] = out[i].max(numerical_radius(d)?);
            }
        }
    }
    Ok(out)
}

/// Trajectories of every condition quantity on one path.
#[allow(clippy::too_many_arguments)]
pub fn condition_trajectories(
    clusters: &[Cluster],
    beta_ref: &[f64],
    link: Link,
    spec: &WorkingCorrelationSpec,
    truth: Option<&TruthTemplate>,
    params: &DiagnosticParams,
    n_grid: &[usize],
) -> Result<ConditionReport> {
    params.validate()?;
    check_grid(n_grid)?;
    let n_max = *n_grid.last().expect("checked non-empty");
    if n_max > clusters.len() {
        return Err(Error::invalid_argument(format!(
            "grid reaches {n_max} but only {} clusters are available",
            clusters.len()
        )));
    }
    let clusters = &clusters[..n_max];
    let p = beta_ref.len();
    let delta = params.delta;

    // design, working and true correlation, A₁ gap
    let templates = working_templates(spec, clusters, beta_ref, link)?;
    let mut h = Matrix::zeros(p, p);
    let mut design_pts = Vec::with_capacity(n_grid.len());
    let mut w_ext = EigenPair {
        lambda_min: f64::INFINITY,
        lambda_max: 0.0,
    };
    let mut t_ext = w_ext;
    let mut m_seen = 0;
    for (i, c) in clusters.iter().enumerate() {
        let mom = conditional_moments(c, beta_ref, link)?;
        h = h.add(
            &c.regressors
                .tr_matmul(&c.regressors.scale_rows(&mom.variance)),
        );
        let e = sym_eigen_extremes(&templates[i + 1])?;
        w_ext.lambda_min = w_ext.lambda_min.min(e.lambda_min);
        w_ext.lambda_max = w_ext.lambda_max.max(e.lambda_max);
        m_seen = m_seen.max(c.size());
        let gap = match truth {
            Some(t) => {
                let rbar = t.for_size(c.size());
                let e = sym_eigen_extremes(&rbar)?;
                t_ext.lambda_min = t_ext.lambda_min.min(e.lambda_min);
                t_ext.lambda_max = t_ext.lambda_max.max(e.lambda_max);
                Some(rbar.sub(&templates[i].principal(c.size())).max_abs())
            }
            None => None,
        };
        at_grid(n_grid, i + 1, |_| {
            design_pts.push((h.clone(), w_ext, t_ext, m_seen, gap))
        });
    }

    // martingale normalization
    let kind = EstimatingKind::GeeStar(spec.clone());
    let source = match truth {
        Some(t) => CovarianceSource::Truth(t),
        None => CovarianceSource::PlugIn,
    };
    let slln = slln_path(&kind, clusters, beta_ref, link, source, delta, n_grid)?;

    // per-path optimality ratios
    let det: Vec<Option<(f64, f64)>> = match truth {
        Some(t) => {
            let path = path_optimality(clusters, beta_ref, link, spec, t)?;
            n_grid
                .iter()
                .map(|&n| path.at(n).det_ratios().ok())
                .collect()
        }
        None => vec![None; n_grid.len()],
    };

    // radius-dependent quantities
    let method = if crate::estimating::analytic_available(&kind, link) {
        JacobianMethod::Analytic
    } else {
        JacobianMethod::FiniteDifference
    };
    let d_ref: Vec<Matrix> = n_grid
        .iter()
        .map(|&n| jacobian(&kind, &clusters[..n], beta_ref, link, method))
        .collect::<Result<_>>()?;
    let mut per_r_tables = Vec::with_capacity(params.r_grid.len());
    for &r in &params.r_grid {
        let lattice = ball_lattice(beta_ref, r);
        let (k2, k3, eta) = link_curvature(clusters, &lattice, link);
        let pi = pi_per_cluster(spec, clusters, beta_ref, &lattice, link)?;
        let d = d_per_cluster(spec, clusters, &lattice, link)?;
        let mut s_i = vec![f64::INFINITY; n_grid.len()];
        let mut s_ii = vec![0.0f64; n_grid.len()];
        for b in &lattice {
            for (k, &n) in n_grid.iter().enumerate() {
                let dn = jacobian(&kind, &clusters[..n], b, link, method)?;
                s_i[k] = s_i[k].min(sym_eigen_extremes(&dn.symmetric_part())?.lambda_min);
                s_ii[k] = s_ii[k].max(numerical_radius(&dn.sub(&d_ref[k]))?);
            }
        }
        per_r_tables.push((
            r,
            running_max_at_grid(&k2, n_grid),
            running_max_at_grid(&k3, n_grid),
            running_max_at_grid(&eta, n_grid),
            running_max_at_grid(&pi, n_grid),
            running_max_at_grid(&d, n_grid),
            s_i,
            s_ii,
        ));
    }

    let mut points = Vec::with_capacity(n_grid.len());
    let mut c0: Option<f64> = None;
    for (k, &n) in n_grid.iter().enumerate() {
        let (hn, w, t, m_seen, gap) = &design_pts[k];
        let e = sym_eigen_extremes(hn)?;
        let lmax = e.lambda_max;
        let nonsingular = e.lambda_min > SINGULAR_EIGEN * lmax.max(1.0);
        let gamma = if nonsingular {
            let ch = Cholesky::new(hn)?;
            let mut g: f64 = 0.0;
            for c in &clusters[..n] {
                for j in 0..c.size() {
                    let x = c.regressors.row(j);
                    let sol = ch.solve_vec(x);
                    g = g.max(x.iter().zip(&sol).map(|(a, b)| a * b).sum());
                }
            }
            Some(g)
        } else {
            None
        };
        let a = gamma.map(|g| g * lmax);
        let a_tilde = a.map(|a| a.max(a * a));
        let ratio = e.lambda_min / lmax.powf(0.5 + delta);
        if nonsingular {
            c0 = Some(c0.map_or(ratio, |c: f64| c.min(ratio)));
        }
        let per_r = per_r_tables
            .iter()
            .map(|(r, k2, k3, eta, pi, d, s_i, s_ii)| RadiusPoint {
                r: *r,
                k2: k2[k],
                k3: k3[k],
                eta: eta[k],
                pi: pi[k],
                d: d[k],
                c3_prime: r * d[k] * lmax.powf(0.5 - delta),
                c4: a_tilde.map(|at| n as f64 * pi[k] * pi[k] * at * lmax),
                c5: n as f64 * pi[k].powi(4) * d[k] * d[k] * lmax,
                s_i_min: s_i[k],
                s_ii: (lmax > 0.0).then(|| s_ii[k] / lmax.powf(0.5 + delta)),
            })
            .collect();
        points.push(ConditionPoint {
            n,
            h_prime: e.into(),
            working: *w,
            truth: truth.map(|_| *t),
            m_max_seen: *m_seen,
            gamma,
            a,
            a_tilde,
            gamma_h: gamma.map(|g| g.sqrt() * lmax.powf(1.0 - delta)),
            s_delta_ratio: ratio,
            c0: if nonsingular { c0 } else { None },
            a1_gap: *gap,
            slln_ratio: slln.ratio[k],
            v_lambda_min: slln.lambda_min[k],
            det_ratios: det[k],
            per_r,
        });
    }
    Ok(ConditionReport {
        delta,
        r_grid: params.r_grid.clone(),
        n_grid: n_grid.to_vec(),
        lattice: LATTICE_DESCRIPTION.to_string(),
        beta_ref: beta_ref.to_vec(),
        plug_in_variance: truth.is_none(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SllnTrajectory {
    /// `‖q_n‖ / λ_max(V_n)^{1/2+δ}`; absent where `λ_max(V_n) = 0`.
    pub ratio: Vec<Option<f64>>,
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
}

/// Normalized martingale ratios for a given `(q_n, V_n)` trace.
pub fn slln_monitor(trace: &[(Vec<f64>, Matrix)], delta: f64) -> Result<SllnTrajectory> {
    if !(delta > 0.0) {
        return Err(Error::config("delta", "must be positive"));
    }
    let mut out = SllnTrajectory {
        ratio: Vec::with_capacity(trace.len()),
        lambda_min: Vec::with_capacity(trace.len()),
        lambda_max: Vec::with_capacity(trace.len()),
    };
    for (q, v) in trace {
        let e = sym_eigen_extremes(v)?;
        out.ratio
            .push((e.lambda_max > 0.0).then(|| norm2(q) / e.lambda_max.powf(0.5 + delta)));
        out.lambda_min.push(e.lambda_min);
        out.lambda_max.push(e.lambda_max);
    }
    Ok(out)
}

/// `(q_n, V_n)` at each grid size for one path, then [`slln_monitor`].
pub fn slln_path(
    kind: &EstimatingKind,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    source: CovarianceSource<'_>,
    delta: f64,
    n_grid: &[usize],
) -> Result<SllnTrajectory> {
    check_grid(n_grid)?;
    let n_max = *n_grid.last().expect("checked non-empty");
    let clusters = &clusters[..n_max.min(clusters.len())];
    let scores = score_increments(kind, clusters, beta, link)?;
    let cv = conditional_variance(kind, clusters, beta, link, source)?;
    let p = beta.len();
    let mut q = vec![0.0; p];
    let mut v = Matrix::zeros(p, p);
    let mut trace = Vec::with_capacity(n_grid.len());
    for (i, (s, inc)) in scores.iter().zip(&cv.increments).enumerate() {
        for (a, b) in q.iter_mut().zip(s) {
            *a += b;
        }
        v = v.add(inc);
        at_grid(n_grid, i + 1, |_| trace.push((q.clone(), v.clone())));
    }
    if trace.len() != n_grid.len() {
        return Err(Error::invalid_argument(
            "grid exceeds the number of clusters",
        ));
    }
    slln_monitor(&trace, delta)
}

/// Max-entry gap between `R*_{n-1}` (truncated) and `R̄_n`, per entry.
pub fn a1_gap(working: &[Matrix], truth: &[Matrix]) -> Result<Vec<f64>> {
    if working.len() != truth.len() {
        return Err(Error::invalid_argument("trajectories differ in length"));
    }
    working
        .iter()
        .zip(truth)
        .map(|(w, t)| {
            let m = t.rows();
            if w.rows() < m {
                return Err(Error::invalid_argument(
                    "working template smaller than the true correlation",
                ));
            }
            Ok(w.principal(m).sub(t).max_abs())
        })
        .collect()
}

/// `A₁` gap at each grid size for one path.
pub fn a1_gap_path(
    spec: &WorkingCorrelationSpec,
    clusters: &[Cluster],
    beta: &[f64],
    link: Link,
    truth: &TruthTemplate,
    n_grid: &[usize],
) -> Result<Vec<f64>> {
    check_grid(n_grid)?;
    let n_max = *n_grid.last().expect("checked non-empty");
    if n_max > clusters.len() {
        return Err(Error::invalid_argument(
            "grid exceeds the number of clusters",
        ));
    }
    let templates = working_templates(spec, &clusters[..n_max - 1], beta, link)?;
    let working: Vec<Matrix> = n_grid.iter().map(|&n| templates[n - 1].clone()).collect();
    let rbar: Vec<Matrix> = n_grid
        .iter()
        .map(|&n| truth.for_size(clusters[n - 1].size()))
        .collect();
    a1_gap(&working, &rbar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Finite values used.
    pub count: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Median and quartiles of the finite entries; `None` if there are none.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(Quantiles {
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
        count: v.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub estimator: EstimatorSpec,
    pub n: usize,
    /// Quantiles of `‖β̂ - β₀‖` over converged fits.
    pub error: Option<Quantiles>,
    pub converged_fraction: f64,
    pub failures: usize,
}

pub fn consistency_table(
    results: &[ReplicationResult],
    estimators: &[EstimatorSpec],
    n_grid: &[usize],
) -> Vec<ConsistencyRow> {
    let mut rows = Vec::new();
    for est in estimators {
        for (k, &n) in n_grid.iter().enumerate() {
            let fits: Vec<_> = results
                .iter()
                .filter_map(|r| {
                    r.fits
                        .iter()
                        .find(|f| f.estimator == *est)
                        .and_then(|f| f.per_n.get(k))
                })
                .collect();
            let errors: Vec<f64> = fits
                .iter()
                .filter(|f| f.converged)
                .map(|f| f.error)
                .collect();
            let converged = fits.iter().filter(|f| f.converged).count();
            let total = results.len().max(1);
            rows.push(ConsistencyRow {
                estimator: *est,
                n,
                error: quantiles(&errors),
                converged_fraction: converged as f64 / total as f64,
                failures: total - converged,
            });
        }
    }
    rows
}

/// Sums for one estimator on one path at every grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecSums {
    pub plain: Vec<OptimalitySums>,
    pub perturbed: Option<Vec<OptimalitySums>>,
    pub a2: Option<A2Report>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReplication {
    pub id: u64,
    pub per_spec: Vec<SpecSums>,
    pub failure: Option<String>,
}

/// Seed offset for the perturbation draws of a replication.
const PERTURBATION_SALT: u64 = 0xa2a2_a2a2_a2a2_a2a2;

/// Simulates replication `id` and accumulates the information sums of every
/// estimator at `β₀`.
pub fn optimality_replication(
    config: &ScenarioConfig,
    id: u64,
    specs: &[EstimatorSpec],
    n_grid: &[usize],
    perturb: bool,
    truth: &TruthTemplate,
) -> OptimalityReplication {
    let run = || -> Result<Vec<SpecSums>> {
        let n_max = *n_grid
            .last()
            .ok_or_else(|| Error::config("n_grid", "empty"))?;
        let rep = ScenarioConfig {
            n: n_max,
            ..replication_config(config, id)
        };
        let data = simulate_scenario(&rep)?;
        let cl = data.clusters();
        let beta = &config.beta0;
        specs
            .iter()
            .map(|s| {
                let spec = s.working_spec(config.m_max, truth)?;
                let path = path_optimality(cl, beta, config.link, &spec, truth)?;
                let plain = n_grid.iter().map(|&n| path.at(n).clone()).collect();
                let (perturbed, a2) = if perturb {
                    let (pert, report) =
                        a2_schedule(cl, beta, config.link, &spec, rep.seed ^ PERTURBATION_SALT)?;
                    let pc = pert.apply(cl)?;
                    let ppath = path_optimality(&pc, beta, config.link, &spec, truth)?;
                    (
                        Some(n_grid.iter().map(|&n| ppath.at(n).clone()).collect()),
                        Some(report),
                    )
                } else {
                    (None, None)
                };
                Ok(SpecSums {
                    plain,
                    perturbed,
                    a2,
                })
            })
            .collect()
    };
    match run() {
        Ok(per_spec) => OptimalityReplication {
            id,
            per_spec,
            failure: None,
        },
        Err(e) => OptimalityReplication {
            id,
            per_spec: Vec::new(),
            failure: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityRow {
    pub estimator: EstimatorSpec,
    pub n: usize,
    /// `det Ĥ* / det M̂̄` from ensemble means.
    pub ratio_h: Option<f64>,
    /// `det M̂* / det M̂̄`.
    pub ratio_m: Option<f64>,
    pub ratio_h_perturbed: Option<f64>,
    pub ratio_m_perturbed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityTable {
    pub rows: Vec<OptimalityRow>,
    pub replications: usize,
    pub failures: Vec<(u64, String)>,
    /// Total `A₂` violations over replications, per estimator.
    pub a2_r_violations: Vec<usize>,
    pub a2_y_violations: Vec<usize>,
}

impl OptimalityTable {
    pub fn row(&self, estimator: EstimatorSpec, n: usize) -> Option<&OptimalityRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.n == n)
    }
}

/// Ensemble means and their determinant ratios, in replication-id order.
pub fn aggregate_optimality(
    specs: &[EstimatorSpec],
    n_grid: &[usize],
    reps: &[OptimalityReplication],
) -> Result<OptimalityTable> {
    let ok: Vec<&OptimalityReplication> = reps.iter().filter(|r| r.failure.is_none()).collect();
    if ok.is_empty() {
        return Err(Error::InvalidData("every replication failed".into()));
    }
    let mut rows = Vec::new();
    let mut a2_r = vec![0; specs.len()];
    let mut a2_y = vec![0; specs.len()];
    for (s, est) in specs.iter().enumerate() {
        for r in &ok {
            if let Some(a2) = &r.per_spec[s].a2 {
                a2_r[s] += a2.r_violations;
                a2_y[s] += a2.y_violations;
            }
        }
        for (k, &n) in n_grid.iter().enumerate() {
            let plain = mean_sums(ok.iter().map(|r| r.per_spec[s].plain[k].clone()))?;
            let pert = if ok[0].per_spec[s].perturbed.is_some() {
                Some(mean_sums(ok.iter().map(|r| {
                    r.per_spec[s]
                        .perturbed
                        .as_ref()
                        .expect("uniform across replications")[k]
                        .clone()
                }))?)
            } else {
                None
            };
            let (h, m) = plain
                .det_ratios()
                .map_or((None, None), |(a, b)| (Some(a), Some(b)));
            let (hp, mp) = pert
                .and_then(|p| p.det_ratios().ok())
                .map_or((None, None), |(a, b)| (Some(a), Some(b)));
            rows.push(OptimalityRow {
                estimator: *est,
                n,
                ratio_h: h,
                ratio_m: m,
                ratio_h_perturbed: hp,
                ratio_m_perturbed: mp,
            });
        }
    }
    Ok(OptimalityTable {
        rows,
        replications: reps.len(),
        failures: reps
            .iter()
            .filter_map(|r| r.failure.clone().map(|f| (r.id, f)))
            .collect(),
        a2_r_violations: a2_r,
        a2_y_violations: a2_y,
    })
}

/// Sequential optimality study over replications `0..reps`.
pub fn optimality_study(
    config: &ScenarioConfig,
    specs: &[EstimatorSpec],
    perturb: bool,
    reps: usize,
    n_grid: &[usize],
) -> Result<OptimalityTable> {
    config.validate()?;
    check_grid(n_grid)?;
    if reps == 0 {
        return Err(Error::config("reps", "must be at least 1"));
    }
    let truth = config.truth_template()?;
    let out: Vec<_> = (0..reps as u64)
        .map(|id| optimality_replication(config, id, specs, n_grid, perturb, &truth))
        .collect();
    aggregate_optimality(specs, n_grid, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::exchangeable_matrix;
    use crate::simulation::{RegressorProcess, ResponseFamily, SizeSchedule, TruthCorrelation};

    fn scalar_ones(n: usize, y: impl Fn(usize) -> f64) -> Vec<Cluster> {
        (1..=n)
            .map(|i| Cluster::new(i, vec![y(i)], Matrix::from_rows(&[&[1.0]])).unwrap())
            .collect()
    }

    #[test]
    fn lattice_shape() {
        let pts = ball_lattice(&[0.0, 0.0, 0.0], 0.3);
        assert_eq!(pts.len(), 2 * 3 + 8 + 1);
        for b in &pts {
            assert!(norm2(b) <= 0.3 + 1e-15);
        }
    }

    #[test]
    fn identity_link_has_no_curvature() {
        let cl = scalar_ones(20, |i| i as f64 * 0.1);
        let spec = WorkingCorrelationSpec::identity(1);
        let rep = condition_trajectories(
            &cl,
            &[0.0],
            Link::Identity,
            &spec,
            None,
            &DiagnosticParams::default(),
            &[5, 10, 20],
        )
        .unwrap();
        for pt in &rep.points {
            for r in &pt.per_r {
                assert_eq!(r.k2, 0.0);
                assert_eq!(r.k3, 0.0);
                assert_eq!(r.eta, 0.0);
            }
        }
    }

    #[test]
    fn scalar_ones_design() {
        let cl = scalar_ones(64, |_| 0.0);
        let spec = WorkingCorrelationSpec::identity(1);
        let grid = [1, 2, 4, 16, 64];
        let rep = condition_trajectories(
            &cl,
            &[0.0],
            Link::Identity,
            &spec,
            None,
            &DiagnosticParams::default(),
            &grid,
        )
        .unwrap();
        for pt in &rep.points {
            let n = pt.n as f64;
            assert!((pt.h_prime.lambda_max - n).abs() < 1e-12);
            assert!((pt.gamma.unwrap() - 1.0 / n).abs() < 1e-12);
            assert!((pt.a.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(pt.slln_ratio, Some(0.0));
        }
    }

    #[test]
    fn orthonormal_design_ratio() {
        // each cluster is the identity design, so H_n' = n I
        let cl: Vec<Cluster> = (1..=50)
            .map(|i| Cluster::new(i, vec![0.0, 0.0], Matrix::identity(2)).unwrap())
            .collect();
        let spec = WorkingCorrelationSpec::identity(2);
        let grid = [1, 10, 50];
        let rep = condition_trajectories(
            &cl,
            &[0.0, 0.0],
            Link::Identity,
            &spec,
            None,
            &DiagnosticParams::default(),
            &grid,
        )
        .unwrap();
        for pt in &rep.points {
            let n = pt.n as f64;
            assert!((pt.s_delta_ratio - n.powf(0.25)).abs() < 1e-12 * n);
        }
        assert_eq!(rep.points[0].c0, Some(1.0));
    }

    #[test]
    fn singular_design_marks_gamma() {
        let cl: Vec<Cluster> = (1..=3)
            .map(|i| Cluster::new(i, vec![0.0], Matrix::from_rows(&[&[1.0, 0.0]])).unwrap())
            .collect();
        let rep = condition_trajectories(
            &cl,
            &[0.0, 0.0],
            Link::Identity,
            &WorkingCorrelationSpec::identity(1),
            None,
            &DiagnosticParams::default(),
            &[3],
        )
        .unwrap();
        assert_eq!(rep.points[0].gamma, None);
        assert_eq!(rep.points[0].c0, None);
    }

    #[test]
    fn params_validation() {
        let bad = DiagnosticParams {
            delta: 0.6,
            ..DiagnosticParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = DiagnosticParams {
            r_grid: vec![0.1, 0.5],
            ..DiagnosticParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn slln_scalar_substitution() {
        let eps = [0.3, -1.2, 0.7, 2.0];
        let cl = scalar_ones(4, |i| eps[i - 1]);
        let t = slln_path(
            &EstimatingKind::Independence,
            &cl,
            &[0.0],
            Link::Identity,
            CovarianceSource::PlugIn,
            0.25,
            &[1, 2, 3, 4],
        )
        .unwrap();
        let mut s = 0.0;
        for (k, e) in eps.iter().enumerate() {
            s += e;
            let n = (k + 1) as f64;
            assert!((t.ratio[k].unwrap() - s.abs() / n.powf(0.75)).abs() < 1e-14);
            assert_eq!(t.lambda_min[k], n);
        }
    }

    #[test]
    fn slln_undefined_when_variance_zero() {
        let t = slln_monitor(&[(vec![0.0], Matrix::zeros(1, 1))], 0.25).unwrap();
        assert_eq!(t.ratio, vec![None]);
    }

    #[test]
    fn a1_gap_cases() {
        let cl: Vec<Cluster> = (1..=30)
            .map(|i| Cluster::new(i, vec![i as f64 * 0.01, 0.3], Matrix::identity(2)).unwrap())
            .collect();
        let r = exchangeable_matrix(0.4, 2);
        let truth = TruthTemplate::new(r.clone()).unwrap();
        let fixed = WorkingCorrelationSpec::fixed(r).unwrap();
        let g = a1_gap_path(
            &fixed,
            &cl,
            &[0.0, 0.0],
            Link::Identity,
            &truth,
            &[1, 10, 30],
        )
        .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let ind = WorkingCorrelationSpec::identity(2);
        let g = a1_gap_path(&ind, &cl, &[0.0, 0.0], Link::Identity, &truth, &[1, 10, 30]).unwrap();
        assert!(g.iter().all(|v| (*v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn quantile_helper() {
        let q = quantiles(&[4.0, 1.0, 3.0, 2.0, f64::NAN]).unwrap();
        assert_eq!(q.median, 2.5);
        assert_eq!(q.q1, 1.75);
        assert_eq!(q.q3, 3.25);
        assert_eq!(q.count, 4);
        assert!(quantiles(&[]).is_none());
    }

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            link: Link::Log,
            beta0: vec![0.2, 0.3],
            n: 60,
            sizes: SizeSchedule::Constant { m: 3 },
            m_max: 3,
            regressors: RegressorProcess::Iid { mean: 0.0, sd: 0.5 },
            truth: TruthCorrelation::Exchangeable { rho: 0.4 },
            family: ResponseFamily::GaussianLinkMoments,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn truth_spec_ratios_are_one() {
        let table = optimality_study(
            &small_config(),
            &[EstimatorSpec::Truth],
            false,
            4,
            &[10, 30, 60],
        )
        .unwrap();
        for row in &table.rows {
            assert!((row.ratio_h.unwrap() - 1.0).abs() < 1e-10);
            assert!((row.ratio_m.unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn full_report_on_pseudo_path() {
        let cfg = small_config();
        let data = simulate_scenario(&cfg).unwrap();
        let truth = cfg.truth_template().unwrap();
        let spec = WorkingCorrelationSpec::pseudo_likelihood(3);
        let params = DiagnosticParams {
            r_grid: vec![0.2, 0.1],
            ..DiagnosticParams::default()
        };
        let grid = [10, 30, 60];
        let rep = condition_trajectories(
            data.clusters(),
            &cfg.beta0,
            cfg.link,
            &spec,
            Some(&truth),
            &params,
            &grid,
        )
        .unwrap();
        let mut prev_min = 0.0;
        for pt in &rep.points {
            assert!(pt.h_prime.lambda_min <= pt.h_prime.lambda_max);
            assert!(pt.h_prime.lambda_min >= prev_min - 1e-9);
            prev_min = pt.h_prime.lambda_min;
            let t = pt.truth.unwrap();
            assert!(t.lambda_max <= pt.m_max_seen as f64);
            assert!(pt.working.lambda_min > 0.0);
            for r in &pt.per_r {
                // log link: μ''/μ' = μ'''/μ' = 1
                assert!((r.k2 - 1.0).abs() < 1e-12 && (r.k3 - 1.0).abs() < 1e-12);
                assert!(r.pi >= 1.0 - 1e-9);
                assert!(r.d > 0.0);
                assert!(r.eta > 0.0);
            }
            assert!(pt.det_ratios.is_some());
        }
        // deterministic
        let again = condition_trajectories(
            data.clusters(),
            &cfg.beta0,
            cfg.link,
            &spec,
            Some(&truth),
            &params,
            &grid,
        )
        .unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn working_extremes_for_static_specs() {
        let cfg = small_config();
        let data = simulate_scenario(&cfg).unwrap();
        let spec = WorkingCorrelationSpec::exchangeable(0.5, 3).unwrap();
        let rep = condition_trajectories(
            data.clusters(),
            &cfg.beta0,
            cfg.link,
            &spec,
            None,
            &DiagnosticParams::default(),
            &[20],
        )
        .unwrap();
        let w = rep.points[0].working;
        assert!((w.lambda_min - 0.5).abs() < 1e-12 && (w.lambda_max - 2.0).abs() < 1e-12);
        assert!(rep.plug_in_variance);
    }

    #[test]
    fn consistency_rows() {
        let cfg = ScenarioConfig {
            link: Link::Identity,
            ..small_config()
        };
        let est = [EstimatorSpec::Independence];
        let res = crate::simulation::run_replications(
            &cfg,
            5,
            &est,
            &[20, 60],
            &crate::solver::SolverConfig::default(),
        )
        .unwrap();
        let rows = consistency_table(&res, &est, &[20, 60]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].converged_fraction, 1.0);
        assert_eq!(rows[1].error.unwrap().count, 5);
    }
}
