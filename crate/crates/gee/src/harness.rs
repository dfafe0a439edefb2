//! Parallel replication runs. Every replication is a pure function of
//! `(config, id)`, and results are collected in id order, so outputs do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;

use gee_core::correlation::TruthTemplate;
use gee_core::diagnostics::{
    aggregate_optimality, condition_trajectories, optimality_replication, quantiles,
    ConditionPoint, ConditionReport, DiagnosticParams, OptimalityTable, Quantiles,
};
use gee_core::simulation::{
    replication_config, run_replication, simulate_scenario, EstimatorSpec, ReplicationResult,
    ScenarioConfig,
};
use gee_core::solver::SolverConfig;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    if jobs == Some(0) {
        return Err(CliError::config("jobs", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::config("jobs", e.to_string()))
}

/// Ordered parallel map over replication ids `0..reps`.
pub fn map_reps<T: Send>(
    reps: usize,
    jobs: Option<usize>,
    f: impl Fn(u64) -> T + Sync + Send,
) -> Result<Vec<T>> {
    let pool = pool(jobs)?;
    Ok(pool.install(|| (0..reps as u64).into_par_iter().map(&f).collect()))
}

pub fn consistency_replications(
    config: &ScenarioConfig,
    reps: usize,
    estimators: &[EstimatorSpec],
    n_grid: &[usize],
    solver: &SolverConfig,
    jobs: Option<usize>,
) -> Result<Vec<ReplicationResult>> {
    config.validate()?;
    solver.validate()?;
    let truth = config.truth_template()?;
    map_reps(reps, jobs, |id| {
        run_replication(config, id, estimators, n_grid, solver, &truth)
    })
}

pub fn optimality(
    config: &ScenarioConfig,
    specs: &[EstimatorSpec],
    perturb: bool,
    reps: usize,
    n_grid: &[usize],
    jobs: Option<usize>,
) -> Result<OptimalityTable> {
    config.validate()?;
    let truth = config.truth_template()?;
    let out = map_reps(reps, jobs, |id| {
        optimality_replication(config, id, specs, n_grid, perturb, &truth)
    })?;
    Ok(aggregate_optimality(specs, n_grid, &out)?)
}

/// Condition report for replication `id` of `config` under `spec`.
pub fn replication_report(
    config: &ScenarioConfig,
    id: u64,
    spec: EstimatorSpec,
    truth: &TruthTemplate,
    params: &DiagnosticParams,
    n_grid: &[usize],
) -> Result<ConditionReport> {
    let n_max = *n_grid.last().ok_or_else(|| CliError::config("n_grid", "empty"))?;
    let rep = ScenarioConfig {
        n: n_max,
        ..replication_config(config, id)
    };
    let data = simulate_scenario(&rep)?;
    let working = spec.working_spec(config.m_max, truth)?;
    Ok(condition_trajectories(
        data.clusters(),
        &config.beta0,
        config.link,
        &working,
        Some(truth),
        params,
        n_grid,
    )?)
}

/// Named scalar quantities of one grid point, for ensemble summaries.
pub fn point_quantities(pt: &ConditionPoint) -> Vec<(String, Option<f64>)> {
    let mut v = vec![
        ("h_prime.lambda_min".to_string(), Some(pt.h_prime.lambda_min)),
        ("h_prime.lambda_max".to_string(), Some(pt.h_prime.lambda_max)),
        ("working.lambda_min".to_string(), Some(pt.working.lambda_min)),
        ("working.lambda_max".to_string(), Some(pt.working.lambda_max)),
        ("gamma".to_string(), pt.gamma),
        ("a".to_string(), pt.a),
        ("a_tilde".to_string(), pt.a_tilde),
        ("gamma_h".to_string(), pt.gamma_h),
        ("s_delta_ratio".to_string(), Some(pt.s_delta_ratio)),
        ("c0".to_string(), pt.c0),
        ("a1_gap".to_string(), pt.a1_gap),
        ("slln_ratio".to_string(), pt.slln_ratio),
        ("v_lambda_min".to_string(), Some(pt.v_lambda_min)),
        ("det_ratio_h".to_string(), pt.det_ratios.map(|d| d.0)),
        ("det_ratio_m".to_string(), pt.det_ratios.map(|d| d.1)),
    ];
    for r in &pt.per_r {
        let tag = |name: &str| format!("r={}.{name}", r.r);
        v.push((tag("k2"), Some(r.k2)));
        v.push((tag("k3"), Some(r.k3)));
        v.push((tag("eta"), Some(r.eta)));
        v.push((tag("pi"), Some(r.pi)));
        v.push((tag("d"), Some(r.d)));
        v.push((tag("c3_prime"), Some(r.c3_prime)));
        v.push((tag("c4"), r.c4));
        v.push((tag("c5"), Some(r.c5)));
        v.push((tag("s_i_min"), Some(r.s_i_min)));
        v.push((tag("s_ii"), r.s_ii));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsemblePoint {
    pub n: usize,
    /// Median and quartiles per quantity over replications; `mean` is kept
    /// for the expectation-type quantities.
    pub quantities: BTreeMap<String, EnsembleStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStat {
    pub summary: Option<Quantiles>,
    pub mean: Option<f64>,
}

/// Per-n summaries over a set of condition reports sharing one grid.
pub fn ensemble_summary(reports: &[ConditionReport]) -> Vec<EnsemblePoint> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .points
        .iter()
        .enumerate()
        .map(|(k, pt)| {
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for rep in reports {
                for (name, v) in point_quantities(&rep.points[k]) {
                    values.entry(name).or_default().extend(v.filter(|x| x.is_finite()));
                }
            }
            let quantities = values
                .into_iter()
                .map(|(name, v)| {
                    let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                    (name, EnsembleStat { summary: quantiles(&v), mean })
                })
                .collect();
            EnsemblePoint { n: pt.n, quantities }
        })
        .collect()
}
