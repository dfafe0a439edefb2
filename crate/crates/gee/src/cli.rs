//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure (nothing converged), 1 output could not be written.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gee_core::correlation::TruthTemplate;
use gee_core::diagnostics::{condition_trajectories, consistency_table, ConditionReport};
use gee_core::linalg::Matrix;
use gee_core::model::{Dataset, Link};
use gee_core::simulation::{dataset_digest, simulate_scenario, EstimatorSpec, ReplicationResult};
use gee_core::solver::{fit_gee, GeeFit};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::harness;
use crate::io::{self, format_value, DatasetMeta};
use crate::run::{validate_grid, Provenance, RunFile};

#[derive(Debug, Parser)]
#[command(name = "gee", version, about = "Generalized estimating equations with stochastic regressors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    /// Scenario file (TOML); defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Base seed; replication k uses a seed derived from it and k
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "gee-out")]
    pub out: PathBuf,
    /// Comma-separated, nondecreasing sample sizes.
    #[arg(long = "n-grid", global = true, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Monte Carlo replications
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Estimator name; repeat for several.
    #[arg(long = "estimator", global = true)]
    pub estimators: Vec<EstimatorSpec>,
    /// Exponent slack in the condition normalizations, in (0, 1/2]
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Dataset CSV for `fit` and `diagnose`; its metadata sits next to it
    /// with a `.json` extension.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Print the fully resolved default scenario file and exit.
    #[arg(long, global = true)]
    pub print_defaults: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate one dataset from the scenario.
    Simulate,
    /// Fit each estimator to a dataset.
    Fit,
    /// Condition trajectories along the n-grid.
    Diagnose,
    /// Monte Carlo error of the estimators across the n-grid.
    StudyConsistency,
    /// Information determinant ratios against the quasi-score.
    StudyOptimality,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Diagnose => "diagnose",
            Command::StudyConsistency => "study-consistency",
            Command::StudyOptimality => "study-optimality",
        }
    }
}

/// Scenario file plus command-line overrides, validated.
pub fn resolve(cli: &Cli) -> Result<RunFile> {
    let mut run = match &cli.scenario {
        Some(path) => RunFile::load(path)?,
        None => RunFile::default(),
    };
    if let Some(seed) = cli.seed {
        run.scenario.seed = seed;
    }
    if let Some(grid) = &cli.n_grid {
        validate_grid(grid)?;
        run.study.n_grid = grid.clone();
    }
    if let Some(reps) = cli.reps {
        run.study.reps = reps;
    }
    if !cli.estimators.is_empty() {
        run.estimators = cli.estimators.clone();
    }
    if let Some(delta) = cli.delta {
        run.diagnostics.delta = delta;
    }
    run.validate()?;
    Ok(run)
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", RunFile::defaults_document());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| CliError::config("command", "expected one of simulate, fit, diagnose, study-consistency, study-optimality"))?;
    let config = resolve(cli)?;
    let prov = Provenance::new(command.name(), &config);
    for w in &prov.warnings {
        eprintln!("warning: {w}");
    }
    match command {
        Command::Simulate => simulate(cli, &config, &prov),
        Command::Fit => fit(cli, &config, &prov),
        Command::Diagnose => diagnose(cli, &config, &prov),
        Command::StudyConsistency => study_consistency(cli, &config, &prov),
        Command::StudyOptimality => study_optimality(cli, &config, &prov),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    io::write_file(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_value)
}

fn write_table(path: &Path, prov: &Provenance, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::new();
    for c in prov.comment_lines() {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    io::write_file(path, out.as_bytes())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    meta: DatasetMeta,
    digest: String,
    provenance: &'a Provenance,
}

fn simulate(cli: &Cli, config: &RunFile, prov: &Provenance) -> Result<()> {
    let data = simulate_scenario(&config.scenario)?;
    let csv = cli.out.join("dataset.csv");
    io::write_dataset(&csv, &data, &prov.comment_lines())?;
    let sidecar = Sidecar {
        meta: DatasetMeta {
            n: data.n(),
            p: data.p(),
            m_max: data.m_max(),
            link: config.scenario.link,
            beta0: Some(config.scenario.beta0.clone()),
        },
        digest: dataset_digest(&data),
        provenance: prov,
    };
    write_json(&io::meta_path(&csv), &sidecar)
}

/// Input dataset: the `--data` file, or a fresh simulation of the scenario.
struct Input {
    source: String,
    data: Dataset,
    link: Link,
    beta0: Option<Vec<f64>>,
    truth: Option<TruthTemplate>,
}

fn load_input(cli: &Cli, config: &RunFile) -> Result<Input> {
    match &cli.data {
        Some(path) => {
            let meta = io::read_meta(&io::meta_path(path))?;
            let data = io::read_dataset(path, &meta)?;
            Ok(Input {
                source: path.display().to_string(),
                data,
                link: meta.link,
                beta0: meta.beta0,
                truth: None,
            })
        }
        None => Ok(Input {
            source: "simulated".into(),
            data: simulate_scenario(&config.scenario)?,
            link: config.scenario.link,
            beta0: Some(config.scenario.beta0.clone()),
            truth: Some(config.scenario.truth_template()?),
        }),
    }
}

fn truth_or_placeholder(input: &Input, estimators: &[EstimatorSpec]) -> Result<TruthTemplate> {
    match &input.truth {
        Some(t) => Ok(t.clone()),
        None => {
            if let Some(e) = estimators
                .iter()
                .find(|e| matches!(e, EstimatorSpec::Truth | EstimatorSpec::QuasiScore))
            {
                return Err(CliError::config(
                    "estimator",
                    format!("`{e}` needs the true correlation, which a data file does not provide"),
                ));
            }
            Ok(TruthTemplate::new(Matrix::identity(input.data.m_max()))?)
        }
    }
}

#[derive(Serialize)]
struct DatasetInfo {
    source: String,
    digest: String,
    n: usize,
    p: usize,
    m_max: usize,
    link: Link,
}

impl DatasetInfo {
    fn of(input: &Input) -> Self {
        Self {
            source: input.source.clone(),
            digest: dataset_digest(&input.data),
            n: input.data.n(),
            p: input.data.p(),
            m_max: input.data.m_max(),
            link: input.link,
        }
    }
}

#[derive(Serialize)]
struct FitEntry {
    estimator: EstimatorSpec,
    #[serde(flatten)]
    fit: Option<GeeFit>,
    error: Option<String>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    provenance: &'a Provenance,
    dataset: DatasetInfo,
    fits: Vec<FitEntry>,
}

fn fit(cli: &Cli, config: &RunFile, prov: &Provenance) -> Result<()> {
    let input = load_input(cli, config)?;
    let truth = truth_or_placeholder(&input, &config.estimators)?;
    let mut fits = Vec::new();
    for est in &config.estimators {
        let kind = est.kind(input.data.m_max(), &truth)?;
        let entry = match fit_gee(input.data.clusters(), &kind, input.link, &config.solver, None) {
            Ok(f) => FitEntry { estimator: *est, fit: Some(f), error: None },
            Err(e) => FitEntry { estimator: *est, fit: None, error: Some(e.to_string()) },
        };
        fits.push(entry);
    }
    let any_converged = fits.iter().any(|f| f.fit.as_ref().is_some_and(|g| g.converged));
    let report = FitReport {
        provenance: prov,
        dataset: DatasetInfo::of(&input),
        fits,
    };
    write_json(&cli.out.join("fit.json"), &report)?;
    if !any_converged {
        return Err(CliError::Numerical("no estimator converged".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseEntry {
    estimator: EstimatorSpec,
    /// Trajectories on the first path.
    trajectories: Option<ConditionReport>,
    ensemble: Vec<harness::EnsemblePoint>,
    replications: usize,
    failures: Vec<(u64, String)>,
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    provenance: &'a Provenance,
    scenario_digest: String,
    n_grid: Vec<usize>,
    lattice: &'static str,
    reports: Vec<DiagnoseEntry>,
}

fn diagnose(cli: &Cli, config: &RunFile, prov: &Provenance) -> Result<()> {
    let grid = config.study.n_grid.clone();
    let params = &config.diagnostics;
    let mut reports = Vec::new();
    let scenario_digest;
    if cli.data.is_some() {
        let input = load_input(cli, config)?;
        let beta_ref = input
            .beta0
            .clone()
            .ok_or_else(|| CliError::config("beta0", "the dataset metadata must provide beta0 as the reference point"))?;
        if *grid.last().expect("validated") > input.data.n() {
            return Err(CliError::config("n_grid", format!("exceeds the {} clusters in the dataset", input.data.n())));
        }
        let truth = truth_or_placeholder(&input, &config.estimators)?;
        scenario_digest = dataset_digest(&input.data);
        for est in &config.estimators {
            let spec = est.working_spec(input.data.m_max(), &truth)?;
            let (traj, failures) = match condition_trajectories(
                input.data.clusters(),
                &beta_ref,
                input.link,
                &spec,
                None,
                params,
                &grid,
            ) {
                Ok(r) => (Some(r), Vec::new()),
                Err(e) => (None, vec![(0, e.to_string())]),
            };
            let ensemble = traj.iter().cloned().collect::<Vec<_>>();
            reports.push(DiagnoseEntry {
                estimator: *est,
                ensemble: harness::ensemble_summary(&ensemble),
                trajectories: traj,
                replications: 1,
                failures,
            });
        }
    } else {
        let scenario = &config.scenario;
        let truth = scenario.truth_template()?;
        scenario_digest = dataset_digest(&simulate_scenario(scenario)?);
        for est in &config.estimators {
            let results = harness::map_reps(config.study.reps, cli.jobs, |id| {
                harness::replication_report(scenario, id, *est, &truth, params, &grid)
            })?;
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            for (id, r) in results.into_iter().enumerate() {
                match r {
                    Ok(rep) => ok.push(rep),
                    Err(e) => failures.push((id as u64, e.to_string())),
                }
            }
            reports.push(DiagnoseEntry {
                estimator: *est,
                trajectories: ok.first().cloned(),
                ensemble: harness::ensemble_summary(&ok),
                replications: config.study.reps,
                failures,
            });
        }
    }
    let all_failed = reports.iter().all(|r| r.trajectories.is_none());
    let report = DiagnoseReport {
        provenance: prov,
        scenario_digest,
        n_grid: grid,
        lattice: gee_core::diagnostics::LATTICE_DESCRIPTION,
        reports,
    };
    write_json(&cli.out.join("diagnostics.json"), &report)?;
    if all_failed {
        return Err(CliError::Numerical("no condition report could be computed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct FailureEntry {
    replication: u64,
    estimator: Option<EstimatorSpec>,
    n: Option<usize>,
    message: String,
}

fn replication_failures(results: &[ReplicationResult]) -> Vec<FailureEntry> {
    let mut out = Vec::new();
    for r in results {
        if let Some(m) = &r.failure {
            out.push(FailureEntry { replication: r.id, estimator: None, n: None, message: m.clone() });
        }
        for f in &r.fits {
            for s in &f.per_n {
                let message = match (&s.failure, s.converged) {
                    (Some(m), _) => m.clone(),
                    (None, false) => "solver did not converge".into(),
                    (None, true) => continue,
                };
                out.push(FailureEntry {
                    replication: r.id,
                    estimator: Some(f.estimator),
                    n: Some(s.n),
                    message,
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct ConsistencyReport<'a> {
    provenance: &'a Provenance,
    rows: Vec<gee_core::diagnostics::ConsistencyRow>,
    /// First grid size from which every later fit converged, per
    /// replication and estimator.
    first_convergence: Vec<(u64, EstimatorSpec, Option<usize>)>,
    failures: Vec<FailureEntry>,
}

fn study_consistency(cli: &Cli, config: &RunFile, prov: &Provenance) -> Result<()> {
    let grid = &config.study.n_grid;
    let results = harness::consistency_replications(
        &config.scenario,
        config.study.reps,
        &config.estimators,
        grid,
        &config.solver,
        cli.jobs,
    )?;
    let rows = consistency_table(&results, &config.estimators, grid);
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            let q = r.error;
            format!(
                "{},{},{},{},{},{},{}",
                r.estimator,
                r.n,
                opt(q.map(|q| q.median)),
                opt(q.map(|q| q.q1)),
                opt(q.map(|q| q.q3)),
                format_value(r.converged_fraction),
                r.failures
            )
        })
        .collect();
    write_table(
        &cli.out.join("consistency.csv"),
        prov,
        "estimator,n,median,q1,q3,converged_fraction,failures",
        &lines,
    )?;
    let first_convergence = results
        .iter()
        .flat_map(|r| {
            r.fits.iter().map(move |f| {
                let ns: Vec<usize> = f.per_n.iter().map(|s| s.n).collect();
                let ok: Vec<bool> = f.per_n.iter().map(|s| s.converged).collect();
                (r.id, f.estimator, gee_core::solver::first_convergence(&ns, &ok))
            })
        })
        .collect();
    let no_success = rows.iter().all(|r| r.converged_fraction == 0.0);
    let report = ConsistencyReport {
        provenance: prov,
        rows,
        first_convergence,
        failures: replication_failures(&results),
    };
    write_json(&cli.out.join("consistency.json"), &report)?;
    if no_success {
        return Err(CliError::Numerical("no fit converged in any replication".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct OptimalityReport<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    table: &'a gee_core::diagnostics::OptimalityTable,
}

fn study_optimality(cli: &Cli, config: &RunFile, prov: &Provenance) -> Result<()> {
    let table = harness::optimality(
        &config.scenario,
        &config.estimators,
        config.study.perturb,
        config.study.reps,
        &config.study.n_grid,
        cli.jobs,
    )?;
    let lines: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.estimator,
                r.n,
                opt(r.ratio_h),
                opt(r.ratio_m),
                opt(r.ratio_h_perturbed),
                opt(r.ratio_m_perturbed)
            )
        })
        .collect();
    write_table(
        &cli.out.join("optimality.csv"),
        prov,
        "estimator,n,ratio_h,ratio_m,ratio_h_perturbed,ratio_m_perturbed",
        &lines,
    )?;
    write_json(
        &cli.out.join("optimality.json"),
        &OptimalityReport { provenance: prov, table: &table },
    )
}
