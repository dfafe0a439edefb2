//! Scenario files: a TOML document holding the simulation scenario, the
//! estimators, solver settings, diagnostic parameters and study sizes.

use std::path::Path;

use gee_core::diagnostics::DiagnosticParams;
use gee_core::simulation::{EstimatorSpec, ScenarioConfig, RNG_ALGORITHM};
use gee_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub n_grid: Vec<usize>,
    pub reps: usize,
    /// Also evaluate the perturbed-regressor determinant ratios.
    pub perturb: bool,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            n_grid: vec![100, 400, 1000],
            reps: 100,
            perturb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub scenario: ScenarioConfig,
    pub estimators: Vec<EstimatorSpec>,
    pub solver: SolverConfig,
    pub diagnostics: DiagnosticParams,
    pub study: StudySettings,
}

impl Default for RunFile {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            estimators: vec![EstimatorSpec::Independence, EstimatorSpec::Pseudo],
            solver: SolverConfig::default(),
            diagnostics: DiagnosticParams::default(),
            study: StudySettings::default(),
        }
    }
}

const OPTIONAL_KEYS: &str = "\
# Optional keys (absent by default):
#   solver.jacobian_method = \"analytic\" | \"finite_difference\"
#   solver.bounds = { lower = [..], upper = [..] }
# Estimator names: independence, identity, exchangeable:<rho>, ar1:<rho>,
#   pseudo, truth, quasi-score
# scenario.sizes kinds: constant {m}, cyclic {sizes}, random_in_range {min, max}
# scenario.regressors kinds: iid {mean, sd}, exogenous_ar1 {phi, noise},
#   feedback {gain, noise}
# scenario.truth kinds: independence, exchangeable {rho}, ar1 {rho}
# scenario.family: gaussian_link_moments | poisson_log | bernoulli_probit_flagged
# scenario.link: identity | log | probit
";

impl RunFile {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            CliError::Parse {
                path: origin.to_path_buf(),
                line: line as u64,
                reason: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run file is always representable")
    }

    /// The `--print-defaults` document.
    pub fn defaults_document() -> String {
        let mut s = Self::default().to_toml();
        s.push('\n');
        s.push_str(OPTIONAL_KEYS);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.solver.validate()?;
        self.diagnostics.validate()?;
        if self.estimators.is_empty() {
            return Err(CliError::config("estimators", "at least one estimator is required"));
        }
        validate_grid(&self.study.n_grid)?;
        if self.study.reps == 0 {
            return Err(CliError::config("reps", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn validate_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(CliError::config("n_grid", "must not be empty"));
    }
    if grid.contains(&0) {
        return Err(CliError::config("n_grid", "sizes must be at least 1"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::config("n_grid", "must be nondecreasing"));
    }
    Ok(())
}

/// Provenance attached to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub rng: &'static str,
    pub seed: u64,
    pub config: RunFile,
    pub warnings: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, config: &RunFile) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            rng: RNG_ALGORITHM,
            seed: config.scenario.seed,
            config: config.clone(),
            warnings: config.scenario.warnings(),
        }
    }

    /// Comment lines for CSV outputs; the config block parses back as TOML
    /// once the `# ` prefixes are stripped.
    pub fn comment_lines(&self) -> Vec<String> {
        let mut v = vec![
            format!("{} {} {}", self.tool, self.version, self.command),
            format!("rng = {}", self.rng),
            format!("seed = {}", self.seed),
        ];
        v.extend(self.warnings.iter().map(|w| format!("warning: {w}")));
        v.push("---- resolved config ----".into());
        v.push(self.config.to_toml());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let doc = RunFile::defaults_document();
        let back = RunFile::from_toml(&doc, Path::new("defaults.toml")).unwrap();
        assert_eq!(back, RunFile::default());
        back.validate().unwrap();
    }

    #[test]
    fn partial_file_uses_defaults() {
        let text = "[scenario]\nn = 50\nlink = \"log\"\n\n[study]\nreps = 3\n";
        let r = RunFile::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(r.scenario.n, 50);
        assert_eq!(r.study.reps, 3);
        assert_eq!(r.solver, SolverConfig::default());
    }

    #[test]
    fn unknown_key_names_line() {
        let text = "[scenario]\nn = 50\nbogus = 1\n";
        match RunFile::from_toml(text, Path::new("x.toml")) {
            Err(CliError::Parse { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("bogus"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn estimator_names_parse() {
        let text = "estimators = [\"exchangeable:0.3\", \"ar1:0.5\", \"truth\"]\n";
        let r = RunFile::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(r.estimators.len(), 3);
        let bad = "estimators = [\"nope\"]\n";
        assert!(RunFile::from_toml(bad, Path::new("x.toml")).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut r = RunFile::default();
        r.study.n_grid = vec![10, 5];
        assert!(matches!(r.validate(), Err(CliError::Config { field, .. }) if field == "n_grid"));
        let mut r = RunFile::default();
        r.scenario.n = 0;
        assert!(matches!(r.validate(), Err(CliError::Config { field, .. }) if field == "n"));
    }
}
