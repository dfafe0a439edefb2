//! Seeded generation of clustered data with predictable (history-dependent)
//! regressors, and the replication harness built on it.
//!
//! Random numbers come from ChaCha20 with one stream per cluster and
//! purpose, so any cluster can be regenerated from the seed and the history
//! alone. The scheme is identified as [`RNG_ALGORITHM`] in reports.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correlation::{ar1_matrix, exchangeable_matrix, TruthTemplate, WorkingCorrelationSpec};
use crate::estimating::EstimatingKind;
use crate::linalg::{Cholesky, Matrix};
use crate::model::{normal_cdf, Cluster, Dataset, Link};
use crate::solver::{fit_gee, SolverConfig};
use crate::{Error, Result};

pub const RNG_ALGORITHM: &str = "chacha20-stream-v1";

const STREAM_SIZE: u64 = 0;
const STREAM_REGRESSORS: u64 = 1;
const STREAM_RESPONSE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeSchedule {
    Constant { m: usize },
    Cyclic { sizes: Vec<usize> },
    RandomInRange { min: usize, max: usize },
}

impl SizeSchedule {
    fn largest(&self) -> usize {
        match self {
            SizeSchedule::Constant { m } => *m,
            SizeSchedule::Cyclic { sizes } => sizes.iter().copied().max().unwrap_or(0),
            SizeSchedule::RandomInRange { max, .. } => *max,
        }
    }

    fn smallest(&self) -> usize {
        match self {
            SizeSchedule::Constant { m } => *m,
            SizeSchedule::Cyclic { sizes } => sizes.iter().copied().min().unwrap_or(0),
            SizeSchedule::RandomInRange { min, .. } => *min,
        }
    }
}

/// Law of the non-intercept regressor columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressorProcess {
    /// `x_ijk ~ N(mean, sd²)` independently.
    Iid { mean: f64, sd: f64 },
    /// `x_ijk = φ · mean_j(x_{i-1,·,k}) + noise · ε`.
    ExogenousAr1 { phi: f64, noise: f64 },
    /// `x_ijk = κ · mean(y_{i-1}) + noise · ε`.
    Feedback { gain: f64, noise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthCorrelation {
    Independence,
    Exchangeable { rho: f64 },
    Ar1 { rho: f64 },
}

impl TruthCorrelation {
    pub fn template(&self, m: usize) -> Matrix {
        match *self {
            TruthCorrelation::Independence => Matrix::identity(m),
            TruthCorrelation::Exchangeable { rho } => exchangeable_matrix(rho, m),
            TruthCorrelation::Ar1 { rho } => ar1_matrix(rho, m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFamily {
    /// `y = μ + A^{1/2} L ε` with `L Lᵀ` the true correlation.
    GaussianLinkMoments,
    /// Gaussian copula pushed through Poisson quantiles.
    PoissonLog,
    /// Thresholded latent Gaussian; its variance is not `μ'`.
    BernoulliProbitFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub link: Link,
    pub beta0: Vec<f64>,
    pub n: usize,
    pub sizes: SizeSchedule,
    pub m_max: usize,
    /// First regressor column is the constant 1.
    pub intercept: bool,
    pub regressors: RegressorProcess,
    pub truth: TruthCorrelation,
    pub family: ResponseFamily,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            link: Link::Identity,
            beta0: vec![1.0, 0.5],
            n: 1000,
            sizes: SizeSchedule::Constant { m: 2 },
            m_max: 2,
            intercept: true,
            regressors: RegressorProcess::Iid { mean: 0.0, sd: 1.0 },
            truth: TruthCorrelation::Exchangeable { rho: 0.4 },
            family: ResponseFamily::GaussianLinkMoments,
            seed: 20_240_101,
        }
    }
}

impl ScenarioConfig {
    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.beta0.is_empty() || self.beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("beta0", "must be a non-empty finite vector"));
        }
        if self.m_max == 0 {
            return Err(Error::config("m_max", "must be positive"));
        }
        match &self.sizes {
            SizeSchedule::Cyclic { sizes } if sizes.is_empty() => {
                return Err(Error::config(
                    "sizes",
                    "cyclic schedule needs at least one size",
                ));
            }
            SizeSchedule::RandomInRange { min, max } if min > max => {
                return Err(Error::config("sizes", "min exceeds max"));
            }
            _ => {}
        }
        if self.sizes.smallest() == 0 {
            return Err(Error::config("sizes", "cluster sizes must be at least 1"));
        }
        if self.sizes.largest() > self.m_max {
            return Err(Error::config(
                "m_max",
                format!(
                    "schedule reaches size {} above m_max {}",
                    self.sizes.largest(),
                    self.m_max
                ),
            ));
        }
        match self.regressors {
            RegressorProcess::Iid { mean, sd } => {
                if !mean.is_finite() || !(sd >= 0.0) || !sd.is_finite() {
                    return Err(Error::config("regressors", "need finite mean and sd >= 0"));
                }
            }
            RegressorProcess::ExogenousAr1 { phi, noise } => {
                if !(phi.abs() < 1.0) {
                    return Err(Error::config("phi", "must satisfy |phi| < 1"));
                }
                if !(noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::config("noise", "must be finite and non-negative"));
                }
            }
            RegressorProcess::Feedback { gain, noise } => {
                if !gain.is_finite() {
                    return Err(Error::config("gain", "must be finite"));
                }
                if !(noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::config("noise", "must be finite and non-negative"));
                }
            }
        }
        if self.intercept && self.p() < 1 {
            return Err(Error::config(
                "beta0",
                "intercept needs at least one coefficient",
            ));
        }
        match self.truth {
            TruthCorrelation::Independence => {}
            TruthCorrelation::Exchangeable { rho } => {
                WorkingCorrelationSpec::exchangeable(rho, self.m_max).map_err(|_| {
                    Error::config(
                        "truth.rho",
                        format!("{rho} invalid for m_max {}", self.m_max),
                    )
                })?;
            }
            TruthCorrelation::Ar1 { rho } => {
                WorkingCorrelationSpec::ar1(rho, self.m_max)
                    .map_err(|_| Error::config("truth.rho", format!("{rho} outside (-1, 1)")))?;
            }
        }
        match (self.family, self.link) {
            (ResponseFamily::PoissonLog, l) if l != Link::Log => {
                Err(Error::config("family", "poisson_log requires the log link"))
            }
            (ResponseFamily::BernoulliProbitFlagged, l) if l != Link::Probit => Err(Error::config(
                "family",
                "bernoulli_probit_flagged requires the probit link",
            )),
            _ => Ok(()),
        }
    }

    /// Misspecification notes to attach to any output.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.family == ResponseFamily::BernoulliProbitFlagged {
            w.push(
                "bernoulli_probit_flagged: Var(y) = Φ(η)(1-Φ(η)) differs from μ'(η) = φ(η); \
                 the variance assumption of the model is violated"
                    .to_string(),
            );
        }
        if self.family == ResponseFamily::PoissonLog {
            w.push(
                "poisson_log: the true correlation is estimated by simulation at a reference mean"
                    .to_string(),
            );
        }
        w
    }

    /// True correlation template for diagnostics. Exact for the Gaussian
    /// family; for Poisson, the copula correlation estimated at the
    /// intercept-only mean with 100 000 draws; for Bernoulli, the latent one.
    pub fn truth_template(&self) -> Result<TruthTemplate> {
        let latent = self.truth.template(self.m_max);
        match self.family {
            ResponseFamily::GaussianLinkMoments | ResponseFamily::BernoulliProbitFlagged => {
                TruthTemplate::new(latent)
            }
            ResponseFamily::PoissonLog => {
                let eta = if self.intercept { self.beta0[0] } else { 0.0 };
                let r =
                    poisson_copula_correlation(&latent, self.link.mean(eta), 100_000, self.seed)?;
                TruthTemplate::new(r)
            }
        }
    }

    fn size_of(&self, i: usize) -> usize {
        match &self.sizes {
            SizeSchedule::Constant { m } => *m,
            SizeSchedule::Cyclic { sizes } => sizes[(i - 1) % sizes.len()],
            SizeSchedule::RandomInRange { min, max } => {
                stream(self.seed, i, STREAM_SIZE).random_range(*min..=*max)
            }
        }
    }
}

/// Generator for cluster `i` (1-based) and one purpose.
fn stream(seed: u64, i: usize, purpose: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(3 * i as u64 + purpose);
    rng
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `X_i` from the seed and the clusters before it.
pub fn regressors_for(config: &ScenarioConfig, history: &[Cluster]) -> Matrix {
    let i = history.len() + 1;
    let m = config.size_of(i);
    let p = config.p();
    let offset = usize::from(config.intercept);
    let mut rng = stream(config.seed, i, STREAM_REGRESSORS);
    let prev = history.last();
    let mut x = Matrix::zeros(m, p);
    for j in 0..m {
        if config.intercept {
            x[(j, 0)] = 1.0;
        }
    }
    for k in offset..p {
        let centre = match config.regressors {
            RegressorProcess::Iid { mean, .. } => mean,
            RegressorProcess::ExogenousAr1 { phi, .. } => {
                phi * prev.map_or(0.0, |c| {
                    let col: f64 = (0..c.size()).map(|j| c.regressors[(j, k)]).sum();
                    col / c.size() as f64
                })
            }
            RegressorProcess::Feedback { gain, .. } => {
                gain * prev.map_or(0.0, |c| c.response.iter().sum::<f64>() / c.size() as f64)
            }
        };
        let scale = match config.regressors {
            RegressorProcess::Iid { sd, .. } => sd,
            RegressorProcess::ExogenousAr1 { noise, .. }
            | RegressorProcess::Feedback { noise, .. } => noise,
        };
        for j in 0..m {
            x[(j, k)] = centre + scale * normal(&mut rng);
        }
    }
    x
}

/// One draw of `y_i` given `X_i` and the true correlation factor.
pub fn sample_response(
    config: &ScenarioConfig,
    x: &Matrix,
    chol: &Cholesky,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    let m = x.rows();
    let eta = x.mul_vec(&config.beta0);
    let eps: Vec<f64> = (0..m).map(|_| normal(rng)).collect();
    let l = chol.factor();
    let z: Vec<f64> = (0..m)
        .map(|j| (0..=j).map(|k| l[(j, k)] * eps[k]).sum())
        .collect();
    let link = config.link;
    let mut y = Vec::with_capacity(m);
    for (j, (&u, &zj)) in eta.iter().zip(&z).enumerate() {
        let v = link.d1(u);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidVariance {
                cluster: 0,
                obs: j + 1,
                value: v,
            });
        }
        y.push(match config.family {
            ResponseFamily::GaussianLinkMoments => link.mean(u) + v.sqrt() * zj,
            ResponseFamily::PoissonLog => poisson_quantile(normal_cdf(zj), link.mean(u)),
            ResponseFamily::BernoulliProbitFlagged => f64::from(u8::from(zj < u)),
        });
    }
    Ok(y)
}

/// Smallest `k` with `P(Poisson(λ) ≤ k) ≥ u`, by summing the pmf.
pub fn poisson_quantile(u: f64, lambda: f64) -> f64 {
    let mut k = 0u32;
    let mut pmf = (-lambda).exp();
    let mut cdf = pmf;
    while cdf < u && k < 100_000 {
        k += 1;
        pmf *= lambda / f64::from(k);
        let next = cdf + pmf;
        if next == cdf && pmf < f64::MIN_POSITIVE {
            break;
        }
        cdf = next;
    }
    f64::from(k)
}

/// Pearson correlation of Gaussian-copula Poisson variables with common
/// mean `lambda`, estimated from `samples` draws.
pub fn poisson_copula_correlation(
    latent: &Matrix,
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<Matrix> {
    let m = latent.rows();
    let chol = Cholesky::new(latent)?;
    let l = chol.factor();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_c0b1);
    let mut sum = vec![0.0; m];
    let mut cross = Matrix::zeros(m, m);
    for _ in 0..samples {
        let eps: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..m)
            .map(|j| {
                let z: f64 = (0..=j).map(|k| l[(j, k)] * eps[k]).sum();
                poisson_quantile(normal_cdf(z), lambda)
            })
            .collect();
        for a in 0..m {
            sum[a] += y[a];
            for b in 0..m {
                cross[(a, b)] += y[a] * y[b];
            }
        }
    }
    let n = samples as f64;
    let cov = Matrix::from_fn(m, m, |a, b| cross[(a, b)] / n - sum[a] * sum[b] / (n * n));
    Ok(Matrix::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else {
            cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()
        }
    }))
}

/// Generates `config.n` clusters in filtration order.
pub fn simulate_scenario(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let truth = config.truth.template(config.m_max);
    let factors: Vec<Cholesky> = (1..=config.m_max)
        .map(|m| Cholesky::new(&truth.principal(m)))
        .collect::<core::result::Result<_, _>>()?;
    let mut clusters: Vec<Cluster> = Vec::with_capacity(config.n);
    for i in 1..=config.n {
        let x = regressors_for(config, &clusters);
        let mut rng = stream(config.seed, i, STREAM_RESPONSE);
        let y =
            sample_response(config, &x, &factors[x.rows() - 1], &mut rng).map_err(|e| match e {
                Error::InvalidVariance { obs, value, .. } => Error::InvalidVariance {
                    cluster: i,
                    obs,
                    value,
                },
                other => other,
            })?;
        clusters.push(Cluster::new(i, y, x)?);
    }
    Dataset::new(clusters, config.p(), config.m_max)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `id`.
pub fn replication_seed(seed: u64, id: u64) -> u64 {
    seed ^ splitmix64(id)
}

pub fn replication_config(config: &ScenarioConfig, id: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed: replication_seed(config.seed, id),
        ..config.clone()
    }
}

/// SHA-256 of arbitrary bytes as lowercase hex.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in hash {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 over the bit patterns of every cluster.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.p() as u64).to_le_bytes());
    h.update((dataset.m_max() as u64).to_le_bytes());
    for c in dataset.clusters() {
        h.update((c.index as u64).to_le_bytes());
        h.update((c.size() as u64).to_le_bytes());
        for y in &c.response {
            h.update(y.to_bits().to_le_bytes());
        }
        for x in c.regressors.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    let mut s = String::with_capacity(64);
    for b in h.finalize() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Estimators selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EstimatorSpec {
    Independence,
    Identity,
    Exchangeable(f64),
    Ar1(f64),
    Pseudo,
    /// `g*` with `R*` fixed at the true correlation.
    Truth,
    QuasiScore,
}

impl EstimatorSpec {
    pub fn kind(&self, m_max: usize, truth: &TruthTemplate) -> Result<EstimatingKind> {
        Ok(match *self {
            EstimatorSpec::Independence => EstimatingKind::Independence,
            EstimatorSpec::Identity => {
                EstimatingKind::GeeStar(WorkingCorrelationSpec::identity(m_max))
            }
            EstimatorSpec::Exchangeable(rho) => {
                EstimatingKind::GeeStar(WorkingCorrelationSpec::exchangeable(rho, m_max)?)
            }
            EstimatorSpec::Ar1(rho) => {
                EstimatingKind::GeeStar(WorkingCorrelationSpec::ar1(rho, m_max)?)
            }
            EstimatorSpec::Pseudo => {
                EstimatingKind::GeeStar(WorkingCorrelationSpec::pseudo_likelihood(m_max))
            }
            EstimatorSpec::Truth => {
                EstimatingKind::GeeStar(WorkingCorrelationSpec::fixed(truth.template().clone())?)
            }
            EstimatorSpec::QuasiScore => EstimatingKind::QuasiScore(truth.clone()),
        })
    }

    /// Working-correlation spec for the `g*` family members.
    pub fn working_spec(
        &self,
        m_max: usize,
        truth: &TruthTemplate,
    ) -> Result<WorkingCorrelationSpec> {
        match self.kind(m_max, truth)? {
            EstimatingKind::GeeStar(spec) => Ok(spec),
            EstimatingKind::Independence => Ok(WorkingCorrelationSpec::identity(m_max)),
            EstimatingKind::QuasiScore(t) => WorkingCorrelationSpec::fixed(t.template().clone()),
            _ => Err(Error::invalid_argument(
                "estimator has no working correlation",
            )),
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorSpec::Independence => f.write_str("independence"),
            EstimatorSpec::Identity => f.write_str("identity"),
            EstimatorSpec::Exchangeable(r) => write!(f, "exchangeable:{r}"),
            EstimatorSpec::Ar1(r) => write!(f, "ar1:{r}"),
            EstimatorSpec::Pseudo => f.write_str("pseudo"),
            EstimatorSpec::Truth => f.write_str("truth"),
            EstimatorSpec::QuasiScore => f.write_str("quasi-score"),
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let rho = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| {
                Error::config(
                    "estimator",
                    format!("`{name}` needs a parameter, e.g. {name}:0.3"),
                )
            })?
            .parse::<f64>()
            .map_err(|_| Error::config("estimator", format!("bad parameter in `{s}`")))
        };
        let spec = match name {
            "independence" => EstimatorSpec::Independence,
            "identity" => EstimatorSpec::Identity,
            "exchangeable" => EstimatorSpec::Exchangeable(rho(arg)?),
            "ar1" => EstimatorSpec::Ar1(rho(arg)?),
            "pseudo" | "pseudo_likelihood" | "pseudo-likelihood" => EstimatorSpec::Pseudo,
            "truth" => EstimatorSpec::Truth,
            "quasi-score" | "quasi_score" => EstimatorSpec::QuasiScore,
            _ => {
                return Err(Error::config(
                    "estimator",
                    format!("unknown estimator `{s}`"),
                ))
            }
        };
        if arg.is_some() && !matches!(spec, EstimatorSpec::Exchangeable(_) | EstimatorSpec::Ar1(_))
        {
            return Err(Error::config(
                "estimator",
                format!("`{name}` takes no parameter"),
            ));
        }
        Ok(spec)
    }
}

impl From<EstimatorSpec> for String {
    fn from(e: EstimatorSpec) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for EstimatorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub beta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Euclidean distance to `β₀`.
    pub error: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorFits {
    pub estimator: EstimatorSpec,
    pub per_n: Vec<FitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub id: u64,
    pub seed: u64,
    pub digest: Option<String>,
    pub fits: Vec<EstimatorFits>,
    pub failure: Option<String>,
}

pub fn check_grid(n_grid: &[usize]) -> Result<()> {
    if n_grid.is_empty() || n_grid[0] == 0 {
        return Err(Error::config(
            "n_grid",
            "must be non-empty with positive entries",
        ));
    }
    if n_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("n_grid", "must be nondecreasing"));
    }
    Ok(())
}

/// Simulates replication `id` up to the largest grid size and fits every
/// estimator on each nested prefix. Failures are recorded, not returned.
pub fn run_replication(
    config: &ScenarioConfig,
    id: u64,
    estimators: &[EstimatorSpec],
    n_grid: &[usize],
    solver: &SolverConfig,
    truth: &TruthTemplate,
) -> ReplicationResult {
    let rep = replication_config(config, id);
    let mut result = ReplicationResult {
        id,
        seed: rep.seed,
        digest: None,
        fits: Vec::new(),
        failure: None,
    };
    let n_max = n_grid.last().copied().unwrap_or(config.n);
    let rep = ScenarioConfig { n: n_max, ..rep };
    let data = match simulate_scenario(&rep) {
        Ok(d) => d,
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };
    result.digest = Some(dataset_digest(&data));
    for est in estimators {
        let kind = match est.kind(config.m_max, truth) {
            Ok(k) => k,
            Err(e) => {
                result.failure = Some(e.to_string());
                continue;
            }
        };
        let per_n = n_grid
            .iter()
            .map(|&n| {
                let cl = data.prefix(n);
                match fit_gee(cl, &kind, config.link, solver, None) {
                    Ok(fit) => FitSummary {
                        n,
                        error: distance(&fit.beta_hat, &config.beta0),
                        beta_hat: fit.beta_hat,
                        converged: fit.converged,
                        iterations: fit.iterations,
                        residual_norm: fit.final_residual_norm,
                        failure: None,
                    },
                    Err(e) => FitSummary {
                        n,
                        beta_hat: Vec::new(),
                        converged: false,
                        iterations: 0,
                        residual_norm: f64::NAN,
                        error: f64::NAN,
                        failure: Some(e.to_string()),
                    },
                }
            })
            .collect();
        result.fits.push(EstimatorFits {
            estimator: *est,
            per_n,
        });
    }
    result
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sequential harness over replications `0..reps`.
pub fn run_replications(
    config: &ScenarioConfig,
    reps: usize,
    estimators: &[EstimatorSpec],
    n_grid: &[usize],
    solver: &SolverConfig,
) -> Result<Vec<ReplicationResult>> {
    config.validate()?;
    check_grid(n_grid)?;
    if reps == 0 {
        return Err(Error::config("reps", "must be at least 1"));
    }
    let truth = config.truth_template()?;
    Ok((0..reps as u64)
        .map(|id| run_replication(config, id, estimators, n_grid, solver, &truth))
        .collect())
}
