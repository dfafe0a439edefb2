//! Marginal model: link functions, clusters and conditional moments.
//!
//! Responses satisfy `E(y_ij | F_{i-1}) = μ(x_ijᵀβ)` and
//! `Var(y_ij | F_{i-1}) = μ'(x_ijᵀβ)`, so a single link function determines
//! both conditional moments.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Probit,
}

/// Standard normal density.
pub fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function, `Φ(u) = erfc(-u/√2) / 2`.
///
/// `libm::erfc` is the FreeBSD msun implementation (error below 1 ulp), so
/// the absolute error here is far below 1e-12 everywhere.
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u * FRAC_1_SQRT_2)
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Probit => "probit",
        }
    }

    /// `μ` and its derivatives up to order 3.
    pub fn eval(self, order: u8, u: f64) -> Result<f64> {
        match order {
            0 => Ok(self.mean(u)),
            1 => Ok(self.d1(u)),
            2 => Ok(self.d2(u)),
            3 => Ok(self.d3(u)),
            _ => Err(Error::invalid_argument(format!(
                "link derivative order {order} not in 0..=3"
            ))),
        }
    }

    #[inline]
    pub fn mean(self, u: f64) -> f64 {
        match self {
            Link::Identity => u,
            Link::Log => u.exp(),
            Link::Probit => normal_cdf(u),
        }
    }

    /// `μ'`, which is also the conditional variance.
    #[inline]
    pub fn d1(self, u: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => u.exp(),
            Link::Probit => normal_pdf(u),
        }
    }

    #[inline]
    pub fn d2(self, u: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Log => u.exp(),
            Link::Probit => -u * normal_pdf(u),
        }
    }

    #[inline]
    pub fn d3(self, u: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Log => u.exp(),
            Link::Probit => (u * u - 1.0) * normal_pdf(u),
        }
    }
}

impl core::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "probit" => Ok(Link::Probit),
            other => Err(Error::config("link", format!("unknown link `{other}`"))),
        }
    }
}

/// One cluster `(y_i, X_i)`; `X_i` is `m_i × p` with rows `x_ijᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub index: usize,
    pub response: Vec<f64>,
    pub regressors: Matrix,
}

impl Cluster {
    pub fn new(index: usize, response: Vec<f64>, regressors: Matrix) -> Result<Self> {
        if response.is_empty() {
            return Err(Error::InvalidData(format!("cluster {index} is empty")));
        }
        if regressors.rows() != response.len() {
            return Err(Error::InvalidData(format!(
                "cluster {index}: {} responses but {} regressor rows",
                response.len(),
                regressors.rows()
            )));
        }
        if !regressors.is_finite() || response.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidData(format!(
                "cluster {index} has non-finite entries"
            )));
        }
        Ok(Self {
            index,
            response,
            regressors,
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.response.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.regressors.cols()
    }

    /// `X_i β`.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        self.regressors.mul_vec(beta)
    }
}

/// Ordered clusters; position in the list is the filtration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    clusters: Vec<Cluster>,
    p: usize,
    m_max: usize,
}

impl Dataset {
    pub fn new(clusters: Vec<Cluster>, p: usize, m_max: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidData(
                "parameter dimension p must be positive".into(),
            ));
        }
        for (pos, c) in clusters.iter().enumerate() {
            if c.index != pos + 1 {
                return Err(Error::InvalidData(format!(
                    "non-consecutive cluster index: expected {}, found {}",
                    pos + 1,
                    c.index
                )));
            }
            if c.size() > m_max {
                return Err(Error::InvalidData(format!(
                    "cluster {} has size {} > m_max {m_max}",
                    c.index,
                    c.size()
                )));
            }
            if c.p() != p {
                return Err(Error::InvalidData(format!(
                    "cluster {} has {} regressors, expected {p}",
                    c.index,
                    c.p()
                )));
            }
        }
        Ok(Self { clusters, p, m_max })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn into_clusters(self) -> Vec<Cluster> {
        self.clusters
    }

    /// First `n` clusters (saturating).
    pub fn prefix(&self, n: usize) -> &[Cluster] {
        &self.clusters[..n.min(self.clusters.len())]
    }

    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }
}

/// `μ_i(β)` and the diagonal of `A_i(β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ConditionalMoments {
    pub fn sqrt_variance(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// `A_i^{-1/2} (y_i - μ_i)`.
    pub fn standardized(&self, response: &[f64]) -> Vec<f64> {
        response
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((y, m), v)| (y - m) / v.sqrt())
            .collect()
    }

    pub fn residual(&self, response: &[f64]) -> Vec<f64> {
        response
            .iter()
            .zip(&self.mean)
            .map(|(y, m)| y - m)
            .collect()
    }
}

pub fn conditional_moments(
    cluster: &Cluster,
    beta: &[f64],
    link: Link,
) -> Result<ConditionalMoments> {
    if cluster.p() != beta.len() {
        return Err(Error::invalid_argument(format!(
            "beta has length {}, cluster {} has {} regressors",
            beta.len(),
            cluster.index,
            cluster.p()
        )));
    }
    let eta = cluster.linear_predictor(beta);
    let mut mean = Vec::with_capacity(eta.len());
    let mut variance = Vec::with_capacity(eta.len());
    for (j, &u) in eta.iter().enumerate() {
        let v = link.d1(u);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidVariance {
                cluster: cluster.index,
                obs: j + 1,
                value: v,
            });
        }
        mean.push(link.mean(u));
        variance.push(v);
    }
    Ok(ConditionalMoments { mean, variance })
}

/// Axis-aligned box standing in for the parameter region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::config(
                "bounds",
                "lower and upper must have equal length with lower <= upper",
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        beta.len() == self.lower.len()
            && beta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(b, (l, u))| *l <= *b && *b <= *u)
    }

    pub fn clamp(&self, beta: &mut [f64]) {
        for (b, (l, u)) in beta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *b = b.clamp(*l, *u);
        }
    }
}

/// A parameter value together with the region it must stay in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub beta: Vec<f64>,
    pub bounds: Option<BoxRegion>,
}

impl Parameter {
    pub fn new(beta: Vec<f64>, bounds: Option<BoxRegion>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid_argument("parameter has non-finite entries"));
        }
        if let Some(b) = &bounds {
            if !b.contains(&beta) {
                return Err(Error::invalid_argument("parameter lies outside its region"));
            }
        }
        Ok(Self { beta, bounds })
    }

    pub fn unbounded(beta: Vec<f64>) -> Result<Self> {
        Self::new(beta, None)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}
