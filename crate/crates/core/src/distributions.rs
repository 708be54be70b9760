//! Input and proxy distributions for scenario sampling.
//!
//! The input distribution draws heat powers from a multivariate normal
//! truncated to the sign pattern of the active edges (demands positive,
//! supplies negative) and feed-in temperatures from independent uniforms.
//! The proxy distribution draws active mass flows from a normal truncated to
//! the positive orthant instead; it is linearized around the solved mean
//! scenario so that pushing it through the single-pass solve lands close to
//! the input distribution.
//!
//! Log densities are unnormalized: truncated normal normalization constants
//! are intractable and cancel once weights are self-normalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, ScenarioInput};
use crate::numerics::{cholesky, solve_lower, DenseMatrix, NumericsError, RngStream};
use crate::solver::{SolveError, Solver, SolverConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance: {0}")]
    Covariance(NumericsError),
    #[error("truncation sign at coordinate {index} must be +1 or -1, got {sign}")]
    InvalidSign { index: usize, sign: f64 },
    #[error("mean {mean} at coordinate {index} lies outside the truncation region")]
    MeanOutsideSupport { index: usize, mean: f64 },
    #[error("feed-in bounds [{lo}, {hi}] at position {index} are invalid")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
    #[error("rejection sampling gave up after {draws} raw draws")]
    RejectionBudgetExceeded { draws: u64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("solving the {which} scenario: {source}")]
    Solve {
        which: &'static str,
        source: SolveError,
    },
    #[error("flow on active edge {index} did not grow with its power (sigma {sigma:e})")]
    NonPositiveSigma { index: usize, sigma: f64 },
}

/// Multivariate normal restricted to the orthant `sign[i] * v[i] > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedNormal {
    mean: Vec<f64>,
    cov: DenseMatrix,
    chol: DenseMatrix,
    signs: Vec<f64>,
}

impl TruncatedNormal {
    pub fn new(
        mean: Vec<f64>,
        cov: DenseMatrix,
        signs: Vec<f64>,
    ) -> Result<Self, DistributionError> {
        let n = mean.len();
        if cov.rows() != n || cov.cols() != n || signs.len() != n {
            return Err(DistributionError::Dimension(format!(
                "mean has {n} entries, covariance is {}x{}, {} signs",
                cov.rows(),
                cov.cols(),
                signs.len()
            )));
        }
        for (index, &sign) in signs.iter().enumerate() {
            if sign != 1.0 && sign != -1.0 {
                return Err(DistributionError::InvalidSign { index, sign });
            }
            if !(mean[index] * sign > 0.0) {
                return Err(DistributionError::MeanOutsideSupport {
                    index,
                    mean: mean[index],
                });
            }
        }
        let chol = if n == 0 {
            DenseMatrix::zeros(0, 0)
        } else {
            cholesky(&cov).map_err(DistributionError::Covariance)?
        };
        Ok(Self {
            mean,
            cov,
            chol,
            signs,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DenseMatrix {
        &self.cov
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// Per-coordinate standard deviations of the untruncated normal.
    pub fn std_devs(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter().zip(&self.signs).all(|(x, s)| x * s > 0.0)
    }

    /// `-1/2 (v - mu)^T cov^-1 (v - mu)`, or `-inf` outside the orthant.
    pub fn log_density(&self, v: &[f64]) -> f64 {
        if !self.contains(v) {
            return f64::NEG_INFINITY;
        }
        let d: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let z = solve_lower(&self.chol, &d);
        -0.5 * z.iter().map(|z| z * z).sum::<f64>()
    }

    /// One draw by rejection. `draws` counts raw normal vectors and is
    /// checked against `budget`.
    pub fn draw(
        &self,
        rng: &mut RngStream,
        draws: &mut u64,
        budget: u64,
    ) -> Result<Vec<f64>, DistributionError> {
        let n = self.dim();
        let mut z = vec![0.0; n];
        let mut v = vec![0.0; n];
        loop {
            if *draws >= budget {
                return Err(DistributionError::RejectionBudgetExceeded { draws: *draws });
            }
            *draws += 1;
            rng.fill_standard_normal(&mut z);
            for i in 0..n {
                let row = self.chol.row(i);
                v[i] = self.mean[i] + row[..=i].iter().zip(&z).map(|(l, z)| l * z).sum::<f64>();
            }
            if self.contains(&v) {
                return Ok(v);
            }
        }
    }
}

/// Raw-draw budget for `n` rejection samples.
pub fn rejection_budget(n: usize) -> u64 {
    (1_000_000u64).max(1000 * n as u64)
}

/// Independent uniform feed-in temperatures; `lo == hi` fixes a temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedInBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeedInBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, DistributionError> {
        if min.len() != max.len() {
            return Err(DistributionError::Dimension(format!(
                "{} lower and {} upper feed-in bounds",
                min.len(),
                max.len()
            )));
        }
        for (index, (&lo, &hi)) in min.iter().zip(&max).enumerate() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(DistributionError::InvalidBounds { index, lo, hi });
            }
        }
        Ok(Self { min, max })
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn draw(&self, rng: &mut RngStream) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(&lo, &hi)| rng.uniform(lo, hi))
            .collect()
    }
}

/// Distribution over scenario inputs: truncated normal powers [kW] ordered
/// like `spec.active_edges()`, uniform feed-in temperatures [°C] ordered like
/// `spec.feed_in_edges()`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDistribution {
    q: TruncatedNormal,
    t_fi: FeedInBounds,
}

impl InputDistribution {
    pub fn new(q: TruncatedNormal, t_fi: FeedInBounds) -> Self {
        Self { q, t_fi }
    }

    /// Builds the distribution for `spec`, deriving truncation signs from
    /// the edge roles.
    pub fn for_grid(
        spec: &GridSpec,
        mu_q: Vec<f64>,
        sigma_q: DenseMatrix,
        t_fi: FeedInBounds,
    ) -> Result<Self, DistributionError> {
        let signs = spec
            .active_edges()
            .iter()
            .map(|&e| if spec.is_supply_edge(e) { -1.0 } else { 1.0 })
            .collect();
        let dist = Self {
            q: TruncatedNormal::new(mu_q, sigma_q, signs)?,
            t_fi,
        };
        dist.check_grid(spec)?;
        Ok(dist)
    }

    pub fn check_grid(&self, spec: &GridSpec) -> Result<(), DistributionError> {
        if self.q.dim() != spec.active_edges().len()
            || self.t_fi.min.len() != spec.feed_in_edges().len()
        {
            return Err(DistributionError::Dimension(format!(
                "distribution covers {} powers and {} feed-in temperatures, grid has {} active and {} feed-in edges",
                self.q.dim(),
                self.t_fi.min.len(),
                spec.active_edges().len(),
                spec.feed_in_edges().len()
            )));
        }
        Ok(())
    }

    pub fn powers(&self) -> &TruncatedNormal {
        &self.q
    }

    pub fn feed_in(&self) -> &FeedInBounds {
        &self.t_fi
    }

    pub fn mean_scenario(&self) -> ScenarioInput {
        ScenarioInput {
            q: self.q.mean().to_vec(),
            t_fi: self.t_fi.midpoint(),
        }
    }

    pub fn log_density(&self, q: &[f64]) -> f64 {
        self.q.log_density(q)
    }

    /// One scenario: powers first, then feed-in temperatures, from `rng`.
    pub fn draw(
        &self,
        rng: &mut RngStream,
        draws: &mut u64,
        budget: u64,
    ) -> Result<ScenarioInput, DistributionError> {
        let q = self.q.draw(rng, draws, budget)?;
        Ok(ScenarioInput {
            q,
            t_fi: self.t_fi.draw(rng),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&NormalRecord::from_parts(&self.q, &self.t_fi))
            .expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DistributionError> {
        let (q, t_fi) = NormalRecord::parse(text)?;
        Ok(Self { q, t_fi })
    }
}

/// Logs the unnormalized density of the powers only; the feed-in factor is
/// shared with the proxy and cancels in importance weights.
pub fn logdensity_q(dist: &InputDistribution, q: &[f64]) -> f64 {
    dist.log_density(q)
}

pub fn logdensity_m(proxy: &ProxyDistribution, mdot_active: &[f64]) -> f64 {
    proxy.log_density(mdot_active)
}

/// `n` scenarios drawn sequentially from one stream.
pub fn sample_input(
    dist: &InputDistribution,
    rng: &mut RngStream,
    n: usize,
) -> Result<Vec<ScenarioInput>, DistributionError> {
    let budget = rejection_budget(n);
    let mut draws = 0;
    (0..n).map(|_| dist.draw(rng, &mut draws, budget)).collect()
}

/// Distribution over active mass flows [kg/s], all truncated to be positive,
/// with the feed-in temperatures of the input distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyDistribution {
    m: TruncatedNormal,
    t_fi: FeedInBounds,
}

/// A proxy draw: active flows and feed-in temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyDraw {
    pub mdot: Vec<f64>,
    pub t_fi: Vec<f64>,
}

impl ProxyDistribution {
    pub fn new(m: TruncatedNormal, t_fi: FeedInBounds) -> Result<Self, DistributionError> {
        if let Some(index) = m.signs().iter().position(|&s| s != 1.0) {
            return Err(DistributionError::InvalidSign {
                index,
                sign: m.signs()[index],
            });
        }
        Ok(Self { m, t_fi })
    }

    pub fn flows(&self) -> &TruncatedNormal {
        &self.m
    }

    pub fn feed_in(&self) -> &FeedInBounds {
        &self.t_fi
    }

    pub fn log_density(&self, mdot: &[f64]) -> f64 {
        self.m.log_density(mdot)
    }

    pub fn draw(
        &self,
        rng: &mut RngStream,
        draws: &mut u64,
        budget: u64,
    ) -> Result<ProxyDraw, DistributionError> {
        let mdot = self.m.draw(rng, draws, budget)?;
        Ok(ProxyDraw {
            mdot,
            t_fi: self.t_fi.draw(rng),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&NormalRecord::from_parts(&self.m, &self.t_fi))
            .expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DistributionError> {
        let (m, t_fi) = NormalRecord::parse(text)?;
        Self::new(m, t_fi)
    }
}

pub fn sample_proxy(
    proxy: &ProxyDistribution,
    rng: &mut RngStream,
    n: usize,
) -> Result<Vec<ProxyDraw>, DistributionError> {
    let budget = rejection_budget(n);
    let mut draws = 0;
    (0..n)
        .map(|_| proxy.draw(rng, &mut draws, budget))
        .collect()
}

/// Linearizes the power-to-flow map around the mean scenario.
///
/// Solves the mean scenario and one where every power moves one standard
/// deviation away from zero, both at mid-range feed-in temperatures. The
/// flow shift gives the proxy standard deviations; correlations carry over
/// from the power covariance, with signs flipped between demands and
/// supplies because a supply's flow grows as its power becomes more
/// negative.
pub fn build_proxy(
    spec: &GridSpec,
    dist: &InputDistribution,
    cfg: &SolverConfig,
) -> Result<ProxyDistribution, ProxyError> {
    dist.check_grid(spec)?;
    let solver = Solver::new(spec, *cfg).map_err(|source| ProxyError::Solve {
        which: "mean",
        source,
    })?;
    let mean = dist.mean_scenario();
    let active = spec.active_edges();
    let flows = |input: &ScenarioInput, which| {
        solver
            .solve_combined(input)
            .map(|(state, _)| active.iter().map(|e| state.mdot[e.0]).collect::<Vec<f64>>())
            .map_err(|source| ProxyError::Solve { which, source })
    };

    let mu_m = flows(&mean, "mean")?;
    let powers = dist.powers();
    // signed one-sigma shift towards larger |q|
    let sigma_q: Vec<f64> = powers
        .std_devs()
        .iter()
        .zip(powers.signs())
        .map(|(s, sign)| s * sign)
        .collect();
    let shifted = ScenarioInput {
        q: mean.q.iter().zip(&sigma_q).map(|(m, s)| m + s).collect(),
        t_fi: mean.t_fi.clone(),
    };
    let m_shifted = flows(&shifted, "shifted")?;

    let sigma_m: Vec<f64> = m_shifted.iter().zip(&mu_m).map(|(a, b)| a - b).collect();
    for (index, &sigma) in sigma_m.iter().enumerate() {
        if !(sigma > 0.0) {
            return Err(ProxyError::NonPositiveSigma { index, sigma });
        }
    }
    let n = mu_m.len();
    let cov_q = powers.cov();
    let mut cov_m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cov_m[(i, j)] = sigma_m[i] * sigma_m[j] / (sigma_q[i] * sigma_q[j]) * cov_q[(i, j)];
        }
    }
    let m = TruncatedNormal::new(mu_m, cov_m, vec![1.0; n])?;
    Ok(ProxyDistribution::new(m, dist.feed_in().clone())?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalRecord {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    signs: Vec<f64>,
    t_fi_min: Vec<f64>,
    t_fi_max: Vec<f64>,
}

impl NormalRecord {
    fn from_parts(n: &TruncatedNormal, t: &FeedInBounds) -> Self {
        Self {
            mean: n.mean.clone(),
            cov: (0..n.dim()).map(|r| n.cov.row(r).to_vec()).collect(),
            signs: n.signs.clone(),
            t_fi_min: t.min.clone(),
            t_fi_max: t.max.clone(),
        }
    }

    fn parse(text: &str) -> Result<(TruncatedNormal, FeedInBounds), DistributionError> {
        let rec: NormalRecord = serde_json::from_str(text)
            .map_err(|e| DistributionError::Dimension(format!("bad distribution record: {e}")))?;
        let dim = rec.mean.len();
        let cov = if dim == 0 {
            DenseMatrix::zeros(0, 0)
        } else {
            DenseMatrix::from_rows(&rec.cov).map_err(DistributionError::Covariance)?
        };
        Ok((
            TruncatedNormal::new(rec.mean, cov, rec.signs)?,
            FeedInBounds::new(rec.t_fi_min, rec.t_fi_max)?,
        ))
    }
}
