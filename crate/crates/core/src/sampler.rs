//! Training data generation.
//!
//! Two routes produce datasets of solved scenarios:
//!
//! * direct: draw `(q, T_fi)` from the input distribution and run the
//!   combined iterative solver on each draw;
//! * importance: draw active flows and feed-in temperatures from the proxy,
//!   solve the hydraulic and thermal sub-problems once, read the powers off
//!   the resulting state and weight the sample by the density ratio.
//!
//! Sample `i` always uses RNG substream `i`, so serial and parallel runs give
//! the same dataset.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::distributions::{
    build_proxy, rejection_budget, DistributionError, InputDistribution, ProxyDistribution,
    ProxyError,
};
use crate::grid::{residual, GridSpec, GridState, ScenarioInput};
use crate::hydraulic::{plan, solve_hydraulic, HydraulicError, HydraulicPlan};
use crate::numerics::{log_abs_det, norm_inf, DenseMatrix, RngStream};
use crate::solver::{thread_iteration_count, SolveError, Solver, SolverConfig};
use crate::thermal::{solve_thermal, ThermalError};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const GOLDEN_FORMAT_VERSION: u32 = 1;
/// Residual bound every directly solved sample must meet.
pub const DIRECT_CERTIFICATE: f64 = 1e-6;
/// Residual bound every single-pass sample must meet.
pub const SINGLE_PASS_CERTIFICATE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sample count must be positive")]
    Empty,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("proxy construction: {0}")]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Solver(#[from] SolveError),
    #[error(transparent)]
    Hydraulic(#[from] HydraulicError),
    #[error("gave up after {attempts} attempts for {samples} samples; last failure: {last}")]
    RedrawBudgetExceeded {
        attempts: u64,
        samples: usize,
        last: String,
    },
    #[error("every sample has zero weight")]
    NoValidWeights,
    #[error("dataset format: {0}")]
    Format(String),
    #[error("dataset was generated for grid {found}, not {expected}")]
    GridMismatch { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum SinglePassError {
    #[error(transparent)]
    Hydraulic(#[from] HydraulicError),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Direct,
    Importance,
    Resampled,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Direct => "direct",
            Generator::Importance => "importance",
            Generator::Resampled => "resampled",
        }
    }
}

impl FromStr for Generator {
    type Err = SampleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Generator::Direct),
            "importance" => Ok(Generator::Importance),
            "resampled" => Ok(Generator::Resampled),
            _ => Err(SampleError::Format(format!("unknown generator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: ScenarioInput,
    pub state: GridState,
    /// Self-normalized weight (dataset mean 1).
    pub weight: f64,
    /// `ln p(q) - ln p_proxy(mdot)`; 0 for direct samples.
    pub log_ratio: f64,
    /// `ln |det dq/dmdot|` of the single-pass map, when requested.
    pub log_jac_det: Option<f64>,
}

impl TrainingSample {
    /// Unnormalized log weight: the density ratio, plus the log Jacobian
    /// determinant when it was recorded.
    pub fn log_weight(&self) -> f64 {
        self.log_ratio + self.log_jac_det.unwrap_or(0.0)
    }
}

/// Counters accumulated over a generation run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Telemetry {
    /// Raw normal vectors drawn, rejected ones included.
    pub raw_draws: u64,
    /// Accepted draws that were pushed through a solve.
    pub attempts: u64,
    /// Attempts discarded because a solve failed or missed the certificate.
    pub failures: u64,
    pub hydraulic_solves: u64,
    pub thermal_solves: u64,
    /// Decomposed or Newton iterations executed inside the per-sample path.
    pub solver_iterations: u64,
    /// Full solver calls made once before sampling (proxy construction).
    pub setup_solves: u64,
    /// Largest residual infinity norm among stored samples.
    pub max_residual: f64,
}

impl Telemetry {
    pub fn acceptance_rate(&self) -> f64 {
        if self.raw_draws == 0 {
            1.0
        } else {
            self.attempts as f64 / self.raw_draws as f64
        }
    }
}

/// Wall-clock measurements. They are never written to dataset files, which
/// keeps those byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timing {
    pub setup: Duration,
    pub sampling: Duration,
    pub per_sample: Vec<Duration>,
}

impl Timing {
    pub fn median_per_sample(&self) -> Duration {
        let mut v = self.per_sample.clone();
        v.sort_unstable();
        match v.len() {
            0 => Duration::ZERO,
            n if n % 2 == 1 => v[n / 2],
            n => (v[n / 2 - 1] + v[n / 2]) / 2,
        }
    }

    pub fn total(&self) -> Duration {
        self.setup + self.sampling
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_hash: String,
    pub seed: u64,
    pub generator: Generator,
    /// Generator of the dataset this one was resampled from.
    pub source: Option<Generator>,
    pub distribution: InputDistribution,
    pub proxy: Option<ProxyDistribution>,
    pub samples: Vec<TrainingSample>,
    pub telemetry: Telemetry,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Spread samples over the rayon pool. Serial runs give the same data.
    pub parallel: bool,
    /// Also record `ln |det dq/dmdot|` for importance samples.
    pub log_jacobian: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            parallel: true,
            log_jacobian: false,
        }
    }
}

/// Hydraulic and thermal solve for given active flows, followed by reading
/// the active powers off the state: `q = mdot * cp * (T_inlet - T_end)`.
pub fn single_pass(
    spec: &GridSpec,
    plan: &HydraulicPlan,
    mdot_active: &[f64],
    t_fi: &[f64],
) -> Result<(GridState, Vec<f64>), SinglePassError> {
    let hyd = solve_hydraulic(spec, plan, mdot_active)?;
    let th = solve_thermal(spec, &hyd.mdot, t_fi)?;
    let q = spec
        .active_edges()
        .iter()
        .map(|&e| {
            let edge = spec.edge(e);
            hyd.mdot[e.0] * spec.cp() * (th.t[edge.tail.0] - th.t_end[e.0])
        })
        .collect();
    let state = GridState {
        t: th.t,
        mdot: hyd.mdot,
        p: hyd.p,
        t_end: th.t_end,
    };
    Ok((state, q))
}

/// `1 / (1 + Var(w / mean(w)))` with the population variance.
pub fn effective_sample_rate(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights
        .iter()
        .map(|w| (w / mean - 1.0).powi(2))
        .sum::<f64>()
        / n;
    1.0 / (1.0 + var)
}

/// `direct_total / (setup + importance_total)`.
pub fn reduction_factor(direct_total: f64, setup: f64, importance_total: f64) -> f64 {
    direct_total / (setup + importance_total)
}

fn certificate(spec: &GridSpec, state: &GridState, input: &ScenarioInput) -> f64 {
    residual(spec, state, input)
        .map(|r| norm_inf(&r))
        .unwrap_or(f64::INFINITY)
}

#[derive(Debug, Default)]
struct Outcome {
    sample: Option<TrainingSample>,
    telemetry: Telemetry,
    elapsed: Duration,
}

/// Per-sample limits shared by both routes: `3n` solve attempts and the
/// rejection budget for `n` draws, summed over all samples.
#[derive(Debug, Clone, Copy)]
struct Budget {
    attempts: u64,
    draws: u64,
}

impl Budget {
    fn for_samples(n: usize) -> Self {
        Self {
            attempts: 3 * n as u64,
            draws: rejection_budget(n),
        }
    }
}

fn run_samples<F>(n: usize, parallel: bool, one: F) -> Result<Vec<Outcome>, SampleError>
where
    F: Fn(usize) -> Result<Outcome, SampleError> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

fn check_budget(outcomes: &[Outcome], budget: Budget) -> Result<Telemetry, SampleError> {
    let mut t = Telemetry::default();
    for o in outcomes {
        let s = &o.telemetry;
        t.raw_draws += s.raw_draws;
        t.attempts += s.attempts;
        t.failures += s.failures;
        t.hydraulic_solves += s.hydraulic_solves;
        t.thermal_solves += s.thermal_solves;
        t.solver_iterations += s.solver_iterations;
        t.max_residual = t.max_residual.max(s.max_residual);
    }
    if t.raw_draws > budget.draws {
        return Err(DistributionError::RejectionBudgetExceeded { draws: t.raw_draws }.into());
    }
    if t.attempts > budget.attempts {
        return Err(SampleError::RedrawBudgetExceeded {
            attempts: t.attempts,
            samples: outcomes.len(),
            last: "too many failed solves".into(),
        });
    }
    Ok(t)
}

/// Draws scenarios from `dist` and solves each with the combined solver.
pub fn generate_direct(
    spec: &GridSpec,
    dist: &InputDistribution,
    n: usize,
    cfg: &SolverConfig,
    rng: &RngStream,
    opts: GenerateOptions,
) -> Result<Dataset, SampleError> {
    if n == 0 {
        return Err(SampleError::Empty);
    }
    dist.check_grid(spec)?;
    let solver = Solver::new(spec, *cfg)?;
    let budget = Budget::for_samples(n);

    let start = Instant::now();
    let outcomes = run_samples(n, opts.parallel, |i| {
        let t0 = Instant::now();
        let mut rng = rng.substream(i as u64);
        let mut out = Outcome::default();
        let mut last = String::new();
        while out.telemetry.attempts < budget.attempts {
            out.telemetry.attempts += 1;
            let input = dist.draw(&mut rng, &mut out.telemetry.raw_draws, budget.draws)?;
            let before = thread_iteration_count();
            let solved = solver.solve_combined(&input);
            out.telemetry.solver_iterations += thread_iteration_count() - before;
            match solved {
                Ok((state, _)) => {
                    let r = certificate(spec, &state, &input);
                    if r <= DIRECT_CERTIFICATE {
                        out.telemetry.max_residual = r;
                        out.sample = Some(TrainingSample {
                            input,
                            state,
                            weight: 1.0,
                            log_ratio: 0.0,
                            log_jac_det: None,
                        });
                        out.elapsed = t0.elapsed();
                        return Ok(out);
                    }
                    last = format!("residual {r:e} above certificate");
                }
                Err(e) => last = e.to_string(),
            }
            out.telemetry.failures += 1;
        }
        Err(SampleError::RedrawBudgetExceeded {
            attempts: out.telemetry.attempts,
            samples: n,
            last,
        })
    })?;
    let sampling = start.elapsed();
    let telemetry = check_budget(&outcomes, budget)?;

    let per_sample = outcomes.iter().map(|o| o.elapsed).collect();
    let samples = outcomes
        .into_iter()
        .map(|o| o.sample.expect("successful outcome"))
        .collect();
    Ok(Dataset {
        grid_hash: spec.content_hash(),
        seed: rng.seed(),
        generator: Generator::Direct,
        source: None,
        distribution: dist.clone(),
        proxy: None,
        samples,
        telemetry,
        timing: Timing {
            setup: Duration::ZERO,
            sampling,
            per_sample,
        },
    })
}

/// Finite-difference `ln |det dq/dmdot|` of the single-pass map at fixed
/// feed-in temperatures. NaN when a perturbed solve fails.
fn log_jacobian(
    spec: &GridSpec,
    plan: &HydraulicPlan,
    mdot: &[f64],
    t_fi: &[f64],
    q0: &[f64],
) -> f64 {
    let n = mdot.len();
    let mut jac = DenseMatrix::zeros(n, n);
    let mut m = mdot.to_vec();
    for j in 0..n {
        let h = 1e-6 * mdot[j].abs().max(1.0);
        m[j] = mdot[j] + h;
        let Ok((_, q)) = single_pass(spec, plan, &m, t_fi) else {
            return f64::NAN;
        };
        m[j] = mdot[j];
        for i in 0..n {
            jac[(i, j)] = (q[i] - q0[i]) / h;
        }
    }
    log_abs_det(&jac).unwrap_or(f64::NAN)
}

/// Single-pass generation from the proxy distribution.
///
/// Builds the proxy (two combined solves), then for each sample draws flows
/// and temperatures, runs one hydraulic and one thermal solve and weights
/// the resulting powers. Samples whose powers leave the sign pattern of the
/// input distribution get weight zero; failed solves are redrawn.
pub fn generate_importance(
    spec: &GridSpec,
    dist: &InputDistribution,
    n: usize,
    cfg: &SolverConfig,
    rng: &RngStream,
    opts: GenerateOptions,
) -> Result<Dataset, SampleError> {
    if n == 0 {
        return Err(SampleError::Empty);
    }
    dist.check_grid(spec)?;
    let setup_start = Instant::now();
    let proxy = build_proxy(spec, dist, cfg)?;
    let plan = plan(spec)?;
    let setup = setup_start.elapsed();
    let budget = Budget::for_samples(n);

    let start = Instant::now();
    let outcomes = run_samples(n, opts.parallel, |i| {
        let t0 = Instant::now();
        let mut rng = rng.substream(i as u64);
        let mut out = Outcome::default();
        let mut last = String::new();
        let before = thread_iteration_count();
        while out.telemetry.attempts < budget.attempts {
            out.telemetry.attempts += 1;
            let draw = proxy.draw(&mut rng, &mut out.telemetry.raw_draws, budget.draws)?;
            out.telemetry.hydraulic_solves += 1;
            out.telemetry.thermal_solves += 1;
            match single_pass(spec, &plan, &draw.mdot, &draw.t_fi) {
                Ok((state, q)) => {
                    let input = ScenarioInput { q, t_fi: draw.t_fi };
                    let r = certificate(spec, &state, &input);
                    if r <= SINGLE_PASS_CERTIFICATE {
                        let log_ratio = dist.log_density(&input.q) - proxy.log_density(&draw.mdot);
                        let log_jac_det = opts
                            .log_jacobian
                            .then(|| log_jacobian(spec, &plan, &draw.mdot, &input.t_fi, &input.q));
                        out.telemetry.max_residual = r;
                        out.telemetry.solver_iterations = thread_iteration_count() - before;
                        out.sample = Some(TrainingSample {
                            input,
                            state,
                            weight: f64::NAN,
                            log_ratio,
                            log_jac_det,
                        });
                        out.elapsed = t0.elapsed();
                        return Ok(out);
                    }
                    last = format!("residual {r:e} above certificate");
                }
                Err(e) => last = e.to_string(),
            }
            out.telemetry.failures += 1;
        }
        Err(SampleError::RedrawBudgetExceeded {
            attempts: out.telemetry.attempts,
            samples: n,
            last,
        })
    })?;
    let sampling = start.elapsed();
    let mut telemetry = check_budget(&outcomes, budget)?;
    telemetry.setup_solves = 2;

    let per_sample = outcomes.iter().map(|o| o.elapsed).collect();
    let mut samples: Vec<TrainingSample> = outcomes
        .into_iter()
        .map(|o| o.sample.expect("successful outcome"))
        .collect();
    let log_weights: Vec<f64> = samples.iter().map(TrainingSample::log_weight).collect();
    for (s, w) in samples.iter_mut().zip(self_normalize(&log_weights)?) {
        s.weight = w;
    }
    Ok(Dataset {
        grid_hash: spec.content_hash(),
        seed: rng.seed(),
        generator: Generator::Importance,
        source: None,
        distribution: dist.clone(),
        proxy: Some(proxy),
        samples,
        telemetry,
        timing: Timing {
            setup,
            sampling,
            per_sample,
        },
    })
}

/// Weights `exp(log_weight)` rescaled to mean 1.
pub fn self_normalize(log_weights: &[f64]) -> Result<Vec<f64>, SampleError> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SampleError::NoValidWeights);
    }
    let raw: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }

    pub fn esr(&self) -> f64 {
        effective_sample_rate(&self.weights())
    }

    /// Values of active power `i` across samples.
    pub fn power_column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.input.q[i]).collect()
    }

    fn has_jacobian(&self) -> bool {
        self.samples.iter().any(|s| s.log_jac_det.is_some())
    }

    /// Column names of the record rows.
    pub fn column_names(spec: &GridSpec, with_jacobian: bool) -> Vec<String> {
        let mut cols = vec!["weight".to_string()];
        cols.extend(spec.active_edges().iter().map(|e| format!("q_e{}", e.0)));
        cols.extend(spec.feed_in_edges().iter().map(|e| format!("tfi_e{}", e.0)));
        cols.extend((0..spec.node_count()).map(|n| format!("T_n{n}")));
        cols.extend((0..spec.edge_count()).map(|e| format!("mdot_e{e}")));
        cols.extend((0..spec.node_count()).map(|n| format!("p_n{n}")));
        cols.extend((0..spec.edge_count()).map(|e| format!("Tend_e{e}")));
        cols.push("log_ratio".into());
        if with_jacobian {
            cols.push("log_jac_det".into());
        }
        cols
    }

    /// Tab-separated dataset file: `#`-prefixed metadata lines, a column
    /// header, then one row per sample. Numbers use the shortest exponent
    /// form that parses back to the same value.
    pub fn to_tsv(&self, spec: &GridSpec) -> String {
        let mut out = String::new();
        let t = &self.telemetry;
        let meta: Vec<(&str, String)> = vec![
            ("format", format!("tpf-dataset {DATASET_FORMAT_VERSION}")),
            ("grid_sha256", self.grid_hash.clone()),
            ("generator", self.generator.as_str().into()),
            ("source", self.source.map_or("-", |g| g.as_str()).into()),
            ("seed", self.seed.to_string()),
            ("samples", self.len().to_string()),
            ("esr", format!("{:e}", self.esr())),
            ("raw_draws", t.raw_draws.to_string()),
            ("attempts", t.attempts.to_string()),
            ("failures", t.failures.to_string()),
            ("acceptance_rate", format!("{:e}", t.acceptance_rate())),
            ("hydraulic_solves", t.hydraulic_solves.to_string()),
            ("thermal_solves", t.thermal_solves.to_string()),
            ("solver_iterations", t.solver_iterations.to_string()),
            ("setup_solves", t.setup_solves.to_string()),
            ("max_residual", format!("{:e}", t.max_residual)),
            ("input_distribution", self.distribution.to_json()),
            (
                "proxy_distribution",
                self.proxy.as_ref().map_or("-".into(), |p| p.to_json()),
            ),
        ];
        for (k, v) in meta {
            writeln!(out, "# {k} {v}").expect("writing to a string");
        }
        let with_jac = self.has_jacobian();
        out.push_str(&Self::column_names(spec, with_jac).join("\t"));
        out.push('\n');
        for s in &self.samples {
            let mut row = vec![s.weight];
            row.extend(&s.input.q);
            row.extend(&s.input.t_fi);
            row.extend(&s.state.t);
            row.extend(&s.state.mdot);
            row.extend(&s.state.p);
            row.extend(&s.state.t_end);
            row.push(s.log_ratio);
            if with_jac {
                row.push(s.log_jac_det.unwrap_or(f64::NAN));
            }
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Parses a file written by [`Dataset::to_tsv`] for `spec`. Timing is
    /// not stored and comes back empty.
    pub fn from_tsv(spec: &GridSpec, text: &str) -> Result<Self, SampleError> {
        let bad = |msg: String| SampleError::Format(msg);
        let mut meta = std::collections::HashMap::new();
        let mut lines = text.lines();
        let header = loop {
            let line = lines
                .next()
                .ok_or_else(|| bad("missing column header".into()))?;
            match line.strip_prefix("# ") {
                Some(rest) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                None => break line,
            }
        };
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| bad(format!("missing metadata key {k}")))
        };
        let int = |k: &str| -> Result<u64, SampleError> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("bad integer for {k}")))
        };
        let float = |k: &str| -> Result<f64, SampleError> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("bad number for {k}")))
        };

        if get("format")? != format!("tpf-dataset {DATASET_FORMAT_VERSION}") {
            return Err(bad(format!("unsupported format {:?}", get("format")?)));
        }
        let grid_hash = get("grid_sha256")?;
        if grid_hash != spec.content_hash() {
            return Err(SampleError::GridMismatch {
                expected: spec.content_hash(),
                found: grid_hash,
            });
        }
        let source = match get("source")?.as_str() {
            "-" => None,
            g => Some(g.parse()?),
        };
        let proxy = match get("proxy_distribution")?.as_str() {
            "-" => None,
            json => Some(ProxyDistribution::from_json(json)?),
        };
        let telemetry = Telemetry {
            raw_draws: int("raw_draws")?,
            attempts: int("attempts")?,
            failures: int("failures")?,
            hydraulic_solves: int("hydraulic_solves")?,
            thermal_solves: int("thermal_solves")?,
            solver_iterations: int("solver_iterations")?,
            setup_solves: int("setup_solves")?,
            max_residual: float("max_residual")?,
        };

        let cols: Vec<&str> = header.split('\t').collect();
        let with_jac = cols.last() == Some(&"log_jac_det");
        if cols != Self::column_names(spec, with_jac) {
            return Err(bad("column header does not match the grid".into()));
        }
        let (na, nf, nv, ne) = (
            spec.active_edges().len(),
            spec.feed_in_edges().len(),
            spec.node_count(),
            spec.edge_count(),
        );
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split('\t')
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", lineno + 1)))?;
            if vals.len() != cols.len() {
                return Err(bad(format!(
                    "row {} has {} fields, expected {}",
                    lineno + 1,
                    vals.len(),
                    cols.len()
                )));
            }
            let mut rest = &vals[1..];
            let mut take = |k: usize| {
                let (head, tail) = rest.split_at(k);
                rest = tail;
                head.to_vec()
            };
            let q = take(na);
            let t_fi = take(nf);
            let state = GridState {
                t: take(nv),
                mdot: take(ne),
                p: take(nv),
                t_end: take(ne),
            };
            let log_ratio = take(1)[0];
            let log_jac_det = with_jac.then(|| take(1)[0]);
            samples.push(TrainingSample {
                input: ScenarioInput { q, t_fi },
                state,
                weight: vals[0],
                log_ratio,
                log_jac_det,
            });
        }
        if samples.len() as u64 != int("samples")? {
            return Err(bad("sample count does not match metadata".into()));
        }
        Ok(Dataset {
            grid_hash,
            seed: int("seed")?,
            generator: get("generator")?.parse()?,
            source,
            distribution: InputDistribution::from_json(&get("input_distribution")?)?,
            proxy,
            samples,
            telemetry,
            timing: Timing::default(),
        })
    }
}

/// Multinomial resampling with probabilities proportional to the weights.
/// The result has the same size and unit weights.
pub fn resample(dataset: &Dataset, rng: &mut RngStream) -> Dataset {
    let mut cumulative = Vec::with_capacity(dataset.len());
    let mut acc = 0.0;
    for s in &dataset.samples {
        acc += s.weight;
        cumulative.push(acc);
    }
    let samples = (0..dataset.len())
        .map(|_| {
            let u = rng.next_f64() * acc;
            let idx = cumulative
                .partition_point(|&c| c <= u)
                .min(dataset.len() - 1);
            TrainingSample {
                weight: 1.0,
                ..dataset.samples[idx].clone()
            }
        })
        .collect();
    Dataset {
        generator: Generator::Resampled,
        source: Some(dataset.generator),
        samples,
        timing: Timing::default(),
        ..dataset.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub direct_total: Duration,
    pub direct_median: Duration,
    pub setup: Duration,
    pub importance_total: Duration,
    pub importance_median: Duration,
    pub esr: f64,
}

impl BenchRow {
    pub fn reduction(&self) -> f64 {
        reduction_factor(
            self.direct_total.as_secs_f64(),
            self.setup.as_secs_f64(),
            self.importance_total.as_secs_f64(),
        )
    }
}

/// Times both routes serially for every sample count in `n_list`.
pub fn benchmark(
    spec: &GridSpec,
    dist: &InputDistribution,
    n_list: &[usize],
    cfg: &SolverConfig,
    rng: &RngStream,
) -> Result<Vec<BenchRow>, SampleError> {
    if n_list.is_empty() {
        return Err(SampleError::Empty);
    }
    let opts = GenerateOptions {
        parallel: false,
        log_jacobian: false,
    };
    n_list
        .iter()
        .map(|&n| {
            let direct = generate_direct(spec, dist, n, cfg, rng, opts)?;
            let is = generate_importance(spec, dist, n, cfg, rng, opts)?;
            Ok(BenchRow {
                n,
                direct_total: direct.timing.sampling,
                direct_median: direct.timing.median_per_sample(),
                setup: is.timing.setup,
                importance_total: is.timing.sampling,
                importance_median: is.timing.median_per_sample(),
                esr: is.esr(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct GoldenFile {
    version: u32,
    grid: serde_json::Value,
    /// Offsets of T, mdot, p and T_end inside `x`.
    state_layout: [usize; 4],
    residual_layout: GoldenLayout,
    cases: Vec<GoldenCase>,
}

#[derive(Debug, Serialize)]
struct GoldenLayout {
    mass: usize,
    pressure: usize,
    mixing: usize,
    cooling: usize,
    active_t_end: usize,
    active_power: usize,
    slack: usize,
    len: usize,
    passive_len: usize,
}

#[derive(Debug, Serialize)]
struct GoldenCase {
    kind: &'static str,
    x: Vec<f64>,
    q: Vec<f64>,
    t_fi: Vec<f64>,
    residual: Vec<f64>,
}

/// Reference residuals for checking other implementations of the grid
/// equations: the first half of the cases are dataset states as stored, the
/// second half the same states with every entry perturbed by a relative
/// Gaussian jitter of 1 %, so that every residual block is exercised with
/// nonzero values.
pub fn golden_residuals(
    spec: &GridSpec,
    dataset: &Dataset,
    count: usize,
    rng: &mut RngStream,
) -> Result<String, SampleError> {
    if dataset.is_empty() || count == 0 {
        return Err(SampleError::Empty);
    }
    let layout = spec.residual_layout();
    let (nv, ne) = (spec.node_count(), spec.edge_count());
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let s = &dataset.samples[i % dataset.len()];
        let perturbed = i >= count.div_ceil(2);
        let mut x = s.state.to_vector();
        if perturbed {
            for v in &mut x {
                *v += 0.01 * v.abs().max(1.0) * rng.standard_normal();
            }
        }
        let state =
            GridState::from_vector(spec, &x).map_err(|e| SampleError::Format(e.to_string()))?;
        let residual =
            residual(spec, &state, &s.input).map_err(|e| SampleError::Format(e.to_string()))?;
        cases.push(GoldenCase {
            kind: if perturbed { "perturbed" } else { "stored" },
            x,
            q: s.input.q.clone(),
            t_fi: s.input.t_fi.clone(),
            residual,
        });
    }
    let file = GoldenFile {
        version: GOLDEN_FORMAT_VERSION,
        grid: serde_json::from_str(&spec.to_json()).expect("grid JSON parses"),
        state_layout: [0, nv, nv + ne, 2 * nv + ne],
        residual_layout: GoldenLayout {
            mass: layout.mass,
            pressure: layout.pressure,
            mixing: layout.mixing,
            cooling: layout.cooling,
            active_t_end: layout.active_t_end,
            active_power: layout.active_power,
            slack: layout.slack,
            len: layout.len,
            passive_len: layout.passive_len,
        },
        cases,
    };
    Ok(serde_json::to_string_pretty(&file).expect("plain data serializes"))
}
