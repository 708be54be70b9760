//! Iterative thermal power flow solvers.
//!
//! * Decomposed iteration: alternate active-flow update, hydraulic solve and
//!   thermal solve until the residual is small.
//! * Damped Newton-Raphson on the full state with a forward-difference
//!   Jacobian and backtracking line search.
//! * Combined: decomposed steps while they make good progress, then Newton
//!   from the last decomposed state.

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::grid::{residual_into, GridError, GridSpec, GridState, ScenarioInput, Side, StateView};
use crate::hydraulic::{plan, solve_hydraulic, HydraulicError, HydraulicPlan};
use crate::numerics::{lin_solve, norm2, norm_inf, DenseMatrix, NumericsError};
use crate::thermal::{solve_thermal, ThermalError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Decomposed iteration stops once the squared residual norm drops below this.
    pub eps_da: f64,
    /// Newton stops once the residual max-norm drops below this.
    pub eps_nr: f64,
    pub max_iter_dc: usize,
    pub max_iter_nr: usize,
    /// Armijo sufficient-decrease factor.
    pub gamma: f64,
    pub alpha_min: f64,
    /// Combined mode leaves the decomposed phase once a step improves the
    /// residual norm by less than this fraction.
    pub dc_switch_gain: f64,
    /// Decomposed steps taken before the gain test applies; the first steps
    /// of a cold start can stall while temperatures settle.
    pub dc_min_steps: usize,
    /// Smallest temperature difference [K] used when converting powers to flows.
    pub dt_min: f64,
    /// Relative forward-difference step for the Jacobian.
    pub fd_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_da: 1e-8,
            eps_nr: 1e-8,
            max_iter_dc: 100,
            max_iter_nr: 50,
            gamma: 1e-4,
            alpha_min: 1e-10,
            dc_switch_gain: 0.1,
            dc_min_steps: 3,
            dt_min: 1.0,
            fd_eps: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let positive = [
            ("eps_da", self.eps_da),
            ("eps_nr", self.eps_nr),
            ("alpha_min", self.alpha_min),
            ("dc_switch_gain", self.dc_switch_gain),
            ("dt_min", self.dt_min),
            ("fd_eps", self.fd_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolveError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SolveError::Config("gamma must lie in (0, 1)".into()));
        }
        if self.max_iter_dc == 0 || self.max_iter_nr == 0 {
            return Err(SolveError::Config(
                "iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dc,
    Nr,
    Combined,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dc => "dc",
            Method::Nr => "nr",
            Method::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Dc,
    Nr,
}

/// One recorded iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub phase: Phase,
    pub iteration: usize,
    pub residual_inf: f64,
    pub residual_norm: f64,
    /// Accepted step length (1 for decomposed steps).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub method: Method,
    pub converged: bool,
    pub dc_iterations: usize,
    pub nr_iterations: usize,
    pub final_residual_inf: f64,
    pub wall_time: Duration,
    /// Active-edge flow conversions where the temperature clamp kicked in.
    pub clamp_activations: usize,
    /// Times Newton failed and was restarted from further decomposed steps.
    pub restarts: usize,
    pub trace: Vec<TraceEntry>,
}

impl SolveReport {
    fn new(method: Method) -> Self {
        Self {
            method,
            converged: false,
            dc_iterations: 0,
            nr_iterations: 0,
            final_residual_inf: f64::INFINITY,
            wall_time: Duration::ZERO,
            clamp_activations: 0,
            restarts: 0,
            trace: Vec::new(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.dc_iterations + self.nr_iterations
    }

    /// Tab-separated convergence trace with a header row.
    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("phase\titeration\tresidual_inf\tresidual_norm\tstep\n");
        for t in &self.trace {
            let phase = match t.phase {
                Phase::Dc => "dc",
                Phase::Nr => "nr",
            };
            let _ = writeln!(
                out,
                "{phase}\t{}\t{:e}\t{:e}\t{:e}",
                t.iteration, t.residual_inf, t.residual_norm, t.step
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Hydraulic(#[from] HydraulicError),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error("non-finite initial state")]
    NonFiniteState,
    #[error("Jacobian is singular: {0}")]
    SingularJacobian(NumericsError),
    #[error("line search failed: step fell below {alpha_min:e} at |F| = {residual_norm:e}")]
    LineSearchFailed { alpha_min: f64, residual_norm: f64 },
    #[error("{} did not converge after {} iterations (|F|inf = {:e})", .report.method.as_str(), .report.iterations(), .report.final_residual_inf)]
    NotConverged {
        state: Box<GridState>,
        report: Box<SolveReport>,
    },
}

/// Decomposed steps before the first Newton attempt of a plain Newton solve.
const WARM_START_STEPS: usize = 3;

thread_local! {
    static ITERATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Decomposed steps plus Newton iterations executed on the calling thread
/// since it started. Lets callers prove that a code path never iterated.
pub fn thread_iteration_count() -> u64 {
    ITERATIONS.with(Cell::get)
}

fn count_iteration() {
    ITERATIONS.with(|c| c.set(c.get() + 1));
}

/// Reusable solver context for one grid: the hydraulic plan plus scratch
/// buffers sized for the residual.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    spec: &'a GridSpec,
    plan: HydraulicPlan,
    cfg: SolverConfig,
}

/// Result of one decomposed step.
#[derive(Debug, Clone, PartialEq)]
pub struct DcStep {
    pub state: GridState,
    pub clamp_activations: usize,
}

impl<'a> Solver<'a> {
    pub fn new(spec: &'a GridSpec, cfg: SolverConfig) -> Result<Self, SolveError> {
        cfg.validate()?;
        Ok(Self {
            spec,
            plan: plan(spec)?,
            cfg,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        self.spec
    }

    pub fn plan(&self) -> &HydraulicPlan {
        &self.plan
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Initial node temperatures: supply side at the mean producer feed-in
    /// temperature, return side at the mean consumer feed-in temperature.
    pub fn initial_temperatures(&self, input: &ScenarioInput) -> Vec<f64> {
        let spec = self.spec;
        let (mut hot, mut n_hot, mut cold, mut n_cold) = (0.0, 0usize, 0.0, 0usize);
        for (&e, &t) in spec.feed_in_edges().iter().zip(&input.t_fi) {
            if spec.side(spec.edge(e).head) == Side::Supply {
                hot += t;
                n_hot += 1;
            } else {
                cold += t;
                n_cold += 1;
            }
        }
        let hot = if n_hot > 0 {
            hot / n_hot as f64
        } else {
            spec.ambient_temperature()
        };
        let cold = if n_cold > 0 {
            cold / n_cold as f64
        } else {
            spec.ambient_temperature()
        };
        spec.sides()
            .iter()
            .map(|s| match s {
                Side::Supply => hot,
                Side::Return => cold,
            })
            .collect()
    }

    /// Active-edge flows from the power balance at given node temperatures.
    pub fn active_flows(&self, input: &ScenarioInput, t: &[f64]) -> (Vec<f64>, usize) {
        let spec = self.spec;
        let mut clamps = 0;
        let flows = spec
            .active_edges()
            .iter()
            .zip(&input.q)
            .map(|(&e, &q)| {
                let fi = spec
                    .feed_in_index(e)
                    .expect("active edge has a feed-in slot");
                let dt = t[spec.edge(e).tail.0] - input.t_fi[fi];
                if q == 0.0 {
                    return 0.0;
                }
                let sign = q.signum();
                let dt_eff = if sign * dt < self.cfg.dt_min {
                    clamps += 1;
                    sign * self.cfg.dt_min
                } else {
                    dt
                };
                q / (spec.cp() * dt_eff)
            })
            .collect();
        (flows, clamps)
    }

    /// One decomposed step: flows from powers at temperatures `t`, then the
    /// hydraulic and thermal sub-problems.
    pub fn dc_step(&self, input: &ScenarioInput, t: &[f64]) -> Result<DcStep, SolveError> {
        input.check_dims(self.spec)?;
        if t.len() != self.spec.node_count() || t.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteState);
        }
        let (mdot_a, clamp_activations) = self.active_flows(input, t);
        let hyd = solve_hydraulic(self.spec, &self.plan, &mdot_a)?;
        let th = solve_thermal(self.spec, &hyd.mdot, &input.t_fi)?;
        Ok(DcStep {
            state: GridState {
                t: th.t,
                mdot: hyd.mdot,
                p: hyd.p,
                t_end: th.t_end,
            },
            clamp_activations,
        })
    }

    fn residual_vec(&self, x: &[f64], input: &ScenarioInput, out: &mut [f64]) {
        residual_into(self.spec, StateView::split(self.spec, x), input, out);
    }

    /// Decomposed iteration from the default initial temperatures.
    pub fn solve_dc(&self, input: &ScenarioInput) -> Result<(GridState, SolveReport), SolveError> {
        let start = Instant::now();
        let mut report = SolveReport::new(Method::Dc);
        let t0 = self.initial_temperatures(input);
        let (state, _) = self.run_dc(input, t0, &mut report, None, self.cfg.max_iter_dc)?;
        report.wall_time = start.elapsed();
        if report.converged {
            Ok((state, report))
        } else {
            Err(SolveError::NotConverged {
                state: Box::new(state),
                report: Box::new(report),
            })
        }
    }

    /// Runs decomposed steps. With `switch_gain` set, also stops when the
    /// relative improvement of one step falls below it. Returns the last
    /// state and its residual.
    fn run_dc(
        &self,
        input: &ScenarioInput,
        mut t: Vec<f64>,
        report: &mut SolveReport,
        switch_gain: Option<f64>,
        budget: usize,
    ) -> Result<(GridState, Vec<f64>), SolveError> {
        let mut f = vec![0.0; self.spec.residual_layout().len];
        let mut prev_norm = f64::INFINITY;
        let mut last = None;
        for it in 0..budget {
            let step = self.dc_step(input, &t)?;
            report.clamp_activations += step.clamp_activations;
            report.dc_iterations += 1;
            count_iteration();
            let x = step.state.to_vector();
            self.residual_vec(&x, input, &mut f);
            let (inf, norm) = (norm_inf(&f), norm2(&f));
            report.trace.push(TraceEntry {
                phase: Phase::Dc,
                iteration: it,
                residual_inf: inf,
                residual_norm: norm,
                step: 1.0,
            });
            report.final_residual_inf = inf;
            t.clone_from(&step.state.t);
            last = Some(step.state);
            if norm * norm < self.cfg.eps_da || inf <= self.cfg.eps_nr {
                report.converged = true;
                break;
            }
            if let Some(gain) = switch_gain {
                if it + 1 >= self.cfg.dc_min_steps
                    && prev_norm.is_finite()
                    && (prev_norm - norm) / prev_norm < gain
                {
                    break;
                }
            }
            prev_norm = norm;
        }
        Ok((last.expect("at least one decomposed step ran"), f))
    }

    /// Forward-difference Jacobian of the square system: all residual rows
    /// except the mass balance of the slack tail node, which is implied by
    /// the others.
    pub fn jacobian(&self, x: &[f64], input: &ScenarioInput) -> DenseMatrix {
        let n = x.len();
        let dropped = self.dropped_row();
        let mut f0 = vec![0.0; n + 1];
        self.residual_vec(x, input, &mut f0);
        let mut fj = vec![0.0; n + 1];
        let mut xp = x.to_vec();
        let mut jac = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let h = self.cfg.fd_eps * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            let h = xp[j] - x[j];
            self.residual_vec(&xp, input, &mut fj);
            xp[j] = x[j];
            for (row, i) in (0..=n).filter(|&i| i != dropped).enumerate() {
                jac[(row, j)] = (fj[i] - f0[i]) / h;
            }
        }
        jac
    }

    fn dropped_row(&self) -> usize {
        let layout = self.spec.residual_layout();
        layout.mass + self.spec.edge(self.spec.slack_edge()).tail.0
    }

    /// Damped Newton-Raphson from `x0`.
    pub fn solve_nr(
        &self,
        input: &ScenarioInput,
        x0: &GridState,
    ) -> Result<(GridState, SolveReport), SolveError> {
        let start = Instant::now();
        let mut report = SolveReport::new(Method::Nr);
        let state = self.run_nr(input, x0, &mut report)?;
        report.wall_time = start.elapsed();
        Ok((state, report))
    }

    fn run_nr(
        &self,
        input: &ScenarioInput,
        x0: &GridState,
        report: &mut SolveReport,
    ) -> Result<GridState, SolveError> {
        x0.check_dims(self.spec)?;
        input.check_dims(self.spec)?;
        if !x0.is_finite() {
            return Err(SolveError::NonFiniteState);
        }
        let dropped = self.dropped_row();
        let mut x = x0.to_vector();
        let n = x.len();
        let mut f = vec![0.0; n + 1];
        let mut f_new = vec![0.0; n + 1];
        let mut x_new = vec![0.0; n];
        self.residual_vec(&x, input, &mut f);
        let mut inf = norm_inf(&f);
        let mut norm = norm2(&f);
        report.final_residual_inf = inf;

        for it in 0..self.cfg.max_iter_nr {
            if inf <= self.cfg.eps_nr {
                report.converged = true;
                break;
            }
            let jac = self.jacobian(&x, input);
            let rhs: Vec<f64> = (0..=n).filter(|&i| i != dropped).map(|i| -f[i]).collect();
            let dir = lin_solve(&jac, &rhs).map_err(SolveError::SingularJacobian)?;

            let mut alpha = 1.0;
            loop {
                for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&dir) {
                    *xn = xi + alpha * di;
                }
                self.residual_vec(&x_new, input, &mut f_new);
                let new_norm = norm2(&f_new);
                if new_norm <= (1.0 - self.cfg.gamma * alpha) * norm {
                    break;
                }
                alpha *= 0.5;
                if alpha < self.cfg.alpha_min {
                    return Err(SolveError::LineSearchFailed {
                        alpha_min: self.cfg.alpha_min,
                        residual_norm: norm,
                    });
                }
            }
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut f, &mut f_new);
            inf = norm_inf(&f);
            norm = norm2(&f);
            report.nr_iterations += 1;
            count_iteration();
            report.final_residual_inf = inf;
            report.trace.push(TraceEntry {
                phase: Phase::Nr,
                iteration: it,
                residual_inf: inf,
                residual_norm: norm,
                step: alpha,
            });
        }
        if inf <= self.cfg.eps_nr {
            report.converged = true;
        }
        let state = GridState::from_vector(self.spec, &x)?;
        if report.converged {
            Ok(state)
        } else {
            Err(SolveError::NotConverged {
                state: Box::new(state),
                report: Box::new(report.clone()),
            })
        }
    }

    /// Decomposed steps until their gain diminishes, then Newton.
    pub fn solve_combined(
        &self,
        input: &ScenarioInput,
    ) -> Result<(GridState, SolveReport), SolveError> {
        let start = Instant::now();
        let mut report = SolveReport::new(Method::Combined);
        let t0 = self.initial_temperatures(input);
        let (dc_state, f) = self.run_dc(
            input,
            t0,
            &mut report,
            Some(self.cfg.dc_switch_gain),
            self.cfg.max_iter_dc,
        )?;
        report.converged = false;
        let state = if norm_inf(&f) <= self.cfg.eps_nr {
            report.converged = true;
            dc_state
        } else {
            match self.run_nr(input, &dc_state, &mut report) {
                Ok(s) => s,
                Err(e) if !Self::newton_stalled(&e) => return Err(e),
                Err(_) => {
                    // Newton can stall when a pipe flow sits near zero on the
                    // wrong side of the upwind switch. Finish the decomposed
                    // iteration from where it left off, then polish.
                    report.restarts += 1;
                    report.converged = false;
                    let budget = self.cfg.max_iter_dc.saturating_sub(report.dc_iterations);
                    if budget == 0 {
                        return Err(self.not_converged(dc_state, report, start));
                    }
                    let (dc_state, f) =
                        self.run_dc(input, dc_state.t, &mut report, None, budget)?;
                    if !report.converged {
                        return Err(self.not_converged(dc_state, report, start));
                    }
                    if norm_inf(&f) <= self.cfg.eps_nr {
                        dc_state
                    } else {
                        report.converged = false;
                        match self.run_nr(input, &dc_state, &mut report) {
                            Ok(s) => s,
                            Err(SolveError::NotConverged { state, .. }) => {
                                return Err(self.not_converged(*state, report, start))
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        };
        report.wall_time = start.elapsed();
        Ok((state, report))
    }

    fn newton_stalled(e: &SolveError) -> bool {
        matches!(
            e,
            SolveError::NotConverged { .. }
                | SolveError::LineSearchFailed { .. }
                | SolveError::SingularJacobian(_)
        )
    }

    fn not_converged(
        &self,
        state: GridState,
        mut report: SolveReport,
        start: Instant,
    ) -> SolveError {
        report.converged = false;
        report.wall_time = start.elapsed();
        SolveError::NotConverged {
            state: Box::new(state),
            report: Box::new(report),
        }
    }

    pub fn solve(
        &self,
        method: Method,
        input: &ScenarioInput,
    ) -> Result<(GridState, SolveReport), SolveError> {
        match method {
            Method::Dc => self.solve_dc(input),
            Method::Combined => self.solve_combined(input),
            Method::Nr => {
                // Warm start from a few decomposed steps. If Newton stalls,
                // restart it from a longer decomposed run.
                let start = Instant::now();
                let mut steps = WARM_START_STEPS.min(self.cfg.max_iter_dc);
                let mut restarts = 0;
                loop {
                    let mut warm = SolveReport::new(Method::Nr);
                    let (x0, _) = self.run_dc(
                        input,
                        self.initial_temperatures(input),
                        &mut warm,
                        None,
                        steps,
                    )?;
                    match self.solve_nr(input, &x0) {
                        Ok((state, mut report)) => {
                            report.dc_iterations = warm.dc_iterations;
                            report.clamp_activations += warm.clamp_activations;
                            report.restarts = restarts;
                            report.trace.splice(0..0, warm.trace);
                            report.wall_time = start.elapsed();
                            return Ok((state, report));
                        }
                        Err(e) if steps < self.cfg.max_iter_dc && Self::newton_stalled(&e) => {
                            restarts += 1;
                            steps = (4 * steps).min(self.cfg.max_iter_dc);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
}

/// Convenience wrapper: plans and solves in one call.
pub fn solve_combined(
    spec: &GridSpec,
    input: &ScenarioInput,
    cfg: &SolverConfig,
) -> Result<(GridState, SolveReport), SolveError> {
    Solver::new(spec, *cfg)?.solve_combined(input)
}
