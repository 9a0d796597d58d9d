//! Nonlinear alignment models: the linear solver closed by `F = F_0[u]`
//! (nonlocal) or `F = F_1[u]` (local).
//!
//! Two drivers are provided. Picard mode freezes the force of the previous
//! iterate along a whole window of length at most
//! `T_R = ln R / (R C_inf ||u||_inf)` and iterates linear solves to a fixed
//! point. Semi-implicit mode steps once per time step with the force
//! extrapolated to the step midpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, ModelParams, VectorField};
use crate::kernels::{self, F0Operator, KernelBounds, KernelError, KernelSpec, LocalTable};
use crate::linear::{
    solve_linear, step_count, Diagnostics, DriftField, DriftSchedule, ForceBound, LinearError, LinearOptions,
    SplitStepper, StepReport,
};

#[derive(Debug, Error)]
pub enum NonlinearError {
    #[error("window {window} exceeds the Picard limit {limit}")]
    WindowTooLong { window: f64, limit: f64 },
    #[error("Picard iteration did not converge in {iterations} iterations (last residual {last:e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    NotConverged { iterations: usize, residuals: Vec<f64> },
    #[error("initial datum has negative values (min {0:e})")]
    NegativeDatum(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = NonlinearError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Force `F_0[u]`, convolution in space.
    Nonlocal,
    /// Force `F_1[u]`, local in space.
    Local,
}

impl ModelKind {
    /// Index used by the kernel bounds.
    pub fn index(self) -> usize {
        match self {
            ModelKind::Nonlocal => 0,
            ModelKind::Local => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearMode {
    Picard,
    #[default]
    SemiImplicit,
}

#[derive(Debug, Clone)]
pub struct NonlinearRunConfig {
    pub model: ModelKind,
    pub kernel: KernelSpec,
    pub params: ModelParams,
    /// Window parameter `R > 1`.
    pub window_ratio: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub mode: NonlinearMode,
    pub linear: LinearOptions,
}

impl NonlinearRunConfig {
    pub fn new(model: ModelKind, kernel: KernelSpec, params: ModelParams) -> Self {
        NonlinearRunConfig {
            model,
            kernel,
            params,
            window_ratio: std::f64::consts::E,
            picard_tol: 1e-8,
            picard_max_iter: 50,
            mode: NonlinearMode::default(),
            linear: LinearOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_ratio > 1.0 && self.window_ratio.is_finite()) {
            return Err(NonlinearError::InvalidConfig(format!("R = {} must be > 1", self.window_ratio)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(NonlinearError::InvalidConfig("picard_tol must be > 0".into()));
        }
        if self.picard_max_iter == 0 {
            return Err(NonlinearError::InvalidConfig("picard_max_iter must be >= 1".into()));
        }
        if self.linear.report_every == 0 {
            return Err(NonlinearError::InvalidConfig("report_every must be >= 1".into()));
        }
        self.params.validate()?;
        self.kernel.validate()?;
        Ok(())
    }

    pub fn bounds(&self) -> Result<KernelBounds> {
        Ok(kernels::bounds(&self.kernel, &self.params)?)
    }
}

/// The force map `u -> F_i[u]` on a fixed grid.
#[derive(Debug, Clone)]
pub enum ForceOperator {
    Nonlocal(F0Operator),
    Local(LocalTable),
}

impl ForceOperator {
    pub fn new(model: ModelKind, kernel: &KernelSpec, grid: &crate::grid::GridSpec) -> Result<Self> {
        Ok(match model {
            ModelKind::Nonlocal => ForceOperator::Nonlocal(F0Operator::new(kernel.spatial()?, grid)?),
            ModelKind::Local => ForceOperator::Local(kernel.local_table(grid.ntheta)?),
        })
    }

    pub fn apply(&self, u: &Field) -> VectorField {
        match self {
            ForceOperator::Nonlocal(op) => op.apply(u),
            ForceOperator::Local(t) => kernels::f1_field(u, t).expect("table built for this grid"),
        }
    }

    /// Tangential drift and `sup |F|`.
    pub fn drift(&self, u: &Field) -> (DriftField, f64) {
        let f = self.apply(u);
        (DriftField::from_force(&f), f.sup_norm())
    }
}

/// Result of one Picard window.
#[derive(Debug, Clone)]
pub struct PicardWindow {
    pub endpoint: Field,
    /// The converged iterate at every step node, window-local times.
    pub trajectory: Vec<(f64, Field)>,
    pub iterations: usize,
    /// `sup_t ||u^(n+1)(t) - u^(n)(t)||_2` per iteration.
    pub residuals: Vec<f64>,
    /// `max ||u^(n)(t)||_inf / ||u0||_inf` over all iterates and steps.
    pub closure_ratio: f64,
    /// Smallest value seen in any iterate.
    pub min_value: f64,
    /// `T_R` for the window's initial datum.
    pub limit: f64,
    /// `max_t sup |F[u(t)]|` on the converged trajectory.
    pub force_sup: f64,
    pub dt: f64,
}

impl PicardWindow {
    /// Residuals strictly decrease from the first iteration on.
    pub fn residuals_decreasing(&self) -> bool {
        self.residuals.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0)
    }
}

fn check_datum(u0: &Field) -> Result<()> {
    u0.check_finite()?;
    let m = u0.min_value();
    if m < 0.0 {
        return Err(NonlinearError::NegativeDatum(m));
    }
    Ok(())
}

/// Picard iteration on one window starting from `u0`.
pub fn picard_window_solve(u0: &Field, cfg: &NonlinearRunConfig, t_window: f64) -> Result<PicardWindow> {
    cfg.validate()?;
    check_datum(u0)?;
    let op = ForceOperator::new(cfg.model, &cfg.kernel, u0.grid())?;
    let kb = cfg.bounds()?;
    picard_with(u0, cfg, &op, &kb, t_window)
}

fn picard_with(
    u0: &Field,
    cfg: &NonlinearRunConfig,
    op: &ForceOperator,
    kb: &KernelBounds,
    t_window: f64,
) -> Result<PicardWindow> {
    let i = cfg.model.index();
    let u_sup = u0.max_abs();
    let limit = kernels::picard_window(kb, u_sup, cfg.window_ratio, i)?;
    if !(t_window > 0.0) {
        return Err(NonlinearError::InvalidConfig(format!("window {t_window} must be > 0")));
    }
    if t_window > limit * (1.0 + 1e-9) {
        return Err(NonlinearError::WindowTooLong {
            window: t_window,
            limit,
        });
    }
    let grid = *u0.grid();
    let steps = step_count(t_window, grid.dt);
    let dt = t_window / steps as f64;
    let opts = LinearOptions {
        report_every: steps,
        snapshot_every: Some(1),
        ..cfg.linear
    };

    let (g0, _) = op.drift(u0);
    let mut nodes: Vec<DriftField> = Vec::new();
    let mut prev: Option<Vec<(f64, Field)>> = None;
    let mut prev_sup = u_sup;
    let mut residuals = Vec::new();
    let mut closure = if u_sup > 0.0 { 1.0f64 } else { 0.0 };
    let mut min_value = u0.min_value();

    for it in 1..=cfg.picard_max_iter {
        let schedule = if it == 1 {
            DriftSchedule::Frozen(g0.clone())
        } else {
            DriftSchedule::Sampled {
                t0: 0.0,
                dt,
                nodes: std::mem::take(&mut nodes),
            }
        };
        let bound = ForceBound::from_kernel(kb.k_inf(i), prev_sup);
        let run = solve_linear(u0, &schedule, bound, &cfg.params, t_window, &opts)?;
        let traj = run.snapshots;

        let residual = traj
            .iter()
            .enumerate()
            .map(|(n, (_, f))| {
                let before = prev.as_ref().map_or(u0, |p| &p[n].1);
                f.sub(before).lp_norm_unchecked(2.0)
            })
            .fold(0.0, f64::max);
        residuals.push(residual);

        let sup = traj.iter().map(|(_, f)| f.max_abs()).fold(0.0, f64::max);
        if u_sup > 0.0 {
            closure = closure.max(sup / u_sup);
        }
        min_value = traj.iter().map(|(_, f)| f.min_value()).fold(min_value, f64::min);
        prev_sup = sup;

        let mut force_sup = 0.0f64;
        let new_nodes: Vec<DriftField> = traj
            .iter()
            .map(|(_, f)| {
                let (g, s) = op.drift(f);
                force_sup = force_sup.max(s);
                g
            })
            .collect();
        // an unchanged force reproduces the same iterate exactly
        let fixed = match &schedule {
            DriftSchedule::Frozen(g) => new_nodes.iter().all(|n| n == g),
            DriftSchedule::Sampled { nodes: old, .. } => new_nodes == *old,
        };
        if residual < cfg.picard_tol || fixed {
            return Ok(PicardWindow {
                endpoint: traj.last().expect("non-empty trajectory").1.clone(),
                trajectory: traj,
                iterations: it,
                residuals,
                closure_ratio: closure,
                min_value,
                limit,
                force_sup,
                dt,
            });
        }
        nodes = new_nodes;
        prev = Some(traj);
    }
    Err(NonlinearError::NotConverged {
        iterations: cfg.picard_max_iter,
        residuals,
    })
}

/// Summary of one chained window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub t_start: f64,
    pub length: f64,
    pub limit: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub closure_ratio: f64,
    pub min_value: f64,
}

#[derive(Debug, Clone)]
pub struct NonlinearRun {
    pub final_field: Field,
    pub reports: Vec<StepReport>,
    pub windows: Vec<WindowSummary>,
    pub snapshots: Vec<(f64, Field)>,
    pub mass0: f64,
    /// Rate of the global envelope; infinite for the local model, which has
    /// no global bound.
    pub envelope_rate: f64,
    /// Time actually reached.
    pub horizon: f64,
    /// Whether the run reached the requested time.
    pub completed: bool,
    /// `max_t sup|F_0[u(t)]| / (sup|K| mass0)`; zero for the local model.
    pub force_ratio: f64,
    pub steps: usize,
}

impl NonlinearRun {
    pub fn envelope_ratio(&self) -> f64 {
        self.reports
            .iter()
            .filter(|r| r.linf > 0.0)
            .map(|r| r.linf / r.envelope)
            .fold(0.0, f64::max)
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| (r.mass - self.mass0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.reports.iter().map(|r| r.min_value).fold(f64::INFINITY, f64::min)
    }
}

/// Global growth rate `nu ||K||_{W} M (1 + nu/sigma sup|K| M)` of the
/// nonlocal model; infinite for the local one.
pub fn global_envelope_rate(cfg: &NonlinearRunConfig, kb: &KernelBounds, mass0: f64) -> f64 {
    match cfg.model {
        ModelKind::Nonlocal => {
            let p = &cfg.params;
            if mass0 == 0.0 || kb.k_sup == 0.0 {
                return 0.0;
            }
            p.nu * kb.k_sup_w1 * mass0 * (1.0 + p.nu / p.sigma * kb.k_sup * mass0)
        }
        ModelKind::Local => f64::INFINITY,
    }
}

/// Collects reports and snapshots along a global step sequence.
struct Recorder {
    diag: Diagnostics,
    reports: Vec<StepReport>,
    snapshots: Vec<(f64, Field)>,
    report_every: usize,
    snapshot_every: Option<usize>,
    step: usize,
    last_reported: usize,
}

impl Recorder {
    fn new(u0: &Field, cfg: &NonlinearRunConfig, rate: f64) -> Self {
        let diag = Diagnostics::new(u0, cfg.params.sigma, rate);
        let reports = vec![diag.report(0.0, u0)];
        let snapshots = if cfg.linear.snapshot_every.is_some() {
            vec![(0.0, u0.clone())]
        } else {
            Vec::new()
        };
        Recorder {
            diag,
            reports,
            snapshots,
            report_every: cfg.linear.report_every,
            snapshot_every: cfg.linear.snapshot_every,
            step: 0,
            last_reported: 0,
        }
    }

    fn record(&mut self, t: f64, u: &Field) {
        self.step += 1;
        self.diag.advance(t, u);
        if self.step.is_multiple_of(self.report_every) {
            self.reports.push(self.diag.report(t, u));
            self.last_reported = self.step;
        }
        if let Some(k) = self.snapshot_every {
            if self.step.is_multiple_of(k) {
                self.snapshots.push((t, u.clone()));
            }
        }
    }

    fn finish(&mut self, t: f64, u: &Field) {
        if self.last_reported != self.step {
            self.reports.push(self.diag.report(t, u));
        }
        if let Some(k) = self.snapshot_every {
            if !self.step.is_multiple_of(k) {
                self.snapshots.push((t, u.clone()));
            }
        }
    }
}

/// Semi-implicit stepping state: the force at the midpoint is extrapolated
/// from the two most recent step nodes.
struct SemiImplicit<'a> {
    op: &'a ForceOperator,
    stepper: SplitStepper,
    u: Field,
    drift: DriftField,
    drift_prev: Option<DriftField>,
    force_sup: f64,
}

impl<'a> SemiImplicit<'a> {
    fn new(u0: &Field, cfg: &NonlinearRunConfig, op: &'a ForceOperator) -> Result<Self> {
        let stepper = SplitStepper::new(*u0.grid(), cfg.params, &cfg.linear)?;
        let (drift, force_sup) = op.drift(u0);
        Ok(SemiImplicit {
            op,
            stepper,
            u: u0.clone(),
            drift,
            drift_prev: None,
            force_sup,
        })
    }

    fn advance(&mut self, dt: f64) -> Result<()> {
        let mid = match &self.drift_prev {
            Some(prev) => prev.lerp(&self.drift, 1.5),
            None => {
                let pred = self.stepper.step(&self.u, &self.drift, dt)?;
                let mut avg = self.u.clone();
                avg.axpy(1.0, &pred);
                self.op.drift(&avg.scaled(0.5)).0
            }
        };
        let next = self.stepper.step(&self.u, &mid, dt)?;
        if next.check_finite().is_err() {
            return Err(LinearError::NonFinite {
                t: f64::NAN,
                last_good: Box::new(self.u.clone()),
            }
            .into());
        }
        let (d, s) = self.op.drift(&next);
        self.drift_prev = Some(std::mem::replace(&mut self.drift, d));
        self.force_sup = s;
        self.u = next;
        Ok(())
    }
}

/// Runs the nonlinear model to `t_end`, or until the local model's window
/// collapses below ten time steps.
pub fn solve_nonlinear(u0: &Field, cfg: &NonlinearRunConfig, t_end: f64) -> Result<NonlinearRun> {
    cfg.validate()?;
    check_datum(u0)?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(NonlinearError::InvalidConfig(format!("T = {t_end} must be finite and > 0")));
    }
    let grid = *u0.grid();
    let op = ForceOperator::new(cfg.model, &cfg.kernel, &grid)?;
    let kb = cfg.bounds()?;
    let i = cfg.model.index();
    let mass0 = u0.mass()?;
    let rate = global_envelope_rate(cfg, &kb, mass0);
    let force_scale = kb.k_sup * mass0;
    let ratio = |s: f64| if s == 0.0 { 0.0 } else { s / force_scale };
    let mut rec = Recorder::new(u0, cfg, rate);
    let mut windows = Vec::new();
    let mut force_ratio = 0.0f64;
    let mut t = 0.0;
    let mut u = u0.clone();
    let mut completed = true;

    let collapsed = |u: &Field| -> Result<bool> {
        if cfg.model != ModelKind::Local {
            return Ok(false);
        }
        let tr = kernels::picard_window(&kb, u.max_abs(), cfg.window_ratio, i)?;
        Ok(tr < 10.0 * grid.dt)
    };

    match cfg.mode {
        NonlinearMode::Picard => {
            while t < t_end * (1.0 - 1e-12) {
                if collapsed(&u)? {
                    completed = false;
                    break;
                }
                let limit = kernels::picard_window(&kb, u.max_abs(), cfg.window_ratio, i)?;
                let w = limit.min(t_end - t);
                let win = picard_with(&u, cfg, &op, &kb, w)?;
                for (tl, f) in &win.trajectory[1..] {
                    rec.record(t + tl, f);
                }
                if cfg.model == ModelKind::Nonlocal {
                    force_ratio = force_ratio.max(ratio(win.force_sup));
                }
                windows.push(WindowSummary {
                    t_start: t,
                    length: w,
                    limit: win.limit,
                    iterations: win.iterations,
                    residuals: win.residuals.clone(),
                    closure_ratio: win.closure_ratio,
                    min_value: win.min_value,
                });
                u = win.endpoint;
                t += w;
            }
        }
        NonlinearMode::SemiImplicit => {
            let steps = step_count(t_end, grid.dt);
            let dt = t_end / steps as f64;
            let mut state = SemiImplicit::new(u0, cfg, &op)?;
            if cfg.model == ModelKind::Nonlocal {
                force_ratio = ratio(state.force_sup);
            }
            for n in 1..=steps {
                if collapsed(&state.u)? {
                    completed = false;
                    break;
                }
                state.advance(dt).map_err(|e| match e {
                    NonlinearError::Linear(LinearError::NonFinite { last_good, .. }) => {
                        NonlinearError::Linear(LinearError::NonFinite {
                            t: n as f64 * dt,
                            last_good,
                        })
                    }
                    other => other,
                })?;
                t = n as f64 * dt;
                rec.record(t, &state.u);
                if cfg.model == ModelKind::Nonlocal {
                    force_ratio = force_ratio.max(ratio(state.force_sup));
                }
            }
            u = state.u;
        }
    }
    rec.finish(t, &u);
    Ok(NonlinearRun {
        final_field: u,
        reports: rec.reports,
        windows,
        snapshots: rec.snapshots,
        mass0,
        envelope_rate: rate,
        horizon: t,
        completed,
        force_ratio,
        steps: rec.step,
    })
}

/// Growth of the discrepancy between two solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub p: f64,
    pub times: Vec<f64>,
    /// `||u1(t) - u2(t)||_p / ||u01 - u02||_p`.
    pub ratio: Vec<f64>,
    /// `||u1(t) - u2(t)||_p / ||u01 - u02||_inf`.
    pub ratio_linf_data: Vec<f64>,
    /// Smallest `C` with `ratio(t) <= e^{C t}` on the sampled times.
    pub fitted_rate: f64,
    /// Smallest `C` with `ratio_linf_data(t) <= e^{C t}` for `t > 0`.
    pub fitted_rate_linf_data: f64,
    /// Rate of the linear estimate with the force bounded through the
    /// largest density seen, `C_inf(K ||u||_inf)`.
    pub reference_rate: f64,
    /// The data coincide; ratios then hold the raw discrepancy.
    pub identical: bool,
}

fn fit_rate(times: &[f64], r: &[f64]) -> f64 {
    times
        .iter()
        .zip(r)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, v)| if *v == 0.0 { f64::NEG_INFINITY } else { v.ln() / t })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs both data with matched time steps and records the discrepancy
/// growth at every step node.
pub fn continuity_study(
    u01: &Field,
    u02: &Field,
    cfg: &NonlinearRunConfig,
    p: f64,
    t_end: f64,
) -> Result<ContinuityReport> {
    cfg.validate()?;
    check_datum(u01)?;
    check_datum(u02)?;
    if !(p >= 2.0) {
        return Err(NonlinearError::InvalidConfig(format!("p = {p} must be >= 2")));
    }
    if !u01.grid().same_mesh(u02.grid()) || u01.grid().dt != u02.grid().dt {
        return Err(NonlinearError::InvalidConfig("data live on different grids".into()));
    }
    let grid = *u01.grid();
    let op = ForceOperator::new(cfg.model, &cfg.kernel, &grid)?;
    let kb = cfg.bounds()?;
    let i = cfg.model.index();

    let d0 = u01.sub(u02);
    let d0p = d0.lp_norm_unchecked(p);
    let d0inf = d0.max_abs();
    let identical = d0p == 0.0;
    let (norm_p, norm_inf) = if identical { (1.0, 1.0) } else { (d0p, d0inf) };

    let mut times = vec![0.0];
    let mut ratio = vec![d0p / norm_p];
    let mut ratio_inf = vec![d0p / norm_inf];
    let mut sup_seen = u01.max_abs().max(u02.max_abs());
    let mut push = |t: f64, a: &Field, b: &Field, sup_seen: &mut f64| {
        let d = a.sub(b).lp_norm_unchecked(p);
        times.push(t);
        ratio.push(d / norm_p);
        ratio_inf.push(d / norm_inf);
        *sup_seen = sup_seen.max(a.max_abs()).max(b.max_abs());
    };

    match cfg.mode {
        NonlinearMode::SemiImplicit => {
            let steps = step_count(t_end, grid.dt);
            let dt = t_end / steps as f64;
            let mut a = SemiImplicit::new(u01, cfg, &op)?;
            let mut b = SemiImplicit::new(u02, cfg, &op)?;
            for n in 1..=steps {
                a.advance(dt)?;
                b.advance(dt)?;
                push(n as f64 * dt, &a.u, &b.u, &mut sup_seen);
            }
        }
        NonlinearMode::Picard => {
            let (mut a, mut b) = (u01.clone(), u02.clone());
            let mut t = 0.0;
            while t < t_end * (1.0 - 1e-12) {
                let la = kernels::picard_window(&kb, a.max_abs(), cfg.window_ratio, i)?;
                let lb = kernels::picard_window(&kb, b.max_abs(), cfg.window_ratio, i)?;
                let w = la.min(lb).min(t_end - t);
                if cfg.model == ModelKind::Local && w < 10.0 * grid.dt && w < t_end - t {
                    break;
                }
                let wa = picard_with(&a, cfg, &op, &kb, w)?;
                let wb = picard_with(&b, cfg, &op, &kb, w)?;
                for ((tl, fa), (_, fb)) in wa.trajectory[1..].iter().zip(&wb.trajectory[1..]) {
                    push(t + tl, fa, fb, &mut sup_seen);
                }
                a = wa.endpoint;
                b = wb.endpoint;
                t += w;
            }
        }
    }
    let reference_rate = kernels::growth_constant(kb.k_inf(i) * sup_seen, &cfg.params);
    let (fitted_rate, fitted_rate_linf_data) = if identical {
        (0.0, 0.0)
    } else {
        (fit_rate(&times, &ratio), fit_rate(&times, &ratio_inf))
    };
    Ok(ContinuityReport {
        p,
        times,
        ratio,
        ratio_linf_data: ratio_inf,
        fitted_rate,
        fitted_rate_linf_data,
        reference_rate,
        identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::initial::InitialDatum;
    use crate::kernels::{RadialProfile, SpatialKernel};
    use std::f64::consts::PI;

    fn params() -> ModelParams {
        ModelParams::new(1.0, 0.5, 1.0).unwrap()
    }

    fn bump(g: GridSpec) -> Field {
        InitialDatum::GaussianBump {
            mass: 1.0,
            center: [0.5, 0.5],
            width: 0.15,
            theta0: 0.5,
            angular_width: Some(0.8),
        }
        .build(&g)
        .unwrap()
    }

    fn spatial() -> KernelSpec {
        KernelSpec::SeparableRadial(SpatialKernel::isotropic(RadialProfile::Biweight, 0.25, 1.0, 1.0, 0.5))
    }

    #[test]
    fn zero_kernel_converges_in_one_iteration() {
        let g = GridSpec::new(8, 1.0, 16, 0.05).unwrap();
        let cfg = NonlinearRunConfig {
            mode: NonlinearMode::Picard,
            ..NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 0.0, b: 0.0 }, params())
        };
        let u0 = bump(g);
        let w = picard_window_solve(&u0, &cfg, 0.5).unwrap();
        assert_eq!(w.iterations, 1);
        let lin = solve_linear(
            &u0,
            &DriftSchedule::Frozen(DriftField::zeros(g)),
            ForceBound::ZERO,
            &params(),
            0.5,
            &LinearOptions::default(),
        )
        .unwrap();
        assert!(w.endpoint.max_abs_diff(&lin.final_field) == 0.0);
    }

    #[test]
    fn window_longer_than_limit_is_rejected() {
        let g = GridSpec::new(8, 1.0, 16, 0.01).unwrap();
        let cfg = NonlinearRunConfig {
            mode: NonlinearMode::Picard,
            ..NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 1.0, b: 0.0 }, params())
        };
        let u0 = bump(g);
        let kb = cfg.bounds().unwrap();
        let lim = kernels::picard_window(&kb, u0.max_abs(), cfg.window_ratio, 1).unwrap();
        assert!(matches!(
            picard_window_solve(&u0, &cfg, 2.0 * lim),
            Err(NonlinearError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn negative_datum_is_rejected() {
        let g = GridSpec::new(8, 1.0, 16, 0.01).unwrap();
        let cfg = NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 1.0, b: 0.0 }, params());
        let u0 = Field::constant(g, -0.1);
        assert!(matches!(solve_nonlinear(&u0, &cfg, 0.1), Err(NonlinearError::NegativeDatum(_))));
    }

    /// Independent reference for x-homogeneous data with `k = omega*`: the
    /// orientation profile alone obeys
    /// `u' = sigma D2 u - nu D(u J . tau)`, `J = int omega* u`, integrated
    /// with classical RK4 on the same three-point and upwind stencils.
    fn theta_line_reference(u0: &[f64], sigma: f64, nu: f64, t_end: f64, steps: usize) -> Vec<f64> {
        let n = u0.len();
        let h = 2.0 * PI / n as f64;
        let rhs = |u: &[f64]| -> Vec<f64> {
            let (mut jx, mut jy) = (0.0, 0.0);
            for (k, v) in u.iter().enumerate() {
                let th = k as f64 * h;
                jx += h * v * th.cos();
                jy += h * v * th.sin();
            }
            let g: Vec<f64> = (0..n)
                .map(|k| {
                    let th = k as f64 * h;
                    -th.sin() * jx + th.cos() * jy
                })
                .collect();
            let mut flux = vec![0.0; n];
            for k in 0..n {
                let kp = (k + 1) % n;
                let a = 0.5 * nu * (g[k] + g[kp]);
                flux[k] = if a > 0.0 { a * u[k] } else { a * u[kp] };
            }
            (0..n)
                .map(|k| {
                    let km = (k + n - 1) % n;
                    let kp = (k + 1) % n;
                    sigma * (u[kp] - 2.0 * u[k] + u[km]) / (h * h) - (flux[k] - flux[km]) / h
                })
                .collect()
        };
        let dt = t_end / steps as f64;
        let mut u = u0.to_vec();
        let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
        for _ in 0..steps {
            let k1 = rhs(&u);
            let k2 = rhs(&add(&u, &k1, 0.5 * dt));
            let k3 = rhs(&add(&u, &k2, 0.5 * dt));
            let k4 = rhs(&add(&u, &k3, dt));
            for k in 0..n {
                u[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            }
        }
        u
    }

    #[test]
    fn homogeneous_data_matches_theta_line_reference() {
        let g = GridSpec::new(4, 1.0, 32, 0.0025).unwrap();
        let p = ModelParams::new(1.0, 0.3, 1.0).unwrap();
        let u0 = Field::from_fn(g, |_, _, t| (1.0 + 0.7 * (t - 1.0).cos()) / (2.0 * PI));
        let cfg = NonlinearRunConfig {
            mode: NonlinearMode::Picard,
            picard_tol: 1e-12,
            ..NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 1.0, b: 0.0 }, p)
        };
        let kb = cfg.bounds().unwrap();
        let w = kernels::picard_window(&kb, u0.max_abs(), cfg.window_ratio, 1).unwrap();
        let res = picard_window_solve(&u0, &cfg, w).unwrap();
        let reference = theta_line_reference(&u0.profile(0, 0), p.sigma, p.nu, w, 4000);
        let scale = u0.max_abs();
        for i in 0..4 {
            for j in 0..4 {
                let prof = res.endpoint.profile(i, j);
                let err = prof.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err < 1e-6 * scale, "err {err}");
            }
        }
    }

    #[test]
    fn picard_window_contracts_and_closes() {
        let g = GridSpec::new(16, 1.0, 16, 0.01).unwrap();
        let u0 = bump(g);
        for model in [ModelKind::Nonlocal, ModelKind::Local] {
            let cfg = NonlinearRunConfig {
                mode: NonlinearMode::Picard,
                ..NonlinearRunConfig::new(model, spatial(), params())
            };
            let kb = cfg.bounds().unwrap();
            let lim = kernels::picard_window(&kb, u0.max_abs(), cfg.window_ratio, model.index()).unwrap();
            let w = picard_window_solve(&u0, &cfg, 0.25 * lim).unwrap();
            assert!(w.residuals_decreasing(), "{:?}", w.residuals);
            assert!(w.closure_ratio <= 1.05 * cfg.window_ratio);
            assert!(w.min_value >= -1e-12 * u0.max_abs());
        }
    }

    #[test]
    fn picard_limit_is_a_fixed_point() {
        let g = GridSpec::new(16, 1.0, 16, 0.01).unwrap();
        let u0 = bump(g);
        let cfg = NonlinearRunConfig {
            mode: NonlinearMode::Picard,
            ..NonlinearRunConfig::new(ModelKind::Nonlocal, spatial(), params())
        };
        let kb = cfg.bounds().unwrap();
        let lim = kernels::picard_window(&kb, u0.max_abs(), cfg.window_ratio, 0).unwrap();
        let win = picard_window_solve(&u0, &cfg, 0.5 * lim).unwrap();
        let op = ForceOperator::new(cfg.model, &cfg.kernel, &g).unwrap();
        let nodes: Vec<DriftField> = win.trajectory.iter().map(|(_, f)| op.drift(f).0).collect();
        let again = solve_linear(
            &u0,
            &DriftSchedule::Sampled {
                t0: 0.0,
                dt: win.dt,
                nodes,
            },
            ForceBound::ZERO,
            &cfg.params,
            0.5 * lim,
            &LinearOptions::default(),
        )
        .unwrap();
        let change = again.final_field.sub(&win.endpoint).lp_norm(2.0).unwrap();
        assert!(change < 2.0 * cfg.picard_tol, "{change}");
    }

    #[test]
    fn zero_datum_stays_zero() {
        let g = GridSpec::new(8, 1.0, 16, 0.05).unwrap();
        for mode in [NonlinearMode::Picard, NonlinearMode::SemiImplicit] {
            let cfg = NonlinearRunConfig {
                mode,
                ..NonlinearRunConfig::new(ModelKind::Nonlocal, spatial(), params())
            };
            let run = solve_nonlinear(&Field::zeros(g), &cfg, 1.0).unwrap();
            assert_eq!(run.final_field.max_abs(), 0.0);
            assert!(run.completed);
        }
    }

    #[test]
    fn nonlocal_runs_conserve_mass_and_respect_bounds() {
        let g = GridSpec::new(16, 1.0, 16, 0.02).unwrap();
        let u0 = bump(g);
        for mode in [NonlinearMode::Picard, NonlinearMode::SemiImplicit] {
            let cfg = NonlinearRunConfig {
                mode,
                ..NonlinearRunConfig::new(ModelKind::Nonlocal, spatial(), params())
            };
            let run = solve_nonlinear(&u0, &cfg, 0.6).unwrap();
            assert!(run.max_mass_drift() <= 1e-10 * run.mass0);
            assert!(run.envelope_ratio() <= 1.05);
            assert!(run.force_ratio <= 1.0);
            assert!(run.min_value() >= -1e-12 * u0.max_abs());
        }
    }

    #[test]
    fn picard_and_semi_implicit_agree() {
        let g = GridSpec::new(16, 1.0, 16, 0.01).unwrap();
        let p = ModelParams::new(1.0, 1.0, 0.1).unwrap();
        let u0 = InitialDatum::GaussianBump {
            mass: 1.0,
            center: [0.5, 0.5],
            width: 0.25,
            theta0: 0.5,
            angular_width: Some(0.8),
        }
        .build(&g)
        .unwrap();
        let run = |mode, dt: f64| {
            let cfg = NonlinearRunConfig {
                mode,
                ..NonlinearRunConfig::new(ModelKind::Local, spatial(), p)
            };
            let u = Field::from_values(g.with_dt(dt), u0.values().clone()).unwrap();
            let r = solve_nonlinear(&u, &cfg, 0.3).unwrap();
            assert!(r.completed);
            if mode == NonlinearMode::Picard {
                assert!(r.windows.len() >= 2);
            }
            r.final_field
        };
        let scale = u0.max_abs();
        let d1 = run(NonlinearMode::Picard, 0.01).max_abs_diff(&run(NonlinearMode::SemiImplicit, 0.01));
        let d2 = run(NonlinearMode::Picard, 0.005).max_abs_diff(&run(NonlinearMode::SemiImplicit, 0.005));
        assert!(d1 < 1e-3 * scale, "{d1}");
        assert!(d2 < d1, "{d1} {d2}");
    }

    #[test]
    fn local_model_stops_when_windows_collapse() {
        let g = GridSpec::new(8, 1.0, 16, 0.05).unwrap();
        let cfg = NonlinearRunConfig {
            mode: NonlinearMode::Picard,
            ..NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 40.0, b: 0.0 }, params())
        };
        let run = solve_nonlinear(&bump(g), &cfg, 5.0).unwrap();
        assert!(!run.completed);
        assert_eq!(run.horizon, 0.0);
    }

    #[test]
    fn continuity_examples() {
        let g = GridSpec::new(8, 1.0, 16, 0.02).unwrap();
        let u0 = bump(g);
        let cfg = NonlinearRunConfig::new(ModelKind::Nonlocal, spatial(), params());
        let same = continuity_study(&u0, &u0, &cfg, 2.0, 0.2).unwrap();
        assert!(same.identical);
        assert!(same.ratio.iter().all(|r| *r == 0.0));

        let zero = NonlinearRunConfig::new(ModelKind::Local, KernelSpec::DipolarNematic { a: 0.0, b: 0.0 }, params());
        let pert = Field::from_fn(g, |x, _, t| 1e-3 * (1.0 + (2.0 * PI * x).sin() * t.cos()));
        let mut u1 = u0.clone();
        u1.axpy(1.0, &pert);
        let rep = continuity_study(&u0, &u1, &zero, 2.0, 0.4).unwrap();
        assert!(rep.ratio.iter().all(|r| *r <= 1.0 + 1e-12));
    }
}
