//! Space-time rescaling of nonlocal runs and the weak remainder against the
//! local equation.
//!
//! A base run lives on the box `L / eps` with a fixed lattice spacing, so the
//! rescaled solution `u_eps(t, x) = u(t / eps, x / eps)` on the box `L` is the
//! same array on a lattice refined by `eps`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, GridSpec, ModelParams};
use crate::initial::InitialDatum;
use crate::kernels::{self, F0Operator, KernelError, KernelSpec, SpatialKernel};
use crate::linear::LinearOptions;
use crate::nonlinear::{self, ModelKind, NonlinearError, NonlinearMode, NonlinearRunConfig};
use crate::particles::torus_delta;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("cadence: {0}")]
    Cadence(String),
    #[error("resolution: {0}")]
    Resolution(String),
    #[error("invalid study: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = ScalingError> = std::result::Result<T, E>;

/// Snapshots of a solution at increasing times on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
}

impl Trajectory {
    pub fn new(snapshots: Vec<(f64, Field)>) -> Result<Self> {
        let (times, fields): (Vec<_>, Vec<_>) = snapshots.into_iter().unzip();
        if times.is_empty() {
            return Err(ScalingError::Invalid("empty trajectory".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ScalingError::Invalid("times must increase".into()));
        }
        let g = *fields[0].grid();
        if fields.iter().any(|f| !f.grid().same_mesh(&g)) {
            return Err(ScalingError::Invalid("snapshots on different grids".into()));
        }
        Ok(Trajectory { times, fields })
    }

    pub fn grid(&self) -> &GridSpec {
        self.fields[0].grid()
    }

    fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.times.iter().position(|s| (s - t).abs() <= tol)
    }
}

/// Overlap weights between periodic node-centred cells: row `a` holds the
/// fractions of target cell `a` covered by each source cell.
fn overlap_weights(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    let hs = 1.0 / n_src as f64;
    let hd = 1.0 / n_dst as f64;
    (0..n_dst)
        .map(|a| {
            let lo = (a as f64 - 0.5) * hd;
            let hi = lo + hd;
            let first = ((lo / hs) + 0.5).floor() as i64;
            let last = ((hi / hs) + 0.5).ceil() as i64;
            let mut row = Vec::new();
            for b in first..=last {
                let (cl, ch) = ((b as f64 - 0.5) * hs, (b as f64 + 0.5) * hs);
                let w = (ch.min(hi) - cl.max(lo)).max(0.0) / hd;
                if w > 0.0 {
                    row.push((b.rem_euclid(n_src as i64) as usize, w));
                }
            }
            row
        })
        .collect()
}

fn remap(f: &Field, target: GridSpec) -> Field {
    let g = f.grid();
    let src = f.values();
    if g.nx == target.nx {
        return Field::from_values(target, src.clone()).expect("finite values");
    }
    let w = overlap_weights(g.nx, target.nx);
    let mut out = Field::zeros(target);
    let v = out.values_mut();
    for (a, ra) in w.iter().enumerate() {
        for (c, rc) in w.iter().enumerate() {
            for &(b, wb) in ra {
                for &(d, wd) in rc {
                    let ww = wb * wd;
                    for k in 0..target.ntheta {
                        v[[a, c, k]] += ww * src[[b, d, k]];
                    }
                }
            }
        }
    }
    out
}

/// Builds `u_eps(t, x) = u(t / eps, x / eps)` on `target`, whose box must be
/// `eps` times the base box, at the requested output times.
pub fn rescale_solution(base: &Trajectory, eps: f64, target: &GridSpec, out_times: &[f64]) -> Result<Trajectory> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(ScalingError::Invalid(format!("eps = {eps} must lie in (0, 1]")));
    }
    target.validate()?;
    let bg = base.grid();
    if (target.length - eps * bg.length).abs() > 1e-9 * target.length {
        return Err(ScalingError::Invalid(format!(
            "target box {} is not eps x base box {}",
            target.length, bg.length
        )));
    }
    if target.ntheta != bg.ntheta {
        return Err(ScalingError::Invalid("orientation grids differ".into()));
    }
    let mut snaps = Vec::with_capacity(out_times.len());
    for &t in out_times {
        let k = base.index_of(t / eps).ok_or_else(|| {
            ScalingError::Cadence(format!("base time {} for t = {t} was not stored", t / eps))
        })?;
        snaps.push((t, remap(&base.fields[k], *target)));
    }
    Trajectory::new(snaps)
}

/// `phi(x, theta) = b(|x - center| / radius) cos(m theta - phase)` with the
/// smooth bump `b(r) = exp(1 - 1 / (1 - r^2))` for `r < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub center: [f64; 2],
    pub radius: f64,
    pub frequency: u32,
    #[serde(default)]
    pub phase: f64,
}

/// Sup, L1 and L2 norms over `[0, T] x box x circle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub sup: f64,
    pub l1: f64,
    pub l2: f64,
}

impl TestFunction {
    /// A small library on the box `[0, length)^2`.
    pub fn defaults(length: f64) -> Vec<TestFunction> {
        let c = [0.5 * length, 0.5 * length];
        vec![
            TestFunction {
                center: c,
                radius: 0.35 * length,
                frequency: 1,
                phase: 0.0,
            },
            TestFunction {
                center: c,
                radius: 0.35 * length,
                frequency: 1,
                phase: 0.5 * PI,
            },
            TestFunction {
                center: c,
                radius: 0.35 * length,
                frequency: 2,
                phase: 0.0,
            },
        ]
    }

    pub fn validate(&self, length: f64) -> Result<()> {
        if !(self.radius > 0.0 && self.radius < 0.5 * length) {
            return Err(ScalingError::Invalid(format!(
                "test function radius {} must lie in (0, L/2)",
                self.radius
            )));
        }
        if self.frequency == 0 {
            return Err(ScalingError::Invalid("test function frequency must be >= 1".into()));
        }
        Ok(())
    }

    /// Bump value and `d b / d x` at `x` on a torus of side `length`.
    fn bump(&self, x: [f64; 2], length: f64) -> (f64, [f64; 2]) {
        let d = torus_delta(self.center, x, length);
        let r2 = (d[0] * d[0] + d[1] * d[1]) / (self.radius * self.radius);
        if r2 >= 1.0 {
            return (0.0, [0.0, 0.0]);
        }
        let s = 1.0 - r2;
        let b = (1.0 - 1.0 / s).exp();
        let g = -2.0 * b / (s * s * self.radius * self.radius);
        (b, [g * d[0], g * d[1]])
    }

    pub fn eval(&self, x: [f64; 2], theta: f64, length: f64) -> f64 {
        self.bump(x, length).0 * (self.frequency as f64 * theta - self.phase).cos()
    }

    /// `d phi / d theta`, the coordinate of `grad_omega phi` along `tau`.
    pub fn dtheta(&self, x: [f64; 2], theta: f64, length: f64) -> f64 {
        let m = self.frequency as f64;
        -m * self.bump(x, length).0 * (m * theta - self.phase).sin()
    }

    pub fn grad_x(&self, x: [f64; 2], theta: f64, length: f64) -> [f64; 2] {
        let (_, g) = self.bump(x, length);
        let c = (self.frequency as f64 * theta - self.phase).cos();
        [g[0] * c, g[1] * c]
    }

    /// Norms of `grad_omega phi` over the grid nodes and `[0, horizon]`.
    pub fn grad_omega_norms(&self, grid: &GridSpec, horizon: f64) -> GradNorms {
        let vol = grid.cell_volume();
        let (mut sup, mut l1, mut l2) = (0.0f64, 0.0, 0.0);
        for i in 0..grid.nx {
            for j in 0..grid.nx {
                for k in 0..grid.ntheta {
                    let v = self.dtheta([grid.x(i), grid.x(j)], grid.theta(k), grid.length).abs();
                    sup = sup.max(v);
                    l1 += v * vol;
                    l2 += v * v * vol;
                }
            }
        }
        GradNorms {
            sup,
            l1: horizon * l1,
            l2: (horizon * l2).sqrt(),
        }
    }
}

/// Weak remainder evaluated by both formulations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Remainder {
    /// `|int u_eps dphi/dtheta tau . (F0[u](s/eps, x/eps) - F1[u_eps])|`.
    pub force_form: f64,
    /// Same integral with the force difference written as
    /// `int K(x*) (u_eps(x - eps x*) - u_eps(x)) dx*`.
    pub increment_form: f64,
    /// Integral of the absolute integrand, the scale of roundoff.
    pub magnitude: f64,
}

impl Remainder {
    pub fn value(&self) -> f64 {
        self.force_form
    }

    pub fn relative_gap(&self) -> f64 {
        let d = (self.force_form - self.increment_form).abs();
        let s = self.force_form.abs().max(self.increment_form.abs()).max(1e-9 * self.magnitude);
        if s == 0.0 {
            0.0
        } else {
            d / s
        }
    }
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    if times.len() == 1 {
        return 0.0;
    }
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Weak remainder of the rescaled trajectory against `phi`. `u_eps` must sit
/// on the lattice of `base` mapped onto the box `eps L`.
pub fn weak_remainder(
    u_eps: &Trajectory,
    base: &Trajectory,
    eps: f64,
    phi: &TestFunction,
    kernel: &KernelSpec,
) -> Result<Remainder> {
    let kernel = kernel.spatial()?;
    let tg = *u_eps.grid();
    let bg = *base.grid();
    if tg.nx != bg.nx || tg.ntheta != bg.ntheta {
        return Err(ScalingError::Invalid("rescaled and base lattices differ".into()));
    }
    phi.validate(tg.length)?;
    let op = F0Operator::new(kernel, &bg)?;
    let table = kernels::reduce_kernel_on_lattice(kernel, &bg)?;
    let increments = IncrementForm::new(kernel, &bg);
    let weight = PhiWeight::new(phi, &tg);
    let vol = tg.cell_volume();

    let mut force_series = Vec::with_capacity(u_eps.times.len());
    let mut incr_series = Vec::with_capacity(u_eps.times.len());
    let mut abs_series = Vec::with_capacity(u_eps.times.len());
    for (t, ue) in u_eps.times.iter().zip(&u_eps.fields) {
        let k = base.index_of(t / eps).ok_or_else(|| {
            ScalingError::Cadence(format!("base time {} for t = {t} was not stored", t / eps))
        })?;
        let f0 = op.apply(&base.fields[k]);
        let f1 = kernels::f1_field(ue, &table)?;
        let u = ue.values();
        let (mut acc, mut abs) = (0.0, 0.0);
        for &(i, j) in &weight.nodes {
            for a in 0..tg.ntheta {
                let w = weight.at(i, j, a, &tg);
                if w == 0.0 {
                    continue;
                }
                let (s, c) = tg.theta(a).sin_cos();
                let dx = f0.x[[i, j, a]] - f1.x[[i, j, a]];
                let dy = f0.y[[i, j, a]] - f1.y[[i, j, a]];
                let v = u[[i, j, a]] * w * (-s * dx + c * dy);
                acc += v;
                abs += v.abs();
            }
        }
        force_series.push(acc * vol);
        abs_series.push(abs * vol);
        incr_series.push(increments.integrate(ue, &weight, &tg) * vol);
    }
    Ok(Remainder {
        force_form: trapezoid(&u_eps.times, &force_series).abs(),
        increment_form: trapezoid(&u_eps.times, &incr_series).abs(),
        magnitude: trapezoid(&u_eps.times, &abs_series),
    })
}

/// `dphi/dtheta` on the nodes inside the support of `phi`.
struct PhiWeight {
    nodes: Vec<(usize, usize)>,
    bump: ndarray::Array2<f64>,
    phi: TestFunction,
}

impl PhiWeight {
    fn new(phi: &TestFunction, g: &GridSpec) -> Self {
        let mut nodes = Vec::new();
        let mut bump = ndarray::Array2::zeros((g.nx, g.nx));
        for i in 0..g.nx {
            for j in 0..g.nx {
                let b = phi.bump([g.x(i), g.x(j)], g.length).0;
                if b != 0.0 {
                    nodes.push((i, j));
                    bump[[i, j]] = b;
                }
            }
        }
        PhiWeight {
            nodes,
            bump,
            phi: *phi,
        }
    }

    fn at(&self, i: usize, j: usize, a: usize, g: &GridSpec) -> f64 {
        let m = self.phi.frequency as f64;
        -m * self.bump[[i, j]] * (m * g.theta(a) - self.phi.phase).sin()
    }
}

/// Direct lattice sum over kernel offsets of the finite increments.
struct IncrementForm {
    offsets: Vec<(i64, i64)>,
    /// `[offset][theta][theta*]` kernel values times `dx^2 dtheta`.
    kx: Vec<f64>,
    ky: Vec<f64>,
    nt: usize,
}

impl IncrementForm {
    fn new(kernel: &SpatialKernel, g: &GridSpec) -> Self {
        let support = kernels::lattice_support(kernel, g);
        let nt = g.ntheta;
        let w = g.dx() * g.dx() * g.dtheta();
        let mut kx = Vec::with_capacity(support.len() * nt * nt);
        let mut ky = Vec::with_capacity(support.len() * nt * nt);
        for (_, y) in &support {
            for a in 0..nt {
                for b in 0..nt {
                    let v = kernel.eval(*y, g.theta(a), g.theta(b));
                    kx.push(w * v[0]);
                    ky.push(w * v[1]);
                }
            }
        }
        IncrementForm {
            offsets: support.into_iter().map(|(o, _)| o).collect(),
            kx,
            ky,
            nt,
        }
    }

    fn integrate(&self, ue: &Field, weight: &PhiWeight, g: &GridSpec) -> f64 {
        let n = g.nx as i64;
        let nt = self.nt;
        let u = ue.values();
        let mut diff = vec![0.0; nt];
        let mut fx = vec![0.0; nt];
        let mut fy = vec![0.0; nt];
        let mut acc = 0.0;
        for &(i, j) in &weight.nodes {
            fx.iter_mut().for_each(|v| *v = 0.0);
            fy.iter_mut().for_each(|v| *v = 0.0);
            for (s, &(p, q)) in self.offsets.iter().enumerate() {
                let is = (i as i64 + p).rem_euclid(n) as usize;
                let js = (j as i64 + q).rem_euclid(n) as usize;
                for b in 0..nt {
                    diff[b] = u[[is, js, b]] - u[[i, j, b]];
                }
                let base = s * nt * nt;
                for a in 0..nt {
                    let row = base + a * nt;
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for b in 0..nt {
                        sx += self.kx[row + b] * diff[b];
                        sy += self.ky[row + b] * diff[b];
                    }
                    fx[a] += sx;
                    fy[a] += sy;
                }
            }
            for a in 0..nt {
                let w = weight.at(i, j, a, g);
                if w == 0.0 {
                    continue;
                }
                let (sn, cs) = g.theta(a).sin_cos();
                acc += u[[i, j, a]] * w * (-sn * fx[a] + cs * fy[a]);
            }
        }
        acc
    }
}

/// Settings of an order study. Lengths and times of the base runs are in
/// microscopic units; the target box and horizon are macroscopic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderStudy {
    /// Side of the macroscopic box.
    pub length: f64,
    /// Lattice spacing of every base run.
    pub base_dx: f64,
    pub ntheta: usize,
    /// Largest base time step.
    pub base_dt: f64,
    pub eps_list: Vec<f64>,
    /// Macroscopic horizon `T`; base runs cover `T / eps`.
    pub horizon: f64,
    /// Number of output intervals on `[0, T]`.
    pub outputs: usize,
    pub c: f64,
    pub sigma0: f64,
    pub nu0: f64,
    pub kernel: SpatialKernel,
    #[serde(default)]
    pub linear: LinearOptions,
    /// Cap on `nx^2 ntheta` for a base run.
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub eps: f64,
    pub phi_id: usize,
    pub remainder: f64,
    pub remainder_increment: f64,
    pub grad_phi: GradNorms,
    /// Remainder over the sup norm of `grad_omega phi`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    /// 95% interval; absent with fewer than three points.
    pub interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub rows: Vec<OrderRow>,
    /// Per test function; `None` when the remainders vanish.
    pub fits: Vec<Option<SlopeFit>>,
    pub degenerate: bool,
    /// Largest relative gap between the two formulations.
    pub dual_gap: f64,
}

impl OrderReport {
    /// `eps phi_id remainder grad_phi_sup ratio` plus the extra norms.
    pub fn write_table<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# eps phi_id remainder grad_phi_sup ratio remainder_increment grad_phi_l1 grad_phi_l2"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.6e} {} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
                r.eps,
                r.phi_id,
                r.remainder,
                r.grad_phi.sup,
                r.ratio,
                r.remainder_increment,
                r.grad_phi.l1,
                r.grad_phi.l2
            )?;
        }
        Ok(())
    }

    /// Remainders of test function `phi_id` in the order of `eps_list`.
    pub fn series(&self, phi_id: usize) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.phi_id == phi_id).map(|r| (r.eps, r.remainder)).collect()
    }
}

/// Least-squares slope of `ln y` against `ln x` with a Student-t interval.
pub fn fit_log_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if points.len() < 2 || points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let interval = if points.len() >= 3 {
        let icpt = my - slope * mx;
        let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
        let df = n - 2.0;
        let se = (ssr / df / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").inverse_cdf(0.975);
        Some((slope - t * se, slope + t * se))
    } else {
        None
    };
    Some(SlopeFit { slope, interval })
}

/// Base grid for `eps`: box `L / eps` at the study's lattice spacing, with a
/// step that divides the base horizon into whole output intervals.
fn base_grid(study: &OrderStudy, eps: f64) -> Result<(GridSpec, usize)> {
    let nx_f = study.length / (eps * study.base_dx);
    let nx = nx_f.round();
    if (nx - nx_f).abs() > 1e-9 * nx_f || nx < 4.0 {
        return Err(ScalingError::Cadence(format!(
            "eps = {eps} gives a non-integer base lattice ({nx_f} nodes)"
        )));
    }
    let nx = nx as usize;
    let cells = nx * nx * study.ntheta;
    if cells > study.max_cells {
        return Err(ScalingError::Resolution(format!(
            "eps = {eps} needs {cells} cells, above the cap {}",
            study.max_cells
        )));
    }
    let t_base = study.horizon / eps;
    let per_output = ((t_base / study.outputs as f64 / study.base_dt) - 1e-9).ceil().max(1.0) as usize;
    let steps = per_output * study.outputs;
    let grid = GridSpec::new(nx, study.length / eps, study.ntheta, t_base / steps as f64)?;
    Ok((grid, per_output))
}

fn check_study(study: &OrderStudy, phis: &[TestFunction]) -> Result<()> {
    if study.eps_list.is_empty() {
        return Err(ScalingError::Invalid("eps_list is empty".into()));
    }
    if study.eps_list.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(ScalingError::Invalid("every eps must lie in (0, 1)".into()));
    }
    if study.eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ScalingError::Invalid("eps_list must decrease".into()));
    }
    if study.outputs == 0 || !(study.horizon > 0.0) || !(study.base_dt > 0.0) || !(study.base_dx > 0.0) {
        return Err(ScalingError::Invalid("outputs, horizon, base_dt and base_dx must be positive".into()));
    }
    if study.kernel.cutoff < 2.0 * study.base_dx {
        return Err(ScalingError::Resolution(format!(
            "kernel cutoff {} spans fewer than two lattice cells of {}",
            study.kernel.cutoff, study.base_dx
        )));
    }
    for phi in phis {
        phi.validate(study.length)?;
    }
    Ok(())
}

/// Runs the base problem for every `eps` and evaluates the remainder.
pub fn order_study(v0: &InitialDatum, study: &OrderStudy, phis: &[TestFunction]) -> Result<OrderReport> {
    check_study(study, phis)?;
    let spec = KernelSpec::SeparableRadial(study.kernel);
    let mut rows = Vec::new();
    let mut dual_gap = 0.0f64;
    for &eps in &study.eps_list {
        let (bg, per_output) = base_grid(study, eps)?;
        let target = GridSpec::new(bg.nx, study.length, study.ntheta, eps * bg.dt)?;
        // u0(x) = v0(eps x): the same nodal values on the two boxes
        let v = v0.build(&target)?;
        let u0 = Field::from_values(bg, v.values().clone())?;
        let params = ModelParams::new(study.c, eps * study.sigma0, eps * study.nu0)?;
        let mut cfg = NonlinearRunConfig::new(ModelKind::Nonlocal, spec.clone(), params);
        cfg.mode = NonlinearMode::SemiImplicit;
        cfg.linear = study.linear;
        cfg.linear.snapshot_every = Some(per_output);
        let run = nonlinear::solve_nonlinear(&u0, &cfg, study.horizon / eps)?;
        let base = Trajectory::new(run.snapshots)?;
        let out_times: Vec<f64> = base.times.iter().map(|t| t * eps).collect();
        let ue = rescale_solution(&base, eps, &target, &out_times)?;
        for (id, phi) in phis.iter().enumerate() {
            let rem = weak_remainder(&ue, &base, eps, phi, &spec)?;
            dual_gap = dual_gap.max(rem.relative_gap());
            let grad_phi = phi.grad_omega_norms(&target, study.horizon);
            rows.push(OrderRow {
                eps,
                phi_id: id,
                remainder: rem.force_form,
                remainder_increment: rem.increment_form,
                ratio: rem.force_form / grad_phi.sup,
                grad_phi,
            });
        }
    }
    let mut report = OrderReport {
        rows,
        fits: Vec::new(),
        degenerate: false,
        dual_gap,
    };
    report.fits = (0..phis.len()).map(|id| fit_log_slope(&report.series(id))).collect();
    report.degenerate = report.rows.iter().all(|r| r.remainder == 0.0);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RadialProfile;
    use approx::assert_abs_diff_eq;

    fn kernel() -> SpatialKernel {
        let mut k = SpatialKernel::isotropic(RadialProfile::Biweight, 0.5, 1.0, 1.0, 0.0);
        k.front_bias = 0.5;
        k
    }

    fn traj(grid: GridSpec, f: impl Fn(f64, f64, f64, f64) -> f64, times: &[f64]) -> Trajectory {
        Trajectory::new(
            times
                .iter()
                .map(|&t| (t, Field::from_fn(grid, |x, y, th| f(t, x, y, th))))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_eps_is_identity() {
        let g = GridSpec::new(8, 1.0, 8, 0.1).unwrap();
        let base = traj(g, |t, x, _, th| 1.0 + t + 0.1 * (2.0 * PI * x).sin() * th.cos(), &[0.0, 0.5, 1.0]);
        let out = rescale_solution(&base, 1.0, &g, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn homogeneous_data_rescale_in_time_only() {
        let g = GridSpec::new(8, 2.0, 8, 0.1).unwrap();
        let base = traj(g, |t, _, _, th| 1.0 + t * th.cos().powi(2), &[0.0, 1.0, 2.0]);
        let target = GridSpec::new(4, 1.0, 8, 0.05).unwrap();
        let out = rescale_solution(&base, 0.5, &target, &[0.5, 1.0]).unwrap();
        for (k, f) in out.fields.iter().enumerate() {
            let expect = &base.fields[k + 1];
            for i in 0..4 {
                for a in 0..8 {
                    assert_abs_diff_eq!(f.values()[[i, 3, a]], expect.values()[[0, 0, a]], epsilon = 1e-14);
                }
            }
        }
        assert!(matches!(
            rescale_solution(&base, 0.5, &target, &[0.3]),
            Err(ScalingError::Cadence(_))
        ));
    }

    #[test]
    fn mass_picks_up_the_jacobian() {
        let eps = 0.25;
        let g = GridSpec::new(16, 4.0, 8, 0.1).unwrap();
        let base = traj(g, |_, x, y, th| 2.0 + (0.5 * PI * x).cos() * (0.5 * PI * y).sin() + th.sin(), &[0.0]);
        let base_mass = base.fields[0].mass().unwrap();
        for nx in [16, 8, 32] {
            let target = GridSpec::new(nx, 1.0, 8, 0.1).unwrap();
            let out = rescale_solution(&base, eps, &target, &[0.0]).unwrap();
            // direct quadrature of u(x / eps) over the unit box
            assert_abs_diff_eq!(out.fields[0].mass().unwrap(), eps * eps * base_mass, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_function_gradients_match_finite_differences() {
        let l = 1.0;
        for phi in TestFunction::defaults(l) {
            for &(x, th) in &[([0.5, 0.5], 0.3), ([0.6, 0.41], 2.0), ([0.3, 0.7], 5.0), ([0.2, 0.5], 1.0)] {
                let h = 1e-6;
                let fd_t = (phi.eval(x, th + h, l) - phi.eval(x, th - h, l)) / (2.0 * h);
                assert_abs_diff_eq!(phi.dtheta(x, th, l), fd_t, epsilon = 1e-6);
                let g = phi.grad_x(x, th, l);
                for d in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[d] += h;
                    xm[d] -= h;
                    let fd = (phi.eval(xp, th, l) - phi.eval(xm, th, l)) / (2.0 * h);
                    assert_abs_diff_eq!(g[d], fd, epsilon = 1e-6);
                }
            }
            // support stays inside the box
            let g = GridSpec::new(64, l, 8, 0.1).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    let d = torus_delta(phi.center, [g.x(i), g.x(j)], l);
                    if d[0].hypot(d[1]) >= phi.radius {
                        assert_eq!(phi.eval([g.x(i), g.x(j)], 0.0, l), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn remainder_forms_agree_and_vanish_for_homogeneous_data() {
        let eps = 0.25;
        let bg = GridSpec::new(16, 4.0, 16, 0.1).unwrap();
        let spec = KernelSpec::SeparableRadial(kernel());
        let bump = |_: f64, x: f64, y: f64, th: f64| {
            1.0 + 0.5 * (0.5 * PI * x).cos() * (1.0 + 0.3 * (0.5 * PI * y).sin()) * (1.0 + 0.4 * th.cos())
        };
        let base = traj(bg, bump, &[0.0, 1.0, 2.0]);
        let tg = GridSpec::new(16, 1.0, 16, 0.025).unwrap();
        let ue = rescale_solution(&base, eps, &tg, &[0.0, 0.25, 0.5]).unwrap();
        let phi = TestFunction::defaults(1.0)[1];
        let r = weak_remainder(&ue, &base, eps, &phi, &spec).unwrap();
        assert!(r.force_form > 1e-6, "{r:?}");
        assert!(r.relative_gap() < 1e-10, "{r:?}");

        let flat = traj(bg, |t, _, _, th| 1.0 + t * th.sin(), &[0.0, 1.0, 2.0]);
        let ue = rescale_solution(&flat, eps, &tg, &[0.0, 0.25, 0.5]).unwrap();
        let r = weak_remainder(&ue, &flat, eps, &phi, &spec).unwrap();
        assert!(r.force_form < 1e-13 && r.increment_form == 0.0, "{r:?}");
    }

    #[test]
    fn slope_fit_recovers_a_power_law() {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05].iter().map(|e: &f64| (*e, 3.0 * e.powf(1.5))).collect();
        let fit = fit_log_slope(&pts).unwrap();
        assert_abs_diff_eq!(fit.slope, 1.5, epsilon = 1e-12);
        let (lo, hi) = fit.interval.unwrap();
        assert!(lo <= 1.5 + 1e-9 && hi >= 1.5 - 1e-9);
        assert!(fit_log_slope(&[(0.1, 0.0), (0.05, 0.0)]).is_none());
    }

    fn small_study(kernel: SpatialKernel) -> OrderStudy {
        OrderStudy {
            length: 1.0,
            base_dx: 0.125,
            ntheta: 16,
            base_dt: 0.25,
            eps_list: vec![0.5, 0.25],
            horizon: 0.25,
            outputs: 2,
            c: 1.0,
            sigma0: 1.0,
            nu0: 1.0,
            kernel,
            linear: LinearOptions::default(),
            max_cells: 1 << 20,
        }
    }

    fn datum() -> InitialDatum {
        InitialDatum::GaussianBump {
            mass: 1.0,
            center: [0.5, 0.5],
            width: 0.2,
            theta0: 0.7,
            angular_width: Some(1.0),
        }
    }

    #[test]
    fn order_study_reports_each_eps_and_decreases() {
        let report = order_study(&datum(), &small_study(kernel()), &TestFunction::defaults(1.0)[..2]).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.dual_gap < 1e-6);
        assert!(!report.degenerate);
        let s = report.series(1);
        assert!(s[1].1 < s[0].1, "{s:?}");
        let mut buf = Vec::new();
        report.write_table(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn doubling_the_frequency_keeps_the_ratio_within_two() {
        let theta0 = 0.25 * PI;
        let v0 = InitialDatum::GaussianBump {
            mass: 1.0,
            center: [0.5, 0.5],
            width: 0.2,
            theta0,
            angular_width: Some(0.3),
        };
        let mut study = small_study(kernel());
        study.ntheta = 32;
        study.eps_list = vec![0.5];
        // phases put the extremum of dphi/dtheta at the mean heading
        let phis: Vec<TestFunction> = [1u32, 2]
            .iter()
            .map(|&m| TestFunction {
                center: [0.5, 0.5],
                radius: 0.35,
                frequency: m,
                phase: m as f64 * theta0 - 0.5 * PI,
            })
            .collect();
        let report = order_study(&v0, &study, &phis).unwrap();
        let (r1, r2) = (report.rows[0].ratio, report.rows[1].ratio);
        assert_abs_diff_eq!(report.rows[1].grad_phi.sup / report.rows[0].grad_phi.sup, 2.0, epsilon = 0.05);
        assert!(r2 / r1 < 2.0 && r1 / r2 < 2.0, "{r1} {r2}");
    }

    #[test]
    fn zero_kernel_is_degenerate() {
        let mut k = kernel();
        k.mass = 0.0;
        let report = order_study(&datum(), &small_study(k), &TestFunction::defaults(1.0)[..1]).unwrap();
        assert!(report.degenerate);
        assert!(report.fits.iter().all(|f| f.is_none()));
    }

    #[test]
    fn infeasible_studies_are_rejected() {
        let mut s = small_study(kernel());
        s.eps_list = vec![0.3];
        assert!(matches!(order_study(&datum(), &s, &[]), Err(ScalingError::Cadence(_))));
        let mut s = small_study(kernel());
        s.max_cells = 100;
        assert!(matches!(order_study(&datum(), &s, &[]), Err(ScalingError::Resolution(_))));
        let mut s = small_study(kernel());
        s.kernel.cutoff = 0.2;
        assert!(matches!(order_study(&datum(), &s, &[]), Err(ScalingError::Resolution(_))));
    }
}
