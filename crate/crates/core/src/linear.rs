//! Linear Fokker-Planck solver with a prescribed alignment field:
//!
//! `d_t u + div_x(c omega u) = sigma Lap_omega u - nu d_theta(u g)`
//!
//! where `g = F . tau` is the tangential coefficient of the field. The drift
//! sign is the aligning one: orientations rotate toward `F`.
//!
//! Time stepping is Strang splitting, transport and drift half steps around
//! a full diffusion step.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, GridSpec, ModelParams, VectorField};
use crate::sphere::{wavenumber, PeriodicSpectral};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("drift step rejected: dt = {dt} exceeds the positivity limit {admissible_dt}")]
    DriftCfl { dt: f64, admissible_dt: f64 },
    #[error("upwind transport rejected: dt = {dt} exceeds the CFL limit {admissible_dt}")]
    TransportCfl { dt: f64, admissible_dt: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64, last_good: Box<Field> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl LinearError {
    /// Largest step the solver would have accepted, when the rejection was a
    /// stability limit.
    pub fn suggested_dt(&self) -> Option<f64> {
        match self {
            LinearError::DriftCfl { admissible_dt, .. } | LinearError::TransportCfl { admissible_dt, .. } => {
                Some(*admissible_dt)
            }
            _ => None,
        }
    }
}

pub type Result<T, E = LinearError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    /// Conservative remap of a limited parabolic reconstruction; no CFL limit.
    #[default]
    SemiLagrangian,
    /// First-order upwind, needs `c dt <= dx`.
    Upwind,
    /// Exact Fourier shift. Not positivity preserving.
    SpectralShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionScheme {
    /// Backward Euler on the three-point periodic Laplacian.
    BackwardEuler,
    /// Exact exponential of the three-point Laplacian.
    #[default]
    Exponential,
    /// Backward Euler on the spectral Laplacian.
    SpectralImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearOptions {
    pub transport: TransportScheme,
    pub diffusion: DiffusionScheme,
    /// Steps between reports; the final step is always reported.
    pub report_every: usize,
    /// Steps between stored snapshots, if any.
    pub snapshot_every: Option<usize>,
}

impl Default for LinearOptions {
    fn default() -> Self {
        LinearOptions {
            transport: TransportScheme::default(),
            diffusion: DiffusionScheme::default(),
            report_every: 1,
            snapshot_every: None,
        }
    }
}

/// Tangential coefficient `g = F . tau` of the alignment field at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    grid: GridSpec,
    tau: Array3<f64>,
}

impl DriftField {
    pub fn zeros(grid: GridSpec) -> Self {
        DriftField {
            grid,
            tau: Array3::zeros(grid.shape()),
        }
    }

    pub fn from_values(grid: GridSpec, tau: Array3<f64>) -> Result<Self> {
        if tau.dim() != grid.shape() {
            return Err(GridError::ShapeMismatch {
                expected: grid.shape(),
                got: tau.dim(),
            }
            .into());
        }
        if let Some((idx, _)) = tau.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite(idx.0, idx.1, idx.2).into());
        }
        Ok(DriftField { grid, tau })
    }

    /// Projects a Cartesian force field onto the tangent direction.
    pub fn from_force(force: &VectorField) -> Self {
        DriftField {
            grid: force.grid,
            tau: force.tangential(),
        }
    }

    /// The field of a spatially and orientationally constant vector `v`.
    pub fn constant(grid: GridSpec, v: [f64; 2]) -> Self {
        let tau = Array3::from_shape_fn(grid.shape(), |(_, _, k)| {
            let [c, s] = grid.omega(k);
            -s * v[0] + c * v[1]
        });
        DriftField { grid, tau }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn tau_component(&self) -> &Array3<f64> {
        &self.tau
    }

    pub fn max_abs(&self) -> f64 {
        self.tau.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(1 - w) self + w other`.
    pub fn lerp(&self, other: &DriftField, w: f64) -> DriftField {
        let mut tau = self.tau.clone();
        Zip::from(&mut tau).and(&other.tau).for_each(|a, &b| *a += w * (b - *a));
        DriftField { grid: self.grid, tau }
    }
}

/// Time dependence of the prescribed field.
#[derive(Debug, Clone)]
pub enum DriftSchedule {
    Frozen(DriftField),
    /// Samples at `t0 + n dt`, linearly interpolated and held constant past
    /// the ends.
    Sampled { t0: f64, dt: f64, nodes: Vec<DriftField> },
}

impl DriftSchedule {
    pub fn at(&self, t: f64) -> Cow<'_, DriftField> {
        match self {
            DriftSchedule::Frozen(d) => Cow::Borrowed(d),
            DriftSchedule::Sampled { t0, dt, nodes } => {
                let s = ((t - t0) / dt).max(0.0);
                let n = s.floor() as usize;
                if n + 1 >= nodes.len() {
                    return Cow::Borrowed(nodes.last().expect("schedule has at least one node"));
                }
                let w = s - n as f64;
                if w < 1e-12 {
                    Cow::Borrowed(&nodes[n])
                } else if w > 1.0 - 1e-12 {
                    Cow::Borrowed(&nodes[n + 1])
                } else {
                    Cow::Owned(nodes[n].lerp(&nodes[n + 1], w))
                }
            }
        }
    }

    fn grid(&self) -> GridSpec {
        match self {
            DriftSchedule::Frozen(d) => d.grid,
            DriftSchedule::Sampled { nodes, .. } => nodes[0].grid,
        }
    }
}

/// Bounds on the force used by the growth constant
/// `C(F) = nu ||F||_{W^{1,inf}} (1 + nu/sigma ||F||_inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceBound {
    /// `sup |F|`.
    pub sup: f64,
    /// `sup |F| + sup |d_theta F|`.
    pub w1inf: f64,
}

impl ForceBound {
    pub const ZERO: ForceBound = ForceBound { sup: 0.0, w1inf: 0.0 };

    /// A constant vector has no orientation derivative.
    pub fn constant(v: [f64; 2]) -> Self {
        let n = v[0].hypot(v[1]);
        ForceBound { sup: n, w1inf: n }
    }

    /// Bound implied by a kernel norm and the max-norm of the density.
    pub fn from_kernel(k_inf: f64, density_sup: f64) -> Self {
        let b = k_inf * density_sup;
        ForceBound { sup: b, w1inf: b }
    }

    /// Measured on a sampled force, differentiating spectrally in theta.
    pub fn measure(force: &VectorField) -> Self {
        let g = force.grid;
        let plan = PeriodicSpectral::new(g.ntheta);
        let mut scratch = Vec::new();
        let mut dx = force.x.clone();
        let mut dy = force.y.clone();
        for arr in [&mut dx, &mut dy] {
            for mut lane in arr.rows_mut() {
                let mut buf = lane.to_vec();
                plan.differentiate(&mut buf, &mut scratch, 1);
                lane.iter_mut().zip(&buf).for_each(|(o, v)| *o = *v);
            }
        }
        let sup = force.sup_norm();
        let dsup = Zip::from(&dx).and(&dy).fold(0.0f64, |m, a, b| m.max(a.hypot(*b)));
        ForceBound { sup, w1inf: sup + dsup }
    }

    pub fn max(self, other: ForceBound) -> Self {
        ForceBound {
            sup: self.sup.max(other.sup),
            w1inf: self.w1inf.max(other.w1inf),
        }
    }

    pub fn growth_rate(&self, params: &ModelParams) -> f64 {
        params.nu * self.w1inf * (1.0 + params.nu / params.sigma * self.sup)
    }
}

/// Diagnostics recorded at a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: f64,
    pub mass: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub min_value: f64,
    /// `||u0||_inf e^{C t}`.
    pub envelope: f64,
    /// `||u0||_2 e^{C t}`.
    pub l2_envelope: f64,
    pub polarization: [f64; 2],
    /// `sigma int_0^t ||d_theta u||_2^2 ds` (trapezoid in time).
    pub dissipation: f64,
    /// `2 ||u0||_2^2 e^{2 C t}`.
    pub dissipation_bound: f64,
}

impl StepReport {
    pub fn within_envelope(&self, margin: f64) -> bool {
        self.linf <= margin * self.envelope
    }
}

/// Writes reports as whitespace-separated columns.
pub fn write_diagnostics<W: Write>(reports: &[StepReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# t mass L1 L2 Linf min envelope polarization_x polarization_y")?;
    for r in reports {
        writeln!(
            w,
            "{:.9e} {:.15e} {:.15e} {:.15e} {:.15e} {:.15e} {:.15e} {:.9e} {:.9e}",
            r.t, r.mass, r.l1, r.l2, r.linf, r.min_value, r.envelope, r.polarization[0], r.polarization[1]
        )?;
    }
    Ok(())
}

/// Result of a linear solve.
#[derive(Debug, Clone)]
pub struct LinearRun {
    pub final_field: Field,
    pub reports: Vec<StepReport>,
    pub snapshots: Vec<(f64, Field)>,
    pub growth_rate: f64,
    pub dt: f64,
    pub steps: usize,
}

impl LinearRun {
    /// `max_t ||u(t)||_inf / envelope(t)`.
    pub fn envelope_ratio(&self) -> f64 {
        self.reports.iter().map(|r| ratio(r.linf, r.envelope)).fold(0.0, f64::max)
    }

    pub fn l2_envelope_ratio(&self) -> f64 {
        self.reports.iter().map(|r| ratio(r.l2, r.l2_envelope)).fold(0.0, f64::max)
    }

    pub fn dissipation_ratio(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| ratio(r.dissipation, r.dissipation_bound))
            .fold(0.0, f64::max)
    }

    pub fn max_mass_drift(&self) -> f64 {
        let m0 = self.reports[0].mass;
        self.reports.iter().map(|r| (r.mass - m0).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.reports.iter().map(|r| r.min_value).fold(f64::INFINITY, f64::min)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Strang-split stepper with cached transforms.
#[derive(Debug, Clone)]
pub struct SplitStepper {
    grid: GridSpec,
    params: ModelParams,
    transport: TransportScheme,
    diffusion: DiffusionScheme,
    x_plan: PeriodicSpectral,
    theta_plan: PeriodicSpectral,
}

impl SplitStepper {
    pub fn new(grid: GridSpec, params: ModelParams, opts: &LinearOptions) -> Result<Self> {
        grid.validate()?;
        params.validate()?;
        Ok(SplitStepper {
            grid,
            params,
            transport: opts.transport,
            diffusion: opts.diffusion,
            x_plan: PeriodicSpectral::new(grid.nx),
            theta_plan: PeriodicSpectral::new(grid.ntheta),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Largest full step whose two drift half steps keep positivity.
    pub fn admissible_dt(&self, drift: &DriftField) -> f64 {
        2.0 * drift_limit(&self.grid, drift, self.params.nu)
    }

    /// One Strang step with the field sampled at the step midpoint.
    pub fn step(&self, u: &Field, drift: &DriftField, dt: f64) -> Result<Field> {
        let limit = self.admissible_dt(drift);
        if dt > limit * (1.0 + 1e-12) {
            return Err(LinearError::DriftCfl { dt, admissible_dt: limit });
        }
        let mut v = u.values().clone();
        let half = 0.5 * dt;
        let c = self.params.c;
        transport_in_place(&mut v, &self.grid, c, half, self.transport, &self.x_plan)?;
        drift_in_place(&mut v, &self.grid, drift, self.params.nu, half);
        diffusion_in_place(&mut v, &self.grid, self.params.sigma, dt, self.diffusion, &self.theta_plan);
        drift_in_place(&mut v, &self.grid, drift, self.params.nu, half);
        transport_in_place(&mut v, &self.grid, c, half, self.transport, &self.x_plan)?;
        Ok(Field::from_values_unchecked(self.grid, v))
    }
}

/// Advects each orientation slice by `c dt omega` on the periodic box.
pub fn step_transport(f: &Field, c: f64, dt: f64, scheme: TransportScheme) -> Result<Field> {
    let g = *f.grid();
    let mut v = f.values().clone();
    transport_in_place(&mut v, &g, c, dt, scheme, &PeriodicSpectral::new(g.nx))?;
    Ok(Field::from_values_unchecked(g, v))
}

/// Advances `d_t u = sigma d_theta^2 u` by `dt` at every spatial node.
pub fn step_diffusion(f: &Field, sigma: f64, dt: f64, scheme: DiffusionScheme) -> Field {
    let g = *f.grid();
    let mut v = f.values().clone();
    diffusion_in_place(&mut v, &g, sigma, dt, scheme, &PeriodicSpectral::new(g.ntheta));
    Field::from_values_unchecked(g, v)
}

/// Advances `d_t u = -nu d_theta(u g)` by `dt` with upwind finite volumes
/// and Heun's method.
pub fn step_drift(f: &Field, drift: &DriftField, nu: f64, dt: f64) -> Result<Field> {
    let g = *f.grid();
    let limit = drift_limit(&g, drift, nu);
    if dt > limit * (1.0 + 1e-12) {
        return Err(LinearError::DriftCfl { dt, admissible_dt: limit });
    }
    let mut v = f.values().clone();
    drift_in_place(&mut v, &g, drift, nu, dt);
    Ok(Field::from_values_unchecked(g, v))
}

/// Semi-discrete drift operator `-nu D(u g)` applied once.
pub fn drift_rate(f: &Field, drift: &DriftField, nu: f64) -> Field {
    let g = *f.grid();
    let nt = g.ntheta;
    let h = g.dtheta();
    let mut out = Array3::zeros(g.shape());
    let mut faces = vec![0.0; nt];
    Zip::from(out.rows_mut())
        .and(f.values().rows())
        .and(drift.tau.rows())
        .for_each(|mut o, u, gl| {
            face_speeds(gl.as_slice().expect("contiguous lane"), nu, &mut faces);
            let r = upwind_rate(u.as_slice().expect("contiguous lane"), &faces, h);
            o.iter_mut().zip(r).for_each(|(a, b)| *a = b);
        });
    Field::from_values_unchecked(g, out)
}

/// Positivity limit of one forward-Euler drift stage:
/// `dt max_k (a+_{k+1/2} - a-_{k-1/2}) <= dtheta`.
fn drift_limit(grid: &GridSpec, drift: &DriftField, nu: f64) -> f64 {
    let nt = grid.ntheta;
    let mut faces = vec![0.0; nt];
    let mut worst = 0.0f64;
    for lane in drift.tau.rows() {
        face_speeds(lane.as_slice().expect("contiguous lane"), nu, &mut faces);
        for k in 0..nt {
            let out = faces[k].max(0.0) - faces[(k + nt - 1) % nt].min(0.0);
            worst = worst.max(out);
        }
    }
    if worst == 0.0 {
        f64::INFINITY
    } else {
        grid.dtheta() / worst
    }
}

// faces[k] is the speed at theta_{k+1/2}
fn face_speeds(g: &[f64], nu: f64, faces: &mut [f64]) {
    let n = g.len();
    for k in 0..n {
        faces[k] = 0.5 * nu * (g[k] + g[(k + 1) % n]);
    }
}

fn upwind_rate(u: &[f64], faces: &[f64], h: f64) -> Vec<f64> {
    let n = u.len();
    let flux: Vec<f64> = (0..n)
        .map(|k| faces[k].max(0.0) * u[k] + faces[k].min(0.0) * u[(k + 1) % n])
        .collect();
    (0..n).map(|k| -(flux[k] - flux[(k + n - 1) % n]) / h).collect()
}

fn drift_in_place(v: &mut Array3<f64>, grid: &GridSpec, drift: &DriftField, nu: f64, dt: f64) {
    if nu == 0.0 || dt == 0.0 {
        return;
    }
    let h = grid.dtheta();
    let mut faces = vec![0.0; grid.ntheta];
    Zip::from(v.rows_mut()).and(drift.tau.rows()).for_each(|mut lane, gl| {
        let gl = gl.as_slice().expect("contiguous lane");
        if gl.iter().all(|x| *x == 0.0) {
            return;
        }
        face_speeds(gl, nu, &mut faces);
        let u0 = lane.as_slice().expect("contiguous lane");
        let r0 = upwind_rate(u0, &faces, h);
        let u1: Vec<f64> = u0.iter().zip(&r0).map(|(u, r)| u + dt * r).collect();
        let r1 = upwind_rate(&u1, &faces, h);
        let out: Vec<f64> = (0..u0.len()).map(|k| 0.5 * (u0[k] + u1[k] + dt * r1[k])).collect();
        lane.iter_mut().zip(out).for_each(|(a, b)| *a = b);
    });
}

/// Eigenvalue of `-D2` (three-point periodic Laplacian) at DFT bin `m`.
fn fd_laplacian_eigen(m: usize, n: usize) -> f64 {
    let h = 2.0 * PI / n as f64;
    (2.0 - 2.0 * (h * m as f64).cos()) / (h * h)
}

fn diffusion_in_place(
    v: &mut Array3<f64>,
    grid: &GridSpec,
    sigma: f64,
    dt: f64,
    scheme: DiffusionScheme,
    plan: &PeriodicSpectral,
) {
    if sigma == 0.0 || dt == 0.0 {
        return;
    }
    let n = grid.ntheta;
    let a = sigma * dt;
    let symbol: Vec<Complex64> = (0..n)
        .map(|m| {
            let s = match scheme {
                DiffusionScheme::BackwardEuler => 1.0 / (1.0 + a * fd_laplacian_eigen(m, n)),
                DiffusionScheme::Exponential => (-a * fd_laplacian_eigen(m, n)).exp(),
                DiffusionScheme::SpectralImplicit => {
                    let k = wavenumber(m, n) as f64;
                    1.0 / (1.0 + a * k * k)
                }
            };
            Complex64::new(s, 0.0)
        })
        .collect();
    let mut scratch = Vec::new();
    for mut lane in v.rows_mut() {
        let buf = lane.as_slice_mut().expect("contiguous lane");
        plan.apply(buf, &mut scratch, |m| symbol[m]);
    }
}

fn transport_in_place(
    v: &mut Array3<f64>,
    grid: &GridSpec,
    c: f64,
    dt: f64,
    scheme: TransportScheme,
    plan: &PeriodicSpectral,
) -> Result<()> {
    if c == 0.0 || dt == 0.0 {
        return Ok(());
    }
    let dx = grid.dx();
    if scheme == TransportScheme::Upwind && c.abs() * dt > dx * (1.0 + 1e-12) {
        return Err(LinearError::TransportCfl {
            dt,
            admissible_dt: dx / c.abs(),
        });
    }
    let n = grid.nx;
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut scratch = Vec::new();
    for k in 0..grid.ntheta {
        let [ox, oy] = grid.omega(k);
        for (axis, disp) in [(0usize, c * dt * ox), (1usize, c * dt * oy)] {
            if disp.abs() < 1e-15 * dx {
                continue;
            }
            for other in 0..n {
                for i in 0..n {
                    line[i] = if axis == 0 { v[[i, other, k]] } else { v[[other, i, k]] };
                }
                match scheme {
                    TransportScheme::SemiLagrangian => remap_line(&line, disp / dx, &mut out),
                    TransportScheme::Upwind => upwind_line(&line, disp / dx, &mut out),
                    TransportScheme::SpectralShift => {
                        out.copy_from_slice(&line);
                        let wave = 2.0 * PI / grid.length;
                        plan.apply(&mut out, &mut scratch, |m| {
                            let kk = wave * wavenumber(m, n) as f64;
                            if 2 * m == n {
                                Complex64::new((kk * disp).cos(), 0.0)
                            } else {
                                Complex64::from_polar(1.0, -kk * disp)
                            }
                        });
                    }
                }
                for i in 0..n {
                    if axis == 0 {
                        v[[i, other, k]] = out[i];
                    } else {
                        v[[other, i, k]] = out[i];
                    }
                }
            }
        }
    }
    Ok(())
}

fn upwind_line(u: &[f64], lambda: f64, out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        out[i] = if lambda >= 0.0 {
            u[i] - lambda * (u[i] - u[(i + n - 1) % n])
        } else {
            u[i] - lambda * (u[(i + 1) % n] - u[i])
        };
    }
}

/// Fourth-order interface value between cells `u0` and `u1`, clamped to
/// the range of the two.
fn interface_value(um: f64, u0: f64, u1: f64, u2: f64) -> f64 {
    let v = (-um + 7.0 * u0 + 7.0 * u1 - u2) / 12.0;
    v.clamp(u0.min(u1), u0.max(u1))
}

/// Edge values of the parabola in a cell with mean `m`, limited so that the
/// reconstruction is monotone and stays between the edge values.
fn limit_edges(m: f64, mut d0: f64, mut d1: f64) -> (f64, f64) {
    if (d1 - m) * (m - d0) <= 0.0 {
        return (m, m);
    }
    let diff = d1 - d0;
    let curv = diff * (m - 0.5 * (d0 + d1));
    if curv > diff * diff / 6.0 {
        d0 = 3.0 * m - 2.0 * d1;
    } else if curv < -diff * diff / 6.0 {
        d1 = 3.0 * m - 2.0 * d0;
    }
    (d0, d1)
}

/// Integral of the parabola with mean `m` and edge values `d0`, `d1` over
/// the first fraction `b` of the cell.
fn left_portion(m: f64, d0: f64, d1: f64, b: f64) -> f64 {
    let b2 = b * b;
    let b3 = b2 * b;
    (b3 - 2.0 * b2 + b) * d0 + (-2.0 * b3 + 3.0 * b2) * m + (b3 - b2) * d1
}

/// Conservative remap of cell averages shifted by `s` cells. New averages
/// stay within the range of the source cells.
fn remap_line(u: &[f64], s: f64, out: &mut [f64]) {
    let n = u.len();
    let at = |i: i64| u[i.rem_euclid(n as i64) as usize];
    // raw[j] sits at the right interface of cell j
    let raw: Vec<f64> = (0..n as i64)
        .map(|j| interface_value(at(j - 1), at(j), at(j + 1), at(j + 2)))
        .collect();
    let edges: Vec<(f64, f64)> = (0..n).map(|j| limit_edges(u[j], raw[(j + n - 1) % n], raw[j])).collect();
    let m = s.floor();
    let alpha = s - m;
    let m = m as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let j = (i as i64 - m).rem_euclid(n as i64) as usize;
        let jm = (j + n - 1) % n;
        let (a0, a1) = edges[jm];
        let (b0, b1) = edges[j];
        let from_left = u[jm] - left_portion(u[jm], a0, a1, 1.0 - alpha);
        let from_here = left_portion(u[j], b0, b1, 1.0 - alpha);
        *o = from_left + from_here;
    }
}

/// `||D+ u||_2^2` with the forward difference in theta.
fn grad_theta_sq(u: &Field) -> f64 {
    let g = u.grid();
    let h = g.dtheta();
    let n = g.ntheta;
    let mut acc = 0.0;
    for lane in u.values().rows() {
        for k in 0..n {
            let d = (lane[(k + 1) % n] - lane[k]) / h;
            acc += d * d;
        }
    }
    acc * g.cell_volume()
}

/// Running diagnostics shared by the linear and nonlinear drivers.
#[derive(Debug, Clone)]
pub(crate) struct Diagnostics {
    sigma: f64,
    linf0: f64,
    l20: f64,
    rate: f64,
    dissipation: f64,
    last_grad: f64,
    last_t: f64,
}

impl Diagnostics {
    pub(crate) fn new(u0: &Field, sigma: f64, rate: f64) -> Self {
        Diagnostics {
            sigma,
            linf0: u0.max_abs(),
            l20: u0.lp_norm_unchecked(2.0),
            rate,
            dissipation: 0.0,
            last_grad: grad_theta_sq(u0),
            last_t: 0.0,
        }
    }

    pub(crate) fn advance(&mut self, t: f64, u: &Field) {
        let gsq = grad_theta_sq(u);
        self.dissipation += self.sigma * 0.5 * (t - self.last_t) * (gsq + self.last_grad);
        self.last_grad = gsq;
        self.last_t = t;
    }

    pub(crate) fn report(&self, t: f64, u: &Field) -> StepReport {
        let e = if t == 0.0 { 1.0 } else { (self.rate * t).exp() };
        StepReport {
            t,
            mass: u.grid().cell_volume() * u.values().sum(),
            l1: u.lp_norm_unchecked(1.0),
            l2: u.lp_norm_unchecked(2.0),
            linf: u.max_abs(),
            min_value: u.min_value(),
            envelope: self.linf0 * e,
            l2_envelope: self.l20 * e,
            polarization: u.polarization().unwrap_or([0.0, 0.0]),
            dissipation: self.dissipation,
            dissipation_bound: 2.0 * self.l20 * self.l20 * e * e,
        }
    }
}

/// Number of equal steps of size at most `dt` covering `t_end`.
pub(crate) fn step_count(t_end: f64, dt: f64) -> usize {
    ((t_end / dt) - 1e-9).ceil().max(1.0) as usize
}

/// Solves to `t_end` with `grid.dt` as the largest step.
pub fn solve_linear(
    u0: &Field,
    drift: &DriftSchedule,
    bound: ForceBound,
    params: &ModelParams,
    t_end: f64,
    opts: &LinearOptions,
) -> Result<LinearRun> {
    solve_linear_observed(u0, drift, bound, params, t_end, opts, |_, _, _| {})
}

/// As [`solve_linear`], calling `observe(step, t, u)` at every step node
/// including the initial one.
pub fn solve_linear_observed(
    u0: &Field,
    drift: &DriftSchedule,
    bound: ForceBound,
    params: &ModelParams,
    t_end: f64,
    opts: &LinearOptions,
    mut observe: impl FnMut(usize, f64, &Field),
) -> Result<LinearRun> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(LinearError::InvalidParameter(format!("T = {t_end} must be finite and > 0")));
    }
    if opts.report_every == 0 {
        return Err(LinearError::InvalidParameter("report_every must be >= 1".into()));
    }
    let grid = *u0.grid();
    if !drift.grid().same_mesh(&grid) {
        return Err(LinearError::InvalidParameter("drift and field grids differ".into()));
    }
    u0.check_finite()?;
    let stepper = SplitStepper::new(grid, *params, opts)?;
    let steps = step_count(t_end, grid.dt);
    let dt = t_end / steps as f64;
    let rate = bound.growth_rate(params);
    let mut diag = Diagnostics::new(u0, params.sigma, rate);
    let mut reports = vec![diag.report(0.0, u0)];
    let mut snapshots = Vec::new();
    if opts.snapshot_every.is_some() {
        snapshots.push((0.0, u0.clone()));
    }
    observe(0, 0.0, u0);
    let mut u = u0.clone();
    for n in 1..=steps {
        let t_mid = (n as f64 - 0.5) * dt;
        let next = stepper.step(&u, &drift.at(t_mid), dt).map_err(|e| match e {
            LinearError::DriftCfl { admissible_dt, .. } => LinearError::DriftCfl {
                dt,
                admissible_dt,
            },
            other => other,
        })?;
        let t = n as f64 * dt;
        if next.check_finite().is_err() {
            return Err(LinearError::NonFinite {
                t,
                last_good: Box::new(u),
            });
        }
        u = next;
        diag.advance(t, &u);
        observe(n, t, &u);
        if n % opts.report_every == 0 || n == steps {
            reports.push(diag.report(t, &u));
        }
        if let Some(every) = opts.snapshot_every {
            if n % every == 0 || n == steps {
                snapshots.push((t, u.clone()));
            }
        }
    }
    Ok(LinearRun {
        final_field: u,
        reports,
        snapshots,
        growth_rate: rate,
        dt,
        steps,
    })
}
