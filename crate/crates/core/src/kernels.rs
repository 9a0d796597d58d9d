//! Interaction kernels and the alignment fields they generate.
//!
//! A spatial kernel `K(|y|, s, s*)` is evaluated at the displacement
//! `y = x* - x` from the observer to the observed particle, with
//! `s = y . omega` and `s* = -y . omega*` (the literal argument order of the
//! nonlocal force). The reduced kernel `k(omega, omega*) = int K dy` drives
//! the local force `F_1`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use ndarray::Array3;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, GridSpec, ModelParams, VectorField, DUMP_MAGIC};
use crate::sphere::PeriodicSpectral;

/// Orientation resolution used when bounds are maximized over a grid.
pub const BOUNDS_NTHETA: usize = 64;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel cutoff {cutoff} must be below half the box side {half_box}")]
    DomainWrap { cutoff: f64, half_box: f64 },
    #[error("operation needs a spatial kernel")]
    NotSpatial,
    #[error("tabulated kernel has ntheta = {table}, solver grid has {grid}; re-tabulate instead of interpolating")]
    ResolutionMismatch { table: usize, grid: usize },
    #[error("kernel profile is not integrable: {0}")]
    Integrability(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = KernelError> = std::result::Result<T, E>;

/// Sign convention for the orientation arguments of a spatial kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementConvention {
    /// `K(|y|, y . omega, -y . omega*)` with `y = x* - x`.
    #[default]
    Literal,
    /// Both orientation arguments negated, i.e. `y = x - x*`.
    Mirrored,
}

impl DisplacementConvention {
    fn sign(self) -> f64 {
        match self {
            DisplacementConvention::Literal => 1.0,
            DisplacementConvention::Mirrored => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadialProfile {
    /// Constant on the disk of radius `R_K`.
    Indicator,
    /// `(1 - r^2/R_K^2)^2`, continuously differentiable at the cutoff.
    Biweight,
}

/// The dipolar-nematic angular law `a omega* + b (omega . omega*) omega*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularLaw {
    pub a: f64,
    pub b: f64,
}

impl AngularLaw {
    pub fn eval(&self, theta: f64, theta_star: f64) -> [f64; 2] {
        let (ss, cs) = theta_star.sin_cos();
        let w = self.a + self.b * (theta - theta_star).cos();
        [w * cs, w * ss]
    }

    /// Orientation derivative `b (tau . omega*) omega*`.
    pub fn eval_dtheta(&self, theta: f64, theta_star: f64) -> [f64; 2] {
        let (ss, cs) = theta_star.sin_cos();
        let w = -self.b * (theta - theta_star).sin();
        [w * cs, w * ss]
    }
}

/// Separable spatial kernel
/// `K = phi(|y|) A(s, s*) psi(omega, omega*)` with the anisotropy weight
/// `A = 1 + front_bias s/R + rear_bias s*/R + cross_bias s s*/R^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialKernel {
    pub profile: RadialProfile,
    /// Support radius `R_K`.
    pub cutoff: f64,
    /// Integral of the radial profile over the plane.
    pub mass: f64,
    pub angular: AngularLaw,
    #[serde(default)]
    pub front_bias: f64,
    #[serde(default)]
    pub rear_bias: f64,
    #[serde(default)]
    pub cross_bias: f64,
    #[serde(default)]
    pub convention: DisplacementConvention,
    /// Nodes per direction of the polar quadrature used by reductions.
    #[serde(default = "default_quadrature_n")]
    pub quadrature_n: usize,
}

fn default_quadrature_n() -> usize {
    64
}

impl SpatialKernel {
    /// Isotropic kernel `phi(|y|) (a omega* + b (omega . omega*) omega*)`.
    pub fn isotropic(profile: RadialProfile, cutoff: f64, mass: f64, a: f64, b: f64) -> Self {
        SpatialKernel {
            profile,
            cutoff,
            mass,
            angular: AngularLaw { a, b },
            front_bias: 0.0,
            rear_bias: 0.0,
            cross_bias: 0.0,
            convention: DisplacementConvention::Literal,
            quadrature_n: default_quadrature_n(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(KernelError::Integrability(format!("cutoff {} must be finite and > 0", self.cutoff)));
        }
        if !self.mass.is_finite() {
            return Err(KernelError::Integrability(format!("profile mass {}", self.mass)));
        }
        if self.angular.a < 0.0 || self.angular.b < 0.0 {
            return Err(KernelError::InvalidParameter("a and b must be >= 0".into()));
        }
        if ![self.front_bias, self.rear_bias, self.cross_bias].iter().all(|v| v.is_finite()) {
            return Err(KernelError::InvalidParameter("anisotropy weights must be finite".into()));
        }
        if self.quadrature_n == 0 {
            return Err(KernelError::InvalidParameter("quadrature_n must be > 0".into()));
        }
        Ok(())
    }

    /// Peak value of the radial profile (attained at `r = 0`).
    pub fn profile_max(&self) -> f64 {
        let area = PI * self.cutoff * self.cutoff;
        match self.profile {
            RadialProfile::Indicator => self.mass / area,
            RadialProfile::Biweight => 3.0 * self.mass / area,
        }
    }

    pub fn radial(&self, r: f64) -> f64 {
        if r > self.cutoff {
            return 0.0;
        }
        let peak = self.profile_max();
        match self.profile {
            RadialProfile::Indicator => peak,
            RadialProfile::Biweight => {
                let s = 1.0 - (r / self.cutoff).powi(2);
                peak * s * s
            }
        }
    }

    fn is_anisotropic(&self) -> bool {
        self.front_bias != 0.0 || self.rear_bias != 0.0 || self.cross_bias != 0.0
    }

    fn anisotropy(&self, y: [f64; 2], theta: f64, theta_star: f64) -> (f64, f64) {
        let sg = self.convention.sign();
        let r = self.cutoff;
        let (st, ct) = theta.sin_cos();
        let (ss, cs) = theta_star.sin_cos();
        let s = sg * (y[0] * ct + y[1] * st);
        let s_star = -sg * (y[0] * cs + y[1] * ss);
        let ds = sg * (-y[0] * st + y[1] * ct);
        let a = 1.0 + self.front_bias * s / r + self.rear_bias * s_star / r + self.cross_bias * s * s_star / (r * r);
        let da = self.front_bias * ds / r + self.cross_bias * ds * s_star / (r * r);
        (a, da)
    }

    /// `K(y; theta, theta*)` at displacement `y = x* - x`.
    pub fn eval(&self, y: [f64; 2], theta: f64, theta_star: f64) -> [f64; 2] {
        let phi = self.radial(y[0].hypot(y[1]));
        if phi == 0.0 {
            return [0.0, 0.0];
        }
        let (a, _) = self.anisotropy(y, theta, theta_star);
        let psi = self.angular.eval(theta, theta_star);
        [phi * a * psi[0], phi * a * psi[1]]
    }

    /// Orientation derivative `d K / d theta`.
    pub fn eval_dtheta(&self, y: [f64; 2], theta: f64, theta_star: f64) -> [f64; 2] {
        let phi = self.radial(y[0].hypot(y[1]));
        if phi == 0.0 {
            return [0.0, 0.0];
        }
        let (a, da) = self.anisotropy(y, theta, theta_star);
        let psi = self.angular.eval(theta, theta_star);
        let dpsi = self.angular.eval_dtheta(theta, theta_star);
        [
            phi * (da * psi[0] + a * dpsi[0]),
            phi * (da * psi[1] + a * dpsi[1]),
        ]
    }

    /// Polar quadrature nodes `(y, weight)` covering the disk of radius `R_K`:
    /// Gauss-Legendre in `r`, uniform in angle.
    pub fn polar_nodes(&self) -> Vec<([f64; 2], f64)> {
        let n = self.quadrature_n;
        let gl = GaussLegendre::new(NonZeroUsize::new(n).expect("quadrature_n > 0"));
        let half = 0.5 * self.cutoff;
        let dalpha = 2.0 * PI / n as f64;
        let mut out = Vec::with_capacity(n * n);
        for &(xi, w) in gl.as_node_weight_pairs() {
            let r = half * (xi + 1.0);
            let wr = half * w * r;
            for m in 0..n {
                let al = (m as f64 + 0.5) * dalpha;
                out.push(([r * al.cos(), r * al.sin()], wr * dalpha));
            }
        }
        out
    }

    /// Checks that the support fits the periodic box without self-overlap.
    pub fn check_fits(&self, grid: &GridSpec) -> Result<()> {
        let half = 0.5 * grid.length;
        if self.cutoff >= half {
            return Err(KernelError::DomainWrap {
                cutoff: self.cutoff,
                half_box: half,
            });
        }
        Ok(())
    }
}

/// The interaction kernel of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// Local kernel `k = a omega* + b (omega* (x) omega*) omega`.
    DipolarNematic { a: f64, b: f64 },
    /// Spatial kernel for the nonlocal force.
    SeparableRadial(SpatialKernel),
    /// Local kernel sampled on a theta x theta* grid.
    TabulatedLocal(LocalTable),
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::DipolarNematic { a, b } => {
                if *a < 0.0 || *b < 0.0 || !a.is_finite() || !b.is_finite() {
                    return Err(KernelError::InvalidParameter("a and b must be finite and >= 0".into()));
                }
                Ok(())
            }
            KernelSpec::SeparableRadial(k) => k.validate(),
            KernelSpec::TabulatedLocal(t) => {
                if t.kx.iter().chain(&t.ky).all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(KernelError::InvalidParameter("tabulated kernel has non-finite entries".into()))
                }
            }
        }
    }

    pub fn spatial(&self) -> Result<&SpatialKernel> {
        match self {
            KernelSpec::SeparableRadial(k) => Ok(k),
            _ => Err(KernelError::NotSpatial),
        }
    }

    /// The local kernel on an `ntheta` grid: tabulates closed forms, reduces
    /// spatial kernels by polar quadrature, and refuses to resample tables.
    pub fn local_table(&self, ntheta: usize) -> Result<LocalTable> {
        match self {
            KernelSpec::DipolarNematic { a, b } => {
                let law = AngularLaw { a: *a, b: *b };
                Ok(LocalTable::from_fn(ntheta, |t, ts| law.eval(t, ts)))
            }
            KernelSpec::SeparableRadial(k) => reduce_kernel(k, ntheta),
            KernelSpec::TabulatedLocal(t) => {
                if t.ntheta != ntheta {
                    return Err(KernelError::ResolutionMismatch {
                        table: t.ntheta,
                        grid: ntheta,
                    });
                }
                Ok(t.clone())
            }
        }
    }
}

/// A local kernel `k(theta_i, theta*_j)` tabulated on the equispaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTable {
    pub ntheta: usize,
    /// Row-major `[i * ntheta + j]`, first Cartesian component.
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

impl LocalTable {
    pub fn zeros(ntheta: usize) -> Self {
        LocalTable {
            ntheta,
            kx: vec![0.0; ntheta * ntheta],
            ky: vec![0.0; ntheta * ntheta],
        }
    }

    pub fn from_fn(ntheta: usize, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let h = 2.0 * PI / ntheta as f64;
        let mut t = LocalTable::zeros(ntheta);
        for i in 0..ntheta {
            for j in 0..ntheta {
                let v = f(i as f64 * h, j as f64 * h);
                t.kx[i * ntheta + j] = v[0];
                t.ky[i * ntheta + j] = v[1];
            }
        }
        t
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        let n = self.ntheta;
        [self.kx[i * n + j], self.ky[i * n + j]]
    }

    /// Spectral derivative in the first (theta) argument.
    pub fn dtheta(&self) -> LocalTable {
        let n = self.ntheta;
        let plan = PeriodicSpectral::new(n);
        let mut scratch = Vec::new();
        let mut out = self.clone();
        let mut col = vec![0.0; n];
        for comp in [&mut out.kx, &mut out.ky] {
            for j in 0..n {
                for i in 0..n {
                    col[i] = comp[i * n + j];
                }
                plan.differentiate(&mut col, &mut scratch, 1);
                for i in 0..n {
                    comp[i * n + j] = col[i];
                }
            }
        }
        out
    }

    /// `sup_theta int |k| dtheta* + sup_theta int |d_theta k| dtheta*`.
    pub fn w1inf_l1_norm(&self) -> f64 {
        let h = 2.0 * PI / self.ntheta as f64;
        let d = self.dtheta();
        let row_sup = |t: &LocalTable| {
            (0..t.ntheta)
                .map(|i| {
                    (0..t.ntheta)
                        .map(|j| {
                            let v = t.get(i, j);
                            v[0].hypot(v[1])
                        })
                        .sum::<f64>()
                        * h
                })
                .fold(0.0, f64::max)
        };
        row_sup(self) + row_sup(&d)
    }

    pub fn max_abs_diff(&self, other: &LocalTable) -> f64 {
        self.kx
            .iter()
            .zip(&self.ky)
            .zip(other.kx.iter().zip(&other.ky))
            .fold(0.0, |m: f64, ((a, b), (c, d))| m.max((a - c).hypot(b - d)))
    }

    /// Binary layout sharing the field-dump header: magic, `ntheta` twice
    /// (u64 LE), three zero f64 slots, then `(kx, ky)` pairs row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.ntheta as u64).to_le_bytes())?;
        w.write_all(&(self.ntheta as u64).to_le_bytes())?;
        for _ in 0..3 {
            w.write_all(&0.0f64.to_le_bytes())?;
        }
        for (x, y) in self.kx.iter().zip(&self.ky) {
            w.write_all(&x.to_le_bytes())?;
            w.write_all(&y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<LocalTable> {
        let fmt = |s: String| KernelError::Grid(GridError::Format(s));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(GridError::from)?;
        if &magic != DUMP_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut b = [0u8; 8];
        let mut words = Vec::with_capacity(5);
        for _ in 0..5 {
            r.read_exact(&mut b).map_err(GridError::from)?;
            words.push(b);
        }
        let n1 = u64::from_le_bytes(words[0]) as usize;
        let n2 = u64::from_le_bytes(words[1]) as usize;
        if n1 != n2 || n1 == 0 {
            return Err(fmt(format!("table must be square, got {n1} x {n2}")));
        }
        let mut t = LocalTable::zeros(n1);
        for idx in 0..n1 * n1 {
            r.read_exact(&mut b).map_err(GridError::from)?;
            t.kx[idx] = f64::from_le_bytes(b);
            r.read_exact(&mut b).map_err(GridError::from)?;
            t.ky[idx] = f64::from_le_bytes(b);
        }
        Ok(t)
    }
}

/// `k(theta, theta*)` for a local kernel.
pub fn eval_k(theta: f64, theta_star: f64, spec: &KernelSpec) -> Result<[f64; 2]> {
    match spec {
        KernelSpec::DipolarNematic { a, b } => Ok(AngularLaw { a: *a, b: *b }.eval(theta, theta_star)),
        KernelSpec::TabulatedLocal(t) => {
            let h = 2.0 * PI / t.ntheta as f64;
            let idx = |x: f64| ((x / h).round() as i64).rem_euclid(t.ntheta as i64) as usize;
            Ok(t.get(idx(theta), idx(theta_star)))
        }
        KernelSpec::SeparableRadial(_) => Err(KernelError::InvalidParameter(
            "eval_k needs a local kernel; reduce the spatial kernel first".into(),
        )),
    }
}

/// Tabulates `k(omega, omega*) = int K(|y|, y . omega, -y . omega*) dy` by
/// polar quadrature over the support disk.
pub fn reduce_kernel(kernel: &SpatialKernel, ntheta: usize) -> Result<LocalTable> {
    kernel.validate()?;
    let nodes = kernel.polar_nodes();
    Ok(LocalTable::from_fn(ntheta, |t, ts| {
        let mut acc = [0.0; 2];
        for (y, w) in &nodes {
            let v = kernel.eval(*y, t, ts);
            acc[0] += w * v[0];
            acc[1] += w * v[1];
        }
        acc
    }))
}

/// Signed lattice offset in `[-n/2, n/2)` for a periodic index difference.
pub(crate) fn signed_offset(d: i64, n: usize) -> i64 {
    let n = n as i64;
    let m = d.rem_euclid(n);
    if m >= n / 2 + n % 2 {
        m - n
    } else {
        m
    }
}

/// The reduction evaluated with the solver's own lattice quadrature,
/// `sum_y dx^2 K(y)`. This is the `k` that makes the local and nonlocal
/// forces agree exactly on spatially constant data.
pub fn reduce_kernel_on_lattice(kernel: &SpatialKernel, grid: &GridSpec) -> Result<LocalTable> {
    kernel.validate()?;
    kernel.check_fits(grid)?;
    let pts = lattice_support(kernel, grid);
    let w = grid.dx() * grid.dx();
    Ok(LocalTable::from_fn(grid.ntheta, |t, ts| {
        let mut acc = [0.0; 2];
        for (_, y) in &pts {
            let v = kernel.eval(*y, t, ts);
            acc[0] += w * v[0];
            acc[1] += w * v[1];
        }
        acc
    }))
}

/// Lattice offsets `(p, q)` and displacements inside the kernel support.
pub(crate) fn lattice_support(kernel: &SpatialKernel, grid: &GridSpec) -> Vec<((i64, i64), [f64; 2])> {
    let n = grid.nx as i64;
    let dx = grid.dx();
    let mut out = Vec::new();
    for p in 0..n {
        for q in 0..n {
            let (p, q) = (signed_offset(p, grid.nx), signed_offset(q, grid.nx));
            let y = [p as f64 * dx, q as f64 * dx];
            if kernel.radial(y[0].hypot(y[1])) != 0.0 {
                out.push(((p, q), y));
            }
        }
    }
    out
}

/// Row-column 2-D FFT on an `n x n` periodic lattice.
#[derive(Clone)]
struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            n,
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
        }
    }

    fn process(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>, inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        scratch.resize(n * n, Complex64::default());
        for i in 0..n {
            for j in 0..n {
                scratch[j * n + i] = data[i * n + j];
            }
        }
        plan.process(scratch);
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = scratch[j * n + i];
            }
        }
    }
}

// spatial moment indices: 1, y1, y2, y1^2, y1 y2, y2^2
const MODE_POLY: [(i32, i32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Precomputed FFT convolution operator for `F_0` on a fixed grid.
#[derive(Clone)]
pub struct F0Operator {
    grid: GridSpec,
    kernel: SpatialKernel,
    fft: Fft2,
    stencil_hats: Vec<Vec<Complex64>>,
}

impl std::fmt::Debug for F0Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("F0Operator")
            .field("grid", &self.grid)
            .field("kernel", &self.kernel)
            .finish()
    }
}

impl F0Operator {
    pub fn new(kernel: &SpatialKernel, grid: &GridSpec) -> Result<Self> {
        kernel.validate()?;
        kernel.check_fits(grid)?;
        let n = grid.nx;
        let nmodes = if kernel.cross_bias != 0.0 {
            6
        } else if kernel.is_anisotropic() {
            3
        } else {
            1
        };
        let fft = Fft2::new(n);
        let w = grid.dx() * grid.dx();
        let support = lattice_support(kernel, grid);
        let mut scratch = Vec::new();
        let mut stencil_hats = Vec::with_capacity(nmodes);
        for &(e1, e2) in MODE_POLY.iter().take(nmodes) {
            let mut h = vec![Complex64::default(); n * n];
            // h(z) = phi_m(-z) so that (h * f)(x) = sum_y phi_m(y) f(x + y)
            for ((p, q), y) in &support {
                let i = (-p).rem_euclid(n as i64) as usize;
                let j = (-q).rem_euclid(n as i64) as usize;
                let v = w * kernel.radial(y[0].hypot(y[1])) * y[0].powi(e1) * y[1].powi(e2);
                h[i * n + j] = Complex64::new(v, 0.0);
            }
            fft.process(&mut h, &mut scratch, false);
            stencil_hats.push(h);
        }
        Ok(F0Operator {
            grid: *grid,
            kernel: *kernel,
            fft,
            stencil_hats,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn kernel(&self) -> &SpatialKernel {
        &self.kernel
    }

    /// Spatial moments `C_m(x, theta*) = sum_y dx^2 phi(y) y^m f(x + y, theta*)`.
    fn moments(&self, f: &Field) -> Vec<Array3<f64>> {
        let g = self.grid;
        let (n, nt) = (g.nx, g.ntheta);
        let vals = f.values();
        let mut out: Vec<Array3<f64>> = (0..self.stencil_hats.len()).map(|_| Array3::zeros(g.shape())).collect();
        let mut buf = vec![Complex64::default(); n * n];
        let mut work = vec![Complex64::default(); n * n];
        let mut scratch = Vec::new();
        let norm = 1.0 / (n * n) as f64;
        for k in 0..nt {
            for i in 0..n {
                for j in 0..n {
                    buf[i * n + j] = Complex64::new(vals[[i, j, k]], 0.0);
                }
            }
            self.fft.process(&mut buf, &mut scratch, false);
            for (m, hat) in self.stencil_hats.iter().enumerate() {
                for ((w, b), h) in work.iter_mut().zip(&buf).zip(hat) {
                    *w = b * h;
                }
                self.fft.process(&mut work, &mut scratch, true);
                let dst = &mut out[m];
                for i in 0..n {
                    for j in 0..n {
                        dst[[i, j, k]] = work[i * n + j].re * norm;
                    }
                }
            }
        }
        out
    }

    /// `F_0[f](x, theta)`.
    pub fn apply(&self, f: &Field) -> VectorField {
        assert!(f.grid().same_mesh(&self.grid), "field and operator grids differ");
        let moments = self.moments(f);
        combine_moments(&self.kernel, &self.grid, &moments)
    }
}

/// Orientation mixing shared by the FFT and direct-stencil routes: given the
/// spatial moments per `theta*`, assemble the vector field.
pub(crate) fn combine_moments(kernel: &SpatialKernel, g: &GridSpec, m: &[Array3<f64>]) -> VectorField {
    let (n, nt) = (g.nx, g.ntheta);
    let h = g.dtheta();
    let sg = kernel.convention.sign();
    let r = kernel.cutoff;
    let beta = kernel.front_bias * sg / r;
    let gamma = kernel.rear_bias * sg / r;
    // the cross term carries sg^2 = 1
    let delta = kernel.cross_bias / (r * r);
    let trig: Vec<(f64, f64)> = (0..nt).map(|k| (g.theta(k).cos(), g.theta(k).sin())).collect();
    let weight: Vec<f64> = (0..nt)
        .flat_map(|i| {
            let trig = &trig;
            (0..nt).map(move |j| {
                let (ci, si) = trig[i];
                let (cj, sj) = trig[j];
                h * (kernel.angular.a + kernel.angular.b * (ci * cj + si * sj))
            })
        })
        .collect();
    let mut out = VectorField::zeros(*g);
    let mut t0 = vec![0.0; nt];
    let mut u1 = vec![0.0; nt];
    let mut u2 = vec![0.0; nt];
    for i in 0..n {
        for j in 0..n {
            for k in 0..nt {
                let (cs, ss) = trig[k];
                let c0 = m[0][[i, j, k]];
                if m.len() == 1 {
                    t0[k] = c0;
                    u1[k] = 0.0;
                    u2[k] = 0.0;
                    continue;
                }
                let (c1, c2) = (m[1][[i, j, k]], m[2][[i, j, k]]);
                t0[k] = c0 - gamma * (cs * c1 + ss * c2);
                u1[k] = beta * c1;
                u2[k] = beta * c2;
                if m.len() == 6 {
                    let (c11, c12, c22) = (m[3][[i, j, k]], m[4][[i, j, k]], m[5][[i, j, k]]);
                    // s s* = -(y . omega)(y . omega*)
                    u1[k] -= delta * (cs * c11 + ss * c12);
                    u2[k] -= delta * (cs * c12 + ss * c22);
                }
            }
            for a in 0..nt {
                let (ca, sa) = trig[a];
                let (mut fx, mut fy) = (0.0, 0.0);
                let row = &weight[a * nt..(a + 1) * nt];
                for k in 0..nt {
                    let s = row[k] * (t0[k] + ca * u1[k] + sa * u2[k]);
                    fx += s * trig[k].0;
                    fy += s * trig[k].1;
                }
                out.x[[i, j, a]] = fx;
                out.y[[i, j, a]] = fy;
            }
        }
    }
    out
}

/// `F_0[f]` through a freshly built FFT operator.
pub fn f0_field(f: &Field, spec: &KernelSpec) -> Result<VectorField> {
    let k = spec.spatial()?;
    Ok(F0Operator::new(k, f.grid())?.apply(f))
}

/// `F_0[f]` by direct summation over all source nodes, `O(nx^4 ntheta^2)`.
pub fn f0_field_direct(f: &Field, kernel: &SpatialKernel) -> Result<VectorField> {
    let g = *f.grid();
    kernel.validate()?;
    kernel.check_fits(&g)?;
    let (n, nt) = (g.nx, g.ntheta);
    let w = g.cell_volume();
    let dx = g.dx();
    let vals = f.values();
    let mut out = VectorField::zeros(g);
    for i in 0..n {
        for j in 0..n {
            for a in 0..nt {
                let th = g.theta(a);
                let (mut fx, mut fy) = (0.0, 0.0);
                for is in 0..n {
                    let p = signed_offset(is as i64 - i as i64, n);
                    for js in 0..n {
                        let q = signed_offset(js as i64 - j as i64, n);
                        let y = [p as f64 * dx, q as f64 * dx];
                        for b in 0..nt {
                            let v = vals[[is, js, b]];
                            if v == 0.0 {
                                continue;
                            }
                            let kv = kernel.eval(y, th, g.theta(b));
                            fx += w * kv[0] * v;
                            fy += w * kv[1] * v;
                        }
                    }
                }
                out.x[[i, j, a]] = fx;
                out.y[[i, j, a]] = fy;
            }
        }
    }
    Ok(out)
}

/// Local force `F_1[f](x, theta) = sum_j dtheta k(theta, theta*_j) f(x, theta*_j)`.
pub fn f1_field(f: &Field, table: &LocalTable) -> Result<VectorField> {
    let g = *f.grid();
    if table.ntheta != g.ntheta {
        return Err(KernelError::ResolutionMismatch {
            table: table.ntheta,
            grid: g.ntheta,
        });
    }
    let nt = g.ntheta;
    let h = g.dtheta();
    let mut out = VectorField::zeros(g);
    let vals = f.values();
    for i in 0..g.nx {
        for j in 0..g.nx {
            let lane = vals.slice(ndarray::s![i, j, ..]);
            for a in 0..nt {
                let rx = &table.kx[a * nt..(a + 1) * nt];
                let ry = &table.ky[a * nt..(a + 1) * nt];
                let (mut fx, mut fy) = (0.0, 0.0);
                for ((kx, ky), v) in rx.iter().zip(ry).zip(lane.iter()) {
                    fx += kx * v;
                    fy += ky * v;
                }
                out.x[[i, j, a]] = h * fx;
                out.y[[i, j, a]] = h * fy;
            }
        }
    }
    Ok(out)
}

/// Norm constants of a kernel.
///
/// For local kernels the spatial quantities are those of `K = delta(y) k`:
/// `k_inf_0 = k_inf_1` and the pointwise bounds are infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelBounds {
    /// `||K||` in `L^1_x W^{1,inf}_omega L^1_{omega*}`.
    pub k_inf_0: f64,
    /// `||k||` in `W^{1,inf}_omega L^1_{omega*}`.
    pub k_inf_1: f64,
    pub c_inf_0: f64,
    pub c_inf_1: f64,
    /// Pointwise bound `sup |K|`.
    pub k_sup: f64,
    /// `sup |K| + sup |d_theta K|`.
    pub k_sup_w1: f64,
}

impl KernelBounds {
    pub fn k_inf(&self, i: usize) -> f64 {
        if i == 0 {
            self.k_inf_0
        } else {
            self.k_inf_1
        }
    }

    pub fn c_inf(&self, i: usize) -> f64 {
        if i == 0 {
            self.c_inf_0
        } else {
            self.c_inf_1
        }
    }
}

/// `nu K (1 + nu/sigma K)`.
pub fn growth_constant(k_inf: f64, params: &ModelParams) -> f64 {
    params.nu * k_inf * (1.0 + params.nu / params.sigma * k_inf)
}

/// `int_0^{2pi} |a + b cos t| dt` for `a, b >= 0`.
pub fn dipolar_abs_integral(a: f64, b: f64) -> f64 {
    if a >= b {
        2.0 * PI * a
    } else {
        let alpha = (-a / b).acos();
        4.0 * a * alpha + 4.0 * b * alpha.sin() - 2.0 * PI * a
    }
}

/// Closed form of `||k||_{W^{1,inf}_omega L^1_{omega*}}` for the
/// dipolar-nematic kernel; independent of `omega` by rotation invariance.
pub fn dipolar_k_inf(a: f64, b: f64) -> f64 {
    dipolar_abs_integral(a, b) + 4.0 * b
}

pub fn bounds(spec: &KernelSpec, params: &ModelParams) -> Result<KernelBounds> {
    spec.validate()?;
    let (k0, k1, sup, sup_w1) = match spec {
        KernelSpec::DipolarNematic { a, b } => {
            let k = dipolar_k_inf(*a, *b);
            (k, k, f64::INFINITY, f64::INFINITY)
        }
        KernelSpec::TabulatedLocal(t) => {
            let k = t.w1inf_l1_norm();
            (k, k, f64::INFINITY, f64::INFINITY)
        }
        KernelSpec::SeparableRadial(k) => spatial_bounds(k)?,
    };
    let (k0, k1) = if spec.is_zero() { (0.0, 0.0) } else { (k0, k1) };
    let (sup, sup_w1) = if spec.is_zero() { (0.0, 0.0) } else { (sup, sup_w1) };
    Ok(KernelBounds {
        k_inf_0: k0,
        k_inf_1: k1,
        c_inf_0: growth_constant(k0, params),
        c_inf_1: growth_constant(k1, params),
        k_sup: sup,
        k_sup_w1: sup_w1,
    })
}

impl KernelSpec {
    /// Whether the kernel vanishes identically.
    pub fn is_zero(&self) -> bool {
        match self {
            KernelSpec::DipolarNematic { a, b } => *a == 0.0 && *b == 0.0,
            KernelSpec::SeparableRadial(k) => k.mass == 0.0 || (k.angular.a == 0.0 && k.angular.b == 0.0),
            KernelSpec::TabulatedLocal(t) => t.kx.iter().chain(&t.ky).all(|v| *v == 0.0),
        }
    }
}

fn spatial_bounds(k: &SpatialKernel) -> Result<(f64, f64, f64, f64)> {
    let nt = BOUNDS_NTHETA;
    let h = 2.0 * PI / nt as f64;
    let mut k0 = 0.0;
    for (y, w) in k.polar_nodes() {
        let (mut sup_v, mut sup_d) = (0.0f64, 0.0f64);
        for a in 0..nt {
            let th = a as f64 * h;
            let (mut sv, mut sd) = (0.0, 0.0);
            for b in 0..nt {
                let ts = b as f64 * h;
                let v = k.eval(y, th, ts);
                let d = k.eval_dtheta(y, th, ts);
                sv += h * v[0].hypot(v[1]);
                sd += h * d[0].hypot(d[1]);
            }
            sup_v = sup_v.max(sv);
            sup_d = sup_d.max(sd);
        }
        k0 += w * (sup_v + sup_d);
    }
    let k1 = reduce_kernel(k, nt)?.w1inf_l1_norm();
    let peak = k.profile_max().abs();
    let amax = 1.0 + k.front_bias.abs() + k.rear_bias.abs() + k.cross_bias.abs();
    let damax = k.front_bias.abs() + k.cross_bias.abs();
    let (a, b) = (k.angular.a, k.angular.b);
    let sup = peak * amax * (a + b);
    let sup_w1 = sup + peak * (damax * (a + b) + amax * b);
    Ok((k0, k1, sup, sup_w1))
}

/// Picard window `T_{R,i} = ln R / (R C_{inf,i} ||u0||_inf)`.
///
/// Returns `+inf` when the kernel or the datum vanishes.
pub fn picard_window(bounds: &KernelBounds, u0_inf: f64, r: f64, i: usize) -> Result<f64> {
    if !(r > 1.0) {
        return Err(KernelError::InvalidParameter(format!("R = {r} must be > 1")));
    }
    if i > 1 {
        return Err(KernelError::InvalidParameter(format!("model index {i} not in {{0, 1}}")));
    }
    if u0_inf < 0.0 || !u0_inf.is_finite() {
        return Err(KernelError::InvalidParameter(format!("||u0||_inf = {u0_inf}")));
    }
    let c = bounds.c_inf(i);
    if c == 0.0 || u0_inf == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(r.ln() / (r * c * u0_inf))
}
