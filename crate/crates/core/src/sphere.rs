//! Calculus on the orientation circle S^1.
//!
//! On S^1 every tangent vector is a multiple of `tau(theta) = (-sin, cos)`,
//! so the surface gradient of `g` is `(d g / d theta) tau` and the surface
//! divergence of `h tau` is `d h / d theta`. The geometric API is kept so
//! that solver code reads like the kinetic equation it discretizes.

use std::sync::Arc;

use ndarray::{Array3, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Field, GridSpec, VectorField};

/// Differencing backend for orientation derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Differencing {
    /// Fourier differentiation; exact for resolved trigonometric polynomials.
    Spectral,
    /// Second-order centered differences.
    FiniteDifference,
}

/// Orthogonal projection onto the tangent line at `omega(theta)`.
pub fn proj_perp(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let dot = v[0] * c + v[1] * s;
    [v[0] - dot * c, v[1] - dot * s]
}

/// Unit tangent `tau(theta) = (-sin theta, cos theta)`.
pub fn tangent(theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [-s, c]
}

/// Signed integer wavenumber of DFT bin `m` for a transform of size `n`.
pub(crate) fn wavenumber(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Cached FFT plans for 2 pi-periodic profiles of a fixed length.
#[derive(Clone)]
pub struct PeriodicSpectral {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicSpectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicSpectral").field("n", &self.n).finish()
    }
}

impl PeriodicSpectral {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        PeriodicSpectral {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Multiplies the DFT of `data` by `symbol(m)` (bin index) and transforms
    /// back. The imaginary part of the result is dropped.
    pub fn apply(&self, data: &mut [f64], scratch: &mut Vec<Complex64>, symbol: impl Fn(usize) -> Complex64) {
        debug_assert_eq!(data.len(), self.n);
        scratch.clear();
        scratch.extend(data.iter().map(|&v| Complex64::new(v, 0.0)));
        self.fwd.process(scratch);
        let norm = 1.0 / self.n as f64;
        for (m, c) in scratch.iter_mut().enumerate() {
            *c *= symbol(m) * norm;
        }
        self.inv.process(scratch);
        for (d, c) in data.iter_mut().zip(scratch.iter()) {
            *d = c.re;
        }
    }

    /// In-place spectral derivative of order 1 or 2.
    pub fn differentiate(&self, data: &mut [f64], scratch: &mut Vec<Complex64>, order: u32) {
        let n = self.n;
        self.apply(data, scratch, |m| {
            let k = wavenumber(m, n);
            match order {
                1 if 2 * m == n => Complex64::new(0.0, 0.0),
                1 => Complex64::new(0.0, k as f64),
                2 => Complex64::new(-(k * k) as f64, 0.0),
                _ => unreachable!("unsupported derivative order"),
            }
        });
    }
}

/// Derivative of a periodic profile sampled on `n` equispaced nodes.
pub fn profile_derivative(profile: &[f64], d: Differencing) -> Vec<f64> {
    let n = profile.len();
    let h = 2.0 * std::f64::consts::PI / n as f64;
    match d {
        Differencing::Spectral => {
            let mut out = profile.to_vec();
            PeriodicSpectral::new(n).differentiate(&mut out, &mut Vec::new(), 1);
            out
        }
        Differencing::FiniteDifference => (0..n)
            .map(|k| (profile[(k + 1) % n] - profile[(k + n - 1) % n]) / (2.0 * h))
            .collect(),
    }
}

fn apply_along_theta(values: &Array3<f64>, ntheta: usize, d: Differencing, order: u32) -> Array3<f64> {
    let mut out = values.clone();
    let h = 2.0 * std::f64::consts::PI / ntheta as f64;
    match d {
        Differencing::Spectral => {
            let plan = PeriodicSpectral::new(ntheta);
            let mut scratch = Vec::with_capacity(ntheta);
            for mut lane in out.rows_mut() {
                let slice = lane.as_slice_mut().expect("theta axis is contiguous");
                plan.differentiate(slice, &mut scratch, order);
            }
        }
        Differencing::FiniteDifference => {
            for (mut o, src) in out.rows_mut().into_iter().zip(values.rows()) {
                for k in 0..ntheta {
                    let up = src[(k + 1) % ntheta];
                    let dn = src[(k + ntheta - 1) % ntheta];
                    o[k] = match order {
                        1 => (up - dn) / (2.0 * h),
                        _ => (up - 2.0 * src[k] + dn) / (h * h),
                    };
                }
            }
        }
    }
    out
}

/// A tangent vector field `g(x, theta) tau(theta)`, stored by its scalar
/// coefficient. Tangency holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField {
    pub grid: GridSpec,
    pub component: Array3<f64>,
}

impl TangentField {
    pub fn zeros(grid: GridSpec) -> Self {
        TangentField {
            grid,
            component: Array3::zeros(grid.shape()),
        }
    }

    /// Tangential part `P_{omega perp} v` of a vector field.
    pub fn project(v: &VectorField) -> Self {
        TangentField {
            grid: v.grid,
            component: v.tangential(),
        }
    }

    /// Cartesian representation `g tau`.
    pub fn to_vectors(&self) -> VectorField {
        let g = self.grid;
        let mut out = VectorField::zeros(g);
        Zip::indexed(&self.component)
            .and(&mut out.x)
            .and(&mut out.y)
            .for_each(|(_, _, k), &c, ox, oy| {
                let t = tangent(g.theta(k));
                *ox = c * t[0];
                *oy = c * t[1];
            });
        out
    }
}

/// Surface gradient on S^1: the tau-coefficient is `d g / d theta`.
pub fn grad_omega(g: &Field, d: Differencing) -> TangentField {
    let grid = *g.grid();
    TangentField {
        grid,
        component: apply_along_theta(g.values(), grid.ntheta, d, 1),
    }
}

/// Surface divergence on S^1 of a tangent field.
pub fn div_omega(v: &TangentField, d: Differencing) -> Field {
    Field::from_values_unchecked(v.grid, apply_along_theta(&v.component, v.grid.ntheta, d, 1))
}

/// Laplace-Beltrami operator on S^1, `d^2 g / d theta^2`.
pub fn laplace_omega(g: &Field, d: Differencing) -> Field {
    let grid = *g.grid();
    Field::from_values_unchecked(grid, apply_along_theta(g.values(), grid.ntheta, d, 2))
}

/// Max-norm of the vector residual of the integration-by-parts identity
/// `int f grad g = -int g grad f + (d - 1) int omega f g` on S^1 (d = 2),
/// evaluated with the chosen derivatives and the equispaced quadrature.
pub fn check_ibp(f: &[f64], g: &[f64], d: Differencing) -> f64 {
    assert_eq!(f.len(), g.len(), "profiles must share the theta grid");
    let n = f.len();
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let df = profile_derivative(f, d);
    let dg = profile_derivative(g, d);
    let mut lhs = [0.0; 2];
    let mut rhs = [0.0; 2];
    for k in 0..n {
        let th = k as f64 * h;
        let t = tangent(th);
        let w = [th.cos(), th.sin()];
        for c in 0..2 {
            lhs[c] += h * f[k] * dg[k] * t[c];
            rhs[c] += h * (-g[k] * df[k] * t[c] + w[c] * f[k] * g[k]);
        }
    }
    (lhs[0] - rhs[0]).abs().max((lhs[1] - rhs[1]).abs())
}

/// Residuals of the pointwise identities `grad(omega . v) = P v` and
/// `div(P v) = -(d - 1) omega . v` for a constant vector `v`, as max-norms
/// over the theta nodes.
pub fn projection_identity_residuals(ntheta: usize, v: [f64; 2], d: Differencing) -> (f64, f64) {
    let h = 2.0 * std::f64::consts::PI / ntheta as f64;
    let thetas: Vec<f64> = (0..ntheta).map(|k| k as f64 * h).collect();
    let dot: Vec<f64> = thetas.iter().map(|t| v[0] * t.cos() + v[1] * t.sin()).collect();
    let pv_coeff: Vec<f64> = thetas
        .iter()
        .map(|&t| {
            let p = proj_perp(t, v);
            let tau = tangent(t);
            p[0] * tau[0] + p[1] * tau[1]
        })
        .collect();
    let grad = profile_derivative(&dot, d);
    let div = profile_derivative(&pv_coeff, d);
    let r_grad = grad
        .iter()
        .zip(&pv_coeff)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let r_div = div.iter().zip(&dot).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    (r_grad, r_div)
}
