//! Phase-space discretization: the periodic box `[0, L)^2` times the
//! orientation circle, the [`Field`] container and its quadrature.
//!
//! Nodes sit at `x_i = i * dx` and `theta_k = 2 pi k / ntheta`. All
//! integrals use the equispaced rule with uniform weights `dx^2 * dtheta`,
//! which is exact for trigonometric polynomials resolved by the grid.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes opening a binary field dump.
pub const DUMP_MAGIC: &[u8; 4] = b"VKF1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value at node ({0}, {1}, {2})")]
    NonFinite(usize, usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("order parameter undefined for a field of zero mass")]
    ZeroMass,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("malformed field dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

/// Resolution of the periodic spatial box and the orientation circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Points per spatial axis.
    pub nx: usize,
    /// Side of the periodic box.
    pub length: f64,
    /// Orientation nodes on the circle; must be even.
    pub ntheta: usize,
    /// Time step.
    pub dt: f64,
}

impl GridSpec {
    pub fn new(nx: usize, length: f64, ntheta: usize, dt: f64) -> Result<Self> {
        let g = GridSpec {
            nx,
            length,
            ntheta,
            dt,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 {
            return Err(GridError::InvalidGrid(format!("nx = {} < 4", self.nx)));
        }
        if self.ntheta < 8 || !self.ntheta.is_multiple_of(2) {
            return Err(GridError::InvalidGrid(format!(
                "ntheta = {} must be even and >= 8",
                self.ntheta
            )));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(GridError::InvalidGrid(format!("L = {} must be > 0", self.length)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(GridError::InvalidGrid(format!("dt = {} must be > 0", self.dt)));
        }
        Ok(())
    }

    pub fn with_dt(self, dt: f64) -> Self {
        GridSpec { dt, ..self }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn dtheta(&self) -> f64 {
        2.0 * PI / self.ntheta as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn theta(&self, k: usize) -> f64 {
        k as f64 * self.dtheta()
    }

    /// Unit orientation `omega = (cos theta, sin theta)` at node `k`.
    pub fn omega(&self, k: usize) -> [f64; 2] {
        let t = self.theta(k);
        [t.cos(), t.sin()]
    }

    /// Quadrature weight of one phase-space node.
    pub fn cell_volume(&self) -> f64 {
        self.dx() * self.dx() * self.dtheta()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nx, self.nx, self.ntheta)
    }

    pub fn len(&self) -> usize {
        self.nx * self.nx * self.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same discretization ignoring the time step.
    pub fn same_mesh(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ntheta == other.ntheta && self.length == other.length
    }
}

/// Physical constants of the kinetic equation: self-propulsion speed `c`,
/// orientation diffusion `sigma` and alignment rate `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub c: f64,
    pub sigma: f64,
    pub nu: f64,
}

impl ModelParams {
    pub fn new(c: f64, sigma: f64, nu: f64) -> Result<Self> {
        let p = ModelParams { c, sigma, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("sigma", self.sigma), ("nu", self.nu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GridError::InvalidParameter(format!("{name} = {v} must be > 0")));
            }
        }
        Ok(())
    }
}

/// A scalar quantity sampled on every phase-space node, f(x1, x2, theta).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Array3<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec) -> Self {
        Field {
            grid,
            values: Array3::zeros(grid.shape()),
        }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Field {
            grid,
            values: Array3::from_elem(grid.shape(), value),
        }
    }

    /// Samples `f(x1, x2, theta)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let values = Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
            f(grid.x(i), grid.x(j), grid.theta(k))
        });
        Field { grid, values }
    }

    /// Wraps an array; rejects a wrong shape or non-finite entries.
    pub fn from_values(grid: GridSpec, values: Array3<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(GridError::ShapeMismatch {
                expected: grid.shape(),
                got: values.dim(),
            });
        }
        let f = Field { grid, values };
        f.check_finite()?;
        Ok(f)
    }

    pub(crate) fn from_values_unchecked(grid: GridSpec, values: Array3<f64>) -> Self {
        debug_assert_eq!(values.dim(), grid.shape());
        Field { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        for ((i, j, k), v) in self.values.indexed_iter() {
            if !v.is_finite() {
                return Err(GridError::NonFinite(i, j, k));
            }
        }
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Total mass `dx^2 dtheta sum f`.
    pub fn mass(&self) -> Result<f64> {
        self.check_finite()?;
        Ok(self.grid.cell_volume() * self.values.sum())
    }

    /// Discrete `L^p` norm over space and orientation; `p = f64::INFINITY`
    /// gives the max norm.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(GridError::InvalidParameter(format!("p = {p} must be >= 1")));
        }
        self.check_finite()?;
        Ok(self.lp_norm_unchecked(p))
    }

    pub(crate) fn lp_norm_unchecked(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.max_abs();
        }
        let w = self.grid.cell_volume();
        if p == 1.0 {
            return w * self.values.iter().map(|v| v.abs()).sum::<f64>();
        }
        if p == 2.0 {
            return (w * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt();
        }
        (w * self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p)
    }

    /// Normalized first orientation moment `int f omega / int f`.
    pub fn polarization(&self) -> Result<[f64; 2]> {
        let m = self.mass()?;
        if m == 0.0 {
            return Err(GridError::ZeroMass);
        }
        let (mut px, mut py) = (0.0, 0.0);
        let nt = self.grid.ntheta;
        let omegas: Vec<[f64; 2]> = (0..nt).map(|k| self.grid.omega(k)).collect();
        for lane in self.values.rows() {
            for (v, w) in lane.iter().zip(&omegas) {
                px += v * w[0];
                py += v * w[1];
            }
        }
        let vol = self.grid.cell_volume();
        Ok([px * vol / m, py * vol / m])
    }

    /// The orientation profile `f(x_i, x_j, .)`.
    pub fn profile(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.slice(ndarray::s![i, j, ..]).to_vec()
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field::from_values_unchecked(self.grid, &self.values - &other.values)
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field::from_values_unchecked(self.grid, &self.values * a)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field) {
        Zip::from(&mut self.values)
            .and(&other.values)
            .for_each(|s, &o| *s += a * o);
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        Zip::from(&self.values)
            .and(&other.values)
            .fold(0.0, |m, a, b| m.max((a - b).abs()))
    }

    /// Writes the binary dump: magic, `nx`, `ntheta` (u64 LE), `L`, `dt`,
    /// `t` (f64 LE), then values row-major with theta fastest.
    pub fn write_binary<W: Write>(&self, t: f64, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.grid.nx as u64).to_le_bytes())?;
        w.write_all(&(self.grid.ntheta as u64).to_le_bytes())?;
        w.write_all(&self.grid.length.to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        w.write_all(&t.to_le_bytes())?;
        for v in self.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a binary dump, returning the field and its time stamp.
    pub fn read_binary<R: Read>(mut r: R) -> Result<(Field, f64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(GridError::Format(format!("bad magic {magic:?}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let nx = u64::from_le_bytes(next(&mut r)?) as usize;
        let ntheta = u64::from_le_bytes(next(&mut r)?) as usize;
        let length = f64::from_le_bytes(next(&mut r)?);
        let dt = f64::from_le_bytes(next(&mut r)?);
        let t = f64::from_le_bytes(next(&mut r)?);
        let grid = GridSpec::new(nx, length, ntheta, dt)?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            values.push(f64::from_le_bytes(next(&mut r)?));
        }
        let values = Array3::from_shape_vec(grid.shape(), values)
            .map_err(|e| GridError::Format(e.to_string()))?;
        Ok((Field::from_values(grid, values)?, t))
    }

    /// Plain-text dump: a header line `VKF1 nx ntheta L dt t` followed by one
    /// value per line in the binary ordering.
    pub fn write_text<W: Write>(&self, t: f64, mut w: W) -> Result<()> {
        writeln!(
            w,
            "VKF1 {} {} {:e} {:e} {:e}",
            self.grid.nx, self.grid.ntheta, self.grid.length, self.grid.dt, t
        )?;
        for v in self.values.iter() {
            writeln!(w, "{v:.17e}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<(Field, f64)> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Format("empty text dump".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "VKF1" {
            return Err(GridError::Format(format!("bad header {header:?}")));
        }
        let bad = |s: &str| GridError::Format(format!("bad header field {s:?}"));
        let nx: usize = parts[1].parse().map_err(|_| bad(parts[1]))?;
        let ntheta: usize = parts[2].parse().map_err(|_| bad(parts[2]))?;
        let length: f64 = parts[3].parse().map_err(|_| bad(parts[3]))?;
        let dt: f64 = parts[4].parse().map_err(|_| bad(parts[4]))?;
        let t: f64 = parts[5].parse().map_err(|_| bad(parts[5]))?;
        let grid = GridSpec::new(nx, length, ntheta, dt)?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            let line = line?;
            let s = line.trim();
            if s.is_empty() {
                continue;
            }
            values.push(s.parse::<f64>().map_err(|_| GridError::Format(format!("bad value {s:?}")))?);
        }
        if values.len() != grid.len() {
            return Err(GridError::Format(format!(
                "expected {} values, found {}",
                grid.len(),
                values.len()
            )));
        }
        let values = Array3::from_shape_vec(grid.shape(), values)
            .map_err(|e| GridError::Format(e.to_string()))?;
        Ok((Field::from_values(grid, values)?, t))
    }
}

/// A vector quantity (two Cartesian components) per phase-space node, used
/// for the alignment fields `F_0[f]` and `F_1[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub x: Array3<f64>,
    pub y: Array3<f64>,
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        VectorField {
            grid,
            x: Array3::zeros(grid.shape()),
            y: Array3::zeros(grid.shape()),
        }
    }

    /// Largest Euclidean magnitude over all nodes.
    pub fn sup_norm(&self) -> f64 {
        Zip::from(&self.x)
            .and(&self.y)
            .fold(0.0, |m: f64, a, b| m.max(a.hypot(*b)))
    }

    pub fn max_abs_diff(&self, other: &VectorField) -> f64 {
        Zip::from(&self.x)
            .and(&self.y)
            .and(&other.x)
            .and(&other.y)
            .fold(0.0, |m: f64, a, b, c, d| m.max((a - c).hypot(b - d)))
    }

    /// Tangential coefficient `F . tau(theta)` with `tau = (-sin, cos)`.
    pub fn tangential(&self) -> Array3<f64> {
        let g = self.grid;
        let mut out = Array3::zeros(g.shape());
        Zip::indexed(&mut out)
            .and(&self.x)
            .and(&self.y)
            .for_each(|(_, _, k), o, &fx, &fy| {
                let [c, s] = g.omega(k);
                *o = -s * fx + c * fy;
            });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(nx: usize, nt: usize) -> GridSpec {
        GridSpec::new(nx, 1.0, nt, 0.01).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(3, 1.0, 8, 0.1).is_err());
        assert!(GridSpec::new(4, 1.0, 9, 0.1).is_err());
        assert!(GridSpec::new(4, 1.0, 6, 0.1).is_err());
        assert!(GridSpec::new(4, 0.0, 8, 0.1).is_err());
        assert!(GridSpec::new(4, 1.0, 8, 0.0).is_err());
        assert!(GridSpec::new(4, 1.0, 8, 0.1).is_ok());
    }

    #[test]
    fn model_params_must_be_positive() {
        assert!(ModelParams::new(1.0, 1.0, 1.0).is_ok());
        assert!(ModelParams::new(0.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, -1.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn mass_examples() {
        let g = grid(8, 16);
        assert_eq!(Field::zeros(g).mass().unwrap(), 0.0);
        assert_abs_diff_eq!(Field::constant(g, 1.0).mass().unwrap(), 2.0 * PI, epsilon = 1e-13);
        let f = Field::from_fn(g, |_, _, t| t.cos().powi(2));
        assert_abs_diff_eq!(f.mass().unwrap(), PI, epsilon = 1e-13);
    }

    #[test]
    fn mass_rejects_non_finite() {
        let mut f = Field::constant(grid(4, 8), 1.0);
        f.values_mut()[[1, 2, 3]] = f64::NAN;
        assert!(matches!(f.mass(), Err(GridError::NonFinite(1, 2, 3))));
        assert!(Field::from_values(*f.grid(), f.values().clone()).is_err());
    }

    #[test]
    fn lp_examples() {
        let g = grid(8, 16);
        let one = Field::constant(g, 1.0);
        assert_abs_diff_eq!(one.lp_norm(1.0).unwrap(), 2.0 * PI, epsilon = 1e-13);
        assert_eq!(one.lp_norm(f64::INFINITY).unwrap(), 1.0);
        let s = Field::from_fn(g, |_, _, t| t.sin());
        // brute-force sum of sin^2 over the nodes
        let mut acc = 0.0;
        for _ in 0..64 {
            for k in 0..16 {
                acc += (g.theta(k)).sin().powi(2) * g.cell_volume();
            }
        }
        assert_abs_diff_eq!(s.lp_norm(2.0).unwrap(), acc.sqrt(), epsilon = 1e-13);
        assert_abs_diff_eq!(s.lp_norm(2.0).unwrap(), PI.sqrt(), epsilon = 1e-13);
        assert!(matches!(one.lp_norm(0.5), Err(GridError::InvalidParameter(_))));
        assert!(one.lp_norm(3.0).unwrap() > 0.0);
    }

    #[test]
    fn polarization_examples() {
        let g = grid(4, 32);
        let p = Field::constant(g, 2.0).polarization().unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-14);

        let bump = Field::from_fn(g, |_, _, t| if t == 0.0 { 1.0 } else { 0.0 });
        let p = bump.polarization().unwrap();
        assert_abs_diff_eq!(p[0].hypot(p[1]), 1.0, epsilon = 1e-14);

        let half = Field::from_fn(g, |_, _, t| 1.0 + t.cos());
        let p = half.polarization().unwrap();
        // direct summation of (1 + cos) cos over (1 + cos)
        let num: f64 = (0..32).map(|k| (1.0 + g.theta(k).cos()) * g.theta(k).cos()).sum();
        let den: f64 = (0..32).map(|k| 1.0 + g.theta(k).cos()).sum();
        assert_abs_diff_eq!(p[0], num / den, epsilon = 1e-14);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-14);

        assert!(matches!(Field::zeros(g).polarization(), Err(GridError::ZeroMass)));
    }

    #[test]
    fn binary_and_text_dumps_round_trip() {
        let g = grid(4, 8);
        let f = Field::from_fn(g, |x, y, t| x + 2.0 * y + t.sin());
        let mut buf = Vec::new();
        f.write_binary(0.25, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VKF1");
        assert_eq!(buf.len(), 4 + 5 * 8 + g.len() * 8);
        let (back, t) = Field::read_binary(&buf[..]).unwrap();
        assert_eq!(t, 0.25);
        assert_eq!(back, f);

        let mut txt = Vec::new();
        f.write_text(0.5, &mut txt).unwrap();
        let (back, t) = Field::read_text(&txt[..]).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(back, f);

        buf[0] = b'X';
        assert!(matches!(Field::read_binary(&buf[..]), Err(GridError::Format(_))));
    }

    #[test]
    fn dump_layout_is_theta_fastest() {
        let g = grid(4, 8);
        let f = Field::from_fn(g, |x, _, t| x * 100.0 + t);
        let mut buf = Vec::new();
        f.write_binary(0.0, &mut buf).unwrap();
        let v = |n: usize| f64::from_le_bytes(buf[44 + 8 * n..52 + 8 * n].try_into().unwrap());
        assert_eq!(v(1), g.theta(1));
        assert_eq!(v(8 * 4), g.x(1) * 100.0);
    }

    #[test]
    fn tangential_projection_of_constant_vector() {
        let g = grid(4, 16);
        let mut v = VectorField::zeros(g);
        v.x.fill(1.0);
        let tau = v.tangential();
        for k in 0..16 {
            assert_abs_diff_eq!(tau[[0, 0, k]], -g.theta(k).sin(), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v.sup_norm(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn polarization_magnitude_at_most_one(vals in proptest::collection::vec(0.0f64..10.0, 4 * 4 * 8)) {
            let g = grid(4, 8);
            let arr = Array3::from_shape_vec(g.shape(), vals).unwrap();
            let f = Field::from_values(g, arr).unwrap();
            if f.mass().unwrap() > 0.0 {
                let p = f.polarization().unwrap();
                proptest::prop_assert!(p[0].hypot(p[1]) <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn quadrature_exact_for_resolved_trig(a in -1.0f64..1.0, b in -1.0f64..1.0, m in 1usize..8) {
            // degree < ntheta/2 = 8; integral of 2 + a cos(m t) + b sin(m t) over the box is 4 pi
            let g = grid(4, 16);
            let f = Field::from_fn(g, |_, _, t| 2.0 + a * (m as f64 * t).cos() + b * (m as f64 * t).sin());
            proptest::prop_assert!((f.mass().unwrap() - 4.0 * PI).abs() < 1e-12);
        }
    }
}
