//! Self-propelled particles with Vicsek alignment and orientation noise.
//!
//! Each particle moves at speed `c` along `omega = (cos theta, sin theta)`.
//! On the circle the projected Stratonovich equation for `omega` is the angle
//! equation `d theta = nu (target . tau) dt + sqrt(2 sigma) dW`, which is what
//! the default integrator solves. A planar integrator that projects and
//! renormalizes is kept for cross-checking.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, GridError, GridSpec, ModelParams};
use crate::kernels::SpatialKernel;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("orientation step too large: dt = {dt}, suggested {suggested_dt}")]
    StepTooLarge { dt: f64, suggested_dt: f64 },
    #[error("interaction radius {radius} must be positive and below half the box side {half_box}")]
    Radius { radius: f64, half_box: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = ParticleError> = std::result::Result<T, E>;

/// Wraps an angle into `[0, 2 pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

/// Signed difference `a - b` reduced to `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

fn wrap_position(x: f64, length: f64) -> f64 {
    let y = x.rem_euclid(length);
    if y >= length {
        0.0
    } else {
        y
    }
}

/// Minimum-image displacement `b - a` on the torus.
pub fn torus_delta(a: [f64; 2], b: [f64; 2], length: f64) -> [f64; 2] {
    let f = |d: f64| d - length * (d / length).round();
    [f(b[0] - a[0]), f(b[1] - a[1])]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub length: f64,
    pub x: Vec<[f64; 2]>,
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
    pub seed: u64,
    /// Steps taken; together with `seed` this is the generator state.
    pub step: u64,
}

impl ParticleEnsemble {
    pub fn new(length: f64, x: Vec<[f64; 2]>, theta: Vec<f64>, mass: f64, seed: u64) -> Result<Self> {
        if x.len() != theta.len() {
            return Err(ParticleError::Mismatch("positions and angles differ in length".into()));
        }
        if !(length > 0.0) {
            return Err(ParticleError::InvalidParameter(format!("box side {length}")));
        }
        let n = x.len();
        let w = if n == 0 { 0.0 } else { mass / n as f64 };
        Ok(ParticleEnsemble {
            length,
            x: x.into_iter().map(|p| [wrap_position(p[0], length), wrap_position(p[1], length)]).collect(),
            theta: theta.into_iter().map(wrap_angle).collect(),
            weights: vec![w; n],
            seed,
            step: 0,
        })
    }

    /// `n` particles uniform in space and orientation.
    pub fn uniform(n: usize, length: f64, mass: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0001);
        let x = (0..n).map(|_| [rng.gen::<f64>() * length, rng.gen::<f64>() * length]).collect();
        let theta = (0..n).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
        ParticleEnsemble::new(length, x, theta, mass, seed).expect("valid uniform ensemble")
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn omega(&self, k: usize) -> [f64; 2] {
        let (s, c) = self.theta[k].sin_cos();
        [c, s]
    }

    /// Weighted mean orientation divided by total weight.
    pub fn polarization(&self) -> [f64; 2] {
        let m = self.mass();
        if m == 0.0 {
            return [0.0, 0.0];
        }
        let mut p = [0.0, 0.0];
        for (t, w) in self.theta.iter().zip(&self.weights) {
            p[0] += w * t.cos();
            p[1] += w * t.sin();
        }
        [p[0] / m, p[1] / m]
    }

    /// Columnar snapshot: header then `x1 x2 theta weight` per particle.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# x1 x2 theta weight")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{:.17e} {:.17e} {:.17e} {:.17e}",
                self.x[k][0], self.x[k][1], self.theta[k], self.weights[k]
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R, length: f64) -> Result<Self> {
        let mut ens = ParticleEnsemble::new(length, Vec::new(), Vec::new(), 0.0, 0)?;
        for line in r.lines() {
            let line = line.map_err(GridError::from)?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| GridError::Format(format!("{e}: {line}")))?;
            if v.len() != 4 {
                return Err(GridError::Format(format!("expected 4 columns: {line}")).into());
            }
            ens.x.push([v[0], v[1]]);
            ens.theta.push(v[2]);
            ens.weights.push(v[3]);
        }
        Ok(ens)
    }
}

/// Normalization of the neighbour sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AlphaRule {
    /// Divide by the number of neighbours.
    Mean,
    /// Fixed prefactor.
    Raw { alpha: f64 },
    /// Unit vector along the sum (zero if the sum vanishes).
    Normalized,
}

/// How each particle's alignment target is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interaction {
    /// `alpha sum_{|x_j - x_k| < R} omega_j`.
    Neighbors {
        radius: f64,
        alpha: AlphaRule,
        include_self: bool,
    },
    /// `sum_j w_j K(x_j - x_k; theta_k, theta_j)` with a spatial kernel.
    Kernel(SpatialKernel),
    /// The same fixed vector for every particle.
    Fixed([f64; 2]),
}

impl Interaction {
    pub fn neighbors(radius: f64) -> Self {
        Interaction::Neighbors {
            radius,
            alpha: AlphaRule::Mean,
            include_self: true,
        }
    }

    fn radius(&self) -> Option<f64> {
        match self {
            Interaction::Neighbors { radius, .. } => Some(*radius),
            Interaction::Kernel(k) => Some(k.cutoff),
            Interaction::Fixed(_) => None,
        }
    }

    fn validate(&self, length: f64) -> Result<()> {
        if let Some(r) = self.radius() {
            if !(r > 0.0 && r < 0.5 * length) {
                return Err(ParticleError::Radius {
                    radius: r,
                    half_box: 0.5 * length,
                });
            }
        }
        Ok(())
    }
}

/// Uniform cell list over the torus with cells no smaller than the radius.
#[derive(Debug, Clone)]
pub struct CellList {
    cells_per_side: usize,
    cell: f64,
    start: Vec<usize>,
    members: Vec<usize>,
}

impl CellList {
    pub fn build(ens: &ParticleEnsemble, radius: f64) -> Self {
        // cells wider than the radius are still correct; cap the count by N
        let cap = 2 * ((ens.len() as f64).sqrt().ceil() as usize) + 3;
        let m = ((ens.length / radius).floor().min(cap as f64) as usize).max(1);
        let cell = ens.length / m as f64;
        let index = |p: [f64; 2]| {
            let i = ((p[0] / cell) as usize).min(m - 1);
            let j = ((p[1] / cell) as usize).min(m - 1);
            i * m + j
        };
        let mut counts = vec![0usize; m * m + 1];
        for p in &ens.x {
            counts[index(*p) + 1] += 1;
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut members = vec![0usize; ens.len()];
        for (k, p) in ens.x.iter().enumerate() {
            let c = index(*p);
            members[fill[c]] = k;
            fill[c] += 1;
        }
        CellList {
            cells_per_side: m,
            cell,
            start: counts,
            members,
        }
    }

    /// Calls `visit(j)` for every particle in the cells around `p`; each
    /// candidate is visited once.
    pub fn for_candidates(&self, p: [f64; 2], mut visit: impl FnMut(usize)) {
        let m = self.cells_per_side;
        if m < 3 {
            self.members.iter().for_each(|&j| visit(j));
            return;
        }
        let ci = ((p[0] / self.cell) as usize).min(m - 1) as i64;
        let cj = ((p[1] / self.cell) as usize).min(m - 1) as i64;
        for di in -1..=1 {
            for dj in -1..=1 {
                let i = (ci + di).rem_euclid(m as i64) as usize;
                let j = (cj + dj).rem_euclid(m as i64) as usize;
                let c = i * m + j;
                for &k in &self.members[self.start[c]..self.start[c + 1]] {
                    visit(k);
                }
            }
        }
    }
}

fn within(ens: &ParticleEnsemble, k: usize, j: usize, radius: f64) -> bool {
    let d = torus_delta(ens.x[k], ens.x[j], ens.length);
    d[0] * d[0] + d[1] * d[1] < radius * radius
}

/// Neighbours of particle `k` by an all-pairs scan, in increasing order.
pub fn neighbors_brute_force(ens: &ParticleEnsemble, k: usize, radius: f64, include_self: bool) -> Vec<usize> {
    (0..ens.len())
        .filter(|&j| (include_self || j != k) && within(ens, k, j, radius))
        .collect()
}

/// Neighbours of particle `k` through the cell list, in increasing order.
pub fn neighbors(ens: &ParticleEnsemble, cells: &CellList, k: usize, radius: f64, include_self: bool) -> Vec<usize> {
    let mut out = Vec::new();
    cells.for_candidates(ens.x[k], |j| {
        if (include_self || j != k) && within(ens, k, j, radius) {
            out.push(j);
        }
    });
    out.sort_unstable();
    out
}

fn combine(alpha: AlphaRule, sum: [f64; 2], count: usize) -> [f64; 2] {
    match alpha {
        AlphaRule::Mean => {
            if count == 0 {
                [0.0, 0.0]
            } else {
                [sum[0] / count as f64, sum[1] / count as f64]
            }
        }
        AlphaRule::Raw { alpha } => [alpha * sum[0], alpha * sum[1]],
        AlphaRule::Normalized => {
            let n = sum[0].hypot(sum[1]);
            if n == 0.0 {
                [0.0, 0.0]
            } else {
                [sum[0] / n, sum[1] / n]
            }
        }
    }
}

/// Alignment target of particle `k` (all-pairs scan).
pub fn alignment_target(ens: &ParticleEnsemble, k: usize, cfg: &Interaction) -> [f64; 2] {
    match cfg {
        Interaction::Fixed(v) => *v,
        Interaction::Neighbors {
            radius,
            alpha,
            include_self,
        } => {
            let nb = neighbors_brute_force(ens, k, *radius, *include_self);
            let mut sum = [0.0, 0.0];
            for &j in &nb {
                let w = ens.omega(j);
                sum[0] += w[0];
                sum[1] += w[1];
            }
            combine(*alpha, sum, nb.len())
        }
        Interaction::Kernel(kernel) => {
            let mut sum = [0.0, 0.0];
            for j in 0..ens.len() {
                let y = torus_delta(ens.x[k], ens.x[j], ens.length);
                let v = kernel.eval(y, ens.theta[k], ens.theta[j]);
                sum[0] += ens.weights[j] * v[0];
                sum[1] += ens.weights[j] * v[1];
            }
            sum
        }
    }
}

/// Targets of all particles, using a cell list.
pub fn alignment_targets(ens: &ParticleEnsemble, cfg: &Interaction) -> Vec<[f64; 2]> {
    let Some(radius) = cfg.radius() else {
        let v = match cfg {
            Interaction::Fixed(v) => *v,
            _ => unreachable!(),
        };
        return vec![v; ens.len()];
    };
    let cells = CellList::build(ens, radius);
    (0..ens.len())
        .map(|k| {
            let mut sum = [0.0, 0.0];
            let mut count = 0usize;
            cells.for_candidates(ens.x[k], |j| {
                let y = torus_delta(ens.x[k], ens.x[j], ens.length);
                if y[0] * y[0] + y[1] * y[1] >= radius * radius {
                    return;
                }
                match cfg {
                    Interaction::Neighbors { include_self, .. } => {
                        if *include_self || j != k {
                            let w = ens.omega(j);
                            sum[0] += w[0];
                            sum[1] += w[1];
                            count += 1;
                        }
                    }
                    Interaction::Kernel(kernel) => {
                        let v = kernel.eval(y, ens.theta[k], ens.theta[j]);
                        sum[0] += ens.weights[j] * v[0];
                        sum[1] += ens.weights[j] * v[1];
                    }
                    Interaction::Fixed(_) => unreachable!(),
                }
            });
            match cfg {
                Interaction::Neighbors { alpha, .. } => combine(*alpha, sum, count),
                _ => sum,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Angle equation: Heun drift plus exact Gaussian increment.
    #[default]
    CircleHeun,
    /// Stratonovich Heun for the projected planar equation, renormalized.
    ProjectedPlanar,
}

/// Seed of the stream used by particle `k` at step `n`.
fn stream_seed(seed: u64, step: u64, k: usize) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((k as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_pair(seed: u64, step: u64, k: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, step, k));
    (rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn tangential(v: [f64; 2], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    -s * v[0] + c * v[1]
}

/// One step of the particle system.
pub fn step_particles(
    ens: &ParticleEnsemble,
    cfg: &Interaction,
    params: &ModelParams,
    dt: f64,
    integrator: Integrator,
) -> Result<ParticleEnsemble> {
    cfg.validate(ens.length)?;
    if !(dt > 0.0) {
        return Err(ParticleError::InvalidParameter(format!("dt = {dt}")));
    }
    let targets = alignment_targets(ens, cfg);
    let top = targets.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
    let rate = params.nu * top;
    if rate * dt > PI / 4.0 {
        return Err(ParticleError::StepTooLarge {
            dt,
            suggested_dt: PI / 4.0 / rate,
        });
    }
    let noise = (2.0 * params.sigma * dt).sqrt();
    let n = ens.len();
    let mut x = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for k in 0..n {
        let th = ens.theta[k];
        let target = targets[k];
        let (z1, z2) = normal_pair(ens.seed, ens.step, k);
        let new_theta = match integrator {
            Integrator::CircleHeun => {
                let d1 = params.nu * tangential(target, th);
                let pred = th + dt * d1;
                let d2 = params.nu * tangential(target, pred);
                th + 0.5 * dt * (d1 + d2) + noise * z1
            }
            Integrator::ProjectedPlanar => {
                let w = [th.cos(), th.sin()];
                let inc = [
                    params.nu * (target[0] - w[0]) * dt + noise * z1,
                    params.nu * (target[1] - w[1]) * dt + noise * z2,
                ];
                let proj = |w: [f64; 2], v: [f64; 2]| {
                    let d = w[0] * v[0] + w[1] * v[1];
                    [v[0] - d * w[0], v[1] - d * w[1]]
                };
                let p1 = proj(w, inc);
                let wp = [w[0] + p1[0], w[1] + p1[1]];
                let incp = [
                    params.nu * (target[0] - wp[0]) * dt + noise * z1,
                    params.nu * (target[1] - wp[1]) * dt + noise * z2,
                ];
                let p2 = proj(wp, incp);
                let wn = [w[0] + 0.5 * (p1[0] + p2[0]), w[1] + 0.5 * (p1[1] + p2[1])];
                th + angle_diff(wn[1].atan2(wn[0]), th)
            }
        };
        let mid = 0.5 * (th + new_theta);
        let (s, c) = mid.sin_cos();
        x.push([
            wrap_position(ens.x[k][0] + params.c * dt * c, ens.length),
            wrap_position(ens.x[k][1] + params.c * dt * s, ens.length),
        ]);
        theta.push(wrap_angle(new_theta));
    }
    Ok(ParticleEnsemble {
        length: ens.length,
        x,
        theta,
        weights: ens.weights.clone(),
        seed: ens.seed,
        step: ens.step + 1,
    })
}

/// Histogram of the ensemble: cloud-in-cell in space, nearest node in
/// orientation, scaled to a density whose mass is the total weight.
pub fn empirical_density(ens: &ParticleEnsemble, grid: &GridSpec) -> Result<Field> {
    grid.validate()?;
    if (grid.length - ens.length).abs() > 1e-12 * grid.length {
        return Err(ParticleError::Mismatch(format!(
            "grid box {} differs from particle box {}",
            grid.length, ens.length
        )));
    }
    let n = grid.nx;
    let nt = grid.ntheta;
    let dx = grid.dx();
    let vol = grid.cell_volume();
    let mut f = Field::zeros(*grid);
    let v = f.values_mut();
    for k in 0..ens.len() {
        let fx = ens.x[k][0] / dx;
        let fy = ens.x[k][1] / dx;
        let (i0, j0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - i0, fy - j0);
        let i0 = (i0 as i64).rem_euclid(n as i64) as usize;
        let j0 = (j0 as i64).rem_euclid(n as i64) as usize;
        let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
        let t = ((ens.theta[k] / grid.dtheta()).round() as i64).rem_euclid(nt as i64) as usize;
        let w = ens.weights[k] / vol;
        v[[i0, j0, t]] += w * (1.0 - ax) * (1.0 - ay);
        v[[i1, j0, t]] += w * ax * (1.0 - ay);
        v[[i0, j1, t]] += w * (1.0 - ax) * ay;
        v[[i1, j1, t]] += w * ax * ay;
    }
    Ok(f)
}

/// Draws `n` particles from a nonnegative field: a node is chosen by
/// inverting the discrete CDF, then the particle is placed uniformly in the
/// node's cell. Weights are `mass / n`.
pub fn sample_from_field(f: &Field, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if !f.is_nonnegative() {
        return Err(ParticleError::InvalidParameter("cannot sample a field with negative values".into()));
    }
    let g = *f.grid();
    let mass = f.mass()?;
    if mass == 0.0 {
        return Err(GridError::ZeroMass.into());
    }
    let vals = f.values().as_slice().expect("standard layout");
    let mut cdf = Vec::with_capacity(vals.len());
    let mut acc = 0.0;
    for v in vals {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;
    let (nx, nt) = (g.nx, g.ntheta);
    let (dx, dth) = (g.dx(), g.dtheta());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00_0000_0002);
    let mut x = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        let idx = cdf.partition_point(|c| *c <= u).min(vals.len() - 1);
        let (i, rem) = (idx / (nx * nt), idx % (nx * nt));
        let (j, k) = (rem / nt, rem % nt);
        x.push([
            (i as f64 + rng.gen::<f64>() - 0.5) * dx,
            (j as f64 + rng.gen::<f64>() - 0.5) * dx,
        ]);
        theta.push((k as f64 + rng.gen::<f64>() - 0.5) * dth);
    }
    ParticleEnsemble::new(g.length, x, theta, mass, seed)
}

/// Polarization and optional densities recorded along a particle run.
#[derive(Debug, Clone)]
pub struct ParticleRun {
    pub times: Vec<f64>,
    pub polarization: Vec<[f64; 2]>,
    pub densities: Vec<Field>,
    pub final_ensemble: ParticleEnsemble,
}

/// Advances `steps` steps, recording every `record_every` steps (and at 0).
pub fn simulate(
    ens: &ParticleEnsemble,
    cfg: &Interaction,
    params: &ModelParams,
    dt: f64,
    steps: usize,
    record_every: usize,
    grid: Option<&GridSpec>,
    integrator: Integrator,
) -> Result<ParticleRun> {
    if record_every == 0 {
        return Err(ParticleError::InvalidParameter("record_every must be >= 1".into()));
    }
    let mut run = ParticleRun {
        times: Vec::new(),
        polarization: Vec::new(),
        densities: Vec::new(),
        final_ensemble: ens.clone(),
    };
    let record = |t: f64, e: &ParticleEnsemble, run: &mut ParticleRun| -> Result<()> {
        run.times.push(t);
        run.polarization.push(e.polarization());
        if let Some(g) = grid {
            run.densities.push(empirical_density(e, g)?);
        }
        Ok(())
    };
    let mut cur = ens.clone();
    record(0.0, &cur, &mut run)?;
    for n in 1..=steps {
        cur = step_particles(&cur, cfg, params, dt, integrator)?;
        if n % record_every == 0 {
            record(n as f64 * dt, &cur, &mut run)?;
        }
    }
    run.final_ensemble = cur;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum Discrepancy {
    /// `|P_particles - P_kinetic|`.
    PolarizationGap,
    /// L1 distance after `passes` rounds of `[1 2 1] / 4` smoothing per axis.
    SmoothedL1 { passes: usize },
}

fn smooth(f: &Field, passes: usize) -> Field {
    let g = *f.grid();
    let mut v = f.values().clone();
    let dims = [g.nx, g.nx, g.ntheta];
    for _ in 0..passes {
        for axis in 0..3 {
            let n = dims[axis];
            let src = v.clone();
            for ((i, j, k), out) in v.indexed_iter_mut() {
                let idx = [i, j, k];
                let at = |off: usize| {
                    let mut p = idx;
                    p[axis] = (idx[axis] + off) % n;
                    src[[p[0], p[1], p[2]]]
                };
                *out = 0.25 * at(n - 1) + 0.5 * at(0) + 0.25 * at(1);
            }
        }
    }
    Field::from_values(g, v).expect("smoothing keeps values finite")
}

/// Discrepancy series between particle densities and kinetic snapshots at
/// matching times.
pub fn meanfield_compare(
    particle: &[(f64, Field)],
    kinetic: &[(f64, Field)],
    metric: Discrepancy,
) -> Result<Vec<(f64, f64)>> {
    if particle.len() != kinetic.len() {
        return Err(ParticleError::Mismatch(format!(
            "{} particle snapshots vs {} kinetic snapshots",
            particle.len(),
            kinetic.len()
        )));
    }
    particle
        .iter()
        .zip(kinetic)
        .map(|((tp, fp), (tk, fk))| {
            if (tp - tk).abs() > 1e-9 * tp.abs().max(1.0) {
                return Err(ParticleError::Mismatch(format!("snapshot times {tp} and {tk}")));
            }
            if !fp.grid().same_mesh(fk.grid()) {
                return Err(ParticleError::Mismatch("snapshot grids differ".into()));
            }
            let d = match metric {
                Discrepancy::PolarizationGap => {
                    let a = fp.polarization()?;
                    let b = fk.polarization()?;
                    (a[0] - b[0]).hypot(a[1] - b[1])
                }
                Discrepancy::SmoothedL1 { passes } => {
                    smooth(fp, passes).sub(&smooth(fk, passes)).lp_norm_unchecked(1.0)
                }
            };
            Ok((*tp, d))
        })
        .collect()
}

/// Angle of the fixed-target relaxation `theta' = nu sin(target - theta)`.
pub fn relaxation_angle(theta0: f64, target: f64, nu: f64, t: f64) -> f64 {
    let d0 = angle_diff(theta0, target);
    target + 2.0 * ((0.5 * d0).tan() * (-nu * t).exp()).atan()
}

/// Pearson chi-square test of standardized samples against `N(0, 1)` with
/// `bins` equiprobable bins; returns `(statistic, p-value)`.
pub fn normal_chi_square(z: &[f64], bins: usize) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let edges: Vec<f64> = (1..bins).map(|b| normal.inverse_cdf(b as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    for v in z {
        counts[edges.partition_point(|e| e < v)] += 1;
    }
    let expected = z.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let chi = ChiSquared::new((bins - 1) as f64).expect("valid degrees of freedom");
    (stat, 1.0 - chi.cdf(stat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params(sigma: f64, nu: f64) -> ModelParams {
        ModelParams { c: 1.0, sigma, nu }
    }

    #[test]
    fn alignment_target_examples() {
        let single = ParticleEnsemble::new(1.0, vec![[0.5, 0.5]], vec![0.7], 1.0, 0).unwrap();
        let raw = Interaction::Neighbors {
            radius: 0.1,
            alpha: AlphaRule::Raw { alpha: 2.0 },
            include_self: true,
        };
        let v = alignment_target(&single, 0, &raw);
        assert_abs_diff_eq!(v[0], 2.0 * 0.7f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 2.0 * 0.7f64.sin(), epsilon = 1e-15);

        let pair = ParticleEnsemble::new(1.0, vec![[0.5, 0.5], [0.52, 0.5]], vec![0.0, PI], 1.0, 0).unwrap();
        let unit = Interaction::Neighbors {
            radius: 0.1,
            alpha: AlphaRule::Raw { alpha: 1.0 },
            include_self: true,
        };
        let v = alignment_target(&pair, 0, &unit);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn neighbors_match_brute_force() {
        let ens = ParticleEnsemble::uniform(100, 1.0, 1.0, 9);
        for &r in &[0.05, 0.1, 0.2, 0.45] {
            let cells = CellList::build(&ens, r);
            for k in 0..100 {
                assert_eq!(neighbors(&ens, &cells, k, r, true), neighbors_brute_force(&ens, k, r, true));
                assert_eq!(neighbors(&ens, &cells, k, r, false), neighbors_brute_force(&ens, k, r, false));
            }
            for alpha in [AlphaRule::Mean, AlphaRule::Raw { alpha: 0.3 }, AlphaRule::Normalized] {
                let cfg = Interaction::Neighbors {
                    radius: r,
                    alpha,
                    include_self: true,
                };
                let fast = alignment_targets(&ens, &cfg);
                for k in 0..100 {
                    let slow = alignment_target(&ens, k, &cfg);
                    assert!((fast[k][0] - slow[0]).abs() < 1e-14 && (fast[k][1] - slow[1]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn target_along_heading_leaves_angle_unchanged() {
        let ens = ParticleEnsemble::uniform(50, 1.0, 1.0, 3);
        let cfg = Interaction::Neighbors {
            radius: 1e-6,
            alpha: AlphaRule::Mean,
            include_self: true,
        };
        let out = step_particles(&ens, &cfg, &params(0.0, 1.0), 0.05, Integrator::CircleHeun).unwrap();
        for k in 0..50 {
            assert_abs_diff_eq!(angle_diff(out.theta[k], ens.theta[k]), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn fixed_target_relaxation_is_second_order() {
        let target: f64 = 1.0;
        let cfg = Interaction::Fixed([target.cos(), target.sin()]);
        let p = params(0.0, 1.0);
        let theta0 = 4.0;
        let t_end = 2.0;
        let err = |steps: usize| {
            let mut e = ParticleEnsemble::new(1.0, vec![[0.0, 0.0]], vec![theta0], 1.0, 0).unwrap();
            let dt = t_end / steps as f64;
            let mut prev = angle_diff(theta0, target).abs();
            for _ in 0..steps {
                e = step_particles(&e, &cfg, &p, dt, Integrator::CircleHeun).unwrap();
                let d = angle_diff(e.theta[0], target).abs();
                assert!(d <= prev);
                prev = d;
            }
            angle_diff(e.theta[0], relaxation_angle(theta0, target, 1.0, t_end)).abs()
        };
        let (e1, e2) = (err(20), err(40));
        assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
    }

    #[test]
    fn step_size_guard() {
        let e = ParticleEnsemble::new(1.0, vec![[0.0, 0.0]], vec![0.0], 1.0, 0).unwrap();
        let cfg = Interaction::Fixed([0.0, 10.0]);
        let err = step_particles(&e, &cfg, &params(0.0, 1.0), 0.1, Integrator::CircleHeun).unwrap_err();
        match err {
            ParticleError::StepTooLarge { suggested_dt, .. } => assert_abs_diff_eq!(suggested_dt, PI / 40.0),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn noise_only_variance_and_distribution() {
        let n = 20_000;
        let ens = ParticleEnsemble::uniform(n, 1.0, 1.0, 21);
        let (sigma, dt, m) = (0.3, 0.01, 10);
        let p = params(sigma, 0.0);
        for integ in [Integrator::CircleHeun, Integrator::ProjectedPlanar] {
            let mut cur = ens.clone();
            let mut acc = vec![0.0; n];
            for _ in 0..m {
                let next = step_particles(&cur, &Interaction::Fixed([0.0, 0.0]), &p, dt, integ).unwrap();
                for k in 0..n {
                    acc[k] += angle_diff(next.theta[k], cur.theta[k]);
                }
                cur = next;
            }
            let var = acc.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let expect = 2.0 * sigma * m as f64 * dt;
            let se = expect * (2.0 / n as f64).sqrt();
            let tol = if integ == Integrator::CircleHeun { 3.0 * se } else { 3.0 * se + 0.05 * expect };
            assert!((var - expect).abs() < tol, "{integ:?} {var} vs {expect}");
            if integ == Integrator::CircleHeun {
                let z: Vec<f64> = acc.iter().map(|v| v / expect.sqrt()).collect();
                let (_, pval) = normal_chi_square(&z, 20);
                assert!(pval > 0.01, "p = {pval}");
            }
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let ens = ParticleEnsemble::uniform(300, 1.0, 1.0, 5);
        let cfg = Interaction::neighbors(0.1);
        let p = params(0.2, 1.0);
        let a = simulate(&ens, &cfg, &p, 0.05, 5, 1, None, Integrator::CircleHeun).unwrap();
        let b = simulate(&ens, &cfg, &p, 0.05, 5, 1, None, Integrator::CircleHeun).unwrap();
        assert_eq!(a.final_ensemble, b.final_ensemble);
        assert_eq!(a.polarization, b.polarization);
    }

    #[test]
    fn deposition_examples() {
        let g = GridSpec::new(16, 1.0, 8, 0.1).unwrap();
        let one = ParticleEnsemble::new(1.0, vec![[0.37, 0.91]], vec![2.0], 0.7, 0).unwrap();
        let f = empirical_density(&one, &g).unwrap();
        assert_abs_diff_eq!(f.mass().unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(f.values().iter().filter(|v| **v > 0.0).count(), 4);

        let many = ParticleEnsemble::uniform(10_000, 1.0, 3.0, 1);
        assert_abs_diff_eq!(empirical_density(&many, &g).unwrap().mass().unwrap(), 3.0, epsilon = 1e-12);

        let wrong = GridSpec::new(16, 2.0, 8, 0.1).unwrap();
        assert!(empirical_density(&one, &wrong).is_err());
    }

    #[test]
    fn uniform_ensemble_histogram_is_flat_within_noise() {
        let g = GridSpec::new(8, 1.0, 8, 0.1).unwrap();
        let n = 200_000;
        let ens = ParticleEnsemble::uniform(n, 1.0, 1.0, 77);
        let f = empirical_density(&ens, &g).unwrap();
        let cells = g.len() as f64;
        let mean = 1.0 / (cells * g.cell_volume());
        // CIC spreads each particle over four cells, shrinking the variance
        let sd = mean * (cells / n as f64).sqrt();
        let worst = f.values().iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        assert!(worst < 4.0 * sd, "{worst} vs {sd}");
    }

    #[test]
    fn sampling_reproduces_the_field() {
        let g = GridSpec::new(8, 1.0, 16, 0.1).unwrap();
        let f = Field::from_fn(g, |x, _, t| (1.0 + 0.5 * (2.0 * PI * x).cos()) * (1.0 + 0.8 * t.cos()));
        let ens = sample_from_field(&f, 200_000, 4).unwrap();
        assert_abs_diff_eq!(ens.mass(), f.mass().unwrap(), epsilon = 1e-9);
        let pf = f.polarization().unwrap();
        let pe = ens.polarization();
        assert!((pf[0] - pe[0]).abs() < 0.01 && pe[1].abs() < 0.01, "{pf:?} {pe:?}");
    }

    #[test]
    fn compare_rejects_mismatched_snapshots() {
        let g = GridSpec::new(8, 1.0, 8, 0.1).unwrap();
        let h = GridSpec::new(8, 1.0, 16, 0.1).unwrap();
        let a = vec![(0.0, Field::constant(g, 1.0))];
        let b = vec![(0.0, Field::constant(h, 1.0))];
        assert!(meanfield_compare(&a, &b, Discrepancy::PolarizationGap).is_err());
        let c = vec![(0.5, Field::constant(g, 1.0))];
        assert!(meanfield_compare(&a, &c, Discrepancy::PolarizationGap).is_err());
        let d = meanfield_compare(&a, &a, Discrepancy::SmoothedL1 { passes: 2 }).unwrap();
        assert_eq!(d, vec![(0.0, 0.0)]);
    }

    #[test]
    fn snapshot_text_round_trip() {
        let ens = ParticleEnsemble::uniform(20, 2.0, 1.0, 8);
        let mut buf = Vec::new();
        ens.write_text(&mut buf).unwrap();
        let back = ParticleEnsemble::read_text(&buf[..], 2.0).unwrap();
        assert_eq!(back.x, ens.x);
        assert_eq!(back.theta, ens.theta);
        assert_eq!(back.weights, ens.weights);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn steps_keep_particles_on_the_torus_and_circle(seed in 0u64..500, sigma in 0.0f64..2.0) {
            let ens = ParticleEnsemble::uniform(40, 1.0, 1.0, seed);
            let out = step_particles(&ens, &Interaction::neighbors(0.2), &params(sigma, 1.0), 0.1, Integrator::CircleHeun).unwrap();
            prop_assert!(out.x.iter().all(|p| p[0] >= 0.0 && p[0] < 1.0 && p[1] >= 0.0 && p[1] < 1.0));
            prop_assert!(out.theta.iter().all(|t| *t >= 0.0 && *t < 2.0 * PI));
        }
    }
}
