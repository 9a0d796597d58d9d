//! Experiment runners. Each writes its columnar outputs into the run
//! directory and returns the checks that decide the exit status.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use vicsek_kinetic::grid::{Field, GridSpec};
use vicsek_kinetic::kernels::{self, F0Operator, KernelSpec, SpatialKernel};
use vicsek_kinetic::linear::{self, DriftField, DriftSchedule, ForceBound, LinearOptions};
use vicsek_kinetic::nonlinear::{self, ModelKind, NonlinearMode, NonlinearRunConfig};
use vicsek_kinetic::particles::{self, Discrepancy, Interaction};
use vicsek_kinetic::scaling::{self, OrderStudy, TestFunction};
use vicsek_kinetic::sphere::{self, Differencing};

use crate::error::{numerical, CliError};
use crate::manifest::{Experiment, ForceSpec, InteractionKind, RunManifest};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            limit,
            relation: "<=",
            pass: measured <= limit,
        }
    }

    pub fn at_least(name: &str, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            limit,
            relation: ">=",
            pass: measured >= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub manifest_hash: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub values: BTreeMap<String, Value>,
}

#[derive(Default)]
struct Outcome {
    checks: Vec<Check>,
    values: BTreeMap<String, Value>,
}

impl Outcome {
    fn value(&mut self, key: &str, v: impl Serialize) {
        self.values.insert(key.into(), json!(v));
    }
}

fn schema(e: impl std::fmt::Display) -> CliError {
    CliError::Schema(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn dump_fields(dir: &Path, snapshots: &[(f64, Field)]) -> Result<(), CliError> {
    let fields = dir.join("fields");
    fs::create_dir_all(&fields)?;
    for (k, (t, f)) in snapshots.iter().enumerate() {
        let mut w = create(&fields.join(format!("field_{k:05}.bin")))?;
        f.write_binary(*t, &mut w).map_err(|e| CliError::Io(e.to_string()))?;
        w.flush()?;
    }
    Ok(())
}

fn relative_mass_drift(reports: &[linear::StepReport]) -> f64 {
    let m0 = reports[0].mass;
    let scale = if m0 == 0.0 { 1.0 } else { m0.abs() };
    reports.iter().map(|r| (r.mass - m0).abs() / scale).fold(0.0, f64::max)
}

fn write_reports(dir: &Path, reports: &[linear::StepReport]) -> Result<(), CliError> {
    let mut w = create(&dir.join("diagnostics.dat"))?;
    linear::write_diagnostics(reports, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs the experiment named in the manifest and appends its summary.
pub fn run(m: &RunManifest) -> Result<Summary, CliError> {
    m.validate()?;
    let dir = m.outputs.directory.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let outcome = match m.experiment {
        Experiment::Linear => linear_run(m, &dir)?,
        Experiment::NonlinearNonlocal => nonlinear_run(m, &dir, ModelKind::Nonlocal)?,
        Experiment::NonlinearLocal => nonlinear_run(m, &dir, ModelKind::Local)?,
        Experiment::Particles => particle_run(m, &dir)?,
        Experiment::ScalingStudy => scaling_run(m, &dir)?,
        Experiment::ContinuityStudy => continuity_run(m, &dir)?,
        Experiment::VerifyOps => verify_ops(m.grid.ntheta, m.kernel.as_ref())?,
    };
    let summary = Summary {
        experiment: m.experiment,
        manifest_hash: m.hash(),
        seed: m.seed,
        pass: outcome.checks.iter().all(|c| c.pass),
        checks: outcome.checks,
        values: outcome.values,
    };
    let mut line = serde_json::to_string(&summary).expect("summary serializes");
    line.push('\n');
    let path = dir.join("summary.jsonl");
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(summary)
}

fn snapshot_buffers(m: &RunManifest, horizon: f64) -> usize {
    if m.outputs.dump_fields {
        let steps = (horizon / m.grid.dt).ceil() as usize;
        steps / m.outputs.cadence + 2
    } else {
        0
    }
}

fn linear_run(m: &RunManifest, dir: &Path) -> Result<Outcome, CliError> {
    let horizon = m.horizon()?;
    m.check_memory(m.grid.len(), 12 + snapshot_buffers(m, horizon))?;
    let u0 = m.initial()?.build(&m.grid).map_err(schema)?;
    let (drift, bound) = match m.force.as_ref().expect("validated") {
        ForceSpec::Constant { value } => (DriftField::constant(m.grid, *value), ForceBound::constant(*value)),
        ForceSpec::FrozenKernel => {
            let spec = m.kernel()?;
            let force = match spec {
                KernelSpec::SeparableRadial(_) => kernels::f0_field(&u0, spec).map_err(schema)?,
                _ => kernels::f1_field(&u0, &spec.local_table(m.grid.ntheta).map_err(schema)?).map_err(schema)?,
            };
            (DriftField::from_force(&force), ForceBound::measure(&force))
        }
    };
    let opts = LinearOptions {
        report_every: m.outputs.cadence,
        snapshot_every: m.outputs.dump_fields.then_some(m.outputs.cadence),
        ..m.solver
    };
    let run = linear::solve_linear(&u0, &DriftSchedule::Frozen(drift), bound, &m.params, horizon, &opts)
        .map_err(numerical)?;
    write_reports(dir, &run.reports)?;
    if m.outputs.dump_fields {
        dump_fields(dir, &run.snapshots)?;
    }
    let mut o = Outcome::default();
    let drift = relative_mass_drift(&run.reports);
    o.checks.push(Check::at_most("relative mass drift", drift, 1e-10));
    o.checks.push(Check::at_least("min u / ||u0||_inf", run.min_value() / u0.max_abs().max(f64::MIN_POSITIVE), -1e-12));
    o.checks.push(Check::at_most("L-inf envelope ratio", run.envelope_ratio(), 1.05));
    o.checks.push(Check::at_most("L2 envelope ratio", run.l2_envelope_ratio(), 1.05));
    o.checks.push(Check::at_most("dissipation / bound", run.dissipation_ratio(), 1.10));
    o.value("mass_drift", drift);
    o.value("growth_rate", run.growth_rate);
    o.value("dt", run.dt);
    o.value("steps", run.steps);
    Ok(o)
}

fn nonlinear_config(m: &RunManifest, model: ModelKind) -> Result<NonlinearRunConfig, CliError> {
    let mut cfg = NonlinearRunConfig::new(model, m.kernel()?.clone(), m.params);
    let s = m.nonlinear.clone().unwrap_or_default();
    cfg.mode = s.mode;
    cfg.window_ratio = s.window_ratio;
    cfg.picard_tol = s.picard_tol;
    cfg.picard_max_iter = s.picard_max_iter;
    cfg.linear = m.solver;
    cfg.linear.report_every = m.outputs.cadence;
    cfg.validate().map_err(schema)?;
    Ok(cfg)
}

fn nonlinear_run(m: &RunManifest, dir: &Path, model: ModelKind) -> Result<Outcome, CliError> {
    let horizon = m.horizon()?;
    m.check_memory(m.grid.len(), 24 + snapshot_buffers(m, horizon))?;
    let mut cfg = nonlinear_config(m, model)?;
    let u0 = m.initial()?.build(&m.grid).map_err(schema)?;
    if cfg.mode == NonlinearMode::Picard {
        // each window keeps two trajectories of its step nodes
        let kb = cfg.bounds().map_err(schema)?;
        let w = kernels::picard_window(&kb, u0.max_abs(), cfg.window_ratio, model.index()).map_err(schema)?;
        let nodes = (w.min(horizon) / m.grid.dt).ceil() as usize + 1;
        m.check_memory(m.grid.len(), 24 + 2 * nodes + snapshot_buffers(m, horizon))?;
    }
    cfg.linear.snapshot_every = m.outputs.dump_fields.then_some(m.outputs.cadence);
    let run = nonlinear::solve_nonlinear(&u0, &cfg, horizon).map_err(numerical)?;
    write_reports(dir, &run.reports)?;
    if m.outputs.dump_fields {
        dump_fields(dir, &run.snapshots)?;
    }
    let mut o = Outcome::default();
    let drift = relative_mass_drift(&run.reports);
    o.checks.push(Check::at_most("relative mass drift", drift, 1e-10));
    if model == ModelKind::Nonlocal {
        o.checks.push(Check::at_most("global envelope ratio", run.envelope_ratio(), 1.05));
    }
    let limit = 1.05 * cfg.window_ratio;
    if !run.windows.is_empty() {
        let worst = run.windows.iter().map(|w| w.closure_ratio).fold(0.0, f64::max);
        o.checks.push(Check::at_most("Picard iterate growth / R", worst / cfg.window_ratio, 1.05));
        o.value("windows", run.windows.len());
        o.value(
            "max_iterations",
            run.windows.iter().map(|w| w.iterations).max().unwrap_or(0),
        );
        o.value("closure_limit", limit);
    }
    o.value("completed", run.completed);
    o.value("horizon_reached", run.horizon);
    o.value("envelope_rate", run.envelope_rate);
    o.value("mass_drift", drift);
    o.value("force_ratio", run.force_ratio);
    o.value("steps", run.steps);
    Ok(o)
}

fn particle_run(m: &RunManifest, dir: &Path) -> Result<Outcome, CliError> {
    let horizon = m.horizon()?;
    let p = m.particles.as_ref().expect("validated");
    // positions, angles, weights and the next state, plus deposition grids
    m.check_memory(p.n, 8)?;
    m.check_memory(m.grid.len(), 2 + snapshot_buffers(m, horizon))?;
    let u0 = m.initial()?.build(&m.grid).map_err(schema)?;
    let ens = particles::sample_from_field(&u0, p.n, m.seed).map_err(schema)?;
    let interaction = match p.interaction {
        InteractionKind::Neighbors => Interaction::Neighbors {
            radius: p.radius.expect("validated"),
            alpha: p.alpha,
            include_self: p.include_self,
        },
        InteractionKind::Kernel => Interaction::Kernel(*m.kernel()?.spatial().map_err(schema)?),
    };
    let steps = ((horizon / m.grid.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let grid = m.outputs.dump_fields.then_some(&m.grid);
    let run = particles::simulate(&ens, &interaction, &m.params, dt, steps, m.outputs.cadence, grid, p.integrator)
        .map_err(|e| match e {
            particles::ParticleError::Radius { .. } | particles::ParticleError::InvalidParameter(_) => schema(e),
            other => numerical(other),
        })?;
    let mut w = create(&dir.join("polarization.dat"))?;
    writeln!(w, "# t polarization_x polarization_y")?;
    for (t, pol) in run.times.iter().zip(&run.polarization) {
        writeln!(w, "{t:.9e} {:.12e} {:.12e}", pol[0], pol[1])?;
    }
    w.flush()?;
    let mut w = create(&dir.join("particles_final.dat"))?;
    run.final_ensemble.write_text(&mut w)?;
    w.flush()?;
    if m.outputs.dump_fields {
        let snaps: Vec<(f64, Field)> = run.times.iter().cloned().zip(run.densities.iter().cloned()).collect();
        dump_fields(dir, &snaps)?;
    }
    let dens = particles::empirical_density(&run.final_ensemble, &m.grid).map_err(schema)?;
    let mass = run.final_ensemble.mass();
    let dep = (dens.mass().map_err(numerical)? - mass).abs() / mass;
    let mut o = Outcome::default();
    o.checks.push(Check::at_most("deposition mass error", dep, 1e-12));
    let last = run.polarization.last().copied().unwrap_or([0.0, 0.0]);
    o.value("final_polarization", last[0].hypot(last[1]));
    o.value("dt", dt);
    o.value("steps", steps);
    o.value("particles", p.n);
    Ok(o)
}

fn scaling_run(m: &RunManifest, dir: &Path) -> Result<Outcome, CliError> {
    let s = m.scaling.as_ref().expect("validated");
    let kernel: SpatialKernel = *m.kernel()?.spatial().map_err(schema)?;
    let eps_min = s.eps_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let nx = (m.grid.length / (eps_min * s.base_dx)).round() as usize;
    let cells = nx * nx * m.grid.ntheta;
    m.check_memory(cells, 24 + s.outputs + 1)?;
    let study = OrderStudy {
        length: m.grid.length,
        base_dx: s.base_dx,
        ntheta: m.grid.ntheta,
        base_dt: s.base_dt,
        eps_list: s.eps_list.clone(),
        horizon: m.horizon()?,
        outputs: s.outputs,
        c: m.params.c,
        sigma0: m.params.sigma,
        nu0: m.params.nu,
        kernel,
        linear: m.solver,
        max_cells: cells,
    };
    let phis = s.test_functions.clone().unwrap_or_else(|| TestFunction::defaults(m.grid.length));
    let report = scaling::order_study(m.initial()?, &study, &phis).map_err(|e| match e {
        scaling::ScalingError::Nonlinear(_) => numerical(e),
        scaling::ScalingError::Resolution(_) => CliError::Guardrail(e.to_string()),
        other => schema(other),
    })?;
    let mut w = create(&dir.join("scaling.dat"))?;
    report.write_table(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("scaling_fit.dat"))?;
    writeln!(w, "# phi_id slope ci_low ci_high")?;
    let mut o = Outcome::default();
    o.checks.push(Check::at_most("dual formulation gap", report.dual_gap, 1e-6));
    for (id, fit) in report.fits.iter().enumerate() {
        if let Some(f) = fit {
            let (lo, hi) = f.interval.unwrap_or((f64::NAN, f64::NAN));
            writeln!(w, "{id} {:.6} {:.6} {:.6}", f.slope, lo, hi)?;
            o.checks.push(Check::at_least(&format!("slope phi{id}"), f.slope, 0.8));
            let series = report.series(id);
            let drops = series.windows(2).filter(|p| p[1].1 >= p[0].1).count();
            o.checks.push(Check::at_most(&format!("non-decreasing steps phi{id}"), drops as f64, 0.0));
            o.value(&format!("slope_phi{id}"), f.slope);
            o.value(&format!("slope_ci_phi{id}"), [lo, hi]);
        } else {
            writeln!(w, "{id} nan nan nan")?;
        }
    }
    w.flush()?;
    o.value("degenerate", report.degenerate);
    Ok(o)
}

fn continuity_run(m: &RunManifest, dir: &Path) -> Result<Outcome, CliError> {
    let c = m.continuity.as_ref().expect("validated");
    let horizon = m.horizon()?;
    m.check_memory(m.grid.len(), 48)?;
    let mut cfg = nonlinear_config(m, c.model)?;
    cfg.mode = NonlinearMode::SemiImplicit;
    if let Some(s) = &m.nonlinear {
        cfg.mode = s.mode;
    }
    let u01 = m.initial()?.build(&m.grid).map_err(schema)?;
    let l = m.grid.length;
    let shape = Field::from_fn(m.grid, |x, y, t| {
        (2.0 * PI * x / l).cos() * (2.0 * PI * y / l).sin() * (1.0 + t.sin())
    });
    let mut reports = Vec::new();
    for &delta in &c.perturbations {
        let mut u02 = u01.clone();
        for (v, s) in u02.values_mut().iter_mut().zip(shape.values()) {
            *v *= 1.0 + delta * s;
        }
        reports.push(nonlinear::continuity_study(&u01, &u02, &cfg, c.p, horizon).map_err(numerical)?);
    }
    let mut w = create(&dir.join("continuity.dat"))?;
    let header: Vec<String> = c.perturbations.iter().map(|d| format!("ratio_{d:e}")).collect();
    writeln!(w, "# t {}", header.join(" "))?;
    for (k, t) in reports[0].times.iter().enumerate() {
        let row: Vec<String> = reports.iter().map(|r| format!("{:.12e}", r.ratio[k])).collect();
        writeln!(w, "{t:.9e} {}", row.join(" "))?;
    }
    w.flush()?;
    let rates: Vec<f64> = reports.iter().map(|r| r.fitted_rate).collect();
    let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = hi.abs().max(lo.abs());
    let spread = if scale == 0.0 { 0.0 } else { (hi - lo) / scale };
    let mut o = Outcome::default();
    o.checks.push(Check::at_most("fitted rate spread", spread, 0.2));
    let excess = reports
        .iter()
        .flat_map(|r| r.times.iter().zip(&r.ratio).map(move |(t, q)| q / (r.fitted_rate * t).exp()))
        .fold(0.0, f64::max);
    o.checks.push(Check::at_most("ratio / e^(Ct)", excess, 1.0 + 1e-12));
    o.value("fitted_rates", rates);
    o.value(
        "fitted_rates_linf_data",
        reports.iter().map(|r| r.fitted_rate_linf_data).collect::<Vec<_>>(),
    );
    o.value("reference_rate", reports.iter().map(|r| r.reference_rate).fold(0.0, f64::max));
    Ok(o)
}

/// Identity residuals in spectral mode and finite-difference decay rates,
/// plus FFT against direct convolution when a spatial kernel is given.
fn verify_ops(ntheta: usize, kernel: Option<&KernelSpec>) -> Result<Outcome, CliError> {
    if ntheta < 8 {
        return Err(schema("verify-ops needs ntheta >= 8"));
    }
    let f = |t: f64| (t.cos() + 0.3 * (2.0 * t).sin()).exp();
    let g = |t: f64| 1.0 / (1.5 + (t - 0.4).cos());
    let residual = |n: usize, d: Differencing| {
        let h = 2.0 * PI / n as f64;
        let fv: Vec<f64> = (0..n).map(|k| f(k as f64 * h)).collect();
        let gv: Vec<f64> = (0..n).map(|k| g(k as f64 * h)).collect();
        let ibp = sphere::check_ibp(&fv, &gv, d);
        let (grad, div) = sphere::projection_identity_residuals(n, [0.7, -1.3], d);
        ibp.max(grad).max(div)
    };
    let mut o = Outcome::default();
    let spectral = residual(ntheta, Differencing::Spectral);
    o.checks.push(Check::at_most("spectral identity residual", spectral, 1e-10));
    let fd: Vec<f64> = [ntheta / 2, ntheta, 2 * ntheta]
        .iter()
        .map(|&n| residual(n, Differencing::FiniteDifference))
        .collect();
    let orders = [(fd[0] / fd[1]).log2(), (fd[1] / fd[2]).log2()];
    o.checks.push(Check::at_least("FD order (coarse)", orders[0], 1.8));
    o.checks.push(Check::at_least("FD order (fine)", orders[1], 1.8));
    o.value("fd_residuals", fd);
    if let Some(KernelSpec::SeparableRadial(k)) = kernel {
        let grid = GridSpec::new(12, (4.0 * k.cutoff).max(1.0), 8, 0.1).map_err(schema)?;
        let u = vicsek_kinetic::initial::InitialDatum::RandomSeeded {
            mass: 1.0,
            seed: 1,
            amplitude: 0.5,
        }
        .build(&grid)
        .map_err(schema)?;
        let fast = F0Operator::new(k, &grid).map_err(schema)?.apply(&u);
        let direct = kernels::f0_field_direct(&u, k).map_err(schema)?;
        o.checks.push(Check::at_most("FFT vs direct convolution", fast.max_abs_diff(&direct), 1e-8));
    }
    Ok(o)
}

fn field_dumps(dir: &Path) -> Result<Vec<(f64, Field)>, CliError> {
    let fields = dir.join("fields");
    let mut paths: Vec<PathBuf> = fs::read_dir(&fields)
        .map_err(|e| CliError::Io(format!("{}: {e}", fields.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let (field, t) = Field::read_binary(BufReader::new(f)).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            Ok((t, field))
        })
        .collect()
}

/// Discrepancy series between kinetic and particle field dumps.
pub fn compare(kinetic: &Path, particle: &Path, out: &Path) -> Result<Vec<(f64, f64, f64)>, CliError> {
    let k = field_dumps(kinetic)?;
    let p = field_dumps(particle)?;
    let gap = particles::meanfield_compare(&p, &k, Discrepancy::PolarizationGap).map_err(schema)?;
    let l1 = particles::meanfield_compare(&p, &k, Discrepancy::SmoothedL1 { passes: 2 }).map_err(schema)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("compare.dat"))?;
    writeln!(w, "# t polarization_gap smoothed_l1")?;
    let rows: Vec<(f64, f64, f64)> = gap.iter().zip(&l1).map(|(a, b)| (a.0, a.1, b.1)).collect();
    for (t, a, b) in &rows {
        writeln!(w, "{t:.9e} {a:.12e} {b:.12e}")?;
    }
    w.flush()?;
    Ok(rows)
}
