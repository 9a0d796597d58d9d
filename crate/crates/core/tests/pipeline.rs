use proptest::prelude::*;

use vicsek_kinetic::grid::{Field, GridSpec, ModelParams};
use vicsek_kinetic::initial::InitialDatum;
use vicsek_kinetic::kernels::{KernelSpec, SpatialKernel};
use vicsek_kinetic::linear::{self, DriftField, DriftSchedule, ForceBound, LinearOptions};
use vicsek_kinetic::nonlinear::{self, ModelKind, NonlinearMode, NonlinearRunConfig};
use vicsek_kinetic::particles;

fn bump(theta0: f64) -> InitialDatum {
    InitialDatum::GaussianBump {
        mass: 1.0,
        center: [0.5, 0.5],
        width: 0.15,
        theta0,
        angular_width: Some(1.0),
    }
}

fn biweight() -> KernelSpec {
    let k: SpatialKernel = serde_json::from_str(
        r#"{"profile": "biweight", "cutoff": 0.2, "mass": 1.0, "angular": {"a": 1.0, "b": 0.0}}"#,
    )
    .unwrap();
    KernelSpec::SeparableRadial(k)
}

#[test]
fn nonlocal_run_then_particles_share_mass_and_grid() {
    let grid = GridSpec::new(16, 1.0, 16, 0.02).unwrap();
    let params = ModelParams::new(1.0, 1.0, 0.5).unwrap();
    let u0 = bump(0.4).build(&grid).unwrap();
    let mut cfg = NonlinearRunConfig::new(ModelKind::Nonlocal, biweight(), params);
    cfg.mode = NonlinearMode::SemiImplicit;
    let run = nonlinear::solve_nonlinear(&u0, &cfg, 0.2).unwrap();
    let m0 = u0.mass().unwrap();
    assert!((run.final_field.mass().unwrap() - m0).abs() <= 1e-12 * m0);
    assert!(run.min_value() >= -1e-12 * u0.max_abs());

    let ens = particles::sample_from_field(&run.final_field, 5000, 9).unwrap();
    let dens = particles::empirical_density(&ens, &grid).unwrap();
    assert!((dens.mass().unwrap() - ens.mass()).abs() <= 1e-12 * ens.mass());
}

#[test]
fn binary_dump_round_trips_a_solver_output() {
    let grid = GridSpec::new(8, 2.0, 8, 0.05).unwrap();
    let params = ModelParams::new(1.0, 0.5, 1.0).unwrap();
    let u0 = bump(1.0).build(&grid).unwrap();
    let run = linear::solve_linear(
        &u0,
        &DriftSchedule::Frozen(DriftField::constant(grid, [0.3, 0.1])),
        ForceBound::constant([0.3, 0.1]),
        &params,
        0.25,
        &LinearOptions::default(),
    )
    .unwrap();
    let mut buf = Vec::new();
    run.final_field.write_binary(0.25, &mut buf).unwrap();
    let (back, t): (Field, f64) = Field::read_binary(buf.as_slice()).unwrap();
    assert_eq!(t, 0.25);
    assert_eq!(back.max_abs_diff(&run.final_field), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constant_force_runs_keep_mass_and_sign(
        fx in -1.0f64..1.0,
        fy in -1.0f64..1.0,
        theta0 in 0.0f64..6.28,
        seed in 0u64..1000,
    ) {
        let grid = GridSpec::new(8, 1.0, 8, 0.05).unwrap();
        let params = ModelParams::new(1.0, 0.5, 1.0).unwrap();
        let data = [
            bump(theta0),
            InitialDatum::RandomSeeded { mass: 1.0, seed, amplitude: 0.5 },
        ];
        for datum in data {
            let u0 = datum.build(&grid).unwrap();
            let run = linear::solve_linear(
                &u0,
                &DriftSchedule::Frozen(DriftField::constant(grid, [fx, fy])),
                ForceBound::constant([fx, fy]),
                &params,
                0.3,
                &LinearOptions::default(),
            )
            .unwrap();
            let m0 = u0.mass().unwrap();
            prop_assert!((run.final_field.mass().unwrap() - m0).abs() <= 1e-10 * m0);
            prop_assert!(run.min_value() >= -1e-12 * u0.max_abs());
            prop_assert!(run.envelope_ratio() <= 1.05);
        }
    }
}
