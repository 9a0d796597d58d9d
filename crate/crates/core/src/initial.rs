//! Named generators for nonnegative initial data.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::{Field, GridError, GridSpec, Result};

/// Images summed on each side when periodizing a Gaussian.
const IMAGES: i32 = 4;

/// Spatial Gaussian times a wrapped Gaussian in orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: [f64; 2],
    /// Standard deviation in space.
    pub width: f64,
    pub theta0: f64,
    /// Standard deviation in orientation; `None` means isotropic.
    #[serde(default)]
    pub angular_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialDatum {
    Uniform {
        mass: f64,
    },
    GaussianBump {
        mass: f64,
        center: [f64; 2],
        width: f64,
        theta0: f64,
        #[serde(default)]
        angular_width: Option<f64>,
    },
    TwoBump {
        mass: f64,
        first: Bump,
        second: Bump,
    },
    RandomSeeded {
        mass: f64,
        seed: u64,
        /// Relative standard deviation around the uniform state.
        amplitude: f64,
    },
}

fn periodic_gaussian(d: f64, period: f64, width: f64) -> f64 {
    (-IMAGES..=IMAGES)
        .map(|m| {
            let z = d + m as f64 * period;
            (-0.5 * z * z / (width * width)).exp()
        })
        .sum()
}

impl Bump {
    fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 0.25 * grid.length) {
            return Err(GridError::InvalidParameter(format!(
                "bump width {} must lie in (0, L/4]",
                self.width
            )));
        }
        if let Some(w) = self.angular_width {
            if !(w > 0.0 && w <= PI / 2.0) {
                return Err(GridError::InvalidParameter(format!("angular width {w} must lie in (0, pi/2]")));
            }
        }
        Ok(())
    }

    /// Unit-mass density, normalized analytically.
    fn density(&self, grid: &GridSpec, x: f64, y: f64, theta: f64) -> f64 {
        let l = grid.length;
        let w = self.width;
        let space = periodic_gaussian(x - self.center[0], l, w) * periodic_gaussian(y - self.center[1], l, w)
            / (2.0 * PI * w * w);
        let angle = match self.angular_width {
            Some(s) => periodic_gaussian(theta - self.theta0, 2.0 * PI, s) / ((2.0 * PI).sqrt() * s),
            None => 1.0 / (2.0 * PI),
        };
        space * angle
    }
}

impl InitialDatum {
    pub fn mass(&self) -> f64 {
        match self {
            InitialDatum::Uniform { mass }
            | InitialDatum::GaussianBump { mass, .. }
            | InitialDatum::TwoBump { mass, .. }
            | InitialDatum::RandomSeeded { mass, .. } => *mass,
        }
    }

    pub fn build(&self, grid: &GridSpec) -> Result<Field> {
        grid.validate()?;
        let mass = self.mass();
        if !(mass >= 0.0 && mass.is_finite()) {
            return Err(GridError::InvalidParameter(format!("mass {mass} must be finite and >= 0")));
        }
        match self {
            InitialDatum::Uniform { mass } => {
                Ok(Field::constant(*grid, mass / (grid.length * grid.length * 2.0 * PI)))
            }
            InitialDatum::GaussianBump {
                mass,
                center,
                width,
                theta0,
                angular_width,
            } => {
                let bump = Bump {
                    center: *center,
                    width: *width,
                    theta0: *theta0,
                    angular_width: *angular_width,
                };
                bump.validate(grid)?;
                Ok(Field::from_fn(*grid, |x, y, t| mass * bump.density(grid, x, y, t)))
            }
            InitialDatum::TwoBump { mass, first, second } => {
                first.validate(grid)?;
                second.validate(grid)?;
                Ok(Field::from_fn(*grid, |x, y, t| {
                    0.5 * mass * (first.density(grid, x, y, t) + second.density(grid, x, y, t))
                }))
            }
            InitialDatum::RandomSeeded { mass, seed, amplitude } => {
                if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    return Err(GridError::InvalidParameter(format!("amplitude {amplitude} must be >= 0")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut values = Array3::from_shape_simple_fn(grid.shape(), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (1.0 + amplitude * z).max(0.0)
                });
                let raw = grid.cell_volume() * values.sum();
                if raw == 0.0 {
                    return Err(GridError::ZeroMass);
                }
                values.mapv_inplace(|v| v * mass / raw);
                Field::from_values(*grid, values)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> GridSpec {
        GridSpec::new(32, 2.0, 32, 0.01).unwrap()
    }

    #[test]
    fn uniform_has_the_requested_density() {
        let f = InitialDatum::Uniform { mass: 1.0 }.build(&grid()).unwrap();
        let expect = 1.0 / (4.0 * 2.0 * PI);
        assert!(f.values().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn gaussian_bump_mass_matches_after_periodization() {
        let datum = InitialDatum::GaussianBump {
            mass: 2.5,
            center: [1.9, 0.1],
            width: 0.3,
            theta0: 6.0,
            angular_width: Some(0.6),
        };
        let f = datum.build(&grid()).unwrap();
        assert_abs_diff_eq!(f.mass().unwrap(), 2.5, epsilon = 1e-8);
        assert!(f.is_nonnegative());
    }

    #[test]
    fn two_bump_mass() {
        let b = Bump {
            center: [0.5, 0.5],
            width: 0.2,
            theta0: 0.0,
            angular_width: None,
        };
        let datum = InitialDatum::TwoBump {
            mass: 1.0,
            first: b,
            second: Bump {
                center: [1.5, 1.2],
                theta0: PI,
                angular_width: Some(0.5),
                ..b
            },
        };
        assert_abs_diff_eq!(datum.build(&grid()).unwrap().mass().unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn random_field_is_reproducible_and_normalized() {
        let d = InitialDatum::RandomSeeded {
            mass: 3.0,
            seed: 42,
            amplitude: 2.0,
        };
        let a = d.build(&grid()).unwrap();
        let b = d.build(&grid()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_nonnegative());
        assert_abs_diff_eq!(a.mass().unwrap(), 3.0, epsilon = 1e-12);
        let other = InitialDatum::RandomSeeded {
            mass: 3.0,
            seed: 43,
            amplitude: 2.0,
        };
        assert_ne!(other.build(&grid()).unwrap(), a);
    }

    #[test]
    fn negative_requests_are_rejected() {
        let d = InitialDatum::RandomSeeded {
            mass: 1.0,
            seed: 1,
            amplitude: -0.5,
        };
        assert!(d.build(&grid()).is_err());
        assert!(InitialDatum::Uniform { mass: -1.0 }.build(&grid()).is_err());
    }

    #[test]
    fn manifest_form_round_trips() {
        let text = r#"{"kind":"gaussian-bump","mass":1.0,"center":[0.5,0.5],"width":0.1,"theta0":0.0}"#;
        let d: InitialDatum = serde_json::from_str(text).unwrap();
        assert!(matches!(d, InitialDatum::GaussianBump { angular_width: None, .. }));
        let bad = r#"{"kind":"uniform","mass":1.0,"extra":2}"#;
        assert!(serde_json::from_str::<InitialDatum>(bad).is_err());
    }
}
