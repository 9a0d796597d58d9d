//! Run manifests: typed TOML, validated before anything large is allocated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vicsek_kinetic::grid::{GridSpec, ModelParams};
use vicsek_kinetic::initial::InitialDatum;
use vicsek_kinetic::kernels::KernelSpec;
use vicsek_kinetic::linear::LinearOptions;
use vicsek_kinetic::nonlinear::NonlinearMode;
use vicsek_kinetic::particles::{AlphaRule, Integrator};
use vicsek_kinetic::scaling::TestFunction;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Linear,
    NonlinearNonlocal,
    NonlinearLocal,
    Particles,
    ScalingStudy,
    ContinuityStudy,
    VerifyOps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Steps between diagnostics rows and field dumps.
    #[serde(default = "one")]
    pub cadence: usize,
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub dump_fields: bool,
}

fn one() -> usize {
    1
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            cadence: 1,
            directory: default_directory(),
            dump_fields: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    /// Memory cap for field storage, in MiB.
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
    /// Worker threads; runs are single-threaded.
    #[serde(default = "one")]
    pub threads: usize,
}

fn default_memory() -> u64 {
    4096
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            memory_mb: default_memory(),
            threads: 1,
        }
    }
}

/// Force of a linear run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForceSpec {
    Constant { value: [f64; 2] },
    /// The manifest kernel applied to the initial datum, frozen in time.
    FrozenKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSection {
    #[serde(default)]
    pub mode: NonlinearMode,
    #[serde(default = "default_ratio")]
    pub window_ratio: f64,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iters")]
    pub picard_max_iter: usize,
}

fn default_ratio() -> f64 {
    std::f64::consts::E
}

fn default_tol() -> f64 {
    1e-8
}

fn default_iters() -> usize {
    50
}

impl Default for NonlinearSection {
    fn default() -> Self {
        NonlinearSection {
            mode: NonlinearMode::default(),
            window_ratio: default_ratio(),
            picard_tol: default_tol(),
            picard_max_iter: default_iters(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    #[default]
    Neighbors,
    /// Weighted sum with the manifest's spatial kernel.
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    pub n: usize,
    #[serde(default)]
    pub interaction: InteractionKind,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: AlphaRule,
    #[serde(default = "yes")]
    pub include_self: bool,
    #[serde(default)]
    pub integrator: Integrator,
}

fn default_alpha() -> AlphaRule {
    AlphaRule::Mean
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub base_dx: f64,
    pub base_dt: f64,
    pub eps_list: Vec<f64>,
    /// Output intervals on `[0, T]`.
    #[serde(default = "default_outputs")]
    pub outputs: usize,
    /// Defaults to the built-in library.
    #[serde(default)]
    pub test_functions: Option<Vec<TestFunction>>,
}

fn default_outputs() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuitySection {
    /// Relative perturbation sizes.
    pub perturbations: Vec<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "nonlocal")]
    pub model: vicsek_kinetic::nonlinear::ModelKind,
}

fn default_p() -> f64 {
    2.0
}

fn nonlocal() -> vicsek_kinetic::nonlinear::ModelKind {
    vicsek_kinetic::nonlinear::ModelKind::Nonlocal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    /// Final time `T`.
    #[serde(default)]
    pub horizon: Option<f64>,
    pub grid: GridSpec,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    pub params: ModelParams,
    #[serde(default)]
    pub initial_datum: Option<InitialDatum>,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub solver: LinearOptions,
    #[serde(default)]
    pub force: Option<ForceSpec>,
    #[serde(default)]
    pub nonlinear: Option<NonlinearSection>,
    #[serde(default)]
    pub particles: Option<ParticleSection>,
    #[serde(default)]
    pub scaling: Option<ScalingSection>,
    #[serde(default)]
    pub continuity: Option<ContinuitySection>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub out: Option<PathBuf>,
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| schema(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dt) = o.dt {
            self.grid.dt = dt;
        }
        if let Some(t) = o.horizon {
            self.horizon = Some(t);
        }
        if let Some(out) = &o.out {
            self.outputs.directory = out.clone();
        }
    }

    /// SHA-256 of the canonical JSON form, overrides included.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn horizon(&self) -> Result<f64, CliError> {
        match self.horizon {
            Some(t) if t > 0.0 && t.is_finite() => Ok(t),
            Some(t) => Err(schema(format!("horizon {t} must be finite and > 0"))),
            None => Err(schema("missing key `horizon`")),
        }
    }

    pub fn kernel(&self) -> Result<&KernelSpec, CliError> {
        self.kernel.as_ref().ok_or_else(|| schema("missing section `kernel`"))
    }

    pub fn initial(&self) -> Result<&InitialDatum, CliError> {
        self.initial_datum.as_ref().ok_or_else(|| schema("missing section `initial_datum`"))
    }

    /// Checks everything that can be checked without building fields.
    pub fn validate(&self) -> Result<(), CliError> {
        self.grid.validate().map_err(|e| schema(e.to_string()))?;
        self.params.validate().map_err(|e| schema(e.to_string()))?;
        if let Some(k) = &self.kernel {
            k.validate().map_err(|e| schema(e.to_string()))?;
        }
        if self.outputs.cadence == 0 {
            return Err(schema("outputs.cadence must be >= 1"));
        }
        if self.limits.threads != 1 {
            return Err(schema("limits.threads: only single-threaded runs are supported"));
        }
        if self.limits.memory_mb == 0 {
            return Err(schema("limits.memory_mb must be >= 1"));
        }
        let needs = |present: bool, what: &str| if present { Ok(()) } else { Err(schema(format!("missing section `{what}`"))) };
        match self.experiment {
            Experiment::Linear => {
                self.horizon()?;
                self.initial()?;
                needs(self.force.is_some(), "force")?;
                if self.force == Some(ForceSpec::FrozenKernel) {
                    self.kernel()?;
                }
            }
            Experiment::NonlinearNonlocal | Experiment::NonlinearLocal => {
                self.horizon()?;
                self.initial()?;
                let k = self.kernel()?;
                if self.experiment == Experiment::NonlinearNonlocal && k.spatial().is_err() {
                    return Err(schema("the nonlocal model needs a separable-radial kernel"));
                }
            }
            Experiment::Particles => {
                self.horizon()?;
                self.initial()?;
                let p = self.particles.as_ref().ok_or_else(|| schema("missing section `particles`"))?;
                if p.n == 0 {
                    return Err(schema("particles.n must be >= 1"));
                }
                match p.interaction {
                    InteractionKind::Neighbors => {
                        if p.radius.is_none() {
                            return Err(schema("particles.radius is required for neighbour interaction"));
                        }
                    }
                    InteractionKind::Kernel => {
                        if self.kernel()?.spatial().is_err() {
                            return Err(schema("kernel interaction needs a separable-radial kernel"));
                        }
                    }
                }
            }
            Experiment::ScalingStudy => {
                self.horizon()?;
                self.initial()?;
                if self.kernel()?.spatial().is_err() {
                    return Err(schema("the scaling study needs a separable-radial kernel"));
                }
                needs(self.scaling.is_some(), "scaling")?;
            }
            Experiment::ContinuityStudy => {
                self.horizon()?;
                self.initial()?;
                self.kernel()?;
                let c = self.continuity.as_ref().ok_or_else(|| schema("missing section `continuity`"))?;
                if c.perturbations.is_empty() || c.perturbations.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
                    return Err(schema("continuity.perturbations must lie in (0, 1)"));
                }
            }
            Experiment::VerifyOps => {}
        }
        Ok(())
    }

    /// Bytes of field storage: `nx^2 ntheta 8 buffers`.
    pub fn check_memory(&self, cells: usize, buffers: usize) -> Result<(), CliError> {
        let bytes = cells as u128 * 8 * buffers as u128;
        let cap = self.limits.memory_mb as u128 * 1024 * 1024;
        if bytes > cap {
            return Err(CliError::Guardrail(format!(
                "{cells} cells x {buffers} buffers need {} MiB, above the cap of {} MiB",
                bytes / (1024 * 1024),
                self.limits.memory_mb
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"
experiment = "linear"
horizon = 0.5

[grid]
nx = 8
length = 1.0
ntheta = 8
dt = 0.05

[params]
c = 1.0
sigma = 0.5
nu = 1.0

[initial_datum]
kind = "uniform"
mass = 1.0

[force]
kind = "constant"
value = [0.0, 0.0]
"#;

    #[test]
    fn parses_and_validates() {
        let m = RunManifest::parse(LINEAR).unwrap();
        m.validate().unwrap();
        assert_eq!(m.outputs.cadence, 1);
        assert_eq!(m.limits.threads, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = LINEAR.replace("horizon = 0.5", "horizon = 0.5\nturbo = true");
        assert!(matches!(RunManifest::parse(&text), Err(CliError::Schema(_))));
        let text = LINEAR.replace("mass = 1.0", "mass = 1.0\nspread = 2");
        assert!(matches!(RunManifest::parse(&text), Err(CliError::Schema(_))));
    }

    #[test]
    fn missing_sections_are_schema_errors() {
        let text = LINEAR.replace("[force]\nkind = \"constant\"\nvalue = [0.0, 0.0]\n", "");
        let m = RunManifest::parse(&text).unwrap();
        assert!(matches!(m.validate(), Err(CliError::Schema(_))));
    }

    #[test]
    fn hash_tracks_overrides() {
        let mut m = RunManifest::parse(LINEAR).unwrap();
        let h0 = m.hash();
        assert_eq!(h0, RunManifest::parse(LINEAR).unwrap().hash());
        m.apply(&Overrides {
            dt: Some(0.01),
            ..Overrides::default()
        });
        assert_ne!(m.hash(), h0);
        assert_eq!(h0.len(), 64);
    }

    #[test]
    fn memory_guardrail() {
        let m = RunManifest::parse(LINEAR).unwrap();
        assert!(m.check_memory(512, 10).is_ok());
        assert!(matches!(m.check_memory(1 << 30, 10), Err(CliError::Guardrail(_))));
    }

    #[test]
    fn bundled_manifests_validate() {
        let bundled = [
            include_str!("../../../manifests/linear.toml"),
            include_str!("../../../manifests/nonlocal.toml"),
            include_str!("../../../manifests/local.toml"),
            include_str!("../../../manifests/particles.toml"),
            include_str!("../../../manifests/scaling.toml"),
            include_str!("../../../manifests/continuity.toml"),
        ];
        for text in bundled {
            RunManifest::parse(text).unwrap().validate().unwrap();
        }
    }
}
