//! TOML run configuration.
//!
//! Every table rejects unknown keys. Command blocks are optional at parse
//! time; a command that needs a missing block fails with a usage error.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use visco_core::analysis::DistanceMode;
use visco_core::flow::FlowConfig;
use visco_core::io::{density_from_bytes, density_from_csv};
use visco_core::material::{catalog_by_id, custom_piecewise, Loading, MaterialLaw, PiecewisePower};
use visco_core::metric::GeodesicOptions;
use visco_core::sampling::{random_density, rng_from_seed};
use visco_core::state::StepDensity;
use visco_core::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub law: LawSpec,
    #[serde(default)]
    pub loading: LoadingSpec,
    /// Number of cells for profile and random densities.
    pub n: Option<usize>,
    pub initial: Option<DensitySpec>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub geodesic: GeodesicOptions,
    pub distance: Option<DistanceBlock>,
    pub contraction: Option<ContractionBlock>,
    pub evi: Option<EviBlock>,
    pub counterexample: Option<CounterexampleBlock>,
    pub refine: Option<RefineBlock>,
    pub envelope: Option<EnvelopeBlock>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    /// Catalog id (`default`, `double_well`, `appendix`) or `piecewise`.
    pub id: String,
    /// Parameter of the `appendix` law.
    pub epsilon: Option<f64>,
    /// Name reported for a piecewise law.
    pub name: Option<String>,
    pub w: Option<PiecewisePower>,
    pub k: Option<PiecewisePower>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoadingSpec {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Uniform,
    /// `1 + amplitude·sin(2π frequency x)`.
    Sine,
    /// `2` on `[0, 1/2)`, `0` on `[1/2, 1)`.
    LeftBlock,
    /// `0` on `[0, 1/2)`, `2` on `[1/2, 1)`.
    RightBlock,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Cells {
        cells: Vec<f64>,
        /// Accept zero cells (distances only; flows need positive cells).
        #[serde(default)]
        allow_boundary: bool,
    },
    Profile {
        profile: Profile,
        #[serde(default = "half")]
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// Density CSV (`cell_index,value`) or binary dump (`.bin`), relative
    /// paths resolve against the config file's directory.
    File {
        path: PathBuf,
    },
    /// Seeded `exp(spread·U[-1,1])` cells normalized to unit mass.
    Random {
        spread: f64,
        /// Offset added to the run seed so several random densities differ.
        #[serde(default)]
        stream: u64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceBlock {
    pub target: DensitySpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionBlock {
    pub target: DensitySpec,
    #[serde(default = "bhattacharya")]
    pub mode: DistanceMode,
    /// Energy level; defaults to the larger initial energy.
    pub level: Option<f64>,
    pub t_grid: Vec<f64>,
    #[serde(default = "ratio_tolerance")]
    pub tolerance: f64,
}

fn bhattacharya() -> DistanceMode {
    DistanceMode::Bhattacharya
}

fn ratio_tolerance() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EviBlock {
    pub reference: DensitySpec,
    #[serde(default = "bhattacharya")]
    pub mode: DistanceMode,
    /// Rate in the inequality; defaults to the global rate at `level`
    /// (required in the intrinsic mode).
    pub lambda: Option<f64>,
    pub level: Option<f64>,
    /// `[s, t]` pairs with `0 <= s < t <= flow.t_end`.
    pub pairs: Vec<[f64; 2]>,
    #[serde(default = "evi_tolerance")]
    pub tolerance: f64,
}

fn evi_tolerance() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleBlock {
    #[serde(default = "default_ms")]
    pub m: Vec<usize>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// A run passes when some `M` has margin above this value.
    #[serde(default)]
    pub threshold: f64,
}

impl Default for CounterexampleBlock {
    fn default() -> Self {
        CounterexampleBlock { m: default_ms(), grid_points: default_grid_points(), threshold: 0.0 }
    }
}

fn default_ms() -> Vec<usize> {
    vec![16, 64, 256, 1024]
}

fn default_grid_points() -> usize {
    2048
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineBlock {
    /// Resolutions to compare; each divides the next and the initial density's cell count.
    pub ladder: Vec<usize>,
    pub t_grid: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeBlock {
    pub level: f64,
    #[serde(default = "one")]
    pub zeta_scale: f64,
    pub t_grid: Vec<f64>,
    pub n: usize,
    pub cases: usize,
    #[serde(default = "ratio_tolerance")]
    pub tolerance: f64,
}

/// Parses the config text; the error message carries the TOML line and column.
pub fn parse(text: &str) -> std::result::Result<RunConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn build_law(&self) -> Result<MaterialLaw> {
        let loading = self.loading.build();
        let spec = &self.law;
        if spec.id == "piecewise" {
            let (Some(w), Some(k)) = (&spec.w, &spec.k) else {
                return Err(Error::InvalidParameter("law 'piecewise' needs both [law.w] and [law.k]".into()));
            };
            let name = spec.name.as_deref().unwrap_or("piecewise");
            return custom_piecewise(name, w, k, loading);
        }
        if spec.w.is_some() || spec.k.is_some() {
            return Err(Error::InvalidParameter(format!("law '{}' is a catalog law and takes no w/k tables", spec.id)));
        }
        let law = catalog_by_id(&spec.id, spec.epsilon)?;
        Ok(match self.loading {
            LoadingSpec::Zero => law,
            _ => law.with_loading(loading),
        })
    }

    /// Materializes a density spec; `base_dir` resolves relative file paths.
    pub fn density(&self, spec: &DensitySpec, base_dir: &Path) -> Result<StepDensity> {
        let need_n = || {
            self.n
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::InvalidParameter("profile and random densities need a positive top-level `n`".into()))
        };
        match spec {
            DensitySpec::Cells { cells, allow_boundary } => {
                if *allow_boundary {
                    StepDensity::boundary(cells.clone())
                } else {
                    StepDensity::new(cells.clone())
                }
            }
            DensitySpec::Profile { profile, amplitude, frequency } => profile_density(*profile, need_n()?, *amplitude, *frequency),
            DensitySpec::File { path } => {
                let path = base_dir.join(path);
                if path.extension().is_some_and(|e| e == "bin") {
                    density_from_bytes(&std::fs::read(&path)?)
                } else {
                    density_from_csv(&std::fs::read_to_string(&path)?)
                }
            }
            DensitySpec::Random { spread, stream } => {
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::InvalidParameter(format!("random spread must be finite and nonnegative, got {spread}")));
                }
                let mut rng = rng_from_seed(self.seed.wrapping_add(*stream));
                Ok(random_density(&mut rng, need_n()?, *spread))
            }
        }
    }

    pub fn initial(&self, base_dir: &Path) -> Result<StepDensity> {
        let spec = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("this command needs an [initial] density".into()))?;
        self.density(spec, base_dir)
    }
}

impl LoadingSpec {
    pub fn build(&self) -> Loading {
        match *self {
            LoadingSpec::Zero => Loading::zero(),
            LoadingSpec::Constant { value } => Loading::constant(value),
            LoadingSpec::Sine { amplitude, frequency } => Loading::sine(amplitude, frequency),
        }
    }
}

fn profile_density(profile: Profile, n: usize, amplitude: f64, frequency: f64) -> Result<StepDensity> {
    let half_cells = |left: bool| -> Result<StepDensity> {
        if !n.is_multiple_of(2) {
            return Err(Error::InvalidResolution(format!("block profiles need an even cell count, got {n}")));
        }
        let cells = (0..n).map(|i| if (i < n / 2) == left { 2.0 } else { 0.0 }).collect();
        StepDensity::boundary(cells)
    };
    match profile {
        Profile::Uniform => Ok(StepDensity::uniform(n)),
        Profile::Sine => {
            let cells = (0..n)
                .map(|i| {
                    let (a, b) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
                    let w = 2.0 * std::f64::consts::PI * frequency;
                    // exact cell average of 1 + amplitude·sin(w x)
                    1.0 + amplitude * ((w * a).cos() - (w * b).cos()) / (w * (b - a))
                })
                .collect();
            StepDensity::new(cells)
        }
        Profile::LeftBlock => half_cells(true),
        Profile::RightBlock => half_cells(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[law]\nid = \"default\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.flow, FlowConfig::default());
        assert!(matches!(cfg.loading, LoadingSpec::Zero));
        assert_eq!(cfg.build_law().unwrap().id(), "default");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = parse("[law]\nid = \"default\"\n\n[flow]\nrtoll = 1e-6\n").unwrap_err();
        assert!(err.contains("line 5"), "{err}");
        assert!(err.contains("rtoll"), "{err}");
        assert!(parse("[law]\nid = \"default\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn densities_materialize() {
        let cfg = parse(&format!("n = 8\nseed = 4\n{MINIMAL}")).unwrap();
        let dir = Path::new(".");
        let sine = cfg
            .density(&DensitySpec::Profile { profile: Profile::Sine, amplitude: 0.5, frequency: 1.0 }, dir)
            .unwrap();
        assert!((sine.cells().iter().sum::<f64>() / 8.0 - 1.0).abs() < 1e-12);
        let block = cfg
            .density(&DensitySpec::Profile { profile: Profile::RightBlock, amplitude: 0.0, frequency: 1.0 }, dir)
            .unwrap();
        assert_eq!(block.cells(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0]);
        let r1 = cfg.density(&DensitySpec::Random { spread: 1.0, stream: 0 }, dir).unwrap();
        let r2 = cfg.density(&DensitySpec::Random { spread: 1.0, stream: 1 }, dir).unwrap();
        assert_ne!(r1, r2);
        let neg = cfg.density(&DensitySpec::Cells { cells: vec![-0.5, 2.5], allow_boundary: false }, dir);
        assert!(neg.unwrap_err().to_string().starts_with("invariant: positivity"));
    }

    #[test]
    fn piecewise_law_needs_both_tables() {
        let text = "[law]\nid = \"piecewise\"\n[law.w]\npieces = [[{ coef = 0.5, exp = 2.0 }]]\n";
        assert!(parse(text).unwrap().build_law().is_err());
    }
}
