//! JSON run configuration. Every physical quantity is in SI units; fields
//! that are not self-evident carry the unit in their name.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use restshape::dynamics::DynamicsConfig;
use restshape::equilibrium::STANDARD_GRAVITY;
use restshape::metrics::MetricsConfig;
use restshape::optimizer::OptimizeConfig;
use restshape::{Attachment, ExternalLoad, MaterialParams, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    Tet,
    Mesh,
}

/// Which vertices are held fixed.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FixedSelector {
    #[default]
    None,
    Indices(Vec<usize>),
    /// Vertices within this distance (m) of the lowest z.
    Bottom(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectorRepr {
    Indices(Vec<usize>),
    Rule(String),
}

impl TryFrom<SelectorRepr> for FixedSelector {
    type Error = String;

    fn try_from(r: SelectorRepr) -> Result<Self, String> {
        match r {
            SelectorRepr::Indices(v) => Ok(Self::Indices(v)),
            SelectorRepr::Rule(s) if s == "none" => Ok(Self::None),
            SelectorRepr::Rule(s) => {
                let tol = s
                    .strip_prefix("bottom:")
                    .ok_or_else(|| format!("fixed_selector must be an index list, `bottom:<tol>` or `none`, got `{s}`"))?;
                let tol: f64 = tol.parse().map_err(|_| format!("invalid bottom tolerance `{tol}`"))?;
                if !(tol >= 0.0) {
                    return Err(format!("bottom tolerance must be >= 0, got {tol}"));
                }
                Ok(Self::Bottom(tol))
            }
        }
    }
}

impl From<FixedSelector> for SelectorRepr {
    fn from(s: FixedSelector) -> Self {
        match s {
            FixedSelector::None => Self::Rule("none".into()),
            FixedSelector::Indices(v) => Self::Indices(v),
            FixedSelector::Bottom(t) => Self::Rule(format!("bottom:{t}")),
        }
    }
}

impl Serialize for FixedSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SelectorRepr::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FixedSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        SelectorRepr::deserialize(d)?.try_into().map_err(serde::de::Error::custom)
    }
}

impl FixedSelector {
    /// Selected vertex indices, sorted.
    pub fn select(&self, x: &DVector<f64>) -> Result<Vec<usize>, String> {
        let n = x.len() / 3;
        match self {
            Self::None => Ok(Vec::new()),
            Self::Indices(v) => {
                if let Some(&bad) = v.iter().find(|&&i| i >= n) {
                    return Err(format!("fixed vertex {bad} out of range ({n} vertices)"));
                }
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
            Self::Bottom(tol) => {
                let zmin = (0..n).map(|i| x[3 * i + 2]).fold(f64::INFINITY, f64::min);
                Ok((0..n).filter(|&i| x[3 * i + 2] <= zmin + tol).collect())
            }
        }
    }
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -STANDARD_GRAVITY]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    pub gravity_m_s2: [f64; 3],
    pub fixed_selector: FixedSelector,
    pub attachments: Vec<Attachment>,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            gravity_m_s2: default_gravity(),
            fixed_selector: FixedSelector::None,
            attachments: Vec::new(),
        }
    }
}

impl LoadConfig {
    /// Fixed vertices are pinned at their positions in `x`.
    pub fn resolve(&self, x: &DVector<f64>) -> Result<(ExternalLoad, Vec<usize>), String> {
        let fixed = self.fixed_selector.select(x)?;
        let load = ExternalLoad {
            gravity: Vector3::from(self.gravity_m_s2),
            fixed: Vec::new(),
            attachments: self.attachments.clone(),
        }
        .fix_at(&fixed, x);
        load.validate(x.len() / 3).map_err(|e| e.to_string())?;
        Ok((load, fixed))
    }
}

fn default_reg_weight() -> f64 {
    1e-2
}

fn default_true() -> bool {
    true
}

/// Externally tagged (`{"match": {...}}`) so parse errors keep their position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// Match a target geometry; the input mesh itself when no path is given.
    Match {
        #[serde(default)]
        target_path: Option<PathBuf>,
        #[serde(default = "default_reg_weight")]
        reg_weight: f64,
        #[serde(default = "default_true")]
        reg_relative: bool,
    },
    /// Stand on the ground; `c_hat_m` defaults to the support polygon centroid.
    Stand {
        #[serde(default)]
        c_hat_m: Option<[f64; 2]>,
        #[serde(default)]
        contact_tol_m: Option<f64>,
        #[serde(default = "default_reg_weight")]
        reg_weight: f64,
        #[serde(default = "default_true")]
        reg_relative: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Static equilibrium under the load.
    #[default]
    Static,
    /// Force-free rest shape of the plastic field.
    Rest,
    /// The input mesh positions.
    Mesh,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsRun {
    pub duration_s: f64,
    #[serde(default = "default_stride")]
    pub frame_stride: usize,
    #[serde(default)]
    pub initial: InitialState,
    /// Integrator settings. Gravity and fixed vertices come from the load block.
    #[serde(default)]
    pub settings: DynamicsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh_path: PathBuf,
    #[serde(default)]
    pub format: Option<FormatName>,
    #[serde(default)]
    pub material: MaterialParams,
    #[serde(default)]
    pub load: LoadConfig,
    #[serde(default)]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optimizer: OptimizeConfig,
    /// Write `checkpoint.json` every k accepted optimizer iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub dynamics: Option<DynamicsRun>,
    #[serde(default)]
    pub plastic_path: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| {
            ConfigError(format!("{}:{}:{}: {}", origin.display(), e.line(), e.column(), e))
        })
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.mesh_path);
        if let Some(p) = cfg.plastic_path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            rebase(p);
        }
        if let Some(ObjectiveConfig::Match { target_path: Some(p), .. }) = cfg.objective.as_mut() {
            rebase(p);
        }
        cfg.material.validate().map_err(|e| ConfigError(format!("{}: material: {e}", path.display())))?;
        Ok(cfg)
    }
}
