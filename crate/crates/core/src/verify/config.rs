//! Run configuration: a single JSON file with model, grid, ensemble,
//! checks and output blocks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::grid::{Field, Grid};
use crate::models::{Coefficient, InitialPreset, ModelSpec};
use crate::sim::{Probe, SimScheme};

/// Environment variable overriding `output.dir`.
pub const CONFIG_ENV_OUT: &str = "MDP_SPDE_LAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Sbm,
    Fvp,
    /// `G = 0`.
    Zero,
    /// Space-time white noise with constant amplitude.
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialSource {
    Preset(InitialPreset),
    /// Two-column `y,value` CSV, resolved relative to the config file.
    File(PathBuf),
}

fn default_initial() -> InitialSource {
    InitialSource::Preset(InitialPreset::GaussianCdf)
}

fn default_kappa() -> f64 {
    0.25
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kind: ModelChoice,
    #[serde(default = "default_initial")]
    pub initial: InitialSource,
    pub epsilon: Vec<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Noise amplitude of the `white` model.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(rename = "L")]
    pub half_width: f64,
    pub nx: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub nt: usize,
    pub na: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults to five points at `t = T` spanning the initial mass.
    #[serde(default)]
    pub probes: Option<Vec<ProbeSpec>>,
}

fn default_replicates() -> u64 {
    2000
}

fn default_seed() -> u64 {
    42
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            seed: default_seed(),
            probes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Identities,
    RateEquivalence,
    Qv,
    Mdp,
    Scaling,
    Acceptance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksBlock {
    #[serde(default)]
    pub run: Vec<Suite>,
    /// Level of the hitting-rate check.
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "ten_percent")]
    pub variance_tol: f64,
    #[serde(default = "two_percent")]
    pub duality_tol: f64,
    /// Standard errors allowed in the tail check.
    #[serde(default = "three")]
    pub tail_se: f64,
    #[serde(default = "default_tail_z")]
    pub tail_z: Vec<f64>,
    #[serde(default = "five_percent")]
    pub qv_tol: f64,
    #[serde(default = "fifteen_percent")]
    pub slope_tol: f64,
    /// Dyadic separations of the moment scan, in grid units.
    #[serde(default = "default_separations")]
    pub separations: Vec<usize>,
}

fn one() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn two_percent() -> f64 {
    0.02
}
fn five_percent() -> f64 {
    0.05
}
fn ten_percent() -> f64 {
    0.10
}
fn fifteen_percent() -> f64 {
    0.15
}
fn default_tail_z() -> Vec<f64> {
    vec![1.5, 2.0, 2.5]
}
fn default_separations() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

impl Default for ChecksBlock {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all check fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Binary]
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub grid: GridBlock,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub checks: ChecksBlock,
    #[serde(default)]
    pub output: OutputBlock,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn anchored(text: &str, key: &str, msg: impl std::fmt::Display) -> LabError {
    match line_of(text, key) {
        Some(l) => LabError::Config(format!("line {l}: `{key}`: {msg}")),
        None => LabError::Config(format!("`{key}`: {msg}")),
    }
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" ++ bytes`, hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunConfig {
    /// Parse and validate. Errors name the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            LabError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn validate(&self, text: &str) -> Result<()> {
        let m = &self.model;
        if m.epsilon.is_empty() {
            return Err(anchored(text, "epsilon", "list must not be empty"));
        }
        if let Some(e) = m.epsilon.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(anchored(text, "epsilon", format!("values must be strictly positive, got {e}")));
        }
        if !(m.kappa > 0.0 && m.kappa < 0.5) {
            return Err(anchored(text, "kappa", format!("need 0 < kappa < 1/2, got {}", m.kappa)));
        }
        if !m.amplitude.is_finite() {
            return Err(anchored(text, "amplitude", "must be finite"));
        }
        let g = &self.grid;
        Grid::new(g.half_width, g.nx, g.horizon, g.nt).map_err(|e| anchored(text, "grid", e))?;
        if g.na == 0 {
            return Err(anchored(text, "na", "need at least one mark cell"));
        }
        if self.ensemble.replicates == 0 {
            return Err(anchored(text, "replicates", "need at least one replicate"));
        }
        if let Some(ps) = &self.ensemble.probes {
            let grid = self.grid()?;
            for p in ps {
                if grid.step_index(p.t).is_none() || grid.node_index(p.y).is_none() {
                    return Err(anchored(text, "probes", format!("probe (t={}, y={}) is not on a grid node", p.t, p.y)));
                }
            }
        }
        let c = &self.checks;
        for (key, v) in [
            ("delta", c.delta),
            ("variance_tol", c.variance_tol),
            ("duality_tol", c.duality_tol),
            ("tail_se", c.tail_se),
            ("qv_tol", c.qv_tol),
            ("slope_tol", c.slope_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(anchored(text, key, format!("must be positive, got {v}")));
            }
        }
        if c.tail_z.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
            return Err(anchored(text, "tail_z", "levels must be positive"));
        }
        if c.separations.is_empty() || c.separations.windows(2).any(|w| w[1] <= w[0]) || c.separations[0] == 0 {
            return Err(anchored(text, "separations", "need increasing positive separations"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        Grid::new(g.half_width, g.nx, g.horizon, g.nt)
    }

    pub fn scheme(&self) -> SimScheme {
        SimScheme {
            marks: self.grid.na,
            projection: None,
        }
    }

    fn initial_field(&self, grid: &Grid, anchor: crate::models::Anchor) -> Result<Field> {
        match &self.model.initial {
            InitialSource::Preset(p) => p.field(grid, anchor),
            InitialSource::File(f) => {
                let path = if f.is_absolute() { f.clone() } else { self.base_dir.join(f) };
                crate::io::read_field_csv(std::fs::File::open(&path)?, grid)
            }
        }
    }

    /// The model at noise level `epsilon`.
    pub fn model_spec(&self, grid: &Grid, epsilon: f64) -> Result<ModelSpec> {
        use crate::models::Anchor;
        let m = &self.model;
        match m.kind {
            ModelChoice::Sbm => ModelSpec::sbm_with_initial(self.initial_field(grid, Anchor::Origin)?, epsilon, m.kappa),
            ModelChoice::Fvp => {
                ModelSpec::fvp_with_initial(self.initial_field(grid, Anchor::MinusInfinity)?, epsilon, m.kappa)
            }
            ModelChoice::Zero => ModelSpec::custom(
                Coefficient::Zero,
                (0.0, 1.0),
                self.initial_field(grid, Anchor::MinusInfinity)?,
                epsilon,
                m.kappa,
            ),
            ModelChoice::White => {
                let amp = m.amplitude;
                ModelSpec::custom(
                    Coefficient::SpatialWhite(Arc::new(move |_, _| amp)),
                    (0.0, 1.0),
                    self.initial_field(grid, Anchor::MinusInfinity)?,
                    epsilon,
                    m.kappa,
                )
            }
        }
    }

    /// Configured probes, or five nodes at `t = T` at the 10/30/50/70/90%
    /// quantiles of the initial mass (the window centre if there is none).
    pub fn probes(&self, grid: &Grid, model: &ModelSpec) -> Result<Vec<Probe>> {
        if let Some(ps) = &self.ensemble.probes {
            return ps
                .iter()
                .map(|p| match (grid.step_index(p.t), grid.node_index(p.y)) {
                    (Some(step), Some(node)) => Ok(Probe { step, node }),
                    _ => Err(LabError::Config(format!("probe (t={}, y={}) is not on a grid node", p.t, p.y))),
                })
                .collect();
        }
        Ok(default_probes(grid, model.initial.values()))
    }

    /// Output directory, honouring [`CONFIG_ENV_OUT`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(CONFIG_ENV_OUT) {
            Some(d) => PathBuf::from(d),
            None => self.output.dir.clone(),
        }
    }
}

fn default_probes(grid: &Grid, f: &[f64]) -> Vec<Probe> {
    let mass: Vec<f64> = f.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let total: f64 = mass.iter().sum();
    let centre = grid.nx / 2;
    [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|q| {
            let node = if total > 0.0 {
                let mut acc = 0.0;
                let mut i = 0;
                while i < mass.len() && acc + mass[i] < q * total {
                    acc += mass[i];
                    i += 1;
                }
                // the cell holding the quantile; take its nearer end
                if i < mass.len() && acc + 0.5 * mass[i] < q * total {
                    i + 1
                } else {
                    i
                }
            } else {
                centre
            };
            Probe { step: grid.nt, node }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
  "model": { "kind": "fvp", "initial": { "preset": "gaussian-cdf" }, "epsilon": [1e-2, 1e-3, 1e-4] },
  "grid": { "L": 8, "nx": 128, "T": 1, "nt": 200, "na": 256 },
  "ensemble": { "replicates": 100, "seed": 7, "probes": [ { "t": 1, "y": 0 } ] },
  "checks": { "run": ["mdp"] }
}"#;

    #[test]
    fn good_config_parses_with_defaults() {
        let c = RunConfig::parse(GOOD).unwrap();
        assert_eq!(c.model.kappa, 0.25);
        assert_eq!(c.checks.duality_tol, 0.02);
        assert_eq!(c.checks.run, vec![Suite::Mdp]);
        let g = c.grid().unwrap();
        let m = c.model_spec(&g, 1e-3).unwrap();
        assert_eq!(c.probes(&g, &m).unwrap(), vec![Probe { step: 200, node: 64 }]);
    }

    #[test]
    fn errors_point_at_lines() {
        let bad = GOOD.replace("1e-4]", "-1e-4]");
        let e = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("epsilon"), "{e}");
        let bad = GOOD.replace("\"nt\": 200,", "\"nt\": 200,,");
        let e = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let bad = GOOD.replace("\"seed\": 7", "\"seed\": 7, \"colour\": 1");
        assert!(RunConfig::parse(&bad).unwrap_err().to_string().contains("colour"));
        let bad = GOOD.replace("\"y\": 0", "\"y\": 0.01");
        let e = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("probes"), "{e}");
    }

    #[test]
    fn hash_is_git_style() {
        // the empty blob under SHA-256 object framing
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn default_probes_span_the_mass() {
        let c = RunConfig::parse(&GOOD.replace(", \"probes\": [ { \"t\": 1, \"y\": 0 } ]", "")).unwrap();
        let g = c.grid().unwrap();
        let m = c.model_spec(&g, 1e-3).unwrap();
        let ys: Vec<f64> = c.probes(&g, &m).unwrap().iter().map(|p| g.node(p.node)).collect();
        assert_eq!(ys, vec![-1.25, -0.5, 0.0, 0.5, 1.25]);
    }
}
