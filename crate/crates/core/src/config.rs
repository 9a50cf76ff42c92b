//! Run configuration.
//!
//! A run is described by one JSON document:
//!
//! ```json
//! {
//!   "grid": { "dim": 1, "n": 32, "extent": [[0, 1]] },
//!   "energy": { "variant": "power", "alpha": 2, "lambda": 1, "potential": "x/2" },
//!   "initial": { "expr": "1 + 0.5*sin(2*pi*x)" },
//!   "jko": { "tau": 0.001, "n_steps": 50 },
//!   "oracle": { "t_end": 0.05, "output_times": [0.01, 0.05] },
//!   "diagnostics": { "c_disc": 1 },
//!   "output": "out/desk"
//! }
//! ```
//!
//! `initial` is either `{"expr": ...}` or `{"csv": path}`; `potential`,
//! `oracle` and `diagnostics` are optional. Relative paths are resolved
//! against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::DiagnosticsOptions;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::{build_grid, Grid};
use crate::io::read_density_file;
use crate::jko::JkoConfig;
use crate::measures::{DiscreteMeasure, EnergyFunctional, Internal, Potential};
use crate::oracle::OracleConfig;

/// Deserialize JSON, reporting the failing field path and position.
pub fn parse_json<T: DeserializeOwned>(text: &str, root: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path == "?" || path.is_empty() { root.to_string() } else { path };
        Error::Config { field, message: e.into_inner().to_string() }
    })?;
    de.end().map_err(|e| Error::Config { field: root.into(), message: e.to_string() })?;
    Ok(value)
}

fn config_err(field: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { field: field.into(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    /// Cells per axis.
    pub n: usize,
    /// `[lo, hi]` per axis; the unit interval or square when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Vec<[f64; 2]>>,
}

impl GridSpec {
    pub fn new(dim: usize, n: usize, extent: &[(f64, f64)]) -> Self {
        Self { dim, n, extent: Some(extent.iter().map(|&(a, b)| [a, b]).collect()) }
    }

    pub fn of(grid: &Grid) -> Self {
        let d = grid.domain();
        Self { dim: grid.dim(), n: grid.n_per_axis(), extent: Some(d.lo.iter().zip(&d.hi).map(|(a, b)| [*a, *b]).collect()) }
    }

    fn extent_pairs(&self) -> Vec<(f64, f64)> {
        match &self.extent {
            Some(e) => e.iter().map(|e| (e[0], e[1])).collect(),
            None => vec![(0.0, 1.0); self.dim],
        }
    }

    pub fn build(&self) -> Result<Grid> {
        if !(1..=2).contains(&self.dim) {
            return Err(config_err("grid.dim", format!("must be 1 or 2, got {}", self.dim)));
        }
        let extent = self.extent_pairs();
        if extent.len() != self.dim {
            return Err(config_err("grid.extent", format!("needs {} intervals, got {}", self.dim, extent.len())));
        }
        if extent.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(config_err("grid.extent", "each interval needs finite lo < hi"));
        }
        if self.n < 2 {
            return Err(config_err("grid.n", format!("must be at least 2, got {}", self.n)));
        }
        if self.n.checked_pow(self.dim as u32).is_none_or(|c| c > 1 << 24) {
            return Err(config_err("grid.n", "too many cells"));
        }
        build_grid(self.dim, &extent, self.n).map_err(|e| config_err("grid", e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Power,
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpec {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub lambda: f64,
    /// External potential `V` as an expression in `x` (and `y`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<String>,
}

impl EnergySpec {
    pub fn of(energy: &EnergyFunctional) -> Self {
        let (variant, alpha) = match energy.internal {
            Internal::Power { alpha, .. } => (Variant::Power, Some(alpha)),
            Internal::Entropy { .. } => (Variant::Entropy, None),
        };
        Self { variant, alpha, lambda: energy.lambda(), potential: energy.potential.as_ref().map(|p| p.expr().to_string()) }
    }

    /// The energy, with the boundary law checked on `grid`.
    pub fn build(&self, grid: &Grid) -> Result<EnergyFunctional> {
        let internal = match (self.variant, self.alpha) {
            (Variant::Power, Some(alpha)) => {
                if !(alpha > 1.0 && alpha.is_finite()) {
                    return Err(config_err("energy.alpha", format!("must exceed 1, got {alpha}")));
                }
                Internal::Power { alpha, lambda: self.lambda }
            }
            (Variant::Power, None) => return Err(config_err("energy.alpha", "required for the power energy")),
            (Variant::Entropy, None) => Internal::Entropy { lambda: self.lambda },
            (Variant::Entropy, Some(_)) => return Err(config_err("energy.alpha", "not used by the entropy")),
        };
        let potential = match &self.potential {
            Some(src) => {
                let expr = Expr::parse(src).map_err(|e| config_err("energy.potential", e))?;
                if expr.arity() > grid.dim() {
                    return Err(config_err("energy.potential", format!("uses y on a {}D grid", grid.dim())));
                }
                Some(Potential::new(expr))
            }
            None => None,
        };
        let energy = EnergyFunctional::new(internal, potential).map_err(|e| config_err("energy.lambda", e))?;
        energy.validate_boundary_law(grid).map_err(|e| config_err("energy.potential", e))?;
        Ok(energy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Density expression sampled at cell centres.
    Expr(String),
    /// Density CSV on the configured grid.
    Csv(String),
}

fn default_output() -> String {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub energy: EnergySpec,
    pub initial: InitialSpec,
    pub jko: JkoConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsOptions>,
    #[serde(default = "default_output")]
    pub output: String,
}

/// Everything a run needs, built from a validated config.
#[derive(Clone, Debug)]
pub struct Problem {
    pub grid: Arc<Grid>,
    pub energy: EnergyFunctional,
    pub rho0: DiscreteMeasure,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text, "config")
    }

    /// Read a config file; relative paths inside it refer to its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, dir))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        base.join(&self.output)
    }

    fn initial_path(&self, base: &Path) -> Option<PathBuf> {
        match &self.initial {
            InitialSpec::Csv(p) => Some(base.join(p)),
            InitialSpec::Expr(_) => None,
        }
    }

    /// Validate every section and build the grid, energy and initial density.
    pub fn build(&self, base: &Path) -> Result<Problem> {
        let grid = Arc::new(self.grid.build()?);
        let energy = self.energy.build(&grid)?;
        let rho0 = match &self.initial {
            InitialSpec::Expr(src) => {
                let expr = Expr::parse(src).map_err(|e| config_err("initial.expr", e))?;
                if expr.arity() > grid.dim() {
                    return Err(config_err("initial.expr", format!("uses y on a {}D grid", grid.dim())));
                }
                let values: Vec<f64> = grid.centers().map(|x| expr.eval(x)).collect();
                if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                    return Err(config_err("initial.expr", format!("value {v} at cell {i} is not a finite nonnegative density")));
                }
                DiscreteMeasure::new(grid.clone(), values)?
            }
            InitialSpec::Csv(_) => {
                let path = self.initial_path(base).unwrap();
                read_density_file(&path, Some(&grid)).map_err(|e| config_err("initial.csv", e))?
            }
        };
        if !energy.evaluate_energy(&rho0).is_finite() {
            return Err(config_err("initial", "initial energy is infinite"));
        }
        self.jko.validate()?;
        if let Some(o) = &self.oracle {
            o.validate()?;
        }
        if let Some(d) = &self.diagnostics {
            d.validate()?;
        }
        if self.output.is_empty() {
            return Err(config_err("output", "must name a directory"));
        }
        Ok(Problem { grid, energy, rho0 })
    }

    /// SHA-256 of the canonical JSON form with defaults filled in. The output
    /// directory is left out and an initial CSV enters through its contents.
    pub fn config_hash(&self, base: &Path) -> Result<String> {
        let mut filled = self.clone();
        filled.grid.extent = Some(self.grid.extent_pairs().iter().map(|&(a, b)| [a, b]).collect());
        let mut value = serde_json::to_value(&filled)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        obj.remove("output");
        if let Some(path) = self.initial_path(base) {
            let bytes = fs::read(&path).map_err(|e| config_err("initial.csv", format!("{}: {e}", path.display())))?;
            obj.insert("initial".into(), serde_json::json!({ "csv_sha256": sha256_hex(&bytes) }));
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(sha256_hex(canonical.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"{
        "grid": { "dim": 1, "n": 16 },
        "energy": { "variant": "power", "alpha": 2, "lambda": 1 },
        "initial": { "expr": "1 + 0.5*sin(2*pi*x)" },
        "jko": { "tau": 0.001, "n_steps": 3 }
    }"#;

    fn field_of(text: &str) -> String {
        let err = RunConfig::from_json(text).and_then(|c| c.build(Path::new(".")).map(|_| ()));
        match err {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn desk_config_builds() {
        let cfg = RunConfig::from_json(DESK).unwrap();
        let p = cfg.build(Path::new(".")).unwrap();
        assert_eq!(p.grid.len(), 16);
        assert_eq!(cfg.output, "out");
        assert!((p.rho0.density()[4] - (1.0 + 0.5 * (2.0 * std::f64::consts::PI * 4.5 / 16.0).sin())).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (DESK.replace("\"tau\": 0.001", "\"tau\": -1"), "jko.tau"),
            (DESK.replace("\"tau\": 0.001", "\"tau\": \"a\""), "jko.tau"),
            (DESK.replace("\"n\": 16", "\"n\": 1"), "grid.n"),
            (DESK.replace("\"dim\": 1", "\"dim\": 3"), "grid.dim"),
            (DESK.replace("\"alpha\": 2", "\"alpha\": 0.5"), "energy.alpha"),
            (DESK.replace("\"lambda\": 1", "\"lambda\": -1"), "energy.lambda"),
            (DESK.replace("1 + 0.5", "1 +* 0.5"), "initial.expr"),
            (DESK.replace("1 + 0.5*sin", "-1 + 0.5*sin"), "initial.expr"),
            (DESK.replace("\"n_steps\": 3", "\"n_steps\": 3, \"bogus\": 1"), "jko.bogus"),
            (DESK.replace("\"lambda\": 1 }", "\"lambda\": 1, \"potential\": \"y\" }"), "energy.potential"),
            (DESK.replace("\"expr\"", "\"csv\""), "initial.csv"),
        ];
        for (text, field) in cases {
            assert_eq!(field_of(&text), field, "{text}");
        }
        assert_eq!(field_of("{"), "config");
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let base = RunConfig::from_json(DESK).unwrap();
        let h = base.config_hash(Path::new(".")).unwrap();
        let mut explicit = base.clone();
        explicit.jko.inner_max_iters = 20_000;
        explicit.output = "elsewhere".into();
        explicit.grid.extent = Some(vec![[0.0, 1.0]]);
        assert_eq!(explicit.config_hash(Path::new(".")).unwrap(), h);
        let respaced = RunConfig::from_json(&DESK.replace("\"tau\": 0.001", "\"tau\": 1e-3")).unwrap();
        assert_eq!(respaced.config_hash(Path::new(".")).unwrap(), h);
        let mut changed = Vec::new();
        let mut c = base.clone();
        c.jko.tau = 2e-3;
        changed.push(c);
        let mut c = base.clone();
        c.grid.n = 17;
        changed.push(c);
        let mut c = base.clone();
        c.energy.potential = Some("x".into());
        changed.push(c);
        let mut c = base.clone();
        c.initial = InitialSpec::Expr("1".into());
        changed.push(c);
        let mut c = base.clone();
        c.diagnostics = Some(DiagnosticsOptions::default());
        changed.push(c);
        for c in changed {
            assert_ne!(c.config_hash(Path::new(".")).unwrap(), h);
        }
    }

    #[test]
    fn csv_initial_density_hashes_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Arc::new(Grid::unit_interval(4).unwrap());
        let write = |v: f64| {
            let m = DiscreteMeasure::constant(grid.clone(), v).unwrap();
            crate::io::write_atomic(&dir.path().join("rho0.csv"), crate::io::density_csv_string(&m).unwrap().as_bytes()).unwrap();
        };
        let text = r#"{"grid":{"dim":1,"n":4},"energy":{"variant":"entropy","lambda":1},"initial":{"csv":"rho0.csv"},"jko":{"tau":0.01,"n_steps":1}}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        write(1.0);
        let p = cfg.build(dir.path()).unwrap();
        assert_eq!(p.rho0.density(), &[1.0; 4]);
        let h1 = cfg.config_hash(dir.path()).unwrap();
        write(2.0);
        assert_ne!(cfg.config_hash(dir.path()).unwrap(), h1);
    }

    #[test]
    fn json_roundtrip_keeps_the_hash() {
        let cfg = RunConfig::from_json(DESK).unwrap();
        let again = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.config_hash(Path::new(".")).unwrap(), cfg.config_hash(Path::new(".")).unwrap());
    }
}
