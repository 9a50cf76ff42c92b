//! Density CSV files, run manifests and atomic file output.
//!
//! A density CSV has one row per cell in grid order:
//!
//! ```text
//! index,x,density          (1D)
//! index,x,y,density        (2D)
//! ```
//!
//! Floats are written with 17 significant digits so a file read back gives
//! the same bits.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{EnergySpec, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::{build_grid, Grid};
use crate::jko::{JkoConfig, JkoTrajectory};
use crate::measures::{DiscreteMeasure, EnergyFunctional};
use crate::oracle::{OracleConfig, OracleSolution};
use crate::wb2::TransportModel;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Relative tolerance when matching cell centres read from a file.
const CENTER_TOL: f64 = 1e-9;

/// Format a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

pub fn write_density_csv<W: Write>(measure: &DiscreteMeasure, out: W) -> Result<()> {
    let grid = measure.grid();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index", "x"];
    if grid.dim() == 2 {
        header.push("y");
    }
    header.push("density");
    w.write_record(&header).map_err(csv_err)?;
    for (i, (c, r)) in grid.centers().zip(measure.density()).enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(c.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(*r));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn density_csv_string(measure: &DiscreteMeasure) -> Result<String> {
    let mut buf = Vec::new();
    write_density_csv(measure, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Csv(e.to_string()))
}

/// Rows of a density CSV: centres and densities in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityRows {
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub density: Vec<f64>,
}

pub fn read_density_rows<R: Read>(input: R) -> Result<DensityRows> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let dim = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["index", "x", "density"] => 1,
        ["index", "x", "y", "density"] => 2,
        _ => return Err(Error::Csv(format!("unexpected header {header:?}"))),
    };
    let mut centers = Vec::new();
    let mut density = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = row + 2;
        let index: usize = rec[0]
            .parse()
            .map_err(|_| Error::Csv(format!("line {line}: bad index {:?}", &rec[0])))?;
        if index != row {
            return Err(Error::Csv(format!("line {line}: index {index} out of order")));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = rec[k].parse().map_err(|_| Error::Csv(format!("line {line}: bad number {:?}", &rec[k])))?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("line {line}: non-finite value")));
            }
            Ok(v)
        };
        centers.push((1..=dim).map(num).collect::<Result<Vec<_>>>()?);
        let d = num(dim + 1)?;
        if d < 0.0 {
            return Err(Error::NegativeValue { index, value: d });
        }
        density.push(d);
    }
    if density.is_empty() {
        return Err(Error::Csv("no rows".into()));
    }
    Ok(DensityRows { dim, centers, density })
}

/// Recover the uniform grid whose centres are listed in `rows`.
pub fn infer_grid(rows: &DensityRows) -> Result<Grid> {
    let len = rows.density.len();
    let n = (len as f64).powf(1.0 / rows.dim as f64).round() as usize;
    if n < 2 || n.pow(rows.dim as u32) != len {
        return Err(Error::Csv(format!("{len} rows do not form a {}D grid", rows.dim)));
    }
    let stride = len / n;
    let extent: Vec<(f64, f64)> = (0..rows.dim)
        .map(|a| {
            let step = if a == 0 { stride } else { 1 };
            let (first, last) = (rows.centers[0][a], rows.centers[(n - 1) * step][a]);
            let h = (last - first) / (n - 1) as f64;
            (first - 0.5 * h, last + 0.5 * h)
        })
        .collect();
    let grid = build_grid(rows.dim, &extent, n).map_err(|e| Error::Csv(format!("cannot infer grid: {e}")))?;
    check_centers(rows, &grid)?;
    Ok(grid)
}

fn check_centers(rows: &DensityRows, grid: &Grid) -> Result<()> {
    if rows.dim != grid.dim() || rows.density.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "file has {} rows in {}D, grid has {} cells in {}D",
            rows.density.len(),
            rows.dim,
            grid.len(),
            grid.dim()
        )));
    }
    let scale = grid.domain().diam().max(1.0);
    for (i, c) in rows.centers.iter().enumerate() {
        if c.iter().zip(grid.center(i)).any(|(a, b)| (a - b).abs() > CENTER_TOL * scale) {
            return Err(Error::GridMismatch(format!("row {i}: centre {c:?} is not on the grid")));
        }
    }
    Ok(())
}

/// Read a density CSV, inferring the grid from the listed centres.
pub fn read_density_csv<R: Read>(input: R) -> Result<DiscreteMeasure> {
    let rows = read_density_rows(input)?;
    let grid = infer_grid(&rows)?;
    DiscreteMeasure::new(Arc::new(grid), rows.density)
}

/// Read a density CSV that must lie on `grid`.
pub fn read_density_csv_on<R: Read>(input: R, grid: &Arc<Grid>) -> Result<DiscreteMeasure> {
    let rows = read_density_rows(input)?;
    check_centers(&rows, grid)?;
    DiscreteMeasure::new(grid.clone(), rows.density)
}

pub fn read_density_file(path: &Path, grid: Option<&Arc<Grid>>) -> Result<DiscreteMeasure> {
    let file = fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    match grid {
        Some(g) => read_density_csv_on(file, g),
        None => read_density_csv(file),
    }
}

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Jko,
    Oracle,
}

/// Description of a written trajectory. Density files are listed relative to
/// the manifest's directory, one per entry of `times`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub source: Source,
    pub config_hash: String,
    pub grid: GridSpec,
    pub energy: EnergySpec,
    pub times: Vec<f64>,
    pub files: Vec<String>,
    /// `E(rho)` at each listed time.
    pub energies: Vec<f64>,
    /// Step length of a minimizing-movement run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// `Wb2^2` between consecutive steps of a minimizing-movement run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_costs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<TransportModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jko: Option<JkoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped_mass: Option<f64>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = crate::config::parse_json(text, "manifest")?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: format!("manifest.{field}"), message });
        if self.version != MANIFEST_VERSION {
            return bad("version", format!("unsupported version {}", self.version));
        }
        if self.files.is_empty() || self.files.len() != self.times.len() || self.energies.len() != self.times.len() {
            return bad("files", "times, files and energies need one entry per density".into());
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) || self.times.iter().any(|t| !t.is_finite()) {
            return bad("times", "must be finite and increasing".into());
        }
        if let Some(f) = self.files.iter().find(|f| Path::new(f).is_absolute() || f.contains("..")) {
            return bad("files", format!("{f:?} must be a relative path inside the manifest directory"));
        }
        if self.source == Source::Jko {
            match self.tau {
                Some(t) if t > 0.0 && t.is_finite() => {}
                _ => return bad("tau", "a jko manifest needs a positive tau".into()),
            }
        }
        self.grid.build().map_err(|e| Error::Config { field: "manifest.grid".into(), message: e.to_string() })?;
        Ok(())
    }

    /// Load every listed density on the manifest grid.
    pub fn load_densities(&self, dir: &Path) -> Result<Vec<DiscreteMeasure>> {
        let grid = Arc::new(self.grid.build()?);
        self.files.iter().map(|f| read_density_file(&dir.join(f), Some(&grid))).collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Manifest::from_json(&text)?, dir))
}

fn write_densities(dir: &Path, prefix: &str, densities: &[&DiscreteMeasure]) -> Result<Vec<String>> {
    densities
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let name = format!("{prefix}_{k:05}.csv");
            write_atomic(&dir.join(&name), density_csv_string(m)?.as_bytes())?;
            Ok(name)
        })
        .collect()
}

/// Write one CSV per step and `manifest.json` into `dir`.
pub fn write_jko_run(
    dir: &Path,
    energy: &EnergyFunctional,
    traj: &JkoTrajectory,
    config: &JkoConfig,
    config_hash: &str,
) -> Result<Manifest> {
    let files = write_densities(dir, "step", &traj.steps.iter().collect::<Vec<_>>())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        source: Source::Jko,
        config_hash: config_hash.into(),
        grid: GridSpec::of(traj.grid()),
        energy: EnergySpec::of(energy),
        times: (0..traj.steps.len()).map(|k| k as f64 * traj.tau).collect(),
        files,
        energies: traj.step_energies.clone(),
        tau: Some(traj.tau),
        step_costs: traj.step_costs.clone(),
        model: Some(traj.model),
        inner_tol: Some(traj.inner_tol),
        jko: Some(config.clone()),
        oracle: None,
        clipped_mass: None,
    };
    write_atomic(&dir.join(MANIFEST_NAME), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Write one CSV per output time and `manifest.json` into `dir`.
pub fn write_oracle_run(
    dir: &Path,
    energy: &EnergyFunctional,
    solution: &OracleSolution,
    config: &OracleConfig,
    config_hash: &str,
) -> Result<Manifest> {
    let files = write_densities(dir, "t", &solution.densities.iter().collect::<Vec<_>>())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        source: Source::Oracle,
        config_hash: config_hash.into(),
        grid: GridSpec::of(solution.densities[0].grid()),
        energy: EnergySpec::of(energy),
        times: solution.times.clone(),
        files,
        energies: solution.densities.iter().map(|m| energy.evaluate_energy(m)).collect(),
        tau: None,
        step_costs: Vec::new(),
        model: None,
        inner_tol: None,
        jko: None,
        oracle: Some(config.clone()),
        clipped_mass: Some(solution.clipped_mass),
    };
    write_atomic(&dir.join(MANIFEST_NAME), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Rebuild the energy and trajectory described by a minimizing-movement manifest.
/// Step costs and energies are recomputed from the density files.
pub fn load_jko_run(manifest: &Manifest, dir: &Path) -> Result<(EnergyFunctional, JkoTrajectory)> {
    if manifest.source != Source::Jko {
        return Err(Error::Config { field: "manifest.source".into(), message: "expected a jko trajectory".into() });
    }
    let steps = manifest.load_densities(dir)?;
    let energy = manifest.energy.build(steps[0].grid())?;
    let model = manifest.model.unwrap_or_else(|| TransportModel::for_dim(manifest.grid.dim));
    let e0 = energy.evaluate_energy(&steps[0]);
    let tol = manifest.inner_tol.unwrap_or_else(|| JkoConfig::new(1.0, 1).tol_for(e0));
    let traj = JkoTrajectory::from_steps(&energy, steps, manifest.tau.unwrap_or(1.0), model, tol)?;
    Ok((energy, traj))
}
