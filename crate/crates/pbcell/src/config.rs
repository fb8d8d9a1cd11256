//! Run configuration: a flat text format with `[section]` headers and
//! `key = value` lines. Lists are comma-separated; blank lines and `#`
//! comments are ignored. Every file a config references must exist when the
//! config is parsed, so failures surface before any solve starts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::analysis::Approximant;
use crate::electrolyte::{Electrolyte, Species};
use crate::geometry::{BcKind, CellMesh, MeshError, SurfaceData};
use crate::solver::SolverOptions;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing [{0}] block")]
    MissingBlock(&'static str),
    #[error("[{section}] {msg}")]
    Invalid { section: String, msg: String },
    #[error("referenced file not found: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Electrolyte(#[from] crate::electrolyte::ElectrolyteError),
}

/// How the unit cell is obtained.
#[derive(Debug, Clone)]
pub enum GeometrySpec {
    Slab {
        width: f64,
        n_cells: usize,
        grading: f64,
    },
    Disk {
        radius: f64,
        target_h: f64,
        layer_thickness: f64,
        layer_cells: usize,
    },
    MeshFile(PathBuf),
}

impl GeometrySpec {
    pub fn build(&self) -> Result<CellMesh, ConfigError> {
        Ok(match self {
            GeometrySpec::Slab {
                width,
                n_cells,
                grading,
            } => CellMesh::build_slab(*width, *n_cells, *grading)?,
            GeometrySpec::Disk {
                radius,
                target_h,
                layer_thickness,
                layer_cells,
            } => CellMesh::build_disk_cell(*radius, *target_h, *layer_thickness, *layer_cells)?,
            GeometrySpec::MeshFile(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                CellMesh::parse(&text)?
            }
        })
    }
}

/// Surface data before it is bound to a mesh.
#[derive(Debug, Clone)]
pub enum BcValues {
    Constant(f64),
    PerWall { left: f64, right: f64 },
    Table(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BcSpec {
    pub kind: BcKind,
    pub values: BcValues,
}

impl BcSpec {
    pub fn bind(&self, mesh: &CellMesh) -> Result<SurfaceData, ConfigError> {
        Ok(match &self.values {
            BcValues::Constant(v) => SurfaceData::constant(mesh, self.kind, *v),
            BcValues::PerWall { left, right } => {
                SurfaceData::per_wall(mesh, self.kind, *left, *right)?
            }
            BcValues::Table(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let mut values = Vec::new();
                for (i, raw) in text.lines().enumerate() {
                    let line = raw.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let v: f64 = line.parse().map_err(|_| ConfigError::Parse {
                        line: i + 1,
                        msg: format!("bad facet value {line:?} in {}", path.display()),
                    })?;
                    values.push(v);
                }
                SurfaceData::from_table(mesh, self.kind, values)?
            }
        })
    }
}

/// A slope check evaluated against the fitted rates of a sweep, written in
/// the config as e.g. `check = layer L2 <= -1.10`.
#[derive(Debug, Clone)]
pub struct SlopeCheck {
    pub approximant: Approximant,
    pub norm: String,
    /// True for `<=`, false for `>=`.
    pub upper: bool,
    pub threshold: f64,
}

impl SlopeCheck {
    pub fn passes(&self, slope: f64) -> bool {
        if self.upper {
            slope <= self.threshold
        } else {
            slope >= self.threshold
        }
    }
}

/// Fully parsed run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub geometry: GeometrySpec,
    pub electrolyte: Electrolyte,
    pub bc: Option<BcSpec>,
    /// Single beta ([run] beta) for solve/bounds.
    pub beta: Option<f64>,
    /// Beta grid for sweeps.
    pub betas: Vec<f64>,
    pub approximants: Vec<Approximant>,
    pub checks: Vec<SlopeCheck>,
    /// Zeta value for the standalone layer command.
    pub layer_zeta: Option<f64>,
    pub solver: SolverOptions,
    pub output_dir: PathBuf,
    /// Verbatim config text, echoed into the run manifest.
    pub echo: String,
}

/// One `key = value` line with its provenance for error reporting.
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
    used: std::cell::Cell<bool>,
}

struct Entries(Vec<Entry>);

impl Entries {
    fn has_section(&self, name: &str) -> bool {
        self.0.iter().any(|e| e.section == name)
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        let e = self
            .0
            .iter()
            .find(|e| e.section == section && e.key == key)?;
        e.used.set(true);
        Some(e)
    }

    fn all(&self, section: &str, key: &str) -> Vec<&Entry> {
        let v: Vec<&Entry> = self
            .0
            .iter()
            .filter(|e| e.section == section && e.key == key)
            .collect();
        for e in &v {
            e.used.set(true);
        }
        v
    }

    fn f64(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get(section, key)
            .map(|e| {
                e.value.parse().map_err(|_| ConfigError::Parse {
                    line: e.line,
                    msg: format!("expected a number for {key}, got {:?}", e.value),
                })
            })
            .transpose()
    }

    fn usize(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.get(section, key)
            .map(|e| {
                e.value.parse().map_err(|_| ConfigError::Parse {
                    line: e.line,
                    msg: format!("expected an integer for {key}, got {:?}", e.value),
                })
            })
            .transpose()
    }

    fn require_f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.f64(section, key)?.ok_or_else(|| ConfigError::Invalid {
            section: section.into(),
            msg: format!("missing key {key}"),
        })
    }
}

fn parse_entries(text: &str) -> Result<Entries, ConfigError> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("unterminated section header {line:?}"),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        if section.is_empty() {
            return Err(ConfigError::Parse {
                line: i + 1,
                msg: "key before first [section] header".into(),
            });
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: i + 1,
            used: std::cell::Cell::new(false),
        });
    }
    Ok(Entries(entries))
}

fn parse_list<T: std::str::FromStr>(e: &Entry, what: &str) -> Result<Vec<T>, ConfigError> {
    e.value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| ConfigError::Parse {
                line: e.line,
                msg: format!("bad {what} entry {s:?}"),
            })
        })
        .collect()
}

fn parse_geometry(entries: &Entries, base: &Path) -> Result<GeometrySpec, ConfigError> {
    let kind = entries
        .get("geometry", "kind")
        .ok_or(ConfigError::MissingBlock("geometry"))?;
    match kind.value.as_str() {
        "slab" => Ok(GeometrySpec::Slab {
            width: entries.f64("geometry", "width")?.unwrap_or(1.0),
            n_cells: entries.usize("geometry", "n_cells")?.unwrap_or(100),
            grading: entries.f64("geometry", "grading")?.unwrap_or(1.0),
        }),
        "disk" => Ok(GeometrySpec::Disk {
            radius: entries.require_f64("geometry", "radius")?,
            target_h: entries.require_f64("geometry", "target_h")?,
            layer_thickness: entries.f64("geometry", "layer_thickness")?.unwrap_or(0.0),
            layer_cells: entries.usize("geometry", "layer_cells")?.unwrap_or(0),
        }),
        "mesh-file" => {
            let e = entries
                .get("geometry", "path")
                .ok_or_else(|| ConfigError::Invalid {
                    section: "geometry".into(),
                    msg: "mesh-file geometry needs a path key".into(),
                })?;
            let path = base.join(&e.value);
            if !path.is_file() {
                return Err(ConfigError::MissingFile(path));
            }
            Ok(GeometrySpec::MeshFile(path))
        }
        other => Err(ConfigError::Invalid {
            section: "geometry".into(),
            msg: format!("unknown geometry kind {other:?}"),
        }),
    }
}

fn parse_electrolyte(entries: &Entries) -> Result<Electrolyte, ConfigError> {
    if !entries.has_section("electrolyte") {
        return Err(ConfigError::MissingBlock("electrolyte"));
    }
    let val = entries
        .get("electrolyte", "valences")
        .ok_or_else(|| ConfigError::Invalid {
            section: "electrolyte".into(),
            msg: "missing key valences".into(),
        })?;
    let conc = entries
        .get("electrolyte", "concentrations")
        .ok_or_else(|| ConfigError::Invalid {
            section: "electrolyte".into(),
            msg: "missing key concentrations".into(),
        })?;
    let valences: Vec<i32> = parse_list(val, "valence")?;
    let concentrations: Vec<f64> = parse_list(conc, "concentration")?;
    if valences.len() != concentrations.len() {
        return Err(ConfigError::Invalid {
            section: "electrolyte".into(),
            msg: format!(
                "{} valences but {} concentrations",
                valences.len(),
                concentrations.len()
            ),
        });
    }
    let species = valences
        .into_iter()
        .zip(concentrations)
        .map(|(z, n)| Species::new(z, n))
        .collect();
    Ok(Electrolyte::new(species)?)
}

fn parse_bc(entries: &Entries, base: &Path) -> Result<Option<BcSpec>, ConfigError> {
    if !entries.has_section("bc") {
        return Ok(None);
    }
    let kind = entries
        .get("bc", "kind")
        .ok_or_else(|| ConfigError::Invalid {
            section: "bc".into(),
            msg: "missing key kind".into(),
        })?;
    let kind = match kind.value.as_str() {
        "neumann" => BcKind::Sigma,
        "dirichlet" => BcKind::Zeta,
        other => {
            return Err(ConfigError::Invalid {
                section: "bc".into(),
                msg: format!("unknown bc kind {other:?} (neumann or dirichlet)"),
            })
        }
    };
    let values = if let Some(e) = entries.get("bc", "table") {
        let path = base.join(&e.value);
        if !path.is_file() {
            return Err(ConfigError::MissingFile(path));
        }
        BcValues::Table(path)
    } else if entries.get("bc", "left").is_some() || entries.get("bc", "right").is_some() {
        BcValues::PerWall {
            left: entries.require_f64("bc", "left")?,
            right: entries.require_f64("bc", "right")?,
        }
    } else {
        BcValues::Constant(entries.require_f64("bc", "value")?)
    };
    Ok(Some(BcSpec { kind, values }))
}

fn parse_betas(entries: &Entries) -> Result<Vec<f64>, ConfigError> {
    if let Some(e) = entries.get("sweep", "betas") {
        return parse_list(e, "beta");
    }
    match (
        entries.f64("sweep", "beta_min")?,
        entries.f64("sweep", "beta_max")?,
        entries.usize("sweep", "beta_count")?,
    ) {
        (Some(lo), Some(hi), Some(n)) => {
            if !(lo > 0.0 && hi > lo && n >= 1) {
                return Err(ConfigError::Invalid {
                    section: "sweep".into(),
                    msg: "need 0 < beta_min < beta_max and beta_count >= 1".into(),
                });
            }
            if n == 1 {
                return Ok(vec![lo]);
            }
            let (la, lb) = (lo.ln(), hi.ln());
            Ok((0..n)
                .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
                .collect())
        }
        (None, None, None) => Ok(Vec::new()),
        _ => Err(ConfigError::Invalid {
            section: "sweep".into(),
            msg: "beta_min, beta_max, beta_count must be given together".into(),
        }),
    }
}

fn parse_checks(entries: &Entries) -> Result<Vec<SlopeCheck>, ConfigError> {
    let mut checks = Vec::new();
    for e in entries.all("sweep", "check") {
        let parts: Vec<&str> = e.value.split_whitespace().collect();
        let bad = |msg: String| ConfigError::Parse { line: e.line, msg };
        if parts.len() != 4 {
            return Err(bad(format!(
                "check needs `<approximant> <norm> <=|>= <threshold>`, got {:?}",
                e.value
            )));
        }
        let approximant = Approximant::parse(parts[0])
            .ok_or_else(|| bad(format!("unknown approximant {:?}", parts[0])))?;
        if !crate::analysis::NORM_NAMES.contains(&parts[1]) {
            return Err(bad(format!("unknown norm {:?}", parts[1])));
        }
        let upper = match parts[2] {
            "<=" => true,
            ">=" => false,
            other => return Err(bad(format!("expected <= or >=, got {other:?}"))),
        };
        let threshold: f64 = parts[3]
            .parse()
            .map_err(|_| bad(format!("bad threshold {:?}", parts[3])))?;
        checks.push(SlopeCheck {
            approximant,
            norm: parts[1].to_string(),
            upper,
            threshold,
        });
    }
    Ok(checks)
}

impl RunConfig {
    /// Parses a config file; relative paths inside the config are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let entries = parse_entries(text)?;
        let known: BTreeSet<&str> = ["geometry", "electrolyte", "bc", "run", "sweep", "solver", "output", "layer"]
            .into_iter()
            .collect();
        for e in &entries.0 {
            if !known.contains(e.section.as_str()) {
                return Err(ConfigError::Parse {
                    line: e.line,
                    msg: format!("unknown section [{}]", e.section),
                });
            }
        }

        let geometry = parse_geometry(&entries, base)?;
        let electrolyte = parse_electrolyte(&entries)?;
        let bc = parse_bc(&entries, base)?;
        let beta = entries.f64("run", "beta")?;
        let betas = parse_betas(&entries)?;
        let approximants = match entries.get("sweep", "approximants") {
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    Approximant::parse(s).ok_or_else(|| ConfigError::Parse {
                        line: e.line,
                        msg: format!("unknown approximant {s:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let checks = parse_checks(&entries)?;
        for c in &checks {
            if !approximants.contains(&c.approximant) {
                return Err(ConfigError::Invalid {
                    section: "sweep".into(),
                    msg: format!(
                        "check references approximant {:?} not in the approximants list",
                        c.approximant.name()
                    ),
                });
            }
        }

        let mut solver = SolverOptions::default();
        if let Some(v) = entries.f64("solver", "newton_tol")? {
            solver.newton_tol = v;
        }
        if let Some(v) = entries.usize("solver", "max_newton")? {
            solver.max_newton = v;
        }
        if let Some(v) = entries.f64("solver", "linear_tol")? {
            solver.linear_tol = v;
        }

        let output_dir = match entries.get("output", "dir") {
            Some(e) => base.join(&e.value),
            None => PathBuf::from("."),
        };
        let layer_zeta = entries.f64("layer", "zeta")?;

        for e in &entries.0 {
            if !e.used.get() {
                return Err(ConfigError::Parse {
                    line: e.line,
                    msg: format!("unknown key {:?} in [{}]", e.key, e.section),
                });
            }
        }

        Ok(RunConfig {
            geometry,
            electrolyte,
            bc,
            beta,
            betas,
            approximants,
            checks,
            layer_zeta,
            solver,
            output_dir,
            echo: text.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("."))
    }

    const BASE: &str = "\
[geometry]
kind = slab
n_cells = 8

[electrolyte]
valences = -1, 1
concentrations = 0.5, 0.5
";

    #[test]
    fn minimal_slab_config() {
        let cfg = parse(BASE).unwrap();
        match cfg.geometry {
            GeometrySpec::Slab {
                width,
                n_cells,
                grading,
            } => {
                assert_eq!(width, 1.0);
                assert_eq!(n_cells, 8);
                assert_eq!(grading, 1.0);
            }
            other => panic!("wrong geometry {other:?}"),
        }
        assert!(cfg.bc.is_none());
        assert!(cfg.betas.is_empty());
        let mesh = cfg.geometry.build().unwrap();
        assert_eq!(mesh.n_dofs(), 9);
    }

    #[test]
    fn missing_electrolyte_names_block() {
        let err = parse("[geometry]\nkind = slab\n").unwrap_err();
        assert!(err.to_string().contains("electrolyte"), "{err}");
    }

    #[test]
    fn bc_and_run_beta() {
        let text = format!(
            "{BASE}\n[bc]\nkind = neumann\nvalue = -1\n\n[run]\nbeta = 10\n"
        );
        let cfg = parse(&text).unwrap();
        let bc = cfg.bc.unwrap();
        assert!(matches!(bc.kind, BcKind::Sigma));
        assert!(matches!(bc.values, BcValues::Constant(v) if v == -1.0));
        assert_eq!(cfg.beta, Some(10.0));
        let mesh = cfg.geometry.build().unwrap();
        let data = bc.bind(&mesh).unwrap();
        assert_eq!(data.values, vec![-1.0, -1.0]);
    }

    #[test]
    fn per_wall_bc() {
        let text = format!("{BASE}\n[bc]\nkind = neumann\nleft = 1\nright = -1\n");
        let cfg = parse(&text).unwrap();
        let mesh = cfg.geometry.build().unwrap();
        let data = cfg.bc.unwrap().bind(&mesh).unwrap();
        assert_eq!(data.values, vec![1.0, -1.0]);
    }

    #[test]
    fn log_spaced_beta_grid() {
        let text = format!(
            "{BASE}\n[sweep]\nbeta_min = 1e2\nbeta_max = 1e6\nbeta_count = 9\napproximants = layer\n"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.betas.len(), 9);
        assert!((cfg.betas[0] - 1e2).abs() < 1e-8);
        assert!((cfg.betas[8] - 1e6).abs() / 1e6 < 1e-12);
        assert!((cfg.betas[1] / cfg.betas[0] - 10f64.sqrt()).abs() < 1e-10);
        assert_eq!(cfg.approximants, vec![Approximant::Layer]);
    }

    #[test]
    fn checks_parse_and_evaluate() {
        let text = format!(
            "{BASE}\n[sweep]\nbetas = 1, 10\napproximants = layer\ncheck = layer L2 <= -1.10\ncheck = layer H1 >= -0.75\n"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.checks.len(), 2);
        assert!(cfg.checks[0].passes(-1.2));
        assert!(!cfg.checks[0].passes(-1.0));
        assert!(cfg.checks[1].passes(-0.5));
    }

    #[test]
    fn unknown_approximant_rejected() {
        let text = format!("{BASE}\n[sweep]\napproximants = nonsense\n");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{BASE}\n[run]\nbeta = 1\nbogus = 2\n");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn missing_table_file_rejected_at_parse() {
        let text = format!("{BASE}\n[bc]\nkind = dirichlet\ntable = does-not-exist.txt\n");
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)), "{err}");
    }

    #[test]
    fn check_must_use_listed_approximant() {
        let text = format!(
            "{BASE}\n[sweep]\nbetas = 1, 10\napproximants = layer\ncheck = small0 Linf >= 1.85\n"
        );
        assert!(parse(&text).is_err());
    }
}
