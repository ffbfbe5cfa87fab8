//! Run configuration, the NSKF binary field format, and CSV/JSON reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DtPolicy, FlowState, PhysParams, System};
use crate::error::{Error, Result};
use crate::nonlocal::leray_project;
use crate::spectral::{inverse_vec, Grid, RealField, SpectralField};

pub const NSKF_MAGIC: [u8; 4] = *b"NSKF";
pub const NSKF_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "NSK_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "nsk-output";

/// Serializes a field: magic, version, dim, per-axis sizes, box length, then
/// row-major samples. Everything is little-endian.
pub fn encode_field(f: &RealField) -> Vec<u8> {
    let grid = f.grid();
    let mut out = Vec::with_capacity(4 + 4 + 1 + 8 * grid.dim() + 8 + 8 * grid.len());
    out.extend_from_slice(&NSKF_MAGIC);
    out.extend_from_slice(&NSKF_VERSION.to_le_bytes());
    out.push(grid.dim() as u8);
    for _ in 0..grid.dim() {
        out.extend_from_slice(&(grid.n() as u64).to_le_bytes());
    }
    out.extend_from_slice(&grid.length().to_le_bytes());
    for v in f.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, count: usize, expected_total: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + count {
            return Err(Error::Truncated {
                expected: expected_total.max(self.pos + count),
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + count];
        self.pos += count;
        Ok(s)
    }

    fn u64(&mut self, expected_total: usize) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, expected_total)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, expected_total: usize) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, expected_total)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Inverse of [`encode_field`].
pub fn decode_field(bytes: &[u8]) -> Result<RealField> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, 0)?;
    if magic != NSKF_MAGIC {
        return Err(Error::Format(format!(
            "bad magic bytes {magic:02x?} (expected {NSKF_MAGIC:02x?})"
        )));
    }
    let version = u32::from_le_bytes(r.take(4, 0)?.try_into().expect("4 bytes"));
    if version != NSKF_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {NSKF_VERSION})"
        )));
    }
    let dim = r.take(1, 0)?[0] as usize;
    if !(2..=3).contains(&dim) {
        return Err(Error::Format(format!("dimension {dim} is not 2 or 3")));
    }
    let header = 4 + 4 + 1 + 8 * dim + 8;
    let sizes: Vec<u64> = (0..dim).map(|_| r.u64(header)).collect::<Result<_>>()?;
    let length = r.f64(header)?;
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(Error::Format(format!("non-cubic grid sizes {sizes:?}")));
    }
    let n = usize::try_from(sizes[0]).map_err(|_| Error::Format("grid size overflows".into()))?;
    let grid = Grid::new(dim, n, length)?;
    let expected = header + 8 * grid.len();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} bytes of samples for {} grid points",
            bytes.len() - header,
            grid.len()
        )));
    }
    let values = (0..grid.len())
        .map(|_| r.f64(expected))
        .collect::<Result<Vec<_>>>()?;
    RealField::new(&grid, values)
}

pub fn write_field(f: &RealField, path: &Path) -> Result<()> {
    fs::write(path, encode_field(f)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<RealField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes)
}

/// Named initial data or fields read from NSKF files.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    /// `rho_bar + A cos x cos y` with the Taylor-Green velocity.
    TaylorGreen {
        amplitude: f64,
    },
    /// Constant density, zero velocity.
    Rest,
    /// Seeded band-limited density perturbation of size `amplitude` and a
    /// divergence-free velocity of unit maximum.
    Random {
        amplitude: f64,
        kmax: usize,
    },
    Files {
        rho: PathBuf,
        u: Vec<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub system: System,
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub rho_bar: f64,
    pub init: InitSpec,
    pub t_end: f64,
    pub dt_policy: DtPolicy,
    pub frames: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub kappas: Vec<f64>,
    pub picard_horizon: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<String>,
    n: Option<usize>,
    dim: Option<usize>,
    length: Option<f64>,
    kappa: Option<f64>,
    alpha: Option<f64>,
    rho_bar: Option<f64>,
    init: Option<String>,
    amplitude: Option<f64>,
    kmax: Option<usize>,
    rho_file: Option<PathBuf>,
    u_files: Option<Vec<PathBuf>>,
    t_end: Option<f64>,
    dt: Option<f64>,
    cfl_safety: Option<f64>,
    frames: Option<usize>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    alphas: Option<Vec<f64>>,
    kappas: Option<Vec<f64>>,
    picard_horizon: Option<f64>,
    picard_tol: Option<f64>,
    picard_max_iter: Option<usize>,
}

fn constraint(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {msg}")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    constraint(
        v.is_finite() && v > 0.0,
        key,
        &format!("must be finite and > 0 (got {v})"),
    )
}

/// Prefixes a TOML error with the key on the offending line.
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let key = e.span().and_then(|span| {
        let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
        let line = text[start..].lines().next()?;
        let (key, _) = line.split_once('=')?;
        Some(key.trim().to_string())
    });
    match key {
        Some(key) => Error::Config(format!("{key}: {}", e.message().trim())),
        None => Error::Config(e.message().trim().to_string()),
    }
}

/// Output root from `NSK_OUTPUT_DIR`, or `nsk-output`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

impl RunConfig {
    /// Defaults for every optional key.
    pub fn new(system: System, n: usize) -> Result<Self> {
        parse_config_with_root(
            &format!("system = \"{}\"\nn = {n}\n", system.name()),
            default_output_root(),
        )
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.n, self.length)
    }

    pub fn params(&self) -> Result<PhysParams> {
        PhysParams::new(self.system, self.kappa, self.alpha, self.rho_bar)
    }

    /// Builds the initial state on [`RunConfig::grid`].
    pub fn initial_state(&self) -> Result<FlowState> {
        let grid = self.grid()?;
        match &self.init {
            InitSpec::TaylorGreen { amplitude } => {
                FlowState::taylor_green(&grid, self.rho_bar, *amplitude)
            }
            InitSpec::Rest => FlowState::new(
                RealField::constant(&grid, self.rho_bar),
                vec![RealField::zeros(&grid); grid.dim()],
            ),
            InitSpec::Random { amplitude, kmax } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut rho = SpectralField::random_band_limited(&grid, *kmax, &mut rng);
                rho.coeffs_mut()[0] = Default::default();
                let rho = rho.inverse();
                let scale = rho.max_abs();
                let rho = rho.map(|v| self.rho_bar + amplitude * v / scale);
                let u: Vec<SpectralField> = (0..grid.dim())
                    .map(|_| SpectralField::random_band_limited(&grid, *kmax, &mut rng))
                    .collect();
                let u = inverse_vec(&leray_project(&u));
                let peak = u.iter().map(|c| c.max_abs()).fold(0.0, f64::max);
                let u = u.iter().map(|c| c.scaled(1.0 / peak)).collect();
                FlowState::new(rho, u)
            }
            InitSpec::Files { rho, u } => {
                let rho = read_field(rho)?;
                let u = u
                    .iter()
                    .map(|p| read_field(p))
                    .collect::<Result<Vec<_>>>()?;
                if *rho.grid() != grid {
                    return Err(Error::Config(format!(
                        "rho_file: grid (dim {}, n {}, L {}) disagrees with the config",
                        rho.grid().dim(),
                        rho.grid().n(),
                        rho.grid().length()
                    )));
                }
                FlowState::new(rho, u)
            }
        }
    }
}

/// [`parse_config_with_root`] with the root from [`default_output_root`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_root(text, default_output_root())
}

/// Parses flat `key = value` TOML. `system` and `n` are required, unknown keys
/// are rejected, and every constraint violation names its key.
pub fn parse_config_with_root(text: &str, output_root: PathBuf) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    let system: System = raw
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("system: missing required key".into()))?
        .parse()?;
    let n = raw
        .n
        .ok_or_else(|| Error::Config("n: missing required key".into()))?;
    constraint(
        n >= 8 && n % 2 == 0,
        "n",
        &format!("must be even and >= 8 (got {n})"),
    )?;
    let dim = raw.dim.unwrap_or(2);
    constraint(
        dim == 2 || dim == 3,
        "dim",
        &format!("must be 2 or 3 (got {dim})"),
    )?;
    let length = raw.length.unwrap_or(2.0 * std::f64::consts::PI);
    positive("length", length)?;
    let kappa = raw.kappa.unwrap_or(1.0);
    constraint(
        kappa.is_finite() && kappa >= 0.0,
        "kappa",
        &format!("must be finite and >= 0 (got {kappa})"),
    )?;
    let alpha = raw.alpha.unwrap_or(16.0);
    positive("alpha", alpha)?;
    let rho_bar = raw.rho_bar.unwrap_or(1.0);
    positive("rho_bar", rho_bar)?;
    PhysParams::new(system, kappa, alpha, rho_bar).map_err(|e| Error::Config(e.to_string()))?;

    let amplitude = raw.amplitude.unwrap_or(0.2);
    constraint(
        amplitude.is_finite() && amplitude >= 0.0 && amplitude < rho_bar,
        "amplitude",
        &format!("must lie in [0, rho_bar) to keep the density positive (got {amplitude})"),
    )?;
    let init_name = raw.init.as_deref().unwrap_or("taylor-green");
    let init =
        match init_name.replace('_', "-").as_str() {
            "taylor-green" => InitSpec::TaylorGreen { amplitude },
            "rest" => InitSpec::Rest,
            "random" => {
                let kmax = raw.kmax.unwrap_or(4);
                constraint(
                    kmax >= 1 && 3 * kmax < n,
                    "kmax",
                    &format!("must satisfy 1 <= kmax < n/3 (got {kmax})"),
                )?;
                InitSpec::Random { amplitude, kmax }
            }
            "files" => {
                let rho = raw.rho_file.clone().ok_or_else(|| {
                    Error::Config("rho_file: required when init = \"files\"".into())
                })?;
                let u = raw.u_files.clone().ok_or_else(|| {
                    Error::Config("u_files: required when init = \"files\"".into())
                })?;
                constraint(
                    u.len() == dim,
                    "u_files",
                    &format!("need {dim} velocity files"),
                )?;
                InitSpec::Files { rho, u }
            }
            other => {
                return Err(Error::Config(format!(
                    "init: unknown preset `{other}` (expected taylor-green, rest, random or files)"
                )))
            }
        };
    if !matches!(init, InitSpec::Files { .. }) {
        constraint(
            raw.rho_file.is_none() && raw.u_files.is_none(),
            "rho_file",
            "only allowed with init = \"files\"",
        )?;
    }

    let t_end = raw.t_end.unwrap_or(0.25);
    constraint(
        t_end.is_finite() && t_end >= 0.0,
        "t_end",
        &format!("must be finite and >= 0 (got {t_end})"),
    )?;
    let dt_policy = match (raw.dt, raw.cfl_safety) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "dt: give either dt (fixed step) or cfl_safety, not both".into(),
            ))
        }
        (Some(dt), None) => {
            positive("dt", dt)?;
            DtPolicy::Fixed(dt)
        }
        (None, safety) => {
            let safety = safety.unwrap_or(0.5);
            constraint(
                safety > 0.0 && safety <= 1.0,
                "cfl_safety",
                &format!("must lie in (0, 1] (got {safety})"),
            )?;
            DtPolicy::Cfl { safety }
        }
    };
    let frames = raw.frames.unwrap_or(32);
    constraint(frames >= 1, "frames", "must be >= 1")?;

    let alphas = raw
        .alphas
        .unwrap_or_else(|| crate::experiments::DEFAULT_ALPHAS.to_vec());
    for &a in &alphas {
        positive("alphas", a)?;
    }
    let kappas = raw
        .kappas
        .unwrap_or_else(|| crate::experiments::DEFAULT_KAPPAS.to_vec());
    for &k in &kappas {
        constraint(
            k.is_finite() && k >= 0.0,
            "kappas",
            &format!("entries must be finite and >= 0 (got {k})"),
        )?;
    }
    let picard_horizon = raw.picard_horizon.unwrap_or(0.05);
    positive("picard_horizon", picard_horizon)?;
    let picard_tol = raw.picard_tol.unwrap_or(1e-8);
    positive("picard_tol", picard_tol)?;
    let picard_max_iter = raw.picard_max_iter.unwrap_or(15);
    constraint(picard_max_iter >= 1, "picard_max_iter", "must be >= 1")?;

    Ok(RunConfig {
        system,
        dim,
        n,
        length,
        kappa,
        alpha,
        rho_bar,
        init,
        t_end,
        dt_policy,
        frames,
        output_dir: raw.output_dir.unwrap_or(output_root),
        seed: raw.seed.unwrap_or(0),
        alphas,
        kappas,
        picard_horizon,
        picard_tol,
        picard_max_iter,
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV with a header row. `None` cells are left empty.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Option<f64>>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map(format_float).unwrap_or_default())
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialize JSON: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Summary of one run; the last file written to its directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub wall_clock_seconds: f64,
    pub monitors: serde_json::Map<String, serde_json::Value>,
    pub artifacts: Vec<String>,
    pub exit_status: i32,
}

/// Creates `dir` and removes any manifest left by an earlier run.
pub fn prepare_run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stale = dir.join(MANIFEST_NAME);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    Ok(())
}

/// Writes `manifest.json`; fails if one already exists in `dir`.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(&path, e))
}
