//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are rejected. Everything except `nodes`, `dimension` and `horizon`
//! has a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::Algorithm;
use crate::metrics::DEFAULT_WINDOW_FRACTION;

pub const DEFAULT_REPLICAS: usize = 200;
pub const DEFAULT_MU: f64 = 0.05;
pub const DEFAULT_RADIUS: f64 = 0.25;
pub const DEFAULT_DELTAS: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const DEFAULT_SIGMA2_U_RANGE: (f64, f64) = (1.0, 2.0);
pub const DEFAULT_NOISE_DB_RANGE: (f64, f64) = (-25.0, -10.0);
pub const DEFAULT_SEED: u64 = 1;

const KNOWN_KEYS: &[&str] = &[
    "nodes",
    "dimension",
    "horizon",
    "replicas",
    "mu",
    "seed",
    "topology",
    "radius",
    "topology_seed",
    "topology_file",
    "algorithms",
    "deltas",
    "delta_schedule",
    "y_diag",
    "sigma2_u_range",
    "noise_db_range",
    "regressor_cov_diag",
    "window_fraction",
    "trace_replicas",
    "out",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, key `{key}`: {message}")]
    Parse { line: usize, key: String, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Geometric { radius: f64, seed: Option<u64> },
    Path,
    Complete,
    /// Edge-list file, resolved against the config file's directory.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub nodes: usize,
    pub dimension: usize,
    pub horizon: usize,
    pub replicas: usize,
    pub mu: f64,
    pub seed: u64,
    pub topology: TopologySpec,
    pub algorithms: Vec<Algorithm>,
    /// One EB-ATC run per constant threshold.
    pub deltas: Vec<f64>,
    /// Optional extra EB-ATC run with a piecewise-constant threshold
    /// `(start instant, delta)`.
    pub delta_schedule: Option<Vec<(usize, f64)>>,
    /// Diagonal of the trigger weighting `Y`; identity when absent.
    pub y_diag: Option<Vec<f64>>,
    pub sigma2_u_range: (f64, f64),
    pub noise_db_range: (f64, f64),
    /// Replaces every node's sampled isotropic `R_u` by this diagonal.
    pub regressor_cov_diag: Option<Vec<f64>>,
    pub window_fraction: f64,
    /// Number of leading replicas whose full per-node traces are written.
    pub trace_replicas: usize,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything but the network size, dimension and horizon.
    pub fn with_defaults(nodes: usize, dimension: usize, horizon: usize) -> Self {
        Self {
            nodes,
            dimension,
            horizon,
            replicas: DEFAULT_REPLICAS,
            mu: DEFAULT_MU,
            seed: DEFAULT_SEED,
            topology: TopologySpec::Geometric {
                radius: DEFAULT_RADIUS,
                seed: None,
            },
            algorithms: vec![Algorithm::Atc, Algorithm::EbAtc, Algorithm::NonCoop],
            deltas: DEFAULT_DELTAS.to_vec(),
            delta_schedule: None,
            y_diag: None,
            sigma2_u_range: DEFAULT_SIGMA2_U_RANGE,
            noise_db_range: DEFAULT_NOISE_DB_RANGE,
            regressor_cov_diag: None,
            window_fraction: DEFAULT_WINDOW_FRACTION,
            trace_replicas: 0,
            out: None,
        }
    }

    /// Every violated constraint, empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.nodes == 0 {
            v.push("nodes must be >= 1".into());
        }
        if self.dimension == 0 {
            v.push("dimension must be >= 1".into());
        }
        if self.horizon == 0 {
            v.push("horizon must be >= 1".into());
        }
        if self.replicas == 0 {
            v.push("replicas must be >= 1".into());
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            v.push(format!("mu must be positive, got {}", self.mu));
        }
        match &self.topology {
            TopologySpec::Geometric { radius, .. } if !(*radius > 0.0 && *radius <= std::f64::consts::SQRT_2) => {
                v.push(format!("radius must lie in (0, √2], got {radius}"));
            }
            TopologySpec::File(p) if !p.is_file() => {
                v.push(format!("topology_file {} does not exist", p.display()));
            }
            _ => {}
        }
        if self.algorithms.is_empty() {
            v.push("algorithms must not be empty".into());
        }
        if self.algorithms.contains(&Algorithm::EbAtc) && self.deltas.is_empty() && self.delta_schedule.is_none() {
            v.push("ebatc needs deltas or delta_schedule".into());
        }
        if self.deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            v.push("deltas must be finite and >= 0".into());
        }
        if let Some(s) = &self.delta_schedule {
            if s.first().map(|p| p.0) != Some(0) {
                v.push("delta_schedule must start at instant 0".into());
            }
            if s.windows(2).any(|w| w[0].0 >= w[1].0) {
                v.push("delta_schedule instants must increase".into());
            }
            if s.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
                v.push("delta_schedule thresholds must be finite and >= 0".into());
            }
        }
        if let Some(y) = &self.y_diag {
            if y.len() != self.dimension {
                v.push(format!("y_diag has {} entries, dimension is {}", y.len(), self.dimension));
            }
            if y.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                v.push("y_diag entries must be finite and >= 0".into());
            }
        }
        let (ulo, uhi) = self.sigma2_u_range;
        if !(ulo > 0.0 && ulo <= uhi && uhi.is_finite()) {
            v.push(format!("sigma2_u_range must satisfy 0 < lo <= hi, got {ulo},{uhi}"));
        }
        let (nlo, nhi) = self.noise_db_range;
        if !(nlo.is_finite() && nhi.is_finite() && nlo <= nhi) {
            v.push(format!("noise_db_range must satisfy lo <= hi, got {nlo},{nhi}"));
        }
        if let Some(r) = &self.regressor_cov_diag {
            if r.len() != self.dimension {
                v.push(format!(
                    "regressor_cov_diag has {} entries, dimension is {}",
                    r.len(),
                    self.dimension
                ));
            }
            if r.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                v.push("regressor_cov_diag entries must be positive".into());
            }
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            v.push(format!("window_fraction must lie in (0, 1], got {}", self.window_fraction));
        } else if self.window_fraction * (self.horizon as f64) < 1.0 {
            v.push("horizon too short for window_fraction".into());
        }
        if self.trace_replicas > self.replicas {
            v.push("trace_replicas exceeds replicas".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(v))
        }
    }

    /// Resolved configuration in the input format, one key per line in a
    /// fixed order. Excludes `out`, which does not affect results.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("nodes", self.nodes.to_string());
        kv("dimension", self.dimension.to_string());
        kv("horizon", self.horizon.to_string());
        kv("replicas", self.replicas.to_string());
        kv("mu", self.mu.to_string());
        kv("seed", self.seed.to_string());
        match &self.topology {
            TopologySpec::Geometric { radius, seed } => {
                kv("topology", "geometric".into());
                kv("radius", radius.to_string());
                if let Some(s) = seed {
                    kv("topology_seed", s.to_string());
                }
            }
            TopologySpec::Path => kv("topology", "path".into()),
            TopologySpec::Complete => kv("topology", "complete".into()),
            TopologySpec::File(p) => {
                kv("topology", "file".into());
                kv("topology_file", p.display().to_string());
            }
        }
        kv("algorithms", join(self.algorithms.iter()));
        kv("deltas", join(self.deltas.iter()));
        if let Some(sched) = &self.delta_schedule {
            kv(
                "delta_schedule",
                sched.iter().map(|(i, d)| format!("{i}:{d}")).collect::<Vec<_>>().join(","),
            );
        }
        if let Some(y) = &self.y_diag {
            kv("y_diag", join(y.iter()));
        }
        kv("sigma2_u_range", format!("{},{}", self.sigma2_u_range.0, self.sigma2_u_range.1));
        kv("noise_db_range", format!("{},{}", self.noise_db_range.0, self.noise_db_range.1));
        if let Some(r) = &self.regressor_cov_diag {
            kv("regressor_cov_diag", join(r.iter()));
        }
        kv("window_fraction", self.window_fraction.to_string());
        kv("trace_replicas", self.trace_replicas.to_string());
        s
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn join<T: ToString>(it: impl Iterator<Item = T>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Parse and validate. Relative paths are resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                key: trimmed.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let key = k.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::Parse {
                line,
                key,
                message: "unknown key".into(),
            });
        }
        if entries.contains_key(&key) {
            return Err(ConfigError::Parse {
                line,
                key,
                message: "repeated key".into(),
            });
        }
        entries.insert(key, (line, v.trim().to_string()));
    }

    let p = Fields { entries };
    let nodes = p.required("nodes")?;
    let dimension = p.required("dimension")?;
    let horizon = p.required("horizon")?;
    let mut cfg = ExperimentConfig::with_defaults(nodes, dimension, horizon);
    if let Some(v) = p.get("replicas")? {
        cfg.replicas = v;
    }
    if let Some(v) = p.get("mu")? {
        cfg.mu = v;
    }
    if let Some(v) = p.get("seed")? {
        cfg.seed = v;
    }
    let radius = p.get::<f64>("radius")?;
    let topology_seed = p.get::<u64>("topology_seed")?;
    let topology_file = p.raw("topology_file");
    let kind = p.raw("topology");
    cfg.topology = match kind.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "geometric")) => TopologySpec::Geometric {
            radius: radius.unwrap_or(DEFAULT_RADIUS),
            seed: topology_seed,
        },
        Some((_, "path")) => TopologySpec::Path,
        Some((_, "complete")) => TopologySpec::Complete,
        Some((line, "file")) => match &topology_file {
            Some((_, f)) => TopologySpec::File(base_dir.join(f)),
            None => {
                return Err(ConfigError::Parse {
                    line,
                    key: "topology".into(),
                    message: "topology = file needs topology_file".into(),
                })
            }
        },
        Some((line, other)) => {
            return Err(ConfigError::Parse {
                line,
                key: "topology".into(),
                message: format!("expected geometric, path, complete or file, got `{other}`"),
            })
        }
    };
    if let Some((line, s)) = p.raw("algorithms") {
        cfg.algorithms = s
            .split(',')
            .map(|a| match a.trim() {
                "atc" => Ok(Algorithm::Atc),
                "ebatc" => Ok(Algorithm::EbAtc),
                "noncoop" => Ok(Algorithm::NonCoop),
                other => Err(ConfigError::Parse {
                    line,
                    key: "algorithms".into(),
                    message: format!("unknown algorithm `{other}`"),
                }),
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = p.list::<f64>("deltas")? {
        cfg.deltas = v;
    }
    if let Some((line, s)) = p.raw("delta_schedule") {
        let bad = |message: String| ConfigError::Parse {
            line,
            key: "delta_schedule".into(),
            message,
        };
        cfg.delta_schedule = Some(
            s.split(',')
                .map(|piece| {
                    let (i, d) = piece
                        .split_once(':')
                        .ok_or_else(|| bad(format!("expected `instant:delta`, got `{piece}`")))?;
                    let i = i.trim().parse().map_err(|e| bad(format!("{e}")))?;
                    let d = d.trim().parse().map_err(|e| bad(format!("{e}")))?;
                    Ok((i, d))
                })
                .collect::<Result<_, _>>()?,
        );
    }
    cfg.y_diag = p.list("y_diag")?;
    if let Some(v) = p.pair("sigma2_u_range")? {
        cfg.sigma2_u_range = v;
    }
    if let Some(v) = p.pair("noise_db_range")? {
        cfg.noise_db_range = v;
    }
    cfg.regressor_cov_diag = p.list("regressor_cov_diag")?;
    if let Some(v) = p.get("window_fraction")? {
        cfg.window_fraction = v;
    }
    if let Some(v) = p.get("trace_replicas")? {
        cfg.trace_replicas = v;
    }
    cfg.out = p.raw("out").map(|(_, s)| base_dir.join(s));

    let mut violations = cfg.violations();
    if !matches!(cfg.topology, TopologySpec::Geometric { .. }) {
        if radius.is_some() {
            violations.push("radius only applies to topology = geometric".into());
        }
        if topology_seed.is_some() {
            violations.push("topology_seed only applies to topology = geometric".into());
        }
    }
    if topology_file.is_some() && !matches!(cfg.topology, TopologySpec::File(_)) {
        violations.push("topology_file only applies to topology = file".into());
    }
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(violations))
    }
}

struct Fields {
    entries: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn raw(&self, key: &str) -> Option<(usize, String)> {
        self.entries.get(key).cloned()
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|(line, s)| {
                s.parse().map_err(|e: T::Err| ConfigError::Parse {
                    line,
                    key: key.into(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Parse {
            line: 0,
            key: key.into(),
            message: "required key missing".into(),
        })
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|(line, s)| {
                s.split(',')
                    .map(|x| {
                        x.trim().parse().map_err(|e: T::Err| ConfigError::Parse {
                            line,
                            key: key.into(),
                            message: format!("`{}`: {e}", x.trim()),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    fn pair(&self, key: &str) -> Result<Option<(f64, f64)>, ConfigError> {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        match self.list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => Err(ConfigError::Parse {
                line,
                key: key.into(),
                message: format!("expected two comma-separated numbers, got {}", v.len()),
            }),
        }
    }
}
