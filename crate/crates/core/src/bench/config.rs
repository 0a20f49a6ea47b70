//! Benchmark and node configuration in `key = value` form.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use
//! underscores; `-` is accepted too.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::engine::Algorithm;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
}

/// Parses `key = value` lines, later keys overriding earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(ConfigError::Syntax(i + 1));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

fn read(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_pairs(&text)
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn ratio(key: &str, v: &str) -> Result<f64, ConfigError> {
    let r: f64 = value(key, v)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(ConfigError::Value {
            key: key.to_string(),
            reason: format!("{r} is outside [0, 1]"),
        });
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inproc" | "in-process" | "in_process" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport `{other}` (expected inproc or tcp)")),
        }
    }
}

/// Parameters of a distributed Eigenbench run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub nodes: usize,
    /// Total client flows, spread round-robin over the nodes.
    pub clients: usize,
    pub algorithm: Algorithm,
    /// Hot objects hosted on each node, shared by every client.
    pub hot_array_size: usize,
    /// Mild objects per client; only that client uses them.
    pub mild_array_size: usize,
    /// Client-local values, accessed outside transactions.
    pub cold_array_size: usize,
    pub ops_hot: usize,
    pub ops_mild: usize,
    /// Defaults to `ops_hot`.
    pub ops_cold: Option<usize>,
    pub read_ratio: f64,
    pub locality_probability: f64,
    pub history_length: usize,
    pub op_latency_ms: f64,
    pub txns_per_client: usize,
    pub seed: u64,
    /// Probability that a transaction aborts itself after its last
    /// operation.
    pub abort_probability: f64,
    pub transport: TransportKind,
    pub csv: Option<PathBuf>,
    pub record_history: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            nodes: 2,
            clients: 8,
            algorithm: Algorithm::OptsvaCf,
            hot_array_size: 10,
            mild_array_size: 10,
            cold_array_size: 10,
            ops_hot: 10,
            ops_mild: 0,
            ops_cold: None,
            read_ratio: 0.9,
            locality_probability: 0.5,
            history_length: 5,
            op_latency_ms: 3.0,
            txns_per_client: 10,
            seed: 1,
            abort_probability: 0.0,
            transport: TransportKind::InProcess,
            csv: None,
            record_history: None,
        }
    }
}

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::apply(read(path)?)
    }

    pub fn from_pairs(text: &str) -> Result<Self, ConfigError> {
        Self::apply(parse_pairs(text)?)
    }

    // `clients_per_node` depends on `nodes`, so it goes last.
    fn apply(mut pairs: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = BenchConfig::default();
        let per_node = pairs.remove("clients_per_node");
        for (k, v) in pairs {
            c.set(&k, &v)?;
        }
        if let Some(v) = per_node {
            c.set("clients_per_node", &v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "nodes" => self.nodes = value(k, v)?,
            "clients" => self.clients = value(k, v)?,
            "clients_per_node" => self.clients = value::<usize>(k, v)? * self.nodes,
            "algorithm" => self.algorithm = value(k, v)?,
            "hot_array_size" => self.hot_array_size = value(k, v)?,
            "mild_array_size" => self.mild_array_size = value(k, v)?,
            "cold_array_size" => self.cold_array_size = value(k, v)?,
            "ops_hot" => self.ops_hot = value(k, v)?,
            "ops_mild" => self.ops_mild = value(k, v)?,
            "ops_cold" => self.ops_cold = Some(value(k, v)?),
            "read_ratio" => self.read_ratio = ratio(k, v)?,
            "locality_probability" | "locality" => self.locality_probability = ratio(k, v)?,
            "history_length" => self.history_length = value(k, v)?,
            "op_latency_ms" => self.op_latency_ms = value(k, v)?,
            "txns_per_client" => self.txns_per_client = value(k, v)?,
            "seed" => self.seed = value(k, v)?,
            "abort_probability" => self.abort_probability = ratio(k, v)?,
            "transport" => self.transport = value(k, v)?,
            "csv" => self.csv = Some(PathBuf::from(v)),
            "record_history" => self.record_history = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                reason: reason.into(),
            })
        };
        for (k, r) in [
            ("read_ratio", self.read_ratio),
            ("locality_probability", self.locality_probability),
            ("abort_probability", self.abort_probability),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(k, "must be within [0, 1]");
            }
        }
        if self.nodes == 0 {
            return bad("nodes", "at least one node is needed");
        }
        if self.ops_hot > 0 && self.hot_array_size == 0 {
            return bad("hot_array_size", "hot operations need a hot array");
        }
        if self.ops_mild > 0 && self.mild_array_size == 0 {
            return bad("mild_array_size", "mild operations need a mild array");
        }
        if self.cold_ops() > 0 && self.cold_array_size == 0 {
            return bad("cold_array_size", "cold operations need a cold array");
        }
        if !(self.op_latency_ms >= 0.0) {
            return bad("op_latency_ms", "must be non-negative");
        }
        Ok(())
    }

    pub fn cold_ops(&self) -> usize {
        self.ops_cold.unwrap_or(self.ops_hot)
    }

    pub fn op_latency(&self) -> Duration {
        Duration::from_secs_f64(self.op_latency_ms / 1000.0)
    }
}

/// Settings of a standalone node process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeFileConfig {
    pub id: u32,
    pub listen: SocketAddr,
    /// Other nodes, as `id@host:port`.
    pub seeds: Vec<(u32, SocketAddr)>,
    pub heartbeat_interval: Duration,
    pub heartbeat_timeout: Duration,
    pub workers: usize,
}

impl Default for NodeFileConfig {
    fn default() -> Self {
        NodeFileConfig {
            id: 0,
            listen: "127.0.0.1:7400".parse().expect("literal address"),
            seeds: Vec::new(),
            heartbeat_interval: Duration::from_secs(1),
            heartbeat_timeout: Duration::from_secs(5),
            workers: 4,
        }
    }
}

/// Parses `id@host:port`.
pub fn parse_seed(s: &str) -> Result<(u32, SocketAddr), ConfigError> {
    let err = |reason: String| ConfigError::Value {
        key: "seeds".into(),
        reason,
    };
    let (id, addr) = s
        .trim()
        .split_once('@')
        .ok_or_else(|| err(format!("`{s}` is not id@host:port")))?;
    Ok((
        id.parse().map_err(|e| err(format!("{id}: {e}")))?,
        addr.parse().map_err(|e| err(format!("{addr}: {e}")))?,
    ))
}

impl NodeFileConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut c = NodeFileConfig::default();
        for (k, v) in read(path)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "id" => self.id = value(k, v)?,
            "listen" => self.listen = value(k, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(parse_seed)
                    .collect::<Result<_, _>>()?
            }
            "heartbeat_interval_ms" => self.heartbeat_interval = Duration::from_millis(value(k, v)?),
            "heartbeat_timeout_ms" => self.heartbeat_timeout = Duration::from_millis(value(k, v)?),
            "workers" => self.workers = value(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
        Ok(())
    }
}
