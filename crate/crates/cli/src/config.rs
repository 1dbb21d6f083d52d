//! Stack configuration file.
//!
//! One versioned document, TOML or JSON by file extension:
//!
//! ```toml
//! schema_version = 1
//!
//! [engine]
//! vocab_size = 32000
//! retry_after_ms = 50
//! switch_wait_timeout_ms = 10000
//!
//! [[cluster]]
//! id = "dual-0"
//! tags = ["rollout", "train"]
//! peak_flops = 989e12
//! hbm_bandwidth = 3.35e12
//!
//! [runtime]
//! slots_per_node = 2
//! batch_size = 4
//!
//! [dataloader]
//! source = "tasks.jsonl"   # relative to this file
//!
//! [server]
//! host = "127.0.0.1"
//! ports = { engine = 8101, trajectory = 8102, rollout = 8103, scheduler = 8104, data = 8105 }
//! ```
//!
//! Only `schema_version` and `cluster` are required.

use std::collections::BTreeSet;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rollplane_core::engine::EngineConfig;
use rollplane_core::runtime::RuntimeConfig;
use rollplane_core::scheduler::{CapabilityTag, ResourceDescriptor};
use rollplane_core::sim::NodeSpec;
use rollplane_core::trajectory::TrajectoryManagerConfig;
use rollplane_server::Service;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {path}: {reason}")]
    Invalid { path: String, reason: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Field path of a validation failure.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub vocab_size: u32,
    pub retry_after_ms: u64,
    pub switch_wait_timeout_ms: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineSection {
            vocab_size: e.vocab_size,
            retry_after_ms: e.retry_after_ms,
            switch_wait_timeout_ms: TrajectoryManagerConfig::default().switch_wait_timeout_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub slots_per_node: usize,
    pub batch_size: usize,
    pub max_new_tokens: usize,
    /// Virtual duration of one stub training round.
    pub train_ticks: u64,
    pub tool_tokens: usize,
    pub seed: u64,
    pub max_ticks: u64,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        let r = RuntimeConfig::default();
        RuntimeSection {
            slots_per_node: r.slots_per_node,
            batch_size: r.batch_size,
            max_new_tokens: r.max_new_tokens,
            train_ticks: r.train_ticks,
            tool_tokens: r.tool_tokens,
            seed: r.seed,
            max_ticks: r.max_ticks,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ports {
    pub engine: u16,
    pub trajectory: u16,
    pub rollout: u16,
    pub scheduler: u16,
    pub data: u16,
}

impl Default for Ports {
    fn default() -> Self {
        Ports {
            engine: 8101,
            trajectory: 8102,
            rollout: 8103,
            scheduler: 8104,
            data: 8105,
        }
    }
}

impl Ports {
    pub fn get(&self, s: Service) -> u16 {
        match s {
            Service::Engine => self.engine,
            Service::Trajectory => self.trajectory,
            Service::Rollout => self.rollout,
            Service::Scheduler => self.scheduler,
            Service::Data => self.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub host: String,
    pub ports: Ports,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            host: "127.0.0.1".into(),
            ports: Ports::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    #[serde(default)]
    engine: EngineSection,
    cluster: Option<Vec<NodeSpec>>,
    #[serde(default)]
    runtime: RuntimeSection,
    #[serde(default)]
    dataloader: DataSection,
    #[serde(default)]
    server: ServerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub schema_version: u32,
    pub engine: EngineSection,
    pub cluster: Vec<NodeSpec>,
    pub runtime: RuntimeSection,
    pub dataloader: DataSection,
    pub server: ServerSection,
}

/// Values taken from flags or the environment; `Some` beats the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tasks: Option<PathBuf>,
    pub host: Option<String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Config::parse(&text, Format::of(path), path)?;
        if let Some(src) = &cfg.dataloader.source {
            if src.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataloader.source = Some(base.join(src));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, format: Format, origin: &Path) -> Result<Config, ConfigError> {
        let raw: RawConfig = format.decode(text).map_err(|message| ConfigError::Parse {
            path: origin.to_path_buf(),
            message,
        })?;
        let cfg = Config {
            schema_version: raw
                .schema_version
                .ok_or_else(|| ConfigError::invalid("schema_version", "missing"))?,
            engine: raw.engine,
            cluster: raw
                .cluster
                .ok_or_else(|| ConfigError::invalid("cluster", "missing section"))?,
            runtime: raw.runtime,
            dataloader: raw.dataloader,
            server: raw.server,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.runtime.seed = seed;
        }
        if let Some(t) = &o.tasks {
            self.dataloader.source = Some(t.clone());
        }
        if let Some(h) = &o.host {
            self.server.host = h.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.engine.vocab_size < 2 {
            return Err(ConfigError::invalid("engine.vocab_size", "must be at least 2"));
        }
        if self.engine.switch_wait_timeout_ms == 0 {
            return Err(ConfigError::invalid(
                "engine.switch_wait_timeout_ms",
                "must be positive",
            ));
        }
        if self.cluster.is_empty() {
            return Err(ConfigError::invalid("cluster", "needs at least one resource"));
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.cluster.iter().enumerate() {
            if n.id.as_str().is_empty() {
                return Err(ConfigError::invalid(format!("cluster[{i}].id"), "empty"));
            }
            if !ids.insert(n.id.clone()) {
                return Err(ConfigError::invalid(
                    format!("cluster[{i}].id"),
                    format!("duplicate id {}", n.id),
                ));
            }
            if n.tags.is_empty() {
                return Err(ConfigError::invalid(
                    format!("cluster[{i}].tags"),
                    "needs at least one capability tag",
                ));
            }
            if !(n.peak_flops.is_finite() && n.peak_flops > 0.0) {
                return Err(ConfigError::invalid(
                    format!("cluster[{i}].peak_flops"),
                    "must be a positive number",
                ));
            }
            if !(n.hbm_bandwidth.is_finite() && n.hbm_bandwidth > 0.0) {
                return Err(ConfigError::invalid(
                    format!("cluster[{i}].hbm_bandwidth"),
                    "must be a positive number",
                ));
            }
        }
        for tag in [CapabilityTag::Rollout, CapabilityTag::Train] {
            if !self.cluster.iter().any(|n| n.tags.contains(&tag)) {
                return Err(ConfigError::invalid(
                    "cluster",
                    format!("no resource carries the {tag} tag"),
                ));
            }
        }
        let r = &self.runtime;
        for (field, v) in [
            ("runtime.slots_per_node", r.slots_per_node as u64),
            ("runtime.batch_size", r.batch_size as u64),
            ("runtime.max_new_tokens", r.max_new_tokens as u64),
            ("runtime.max_ticks", r.max_ticks),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if self.server.host.parse::<IpAddr>().is_err() {
            return Err(ConfigError::invalid(
                "server.host",
                format!("{:?} is not an IP address", self.server.host),
            ));
        }
        let mut seen = BTreeSet::new();
        for s in Service::ORDER {
            let p = self.server.ports.get(s);
            if p != 0 && !seen.insert(p) {
                return Err(ConfigError::invalid(
                    format!("server.ports.{}", s.name()),
                    format!("port {p} is used twice"),
                ));
            }
        }
        Ok(())
    }

    pub fn descriptors(&self) -> Vec<ResourceDescriptor> {
        self.cluster.iter().map(NodeSpec::descriptor).collect()
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        let r = &self.runtime;
        RuntimeConfig {
            slots_per_node: r.slots_per_node,
            batch_size: r.batch_size,
            max_new_tokens: r.max_new_tokens,
            train_ticks: r.train_ticks,
            tool_tokens: r.tool_tokens,
            seed: r.seed,
            vocab_size: self.engine.vocab_size,
            max_ticks: r.max_ticks,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            vocab_size: self.engine.vocab_size,
            retry_after_ms: self.engine.retry_after_ms,
            ..EngineConfig::default()
        }
    }

    pub fn proxy_config(&self) -> TrajectoryManagerConfig {
        TrajectoryManagerConfig {
            switch_wait_timeout_ms: self.engine.switch_wait_timeout_ms,
        }
    }

    pub fn addrs(&self) -> Vec<(Service, SocketAddr)> {
        let ip: IpAddr = self.server.host.parse().expect("validated");
        Service::ORDER
            .into_iter()
            .map(|s| (s, SocketAddr::new(ip, self.server.ports.get(s))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    /// `.json` is JSON; anything else is read as TOML.
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }

    pub fn decode<T: serde::de::DeserializeOwned>(self, text: &str) -> Result<T, String> {
        match self {
            Format::Json => serde_json::from_str(text).map_err(|e| e.to_string()),
            Format::Toml => toml::from_str(text).map_err(|e| e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1

[[cluster]]
id = "dual-0"
tags = ["rollout", "train"]
peak_flops = 989e12
hbm_bandwidth = 3.35e12

[[cluster]]
id = "roll-0"
tags = ["rollout"]
peak_flops = 400e12
hbm_bandwidth = 3.35e12
"#;

    fn parse(text: &str) -> Result<Config, ConfigError> {
        Config::parse(text, Format::Toml, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.cluster.len(), 2);
        assert_eq!(c.runtime, RuntimeSection::default());
        assert_eq!(c.server.ports.engine, 8101);
        assert_eq!(c.runtime_config().vocab_size, 32_000);
    }

    #[test]
    fn missing_cluster_is_named() {
        let err = parse("schema_version = 1\n").unwrap_err();
        assert_eq!(err.field(), Some("cluster"));
        assert!(err.to_string().contains("cluster"));
    }

    #[test]
    fn missing_schema_version() {
        let text = MINIMAL.replace("schema_version = 1", "");
        assert_eq!(parse(&text).unwrap_err().field(), Some("schema_version"));
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert_eq!(parse(&text).unwrap_err().field(), Some("schema_version"));
    }

    #[test]
    fn field_paths_index_the_cluster() {
        let text = MINIMAL.replace("tags = [\"rollout\"]", "tags = []");
        assert_eq!(parse(&text).unwrap_err().field(), Some("cluster[1].tags"));
        let text = MINIMAL.replace("\"roll-0\"", "\"dual-0\"");
        assert_eq!(parse(&text).unwrap_err().field(), Some("cluster[1].id"));
        let text = MINIMAL.replacen("peak_flops = 989e12", "peak_flops = -1.0", 1);
        assert_eq!(parse(&text).unwrap_err().field(), Some("cluster[0].peak_flops"));
    }

    #[test]
    fn cluster_needs_both_roles() {
        let text = MINIMAL.replace("tags = [\"rollout\", \"train\"]", "tags = [\"rollout\"]");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.field(), Some("cluster"));
        assert!(err.to_string().contains("train"));
    }

    #[test]
    fn unknown_keys_and_bad_tags_are_parse_errors() {
        let text = format!("{MINIMAL}\n[runtime]\nbogus = 1\n");
        assert!(matches!(parse(&text), Err(ConfigError::Parse { .. })));
        let text = MINIMAL.replace("\"rollout\"]", "\"inference\"]");
        assert!(matches!(parse(&text), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn runtime_and_server_checks() {
        let text = format!("{MINIMAL}\n[runtime]\nbatch_size = 0\n");
        assert_eq!(parse(&text).unwrap_err().field(), Some("runtime.batch_size"));
        let text = format!("{MINIMAL}\n[server]\nhost = \"nowhere\"\n");
        assert_eq!(parse(&text).unwrap_err().field(), Some("server.host"));
        let text = format!("{MINIMAL}\n[server.ports]\ndata = 8101\n");
        assert_eq!(parse(&text).unwrap_err().field(), Some("server.ports.data"));
        let text = format!("{MINIMAL}\n[server.ports]\nengine = 0\ndata = 0\n");
        assert!(parse(&text).is_ok());
    }

    #[test]
    fn json_matches_toml() {
        let t = parse(MINIMAL).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let j = Config::parse(&json, Format::Json, Path::new("x.json")).unwrap();
        assert_eq!(t, j);
    }

    #[test]
    fn overrides_beat_the_file() {
        let mut c = parse(&format!("{MINIMAL}\n[runtime]\nseed = 4\n")).unwrap();
        c.apply(&Overrides::default());
        assert_eq!(c.runtime.seed, 4);
        c.apply(&Overrides {
            seed: Some(9),
            tasks: Some("t.jsonl".into()),
            host: Some("0.0.0.0".into()),
        });
        assert_eq!(c.runtime.seed, 9);
        assert_eq!(c.dataloader.source.as_deref(), Some(Path::new("t.jsonl")));
        assert_eq!(c.server.host, "0.0.0.0");
    }

    #[test]
    fn format_by_extension() {
        assert_eq!(Format::of(Path::new("a.JSON")), Format::Json);
        assert_eq!(Format::of(Path::new("a.toml")), Format::Toml);
        assert_eq!(Format::of(Path::new("a")), Format::Toml);
    }
}
