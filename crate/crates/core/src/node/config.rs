use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{NodeError, Result};

pub const ENV_LISTEN_PORT: &str = "EDGEVOTE_LISTEN_PORT";
pub const ENV_SHARED_SECRET: &str = "EDGEVOTE_SHARED_SECRET";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Gateway,
    #[default]
    Master,
    Worker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub role: Role,
    pub listen_address: String,
    pub master_address: Option<String>,
    pub node_id: String,
    /// Peer id used for delay lookup when talking to the master.
    pub master_id: String,
    pub heavy_load_threshold: f64,
    pub cloud_enabled: bool,
    pub cloud_address: Option<String>,
    pub cloud_id: String,
    pub heartbeat_interval_ms: u64,
    pub shared_secret: String,
    /// One-way delay in ms slept before every send to the named peer.
    pub injected_hop_delay_ms: BTreeMap<String, f64>,
    /// Executors co-located in the master process (`actor0`, `actor1`, ...).
    pub local_actors: usize,
    /// Scripted CPU loads cycled per sample; OS sampling when empty.
    pub load_profile: Vec<f64>,
    /// Where `Named` model references are resolved.
    pub model_dir: Option<PathBuf>,
    /// Workers skip registration when false (cloud nodes).
    pub register: bool,
    pub placement_timeout_ms: u64,
    pub dispatch_timeout_ms: u64,
    pub max_connect_attempts: u32,
    /// Extra sleep added to every task execution; fault-injection hook.
    pub exec_delay_ms: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            role: Role::Master,
            listen_address: "127.0.0.1:0".into(),
            master_address: None,
            node_id: "master".into(),
            master_id: "master".into(),
            heavy_load_threshold: 0.8,
            cloud_enabled: false,
            cloud_address: None,
            cloud_id: "cloud".into(),
            heartbeat_interval_ms: 500,
            shared_secret: "edgevote".into(),
            injected_hop_delay_ms: BTreeMap::new(),
            local_actors: 0,
            load_profile: Vec::new(),
            model_dir: None,
            register: true,
            placement_timeout_ms: 10_000,
            dispatch_timeout_ms: 10_000,
            max_connect_attempts: 5,
            exec_delay_ms: 0,
        }
    }
}

impl NodeConfig {
    pub fn for_role(role: Role, node_id: impl Into<String>) -> Self {
        NodeConfig { role, node_id: node_id.into(), ..NodeConfig::default() }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| NodeError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NodeError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the listen-port and shared-secret environment overrides
    /// through `lookup`, so callers decide where variables come from.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(port) = lookup(ENV_LISTEN_PORT) {
            let port: u16 = port
                .trim()
                .parse()
                .map_err(|_| NodeError::Config(format!("{ENV_LISTEN_PORT}={port:?} is not a port")))?;
            let host = self.listen_address.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h);
            self.listen_address = format!("{host}:{port}");
        }
        if let Some(secret) = lookup(ENV_SHARED_SECRET) {
            self.shared_secret = secret;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.heavy_load_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(NodeError::Config(format!("heavy_load_threshold must be in (0, 1], got {t}")));
        }
        let needs_master = match self.role {
            Role::Gateway => true,
            Role::Worker => self.register,
            Role::Master => false,
        };
        if needs_master && self.master_address.is_none() {
            return Err(NodeError::Config(format!("{:?} requires master_address", self.role)));
        }
        if self.role == Role::Master && self.cloud_enabled && self.cloud_address.is_none() {
            return Err(NodeError::Config("cloud_enabled requires cloud_address".into()));
        }
        if self.node_id.is_empty() {
            return Err(NodeError::Config("node_id must not be empty".into()));
        }
        if let Some((peer, d)) = self.injected_hop_delay_ms.iter().find(|(_, d)| !(d.is_finite() && **d >= 0.0)) {
            return Err(NodeError::Config(format!("delay to {peer} must be >= 0, got {d}")));
        }
        if let Some(l) = self.load_profile.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(NodeError::Config(format!("load profile values must be in [0, 1], got {l}")));
        }
        if self.heartbeat_interval_ms == 0 || self.max_connect_attempts == 0 {
            return Err(NodeError::Config("heartbeat interval and connect attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn master_address(&self) -> Result<&str> {
        self.master_address.as_deref().ok_or_else(|| NodeError::Config("master_address is not set".into()))
    }

    pub fn heartbeat_interval(&self) -> Duration {
        Duration::from_millis(self.heartbeat_interval_ms)
    }

    pub fn placement_timeout(&self) -> Duration {
        Duration::from_millis(self.placement_timeout_ms)
    }

    pub fn dispatch_timeout(&self) -> Duration {
        Duration::from_millis(self.dispatch_timeout_ms)
    }
}
